//! Image and table rendering: reconstruction panels with error maps, learned
//! k-space weight maps, the scaling plot and plain-text tables.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::dc::RHO_ONE;
use crate::error::invalid;
use crate::experiments::{FitResult, ScalingPoint};
use crate::mask::Pattern;
use crate::params::ParamStore;
use crate::{Error, Result, Tensor};

/// Maps `[lo, hi]` linearly to 0..=255, clamping outside.
pub fn to_gray(data: &[f32], h: usize, w: usize, lo: f32, hi: f32) -> Result<GrayImage> {
    if data.len() != h * w {
        return Err(invalid!("{} values for a {h}x{w} image", data.len()));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (data[y as usize * w + x as usize] - lo) / span;
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    }))
}

fn tile(images: &[Option<&GrayImage>], cols: usize, th: u32, tw: u32) -> GrayImage {
    let rows = images.len().div_ceil(cols);
    let mut out = GrayImage::new(tw * cols as u32, th * rows as u32);
    for (i, img) in images.iter().enumerate() {
        if let Some(img) = img {
            let (ox, oy) = ((i % cols) as u32 * tw, (i / cols) as u32 * th);
            for (x, y, p) in img.enumerate_pixels() {
                out.put_pixel(ox + x, oy + y, *p);
            }
        }
    }
    out
}

/// Two rows for one frame: reference, zero-filled and reconstruction on
/// top; absolute errors of the latter two, amplified by `err_gain`, below.
pub fn recon_panel(reference: &Tensor<f32>, zero_filled: &Tensor<f32>, recon: &Tensor<f32>, err_gain: f32) -> Result<GrayImage> {
    let s = reference.shape();
    let [h, w] = s[..] else {
        return Err(invalid!("panel expects [H, W] images, got {s:?}"));
    };
    if zero_filled.shape() != s || recon.shape() != s {
        return Err(invalid!("panel images {:?}, {:?} vs reference {s:?}", zero_filled.shape(), recon.shape()));
    }
    let hi = reference.data().iter().fold(0.0f32, |m, &v| m.max(v));
    let img = |t: &Tensor<f32>| to_gray(t.data(), h, w, 0.0, hi);
    let err = |t: &Tensor<f32>| {
        let e: Vec<f32> = t.data().iter().zip(reference.data()).map(|(a, b)| (a - b).abs() * err_gain).collect();
        to_gray(&e, h, w, 0.0, hi)
    };
    let parts = [img(reference)?, img(zero_filled)?, img(recon)?, err(zero_filled)?, err(recon)?];
    Ok(tile(&[Some(&parts[0]), Some(&parts[1]), Some(&parts[2]), None, Some(&parts[3]), Some(&parts[4])], 3, h as u32, w as u32))
}

/// Center `size x size` crops of every learned weight map of cascade `t`
/// (`softplus(rho)`), side by side on a shared scale; returns the image and
/// the pattern names in tile order.
pub fn weight_map_panel(params: &ParamStore<f32>, t: usize, size: usize) -> Result<(GrayImage, Vec<String>)> {
    let prefix = format!("c{t:02}.dc.rho.");
    let mut names = Vec::new();
    let mut maps = Vec::new();
    for (k, v) in params.iter().filter(|(k, _)| k.starts_with(&prefix)) {
        let [gh, gw] = v.shape()[..] else { continue };
        if size > gh || size > gw {
            return Err(invalid!("crop {size} exceeds the {gh}x{gw} grid of `{k}`"));
        }
        let (top, left) = ((gh - size) / 2, (gw - size) / 2);
        let crop: Vec<f32> = (0..size * size)
            .map(|i| sdum_autograd::softplus(v.data()[(top + i / size) * gw + left + i % size]))
            .collect();
        names.push(k[prefix.len()..].to_string());
        maps.push(crop);
    }
    if maps.is_empty() {
        return Err(Error::Param { key: format!("{prefix}*"), detail: "no weight maps (simple DC model?)".into() });
    }
    let ordered: Vec<usize> = {
        let mut idx: Vec<usize> = (0..names.len()).collect();
        idx.sort_by_key(|&i| names[i].parse::<Pattern>().map(|p| p.index()).unwrap_or(usize::MAX));
        idx
    };
    let hi = maps.iter().flatten().fold(sdum_autograd::softplus(RHO_ONE as f32), |m, &v| m.max(v));
    let imgs = ordered.iter().map(|&i| to_gray(&maps[i], size, size, 0.0, hi)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<Option<&GrayImage>> = imgs.iter().map(Some).collect();
    let names = ordered.iter().map(|&i| names[i].clone()).collect();
    Ok((tile(&refs, refs.len().min(3), size as u32, size as u32), names))
}

fn draw_disc(img: &mut RgbImage, cx: f64, cy: f64, r: f64, c: Rgb<u8>) {
    let (w, h) = img.dimensions();
    for y in (cy - r).floor().max(0.0) as u32..((cy + r).ceil() as u32 + 1).min(h) {
        for x in (cx - r).floor().max(0.0) as u32..((cx + r).ceil() as u32 + 1).min(w) {
            if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                img.put_pixel(x, y, c);
            }
        }
    }
}

/// PSNR against `ln(params)` with the fitted line.
pub fn scaling_plot(points: &[ScalingPoint], fit: &FitResult, w: u32, h: u32) -> Result<RgbImage> {
    if points.is_empty() {
        return Err(invalid!("nothing to plot"));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.params.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.psnr).collect();
    let bounds = |v: &[f64]| {
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let pad = ((hi - lo) * 0.1).max(1e-3);
        (lo - pad, hi + pad)
    };
    let (x0, x1) = bounds(&xs);
    let (y0, y1) = bounds(&ys);
    let m = 20.0;
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w as f64 - 2.0 * m);
    let py = |y: f64| h as f64 - m - (y - y0) / (y1 - y0) * (h as f64 - 2.0 * m);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    for i in m as u32..w - m as u32 {
        img.put_pixel(i, h - m as u32, Rgb([0, 0, 0]));
    }
    for j in m as u32..h - m as u32 {
        img.put_pixel(m as u32, j, Rgb([0, 0, 0]));
    }
    let steps = 4 * w;
    for k in 0..=steps {
        let x = x0 + (x1 - x0) * k as f64 / steps as f64;
        let y = fit.intercept + fit.slope * x;
        if (y0..=y1).contains(&y) {
            draw_disc(&mut img, px(x), py(y), 1.0, Rgb([200, 40, 40]));
        }
    }
    for (x, y) in xs.iter().zip(&ys) {
        draw_disc(&mut img, px(*x), py(*y), 4.0, Rgb([30, 60, 200]));
    }
    Ok(img)
}

pub fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|e| Error::io(path, e))
}

/// Left-aligned columns separated by two spaces.
pub fn text_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    out.push_str(&line(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(|s| s.as_str()).collect()));
    for r in rows {
        out.push('\n');
        out.push_str(&line(r.iter().map(|s| s.as_str()).collect()));
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{published_scaling_table, scaling_fit};
    use crate::unroll::{Model, ModelConfig};

    #[test]
    fn gray_mapping_and_panel_layout() {
        let g = to_gray(&[0.0, 0.5, 1.0, 2.0], 2, 2, 0.0, 1.0).unwrap();
        assert_eq!(g.as_raw(), &[0, 128, 255, 255]);
        assert!(to_gray(&[0.0], 2, 2, 0.0, 1.0).is_err());
        let r = Tensor::from_fn(&[8, 6], |i| (i % 6) as f32);
        let p = recon_panel(&r, &r.map(|v| v * 0.5), &r, 4.0).unwrap();
        assert_eq!(p.dimensions(), (18, 16));
        assert!(p.get_pixel(16, 12).0[0] == 0, "perfect reconstruction has a black error map");
        assert!(p.get_pixel(10, 12).0[0] > 0);
    }

    #[test]
    fn weight_maps_and_plot() {
        let cfg = ModelConfig { cascades: 1, coils: 2, weight_grid: 16, ..Default::default() };
        let params = Model::new(&cfg).unwrap().init::<f32>(0).unwrap();
        let (img, names) = weight_map_panel(&params, 0, 8).unwrap();
        assert_eq!(names.len(), Pattern::ALL.len());
        assert_eq!(names[0], "uniform");
        assert!(img.pixels().all(|p| p.0[0] == 255));
        assert!(weight_map_panel(&params, 3, 8).is_err());
        let pts = published_scaling_table();
        let plot = scaling_plot(&pts, &scaling_fit(&pts).unwrap(), 320, 240).unwrap();
        assert_eq!(plot.dimensions(), (320, 240));
        assert!(plot.pixels().any(|p| p.0 == [30, 60, 200]));
    }

    #[test]
    fn table_alignment() {
        let t = text_table(&["a", "long"], &[vec!["xyz".into(), "1".into()]]);
        assert_eq!(t, "a    long\n---  ----\nxyz  1\n");
    }
}
