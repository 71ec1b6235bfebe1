//! Image-quality metrics on real magnitude images and paired comparisons.

use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::{Float, Result, Tape, Tensor, Var};

/// Reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair<T: Float>(x: &Tensor<T>, reference: &Tensor<T>) -> Result<()> {
    if x.shape() != reference.shape() {
        return Err(invalid!("image {:?} vs reference {:?}", x.shape(), reference.shape()));
    }
    if reference.data().iter().all(|&v| v == T::zero()) {
        return Err(invalid!("reference image is all zero"));
    }
    Ok(())
}

fn max_of<T: Float>(t: &Tensor<T>) -> f64 {
    t.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.as_f64()))
}

/// `10 log10(max(x)^2 / mse)` with the peak taken from the reference.
pub fn psnr<T: Float>(x: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    check_pair(x, reference)?;
    let mse = x.data().iter().zip(reference.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>()
        / x.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_of(reference).powi(2) / mse).log10()).min(PSNR_CAP))
}

/// `||x - ref||^2 / ||ref||^2`.
pub fn nmse<T: Float>(x: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    check_pair(x, reference)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in x.data().iter().zip(reference.data()) {
        let (a, b) = (a.as_f64(), b.as_f64());
        num += (a - b) * (a - b);
        den += b * b;
    }
    Ok(num / den)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean local SSIM over every `[.., H, W]` plane with dynamic range `range`.
pub fn ssim_var<'t, T: Float>(x: Var<'t, T>, reference: Var<'t, T>, range: f64) -> Result<Var<'t, T>> {
    if x.shape() != reference.shape() {
        return Err(invalid!("image {:?} vs reference {:?}", x.shape(), reference.shape()));
    }
    if !(range > 0.0) {
        return Err(invalid!("SSIM needs a positive dynamic range, got {range}"));
    }
    let win: Vec<T> = gaussian_window(SSIM_WINDOW, SSIM_SIGMA).into_iter().map(T::c).collect();
    let c1 = T::c((SSIM_K1 * range).powi(2));
    let c2 = T::c((SSIM_K2 * range).powi(2));
    let blur = |v: Var<'t, T>| v.separable_filter_valid(&win);
    let mx = blur(x)?;
    let my = blur(reference)?;
    let sxx = blur(x.square())?.sub(mx.square())?;
    let syy = blur(reference.square())?.sub(my.square())?;
    let sxy = blur(x.mul(reference)?)?.sub(mx.mul(my)?)?;
    let two = T::c(2.0);
    let num = mx.mul(my)?.scale(two).add_scalar(c1).mul(sxy.scale(two).add_scalar(c2))?;
    let den = mx.square().add(my.square())?.add_scalar(c1).mul(sxx.add(syy)?.add_scalar(c2))?;
    Ok(num.div(den)?.mean_all())
}

/// SSIM with the dynamic range set to the reference maximum.
pub fn ssim<T: Float>(x: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    check_pair(x, reference)?;
    let tape = Tape::<f64>::new();
    let v = ssim_var(tape.constant(x.cast()), tape.constant(reference.cast()), max_of(reference))?;
    Ok(v.value().item())
}

/// `1 - ssim` as a differentiable loss against a fixed reference.
pub fn ssim_loss<'t, T: Float>(x: Var<'t, T>, reference: &Tensor<T>) -> Result<Var<'t, T>> {
    if reference.data().iter().all(|&v| v == T::zero()) {
        return Err(invalid!("reference image is all zero"));
    }
    let r = x.tape().constant(reference.clone());
    Ok(ssim_var(x, r, max_of(reference))?.neg().add_scalar(T::one()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

impl Metrics {
    pub fn compute<T: Float>(x: &Tensor<T>, reference: &Tensor<T>) -> Result<Self> {
        Ok(Self { psnr: psnr(x, reference)?, ssim: ssim(x, reference)?, nmse: nmse(x, reference)? })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for a single entry.
    pub std: f64,
    /// Fraction of strictly positive differences.
    pub win_rate: f64,
}

pub fn paired_stats(deltas: &[f64]) -> Result<PairedStats> {
    if deltas.is_empty() {
        return Err(invalid!("paired statistics need at least one difference"));
    }
    let n = deltas.len();
    let mean = deltas.iter().sum::<f64>() / n as f64;
    let std = if n > 1 { (deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    let wins = deltas.iter().filter(|&&d| d > 0.0).count();
    Ok(PairedStats { n, mean, std, win_rate: wins as f64 / n as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[24, 20], |i| ((i % 20) as f64 / 7.0).sin().abs() + rng.random_range(0.0..0.2))
    }

    #[test]
    fn psnr_hand_values() {
        let r = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let x = Tensor::from_vec(&[2], vec![0.0, 0.9]).unwrap();
        assert!((psnr(&x, &r).unwrap() - 10.0 * 200f64.log10()).abs() < 1e-9);
        assert_eq!(psnr(&r, &r).unwrap(), PSNR_CAP);
        assert!(psnr(&x, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn identical_and_perturbed() {
        let r = img(1);
        let m = Metrics::compute(&r, &r).unwrap();
        assert_eq!(m, Metrics { psnr: PSNR_CAP, ssim: 1.0, nmse: 0.0 });
        let mut last = m;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Tensor::from_fn(&[24, 20], |_| rng.random_range(-1.0..1.0));
        for level in [0.01, 0.05, 0.2] {
            let x = r.zip_map(&noise, |a, n| a + level * n);
            let m = Metrics::compute(&x, &r).unwrap();
            assert!(m.psnr < last.psnr && m.ssim < last.ssim && m.nmse > last.nmse, "{m:?} vs {last:?}");
            assert!(m.ssim > -1.0 && m.ssim <= 1.0);
            last = m;
        }
    }

    #[test]
    fn nmse_values() {
        let r = img(2);
        assert_eq!(nmse(&Tensor::zeros(&[24, 20]), &r).unwrap(), 1.0);
        assert!((nmse(&r.map(|v| 2.0 * v), &r).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&r, &Tensor::zeros(&[24, 20])).is_err());
    }

    #[test]
    fn paired_stats_values() {
        let s = paired_stats(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std, s.win_rate), (2.0, 1.0, 1.0));
        let s = paired_stats(&[-1.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.win_rate), (0.0, 0.5));
        assert_eq!(paired_stats(&[0.7; 5]).unwrap().std, 0.0);
        assert!(paired_stats(&[]).is_err());
    }

    #[test]
    fn ssim_loss_gradient() {
        let r = img(5).reshape(&[1, 24, 20]).unwrap();
        let x0 = img(6).reshape(&[1, 24, 20]).unwrap();
        let res = sdum_autograd::check::grad_check(&[x0], 1e-4, 1e-6, |v| ssim_loss(v[0], &r).unwrap());
        assert!(res.max_rel_err < 1e-5, "{res:?}");
    }
}
