//! Training-time k-space augmentation: axis flips of the underlying images
//! and a global phase rotation. The sampling mask is kept, so an augmented
//! sample is a new acquisition of a transformed object with the same protocol.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::kspace::eager;
use crate::{Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Probability of flipping the rows, and separately the columns.
    pub flip_prob: f64,
    /// Draw a uniform phase in `[0, 2 pi)`.
    pub phase: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { flip_prob: 0.5, phase: true }
    }
}

/// Reverses the row and/or column order of every `[H, W]` plane.
fn flip_planes<T: Copy>(data: &mut [T], h: usize, w: usize, rows: bool, cols: bool) {
    for plane in data.chunks_mut(h * w) {
        if rows {
            for i in 0..h / 2 {
                let (a, b) = plane.split_at_mut((h - 1 - i) * w);
                a[i * w..(i + 1) * w].swap_with_slice(&mut b[..w]);
            }
        }
        if cols {
            plane.chunks_mut(w).for_each(|r| r.reverse());
        }
    }
}

/// Flips the coil images of every frame and rotates the k-space phase by
/// `phi`. The reference magnitude flips with the images and is invariant
/// to the phase.
pub fn transform(sample: &Sample, flip_rows: bool, flip_cols: bool, phi: f64) -> Result<Sample> {
    let (f, c, h, w) = (sample.frames(), sample.coils(), sample.height(), sample.width());
    let mut out = sample.clone();
    let (cs, sn) = (phi.cos(), phi.sin());
    let p = h * w;
    let mut kspace = Vec::with_capacity(sample.kspace.numel());
    for fr in 0..f {
        let mut k = sample.full_frame::<f64>(fr);
        if flip_rows || flip_cols {
            let mut img = eager::ifft2c(&k)?;
            flip_planes(img.data_mut(), h, w, flip_rows, flip_cols);
            k = eager::fft2c(&img)?;
        }
        let d = k.data();
        for coil in 0..c {
            let (re, im) = (&d[2 * coil * p..(2 * coil + 1) * p], &d[(2 * coil + 1) * p..(2 * coil + 2) * p]);
            kspace.extend(re.iter().zip(im).map(|(&a, &b)| (a * cs - b * sn) as f32));
            kspace.extend(re.iter().zip(im).map(|(&a, &b)| (a * sn + b * cs) as f32));
        }
    }
    out.kspace = Tensor::from_vec(sample.kspace.shape(), kspace)?;
    flip_planes(out.reference.data_mut(), h, w, flip_rows, flip_cols);
    if let Some(s) = out.sens.as_mut() {
        flip_planes(s.data_mut(), h, w, flip_rows, flip_cols);
    }
    Ok(out)
}

/// Random instance of [`transform`].
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    let flip_rows = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let flip_cols = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let phi = if cfg.phase { rng.random_range(0.0..std::f64::consts::TAU) } else { 0.0 };
    transform(sample, flip_rows, flip_cols, phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_dataset, DatasetConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Sample {
        let cfg = DatasetConfig { sizes: vec![[24, 20]], coils: vec![3], ..Default::default() };
        make_dataset(1, &cfg, 4).unwrap().samples.remove(0)
    }

    #[test]
    fn flips_commute_with_the_reference() {
        let s = sample();
        for (r, c) in [(true, false), (false, true), (true, true)] {
            let a = transform(&s, r, c, 0.7).unwrap();
            a.validate().unwrap();
            let mut expect = s.reference.clone();
            flip_planes(expect.data_mut(), 24, 20, r, c);
            let err = a.reference.zip_map(&expect, |x, y| x - y).max_abs();
            assert_eq!(err, 0.0);
            assert_eq!(a.mask, s.mask);
            let back = transform(&a, r, c, -0.7).unwrap();
            assert!(back.kspace.zip_map(&s.kspace, |x, y| x - y).max_abs() < 1e-5);
        }
    }

    #[test]
    fn phase_preserves_energy_and_identity_is_exact() {
        let s = sample();
        let a = transform(&s, false, false, 1.3).unwrap();
        a.validate().unwrap();
        let (e0, e1) = (s.kspace.cast::<f64>().norm_sq(), a.kspace.cast::<f64>().norm_sq());
        assert!((e0 - e1).abs() < 1e-6 * e0);
        assert_eq!(transform(&s, false, false, 0.0).unwrap(), s);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let off = AugmentConfig { flip_prob: 0.0, phase: false };
        assert_eq!(augment(&s, &off, &mut rng).unwrap(), s);
    }
}
