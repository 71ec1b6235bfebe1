//! Synthetic anatomy, coil sensitivities and acquisition simulation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::invalid;
use crate::kspace::eager;
use crate::{Result, Tensor};

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    intensity: f64,
    /// Phase of the radius modulation for dynamic phantoms.
    beat: f64,
}

/// Normalized coordinates in `[-1, 1)` of pixel `(i, j)`.
fn coords(i: usize, j: usize, h: usize, w: usize) -> (f64, f64) {
    (2.0 * j as f64 / w as f64 - 1.0, 2.0 * i as f64 / h as f64 - 1.0)
}

/// Static complex phantom `[1, 2, H, W]` with maximum magnitude exactly 1.
pub fn gen_phantom(h: usize, w: usize, seed: u64) -> Result<Tensor<f64>> {
    gen_dynamic_phantom(1, h, w, seed)
}

/// `frames` smoothly deforming copies of one phantom, `[F, 2, H, W]`. Ellipse
/// radii oscillate sinusoidally over the frame index; one frame gives the
/// static phantom.
pub fn gen_dynamic_phantom(frames: usize, h: usize, w: usize, seed: u64) -> Result<Tensor<f64>> {
    if h < 16 || w < 16 {
        return Err(invalid!("phantom needs H, W >= 16, got {h}x{w}"));
    }
    if frames == 0 {
        return Err(invalid!("phantom needs at least one frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=8);
    // distinct intensities: a shuffled ladder with jitter
    let mut levels: Vec<f64> = (0..n).map(|k| 0.15 + 0.8 * k as f64 / n as f64).collect();
    for i in (1..levels.len()).rev() {
        let j = rng.random_range(0..=i);
        levels.swap(i, j);
    }
    let ellipses: Vec<Ellipse> = levels
        .iter()
        .map(|&lvl| Ellipse {
            cx: rng.random_range(-0.5..0.5),
            cy: rng.random_range(-0.5..0.5),
            a: rng.random_range(0.12..0.5),
            b: rng.random_range(0.12..0.5),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            intensity: lvl + rng.random_range(0.0..0.3 / n as f64),
            beat: rng.random_range(0.0..std::f64::consts::TAU),
        })
        .collect();
    let bg: [f64; 4] = [rng.random_range(0.05..0.15), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.04..0.04)];
    let ph: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let p = h * w;
    let mut mag = vec![0.0f64; frames * p];
    let mut phase = vec![0.0f64; p];
    for i in 0..h {
        for j in 0..w {
            let (u, v) = coords(i, j, h, w);
            phase[i * w + j] = std::f64::consts::FRAC_PI_2 * (ph[0] * u + ph[1] * v + ph[2] * u * v + ph[3] * (u * u - v * v));
            let base = bg[0] + bg[1] * u + bg[2] * v + bg[3] * u * v;
            for f in 0..frames {
                let mut m = base;
                for e in &ellipses {
                    let s = if frames > 1 {
                        1.0 + 0.12 * (std::f64::consts::TAU * f as f64 / frames as f64 + e.beat).sin()
                    } else {
                        1.0
                    };
                    let (du, dv) = (u - e.cx, v - e.cy);
                    let (c, sn) = (e.angle.cos(), e.angle.sin());
                    let (x, y) = ((du * c + dv * sn) / (e.a * s), (-du * sn + dv * c) / (e.b * s));
                    if x * x + y * y <= 1.0 {
                        m += e.intensity;
                    }
                }
                mag[f * p + i * w + j] = m.max(0.0);
            }
        }
    }
    let (argmax, peak) = mag.iter().enumerate().fold((0, f64::MIN), |acc, (k, &m)| if m > acc.1 { (k, m) } else { acc });
    let phi0 = phase[argmax % p];
    let mut out = vec![0.0f64; frames * 2 * p];
    for f in 0..frames {
        for k in 0..p {
            let m = mag[f * p + k] / peak;
            let a = phase[k] - phi0;
            out[2 * f * p + k] = m * a.cos();
            out[(2 * f + 1) * p + k] = m * a.sin();
        }
    }
    Ok(Tensor::from_vec(&[frames, 2, h, w], out)?)
}

/// Divides every pixel by the coil-combined magnitude `sqrt(sum_c |S_c|^2)`.
/// Pixels with total power below `eps` get `1/sqrt(C)` on every coil.
pub fn normalize_coils(s: &mut Tensor<f64>, eps: f64) {
    let shape = s.shape().to_vec();
    let (c, p) = (shape[0], shape[2] * shape[3]);
    let d = s.data_mut();
    for k in 0..p {
        let pow: f64 = (0..2 * c).map(|q| d[q * p + k] * d[q * p + k]).sum();
        if pow < eps {
            for q in 0..c {
                d[2 * q * p + k] = 1.0 / (c as f64).sqrt();
                d[(2 * q + 1) * p + k] = 0.0;
            }
        } else {
            let r = pow.sqrt();
            (0..2 * c).for_each(|q| d[q * p + k] /= r);
        }
    }
}

/// Smooth complex coil maps `[C, 2, H, W]`: Gaussian falloff around coil
/// centers on a circle, times a low-order complex polynomial, normalized per
/// pixel.
pub fn gen_sensitivities(c: usize, h: usize, w: usize, seed: u64) -> Result<Tensor<f64>> {
    if c == 0 || h == 0 || w == 0 {
        return Err(invalid!("sensitivities need C >= 1 and a nonempty grid"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = rng.random_range(0.0..std::f64::consts::TAU);
    let p = h * w;
    let mut out = vec![0.0f64; c * 2 * p];
    for k in 0..c {
        let ang = rot + std::f64::consts::TAU * k as f64 / c as f64;
        let (px, py) = (1.3 * ang.cos(), 1.3 * ang.sin());
        let sigma = rng.random_range(0.9..1.3);
        // 1 + a u + b v with complex a, b, and a constant coil phase
        let a: [f64; 4] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        for i in 0..h {
            for j in 0..w {
                let (u, v) = coords(i, j, h, w);
                let g = (-((u - px).powi(2) + (v - py).powi(2)) / (2.0 * sigma * sigma)).exp();
                let (pr, pi) = (1.0 + a[0] * u + a[1] * v, a[2] * u + a[3] * v);
                let (cr, ci) = (phi.cos(), phi.sin());
                out[2 * k * p + i * w + j] = g * (pr * cr - pi * ci);
                out[(2 * k + 1) * p + i * w + j] = g * (pr * ci + pi * cr);
            }
        }
    }
    let mut s = Tensor::from_vec(&[c, 2, h, w], out)?;
    normalize_coils(&mut s, 1e-12);
    Ok(s)
}

/// Fully sampled noisy multi-coil k-space of every frame, `[F, C, 2, H, W]`,
/// and its RSS reference `[F, H, W]`.
pub fn simulate_kspace(x: &Tensor<f64>, s: &Tensor<f64>, noise_sigma: f64, seed: u64) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(invalid!("noise sigma must be finite and >= 0, got {noise_sigma}"));
    }
    let (frames, h, w) = crate::kspace::complex_dims(x.shape())?;
    let (c, hs, ws) = crate::kspace::complex_dims(s.shape())?;
    if (h, w) != (hs, ws) {
        return Err(invalid!("image {h}x{w} vs sensitivities {hs}x{ws}"));
    }
    let p = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut k = Vec::with_capacity(frames * c * 2 * p);
    let mut reference = Vec::with_capacity(frames * p);
    for f in 0..frames {
        let xf = Tensor::from_vec(&[1, 2, h, w], x.data()[f * 2 * p..(f + 1) * 2 * p].to_vec())?;
        let mut kf = eager::fft2c(&eager::expand_coils(&xf, s)?)?;
        if noise_sigma > 0.0 {
            for v in kf.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += noise_sigma * z;
            }
        }
        reference.extend_from_slice(crate::kspace::rss(&eager::ifft2c(&kf)?)?.data());
        k.extend_from_slice(kf.data());
    }
    Ok((Tensor::from_vec(&[frames, c, 2, h, w], k)?, Tensor::from_vec(&[frames, h, w], reference)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_mag(x: &Tensor<f64>) -> f64 {
        eager::magnitude(x).unwrap().data().iter().copied().fold(0.0, f64::max)
    }

    #[test]
    fn phantom_peak_is_exactly_one() {
        for seed in 0..30 {
            let x = gen_phantom(32, 40, seed).unwrap();
            assert_eq!(max_mag(&x), 1.0, "seed {seed}");
            assert_eq!(x, gen_phantom(32, 40, seed).unwrap());
        }
        let d = gen_dynamic_phantom(4, 24, 24, 3).unwrap();
        assert_eq!(max_mag(&d), 1.0);
        assert!(gen_phantom(8, 32, 0).is_err());
    }

    #[test]
    fn seeds_give_different_phantoms() {
        for s in 0..10u64 {
            let a = gen_phantom(32, 32, 2 * s).unwrap();
            let b = gen_phantom(32, 32, 2 * s + 1).unwrap();
            let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
            assert!(diff.sqrt() / a.norm_sq().sqrt() > 0.1);
        }
    }

    #[test]
    fn sensitivities_are_normalized_and_smooth() {
        let s = gen_sensitivities(4, 64, 64, 7).unwrap();
        let p = 64 * 64;
        let mut worst_grad = 0.0f64;
        for k in 0..p {
            let pow: f64 = (0..8).map(|q| s.data()[q * p + k].powi(2)).sum();
            assert!((pow - 1.0).abs() < 1e-6);
        }
        for q in 0..4 {
            for i in 0..63 {
                for j in 0..63 {
                    let at = |ii: usize, jj: usize| (s.data()[2 * q * p + ii * 64 + jj], s.data()[(2 * q + 1) * p + ii * 64 + jj]);
                    let (a, b, c) = (at(i, j), at(i + 1, j), at(i, j + 1));
                    let gi = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
                    let gj = ((c.0 - a.0).powi(2) + (c.1 - a.1).powi(2)).sqrt();
                    worst_grad = worst_grad.max(gi.hypot(gj));
                }
            }
        }
        assert!(worst_grad < 0.2, "{worst_grad}");
        let one = gen_sensitivities(1, 16, 16, 0).unwrap();
        assert!(eager::magnitude(&one).unwrap().data().iter().all(|&m| (m - 1.0).abs() < 1e-12));
    }

    #[test]
    fn normalization_fallback_for_empty_pixels() {
        let mut s = Tensor::zeros(&[4, 2, 2, 2]);
        normalize_coils(&mut s, 1e-12);
        for q in 0..4 {
            assert!(s.data()[2 * q * 4..(2 * q + 1) * 4].iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn noiseless_full_sampling_recovers_image() {
        let x = gen_phantom(32, 32, 1).unwrap();
        let s = gen_sensitivities(3, 32, 32, 2).unwrap();
        let (k, reference) = simulate_kspace(&x, &s, 0.0, 0).unwrap();
        let k0 = Tensor::from_vec(&[3, 2, 32, 32], k.data().to_vec()).unwrap();
        let z = eager::zero_filled(&k0, &s).unwrap();
        let err = z.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5);
        let mag = eager::magnitude(&x).unwrap();
        for (r, m) in reference.data().iter().zip(mag.data()) {
            assert!((r - m).abs() < 1e-5);
        }
    }
}
