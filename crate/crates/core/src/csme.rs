//! Coil sensitivity estimation: a small U-Net over the multi-coil image stack
//! followed by exact per-pixel normalization.

use std::ops::Range;

use crate::error::invalid;
use crate::kspace::{complex_dims, expand_coils, fft2c, ifft2c};
use crate::mask::Acs;
use crate::nn::Conv;
use crate::params::{Bound, Specs};
use crate::{Float, PadMode, Result, Tensor, Var};

/// Channel widths of the U-Net levels, finest first.
pub const CHANNELS: [usize; 5] = [12, 24, 48, 96, 192];
const SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-12;
const TAPER: usize = 2;

/// `S / sqrt(sum_c |S_c|^2)` at every pixel; pixels whose total power is below
/// `1e-12` become `1 / sqrt(C)` on every coil with zero phase.
pub fn normalize_maps<'t, T: Float>(s: Var<'t, T>) -> Result<Var<'t, T>> {
    let (c, h, w) = complex_dims(&s.shape())?;
    let power = s.square().sum_axis(1, true)?.sum_axis(0, true)?;
    let pv = power.value();
    let eps = T::c(NORM_EPS);
    let ok = Tensor::from_fn(&[1, 1, h, w], |i| if pv.data()[i] >= eps { T::one() } else { T::zero() });
    let tape = s.tape();
    let not_ok = tape.constant(ok.map(|v| T::one() - v));
    let ok = tape.constant(ok);
    let inv = power.mul(ok)?.add(not_ok)?.sqrt().recip().mul(ok)?;
    let fill = T::c(1.0 / (c as f64).sqrt());
    let fallback = Tensor::from_fn(&[1, 2, h, w], |i| if i < h * w { fill * not_ok.value().data()[i] } else { T::zero() });
    Ok(s.mul(inv)?.add(tape.constant(fallback))?)
}

fn taper_axis<T: Float>(n: usize, range: &Range<usize>) -> Vec<T> {
    (0..n)
        .map(|i| {
            if !range.contains(&i) {
                return T::zero();
            }
            let mut wgt = 1.0;
            let lo = i - range.start;
            let hi = range.end - 1 - i;
            if range.start > 0 && lo < TAPER {
                wgt *= 0.5 - 0.5 * (std::f64::consts::PI * (lo + 1) as f64 / (TAPER + 1) as f64).cos();
            }
            if range.end < n && hi < TAPER {
                wgt *= 0.5 - 0.5 * (std::f64::consts::PI * (hi + 1) as f64 / (TAPER + 1) as f64).cos();
            }
            T::c(wgt)
        })
        .collect()
}

/// Separable raised-cosine window over the ACS rectangle. Edges that touch
/// the grid boundary are not tapered, so a full-grid ACS gives all ones.
pub fn acs_window<T: Float>(acs: &Acs, h: usize, w: usize) -> Tensor<T> {
    let r = taper_axis::<T>(h, &acs.rows);
    let c = taper_axis::<T>(w, &acs.cols);
    Tensor::from_fn(&[h, w], |i| r[i / w] * c[i % w])
}

/// Coil images that feed the network, averaged over frames.
///
/// Without previous maps only the apodized ACS region of `y` is used.
/// Otherwise the unmeasured samples are filled from the current estimate:
/// `y + (1 - M) F(S_prev x)`.
pub fn csme_input<'t, T: Float>(
    y: &[Var<'t, T>],
    masks: &[Var<'t, T>],
    acs: &Acs,
    prev: Option<(Var<'t, T>, &[Var<'t, T>])>,
) -> Result<Var<'t, T>> {
    if y.is_empty() || y.len() != masks.len() {
        return Err(invalid!("{} k-space frames with {} masks", y.len(), masks.len()));
    }
    let (_, h, w) = complex_dims(&y[0].shape())?;
    let tape = y[0].tape();
    let mut acc: Option<Var<'t, T>> = None;
    match prev {
        None => {
            if acs.is_empty() {
                return Err(invalid!("cannot estimate sensitivities from an empty ACS region"));
            }
            let win = tape.constant(acs_window(acs, h, w));
            for yf in y {
                let u = ifft2c(yf.mul(win)?)?;
                acc = Some(match acc {
                    Some(a) => a.add(u)?,
                    None => u,
                });
            }
        }
        Some((s, x)) => {
            if x.len() != y.len() {
                return Err(invalid!("{} image frames for {} k-space frames", x.len(), y.len()));
            }
            for ((yf, mf), xf) in y.iter().zip(masks).zip(x) {
                let unmeasured = mf.neg().add_scalar(T::one());
                let fill = fft2c(expand_coils(*xf, s)?)?.mul(unmeasured)?;
                let u = ifft2c(yf.add(fill)?)?;
                acc = Some(match acc {
                    Some(a) => a.add(u)?,
                    None => u,
                });
            }
        }
    }
    let u = acc.expect("nonempty");
    Ok(if y.len() > 1 { u.scale(T::c(1.0 / y.len() as f64)) } else { u })
}

#[derive(Clone, Debug)]
struct ConvBlock {
    a: Conv,
    b: Conv,
}

impl ConvBlock {
    fn new(key: &str, ci: usize, co: usize) -> Self {
        Self { a: Conv::new(format!("{key}.a"), ci, co, 3), b: Conv::new(format!("{key}.b"), co, co, 3) }
    }

    fn specs(&self, s: &mut Specs) {
        self.a.specs(s);
        self.b.specs(s);
    }

    fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let slope = T::c(SLOPE);
        let eps = T::c(1e-5);
        let x = self.a.forward(p, x)?.instance_norm(eps)?.leaky_relu(slope);
        Ok(self.b.forward(p, x)?.instance_norm(eps)?.leaky_relu(slope))
    }
}

/// 2x2 transposed convolution with stride 2, written as a pointwise conv
/// followed by depth-to-space.
#[derive(Clone, Debug)]
struct UpConv {
    conv: Conv,
}

impl UpConv {
    fn new(key: &str, ci: usize, co: usize) -> Self {
        Self { conv: Conv::new(key, ci, 4 * co, 1) }
    }

    fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.conv.forward(p, x)?.pixel_shuffle(2)?.instance_norm(T::c(1e-5))?.leaky_relu(T::c(SLOPE)))
    }
}

fn avg_pool2<'t, T: Float>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    Ok(x.pixel_unshuffle(2)?.reshape(&[s[0], 4, s[1] / 2, s[2] / 2])?.mean_axis(1, false)?)
}

/// U-Net mapping `2C` channels to `2C` channels.
#[derive(Clone, Debug)]
pub struct Csme {
    pub coils: usize,
    down: Vec<ConvBlock>,
    up: Vec<UpConv>,
    dec: Vec<ConvBlock>,
    out: Conv,
}

impl Csme {
    pub fn new(key: &str, coils: usize) -> Self {
        let io = 2 * coils;
        let mut down = vec![ConvBlock::new(&format!("{key}.down0"), io, CHANNELS[0])];
        for l in 1..CHANNELS.len() {
            down.push(ConvBlock::new(&format!("{key}.down{l}"), CHANNELS[l - 1], CHANNELS[l]));
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in (0..CHANNELS.len() - 1).rev() {
            up.push(UpConv::new(&format!("{key}.up{l}"), CHANNELS[l + 1], CHANNELS[l]));
            dec.push(ConvBlock::new(&format!("{key}.dec{l}"), 2 * CHANNELS[l], CHANNELS[l]));
        }
        Self { coils, down, up, dec, out: Conv::new(format!("{key}.out"), CHANNELS[0], io, 1).with_bias().zeroed() }
    }

    pub fn specs(&self, s: &mut Specs) {
        self.down.iter().for_each(|b| b.specs(s));
        for (u, d) in self.up.iter().zip(&self.dec) {
            u.conv.specs(s);
            d.specs(s);
        }
        self.out.specs(s);
    }

    /// Raw network output for coil images `[C, 2, H, W]`: the input scaled to
    /// unit RMS plus a learned correction that starts at zero.
    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, u: Var<'t, T>) -> Result<Var<'t, T>> {
        let (c, h, w) = complex_dims(&u.shape())?;
        if c != self.coils {
            return Err(invalid!("sensitivity network built for {} coils got {c}", self.coils));
        }
        let rms = u.square().mean_all().add_scalar(T::c(1e-30)).sqrt();
        let x = u.div(rms)?.reshape(&[2 * c, h, w])?;
        let m = 1 << (CHANNELS.len() - 1);
        let (ph, pw) = (h.next_multiple_of(m) - h, w.next_multiple_of(m) - w);
        let mut f = if ph + pw > 0 { x.pad2d(PadMode::Zero, 0, ph, 0, pw)? } else { x };
        let mut skips = Vec::new();
        for (l, blk) in self.down.iter().enumerate() {
            if l > 0 {
                f = avg_pool2(f)?;
            }
            f = blk.forward(p, f)?;
            skips.push(f);
        }
        skips.pop();
        for (upc, blk) in self.up.iter().zip(&self.dec) {
            let skip = skips.pop().expect("one skip per level");
            f = blk.forward(p, sdum_autograd::concat(&[upc.forward(p, f)?, skip], 0)?)?;
        }
        let mut f = self.out.forward(p, f)?;
        if ph + pw > 0 {
            f = f.crop2d(0, 0, h, w)?;
        }
        Ok(x.add(f)?.reshape(&[c, 2, h, w])?)
    }

    /// Normalized maps `[C, 2, H, W]`.
    pub fn estimate<'t, T: Float>(&self, p: &Bound<'t, T>, u: Var<'t, T>) -> Result<Var<'t, T>> {
        normalize_maps(self.forward(p, u)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::eager;
    use crate::params::{perturb, ParamStore};
    use crate::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn power(s: &Tensor<f64>) -> Vec<f64> {
        let (c, h, w) = complex_dims(s.shape()).unwrap();
        let p = h * w;
        (0..p).map(|i| (0..2 * c).map(|k| s.data()[k * p + i].powi(2)).sum()).collect()
    }

    #[test]
    fn normalization_and_fallback() {
        let tape = Tape::new();
        let mut raw = rand_tensor(&[3, 2, 4, 5], 1);
        for k in 0..6 {
            raw.data_mut()[k * 20 + 7] = 0.0;
        }
        let s = normalize_maps(tape.constant(raw.clone())).unwrap().value();
        for (i, pw) in power(&s).into_iter().enumerate() {
            assert!((pw - 1.0).abs() < 1e-12, "pixel {i}: {pw}");
        }
        assert!((s.data()[7] - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.data()[20 + 7], 0.0);
        let again = normalize_maps(tape.constant((*s).clone())).unwrap().value();
        for (a, b) in again.data().iter().zip(s.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        let single = normalize_maps(tape.constant(rand_tensor(&[1, 2, 3, 3], 2))).unwrap().value();
        assert!(power(&single).iter().all(|p| (p - 1.0).abs() < 1e-12));
        let src = rand_tensor(&[1, 2, 3, 3], 2);
        for i in 0..9 {
            let (a, b) = (src.data()[i], src.data()[9 + i]);
            let (na, nb) = (single.data()[i], single.data()[9 + i]);
            assert!((a * nb - b * na).abs() < 1e-12, "phase changed at {i}");
        }
    }

    #[test]
    fn window_is_identity_for_full_acs_and_tapers_inside() {
        let full = Acs { rows: 0..8, cols: 0..6 };
        assert!(acs_window::<f64>(&full, 8, 6).data().iter().all(|&v| v == 1.0));
        let part = Acs { rows: 0..8, cols: 1..7 };
        let win = acs_window::<f64>(&part, 8, 8);
        let row: Vec<f64> = win.data()[..8].to_vec();
        let want = [0.0, 0.25, 0.75, 1.0, 1.0, 0.75, 0.25, 0.0];
        for (a, b) in row.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{row:?}");
        }
    }

    #[test]
    fn input_conventions() {
        let tape = Tape::new();
        let y = rand_tensor(&[2, 2, 8, 8], 3);
        let ones = tape.constant(Tensor::<f64>::ones(&[8, 8]));
        let full = Acs { rows: 0..8, cols: 0..8 };
        let u = csme_input(&[tape.constant(y.clone())], &[ones], &full, None).unwrap().value();
        assert_eq!(*u, eager::ifft2c(&y).unwrap());
        assert!(csme_input(&[tape.constant(y.clone())], &[ones], &Acs { rows: 0..0, cols: 0..8 }, None).is_err());

        let mut mask = Tensor::<f64>::zeros(&[8, 8]);
        for i in 0..8 {
            for j in (0..8).step_by(2) {
                mask.data_mut()[i * 8 + j] = 1.0;
            }
        }
        let ym = y.zip_map(&Tensor::from_fn(&[2, 2, 8, 8], |i| mask.data()[i % 64]), |a, b| a * b);
        let s = tape.constant(rand_tensor(&[2, 2, 8, 8], 4));
        let zero = tape.constant(Tensor::<f64>::zeros(&[1, 2, 8, 8]));
        let m = tape.constant(mask.clone());
        let u = csme_input(&[tape.constant(ym.clone())], &[m], &full, Some((s, &[zero]))).unwrap().value();
        assert_eq!(*u, eager::ifft2c(&ym).unwrap());

        let x = tape.constant(rand_tensor(&[1, 2, 8, 8], 5));
        let u = csme_input(&[tape.constant(ym.clone())], &[m], &full, Some((s, &[x]))).unwrap().value();
        let filled = eager::fft2c(&u).unwrap();
        for (i, (a, b)) in filled.data().iter().zip(ym.data()).enumerate() {
            if mask.data()[i % 64] == 1.0 {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn estimate_is_normalized_for_random_weights() {
        let net = Csme::new("c00.csme", 3);
        let mut specs = Specs::default();
        net.specs(&mut specs);
        let mut st = ParamStore::<f64>::init(&specs, 0).unwrap();
        perturb(&mut st, 0.5, 1);
        let tape = Tape::new();
        let p = Bound::new(&tape, &st, false);
        let s = net.estimate(&p, tape.constant(rand_tensor(&[3, 2, 13, 18], 6))).unwrap().value();
        assert_eq!(s.shape(), [3, 2, 13, 18]);
        assert!(power(&s).iter().all(|p| (p - 1.0).abs() < 1e-12));
        let s2 = net.estimate(&p, tape.constant(rand_tensor(&[3, 2, 13, 18], 6))).unwrap().value();
        assert_eq!(s, s2);
    }
}
