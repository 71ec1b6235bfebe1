//! Data-consistency gradients: the standard step `tau S^H A^H (A S x - y)` and
//! the sampling-aware weighted variant with learned k-space weight maps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::kspace::{expand_coils, fft2c, ifft2c, reduce_coils};
use crate::mask::Pattern;
use crate::params::{Bound, Init, Specs};
use crate::{Error, Float, Result, Var};

/// Unconstrained value whose softplus is exactly one.
pub const RHO_ONE: f64 = 0.541_324_854_612_918;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DcMode {
    /// Learnable scalar step, unweighted residual.
    Simple,
    /// One weight map per cascade, shared by all sampling patterns.
    Wdc,
    /// One weight map per cascade and sampling pattern.
    Swdc,
}

impl DcMode {
    pub const ALL: [DcMode; 3] = [DcMode::Simple, DcMode::Wdc, DcMode::Swdc];

    pub fn name(self) -> &'static str {
        match self {
            DcMode::Simple => "simple",
            DcMode::Wdc => "wdc",
            DcMode::Swdc => "swdc",
        }
    }
}

impl fmt::Display for DcMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DcMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DcMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown DC mode `{s}` (expected simple, wdc or swdc)")))
    }
}

fn residual<'t, T: Float>(x: Var<'t, T>, y: Var<'t, T>, s: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(fft2c(expand_coils(x, s)?)?.sub(y)?)
}

/// `tau * S^H F^-1 (M (F(S x) - y))`.
pub fn dc_gradient_standard<'t, T: Float>(
    x: Var<'t, T>,
    y: Var<'t, T>,
    s: Var<'t, T>,
    m: Var<'t, T>,
    tau: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let r = residual(x, y, s)?.mul(m)?;
    Ok(reduce_coils(ifft2c(r)?, s)?.mul(tau)?)
}

/// `S^H F^-1 (M w (F(S x) - y))`, the gradient of
/// `0.5 || sqrt(w) (A S x - y) ||^2` for measured `y`.
pub fn swdc_gradient<'t, T: Float>(
    x: Var<'t, T>,
    y: Var<'t, T>,
    s: Var<'t, T>,
    m: Var<'t, T>,
    w: Var<'t, T>,
) -> Result<Var<'t, T>> {
    if w.shape() != m.shape() {
        return Err(invalid!("weight map {:?} does not match mask {:?}", w.shape(), m.shape()));
    }
    let r = residual(x, y, s)?.mul(m.mul(w)?)?;
    reduce_coils(ifft2c(r)?, s)
}

/// Center crop of `softplus(rho)`: rows `(Hmax - h) / 2 ..` and likewise for columns.
pub fn get_weight_map<'t, T: Float>(rho: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let shape = rho.shape();
    let [hm, wm] = shape[..] else {
        return Err(invalid!("weight parameters must be a 2-D grid, got {shape:?}"));
    };
    if h > hm || w > wm {
        return Err(invalid!("{h}x{w} exceeds the {hm}x{wm} weight grid"));
    }
    let top = (hm - h) / 2;
    let left = (wm - w) / 2;
    Ok(rho.crop2d(top, left, h, w)?.softplus())
}

/// `z = x - tau g`.
pub fn dc_update<'t, T: Float>(x: Var<'t, T>, g: Var<'t, T>, tau: T) -> Result<Var<'t, T>> {
    Ok(x.sub(g.scale(tau))?)
}

/// Parameters of one cascade's data-consistency step.
#[derive(Clone, Debug)]
pub struct DcLayer {
    key: String,
    pub mode: DcMode,
    pub grid: usize,
}

impl DcLayer {
    pub fn new(key: impl Into<String>, mode: DcMode, grid: usize) -> Self {
        Self { key: key.into(), mode, grid }
    }

    pub fn tau_key(&self) -> String {
        format!("{}.tau", self.key)
    }

    /// Key of the weight map used for `pattern`.
    pub fn rho_key(&self, pattern: Pattern) -> Option<String> {
        match self.mode {
            DcMode::Simple => None,
            DcMode::Wdc => Some(format!("{}.rho.shared", self.key)),
            DcMode::Swdc => Some(format!("{}.rho.{}", self.key, pattern.name())),
        }
    }

    pub fn specs(&self, s: &mut Specs) {
        let g = [self.grid, self.grid];
        match self.mode {
            DcMode::Simple => s.add(self.tau_key(), &[1], Init::Const(1.0)),
            DcMode::Wdc => s.add(format!("{}.rho.shared", self.key), &g, Init::Const(RHO_ONE)),
            DcMode::Swdc => {
                for p in Pattern::ALL {
                    s.add(format!("{}.rho.{}", self.key, p.name()), &g, Init::Const(RHO_ONE));
                }
            }
        }
    }

    /// Weight map for `pattern` cropped to `h x w`; `None` in simple mode.
    pub fn weight_map<'t, T: Float>(&self, p: &Bound<'t, T>, pattern: Pattern, h: usize, w: usize) -> Result<Option<Var<'t, T>>> {
        match self.rho_key(pattern) {
            Some(k) => Ok(Some(get_weight_map(p.get(&k)?, h, w)?)),
            None => Ok(None),
        }
    }

    /// One step `z = x - g` for an image `[1, 2, H, W]` and its k-space.
    pub fn step<'t, T: Float>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        y: Var<'t, T>,
        s: Var<'t, T>,
        m: Var<'t, T>,
        pattern: Pattern,
    ) -> Result<Var<'t, T>> {
        let ms = m.shape();
        let g = match self.weight_map(p, pattern, ms[0], ms[1])? {
            Some(w) => swdc_gradient(x, y, s, m, w)?,
            None => dc_gradient_standard(x, y, s, m, p.get(&self.tau_key())?)?,
        };
        dc_update(x, g, T::one())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::eager;
    use crate::params::ParamStore;
    use crate::phantom::{gen_phantom, gen_sensitivities};
    use crate::{Tape, Tensor};
    use sdum_autograd::softplus;

    #[test]
    fn rho_one_is_exact() {
        assert_eq!(softplus(RHO_ONE), 1.0);
        assert!((RHO_ONE - (std::f64::consts::E - 1.0).ln()).abs() < 1e-16);
        assert_eq!(softplus(RHO_ONE as f32), 1.0);
    }

    #[test]
    fn crop_offsets() {
        let tape = Tape::new();
        let rho = tape.constant(Tensor::<f64>::from_fn(&[8, 8], |i| i as f64));
        let w = get_weight_map(rho, 4, 3).unwrap().value();
        assert_eq!(w.data()[0], softplus(2.0 * 8.0 + 2.0));
        assert!(w.data().iter().all(|&v| v > 0.0));
        assert!(get_weight_map(rho, 9, 3).is_err());
        let neg = tape.constant(Tensor::<f64>::full(&[4, 4], -50.0));
        assert!(get_weight_map(neg, 4, 4).unwrap().value().data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn consistent_image_has_zero_gradient_and_tau_scales() {
        let tape = Tape::new();
        let x = gen_phantom(16, 16, 1).unwrap();
        let s = gen_sensitivities(3, 16, 16, 2).unwrap();
        let m = crate::mask::make_uniform_mask(16, 16, 2, 4).unwrap().frame_tensor::<f64>(0);
        let y = eager::forward_op(&x, &s, &m).unwrap();
        let (x, s, m, yv) = (tape.constant(x), tape.constant(s), tape.constant(m), tape.constant(y));
        let one = tape.constant(Tensor::scalar(1.0));
        let g = dc_gradient_standard(x, yv, s, m, one).unwrap().value();
        assert!(g.max_abs() < 1e-14);

        let x2 = tape.constant(gen_phantom(16, 16, 5).unwrap());
        let g1 = dc_gradient_standard(x2, yv, s, m, one).unwrap().value();
        let g2 = dc_gradient_standard(x2, yv, s, m, tape.constant(Tensor::scalar(2.0))).unwrap().value();
        assert_eq!(g1.map(|v| 2.0 * v), *g2);
        let gw = swdc_gradient(x2, yv, s, m, m).unwrap().value();
        assert_eq!(*gw, *g1);
        let z = swdc_gradient(x2, yv, s, m, tape.constant(Tensor::zeros(&[16, 16]))).unwrap();
        assert_eq!(*dc_update(x2, z, 1.0).unwrap().value(), *x2.value());
        let gw2 = swdc_gradient(x2, yv, s, m, m.scale(2.0)).unwrap().value();
        assert_eq!(g1.map(|v| 2.0 * v), *gw2);
    }

    #[test]
    fn full_sampling_single_step_recovers_image() {
        let tape = Tape::new();
        let x = gen_phantom(16, 20, 3).unwrap();
        let s = gen_sensitivities(4, 16, 20, 4).unwrap();
        let m = Tensor::<f64>::ones(&[16, 20]);
        let y = eager::forward_op(&x, &s, &m).unwrap();
        let zero = tape.constant(Tensor::zeros(&[1, 2, 16, 20]));
        let layer = DcLayer::new("c00.dc", DcMode::Simple, 16);
        let mut specs = Specs::default();
        layer.specs(&mut specs);
        let st = ParamStore::init(&specs, 0).unwrap();
        let p = Bound::new(&tape, &st, false);
        let z = layer
            .step(&p, zero, tape.constant(y.clone()), tape.constant(s.clone()), tape.constant(m), Pattern::Uniform)
            .unwrap()
            .value();
        let zf = eager::zero_filled(&y, &s).unwrap();
        for ((a, b), c) in z.data().iter().zip(zf.data()).zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn modes_declare_expected_keys() {
        let count = |mode| {
            let mut s = Specs::default();
            DcLayer::new("c00.dc", mode, 32).specs(&mut s);
            s.0.len()
        };
        assert_eq!(count(DcMode::Simple), 1);
        assert_eq!(count(DcMode::Wdc), 1);
        assert_eq!(count(DcMode::Swdc), Pattern::ALL.len());
        assert_eq!("SWDC".parse::<DcMode>().unwrap(), DcMode::Swdc);
        assert!("hard".parse::<DcMode>().is_err());
    }
}
