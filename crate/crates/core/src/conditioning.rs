//! Universal conditioning: sinusoidal embeddings of the cascade index and the
//! protocol code, two MLPs whose outputs are summed, and per-block linear
//! projections to a spatially broadcast channel bias.

use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::nn::Linear;
use crate::params::{Bound, Specs};
use crate::{Float, Result, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CondConfig {
    /// Embedding width of `phi`.
    pub d0: usize,
    /// Width of the conditioning vector `c`.
    pub d: usize,
}

impl Default for CondConfig {
    fn default() -> Self {
        Self { d0: 64, d: 256 }
    }
}

/// Entry `2i` is `sin(v / w_i)`, entry `2i + 1` is `cos(v / w_i)`, with
/// `w_i = 10000^(2i / d0)`.
pub fn sinusoidal_embed<T: Float>(v: f64, d0: usize) -> Result<Tensor<T>> {
    if d0 < 2 || !d0.is_multiple_of(2) {
        return Err(invalid!("embedding width must be even and >= 2, got {d0}"));
    }
    let mut out = Vec::with_capacity(d0);
    for i in 0..d0 / 2 {
        let omega = 10000f64.powf(2.0 * i as f64 / d0 as f64);
        out.push(T::c((v / omega).sin()));
        out.push(T::c((v / omega).cos()));
    }
    Ok(Tensor::from_vec(&[d0], out)?)
}

/// `d0 -> d -> d` with a SiLU between the layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    l1: Linear,
    l2: Linear,
}

impl Mlp {
    pub fn new(key: &str, d0: usize, d: usize) -> Self {
        Self { l1: Linear::new(format!("{key}.l1"), d0, d), l2: Linear::new(format!("{key}.l2"), d, d) }
    }

    pub fn specs(&self, s: &mut Specs) {
        self.l1.specs(s);
        self.l2.specs(s);
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.l2.forward(p, self.l1.forward(p, x)?.silu())
    }
}

/// The two embedding MLPs `h_t` and `h_y`.
#[derive(Clone, Debug)]
pub struct Conditioning {
    pub cfg: CondConfig,
    pub ht: Mlp,
    pub hy: Mlp,
}

impl Conditioning {
    pub fn new(key: &str, cfg: CondConfig) -> Self {
        Self { cfg, ht: Mlp::new(&format!("{key}.ht"), cfg.d0, cfg.d), hy: Mlp::new(&format!("{key}.hy"), cfg.d0, cfg.d) }
    }

    pub fn specs(&self, s: &mut Specs) {
        self.ht.specs(s);
        self.hy.specs(s);
    }

    pub fn time_term<'t, T: Float>(&self, p: &Bound<'t, T>, t: usize) -> Result<Var<'t, T>> {
        let phi = p.tape().constant(sinusoidal_embed(t as f64, self.cfg.d0)?);
        self.ht.forward(p, phi)
    }

    pub fn label_term<'t, T: Float>(&self, p: &Bound<'t, T>, code: usize) -> Result<Var<'t, T>> {
        let phi = p.tape().constant(sinusoidal_embed(code as f64, self.cfg.d0)?);
        self.hy.forward(p, phi)
    }

    /// `c = h_t(phi(t)) + h_y(phi(code))`.
    pub fn cond_vector<'t, T: Float>(&self, p: &Bound<'t, T>, t: usize, code: usize) -> Result<Var<'t, T>> {
        Ok(self.time_term(p, t)?.add(self.label_term(p, code)?)?)
    }
}

/// Linear map from `c` to one bias per channel, without constant term and
/// zero at initialization.
#[derive(Clone, Debug)]
pub struct BlockBias {
    lin: Linear,
}

impl BlockBias {
    pub fn new(key: impl Into<String>, d: usize, channels: usize) -> Self {
        Self { lin: Linear { key: key.into(), din: d, dout: channels, bias: false, zero_init: true } }
    }

    pub fn specs(&self, s: &mut Specs) {
        self.lin.specs(s);
    }

    /// `[C, 1, 1]`, ready to broadcast over a feature map.
    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, c: Var<'t, T>) -> Result<Var<'t, T>> {
        if c.shape() != [self.lin.din] {
            return Err(invalid!("conditioning vector {:?} for a block expecting [{}]", c.shape(), self.lin.din));
        }
        Ok(self.lin.forward(p, c)?.reshape(&[self.lin.dout, 1, 1])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::Tape;

    #[test]
    fn embedding_basics() {
        let e = sinusoidal_embed::<f64>(0.0, 8).unwrap();
        assert_eq!(e.data(), [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(sinusoidal_embed::<f64>(1.0, 7).is_err());
        let all: Vec<_> = (0..32).map(|t| sinusoidal_embed::<f64>(t as f64, 64).unwrap()).collect();
        for a in &all {
            assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        }
        for i in 0..32 {
            for j in i + 1..32 {
                let d: f64 = all[i].data().iter().zip(all[j].data()).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d > 0.0);
            }
        }
    }

    #[test]
    fn conditioning_is_additive_and_label_sensitive() {
        let cond = Conditioning::new("shared.cond", CondConfig { d0: 16, d: 8 });
        let mut specs = Specs::default();
        cond.specs(&mut specs);
        let store = ParamStore::<f64>::init(&specs, 4).unwrap();
        let tape = Tape::new();
        let p = Bound::new(&tape, &store, false);
        let c = cond.cond_vector(&p, 3, 114).unwrap();
        let hy = cond.label_term(&p, 114).unwrap();
        let ht = cond.time_term(&p, 3).unwrap();
        let diff = c.sub(hy).unwrap().value();
        for (a, b) in diff.data().iter().zip(ht.value().data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in [(0, 1), (0, 96), (5, 200), (17, 18), (300, 575)] {
            let ca = cond.cond_vector(&p, 2, a).unwrap().value();
            let cb = cond.cond_vector(&p, 2, b).unwrap().value();
            assert_ne!(*ca, *cb);
        }
    }

    #[test]
    fn zero_weights_give_zero_vector_and_bias() {
        let cond = Conditioning::new("shared.cond", CondConfig { d0: 8, d: 4 });
        let bias = BlockBias::new("blk.cond", 4, 3);
        let mut specs = Specs::default();
        cond.specs(&mut specs);
        bias.specs(&mut specs);
        let mut store = ParamStore::<f64>::init(&specs, 0).unwrap();
        let tape = Tape::new();
        {
            let p = Bound::new(&tape, &store, false);
            let c = tape.constant(Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
            assert!(bias.forward(&p, c).unwrap().value().data().iter().all(|&v| v == 0.0));
        }
        store.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.0));
        let p = Bound::new(&tape, &store, false);
        assert!(cond.cond_vector(&p, 7, 33).unwrap().value().data().iter().all(|&v| v == 0.0));
        assert!(bias.forward(&p, tape.constant(Tensor::ones(&[5]))).is_err());
    }

    #[test]
    fn block_bias_is_linear() {
        let bias = BlockBias::new("blk.cond", 4, 3);
        let mut specs = Specs::default();
        bias.specs(&mut specs);
        let mut store = ParamStore::<f64>::init(&specs, 0).unwrap();
        crate::params::perturb(&mut store, 1.0, 1);
        let tape = Tape::new();
        let p = Bound::new(&tape, &store, false);
        let c = Tensor::from_vec(&[4], vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let b1 = bias.forward(&p, tape.constant(c.clone())).unwrap().value();
        let b2 = bias.forward(&p, tape.constant(c.map(|v| 2.0 * v))).unwrap().value();
        for (x, y) in b1.data().iter().zip(b2.data()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }
}
