//! AdamW with a warmup plus cosine learning-rate schedule and optional global
//! gradient-norm clipping.

use std::collections::BTreeMap;

use crate::error::invalid;
use crate::params::ParamStore;
use crate::{Float, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Weight decay applies to convolution and linear weights only, not to
/// norms, biases, temperatures, step sizes or k-space weight grids.
pub fn decays(key: &str, shape: &[usize]) -> bool {
    key.ends_with(".w") && shape.len() >= 2 && !key.contains(".dc.")
}

/// Moment estimates, keyed like the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: usize,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new() -> Self {
        Self { step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left untouched, including their decay.
    pub fn update(
        &mut self,
        cfg: &AdamWConfig,
        store: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
        let (ob1, ob2) = (T::c(1.0 - cfg.beta1), T::c(1.0 - cfg.beta2));
        let step_size = T::c(lr / bc1);
        let inv_bc2 = T::c(1.0 / bc2);
        let eps = T::c(cfg.eps);
        for (key, g) in grads {
            let p = store.get_mut(key)?;
            if p.shape() != g.shape() {
                return Err(invalid!("gradient {:?} for parameter `{key}` of shape {:?}", g.shape(), p.shape()));
            }
            let shape = p.shape().to_vec();
            let m = self.m.entry(key.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(key.clone()).or_insert_with(|| Tensor::zeros(&shape));
            let decay = if decays(key, &shape) { T::c(1.0 - lr * cfg.weight_decay) } else { T::one() };
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                *pi = *pi * decay - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Float>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::c(max_norm / norm);
        grads.values_mut().for_each(|g| g.scale_inplace(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, Specs};

    #[test]
    fn schedule_shape() {
        assert_eq!(cosine_lr(1.0, 0, 100, 0), 1.0);
        assert!((cosine_lr(1.0, 50, 100, 0) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 100, 100, 0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 4, 100, 10) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_lr(1.0, 10, 110, 10), 1.0);
    }

    #[test]
    fn adam_minimizes_quadratic_and_zero_lr_is_identity() {
        let mut specs = Specs::default();
        specs.add("a.w", &[2, 2], Init::Const(3.0));
        let mut store = ParamStore::<f64>::init(&specs, 0).unwrap();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = AdamState::new();
        let frozen = store.clone();
        let g = BTreeMap::from([("a.w".to_string(), Tensor::full(&[2, 2], 1.0))]);
        st.update(&cfg, &mut store, &g, 0.0).unwrap();
        assert_eq!(store, frozen);
        for _ in 0..500 {
            let g = BTreeMap::from([("a.w".to_string(), store.get("a.w").unwrap().clone())]);
            st.update(&cfg, &mut store, &g, 0.05).unwrap();
        }
        assert!(store.get("a.w").unwrap().max_abs() < 0.05);
    }

    #[test]
    fn clipping() {
        let mut g = BTreeMap::from([("x".to_string(), Tensor::from_vec(&[2], vec![3.0f64, 4.0]).unwrap())]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g["x"].norm_sq() - 1.0).abs() < 1e-12);
        assert!(decays("c00.backbone.stem.w", &[4, 2, 3, 3]));
        assert!(!decays("c00.backbone.enc1.0.ln1.w", &[4]));
        assert!(!decays("c00.dc.rho.uniform", &[8, 8]));
    }
}
