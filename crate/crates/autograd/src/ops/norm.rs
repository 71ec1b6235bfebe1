//! Fused normalization and softmax kernels.

use std::rc::Rc;

use crate::{Error, Real, Result, Tensor, Var};

fn norm_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

/// Splits `shape` into `(rows, row_len)` along the last axis.
fn rows_of(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / n.max(1), n)
}

impl<'t, T: Real> Var<'t, T> {
    /// Per-pixel normalization across channels of a `[C, H, W]` map with
    /// per-channel affine `gamma`, `beta`.
    pub fn layer_norm_channels(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() != 3 || gamma.shape() != [shape[0]] || beta.shape() != [shape[0]] {
            return Err(norm_err(
                "layer_norm_channels",
                format!("x {shape:?}, gamma {:?}, beta {:?}", gamma.shape(), beta.shape()),
            ));
        }
        let c = shape[0];
        let p = shape[1] * shape[2];
        let inv_c = T::c(c as f64).recip();
        let xd = x.data();
        let mut mean = vec![T::zero(); p];
        for ch in 0..c {
            for (m, &v) in mean.iter_mut().zip(&xd[ch * p..(ch + 1) * p]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        let mut var = vec![T::zero(); p];
        for ch in 0..c {
            for ((s, &v), &m) in var.iter_mut().zip(&xd[ch * p..(ch + 1) * p]).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let rstd: Vec<T> = var.iter().map(|&s| (s * inv_c + eps).sqrt().recip()).collect();
        let mut xhat = vec![T::zero(); c * p];
        for ch in 0..c {
            for (((o, &v), &m), &r) in xhat[ch * p..(ch + 1) * p].iter_mut().zip(&xd[ch * p..(ch + 1) * p]).zip(&mean).zip(&rstd) {
                *o = (v - m) * r;
            }
        }
        let gv = gamma.value();
        let bv = beta.value();
        let mut out = vec![T::zero(); c * p];
        for ch in 0..c {
            let (gm, bt) = (gv.data()[ch], bv.data()[ch]);
            for (o, &xh) in out[ch * p..(ch + 1) * p].iter_mut().zip(&xhat[ch * p..(ch + 1) * p]) {
                *o = xh * gm + bt;
            }
        }
        let y = Tensor::from_vec(&shape, out)?;
        let xhat = Rc::new(xhat);
        Ok(self.op(&[self, gamma, beta], y, move |g| {
            let gd = g.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut sum_d = vec![T::zero(); p];
            let mut sum_dx = vec![T::zero(); p];
            for ch in 0..c {
                let gm = gv.data()[ch];
                let gr = &gd[ch * p..(ch + 1) * p];
                let xr = &xhat[ch * p..(ch + 1) * p];
                let mut dg = T::zero();
                let mut db = T::zero();
                for i in 0..p {
                    dg += gr[i] * xr[i];
                    db += gr[i];
                    let d = gr[i] * gm;
                    sum_d[i] += d;
                    sum_dx[i] += d * xr[i];
                }
                dgamma[ch] = dg;
                dbeta[ch] = db;
            }
            let mut dx = vec![T::zero(); c * p];
            for ch in 0..c {
                let gm = gv.data()[ch];
                for i in 0..p {
                    let d = gd[ch * p + i] * gm;
                    dx[ch * p + i] = rstd[i] * (d - inv_c * (sum_d[i] + xhat[ch * p + i] * sum_dx[i]));
                }
            }
            vec![
                Some(Tensor::from_vec(&shape, dx).unwrap()),
                Some(Tensor::from_vec(&[c], dgamma).unwrap()),
                Some(Tensor::from_vec(&[c], dbeta).unwrap()),
            ]
        }))
    }

    /// Per-channel normalization over the spatial axes of `[C, H, W]`, no affine.
    pub fn instance_norm(self, eps: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() != 3 {
            return Err(norm_err("instance_norm", format!("needs [C, H, W], got {shape:?}")));
        }
        let (c, p) = (shape[0], shape[1] * shape[2]);
        let inv_p = T::c(p as f64).recip();
        let mut xhat = vec![T::zero(); c * p];
        let mut rstd = vec![T::zero(); c];
        for ch in 0..c {
            let row = &x.data()[ch * p..(ch + 1) * p];
            let m = row.iter().copied().sum::<T>() * inv_p;
            let v = row.iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv_p;
            let r = (v + eps).sqrt().recip();
            rstd[ch] = r;
            for (o, &v) in xhat[ch * p..(ch + 1) * p].iter_mut().zip(row) {
                *o = (v - m) * r;
            }
        }
        let y = Tensor::from_vec(&shape, xhat)?;
        let yc = Rc::new(y.clone());
        Ok(self.op(&[self], y, move |g| {
            let mut dx = vec![T::zero(); c * p];
            for ch in 0..c {
                let gr = &g.data()[ch * p..(ch + 1) * p];
                let xr = &yc.data()[ch * p..(ch + 1) * p];
                let sg = gr.iter().copied().sum::<T>();
                let sgx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>();
                for i in 0..p {
                    dx[ch * p + i] = rstd[ch] * (gr[i] - inv_p * (sg + xr[i] * sgx));
                }
            }
            vec![Some(Tensor::from_vec(&shape, dx).unwrap())]
        }))
    }

    /// `x / max(|x|_2, eps)` along the last axis.
    pub fn l2_normalize_last(self, eps: T) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (rows, n) = rows_of(&shape);
        let mut norms = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms[r] = nrm;
            let d = nrm.max(eps);
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = v / d;
            }
        }
        let y = Tensor::from_vec(&shape, out).unwrap();
        let yc = Rc::new(y.clone());
        self.op(&[self], y, move |g| {
            let mut dx = vec![T::zero(); g.numel()];
            for r in 0..rows {
                let gr = &g.data()[r * n..(r + 1) * n];
                let yr = &yc.data()[r * n..(r + 1) * n];
                let out = &mut dx[r * n..(r + 1) * n];
                if norms[r] > eps {
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for i in 0..n {
                        out[i] = (gr[i] - yr[i] * dot) / norms[r];
                    }
                } else {
                    for i in 0..n {
                        out[i] = gr[i] / eps;
                    }
                }
            }
            vec![Some(Tensor::from_vec(&shape, dx).unwrap())]
        })
    }

    /// Softmax along the last axis.
    pub fn softmax_last(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let (rows, n) = rows_of(&shape);
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let dst = &mut out[r * n..(r + 1) * n];
            let mut s = T::zero();
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = (v - mx).exp();
                s += *o;
            }
            dst.iter_mut().for_each(|o| *o /= s);
        }
        let y = Tensor::from_vec(&shape, out).unwrap();
        let yc = Rc::new(y.clone());
        self.op(&[self], y, move |g| {
            let mut dx = vec![T::zero(); g.numel()];
            for r in 0..rows {
                let gr = &g.data()[r * n..(r + 1) * n];
                let yr = &yc.data()[r * n..(r + 1) * n];
                let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                for i in 0..n {
                    dx[r * n + i] = yr[i] * (gr[i] - dot);
                }
            }
            vec![Some(Tensor::from_vec(&shape, dx).unwrap())]
        })
    }
}
