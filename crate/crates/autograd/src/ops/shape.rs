//! Reductions, reshapes and data movement.

use crate::tensor::numel;
use crate::{Error, Real, Result, Tensor, Var};

/// Boundary handling for [`Var::pad2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
    Replicate,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn sum_all(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.op(&[self], Tensor::scalar(x.sum()), move |g| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = T::c(self.numel() as f64);
        self.sum_all().scale(n.recip())
    }

    /// Sum over one axis; the axis is kept with length 1 when `keepdim`.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err("sum_axis", format!("axis {axis} for shape {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out = vec![T::zero(); outer * inner];
        let xd = x.data();
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..len {
                let src = &xd[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let y = Tensor::from_vec(&out_shape, out)?;
        Ok(self.op(&[self], y, move |g| {
            let gd = g.data();
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                let src = &gd[o * inner..(o + 1) * inner];
                for a in 0..len {
                    gx[(o * len + a) * inner..(o * len + a + 1) * inner].copy_from_slice(src);
                }
            }
            vec![Some(Tensor::from_vec(&shape, gx).unwrap())]
        }))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let len = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis, keepdim)?.scale(T::c(len as f64).recip()))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = (*x).clone().reshape(shape)?;
        Ok(self.op(&[self], y, move |g| vec![Some(g.clone().reshape(&old).unwrap())]))
    }

    /// General axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = shape.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} for shape {shape:?}")));
        }
        let y = permute_tensor(&x, perm);
        let mut inv = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Ok(self.op(&[self], y, move |g| vec![Some(permute_tensor(g, &inv))]))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("narrow", format!("axis {axis} [{start}, +{len}) of {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let full = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let y = Tensor::from_vec(&out_shape, out)?;
        Ok(self.op(&[self], y, move |g| {
            let mut gx = vec![T::zero(); numel(&shape)];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_vec(&shape, gx).unwrap())]
        }))
    }

    /// Pads the last two axes.
    pub fn pad2d(self, mode: PadMode, top: usize, bottom: usize, left: usize, right: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = shape.len();
        if n < 2 {
            return Err(shape_err("pad2d", format!("needs rank >= 2, got {shape:?}")));
        }
        let (h, w) = (shape[n - 2], shape[n - 1]);
        if mode == PadMode::Reflect && (top >= h || bottom >= h || left >= w || right >= w) {
            return Err(shape_err(
                "pad2d",
                format!("reflect padding ({top},{bottom},{left},{right}) needs a larger input than {h}x{w}"),
            ));
        }
        if h == 0 || w == 0 {
            return Err(shape_err("pad2d", format!("empty spatial dims {shape:?}")));
        }
        let (ho, wo) = (h + top + bottom, w + left + right);
        let rows: Vec<Option<usize>> = (0..ho).map(|i| pad_index(i as isize - top as isize, h, mode)).collect();
        let cols: Vec<Option<usize>> = (0..wo).map(|j| pad_index(j as isize - left as isize, w, mode)).collect();
        let planes = numel(&shape[..n - 2]);
        let mut out = vec![T::zero(); planes * ho * wo];
        let xd = x.data();
        for p in 0..planes {
            for (i, r) in rows.iter().enumerate() {
                let Some(r) = *r else { continue };
                let dst = &mut out[(p * ho + i) * wo..(p * ho + i + 1) * wo];
                let src = &xd[(p * h + r) * w..(p * h + r + 1) * w];
                for (d, c) in dst.iter_mut().zip(&cols) {
                    if let Some(c) = *c {
                        *d = src[c];
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[n - 2] = ho;
        out_shape[n - 1] = wo;
        let y = Tensor::from_vec(&out_shape, out)?;
        Ok(self.op(&[self], y, move |g| {
            let gd = g.data();
            let mut gx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                for (i, r) in rows.iter().enumerate() {
                    let Some(r) = *r else { continue };
                    let src = &gd[(p * ho + i) * wo..(p * ho + i + 1) * wo];
                    let dst = &mut gx[(p * h + r) * w..(p * h + r + 1) * w];
                    for (s, c) in src.iter().zip(&cols) {
                        if let Some(c) = *c {
                            dst[c] += *s;
                        }
                    }
                }
            }
            vec![Some(Tensor::from_vec(&shape, gx).unwrap())]
        }))
    }

    /// Crops the last two axes to `[top, top + h) x [left, left + w)`.
    pub fn crop2d(self, top: usize, left: usize, h: usize, w: usize) -> Result<Var<'t, T>> {
        let n = self.shape().len();
        if n < 2 {
            return Err(shape_err("crop2d", "needs rank >= 2".into()));
        }
        self.narrow(n - 2, top, h)?.narrow(n - 1, left, w)
    }

    /// Space-to-depth: `[C, H, W] -> [C r^2, H / r, W / r]`.
    pub fn pixel_unshuffle(self, r: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() != 3 || r == 0 || !shape[1].is_multiple_of(r) || !shape[2].is_multiple_of(r) {
            return Err(shape_err("pixel_unshuffle", format!("factor {r} for shape {shape:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let y = unshuffle(&x, r);
        Ok(self.op(&[self], y, move |g| vec![Some(shuffle(g, r, c, h, w))]))
    }

    /// Depth-to-space: `[C r^2, H, W] -> [C, H r, W r]`.
    pub fn pixel_shuffle(self, r: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() != 3 || r == 0 || !shape[0].is_multiple_of(r * r) {
            return Err(shape_err("pixel_shuffle", format!("factor {r} for shape {shape:?}")));
        }
        let (c, h, w) = (shape[0] / (r * r), shape[1] * r, shape[2] * r);
        let y = shuffle(&x, r, c, h, w);
        Ok(self.op(&[self], y, move |g| vec![Some(unshuffle(g, r))]))
    }
}

/// Concatenates along `axis`.
pub fn concat<'t, T: Real>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let shape0 = values[0].shape().to_vec();
    if axis >= shape0.len() {
        return Err(shape_err("concat", format!("axis {axis} for {shape0:?}")));
    }
    for v in &values {
        let s = v.shape();
        if s.len() != shape0.len()
            || s.iter().zip(&shape0).enumerate().any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(shape_err("concat", format!("{:?} vs {:?} on axis {axis}", s, shape0)));
        }
    }
    let outer = numel(&shape0[..axis]);
    let inner = numel(&shape0[axis + 1..]);
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &l) in values.iter().zip(&lens) {
            out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
        }
    }
    let mut out_shape = shape0.clone();
    out_shape[axis] = total;
    let y = Tensor::from_vec(&out_shape, out)?;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    drop(values);
    Ok(first.op(parts, y, move |g| {
        let mut grads: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
        let gd = g.data();
        let mut off = 0;
        for _ in 0..outer {
            for (gv, &l) in grads.iter_mut().zip(&lens) {
                gv.extend_from_slice(&gd[off..off + l * inner]);
                off += l * inner;
            }
        }
        grads
            .into_iter()
            .zip(&shapes)
            .map(|(d, s)| Some(Tensor::from_vec(s, d).unwrap()))
            .collect()
    }))
}

fn pad_index(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    let n = n as isize;
    if (0..n).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Replicate => Some(i.clamp(0, n - 1) as usize),
        PadMode::Reflect => {
            let r = if i < 0 { -i } else { 2 * (n - 1) - i };
            Some(r.clamp(0, n - 1) as usize)
        }
    }
}

pub(crate) fn permute_tensor<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let n = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; n];
    for i in (0..n.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = x.numel();
    let mut out = Vec::with_capacity(total);
    if total > 0 {
        let mut idx = vec![0usize; n];
        let mut off = 0usize;
        let xd = x.data();
        for _ in 0..total {
            out.push(xd[off]);
            for ax in (0..n).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
    }
    Tensor::from_vec(&out_shape, out).unwrap()
}

fn unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (ho, wo) = (h / r, w / r);
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for ci in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let oc = (ci * r + dy) * r + dx;
                for y in 0..ho {
                    let src = &xd[(ci * h + y * r + dy) * w..];
                    let dst = &mut out[(oc * ho + y) * wo..(oc * ho + y + 1) * wo];
                    for (x_, d) in dst.iter_mut().enumerate() {
                        *d = src[x_ * r + dx];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c * r * r, ho, wo], out).unwrap()
}

fn shuffle<T: Real>(x: &Tensor<T>, r: usize, c: usize, h: usize, w: usize) -> Tensor<T> {
    let (hi, wi) = (h / r, w / r);
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for ci in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let ic = (ci * r + dy) * r + dx;
                for y in 0..hi {
                    let src = &xd[(ic * hi + y) * wi..(ic * hi + y + 1) * wi];
                    let dst = &mut out[(ci * h + y * r + dy) * w..];
                    for (x_, &s) in src.iter().enumerate() {
                        dst[x_ * r + dx] = s;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn pixel_shuffle_inverts_unshuffle() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[3, 4, 6], |i| i as f32));
        let y = x.pixel_unshuffle(2).unwrap();
        assert_eq!(y.shape(), [12, 2, 3]);
        // channel 1 of the output holds the (0, 1) phase of input channel 0
        assert_eq!(y.value().data()[6..9], [1.0, 3.0, 5.0]);
        let z = y.pixel_shuffle(2).unwrap();
        assert_eq!(*z.value(), *x.value());
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = x.pad2d(PadMode::Reflect, 0, 0, 2, 2).unwrap();
        assert_eq!(y.value().data(), [3.0, 2.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
        assert!(x.pad2d(PadMode::Reflect, 0, 0, 3, 0).is_err());
    }

    #[test]
    fn sum_axis_shapes() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[2, 3, 4]));
        assert_eq!(x.sum_axis(1, true).unwrap().shape(), [2, 1, 4]);
        assert_eq!(x.sum_axis(2, false).unwrap().value().data(), [4.0; 6]);
    }
}
