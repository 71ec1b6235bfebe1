//! Stride-1 2-D convolutions on `[C, H, W]` feature maps.

use std::rc::Rc;

use crate::real::{gemm, MatRef};
use crate::{Error, Real, Result, Tensor, Var};

fn conv_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

struct Geometry {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(x: &[usize], kh: usize, kw: usize, ph: usize, pw: usize, op: &'static str) -> Result<Self> {
        if x.len() != 3 {
            return Err(conv_err(op, format!("input must be [C, H, W], got {x:?}")));
        }
        let (ci, h, w) = (x[0], x[1], x[2]);
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(conv_err(op, format!("kernel {kh}x{kw} larger than padded input {x:?}")));
        }
        Ok(Self { ci, h, w, kh, kw, ph, pw, ho: h + 2 * ph - kh + 1, wo: w + 2 * pw - kw + 1 })
    }

    /// Output columns `ox` whose input column `ox + kx - pw` is inside the image.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pw.saturating_sub(kx);
        let hi = (self.w + self.pw).saturating_sub(kx).min(self.wo);
        (lo, hi.max(lo))
    }

    fn row_src(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy as isize + ky as isize - self.ph as isize;
        (0..self.h as isize).contains(&iy).then_some(iy as usize)
    }
}

/// `[Ci, H, W] -> [Ci kh kw, Ho Wo]`.
fn im2col<T: Real>(x: &[T], g: &Geometry) -> Vec<T> {
    let n = g.ho * g.wo;
    let mut col = vec![T::zero(); g.ci * g.kh * g.kw * n];
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[((c * g.kh + ky) * g.kw + kx) * n..][..n];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.ho {
                    let Some(iy) = g.row_src(oy, ky) else { continue };
                    let ix0 = lo + kx - g.pw;
                    row[oy * g.wo + lo..oy * g.wo + hi].copy_from_slice(&plane[iy * g.w + ix0..iy * g.w + ix0 + hi - lo]);
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], g: &Geometry) -> Vec<T> {
    let n = g.ho * g.wo;
    let mut x = vec![T::zero(); g.ci * g.h * g.w];
    for c in 0..g.ci {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[((c * g.kh + ky) * g.kw + kx) * n..][..n];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.ho {
                    let Some(iy) = g.row_src(oy, ky) else { continue };
                    let ix0 = lo + kx - g.pw;
                    let dst = &mut plane[iy * g.w + ix0..iy * g.w + ix0 + hi - lo];
                    for (d, &s) in dst.iter_mut().zip(&row[oy * g.wo + lo..oy * g.wo + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

// Eight independent accumulators so the reduction vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

fn bias_grad<T: Real>(g: &[T], co: usize, plane: usize) -> Tensor<T> {
    Tensor::from_fn(&[co], |c| g[c * plane..(c + 1) * plane].iter().copied().sum())
}

impl<'t, T: Real> Var<'t, T> {
    /// Dense convolution. `weight` is `[Co, Ci, kh, kw]`, `bias` is `[Co]`,
    /// zero padding of `pad` on each side of both spatial axes.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, pad: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let wv = weight.value();
        let ws = wv.shape().to_vec();
        if ws.len() != 4 {
            return Err(conv_err("conv2d", format!("weight must be [Co, Ci, kh, kw], got {ws:?}")));
        }
        let g = Geometry::new(x.shape(), ws[2], ws[3], pad, pad, "conv2d")?;
        if ws[1] != g.ci {
            return Err(conv_err("conv2d", format!("weight {ws:?} vs input {:?}", x.shape())));
        }
        let co = ws[0];
        let k = g.ci * g.kh * g.kw;
        let n = g.ho * g.wo;
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(conv_err("conv2d", format!("bias {:?} for {co} output channels", b.shape())));
            }
        }
        let pointwise = g.kh == 1 && g.kw == 1 && pad == 0;
        let col: Rc<Vec<T>> = if pointwise { Rc::new(Vec::new()) } else { Rc::new(im2col(x.data(), &g)) };
        let mut out = vec![T::zero(); co * n];
        {
            let b_mat = if pointwise { MatRef::rowmajor(x.data(), k, n) } else { MatRef::rowmajor(&col, k, n) };
            gemm(T::one(), MatRef::rowmajor(wv.data(), co, k), b_mat, T::zero(), &mut out);
        }
        if let Some(b) = bias {
            add_bias(&mut out, b.value().data(), n);
        }
        let y = Tensor::from_vec(&[co, g.ho, g.wo], out)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let (tx, tw) = (self.is_tracked(), weight.is_tracked());
        let has_bias = bias.is_some();
        let xshape = x.shape().to_vec();
        Ok(self.op(&parents, y, move |gy| {
            let gd = gy.data();
            let gx = tx.then(|| {
                let w_t = MatRef::rowmajor(wv.data(), co, k).t();
                let mut dcol = vec![T::zero(); k * n];
                gemm(T::one(), w_t, MatRef::rowmajor(gd, co, n), T::zero(), &mut dcol);
                let dx = if pointwise { dcol } else { col2im(&dcol, &g) };
                Tensor::from_vec(&xshape, dx).unwrap()
            });
            let gw = tw.then(|| {
                let mut dw = vec![T::zero(); co * k];
                let src = if pointwise { MatRef::rowmajor(x.data(), k, n) } else { MatRef::rowmajor(&col, k, n) };
                gemm(T::one(), MatRef::rowmajor(gd, co, n), src.t(), T::zero(), &mut dw);
                Tensor::from_vec(&ws, dw).unwrap()
            });
            let mut out = vec![gx, gw];
            if has_bias {
                out.push(Some(bias_grad(gd, co, n)));
            }
            out
        }))
    }

    /// Depthwise convolution. `weight` is `[C, 1, kh, kw]`.
    pub fn depthwise_conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, pad: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let wv = weight.value();
        let ws = wv.shape().to_vec();
        if ws.len() != 4 || ws[1] != 1 {
            return Err(conv_err("depthwise_conv2d", format!("weight must be [C, 1, kh, kw], got {ws:?}")));
        }
        let g = Geometry::new(x.shape(), ws[2], ws[3], pad, pad, "depthwise_conv2d")?;
        if ws[0] != g.ci {
            return Err(conv_err("depthwise_conv2d", format!("weight {ws:?} vs input {:?}", x.shape())));
        }
        if let Some(b) = bias {
            if b.shape() != [g.ci] {
                return Err(conv_err("depthwise_conv2d", format!("bias {:?}", b.shape())));
            }
        }
        let n = g.ho * g.wo;
        let mut out = vec![T::zero(); g.ci * n];
        for c in 0..g.ci {
            let plane = &x.data()[c * g.h * g.w..(c + 1) * g.h * g.w];
            let kern = &wv.data()[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let dst = &mut out[c * n..(c + 1) * n];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wk = kern[ky * g.kw + kx];
                    let (lo, hi) = g.col_range(kx);
                    for oy in 0..g.ho {
                        let Some(iy) = g.row_src(oy, ky) else { continue };
                        let ix0 = lo + kx - g.pw;
                        let src = &plane[iy * g.w + ix0..iy * g.w + ix0 + hi - lo];
                        for (d, &s) in dst[oy * g.wo + lo..oy * g.wo + hi].iter_mut().zip(src) {
                            *d += wk * s;
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            add_bias(&mut out, b.value().data(), n);
        }
        let y = Tensor::from_vec(&[g.ci, g.ho, g.wo], out)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let (tx, tw) = (self.is_tracked(), weight.is_tracked());
        let has_bias = bias.is_some();
        let xshape = x.shape().to_vec();
        Ok(self.op(&parents, y, move |gy| {
            let gd = gy.data();
            let mut dx = if tx { vec![T::zero(); g.ci * g.h * g.w] } else { Vec::new() };
            let mut dw = if tw { vec![T::zero(); ws.iter().product()] } else { Vec::new() };
            for c in 0..g.ci {
                let plane = &x.data()[c * g.h * g.w..(c + 1) * g.h * g.w];
                let kern = &wv.data()[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
                let gplane = &gd[c * n..(c + 1) * n];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wk = kern[ky * g.kw + kx];
                        let (lo, hi) = g.col_range(kx);
                        let mut acc = T::zero();
                        for oy in 0..g.ho {
                            let Some(iy) = g.row_src(oy, ky) else { continue };
                            let ix0 = lo + kx - g.pw;
                            let grow = &gplane[oy * g.wo + lo..oy * g.wo + hi];
                            if tw {
                                let src = &plane[iy * g.w + ix0..iy * g.w + ix0 + hi - lo];
                                acc += dot(grow, src);
                            }
                            if tx {
                                let d = &mut dx[c * g.h * g.w + iy * g.w + ix0..][..hi - lo];
                                for (d, &s) in d.iter_mut().zip(grow) {
                                    *d += wk * s;
                                }
                            }
                        }
                        if tw {
                            dw[(c * g.kh + ky) * g.kw + kx] = acc;
                        }
                    }
                }
            }
            let mut out = vec![
                tx.then(|| Tensor::from_vec(&xshape, dx).unwrap()),
                tw.then(|| Tensor::from_vec(&ws, dw).unwrap()),
            ];
            if has_bias {
                out.push(Some(bias_grad(gd, g.ci, n)));
            }
            out
        }))
    }

    /// Valid-mode correlation of every `[.., H, W]` plane with a fixed
    /// separable kernel `k ⊗ k` (no padding). Used for windowed statistics.
    pub fn separable_filter_valid(self, kernel: &[T]) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let r = shape.len();
        let k = kernel.len();
        if r < 2 || shape[r - 2] < k || shape[r - 1] < k || k == 0 {
            return Err(conv_err("separable_filter_valid", format!("kernel {k} on {shape:?}")));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (ho, wo) = (h - k + 1, w - k + 1);
        let planes: usize = shape[..r - 2].iter().product();
        let kern: Rc<Vec<T>> = Rc::new(kernel.to_vec());
        let mut out = vec![T::zero(); planes * ho * wo];
        let mut tmp = vec![T::zero(); h * wo];
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            // horizontal pass
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                let dst = &mut tmp[y * wo..(y + 1) * wo];
                dst.fill(T::zero());
                for (j, &kj) in kern.iter().enumerate() {
                    for (d, &s) in dst.iter_mut().zip(&row[j..j + wo]) {
                        *d += kj * s;
                    }
                }
            }
            // vertical pass
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                let d = &mut dst[y * wo..(y + 1) * wo];
                for (i, &ki) in kern.iter().enumerate() {
                    for (d, &s) in d.iter_mut().zip(&tmp[(y + i) * wo..(y + i + 1) * wo]) {
                        *d += ki * s;
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        let y = Tensor::from_vec(&out_shape, out)?;
        Ok(self.op(&[self], y, move |g| {
            let mut gx = vec![T::zero(); planes * h * w];
            let mut tmp = vec![T::zero(); h * wo];
            for p in 0..planes {
                let gp = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                tmp.fill(T::zero());
                for y in 0..ho {
                    for (i, &ki) in kern.iter().enumerate() {
                        let d = &mut tmp[(y + i) * wo..(y + i + 1) * wo];
                        for (d, &s) in d.iter_mut().zip(&gp[y * wo..(y + 1) * wo]) {
                            *d += ki * s;
                        }
                    }
                }
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    let row = &mut dst[y * w..(y + 1) * w];
                    let t = &tmp[y * wo..(y + 1) * wo];
                    for (j, &kj) in kern.iter().enumerate() {
                        for (d, &s) in row[j..j + wo].iter_mut().zip(t) {
                            *d += kj * s;
                        }
                    }
                }
            }
            vec![Some(Tensor::from_vec(&shape, gx).unwrap())]
        }))
    }
}
