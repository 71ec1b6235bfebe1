//! Unary maps and broadcasting binary arithmetic.

use crate::tensor::numel;
use crate::{Error, Real, Result, Tensor, Var};

impl<'t, T: Real> Var<'t, T> {
    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn map_unary(
        self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(f);
        if !self.is_tracked() {
            return self.op(&[self], y, |_| vec![None]);
        }
        let yc = std::rc::Rc::new(y.clone());
        self.op(&[self], y, move |g| {
            let gx: Vec<T> = g
                .data()
                .iter()
                .zip(x.data())
                .zip(yc.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), gx).unwrap())]
        })
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let y = self.value().map(|v| v * s);
        self.op(&[self], y, move |g| vec![Some(g.map(|v| v * s))])
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let y = self.value().map(|v| v + s);
        self.op(&[self], y, |g| vec![Some(g.clone())])
    }

    pub fn square(self) -> Var<'t, T> {
        self.map_unary(|x| x * x, |x, _| x + x)
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.map_unary(|x| x.sqrt(), |_, y| T::c(0.5) / y)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.map_unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.map_unary(|x| x.ln(), |x, _| x.recip())
    }

    pub fn recip(self) -> Var<'t, T> {
        self.map_unary(|x| x.recip(), |_, y| -(y * y))
    }

    pub fn abs(self) -> Var<'t, T> {
        self.map_unary(|x| x.abs(), |x, _| x.signum())
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.map_unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.map_unary(sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Var<'t, T> {
        self.map_unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(self) -> Var<'t, T> {
        self.map_unary(gelu, gelu_grad)
    }

    pub fn leaky_relu(self, slope: T) -> Var<'t, T> {
        self.map_unary(
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t, T> {
        self.map_unary(softplus, |x, _| sigmoid(x))
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(self, rhs, "add", BinOp::Add)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(self, rhs, "sub", BinOp::Sub)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(self, rhs, "mul", BinOp::Mul)
    }

    pub fn div(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(self, rhs, "div", BinOp::Div)
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    if x > T::c(20.0) {
        x
    } else if x < T::c(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inv<T: Real>(y: T) -> T {
    if y > T::c(20.0) {
        y
    } else {
        y.exp_m1().ln()
    }
}

// 0.5 (1 + tanh u) = 1 / (1 + exp(-2u)), cheaper than tanh.
fn gelu_gate<T: Real>(x: T) -> (T, T) {
    let k = T::c(2.0 * 0.797_884_560_802_865_4); // 2 sqrt(2/pi)
    let u2 = k * (x + T::c(0.044715) * x * x * x);
    let s = T::one() / (T::one() + (-u2).exp());
    (s, k * (T::one() + T::c(3.0 * 0.044715) * x * x))
}

fn gelu<T: Real>(x: T) -> T {
    x * gelu_gate(x).0
}

fn gelu_grad<T: Real>(x: T, _y: T) -> T {
    let (s, du2) = gelu_gate(x);
    s + x * s * (T::one() - s) * du2
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

/// Numpy-style broadcast of two shapes (right aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (zero on broadcast axes).
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0; n];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + n - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Visits the output in rows along the last axis, giving the starting offsets
/// of both operands plus the output offset.
fn for_each_row(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = out.len();
    if n == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[n - 1];
    let rows = numel(&out[..n - 1]);
    let mut idx = vec![0usize; n - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for r in 0..rows {
        f(oa, ob, r * inner);
        // odometer increment over the leading axes
        for ax in (0..n - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn broadcast_apply<T: Real>(a: &Tensor<T>, b: &Tensor<T>, out_shape: &[usize], op: BinOp) -> Tensor<T> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| op.apply(x, y)).collect();
        return Tensor::from_vec(out_shape, data).unwrap();
    }
    let n = out_shape.len();
    let sa = bcast_strides(a.shape(), out_shape);
    let sb = bcast_strides(b.shape(), out_shape);
    let inner = if n == 0 { 1 } else { out_shape[n - 1] };
    let (la, lb) = if n == 0 { (1, 1) } else { (sa[n - 1], sb[n - 1]) };
    let mut out = vec![T::zero(); numel(out_shape)];
    let (ad, bd) = (a.data(), b.data());
    for_each_row(out_shape, &sa, &sb, |oa, ob, oo| {
        let row = &mut out[oo..oo + inner];
        for (j, o) in row.iter_mut().enumerate() {
            *o = op.apply(ad[oa + j * la], bd[ob + j * lb]);
        }
    });
    Tensor::from_vec(out_shape, out).unwrap()
}

/// Sums `g` (shaped like a broadcast output) back down to `shape`.
pub fn sum_to_shape<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let out_shape = g.shape();
    let n = out_shape.len();
    let s = bcast_strides(shape, out_shape);
    let zero = vec![0; n];
    let inner = if n == 0 { 1 } else { out_shape[n - 1] };
    let ls = if n == 0 { 0 } else { s[n - 1] };
    let mut acc = vec![T::zero(); numel(shape)];
    let gd = g.data();
    for_each_row(out_shape, &s, &zero, |o, _, oo| {
        let row = &gd[oo..oo + inner];
        if ls == 0 {
            acc[o] += row.iter().copied().sum::<T>();
        } else {
            for (j, &v) in row.iter().enumerate() {
                acc[o + j] += v;
            }
        }
    });
    Tensor::from_vec(shape, acc).unwrap()
}

fn binary<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>, name: &'static str, op: BinOp) -> Result<Var<'t, T>> {
    let (av, bv) = (a.value(), b.value());
    let out_shape = broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| Error::Shape {
        op: name,
        detail: format!("cannot broadcast {:?} with {:?}", av.shape(), bv.shape()),
    })?;
    let y = broadcast_apply(&av, &bv, &out_shape, op);
    let (ta, tb) = (a.is_tracked(), b.is_tracked());
    if !(ta || tb) {
        return Ok(a.op(&[a, b], y, |_| vec![None, None]));
    }
    let yc = if matches!(op, BinOp::Div) { Some(std::rc::Rc::new(y.clone())) } else { None };
    Ok(a.op(&[a, b], y, move |g| {
        let ga = ta.then(|| match op {
            BinOp::Add | BinOp::Sub => sum_to_shape(g, av.shape()),
            BinOp::Mul => sum_to_shape(&broadcast_apply(g, &bv, g.shape(), BinOp::Mul), av.shape()),
            BinOp::Div => sum_to_shape(&broadcast_apply(g, &bv, g.shape(), BinOp::Div), av.shape()),
        });
        let gb = tb.then(|| match op {
            BinOp::Add => sum_to_shape(g, bv.shape()),
            BinOp::Sub => sum_to_shape(&g.map(|v| -v), bv.shape()),
            BinOp::Mul => sum_to_shape(&broadcast_apply(g, &av, g.shape(), BinOp::Mul), bv.shape()),
            BinOp::Div => {
                // d(a/b)/db = -y/b
                let y = yc.as_ref().unwrap();
                let t = broadcast_apply(g, y, g.shape(), BinOp::Mul);
                let t = broadcast_apply(&t, &bv, g.shape(), BinOp::Div);
                sum_to_shape(&t.map(|v| -v), bv.shape())
            }
        });
        vec![ga, gb]
    }))
}
