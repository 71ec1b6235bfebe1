//! Batched matrix products.

use crate::real::{gemm, MatRef};
use crate::{Error, Real, Result, Tensor, Var};

/// Splits a rank-2 or rank-3 shape into `(batch, rows, cols)`.
fn as_batched(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [r, c] => Some((1, r, c)),
        [b, r, c] => Some((b, r, c)),
        _ => None,
    }
}

fn view<T>(data: &[T], b: usize, rows: usize, cols: usize, trans: bool) -> MatRef<'_, T> {
    let m = MatRef::rowmajor(&data[b * rows * cols..(b + 1) * rows * cols], rows, cols);
    if trans {
        m.t()
    } else {
        m
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// `op(a) @ op(b)` where `op` optionally transposes the last two axes.
    /// Operands are `[M, K]` or `[B, M, K]`; a rank-2 operand is broadcast
    /// across the batch of the other.
    pub fn matmul_t(self, rhs: Var<'t, T>, trans_a: bool, trans_b: bool) -> Result<Var<'t, T>> {
        let (av, bv) = (self.value(), rhs.value());
        let err = || Error::Shape {
            op: "matmul",
            detail: format!("{:?}{} @ {:?}{}", av.shape(), if trans_a { "^T" } else { "" }, bv.shape(), if trans_b { "^T" } else { "" }),
        };
        let (ba, ra, ca) = as_batched(av.shape()).ok_or_else(err)?;
        let (bb, rb, cb) = as_batched(bv.shape()).ok_or_else(err)?;
        let (m, ka) = if trans_a { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        let batch = ba.max(bb);
        if ka != kb || (ba != bb && ba != 1 && bb != 1) {
            return Err(err());
        }
        let a_bcast = ba == 1 && av.rank() == 2;
        let b_bcast = bb == 1 && bv.rank() == 2;
        if (ba == 1 && batch > 1 && !a_bcast) || (bb == 1 && batch > 1 && !b_bcast) {
            return Err(err());
        }
        let ia = move |i: usize| if ba == 1 { 0 } else { i };
        let ib = move |i: usize| if bb == 1 { 0 } else { i };
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                T::one(),
                view(av.data(), ia(i), ra, ca, trans_a),
                view(bv.data(), ib(i), rb, cb, trans_b),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let out_shape = if av.rank() == 3 || bv.rank() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let y = Tensor::from_vec(&out_shape, out)?;
        let (ta, tb) = (self.is_tracked(), rhs.is_tracked());
        Ok(self.op(&[self, rhs], y, move |g| {
            let gd = g.data();
            let gview = |i: usize, trans: bool| view(gd, i, m, n, trans);
            let ga = ta.then(|| {
                // d op(A) = G op(B)^T ; for trans_a, dA = op(B) G^T
                let mut da = vec![T::zero(); av.numel()];
                for i in 0..batch {
                    let beta = if ba == 1 && i > 0 { T::one() } else { T::zero() };
                    let dst = &mut da[ia(i) * ra * ca..(ia(i) + 1) * ra * ca];
                    let opb = view(bv.data(), ib(i), rb, cb, trans_b);
                    if trans_a {
                        gemm(T::one(), opb, gview(i, true), beta, dst);
                    } else {
                        gemm(T::one(), gview(i, false), opb.t(), beta, dst);
                    }
                }
                Tensor::from_vec(av.shape(), da).unwrap()
            });
            let gb = tb.then(|| {
                // d op(B) = op(A)^T G ; for trans_b, dB = G^T op(A)
                let mut db = vec![T::zero(); bv.numel()];
                for i in 0..batch {
                    let beta = if bb == 1 && i > 0 { T::one() } else { T::zero() };
                    let dst = &mut db[ib(i) * rb * cb..(ib(i) + 1) * rb * cb];
                    let opa = view(av.data(), ia(i), ra, ca, trans_a);
                    if trans_b {
                        gemm(T::one(), gview(i, true), opa, beta, dst);
                    } else {
                        gemm(T::one(), opa.t(), gview(i, false), beta, dst);
                    }
                }
                Tensor::from_vec(bv.shape(), db).unwrap()
            });
            vec![ga, gb]
        }))
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_t(rhs, false, false)
    }
}
