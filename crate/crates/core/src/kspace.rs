//! Centered orthonormal Fourier transforms, coil expansion/reduction and the
//! masked encoding operator `A = M F S` with its adjoint.
//!
//! Complex stacks are `[N, 2, H, W]`: plane 0 holds the real part, plane 1 the
//! imaginary part. Sensitivity maps are `[C, 2, H, W]`, a single image is
//! `[1, 2, H, W]`, masks are real `[H, W]` grids of zeros and ones.

use rustfft::num_complex::Complex;
use rustfft::FftDirection;

use crate::error::invalid;
use crate::{Float, Result, Tensor, Var};

/// `(n, h, w)` of a complex stack.
pub fn complex_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, 2, h, w] if h > 0 && w > 0 => Ok((n, h, w)),
        _ => Err(invalid!("expected a complex stack [N, 2, H, W], got {shape:?}")),
    }
}

fn transform<T: Float>(x: &Tensor<T>, direction: FftDirection) -> Tensor<T> {
    let (n, h, w) = complex_dims(x.shape()).expect("checked by caller");
    let p = h * w;
    let row = T::fft_plan(w, direction);
    let col = T::fft_plan(h, direction);
    let mut scratch = vec![Complex::default(); row.get_inplace_scratch_len().max(col.get_inplace_scratch_len())];
    let scale = T::c(1.0 / (p as f64).sqrt());
    let (sh, sw) = (h / 2, w / 2);
    let mut buf = vec![Complex::default(); p];
    let mut tbuf = vec![Complex::default(); p];
    let mut out = vec![T::zero(); x.numel()];
    for k in 0..n {
        let re = &x.data()[2 * k * p..(2 * k + 1) * p];
        let im = &x.data()[(2 * k + 1) * p..(2 * k + 2) * p];
        // ifftshift on load
        for i in 0..h {
            let si = (i + sh) % h;
            for j in 0..w {
                let sj = (j + sw) % w;
                buf[i * w + j] = Complex::new(re[si * w + sj], im[si * w + sj]);
            }
        }
        row.process_with_scratch(&mut buf, &mut scratch);
        for i in 0..h {
            for j in 0..w {
                tbuf[j * h + i] = buf[i * w + j];
            }
        }
        col.process_with_scratch(&mut tbuf, &mut scratch);
        // fftshift on store
        let (ore, oim) = out[2 * k * p..(2 * k + 2) * p].split_at_mut(p);
        for i in 0..h {
            let si = (i + h - sh) % h;
            for j in 0..w {
                let sj = (j + w - sw) % w;
                let v = tbuf[sj * h + si];
                ore[i * w + j] = v.re * scale;
                oim[i * w + j] = v.im * scale;
            }
        }
    }
    Tensor::from_vec(x.shape(), out).expect("same shape")
}

/// Centered orthonormal 2-D DFT over the last two axes of a complex stack.
pub fn fft2c<'t, T: Float>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    complex_dims(&x.shape())?;
    let y = transform(&x.value(), FftDirection::Forward);
    Ok(x.tape().custom_op(&[x], y, |g| vec![Some(transform(g, FftDirection::Inverse))]))
}

/// Inverse (and adjoint) of [`fft2c`].
pub fn ifft2c<'t, T: Float>(k: Var<'t, T>) -> Result<Var<'t, T>> {
    complex_dims(&k.shape())?;
    let y = transform(&k.value(), FftDirection::Inverse);
    Ok(k.tape().custom_op(&[k], y, |g| vec![Some(transform(g, FftDirection::Forward))]))
}

/// Pointwise product over `(re, im)` planes with broadcasting on the stack
/// axis. `conj_a` conjugates `a` first.
fn cmul_raw<T: Float>(a: &Tensor<T>, b: &Tensor<T>, conj_a: bool, conj_b: bool) -> Tensor<T> {
    let (na, h, w) = complex_dims(a.shape()).expect("checked");
    let (nb, _, _) = complex_dims(b.shape()).expect("checked");
    let n = na.max(nb);
    let p = h * w;
    let mut out = vec![T::zero(); n * 2 * p];
    let (sa, sb) = (if conj_a { -T::one() } else { T::one() }, if conj_b { -T::one() } else { T::one() });
    for k in 0..n {
        let ka = if na == 1 { 0 } else { k };
        let kb = if nb == 1 { 0 } else { k };
        let ar = &a.data()[2 * ka * p..(2 * ka + 1) * p];
        let ai = &a.data()[(2 * ka + 1) * p..(2 * ka + 2) * p];
        let br = &b.data()[2 * kb * p..(2 * kb + 1) * p];
        let bi = &b.data()[(2 * kb + 1) * p..(2 * kb + 2) * p];
        let (or, oi) = out[2 * k * p..(2 * k + 2) * p].split_at_mut(p);
        for i in 0..p {
            let (xr, xi) = (ar[i], sa * ai[i]);
            let (yr, yi) = (br[i], sb * bi[i]);
            or[i] = xr * yr - xi * yi;
            oi[i] = xr * yi + xi * yr;
        }
    }
    Tensor::from_vec(&[n, 2, h, w], out).expect("sized")
}

/// Sums a `[N, 2, H, W]` gradient down to `[1, 2, H, W]` when the operand was broadcast.
fn reduce_stack<T: Float>(g: Tensor<T>, n: usize) -> Tensor<T> {
    if g.dim(0) == n {
        return g;
    }
    let (_, h, w) = complex_dims(g.shape()).expect("checked");
    let len = 2 * h * w;
    let mut acc = vec![T::zero(); len];
    for chunk in g.data().chunks(len) {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a += v;
        }
    }
    Tensor::from_vec(&[1, 2, h, w], acc).expect("sized")
}

/// Complex product `a * b` (or `conj(a) * b`), broadcasting a length-1 stack
/// axis.
pub fn cmul<'t, T: Float>(a: Var<'t, T>, b: Var<'t, T>, conj_a: bool) -> Result<Var<'t, T>> {
    let (na, ha, wa) = complex_dims(&a.shape())?;
    let (nb, hb, wb) = complex_dims(&b.shape())?;
    if (ha, wa) != (hb, wb) || (na != nb && na != 1 && nb != 1) {
        return Err(invalid!("cmul: cannot combine {:?} with {:?}", a.shape(), b.shape()));
    }
    let (av, bv) = (a.value(), b.value());
    let y = cmul_raw(&av, &bv, conj_a, false);
    let (ta, tb) = (a.is_tracked(), b.is_tracked());
    Ok(a.tape().custom_op(&[a, b], y, move |g| {
        // out = a b:        ga = g conj(b), gb = g conj(a)
        // out = conj(a) b:  ga = conj(g) b, gb = g a
        let ga = ta.then(|| {
            let full = if conj_a { cmul_raw(g, &bv, true, false) } else { cmul_raw(g, &bv, false, true) };
            reduce_stack(full, na)
        });
        let gb = tb.then(|| {
            let full = cmul_raw(g, &av, false, !conj_a);
            reduce_stack(full, nb)
        });
        vec![ga, gb]
    }))
}

fn check_pair(x: &[usize], s: &[usize], what: &str) -> Result<()> {
    let (_, hx, wx) = complex_dims(x)?;
    let (_, hs, ws) = complex_dims(s)?;
    if (hx, wx) != (hs, ws) {
        return Err(invalid!("{what}: grid {hx}x{wx} does not match sensitivities {hs}x{ws}"));
    }
    Ok(())
}

/// `S_c * x` for every coil: `[1, 2, H, W]` with `[C, 2, H, W]` maps gives coil images.
pub fn expand_coils<'t, T: Float>(x: Var<'t, T>, s: Var<'t, T>) -> Result<Var<'t, T>> {
    check_pair(&x.shape(), &s.shape(), "expand_coils")?;
    if x.shape()[0] != 1 {
        return Err(invalid!("expand_coils: expected one image, got stack of {}", x.shape()[0]));
    }
    cmul(s, x, false)
}

/// `sum_c conj(S_c) * u_c`.
pub fn reduce_coils<'t, T: Float>(u: Var<'t, T>, s: Var<'t, T>) -> Result<Var<'t, T>> {
    check_pair(&u.shape(), &s.shape(), "reduce_coils")?;
    if u.shape()[0] != s.shape()[0] {
        return Err(invalid!("reduce_coils: {} coil images for {} sensitivity maps", u.shape()[0], s.shape()[0]));
    }
    Ok(cmul(s, u, true)?.sum_axis(0, true)?)
}

fn check_mask<T: Float>(k: &[usize], m: Var<'_, T>) -> Result<()> {
    let (_, h, w) = complex_dims(k)?;
    if m.shape() != [h, w] {
        return Err(invalid!("mask shape {:?} does not match grid {h}x{w}", m.shape()));
    }
    Ok(())
}

/// Elementwise mask over every coil and plane.
pub fn apply_mask<'t, T: Float>(k: Var<'t, T>, m: Var<'t, T>) -> Result<Var<'t, T>> {
    check_mask(&k.shape(), m)?;
    Ok(k.mul(m)?)
}

/// `A x = M F (S x)`.
pub fn forward_op<'t, T: Float>(x: Var<'t, T>, s: Var<'t, T>, m: Var<'t, T>) -> Result<Var<'t, T>> {
    apply_mask(fft2c(expand_coils(x, s)?)?, m)
}

/// `A^H y = S^H F^-1 (M y)`.
pub fn adjoint_op<'t, T: Float>(y: Var<'t, T>, s: Var<'t, T>, m: Var<'t, T>) -> Result<Var<'t, T>> {
    reduce_coils(ifft2c(apply_mask(y, m)?)?, s)
}

/// Sensitivity-weighted coil combination of already-masked k-space.
pub fn zero_filled<'t, T: Float>(y: Var<'t, T>, s: Var<'t, T>) -> Result<Var<'t, T>> {
    reduce_coils(ifft2c(y)?, s)
}

/// `sqrt(re^2 + im^2 + eps)` of each image in a stack, giving `[N, H, W]`.
pub fn magnitude<'t, T: Float>(x: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
    complex_dims(&x.shape())?;
    Ok(x.square().sum_axis(1, false)?.add_scalar(eps).sqrt())
}

/// Root-sum-of-squares over the coil axis of `[C, 2, H, W]`, giving `[H, W]`.
pub fn rss<T: Float>(u: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = complex_dims(u.shape())?;
    let p = h * w;
    let mut out = vec![T::zero(); p];
    for plane in u.data().chunks(p).take(2 * c) {
        for (o, &v) in out.iter_mut().zip(plane) {
            *o += v * v;
        }
    }
    Ok(Tensor::from_vec(&[h, w], out.into_iter().map(|v| v.sqrt()).collect())?)
}

/// Plain-tensor versions of the operators, evaluated on an untracked tape.
pub mod eager {
    use super::*;
    use crate::Tape;

    fn finite<T: Float>(x: &Tensor<T>, what: &str) -> Result<()> {
        if x.all_finite() {
            Ok(())
        } else {
            Err(invalid!("{what}: input contains non-finite values"))
        }
    }

    pub fn fft2c<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
        finite(x, "fft2c")?;
        let tape = Tape::new();
        Ok((*super::fft2c(tape.constant(x.clone()))?.value()).clone())
    }

    pub fn ifft2c<T: Float>(k: &Tensor<T>) -> Result<Tensor<T>> {
        finite(k, "ifft2c")?;
        let tape = Tape::new();
        Ok((*super::ifft2c(tape.constant(k.clone()))?.value()).clone())
    }

    fn run2<T: Float>(
        a: &Tensor<T>,
        b: &Tensor<T>,
        f: impl for<'t> Fn(Var<'t, T>, Var<'t, T>) -> Result<Var<'t, T>>,
    ) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let out = f(tape.constant(a.clone()), tape.constant(b.clone()))?;
        Ok((*out.value()).clone())
    }

    fn run3<T: Float>(
        a: &Tensor<T>,
        b: &Tensor<T>,
        c: &Tensor<T>,
        f: impl for<'t> Fn(Var<'t, T>, Var<'t, T>, Var<'t, T>) -> Result<Var<'t, T>>,
    ) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let out = f(tape.constant(a.clone()), tape.constant(b.clone()), tape.constant(c.clone()))?;
        Ok((*out.value()).clone())
    }

    pub fn expand_coils<T: Float>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        run2(x, s, super::expand_coils)
    }

    pub fn reduce_coils<T: Float>(u: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        run2(u, s, super::reduce_coils)
    }

    pub fn forward_op<T: Float>(x: &Tensor<T>, s: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
        run3(x, s, m, super::forward_op)
    }

    pub fn adjoint_op<T: Float>(y: &Tensor<T>, s: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
        run3(y, s, m, super::adjoint_op)
    }

    pub fn zero_filled<T: Float>(y: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        run2(y, s, super::zero_filled)
    }

    /// `|x|` of each image, exact (no epsilon), `[N, H, W]`.
    pub fn magnitude<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, h, w) = complex_dims(x.shape())?;
        let p = h * w;
        let mut out = Vec::with_capacity(n * p);
        for k in 0..n {
            let re = &x.data()[2 * k * p..(2 * k + 1) * p];
            let im = &x.data()[(2 * k + 1) * p..(2 * k + 2) * p];
            out.extend(re.iter().zip(im).map(|(&a, &b)| a.hypot(b)));
        }
        Ok(Tensor::from_vec(&[n, h, w], out)?)
    }
}

/// Real inner product `Re <a, b>` of two equally shaped complex stacks.
pub fn inner<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum()
}

#[cfg(test)]
mod tests {
    use super::eager::{expand_coils, fft2c, ifft2c, magnitude, reduce_coils};
    use super::{cmul, inner, rss};
    use crate::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_c(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, 2, h, w], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn centered_delta_maps_to_constant() {
        let mut x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        x.data_mut()[2 * 4 + 2] = 1.0;
        let k = fft2c(&x).unwrap();
        for v in &k.data()[..16] {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert!(k.data()[16..].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn odd_sizes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_c(&mut rng, 2, 5, 7);
        let back = ifft2c(&fft2c(&x).unwrap()).unwrap();
        let err = back.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-14);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        x.data_mut()[3] = f64::NAN;
        assert!(matches!(fft2c(&x), Err(crate::Error::Validation(_))));
    }

    #[test]
    fn coil_ops_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_c(&mut rng, 1, 6, 5);
        let s = rand_c(&mut rng, 3, 6, 5);
        let u = rand_c(&mut rng, 3, 6, 5);
        let lhs = inner(&expand_coils(&x, &s).unwrap(), &u);
        let rhs = inner(&x, &reduce_coils(&u, &s).unwrap());
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn coil_count_mismatch_is_an_error() {
        let s = Tensor::<f64>::zeros(&[3, 2, 4, 4]);
        let u = Tensor::<f64>::zeros(&[2, 2, 4, 4]);
        assert!(reduce_coils(&u, &s).is_err());
        assert!(expand_coils(&Tensor::zeros(&[1, 2, 4, 5]), &s).is_err());
    }

    #[test]
    fn cmul_gradients_match_finite_differences() {
        use sdum_autograd::check::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs = [rand_c(&mut rng, 3, 3, 4), rand_c(&mut rng, 1, 3, 4), rand_c(&mut rng, 3, 3, 4)];
        for conj in [false, true] {
            let r = grad_check(&inputs, 1e-6, 1e-3, |v| {
                let p = cmul(v[0], v[1], conj).unwrap();
                p.mul(v[2]).unwrap().sum_all()
            });
            assert!(r.max_rel_err < 1e-6, "{r:?}");
            let r = grad_check(&inputs, 1e-6, 1e-3, |v| {
                let p = cmul(v[1], v[0], conj).unwrap();
                super::fft2c(p).unwrap().mul(v[2]).unwrap().sum_all()
            });
            assert!(r.max_rel_err < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn rss_single_coil_is_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = rand_c(&mut rng, 1, 4, 4);
        let r = rss(&u).unwrap();
        let m = magnitude(&u).unwrap();
        for (a, b) in r.data().iter().zip(m.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
