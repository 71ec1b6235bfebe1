//! Central finite-difference gradient checking in `f64`.

use crate::{Gradients, Tape, Tensor, Var};

/// Worst relative error between analytic and central-difference gradients.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Index of the input holding the worst entry.
    pub worst_input: usize,
}

/// Compares the gradient of `f(inputs)` against central differences with step
/// `h`. `f` must return a one-element variable. Relative error is measured as
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], h: f64, floor: f64, f: F) -> GradCheck
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&vars);
        let mut grads: Gradients<f64> = tape.backward(out).expect("scalar output");
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&vars).value().item()
    };
    let mut res = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, worst_input: 0 };
    let mut xs: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            xs[i].data_mut()[j] = x0 + h;
            let fp = eval(&xs);
            xs[i].data_mut()[j] = x0 - h;
            let fm = eval(&xs);
            xs[i].data_mut()[j] = x0;
            let num = (fp - fm) / (2.0 * h);
            let a = grad.data()[j];
            let abs = (a - num).abs();
            let rel = abs / a.abs().max(num.abs()).max(floor);
            if rel > res.max_rel_err {
                res.max_rel_err = rel;
                res.worst_input = i;
            }
            res.max_abs_err = res.max_abs_err.max(abs);
        }
    }
    res
}
