use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdum_autograd::check::grad_check;
use sdum_autograd::{concat, PadMode, Tensor, Var};

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Contracts `y` with a fixed random weight so every output entry matters.
fn probe<'t>(y: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = y.tape().constant(rand_t(&mut rng, &y.shape()));
    y.mul(w).unwrap().sum_all()
}

fn check(shapes: &[&[usize]], f: impl for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs: Vec<_> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
    let r = grad_check(&inputs, H, 1e-3, |v| probe(f(v), 99));
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn unary_maps() {
    check(&[&[3, 4]], |v| v[0].square());
    check(&[&[3, 4]], |v| v[0].exp());
    check(&[&[3, 4]], |v| v[0].tanh());
    check(&[&[3, 4]], |v| v[0].sigmoid());
    check(&[&[3, 4]], |v| v[0].silu());
    check(&[&[3, 4]], |v| v[0].gelu());
    check(&[&[3, 4]], |v| v[0].softplus());
    check(&[&[3, 4]], |v| v[0].leaky_relu(0.2));
    check(&[&[3, 4]], |v| v[0].scale(-2.5).add_scalar(1.0));
    check(&[&[3, 4]], |v| v[0].square().add_scalar(0.5).sqrt());
    check(&[&[3, 4]], |v| v[0].square().add_scalar(0.5).ln());
    check(&[&[3, 4]], |v| v[0].square().add_scalar(0.5).recip());
}

#[test]
fn broadcasting_binary_ops() {
    check(&[&[2, 3, 4], &[3, 1]], |v| v[0].add(v[1]).unwrap());
    check(&[&[2, 3, 4], &[4]], |v| v[0].sub(v[1]).unwrap());
    check(&[&[2, 1, 4], &[1, 3, 1]], |v| v[0].mul(v[1]).unwrap());
    check(&[&[2, 3, 4], &[2, 1, 1]], |v| v[0].div(v[1].square().add_scalar(0.5)).unwrap());
}

#[test]
fn reductions_and_movement() {
    check(&[&[2, 3, 4]], |v| v[0].sum_axis(1, false).unwrap());
    check(&[&[2, 3, 4]], |v| v[0].mean_axis(0, true).unwrap());
    check(&[&[2, 3, 4]], |v| v[0].permute(&[2, 0, 1]).unwrap());
    check(&[&[2, 3, 4]], |v| v[0].narrow(2, 1, 2).unwrap());
    check(&[&[2, 3, 4], &[2, 1, 4]], |v| concat(&[v[0], v[1]], 1).unwrap());
    check(&[&[2, 4, 6]], |v| v[0].pixel_unshuffle(2).unwrap());
    check(&[&[8, 2, 3]], |v| v[0].pixel_shuffle(2).unwrap());
    for mode in [PadMode::Zero, PadMode::Reflect, PadMode::Replicate] {
        check(&[&[2, 4, 5]], move |v| v[0].pad2d(mode, 1, 2, 3, 0).unwrap());
    }
    check(&[&[2, 5, 6]], |v| v[0].crop2d(1, 2, 3, 3).unwrap());
}

#[test]
fn convolutions() {
    check(&[&[3, 5, 6], &[4, 3, 3, 3], &[4]], |v| v[0].conv2d(v[1], Some(v[2]), 1).unwrap());
    check(&[&[3, 5, 6], &[4, 3, 1, 1]], |v| v[0].conv2d(v[1], None, 0).unwrap());
    check(&[&[3, 5, 6], &[2, 3, 3, 3]], |v| v[0].conv2d(v[1], None, 0).unwrap());
    check(&[&[3, 5, 6], &[3, 1, 3, 3], &[3]], |v| v[0].depthwise_conv2d(v[1], Some(v[2]), 1).unwrap());
    check(&[&[2, 7, 8]], |v| v[0].separable_filter_valid(&[0.25, 0.5, 0.25]).unwrap());
}

#[test]
fn matrix_products() {
    check(&[&[3, 4], &[4, 5]], |v| v[0].matmul(v[1]).unwrap());
    check(&[&[2, 4, 3], &[2, 5, 4]], |v| v[0].matmul_t(v[1], true, true).unwrap());
    check(&[&[2, 3, 4], &[4, 5]], |v| v[0].matmul(v[1]).unwrap());
    check(&[&[3, 4], &[2, 5, 4]], |v| v[0].matmul_t(v[1], false, true).unwrap());
}

#[test]
fn normalizations() {
    check(&[&[4, 3, 3], &[4], &[4]], |v| v[0].layer_norm_channels(v[1], v[2], 1e-5).unwrap());
    check(&[&[3, 4, 4]], |v| v[0].instance_norm(1e-5).unwrap());
    check(&[&[3, 6]], |v| v[0].l2_normalize_last(1e-12));
    check(&[&[3, 6]], |v| v[0].scale(3.0).softmax_last());
}

#[test]
fn shared_subexpressions_accumulate() {
    check(&[&[3, 3]], |v| {
        let a = v[0].tanh();
        a.mul(a).unwrap().add(v[0]).unwrap().matmul(a).unwrap()
    });
}
