//! End-to-end behavior of the unrolled model: identity at initialization,
//! exact recovery from full data, gradient flow, expansion and persistence.

use sdum::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint};
use sdum::dataset::{make_dataset, read_dataset, write_dataset, DatasetConfig, PatternWeight, Sample};
use sdum::dc::DcMode;
use sdum::kspace::eager;
use sdum::mask::Pattern;
use sdum::params::{perturb, Bound};
use sdum::train::batch_gradients;
use sdum::unroll::{cascade_prefix, expand_model, expansion_map, CsmeMode, Model, ModelConfig, ModelInput};
use sdum::{Tape, Tensor};

fn tiny(cascades: usize) -> ModelConfig {
    let mut cfg = ModelConfig { cascades, coils: 3, weight_grid: 32, n_adj: 1, ..Default::default() };
    cfg.backbone.width = 4;
    cfg.backbone.depths = [1, 1];
    cfg.cond.d0 = 8;
    cfg.cond.d = 16;
    cfg
}

fn samples(n: usize, accel: usize, acs_lines: usize, sigma: f64) -> Vec<Sample> {
    let cfg = DatasetConfig {
        sizes: vec![[16, 16]],
        coils: vec![3],
        accels: vec![accel],
        acs_lines,
        noise_sigma: sigma,
        patterns: vec![
            PatternWeight { pattern: Pattern::Uniform, weight: 1 },
            PatternWeight { pattern: Pattern::Gaussian, weight: 1 },
        ],
        ..Default::default()
    };
    make_dataset(n, &cfg, 21).unwrap().samples
}

fn forward(cfg: &ModelConfig, params: &sdum::params::ParamStore<f64>, s: &Sample) -> Tensor<f64> {
    let tape = Tape::new();
    let p = Bound::new(&tape, params, false);
    let input = ModelInput::from_sample(&tape, s);
    let model = Model::new(cfg).unwrap();
    let x = model.forward(&p, &input).unwrap();
    (*x[0].value()).clone()
}

#[test]
fn cascade_at_init_is_one_dc_step() {
    let s = &samples(1, 4, 4, 0.01)[0];
    let cfg = tiny(1);
    let model = Model::new(&cfg).unwrap();
    let params = model.init::<f64>(0).unwrap();
    let tape = Tape::new();
    let p = Bound::new(&tape, &params, false);
    let input = ModelInput::from_sample(&tape, s);
    let st = model.initial_state(&p, &input).unwrap();
    let (x0, sens) = (st.x[0], st.s);
    let z = model.cascade_step(&p, st, 0, &input).unwrap().x[0].value();
    let dc = sdum::dc::DcLayer::new("c00.dc", DcMode::Swdc, 32);
    let expect = dc.step(&p, x0, input.y[0], sens, input.masks[0], s.mask.pattern).unwrap().value();
    assert_eq!(*z, *expect);
}

#[test]
fn full_sampling_recovers_noiseless_image_in_one_cascade() {
    let cfg = tiny(1);
    let model = Model::new(&cfg).unwrap();
    let params = model.init::<f64>(0).unwrap();
    for acs in [4, 16] {
        let mut s = samples(1, 1, acs, 0.0).remove(0);
        assert!(s.mask.grid.iter().all(|&v| v == 1));
        s.sens = None;
        let tape = Tape::new();
        let p = Bound::new(&tape, &params, false);
        let input = ModelInput::from_sample(&tape, &s);
        let out = model.forward_state(&p, &input).unwrap();
        let x = out.x[0].value();
        let full = eager::zero_filled(&s.full_frame::<f64>(0), &out.s.value()).unwrap();
        assert!(x.zip_map(&full, |a, b| a - b).max_abs() < 1e-12);
        if acs == 16 {
            // maps estimated from the whole grid make the combination equal to RSS
            let mag = eager::magnitude(&x).unwrap();
            let err = mag.data().iter().zip(s.reference.data()).map(|(a, b)| (a - *b as f64).abs()).fold(0.0, f64::max);
            assert!(err < 1e-5, "{err}");
        }
    }
}

#[test]
fn depth_does_not_change_consistent_output_at_init() {
    let s = &samples(1, 1, 16, 0.0)[0];
    let a = forward(&tiny(1), &Model::new(&tiny(1)).unwrap().init(0).unwrap(), s);
    let b = forward(&tiny(4), &Model::new(&tiny(4)).unwrap().init(0).unwrap(), s);
    assert!(a.zip_map(&b, |x, y| x - y).max_abs() < 1e-10);
}

#[test]
fn every_parameter_receives_gradient() {
    // the sensitivity network pools four times, so 16x16 leaves its deepest level at 1x1
    let cfg = DatasetConfig {
        sizes: vec![[32, 32]],
        coils: vec![3],
        patterns: vec![
            PatternWeight { pattern: Pattern::Uniform, weight: 1 },
            PatternWeight { pattern: Pattern::Radial, weight: 1 },
        ],
        ..Default::default()
    };
    let data = make_dataset(2, &cfg, 8).unwrap().samples;
    let batch: Vec<&Sample> = data.iter().collect();
    assert_ne!(batch[0].mask.pattern, batch[1].mask.pattern);
    for (csme, dc) in [(CsmeMode::Multiple, DcMode::Swdc), (CsmeMode::Single, DcMode::Wdc), (CsmeMode::Multiple, DcMode::Simple)] {
        let mut mcfg = tiny(2);
        mcfg.csme = csme;
        mcfg.dc = dc;
        let model = Model::new(&mcfg).unwrap();
        let mut params = model.init::<f64>(1).unwrap();
        // zero-initialized projections block gradient to everything upstream of them
        perturb(&mut params, 0.05, 2);
        let (_, grads) = batch_gradients(&model, &params, &batch).unwrap();
        for (k, v) in params.iter() {
            if dc == DcMode::Swdc && k.contains(".rho.") && !batch.iter().any(|s| k.rsplit('.').next() == Some(s.mask.pattern.name())) {
                assert!(grads.get(k).is_none_or(|g| g.max_abs() == 0.0), "{k} has gradient without a sample");
                continue;
            }
            let g = grads.get(k).unwrap_or_else(|| panic!("no gradient for {k}"));
            assert_eq!(g.shape(), v.shape());
            assert!(g.max_abs() > 0.0, "zero gradient for {k}");
        }
    }
}

#[test]
fn expanded_cascades_reproduce_their_sources() {
    // without conditioning a copied cascade is the same function as its source
    let mut cfg = tiny(3);
    cfg.uc = false;
    let model = Model::new(&cfg).unwrap();
    let mut params = model.init::<f64>(4).unwrap();
    perturb(&mut params, 0.05, 5);
    let (big_cfg, big) = expand_model(&cfg, &params).unwrap();
    assert_eq!(big_cfg.cascades, 4);
    for t in 0..4 {
        let src = cascade_prefix(expansion_map(t, 3).unwrap());
        let dst = cascade_prefix(t);
        assert_eq!(big.numel_with_prefix(&dst), params.numel_with_prefix(&src));
    }

    let s = &samples(1, 4, 4, 0.01)[0];
    let big_model = Model::new(&big_cfg).unwrap();
    let run = |m: &Model, st: &sdum::params::ParamStore<f64>, t: usize| {
        let tape = Tape::new();
        let p = Bound::new(&tape, st, false);
        let input = ModelInput::from_sample(&tape, s);
        let mut state = m.initial_state(&p, &input).unwrap();
        if t > 0 {
            state = m.cascade_step(&p, state, 0, &input).unwrap();
        }
        let out = m.cascade_step(&p, state, t, &input).unwrap();
        ((*out.x[0].value()).clone(), (*out.s.value()).clone())
    };
    for t in 0..4 {
        assert_eq!(run(&big_model, &big, t), run(&model, &params, expansion_map(t, 3).unwrap()), "cascade {t}");
    }
}

#[test]
fn datasets_and_checkpoints_persist_across_expansion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig { sizes: vec![[16, 16]], coils: vec![3], acs_lines: 4, ..Default::default() };
    let ds = make_dataset(3, &cfg, 2).unwrap();
    write_dataset(&ds, &dir.path().join("ds")).unwrap();
    let back = read_dataset(&dir.path().join("ds")).unwrap();
    assert_eq!(back.samples, ds.samples);
    assert_eq!(back.manifest, ds.manifest);

    let mcfg = tiny(3);
    let mut params = Model::new(&mcfg).unwrap().init::<f32>(0).unwrap();
    perturb(&mut params, 0.01, 1);
    let ck = Checkpoint { config: mcfg.clone(), step: 10, seed: 0, params, optimizer: None };
    let small = dir.path().join("t3");
    save_checkpoint(&ck, &small).unwrap();
    let loaded = load_checkpoint(&small).unwrap();
    let (big_cfg, big) = expand_model(&loaded.config, &loaded.params).unwrap();
    let grown = dir.path().join("t4");
    save_checkpoint(&Checkpoint { config: big_cfg.clone(), step: 0, seed: 0, params: big.clone(), optimizer: None }, &grown).unwrap();
    let again = load_checkpoint_for(&grown, &big_cfg).unwrap();
    assert_eq!(again.params, big);
    assert!(load_checkpoint_for(&grown, &mcfg).is_err());
}
