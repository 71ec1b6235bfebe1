//! Training on the SSIM loss of magnitude reconstructions, evaluation, and
//! the depth curriculum that alternates training with cascade expansion.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::dataset::{derive_seed, Sample};
use crate::kspace::{self, eager, magnitude};
use crate::metrics::{psnr, ssim_loss, Metrics};
use crate::optim::{clip_grad_norm, cosine_lr, AdamState, AdamWConfig};
use crate::params::{Bound, ParamStore};
use crate::unroll::{expand_model, Model, ModelConfig, ModelInput};
use crate::{Error, Float, Result, Tape, Tensor, Var};

/// Added under the square root of the magnitude so its gradient stays finite.
pub const MAG_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm limit; zero disables clipping.
    pub clip: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Validation interval in steps; zero validates only at the end.
    pub val_every: usize,
    /// Checkpoint interval in steps; zero saves only at the end.
    pub checkpoint_every: usize,
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 1e-3,
            warmup: 50,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
            seed: 0,
            log_every: 10,
            val_every: 0,
            checkpoint_every: 0,
            augment: None,
        }
    }
}

impl TrainConfig {
    /// Constants of the large-scale recipe, kept for reference.
    pub fn large_scale() -> Self {
        Self { steps: 20_000, lr: 2.4e-4, warmup: 500, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and nonnegative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || self.clip < 0.0 {
            return Err(Error::Config("eps must be positive; weight decay and clip nonnegative".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

/// Loss and per-frame magnitude images `[F, H, W]` of one sample.
pub fn sample_loss<'t, T: Float>(model: &Model, p: &Bound<'t, T>, sample: &Sample) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let tape = p.tape();
    let input = ModelInput::from_sample(tape, sample);
    let x = model.forward(p, &input)?;
    let mut mags = Vec::with_capacity(x.len());
    let mut total: Option<Var<'t, T>> = None;
    for (f, xf) in x.iter().enumerate() {
        let mag = magnitude(*xf, T::c(MAG_EPS))?;
        let reference = sample.reference_frame::<T>(f).reshape(&mag.shape())?;
        let l = ssim_loss(mag, &reference)?;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
        mags.push(mag);
    }
    let total = total.expect("at least one frame");
    Ok((total.scale(T::c(1.0 / x.len() as f64)), sdum_autograd::concat(&mags, 0)?))
}

/// Mean loss over `batch` and the mean gradient of every parameter.
pub fn batch_gradients<T: Float>(
    model: &Model,
    params: &ParamStore<T>,
    batch: &[&Sample],
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    batch_gradients_with(model, params, batch, None)
}

/// As [`batch_gradients`]; with `drop_seed`, residual branches are dropped
/// at the backbone's drop-path rate using one stream per sample.
pub fn batch_gradients_with<T: Float>(
    model: &Model,
    params: &ParamStore<T>,
    batch: &[&Sample],
    drop_seed: Option<u64>,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let mut acc: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    let mut loss = 0.0;
    for (b, s) in batch.iter().enumerate() {
        let tape = Tape::new();
        let mut p = Bound::new(&tape, params, true);
        if let Some(seed) = drop_seed {
            p = p.with_drop_path(derive_seed(seed, &format!("drop/{b}")));
        }
        let (l, _) = sample_loss(model, &p, s)?;
        loss += l.value().item().as_f64();
        let mut grads = tape.backward(l)?;
        for (k, g) in p.gradients(&mut grads) {
            match acc.get_mut(&k) {
                Some(a) => a.add_assign(&g),
                None => {
                    acc.insert(k, g);
                }
            }
        }
    }
    let inv = T::c(1.0 / batch.len() as f64);
    acc.values_mut().for_each(|g| g.scale_inplace(inv));
    Ok((loss / batch.len() as f64, acc))
}

/// Magnitude reconstruction `[F, H, W]` of one sample.
pub fn reconstruct<T: Float>(model: &Model, params: &ParamStore<T>, sample: &Sample) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let p = Bound::new(&tape, params, false);
    let input = ModelInput::from_sample(&tape, sample);
    let frames = model
        .forward(&p, &input)?
        .iter()
        .map(|x| eager::magnitude(&x.value()))
        .collect::<Result<Vec<_>>>()?;
    stack(&frames)
}

fn stack<T: Float>(frames: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (h, w) = (frames[0].dim(1), frames[0].dim(2));
    let data = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
    Ok(Tensor::from_vec(&[frames.len(), h, w], data)?)
}

/// Zero-filled reconstructions under both usual conventions: the
/// sensitivity-weighted combination with the simulated maps (when stored)
/// and the root-sum-of-squares of the coil images. The better PSNR is kept.
pub fn zero_filled_baseline(sample: &Sample) -> Result<(Tensor<f32>, Metrics)> {
    let reference = sample.reference.clone();
    let mut best: Option<(Tensor<f32>, f64)> = None;
    let mut consider = |img: Tensor<f32>| -> Result<()> {
        let p = psnr(&img, &reference)?;
        if best.as_ref().is_none_or(|(_, b)| p > *b) {
            best = Some((img, p));
        }
        Ok(())
    };
    let rss = (0..sample.frames())
        .map(|f| kspace::rss(&eager::ifft2c(&sample.measured_frame::<f32>(f))?))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .map(|r| r.reshape(&[1, sample.height(), sample.width()]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    consider(stack(&rss)?)?;
    if let Some(s) = sample.sens_tensor::<f32>() {
        let sense = (0..sample.frames())
            .map(|f| eager::magnitude(&eager::zero_filled(&sample.measured_frame::<f32>(f), &s)?))
            .collect::<Result<Vec<_>>>()?;
        consider(stack(&sense)?)?;
    }
    let (img, _) = best.expect("rss baseline is always computed");
    let m = Metrics::compute(&img, &reference)?;
    Ok((img, m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: String,
    pub loss: f64,
    pub metrics: Metrics,
    pub zero_filled: Metrics,
}

pub fn evaluate<T: Float>(model: &Model, params: &ParamStore<T>, samples: &[&Sample]) -> Result<Vec<SampleEval>> {
    samples
        .iter()
        .map(|s| {
            let tape = Tape::new();
            let p = Bound::new(&tape, params, false);
            let (loss, mag) = sample_loss(model, &p, s)?;
            let recon: Tensor<f32> = mag.value().cast();
            Ok(SampleEval {
                id: s.id.clone(),
                loss: loss.value().item().as_f64(),
                metrics: Metrics::compute(&recon, &s.reference)?,
                zero_filled: zero_filled_baseline(s)?.1,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
    pub zero_filled_psnr: f64,
}

pub fn summarize(evals: &[SampleEval]) -> Result<EvalSummary> {
    if evals.is_empty() {
        return Err(Error::Config("no samples to summarize".into()));
    }
    let n = evals.len() as f64;
    let mean = |f: &dyn Fn(&SampleEval) -> f64| evals.iter().map(f).sum::<f64>() / n;
    Ok(EvalSummary {
        n: evals.len(),
        loss: mean(&|e| e.loss),
        psnr: mean(&|e| e.metrics.psnr),
        ssim: mean(&|e| e.metrics.ssim),
        nmse: mean(&|e| e.metrics.nmse),
        zero_filled_psnr: mean(&|e| e.zero_filled.psnr),
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub depth: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val: Option<EvalSummary>,
}

/// Indices of the samples in batch `step`: consecutive draws from a
/// per-epoch permutation, so any step is computable without replaying.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut cache: Option<(usize, Vec<usize>)> = None;
    (step * batch..(step + 1) * batch)
        .map(|q| {
            let epoch = q / n;
            if cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch/{epoch}"))));
                cache = Some((epoch, perm));
            }
            cache.as_ref().expect("filled").1[q % n]
        })
        .collect()
}

/// Training state of one stage; the optimizer step is the only place
/// parameters change.
pub struct Trainer {
    pub model: Model,
    pub params: ParamStore<f32>,
    pub opt: AdamState<f32>,
    /// Steps completed in this stage.
    pub step: usize,
    pub cfg: TrainConfig,
    pub log: Vec<LogRecord>,
    pub last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, params: ParamStore<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg)?;
        params.check(&model.specs())?;
        Ok(Self { model, params, opt: AdamState::new(), step: 0, cfg, log: Vec::new(), last_checkpoint: None })
    }

    /// Continues a stage from a checkpoint saved by [`Trainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        let mut t = Self::new(&ckpt.config, ckpt.params, cfg)?;
        t.opt = ckpt.optimizer.unwrap_or_default();
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.cfg.clone(),
            step: self.step,
            seed: self.cfg.seed,
            params: self.params.clone(),
            optimizer: Some(self.opt.clone()),
        }
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.cfg.lr, self.step, self.cfg.steps, self.cfg.warmup.min(self.cfg.steps))
    }

    fn batch(&self, train: &[&Sample]) -> Result<Vec<Sample>> {
        let idx = batch_indices(self.cfg.seed, self.step, self.cfg.batch, train.len());
        idx.iter()
            .enumerate()
            .map(|(b, &i)| match &self.cfg.augment {
                Some(a) => {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &format!("augment/{}/{b}", self.step)));
                    augment(train[i], a, &mut rng)
                }
                None => Ok(train[i].clone()),
            })
            .collect()
    }

    /// One optimizer step; returns the record for this step.
    pub fn train_step(&mut self, train: &[&Sample]) -> Result<LogRecord> {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let batch = self.batch(train)?;
        let refs: Vec<&Sample> = batch.iter().collect();
        let drop_seed = (self.model.cfg.backbone.drop_path > 0.0).then(|| derive_seed(self.cfg.seed, &format!("step/{}", self.step)));
        let (loss, mut grads) = batch_gradients_with(&self.model, &self.params, &refs, drop_seed)?;
        if !loss.is_finite() || grads.values().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite { step: self.step, last_good: self.last_checkpoint.clone() });
        }
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.clip);
        let lr = self.lr();
        self.opt.update(&self.cfg.adamw(), &mut self.params, &grads, lr)?;
        self.step += 1;
        Ok(LogRecord { step: self.step, depth: self.model.depth(), loss, lr, grad_norm, val: None })
    }

    /// Trains until `cfg.steps`, logging to `out/log.jsonl` and saving
    /// checkpoints under `out/` when an output directory is given.
    pub fn run(&mut self, train: &[&Sample], val: &[&Sample], out: Option<&Path>) -> Result<()> {
        let mut sink = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("log.jsonl");
                let f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
                Some((path, BufWriter::new(f)))
            }
            None => None,
        };
        while self.step < self.cfg.steps {
            let mut rec = self.train_step(train)?;
            let last = self.step == self.cfg.steps;
            let validate = !val.is_empty() && (last || (self.cfg.val_every > 0 && self.step.is_multiple_of(self.cfg.val_every)));
            if validate {
                rec.val = Some(summarize(&evaluate(&self.model, &self.params, val)?)?);
            }
            let log_now = last || rec.val.is_some() || (self.cfg.log_every > 0 && self.step.is_multiple_of(self.cfg.log_every));
            if let (Some((path, w)), true) = (sink.as_mut(), log_now) {
                let line = serde_json::to_string(&rec).expect("serializable");
                writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            if log_now {
                self.log.push(rec);
            }
            if let Some(dir) = out {
                if last || (self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every)) {
                    let path = dir.join(format!("step_{:06}", self.step));
                    save_checkpoint(&self.checkpoint(), &path)?;
                    self.last_checkpoint = Some(path);
                }
            }
        }
        Ok(())
    }
}

/// Trains one stage from `params`.
pub fn train_stage(
    model_cfg: &ModelConfig,
    params: ParamStore<f32>,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<(ParamStore<f32>, Vec<LogRecord>)> {
    let mut t = Trainer::new(model_cfg, params, cfg.clone())?;
    t.run(train, val, out)?;
    Ok((t.params, t.log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub depth: usize,
    pub steps: usize,
}

/// Checks that every depth follows `T_k = 2 (T_{k-1} - 1)`.
pub fn validate_depths(stages: &[StageSpec]) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::Config("curriculum has no stages".into()));
    }
    for w in stages.windows(2) {
        let want = 2 * w[0].depth.saturating_sub(1);
        if w[0].depth < 3 || w[1].depth != want {
            return Err(Error::Config(format!(
                "curriculum depth {} cannot follow {} (expected {})",
                w[1].depth,
                w[0].depth,
                if w[0].depth < 3 { "a first depth of at least 3".to_string() } else { want.to_string() }
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub depth: usize,
    pub steps: usize,
    /// Validation summary when the stage starts (after expansion for later stages).
    pub start: Option<EvalSummary>,
    pub end: Option<EvalSummary>,
}

/// Trains each stage in turn, expanding the model in between. Each stage
/// starts a fresh optimizer; stage `k` writes to `out/stage_k`.
pub fn run_curriculum(
    model_cfg: &ModelConfig,
    stages: &[StageSpec],
    train: &[&Sample],
    val: &[&Sample],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<(ModelConfig, ParamStore<f32>, Vec<StageReport>)> {
    validate_depths(stages)?;
    if stages[0].depth != model_cfg.cascades {
        return Err(Error::Config(format!(
            "first stage depth {} differs from the model's {} cascades",
            stages[0].depth, model_cfg.cascades
        )));
    }
    let mut mcfg = model_cfg.clone();
    let mut params = Model::new(&mcfg)?.init::<f32>(cfg.seed)?;
    let mut reports = Vec::with_capacity(stages.len());
    let val_summary = |mcfg: &ModelConfig, params: &ParamStore<f32>| -> Result<Option<EvalSummary>> {
        if val.is_empty() {
            return Ok(None);
        }
        Ok(Some(summarize(&evaluate(&Model::new(mcfg)?, params, val)?)?))
    };
    for (k, stage) in stages.iter().enumerate() {
        if k > 0 {
            (mcfg, params) = expand_model(&mcfg, &params)?;
        }
        let start = val_summary(&mcfg, &params)?;
        let stage_cfg = TrainConfig { steps: stage.steps, ..cfg.clone() };
        let dir = out.map(|d| d.join(format!("stage_{k}")));
        let (p, _) = train_stage(&mcfg, params, train, val, &stage_cfg, dir.as_deref())?;
        params = p;
        let end = val_summary(&mcfg, &params)?;
        reports.push(StageReport { depth: stage.depth, steps: stage.steps, start, end });
    }
    if let Some(dir) = out {
        let path = dir.join("curriculum.json");
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(serde_json::to_string_pretty(&reports).expect("serializable").as_bytes())
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok((mcfg, params, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_dataset, DatasetConfig};

    fn tiny_model(cascades: usize) -> ModelConfig {
        let mut cfg = ModelConfig { cascades, coils: 2, weight_grid: 32, n_adj: 0, ..Default::default() };
        cfg.backbone.width = 4;
        cfg.backbone.depths = [1, 1];
        cfg.backbone.refine = 0;
        cfg.cond.d0 = 8;
        cfg.cond.d = 8;
        cfg
    }

    fn data(n: usize) -> Vec<Sample> {
        let cfg = DatasetConfig { sizes: vec![[16, 16]], coils: vec![2], acs_lines: 4, ..Default::default() };
        make_dataset(n, &cfg, 11).unwrap().samples
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(3, s, 2, 10)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, 7, 3, 10), batch_indices(3, 7, 3, 10));
        assert_ne!(batch_indices(3, 0, 10, 10), batch_indices(4, 0, 10, 10));
    }

    #[test]
    fn depth_recurrence() {
        let st = |d: &[usize]| d.iter().map(|&depth| StageSpec { depth, steps: 1 }).collect::<Vec<_>>();
        validate_depths(&st(&[3, 4, 6])).unwrap();
        validate_depths(&st(&[6, 10, 18])).unwrap();
        validate_depths(&st(&[2])).unwrap();
        assert!(validate_depths(&st(&[3, 5])).is_err());
        assert!(validate_depths(&st(&[2, 2])).is_err());
        assert!(validate_depths(&[]).is_err());
    }

    #[test]
    fn overfits_one_sample_and_zero_lr_freezes() {
        let samples = data(1);
        let refs: Vec<&Sample> = samples.iter().collect();
        let mcfg = tiny_model(1);
        let params = Model::new(&mcfg).unwrap().init::<f32>(0).unwrap();
        let cfg = TrainConfig { steps: 50, batch: 1, lr: 2e-3, warmup: 0, ..Default::default() };
        let mut t = Trainer::new(&mcfg, params.clone(), cfg.clone()).unwrap();
        let first = t.train_step(&refs).unwrap().loss;
        t.run(&refs, &[], None).unwrap();
        let model = Model::new(&mcfg).unwrap();
        let last = summarize(&evaluate(&model, &t.params, &refs).unwrap()).unwrap().loss;
        assert!(last < first, "{first} -> {last}");

        let frozen = TrainConfig { steps: 3, lr: 0.0, ..cfg };
        let (after, log) = train_stage(&mcfg, params.clone(), &refs, &[], &frozen, None).unwrap();
        assert_eq!(after, params);
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn resume_is_bitwise() {
        let samples = data(3);
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut mcfg = tiny_model(2);
        mcfg.backbone.drop_path = 0.3;
        let params = Model::new(&mcfg).unwrap().init::<f32>(1).unwrap();
        let cfg = TrainConfig {
            steps: 6,
            batch: 2,
            warmup: 2,
            checkpoint_every: 3,
            augment: Some(AugmentConfig::default()),
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut full = Trainer::new(&mcfg, params, cfg.clone()).unwrap();
        full.run(&refs, &[], Some(dir.path())).unwrap();
        let mid = crate::checkpoint::load_checkpoint(&dir.path().join("step_000003")).unwrap();
        let mut resumed = Trainer::resume(mid, cfg).unwrap();
        resumed.run(&refs, &[], None).unwrap();
        assert_eq!(resumed.params, full.params);
        assert_eq!(resumed.opt, full.opt);
        let log = fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        let recs: Vec<LogRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs.last().unwrap().step, 6);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let samples = data(1);
        let refs: Vec<&Sample> = samples.iter().collect();
        let mcfg = tiny_model(1);
        let mut params = Model::new(&mcfg).unwrap().init::<f32>(0).unwrap();
        params.get_mut("c00.backbone.out.w").unwrap().data_mut()[0] = f32::NAN;
        let mut t = Trainer::new(&mcfg, params, TrainConfig { steps: 1, batch: 1, ..Default::default() }).unwrap();
        t.last_checkpoint = Some(PathBuf::from("ckpt/step_000010"));
        match t.train_step(&refs) {
            Err(Error::NonFinite { step: 0, last_good: Some(p) }) => assert!(p.ends_with("step_000010")),
            other => panic!("{:?}", other.map(|r| r.loss)),
        }
    }

    #[test]
    fn curriculum_expands_twice() {
        let samples = data(4);
        let refs: Vec<&Sample> = samples.iter().collect();
        let stages: Vec<StageSpec> = [3, 4, 6].iter().map(|&depth| StageSpec { depth, steps: 1 }).collect();
        let cfg = TrainConfig { batch: 1, ..Default::default() };
        let (mcfg, params, reports) = run_curriculum(&tiny_model(3), &stages, &refs[..3], &refs[3..], &cfg, None).unwrap();
        assert_eq!(mcfg.cascades, 6);
        params.check(&Model::new(&mcfg).unwrap().specs()).unwrap();
        assert_eq!(reports.iter().map(|r| r.depth).collect::<Vec<_>>(), [3, 4, 6]);
        assert!(reports.iter().all(|r| r.start.is_some() && r.end.is_some()));
        assert!(run_curriculum(&tiny_model(2), &stages, &refs, &[], &cfg, None).is_err());
    }

    #[test]
    fn zero_filled_baseline_is_below_reference() {
        let s = &data(1)[0];
        let (img, m) = zero_filled_baseline(s).unwrap();
        assert_eq!(img.shape(), s.reference.shape());
        assert!(m.psnr < 100.0 && m.psnr > 5.0);
    }
}
