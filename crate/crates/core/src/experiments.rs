//! Scaling-law fits, per-sample results tables, paired comparisons and the
//! ablation grid, plus the structured configuration read by the CLI.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetConfig, Sample};
use crate::dc::DcMode;
use crate::metrics::{paired_stats, PairedStats};
use crate::train::{evaluate, summarize, train_stage, SampleEval, StageSpec, TrainConfig};
use crate::unroll::{CsmeMode, Model, ModelConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub depth: usize,
    pub params: f64,
    pub psnr: f64,
}

/// Least-squares line of PSNR against `ln(params)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    pub pearson_r: f64,
    pub r_squared: f64,
}

impl FitResult {
    pub fn predict(&self, params: f64) -> f64 {
        self.intercept + self.slope * params.ln()
    }
}

pub fn scaling_fit(points: &[ScalingPoint]) -> Result<FitResult> {
    if let Some(p) = points.iter().find(|p| !(p.params > 0.0) || !p.psnr.is_finite()) {
        return Err(Error::Validation(format!("scaling point {p:?} needs positive params and finite PSNR")));
    }
    let mut distinct: Vec<f64> = points.iter().map(|p| p.params).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Validation(format!("scaling fit needs two distinct parameter counts, got {}", distinct.len())));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.params.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = points.iter().map(|p| p.psnr).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, p) in xs.iter().zip(points) {
        let (dx, dy) = (x - mx, p.psnr - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let slope = sxy / sxx;
    // a constant PSNR column is fit exactly by the flat line
    let pearson_r = if syy == 0.0 { 1.0 } else { sxy / (sxx * syy).sqrt() };
    Ok(FitResult { slope, intercept: my - slope * mx, pearson_r, r_squared: pearson_r * pearson_r })
}

const PUBLISHED_TABLE: &str = include_str!("../data/published_scaling.csv");

/// Published parameter counts and PSNR of the 1 to 18 cascade models.
pub fn published_scaling_table() -> Vec<ScalingPoint> {
    parse_scaling_csv(PUBLISHED_TABLE.as_bytes(), Path::new("published_scaling.csv")).expect("bundled table parses")
}

fn parse_scaling_csv(bytes: &[u8], origin: &Path) -> Result<Vec<ScalingPoint>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<std::result::Result<Vec<ScalingPoint>, _>>()
        .map_err(|e| Error::io(origin, e))
}

/// Reads `depth,params,psnr` rows.
pub fn read_scaling_csv(path: &Path) -> Result<Vec<ScalingPoint>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_scaling_csv(&bytes, path)
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sample_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

impl From<&SampleEval> for ResultRow {
    fn from(e: &SampleEval) -> Self {
        Self { sample_id: e.id.clone(), psnr: e.metrics.psnr, ssim: e.metrics.ssim, nmse: e.metrics.nmse }
    }
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e))?;
    r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

pub fn aggregate(rows: &[ResultRow]) -> Result<Aggregate> {
    if rows.is_empty() {
        return Err(Error::Validation("results table is empty".into()));
    }
    let n = rows.len() as f64;
    Ok(Aggregate {
        n: rows.len(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        nmse: rows.iter().map(|r| r.nmse).sum::<f64>() / n,
    })
}

/// Paired PSNR differences `method - baseline` over the shared sample ids.
pub fn compare_psnr(method: &[ResultRow], baseline: &[ResultRow]) -> Result<PairedStats> {
    let base: BTreeMap<&str, f64> = baseline.iter().map(|r| (r.sample_id.as_str(), r.psnr)).collect();
    let deltas: Vec<f64> = method.iter().filter_map(|r| base.get(r.sample_id.as_str()).map(|b| r.psnr - b)).collect();
    if deltas.is_empty() {
        return Err(Error::Validation("results tables share no sample ids".into()));
    }
    paired_stats(&deltas)
}

/// One model variant of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub dc: DcMode,
    pub csme: CsmeMode,
    pub uc: bool,
}

impl Variant {
    pub fn apply(&self, cfg: &ModelConfig) -> ModelConfig {
        ModelConfig { dc: self.dc, csme: self.csme, uc: self.uc, ..cfg.clone() }
    }

    pub fn name(&self) -> String {
        format!("{}-{}-uc{}", self.dc, self.csme, if self.uc { "on" } else { "off" })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub dc: Vec<DcMode>,
    pub csme: Vec<CsmeMode>,
    pub uc: Vec<bool>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { dc: DcMode::ALL.to_vec(), csme: vec![CsmeMode::Single, CsmeMode::Multiple], uc: vec![false, true], seeds: vec![0, 1, 2] }
    }
}

impl AblationConfig {
    /// Every combination of the listed axis values.
    pub fn grid(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        for &dc in &self.dc {
            for &csme in &self.csme {
                for &uc in &self.uc {
                    out.push(Variant { dc, csme, uc });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub dc: DcMode,
    pub csme: CsmeMode,
    pub uc: bool,
    pub seed: u64,
    pub depth: usize,
    pub params: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
    pub zero_filled_psnr: f64,
}

/// Trains and evaluates one variant for one seed.
pub fn run_variant(
    model: &ModelConfig,
    variant: Variant,
    train_cfg: &TrainConfig,
    seed: u64,
    train: &[&Sample],
    val: &[&Sample],
) -> Result<(AblationRow, Vec<SampleEval>)> {
    let mcfg = variant.apply(model);
    let m = Model::new(&mcfg)?;
    let params = m.init::<f32>(seed)?;
    let n_params = params.numel();
    let cfg = TrainConfig { seed, ..train_cfg.clone() };
    let (params, _) = train_stage(&mcfg, params, train, &[], &cfg, None)?;
    let evals = evaluate(&m, &params, val)?;
    let s = summarize(&evals)?;
    let row = AblationRow {
        variant: variant.name(),
        dc: variant.dc,
        csme: variant.csme,
        uc: variant.uc,
        seed,
        depth: mcfg.cascades,
        params: n_params,
        psnr: s.psnr,
        ssim: s.ssim,
        nmse: s.nmse,
        zero_filled_psnr: s.zero_filled_psnr,
    };
    Ok((row, evals))
}

/// Mean PSNR per variant over seeds.
pub fn variant_means(rows: &[AblationRow]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.variant.clone()).or_default();
        e.0 += r.psnr;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub count: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub config: DatasetConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { count: 200, seed: 0, config: DatasetConfig::default() }
    }
}

/// Structured configuration file (TOML) shared by all commands.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Depth stages; empty trains a single stage at `model.cascades`.
    pub curriculum: Vec<StageSpec>,
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.config.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if !self.curriculum.is_empty() {
            crate::train::validate_depths(&self.curriculum)?;
        }
        Ok(())
    }
}
