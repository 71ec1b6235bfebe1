//! Command implementations behind the `sdum` binary. Each command validates
//! its inputs before writing anything and returns a one-line JSON summary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use sdum::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use sdum::dataset::{make_dataset, read_dataset, write_dataset, Dataset, Sample, Split};
use sdum::dc::DcMode;
use sdum::experiments::{
    aggregate, compare_psnr, published_scaling_table, read_results, read_scaling_csv, run_variant, scaling_fit, variant_means,
    write_csv, AblationRow, ExperimentConfig, ResultRow, ScalingPoint,
};
use sdum::report::{recon_panel, save_png, scaling_plot, text_table, weight_map_panel};
use sdum::train::{reconstruct, run_curriculum, zero_filled_baseline, Trainer};
use sdum::unroll::{expand_model, CsmeMode, Model};
use sdum::{Error, Result, Tensor};

#[derive(Parser, Debug)]
#[command(name = "sdum", version, about = "Deep-unrolled multi-coil MRI reconstruction experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a dataset of phantoms, coil maps and masks.
    GenData(GenData),
    /// Train one stage, or the configured depth curriculum.
    Train(Train),
    /// Grow a checkpoint to 2 (T - 1) cascades.
    Expand(Expand),
    /// Per-sample and aggregate metrics of a checkpoint or stored reconstructions.
    Eval(Eval),
    /// Train and evaluate the DC / CSME / conditioning grid.
    Ablate(Ablate),
    /// Fit PSNR against log parameter count.
    ScalingFit(ScalingFit),
    /// Render tables and images from results and checkpoints.
    Report(Report),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

impl From<OnOff> for bool {
    fn from(v: OnOff) -> bool {
        v == OnOff::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Args, Debug)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenData {
    #[command(flatten)]
    pub common: Common,
    /// Overrides `data.count`.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ModelFlags {
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long, value_parser = parse_dc)]
    pub dc: Option<DcMode>,
    #[arg(long, value_parser = parse_csme)]
    pub csme: Option<CsmeMode>,
    #[arg(long)]
    pub uc: Option<OnOff>,
}

#[derive(Args, Debug)]
pub struct Train {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub data: PathBuf,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Continue a single-stage run from one of its checkpoints.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Expand {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Eval {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, conflicts_with = "recon", required_unless_present = "recon")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<sample_id>.f32` magnitude arrays `[F, H, W]`.
    #[arg(long)]
    pub recon: Option<PathBuf>,
    /// Results CSV of another method for paired PSNR statistics.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
}

#[derive(Args, Debug)]
pub struct Ablate {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Restricts the DC axis; repeatable.
    #[arg(long, value_parser = parse_dc)]
    pub dc: Vec<DcMode>,
    #[arg(long, value_parser = parse_csme)]
    pub csme: Vec<CsmeMode>,
    #[arg(long)]
    pub uc: Vec<OnOff>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ScalingFit {
    /// Use the bundled table of the published 1 to 18 cascade models.
    #[arg(long, conflicts_with = "points", required_unless_present = "points")]
    pub paper_table: bool,
    /// CSV with columns depth, params, psnr.
    #[arg(long)]
    pub points: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Report {
    #[arg(long)]
    pub out: PathBuf,
    /// Per-sample results CSVs; the first is the reference for paired statistics.
    #[arg(long)]
    pub results: Vec<PathBuf>,
    #[arg(long)]
    pub ablation: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of validation samples rendered as panels.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
}

fn parse_dc(s: &str) -> std::result::Result<DcMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_csme(s: &str) -> std::result::Result<CsmeMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Stable error category for the one-line error record.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Tensor(_) => "shape",
        Error::Validation(_) => "validation",
        Error::Io { .. } => "io",
        Error::Version { .. } => "version",
        Error::Param { .. } => "param",
        Error::Config(_) => "config",
        Error::NonFinite { .. } => "non_finite",
    }
}

/// `{"error": kind, "message": ...}` on a single line.
pub fn error_line(kind: &str, message: &str) -> String {
    let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
    json!({ "error": kind, "message": message }).to_string()
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), detail: e.to_string() })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), detail: e.to_string() })
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(v).expect("serializable"))
}

fn select(ds: &Dataset, split: SplitArg) -> Vec<&Sample> {
    match split {
        SplitArg::Train => ds.split(Split::Train),
        SplitArg::Val => ds.split(Split::Val),
        SplitArg::All => ds.samples.iter().collect(),
    }
}

fn nonempty<'a>(v: Vec<&'a Sample>, what: &str) -> Result<Vec<&'a Sample>> {
    if v.is_empty() {
        Err(Error::Validation(format!("the {what} split is empty")))
    } else {
        Ok(v)
    }
}

pub fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Expand(a) => expand(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::ScalingFit(a) => fit(a),
        Command::Report(a) => report(a),
    }
}

fn gen_data(a: GenData) -> Result<Value> {
    let cfg = load_config(a.common.config.as_deref())?;
    let count = a.count.unwrap_or(cfg.data.count);
    let seed = a.common.seed.unwrap_or(cfg.data.seed);
    let ds = make_dataset(count, &cfg.data.config, seed)?;
    write_dataset(&ds, &a.common.out)?;
    Ok(json!({
        "command": "gen-data",
        "out": a.common.out,
        "count": count,
        "seed": seed,
        "train": ds.split(Split::Train).len(),
        "val": ds.split(Split::Val).len(),
    }))
}

fn train(a: Train) -> Result<Value> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if let Some(s) = a.common.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(d) = a.model.depth {
        if !cfg.curriculum.is_empty() && cfg.curriculum[0].depth != d {
            return Err(Error::Config(format!("--depth {d} conflicts with the curriculum starting at {}", cfg.curriculum[0].depth)));
        }
        cfg.model.cascades = d;
    }
    if let Some(first) = cfg.curriculum.first() {
        cfg.model.cascades = first.depth;
    }
    if let Some(dc) = a.model.dc {
        cfg.model.dc = dc;
    }
    if let Some(c) = a.model.csme {
        cfg.model.csme = c;
    }
    if let Some(u) = a.model.uc {
        cfg.model.uc = u.into();
    }
    cfg.validate()?;
    let resume = match &a.resume {
        Some(p) if !cfg.curriculum.is_empty() => {
            return Err(Error::Config(format!("--resume {} applies to single-stage runs only", p.display())));
        }
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let ds = read_dataset(&a.data)?;
    let train = nonempty(ds.split(Split::Train), "train")?;
    let val = ds.split(Split::Val);
    create_dir(&a.common.out)?;
    write_text(&a.common.out.join("config.toml"), &toml::to_string(&cfg).expect("serializable"))?;
    if !cfg.curriculum.is_empty() {
        let (mcfg, params, reports) = run_curriculum(&cfg.model, &cfg.curriculum, &train, &val, &cfg.train, Some(&a.common.out))?;
        let ckpt = Checkpoint { config: mcfg.clone(), step: 0, seed: cfg.train.seed, params, optimizer: None };
        save_checkpoint(&ckpt, &a.common.out.join("final"))?;
        return Ok(json!({ "command": "train", "depth": mcfg.cascades, "stages": reports, "checkpoint": a.common.out.join("final") }));
    }
    let mut t = match resume {
        Some(ck) => {
            ck.check_against(&cfg.model)?;
            Trainer::resume(ck, cfg.train.clone())?
        }
        None => {
            let params = Model::new(&cfg.model)?.init::<f32>(cfg.train.seed)?;
            Trainer::new(&cfg.model, params, cfg.train.clone())?
        }
    };
    t.run(&train, &val, Some(&a.common.out))?;
    save_checkpoint(&t.checkpoint(), &a.common.out.join("final"))?;
    let last = t.log.last().cloned();
    Ok(json!({
        "command": "train",
        "depth": cfg.model.cascades,
        "steps": t.step,
        "last": last,
        "checkpoint": a.common.out.join("final"),
    }))
}

fn expand(a: Expand) -> Result<Value> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (cfg, params) = expand_model(&ck.config, &ck.params)?;
    let from = ck.config.cascades;
    save_checkpoint(&Checkpoint { config: cfg.clone(), step: 0, seed: ck.seed, params, optimizer: None }, &a.out)?;
    Ok(json!({ "command": "expand", "from": from, "to": cfg.cascades, "out": a.out }))
}

fn read_recon(dir: &Path, s: &Sample) -> Result<Tensor<f32>> {
    let path = dir.join(format!("{}.f32", s.id));
    let bytes = fs::read(&path).map_err(|e| Error::Io { path: path.clone(), detail: e.to_string() })?;
    let shape = s.reference.shape();
    if bytes.len() != s.reference.numel() * 4 {
        return Err(Error::Io { path, detail: format!("expected {} bytes for shape {shape:?}, found {}", s.reference.numel() * 4, bytes.len()) });
    }
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(Tensor::from_vec(shape, data)?)
}

fn write_recon(dir: &Path, id: &str, t: &Tensor<f32>) -> Result<()> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let path = dir.join(format!("{id}.f32"));
    fs::write(&path, bytes).map_err(|e| Error::Io { path, detail: e.to_string() })
}

fn eval(a: Eval) -> Result<Value> {
    let baseline = a.baseline.as_deref().map(read_results).transpose()?;
    let ckpt = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let ds = read_dataset(&a.data)?;
    let samples = nonempty(select(&ds, a.split), "selected")?;
    let recons: Vec<Tensor<f32>> = match (&ckpt, &a.recon) {
        (Some(ck), _) => {
            let model = Model::new(&ck.config)?;
            samples.iter().map(|s| reconstruct(&model, &ck.params, s)).collect::<Result<_>>()?
        }
        (None, Some(dir)) => samples.iter().map(|s| read_recon(dir, s)).collect::<Result<_>>()?,
        (None, None) => unreachable!("clap requires one source"),
    };
    let mut rows = Vec::with_capacity(samples.len());
    let mut zf_rows = Vec::with_capacity(samples.len());
    for (s, r) in samples.iter().zip(&recons) {
        let m = sdum::metrics::Metrics::compute(r, &s.reference)?;
        rows.push(ResultRow { sample_id: s.id.clone(), psnr: m.psnr, ssim: m.ssim, nmse: m.nmse });
        let (_, z) = zero_filled_baseline(s)?;
        zf_rows.push(ResultRow { sample_id: s.id.clone(), psnr: z.psnr, ssim: z.ssim, nmse: z.nmse });
    }
    create_dir(&a.out)?;
    if ckpt.is_some() {
        let dir = a.out.join("recon");
        create_dir(&dir)?;
        for (s, r) in samples.iter().zip(&recons) {
            write_recon(&dir, &s.id, r)?;
        }
    }
    write_csv(&a.out.join("results.csv"), &rows)?;
    write_csv(&a.out.join("zero_filled.csv"), &zf_rows)?;
    let mut summary = json!({
        "command": "eval",
        "aggregate": aggregate(&rows)?,
        "zero_filled": aggregate(&zf_rows)?,
        "vs_zero_filled": compare_psnr(&rows, &zf_rows)?,
    });
    if let Some(b) = &baseline {
        summary["vs_baseline"] = serde_json::to_value(compare_psnr(&rows, b)?).expect("serializable");
    }
    write_json(&a.out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn ablate(a: Ablate) -> Result<Value> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if let Some(d) = a.depth {
        cfg.model.cascades = d;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if !a.dc.is_empty() {
        cfg.ablation.dc = a.dc.clone();
    }
    if !a.csme.is_empty() {
        cfg.ablation.csme = a.csme.clone();
    }
    if !a.uc.is_empty() {
        cfg.ablation.uc = a.uc.iter().map(|&u| u.into()).collect();
    }
    if let Some(s) = a.common.seed {
        cfg.ablation.seeds = vec![s];
    }
    cfg.validate()?;
    let grid = cfg.ablation.grid();
    if grid.is_empty() || cfg.ablation.seeds.is_empty() {
        return Err(Error::Config("ablation grid or seed list is empty".into()));
    }
    let ds = read_dataset(&a.data)?;
    let train = nonempty(ds.split(Split::Train), "train")?;
    let val = nonempty(ds.split(Split::Val), "val")?;
    create_dir(&a.common.out)?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for v in &grid {
        for &seed in &cfg.ablation.seeds {
            let (row, evals) = run_variant(&cfg.model, *v, &cfg.train, seed, &train, &val)?;
            let per: Vec<ResultRow> = evals.iter().map(ResultRow::from).collect();
            write_csv(&a.common.out.join(format!("{}_seed{seed}.csv", v.name())), &per)?;
            rows.push(row);
        }
    }
    write_csv(&a.common.out.join("ablation.csv"), &rows)?;
    let means = variant_means(&rows);
    let table: Vec<Vec<String>> = means.iter().map(|(k, v)| vec![k.clone(), format!("{v:.3}")]).collect();
    write_text(&a.common.out.join("ablation.txt"), &text_table(&["variant", "mean_psnr"], &table))?;
    Ok(json!({ "command": "ablate", "depth": cfg.model.cascades, "seeds": cfg.ablation.seeds, "mean_psnr": means }))
}

fn fit(a: ScalingFit) -> Result<Value> {
    let points: Vec<ScalingPoint> = match &a.points {
        Some(p) => read_scaling_csv(p)?,
        None => published_scaling_table(),
    };
    let f = scaling_fit(&points)?;
    let v = json!({
        "command": "scaling-fit",
        "points": points.len(),
        "slope": f.slope,
        "intercept": f.intercept,
        "pearson_r": f.pearson_r,
        "r_squared": f.r_squared,
    });
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("fit.json"), &v)?;
        save_png(&scaling_plot(&points, &f, 480, 320)?, &out.join("scaling.png"))?;
    }
    Ok(v)
}

#[derive(Serialize)]
struct MethodRow {
    method: String,
    n: usize,
    psnr: f64,
    ssim: f64,
    nmse: f64,
    delta_psnr_mean: Option<f64>,
    delta_psnr_std: Option<f64>,
    win_rate: Option<f64>,
}

fn report(a: Report) -> Result<Value> {
    let tables = a.results.iter().map(|p| Ok((p.clone(), read_results(p)?))).collect::<Result<Vec<_>>>()?;
    let ablation: Option<Vec<AblationRow>> = match &a.ablation {
        Some(p) => {
            let mut r = csv::Reader::from_path(p).map_err(|e| Error::Io { path: p.clone(), detail: e.to_string() })?;
            Some(r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| Error::Io { path: p.clone(), detail: e.to_string() })?)
        }
        None => None,
    };
    let ckpt = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let ds = match (&ckpt, &a.data) {
        (Some(_), Some(d)) => Some(read_dataset(d)?),
        _ => None,
    };
    if tables.is_empty() && ablation.is_none() && ckpt.is_none() {
        return Err(Error::Config("nothing to report: pass --results, --ablation or --checkpoint with --data".into()));
    }
    create_dir(&a.out)?;
    let mut files = Vec::new();
    if !tables.is_empty() {
        let mut rows = Vec::new();
        let mut csv_rows = Vec::new();
        for (i, (path, t)) in tables.iter().enumerate() {
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let agg = aggregate(t)?;
            let delta = if i == 0 { None } else { Some(compare_psnr(t, &tables[0].1)?) };
            rows.push(vec![
                name.clone(),
                agg.n.to_string(),
                format!("{:.3}", agg.psnr),
                format!("{:.4}", agg.ssim),
                format!("{:.5}", agg.nmse),
                delta.map(|d| format!("{:+.3} ± {:.3}", d.mean, d.std)).unwrap_or_else(|| "-".into()),
                delta.map(|d| format!("{:.1}%", 100.0 * d.win_rate)).unwrap_or_else(|| "-".into()),
            ]);
            csv_rows.push(MethodRow {
                method: name,
                n: agg.n,
                psnr: agg.psnr,
                ssim: agg.ssim,
                nmse: agg.nmse,
                delta_psnr_mean: delta.map(|d| d.mean),
                delta_psnr_std: delta.map(|d| d.std),
                win_rate: delta.map(|d| d.win_rate),
            });
        }
        let txt = text_table(&["method", "n", "psnr", "ssim", "nmse", "delta_psnr", "win_rate"], &rows);
        write_text(&a.out.join("methods.txt"), &txt)?;
        write_csv(&a.out.join("methods.csv"), &csv_rows)?;
        files.extend(["methods.txt", "methods.csv"].map(String::from));
    }
    if let Some(rows) = &ablation {
        let means = variant_means(rows);
        let table: Vec<Vec<String>> = means.iter().map(|(k, v)| vec![k.clone(), format!("{v:.3}")]).collect();
        write_text(&a.out.join("ablation.txt"), &text_table(&["variant", "mean_psnr"], &table))?;
        files.push("ablation.txt".into());
    }
    if let (Some(ck), Some(ds)) = (&ckpt, &ds) {
        let model = Model::new(&ck.config)?;
        let mut picked = ds.split(Split::Val);
        if picked.is_empty() {
            picked = ds.samples.iter().collect();
        }
        for s in picked.iter().take(a.samples) {
            let recon = reconstruct(&model, &ck.params, s)?;
            let (zf, _) = zero_filled_baseline(s)?;
            let (h, w) = (s.height(), s.width());
            for f in 0..s.frames() {
                let frame = |t: &Tensor<f32>| Tensor::from_vec(&[h, w], t.data()[f * h * w..(f + 1) * h * w].to_vec());
                let panel = recon_panel(&frame(&s.reference)?, &frame(&zf)?, &frame(&recon)?, 5.0)?;
                let name = format!("panel_{}_f{f}.png", s.id);
                save_png(&panel, &a.out.join(&name))?;
                files.push(name);
            }
        }
        if ck.config.dc != DcMode::Simple {
            let size = ds.samples.iter().map(|s| s.height().max(s.width())).max().unwrap_or(64).min(ck.config.weight_grid);
            for t in 0..ck.config.cascades {
                let (img, names) = weight_map_panel(&ck.params, t, size)?;
                let name = format!("weights_c{t:02}.png");
                save_png(&img, &a.out.join(&name))?;
                write_text(&a.out.join(format!("weights_c{t:02}.txt")), &(names.join("\n") + "\n"))?;
                files.push(name);
            }
        }
    }
    Ok(json!({ "command": "report", "out": a.out, "files": files }))
}
