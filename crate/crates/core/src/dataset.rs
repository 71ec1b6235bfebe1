//! Simulated samples, the per-sample directory format and dataset manifests.
//!
//! A sample directory holds `kspace.c64` (little-endian interleaved real/imag
//! `f32`, shape `[F, C, H, W]`), `mask.u8` (`[F, H, W]`), `reference.f32`
//! (`[F, H, W]`), optionally `sens.c64` (`[C, H, W]`) and `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::invalid;
use crate::kspace::{self, eager};
use crate::mask::{self, Acs, Modality, Pattern, ProtocolLabel, SamplingMask};
use crate::phantom;
use crate::{Error, Float, Result, Tensor};

pub const FORMAT_VERSION: u32 = 1;

/// One simulated acquisition. Complex arrays use the planar layout
/// (`kspace` is `[F, C, 2, H, W]`, `sens` is `[C, 2, H, W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub kspace: Tensor<f32>,
    pub mask: SamplingMask,
    pub reference: Tensor<f32>,
    pub sens: Option<Tensor<f32>>,
    pub label: ProtocolLabel,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl Sample {
    pub fn frames(&self) -> usize {
        self.kspace.dim(0)
    }

    pub fn coils(&self) -> usize {
        self.kspace.dim(1)
    }

    pub fn height(&self) -> usize {
        self.kspace.dim(3)
    }

    pub fn width(&self) -> usize {
        self.kspace.dim(4)
    }

    fn frame_len(&self) -> usize {
        self.coils() * 2 * self.height() * self.width()
    }

    /// Fully sampled k-space of frame `f`, `[C, 2, H, W]`.
    pub fn full_frame<T: Float>(&self, f: usize) -> Tensor<T> {
        let n = self.frame_len();
        let data = self.kspace.data()[f * n..(f + 1) * n].iter().map(|&v| T::c(v as f64)).collect();
        Tensor::from_vec(&[self.coils(), 2, self.height(), self.width()], data).expect("sized")
    }

    /// Measured k-space `M_f * y_f` of frame `f`.
    pub fn measured_frame<T: Float>(&self, f: usize) -> Tensor<T> {
        let mut k = self.full_frame::<T>(f);
        let m = self.mask.frame(f);
        let p = m.len();
        for chunk in k.data_mut().chunks_mut(p) {
            for (v, &on) in chunk.iter_mut().zip(m) {
                if on == 0 {
                    *v = T::zero();
                }
            }
        }
        k
    }

    /// Reference magnitude of frame `f`, `[H, W]`.
    pub fn reference_frame<T: Float>(&self, f: usize) -> Tensor<T> {
        let p = self.height() * self.width();
        let data = self.reference.data()[f * p..(f + 1) * p].iter().map(|&v| T::c(v as f64)).collect();
        Tensor::from_vec(&[self.height(), self.width()], data).expect("sized")
    }

    pub fn sens_tensor<T: Float>(&self) -> Option<Tensor<T>> {
        self.sens.as_ref().map(|s| s.cast())
    }

    /// Checks shapes, the mask invariants and `reference = rss(ifft2c(kspace))` to 1e-5.
    pub fn validate(&self) -> Result<()> {
        let s = self.kspace.shape();
        if s.len() != 5 || s[2] != 2 {
            return Err(invalid!("sample {}: k-space shape {s:?} is not [F, C, 2, H, W]", self.id));
        }
        let (f, h, w) = (s[0], s[3], s[4]);
        if self.mask.frames != f || self.mask.h != h || self.mask.w != w {
            return Err(invalid!("sample {}: mask {}x{}x{} vs k-space {f}x{h}x{w}", self.id, self.mask.frames, self.mask.h, self.mask.w));
        }
        self.mask.validate()?;
        if self.reference.shape() != [f, h, w] {
            return Err(invalid!("sample {}: reference shape {:?}", self.id, self.reference.shape()));
        }
        if let Some(sens) = &self.sens {
            if sens.shape() != [s[1], 2, h, w] {
                return Err(invalid!("sample {}: sensitivity shape {:?}", self.id, sens.shape()));
            }
        }
        if !self.kspace.all_finite() {
            return Err(invalid!("sample {}: non-finite k-space", self.id));
        }
        for fr in 0..f {
            let r = kspace::rss(&eager::ifft2c(&self.full_frame::<f64>(fr))?)?;
            let stored = self.reference_frame::<f64>(fr);
            let err = r.data().iter().zip(stored.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if err > 1e-5 {
                return Err(invalid!("sample {}: reference differs from RSS of k-space by {err:.3e} in frame {fr}", self.id));
            }
        }
        Ok(())
    }
}

/// Simulates one sample: phantom and sensitivities from `seed`, noisy fully
/// sampled k-space, and the given mask.
pub fn simulate_acquisition(
    x: &Tensor<f64>,
    sens: &Tensor<f64>,
    mask: SamplingMask,
    noise_sigma: f64,
    seed: u64,
    label: ProtocolLabel,
    id: &str,
) -> Result<Sample> {
    let (k, _) = phantom::simulate_kspace(x, sens, noise_sigma, seed)?;
    let kspace: Tensor<f32> = k.cast();
    // reference from the stored precision so the invariant is exact on disk
    let (f, c, h, w) = (kspace.dim(0), kspace.dim(1), kspace.dim(3), kspace.dim(4));
    let mut reference = Vec::with_capacity(f * h * w);
    let n = c * 2 * h * w;
    for fr in 0..f {
        let kf = Tensor::from_vec(&[c, 2, h, w], kspace.data()[fr * n..(fr + 1) * n].iter().map(|&v| v as f64).collect())?;
        reference.extend(kspace::rss(&eager::ifft2c(&kf)?)?.data().iter().map(|&v| v as f32));
    }
    let sample = Sample {
        id: id.to_string(),
        kspace,
        mask,
        reference: Tensor::from_vec(&[f, h, w], reference)?,
        sens: Some(sens.cast()),
        label,
        seed,
        noise_sigma,
    };
    sample.validate()?;
    Ok(sample)
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    format_version: u32,
    id: String,
    frames: usize,
    coils: usize,
    height: usize,
    width: usize,
    pattern: Pattern,
    acs: Acs,
    nominal_accel: f64,
    label: ProtocolLabel,
    seed: u64,
    noise_sigma: f64,
    has_sens: bool,
}

fn planar_to_interleaved(t: &Tensor<f32>, stacks: usize, p: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 4);
    for s in 0..stacks {
        let re = &t.data()[2 * s * p..(2 * s + 1) * p];
        let im = &t.data()[(2 * s + 1) * p..(2 * s + 2) * p];
        for (a, b) in re.iter().zip(im) {
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}

fn interleaved_to_planar(bytes: &[u8], stacks: usize, p: usize) -> Vec<f32> {
    let vals: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut out = vec![0.0f32; vals.len()];
    for s in 0..stacks {
        for k in 0..p {
            out[2 * s * p + k] = vals[2 * (s * p + k)];
            out[(2 * s + 1) * p + k] = vals[2 * (s * p + k) + 1];
        }
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads `path` and checks it holds exactly `expected` bytes.
fn read_exact(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::io(path, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    Ok(bytes)
}

pub fn write_sample(sample: &Sample, dir: &Path) -> Result<()> {
    sample.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (f, c, h, w) = (sample.frames(), sample.coils(), sample.height(), sample.width());
    let p = h * w;
    write_file(&dir.join("kspace.c64"), &planar_to_interleaved(&sample.kspace, f * c, p))?;
    write_file(&dir.join("mask.u8"), &sample.mask.grid)?;
    let reference: Vec<u8> = sample.reference.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(&dir.join("reference.f32"), &reference)?;
    let sens_path = dir.join("sens.c64");
    match &sample.sens {
        Some(s) => write_file(&sens_path, &planar_to_interleaved(s, c, p))?,
        None if sens_path.exists() => fs::remove_file(&sens_path).map_err(|e| Error::io(&sens_path, e))?,
        None => {}
    }
    let meta = SampleMeta {
        format_version: FORMAT_VERSION,
        id: sample.id.clone(),
        frames: f,
        coils: c,
        height: h,
        width: w,
        pattern: sample.mask.pattern,
        acs: sample.mask.acs.clone(),
        nominal_accel: sample.mask.nominal_accel,
        label: sample.label,
        seed: sample.seed,
        noise_sigma: sample.noise_sigma,
        has_sens: sample.sens.is_some(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("serializable");
    write_file(&dir.join("meta.json"), json.as_bytes())
}

pub fn read_sample(dir: &Path) -> Result<Sample> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SampleMeta = serde_json::from_str(&text).map_err(|e| Error::io(&meta_path, e))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Version { path: meta_path, found: meta.format_version, expected: FORMAT_VERSION });
    }
    let (f, c, h, w) = (meta.frames, meta.coils, meta.height, meta.width);
    let p = h * w;
    let kbytes = read_exact(&dir.join("kspace.c64"), f * c * p * 8)?;
    let kspace = Tensor::from_vec(&[f, c, 2, h, w], interleaved_to_planar(&kbytes, f * c, p))?;
    let grid = read_exact(&dir.join("mask.u8"), f * p)?;
    let rbytes = read_exact(&dir.join("reference.f32"), f * p * 4)?;
    let reference = Tensor::from_vec(
        &[f, h, w],
        rbytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
    )?;
    let sens = if meta.has_sens {
        let sb = read_exact(&dir.join("sens.c64"), c * p * 8)?;
        Some(Tensor::from_vec(&[c, 2, h, w], interleaved_to_planar(&sb, c, p))?)
    } else {
        None
    };
    let mask = SamplingMask { frames: f, h, w, grid, pattern: meta.pattern, acs: meta.acs, nominal_accel: meta.nominal_accel };
    let sample = Sample { id: meta.id, kspace, mask, reference, sens, label: meta.label, seed: meta.seed, noise_sigma: meta.noise_sigma };
    sample.validate().map_err(|e| Error::io(dir, e))?;
    Ok(sample)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternWeight {
    pub pattern: Pattern,
    pub weight: u32,
}

/// Distribution of generated samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// `[H, W]` choices, drawn uniformly.
    pub sizes: Vec<[usize; 2]>,
    pub coils: Vec<usize>,
    /// Frames per sample; kt patterns require more than one.
    pub frames: usize,
    /// Patterns assigned by cycling through the integer weights.
    pub patterns: Vec<PatternWeight>,
    pub accels: Vec<usize>,
    pub modalities: Vec<Modality>,
    pub acs_lines: usize,
    pub noise_sigma: f64,
    pub val_fraction: f64,
    pub store_sens: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            sizes: vec![[64, 64]],
            coils: vec![4],
            frames: 1,
            patterns: vec![PatternWeight { pattern: Pattern::Uniform, weight: 1 }],
            accels: vec![4],
            modalities: vec![Modality::Cine],
            acs_lines: 8,
            noise_sigma: 0.01,
            val_fraction: 0.1,
            store_sens: true,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sizes.is_empty() || self.sizes.iter().any(|s| s[0] < 16 || s[1] < 16) {
            return bad(format!("sizes must be nonempty with H, W >= 16, got {:?}", self.sizes));
        }
        if self.coils.is_empty() || self.coils.contains(&0) {
            return bad(format!("coils must be nonempty and positive, got {:?}", self.coils));
        }
        if self.frames == 0 {
            return bad("frames must be >= 1".into());
        }
        if self.patterns.is_empty() || self.patterns.iter().all(|p| p.weight == 0) {
            return bad("at least one pattern with positive weight is required".into());
        }
        if self.frames == 1 && self.patterns.iter().any(|p| p.pattern.is_kt() && p.weight > 0) {
            return bad("kt patterns need frames > 1".into());
        }
        if self.accels.is_empty() || self.accels.contains(&0) {
            return bad(format!("accels must be nonempty and positive, got {:?}", self.accels));
        }
        if self.modalities.is_empty() {
            return bad("modalities must be nonempty".into());
        }
        if !(0.0..=1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1]", self.val_fraction));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        Ok(())
    }

    /// Pattern of sample `i`: the weights expanded into a cycle.
    pub fn pattern_for(&self, i: usize) -> Pattern {
        let cycle: Vec<Pattern> =
            self.patterns.iter().flat_map(|pw| std::iter::repeat_n(pw.pattern, pw.weight as usize)).collect();
        cycle[i % cycle.len()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub coils: usize,
    pub frames: usize,
    pub pattern: Pattern,
    pub accel: usize,
    pub code: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub count: usize,
    pub seed: u64,
    pub config: DatasetConfig,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.samples.iter().filter(|e| e.split == split).map(|e| e.id.as_str()).collect()
    }
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.manifest.samples.iter().zip(&self.samples).filter(|(e, _)| e.split == split).map(|(_, s)| s).collect()
    }
}

fn hash_u64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Seed derived from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    hash_u64(&[&seed.to_le_bytes(), label.as_bytes()])
}

/// The first `round(n * frac)` ids in hash order go to validation.
pub fn assign_splits(ids: &[String], val_fraction: f64) -> Vec<Split> {
    let n_val = (ids.len() as f64 * val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| (hash_u64(&[ids[i].as_bytes()]), i));
    let mut out = vec![Split::Train; ids.len()];
    order.iter().take(n_val).for_each(|&i| out[i] = Split::Val);
    out
}

/// Generates `n` samples deterministically from `(config, seed)`.
pub fn make_dataset(n: usize, config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    config.validate()?;
    let ids: Vec<String> = (0..n).map(|i| format!("s{i:05}")).collect();
    let splits = assign_splits(&ids, config.val_fraction);
    let mut samples = Vec::with_capacity(n);
    let mut entries = Vec::with_capacity(n);
    for (i, id) in ids.iter().enumerate() {
        let s_seed = derive_seed(seed, id);
        let mut rng = ChaCha8Rng::seed_from_u64(s_seed);
        let [h, w] = config.sizes[rng.random_range(0..config.sizes.len())];
        let coils = config.coils[rng.random_range(0..config.coils.len())];
        let accel = config.accels[rng.random_range(0..config.accels.len())];
        let modality = config.modalities[rng.random_range(0..config.modalities.len())];
        let pattern = config.pattern_for(i);
        let frames = if pattern.is_kt() { config.frames } else { 1 };
        let x = phantom::gen_dynamic_phantom(frames, h, w, derive_seed(s_seed, "phantom"))?;
        let sens = phantom::gen_sensitivities(coils, h, w, derive_seed(s_seed, "sens"))?;
        let mask_seed = derive_seed(s_seed, "mask");
        let mask = if pattern.is_kt() {
            mask::make_kt_mask(frames, h, w, pattern, accel, config.acs_lines, mask_seed)?
        } else {
            mask::make_mask(pattern, h, w, accel, config.acs_lines, mask_seed)?
        };
        let label = mask::encode_protocol(pattern, accel as f64, modality)?;
        let mut sample =
            simulate_acquisition(&x, &sens, mask, config.noise_sigma, derive_seed(s_seed, "noise"), label, id)?;
        if !config.store_sens {
            sample.sens = None;
        }
        entries.push(ManifestEntry {
            id: id.clone(),
            split: splits[i],
            height: h,
            width: w,
            coils,
            frames,
            pattern,
            accel,
            code: label.code,
        });
        samples.push(sample);
    }
    let manifest = DatasetManifest { format_version: FORMAT_VERSION, count: n, seed, config: config.clone(), samples: entries };
    Ok(Dataset { manifest, samples })
}

/// Writes every sample directory, then the manifest via rename.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &ds.samples {
        write_sample(s, &dir.join(&s.id))?;
    }
    let tmp = dir.join("manifest.json.tmp");
    let json = serde_json::to_string_pretty(&ds.manifest).expect("serializable");
    write_file(&tmp, json.as_bytes())?;
    let path = dir.join("manifest.json");
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::io(&path, e))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Version { path, found: m.format_version, expected: FORMAT_VERSION });
    }
    if m.count != m.samples.len() {
        return Err(Error::io(&path, format!("count {} but {} entries", m.count, m.samples.len())));
    }
    Ok(m)
}

/// Reads a dataset and checks that the manifest and directory contents agree.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let on_disk = sample_dirs(dir)?;
    if on_disk.len() != manifest.count {
        return Err(Error::io(dir, format!("manifest lists {} samples, directory holds {}", manifest.count, on_disk.len())));
    }
    let samples = manifest.samples.iter().map(|e| read_sample(&dir.join(&e.id))).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}

/// Subdirectories containing a `meta.json`.
pub fn sample_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.join("meta.json").is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> DatasetConfig {
        DatasetConfig {
            sizes: vec![[16, 16], [24, 16]],
            coils: vec![2, 3],
            patterns: vec![
                PatternWeight { pattern: Pattern::Uniform, weight: 2 },
                PatternWeight { pattern: Pattern::Gaussian, weight: 1 },
            ],
            acs_lines: 4,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = make_dataset(6, &tiny_config(), 3).unwrap();
        let b = make_dataset(6, &tiny_config(), 3).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x == y));
    }

    #[test]
    fn stratified_patterns_and_split_sizes() {
        let ds = make_dataset(9, &tiny_config(), 1).unwrap();
        let n_uniform = ds.manifest.samples.iter().filter(|e| e.pattern == Pattern::Uniform).count();
        assert_eq!(n_uniform, 6);
        assert_eq!(ds.manifest.ids(Split::Val).len(), 1);
        let splits = assign_splits(&(0..37).map(|i| format!("x{i}")).collect::<Vec<_>>(), 0.25);
        let val = splits.iter().filter(|&&s| s == Split::Val).count();
        assert!((val as f64 - 37.0 * 0.25).abs() <= 1.0);
    }

    #[test]
    fn masked_frame_is_zero_off_mask() {
        let ds = make_dataset(2, &tiny_config(), 0).unwrap();
        let s = &ds.samples[0];
        let y = s.measured_frame::<f64>(0);
        let p = s.height() * s.width();
        for (k, v) in y.data().iter().enumerate() {
            if s.mask.frame(0)[k % p] == 0 {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn kt_dataset_has_frames() {
        let cfg = DatasetConfig {
            sizes: vec![[16, 16]],
            frames: 3,
            patterns: vec![PatternWeight { pattern: Pattern::KtUniform, weight: 1 }],
            acs_lines: 2,
            ..Default::default()
        };
        let ds = make_dataset(1, &cfg, 0).unwrap();
        assert_eq!(ds.samples[0].frames(), 3);
        assert_eq!(ds.samples[0].mask.frames, 3);
        assert!(make_dataset(1, &DatasetConfig { frames: 1, ..cfg }, 0).is_err());
    }
}
