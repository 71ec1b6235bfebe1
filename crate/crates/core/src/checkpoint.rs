//! Checkpoint directories: `manifest.json` plus one little-endian `f32`
//! array per parameter (`<key>.f32`) and, when saved with optimizer state,
//! per-parameter moments (`adam.m.<key>.f32`, `adam.v.<key>.f32`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::unroll::{Model, ModelConfig};
use crate::{Error, Result, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub key: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub step: usize,
    pub m: Vec<ArrayEntry>,
    pub v: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub depth: usize,
    pub step: usize,
    pub seed: u64,
    pub has_optimizer: bool,
    pub arrays: Vec<ArrayEntry>,
    pub optimizer: Option<OptimizerEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: usize,
    pub seed: u64,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

impl Checkpoint {
    /// Errors naming the first key that does not fit `cfg`.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        self.params.check(&Model::new(cfg)?.specs())
    }
}

fn write_arrays<'a>(
    dir: &Path,
    prefix: &str,
    arrays: impl Iterator<Item = (&'a String, &'a Tensor<f32>)>,
) -> Result<Vec<ArrayEntry>> {
    arrays
        .map(|(key, t)| {
            let file = format!("{prefix}{key}.f32");
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            Ok(ArrayEntry { key: key.clone(), file, shape: t.shape().to_vec(), bytes: bytes.len() })
        })
        .collect()
}

fn read_array(dir: &Path, e: &ArrayEntry) -> Result<Tensor<f32>> {
    let param_err = |detail: String| Error::Param { key: e.key.clone(), detail };
    let expected = e.shape.iter().product::<usize>() * 4;
    if e.bytes != expected {
        return Err(param_err(format!("manifest lists {} bytes for shape {:?}", e.bytes, e.shape)));
    }
    let path = dir.join(&e.file);
    let bytes = fs::read(&path).map_err(|err| param_err(format!("{}: {err}", path.display())))?;
    if bytes.len() != expected {
        return Err(param_err(format!("{}: expected {expected} bytes, found {}", path.display(), bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(Tensor::from_vec(&e.shape, data)?)
}

/// Writes `ckpt` into `dir`, replacing any arrays of an earlier checkpoint there.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Ok(entries) = fs::read_dir(dir) {
        for entry in entries.flatten() {
            let path = entry.path();
            if path.extension().is_some_and(|x| x == "f32") {
                fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    let arrays = write_arrays(dir, "", ckpt.params.iter())?;
    let optimizer = match &ckpt.optimizer {
        Some(st) => Some(OptimizerEntry {
            step: st.step,
            m: write_arrays(dir, "adam.m.", st.m.iter())?,
            v: write_arrays(dir, "adam.v.", st.v.iter())?,
        }),
        None => None,
    };
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        config: ckpt.config.clone(),
        depth: ckpt.config.cascades,
        step: ckpt.step,
        seed: ckpt.seed,
        has_optimizer: optimizer.is_some(),
        arrays,
        optimizer,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("serializable");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::io(&path, e))?;
    if m.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version { path, found: m.format_version, expected: CHECKPOINT_VERSION });
    }
    if m.depth != m.config.cascades {
        return Err(Error::io(&path, format!("depth {} disagrees with the configured {} cascades", m.depth, m.config.cascades)));
    }
    Ok(m)
}

/// Reads a checkpoint and checks its arrays against its own configuration.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let m = read_checkpoint_manifest(dir)?;
    let mut params = ParamStore::new();
    for e in &m.arrays {
        params.insert(e.key.clone(), read_array(dir, e)?);
    }
    let read_map = |entries: &[ArrayEntry]| -> Result<BTreeMap<String, Tensor<f32>>> {
        entries.iter().map(|e| Ok((e.key.clone(), read_array(dir, e)?))).collect()
    };
    let optimizer = match &m.optimizer {
        Some(o) => Some(AdamState { step: o.step, m: read_map(&o.m)?, v: read_map(&o.v)? }),
        None => None,
    };
    let ckpt = Checkpoint { config: m.config, step: m.step, seed: m.seed, params, optimizer };
    ckpt.check_against(&ckpt.config)?;
    Ok(ckpt)
}

/// Loads a checkpoint that must match `cfg`.
pub fn load_checkpoint_for(dir: &Path, cfg: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(dir)?;
    ckpt.check_against(cfg)?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::perturb;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig { cascades: 3, coils: 2, weight_grid: 16, n_adj: 0, ..Default::default() };
        cfg.backbone.width = 4;
        cfg.cond.d0 = 4;
        cfg.cond.d = 8;
        cfg
    }

    fn ckpt(with_opt: bool) -> Checkpoint {
        let cfg = tiny();
        let mut params = Model::new(&cfg).unwrap().init::<f32>(3).unwrap();
        perturb(&mut params, 0.1, 9);
        let optimizer = with_opt.then(|| {
            let mut st = AdamState::new();
            st.step = 7;
            for (k, v) in params.iter() {
                st.m.insert(k.clone(), v.map(|x| 0.5 * x));
                st.v.insert(k.clone(), v.map(|x| x * x));
            }
            st
        });
        Checkpoint { config: cfg, step: 42, seed: 5, params, optimizer }
    }

    fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        for with_opt in [false, true] {
            let a = tempfile::tempdir().unwrap();
            let b = tempfile::tempdir().unwrap();
            let c = ckpt(with_opt);
            save_checkpoint(&c, a.path()).unwrap();
            let back = load_checkpoint(a.path()).unwrap();
            assert_eq!(back, c);
            save_checkpoint(&back, b.path()).unwrap();
            assert_eq!(files(a.path()), files(b.path()));
        }
    }

    #[test]
    fn overwriting_drops_stale_arrays() {
        let d = tempfile::tempdir().unwrap();
        save_checkpoint(&ckpt(true), d.path()).unwrap();
        save_checkpoint(&ckpt(false), d.path()).unwrap();
        assert!(!files(d.path()).keys().any(|k| k.starts_with("adam.")));
        assert!(load_checkpoint(d.path()).unwrap().optimizer.is_none());
    }

    #[test]
    fn corruption_names_the_key() {
        let d = tempfile::tempdir().unwrap();
        save_checkpoint(&ckpt(false), d.path()).unwrap();
        let key = "c01.backbone.stem.w";
        let path = d.path().join(format!("{key}.f32"));
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(d.path()).unwrap_err();
        assert!(matches!(&err, Error::Param { key: k, .. } if k == key), "{err}");

        save_checkpoint(&ckpt(false), d.path()).unwrap();
        let mut other = tiny();
        other.backbone.width = 8;
        let err = load_checkpoint_for(d.path(), &other).unwrap_err();
        assert!(matches!(&err, Error::Param { .. }), "{err}");
    }
}
