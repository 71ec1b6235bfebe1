//! The unrolled network: each cascade estimates sensitivities, takes a
//! data-consistency step and applies its learned prior. Also progressive
//! depth expansion of a trained model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::conditioning::{CondConfig, Conditioning};
use crate::csme::{csme_input, Csme};
use crate::dataset::Sample;
use crate::dc::{DcLayer, DcMode};
use crate::error::invalid;
use crate::kspace::zero_filled;
use crate::mask::{Acs, Pattern};
use crate::params::{Bound, ParamStore, Specs};
use crate::{Error, Float, Result, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsmeMode {
    /// One sensitivity network shared by all cascades.
    Single,
    /// An independent network per cascade.
    Multiple,
}

impl fmt::Display for CsmeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CsmeMode::Single => "single",
            CsmeMode::Multiple => "multiple",
        })
    }
}

impl FromStr for CsmeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(CsmeMode::Single),
            "multiple" => Ok(CsmeMode::Multiple),
            _ => Err(Error::Config(format!("unknown CSME mode `{s}` (expected single or multiple)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub cascades: usize,
    pub coils: usize,
    /// Neighbouring frames on each side fed to the prior.
    pub n_adj: usize,
    pub backbone: BackboneConfig,
    pub cond: CondConfig,
    pub dc: DcMode,
    pub csme: CsmeMode,
    /// Universal conditioning on cascade index and protocol label.
    pub uc: bool,
    /// Side length of the learned k-space weight grids.
    pub weight_grid: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            cascades: 2,
            coils: 4,
            n_adj: 2,
            backbone: BackboneConfig::default(),
            cond: CondConfig::default(),
            dc: DcMode::Swdc,
            csme: CsmeMode::Multiple,
            uc: true,
            weight_grid: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cascades == 0 || self.cascades > 100 {
            return Err(Error::Config(format!("cascade count must be in [1, 100], got {}", self.cascades)));
        }
        if self.coils == 0 {
            return Err(Error::Config("coil count must be positive".into()));
        }
        if !self.cond.d0.is_multiple_of(2) || self.cond.d0 == 0 || self.cond.d == 0 {
            return Err(Error::Config(format!("conditioning widths must be positive with even d0, got {:?}", self.cond)));
        }
        if self.weight_grid == 0 {
            return Err(Error::Config("weight grid must be positive".into()));
        }
        self.backbone.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn in_frames(&self) -> usize {
        2 * self.n_adj + 1
    }
}

/// Prefix of every per-cascade key of cascade `t`.
pub fn cascade_prefix(t: usize) -> String {
    format!("c{t:02}.")
}

/// Measured data of one sample on a tape.
pub struct ModelInput<'t, T: Float> {
    /// Per frame `[C, 2, H, W]`.
    pub y: Vec<Var<'t, T>>,
    /// Per frame `[H, W]`.
    pub masks: Vec<Var<'t, T>>,
    pub acs: Acs,
    pub pattern: Pattern,
    pub code: usize,
}

impl<'t, T: Float> ModelInput<'t, T> {
    pub fn from_sample(tape: &'t Tape<T>, sample: &Sample) -> Self {
        let f = sample.frames();
        Self {
            y: (0..f).map(|i| tape.constant(sample.measured_frame(i))).collect(),
            masks: (0..f).map(|i| tape.constant(sample.mask.frame_tensor(i))).collect(),
            acs: sample.mask.acs.clone(),
            pattern: sample.mask.pattern,
            code: sample.label.code,
        }
    }

    pub fn frames(&self) -> usize {
        self.y.len()
    }
}

/// Estimate after some number of cascades.
pub struct CascadeState<'t, T: Float> {
    /// Per frame `[1, 2, H, W]`.
    pub x: Vec<Var<'t, T>>,
    /// Per frame level-2 features of the previous prior.
    pub skip: Option<Vec<Var<'t, T>>>,
    /// `[C, 2, H, W]`, shared by all frames.
    pub s: Var<'t, T>,
}

/// Frames `center - n_adj ..= center + n_adj` (clamped at the ends) stacked
/// as `[2 (2 n_adj + 1), H, W]` with real and imaginary planes interleaved.
pub fn pack_adjacent_frames<'t, T: Float>(frames: &[Var<'t, T>], center: usize, n_adj: usize) -> Result<Var<'t, T>> {
    if center >= frames.len() {
        return Err(invalid!("center frame {center} of {}", frames.len()));
    }
    let last = frames.len() - 1;
    let parts = (0..=2 * n_adj)
        .map(|k| {
            let f = (center + k).saturating_sub(n_adj).min(last);
            let s = frames[f].shape();
            Ok(frames[f].reshape(&s[1..])?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sdum_autograd::concat(&parts, 0)?)
}

#[derive(Clone, Debug)]
struct Cascade {
    backbone: Backbone,
    csme: Option<Csme>,
    dc: DcLayer,
}

/// Architecture of a model; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    cascades: Vec<Cascade>,
    shared_csme: Option<Csme>,
    cond: Option<Conditioning>,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let cond_dim = cfg.uc.then_some(cfg.cond.d);
        let cascades = (0..cfg.cascades)
            .map(|t| {
                let pre = cascade_prefix(t);
                Ok(Cascade {
                    backbone: Backbone::new(&format!("{pre}backbone"), &cfg.backbone, cfg.in_frames(), cond_dim, t > 0)?,
                    csme: (cfg.csme == CsmeMode::Multiple).then(|| Csme::new(&format!("{pre}csme"), cfg.coils)),
                    dc: DcLayer::new(format!("{pre}dc"), cfg.dc, cfg.weight_grid),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            cascades,
            shared_csme: (cfg.csme == CsmeMode::Single).then(|| Csme::new("shared.csme", cfg.coils)),
            cond: cfg.uc.then(|| Conditioning::new("shared.cond", cfg.cond)),
        })
    }

    pub fn depth(&self) -> usize {
        self.cascades.len()
    }

    pub fn specs(&self) -> Specs {
        let mut s = Specs::default();
        if let Some(c) = &self.cond {
            c.specs(&mut s);
        }
        if let Some(c) = &self.shared_csme {
            c.specs(&mut s);
        }
        for c in &self.cascades {
            c.backbone.specs(&mut s);
            if let Some(n) = &c.csme {
                n.specs(&mut s);
            }
            c.dc.specs(&mut s);
        }
        s
    }

    pub fn init<T: Float>(&self, seed: u64) -> Result<ParamStore<T>> {
        ParamStore::init(&self.specs(), seed)
    }

    fn csme(&self, t: usize) -> &Csme {
        self.cascades[t].csme.as_ref().or(self.shared_csme.as_ref()).expect("one CSME variant is configured")
    }

    fn check_input<T: Float>(&self, input: &ModelInput<'_, T>) -> Result<()> {
        if input.y.is_empty() || input.masks.len() != input.y.len() {
            return Err(invalid!("{} k-space frames with {} masks", input.y.len(), input.masks.len()));
        }
        let c = input.y[0].shape()[0];
        if c != self.cfg.coils {
            return Err(invalid!("model expects {} coils, sample has {c}", self.cfg.coils));
        }
        Ok(())
    }

    /// Sensitivities from the ACS region and the zero-filled images they give.
    pub fn initial_state<'t, T: Float>(&self, p: &Bound<'t, T>, input: &ModelInput<'t, T>) -> Result<CascadeState<'t, T>> {
        self.check_input(input)?;
        let u = csme_input(&input.y, &input.masks, &input.acs, None)?;
        let s = self.csme(0).estimate(p, u)?;
        let x = input.y.iter().map(|y| zero_filled(*y, s)).collect::<Result<Vec<_>>>()?;
        Ok(CascadeState { x, skip: None, s })
    }

    pub fn cascade_step<'t, T: Float>(
        &self,
        p: &Bound<'t, T>,
        state: CascadeState<'t, T>,
        t: usize,
        input: &ModelInput<'t, T>,
    ) -> Result<CascadeState<'t, T>> {
        let cas = self.cascades.get(t).ok_or_else(|| invalid!("cascade {t} of a {}-cascade model", self.depth()))?;
        let s = if t == 0 {
            state.s
        } else {
            let u = csme_input(&input.y, &input.masks, &input.acs, Some((state.s, &state.x)))?;
            self.csme(t).estimate(p, u)?
        };
        let z = state
            .x
            .iter()
            .zip(&input.y)
            .zip(&input.masks)
            .map(|((x, y), m)| cas.dc.step(p, *x, *y, s, *m, input.pattern))
            .collect::<Result<Vec<_>>>()?;
        let c = match &self.cond {
            Some(cond) => Some(cond.cond_vector(p, t, input.code)?),
            None => None,
        };
        let mut x = Vec::with_capacity(z.len());
        let mut skip = Vec::with_capacity(z.len());
        for f in 0..z.len() {
            let packed = pack_adjacent_frames(&z, f, self.cfg.n_adj)?;
            let prev = state.skip.as_ref().map(|s| s[f]);
            let out = cas.backbone.forward(p, packed, c, prev)?;
            x.push(out.x.reshape(&z[f].shape())?);
            skip.push(out.skip);
        }
        Ok(CascadeState { x, skip: Some(skip), s })
    }

    /// Full reconstruction, one `[1, 2, H, W]` image per frame.
    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, input: &ModelInput<'t, T>) -> Result<Vec<Var<'t, T>>> {
        Ok(self.forward_state(p, input)?.x)
    }

    pub fn forward_state<'t, T: Float>(&self, p: &Bound<'t, T>, input: &ModelInput<'t, T>) -> Result<CascadeState<'t, T>> {
        let mut state = self.initial_state(p, input)?;
        for t in 0..self.depth() {
            state = self.cascade_step(p, state, t, input)?;
        }
        Ok(state)
    }
}

/// Source cascade of cascade `t` after growing a `t_prev`-cascade model to
/// `2 (t_prev - 1)` cascades: the endpoints stay, interior cascades double.
pub fn expansion_map(t: usize, t_prev: usize) -> Result<usize> {
    if t_prev < 3 {
        return Err(invalid!("expansion needs at least 3 cascades, got {t_prev}"));
    }
    let t_new = 2 * (t_prev - 1);
    if t >= t_new {
        return Err(invalid!("cascade {t} outside the expanded depth {t_new}"));
    }
    Ok(if t == 0 {
        0
    } else if t == t_new - 1 {
        t_prev - 1
    } else {
        1 + (t - 1) / 2
    })
}

/// Deeper model whose cascade `t` is a copy of cascade `expansion_map(t)`;
/// shared parameters carry over unchanged.
pub fn expand_model<T: Float>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<(ModelConfig, ParamStore<T>)> {
    let old = Model::new(cfg)?;
    store.check(&old.specs())?;
    let t_prev = cfg.cascades;
    if t_prev < 3 {
        return Err(invalid!("expansion needs at least 3 cascades, got {t_prev}"));
    }
    let new_cfg = ModelConfig { cascades: 2 * (t_prev - 1), ..cfg.clone() };
    let mut out = ParamStore::new();
    for (k, v) in store.iter().filter(|(k, _)| k.starts_with("shared.")) {
        out.insert(k.clone(), v.clone());
    }
    for t in 0..new_cfg.cascades {
        let src = cascade_prefix(expansion_map(t, t_prev)?);
        let dst = cascade_prefix(t);
        for (k, v) in store.iter().filter(|(k, _)| k.starts_with(&src)) {
            out.insert(format!("{dst}{}", &k[src.len()..]), v.clone());
        }
    }
    out.check(&Model::new(&new_cfg)?.specs())?;
    Ok((new_cfg, out))
}
