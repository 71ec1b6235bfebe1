//! Per-cascade image prior: a two-level encoder-decoder of transformer blocks
//! built from transposed channel attention and a gated feedforward network.

use serde::{Deserialize, Serialize};

use crate::conditioning::BlockBias;
use crate::error::invalid;
use crate::nn::{Conv, DwConv, LayerNorm};
use crate::params::{Bound, Init, Specs};
use crate::{Float, PadMode, Result, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channel width of level 1; level 2 uses twice this.
    pub width: usize,
    /// Blocks per level: `[level 1 encoder and decoder, level 2]`.
    pub depths: [usize; 2],
    pub refine: usize,
    pub heads: [usize; 2],
    /// Hidden width of the feedforward network as a multiple of its input.
    pub expansion: usize,
    /// Spatial size is padded up to a multiple of this.
    pub pad_multiple: usize,
    /// Probability of skipping each residual branch of a block while training.
    pub drop_path: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { width: 32, depths: [2, 2], refine: 1, heads: [1, 2], expansion: 3, pad_multiple: 8, drop_path: 0.0 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || !self.width.is_multiple_of(2) {
            return Err(invalid!("backbone width must be even and positive, got {}", self.width));
        }
        for (lvl, (&h, c)) in self.heads.iter().zip([self.width, 2 * self.width]).enumerate() {
            if h == 0 || c % h != 0 {
                return Err(invalid!("level {} has {c} channels, not divisible by {h} heads", lvl + 1));
            }
        }
        if self.expansion == 0 {
            return Err(invalid!("feedforward expansion must be positive"));
        }
        if self.pad_multiple < 2 || !self.pad_multiple.is_multiple_of(2) {
            return Err(invalid!("pad multiple must be even, got {}", self.pad_multiple));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(invalid!("drop-path rate must be in [0, 1), got {}", self.drop_path));
        }
        Ok(())
    }
}

/// Multi-head transposed attention: the attention matrix of each head is
/// `(C / heads) x (C / heads)`.
#[derive(Clone, Debug)]
pub struct Mdta {
    key: String,
    pub c: usize,
    pub heads: usize,
    qkv: Conv,
    dw: DwConv,
    proj: Conv,
}

impl Mdta {
    pub fn new(key: impl Into<String>, c: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !c.is_multiple_of(heads) {
            return Err(invalid!("{c} channels cannot be split into {heads} heads"));
        }
        let key = key.into();
        Ok(Self {
            qkv: Conv::new(format!("{key}.qkv"), c, 3 * c, 1),
            dw: DwConv::new(format!("{key}.dw"), 3 * c, 3),
            proj: Conv::new(format!("{key}.proj"), c, c, 1),
            key,
            c,
            heads,
        })
    }

    pub fn specs(&self, s: &mut Specs) {
        self.qkv.specs(s);
        self.dw.specs(s);
        s.add(format!("{}.temp", self.key), &[self.heads, 1, 1], Init::Const(1.0));
        self.proj.specs(s);
    }

    /// Returns the attention weights `[heads, C/heads, C/heads]` and the
    /// values `[heads, C/heads, HW]`.
    pub fn attention<'t, T: Float>(&self, p: &Bound<'t, T>, f: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let shape = f.shape();
        if shape.len() != 3 || shape[0] != self.c {
            return Err(invalid!("attention over {} channels got input {shape:?}", self.c));
        }
        let hw = shape[1] * shape[2];
        let ch = self.c / self.heads;
        let qkv = self.dw.forward(p, self.qkv.forward(p, f)?)?;
        let split = |i: usize| -> Result<Var<'t, T>> { Ok(qkv.narrow(0, i * self.c, self.c)?.reshape(&[self.heads, ch, hw])?) };
        let eps = T::c(1e-12);
        let q = split(0)?.l2_normalize_last(eps);
        let k = split(1)?.l2_normalize_last(eps);
        let v = split(2)?;
        let temp = p.get(&format!("{}.temp", self.key))?;
        let attn = q.matmul_t(k, false, true)?.mul(temp)?.softmax_last();
        Ok((attn, v))
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = f.shape();
        let (attn, v) = self.attention(p, f)?;
        let out = attn.matmul(v)?.reshape(&shape)?;
        self.proj.forward(p, out)
    }
}

/// Gated feedforward: `proj(gelu(dw1(in1 f)) * dw2(in2 f))`.
#[derive(Clone, Debug)]
pub struct Gdfn {
    in1: Conv,
    dw1: DwConv,
    in2: Conv,
    dw2: DwConv,
    out: Conv,
}

impl Gdfn {
    pub fn new(key: &str, c: usize, expansion: usize) -> Self {
        let hidden = c * expansion;
        Self {
            in1: Conv::new(format!("{key}.in1"), c, hidden, 1),
            dw1: DwConv::new(format!("{key}.dw1"), hidden, 3),
            in2: Conv::new(format!("{key}.in2"), c, hidden, 1),
            dw2: DwConv::new(format!("{key}.dw2"), hidden, 3),
            out: Conv::new(format!("{key}.out"), hidden, c, 1),
        }
    }

    pub fn specs(&self, s: &mut Specs) {
        self.in1.specs(s);
        self.dw1.specs(s);
        self.in2.specs(s);
        self.dw2.specs(s);
        self.out.specs(s);
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
        let b1 = self.dw1.forward(p, self.in1.forward(p, f)?)?.gelu();
        let b2 = self.dw2.forward(p, self.in2.forward(p, f)?)?;
        self.out.forward(p, b1.mul(b2)?)
    }
}

/// `f~ = f + MDTA(LN(f))`, then `f~ + GDFN(LN(f~)) + B(c)`.
#[derive(Clone, Debug)]
pub struct Block {
    ln1: LayerNorm,
    attn: Mdta,
    ln2: LayerNorm,
    ffn: Gdfn,
    bias: Option<BlockBias>,
    drop_path: f64,
}

impl Block {
    pub fn new(key: &str, c: usize, heads: usize, expansion: usize, cond_dim: Option<usize>) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(format!("{key}.ln1"), c),
            attn: Mdta::new(format!("{key}.attn"), c, heads)?,
            ln2: LayerNorm::new(format!("{key}.ln2"), c),
            ffn: Gdfn::new(&format!("{key}.ffn"), c, expansion),
            bias: cond_dim.map(|d| BlockBias::new(format!("{key}.cond"), d, c)),
            drop_path: 0.0,
        })
    }

    pub fn with_drop_path(mut self, rate: f64) -> Self {
        self.drop_path = rate;
        self
    }

    pub fn specs(&self, s: &mut Specs) {
        self.ln1.specs(s);
        self.attn.specs(s);
        self.ln2.specs(s);
        self.ffn.specs(s);
        if let Some(b) = &self.bias {
            b.specs(s);
        }
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, f: Var<'t, T>, c: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let residual = |f: Var<'t, T>, branch: &dyn Fn(Var<'t, T>) -> Result<Var<'t, T>>| -> Result<Var<'t, T>> {
            Ok(match p.branch_scale(self.drop_path) {
                None => f,
                Some(s) if s == T::one() => f.add(branch(f)?)?,
                Some(s) => f.add(branch(f)?.scale(s))?,
            })
        };
        let f = residual(f, &|f| self.attn.forward(p, self.ln1.forward(p, f)?))?;
        let out = residual(f, &|f| self.ffn.forward(p, self.ln2.forward(p, f)?))?;
        match (&self.bias, c) {
            (Some(b), Some(c)) => Ok(out.add(b.forward(p, c)?)?),
            (Some(_), None) => Err(invalid!("conditioned block called without a conditioning vector")),
            (None, _) => Ok(out),
        }
    }
}

/// Pointwise `C -> C/2`, then space-to-depth: `[C, H, W] -> [2C, H/2, W/2]`.
#[derive(Clone, Debug)]
pub struct Downsample {
    conv: Conv,
}

impl Downsample {
    pub fn new(key: &str, c: usize) -> Self {
        Self { conv: Conv::new(key, c, c / 2, 1) }
    }

    pub fn specs(&self, s: &mut Specs) {
        self.conv.specs(s);
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = f.shape();
        if shape.len() != 3 || !shape[1].is_multiple_of(2) || !shape[2].is_multiple_of(2) {
            return Err(invalid!("downsampling needs even spatial dims, got {shape:?}"));
        }
        Ok(self.conv.forward(p, f)?.pixel_unshuffle(2)?)
    }
}

/// Pointwise `C -> 2C`, then depth-to-space: `[C, H, W] -> [C/2, 2H, 2W]`.
#[derive(Clone, Debug)]
pub struct Upsample {
    conv: Conv,
}

impl Upsample {
    pub fn new(key: &str, c: usize) -> Self {
        Self { conv: Conv::new(key, c, 2 * c, 1) }
    }

    pub fn specs(&self, s: &mut Specs) {
        self.conv.specs(s);
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, f: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.conv.forward(p, f)?.pixel_shuffle(2)?)
    }
}

/// Output of one prior evaluation.
pub struct PriorOut<'t, T: Float> {
    /// Refined center frame `[2, H, W]`.
    pub x: Var<'t, T>,
    /// Level-2 decoder features, passed to the next cascade.
    pub skip: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub in_frames: usize,
    stem: Conv,
    enc1: Vec<Block>,
    down: Downsample,
    skip_proj: Option<Conv>,
    latent: Vec<Block>,
    up: Upsample,
    fuse: Conv,
    dec1: Vec<Block>,
    refine: Vec<Block>,
    out: Conv,
}

impl Backbone {
    /// `in_frames` complex frames enter as `2 * in_frames` channels; the
    /// middle one is refined. `cond_dim` is `None` without conditioning.
    pub fn new(key: &str, cfg: &BackboneConfig, in_frames: usize, cond_dim: Option<usize>, skip_in: bool) -> Result<Self> {
        cfg.validate()?;
        if in_frames.is_multiple_of(2) {
            return Err(invalid!("the prior needs an odd number of input frames, got {in_frames}"));
        }
        let w = cfg.width;
        let e = cfg.expansion;
        let blocks = |name: &str, n: usize, c: usize, heads: usize| -> Result<Vec<Block>> {
            (0..n)
                .map(|i| Ok(Block::new(&format!("{key}.{name}.{i}"), c, heads, e, cond_dim)?.with_drop_path(cfg.drop_path)))
                .collect()
        };
        Ok(Self {
            cfg: cfg.clone(),
            in_frames,
            stem: Conv::new(format!("{key}.stem"), 2 * in_frames, w, 3),
            enc1: blocks("enc1", cfg.depths[0], w, cfg.heads[0])?,
            down: Downsample::new(&format!("{key}.down"), w),
            skip_proj: skip_in.then(|| Conv::new(format!("{key}.skip"), 2 * w, 2 * w, 1).zeroed()),
            latent: blocks("latent", cfg.depths[1], 2 * w, cfg.heads[1])?,
            up: Upsample::new(&format!("{key}.up"), 2 * w),
            fuse: Conv::new(format!("{key}.fuse"), 2 * w, w, 1),
            dec1: blocks("dec1", cfg.depths[0], w, cfg.heads[0])?,
            refine: blocks("refine", cfg.refine, w, cfg.heads[0])?,
            out: Conv::new(format!("{key}.out"), w, 2, 3).zeroed(),
        })
    }

    pub fn specs(&self, s: &mut Specs) {
        self.stem.specs(s);
        self.enc1.iter().for_each(|b| b.specs(s));
        self.down.specs(s);
        if let Some(c) = &self.skip_proj {
            c.specs(s);
        }
        self.latent.iter().for_each(|b| b.specs(s));
        self.up.specs(s);
        self.fuse.specs(s);
        self.dec1.iter().for_each(|b| b.specs(s));
        self.refine.iter().for_each(|b| b.specs(s));
        self.out.specs(s);
    }

    /// `z` is `[2 * in_frames, H, W]` with real/imaginary interleaved per
    /// frame. Returns the refined center frame plus the skip features.
    pub fn forward<'t, T: Float>(
        &self,
        p: &Bound<'t, T>,
        z: Var<'t, T>,
        c: Option<Var<'t, T>>,
        skip_in: Option<Var<'t, T>>,
    ) -> Result<PriorOut<'t, T>> {
        let shape = z.shape();
        if shape.len() != 3 || shape[0] != 2 * self.in_frames {
            return Err(invalid!("prior expects [{}, H, W], got {shape:?}", 2 * self.in_frames));
        }
        let (h, w) = (shape[1], shape[2]);
        let m = self.cfg.pad_multiple;
        let (ph, pw) = (h.next_multiple_of(m) - h, w.next_multiple_of(m) - w);
        let mode = if ph < h && pw < w { PadMode::Reflect } else { PadMode::Replicate };
        let zp = if ph + pw > 0 { z.pad2d(mode, 0, ph, 0, pw)? } else { z };

        let run = |blocks: &[Block], mut f: Var<'t, T>| -> Result<Var<'t, T>> {
            for b in blocks {
                f = b.forward(p, f, c)?;
            }
            Ok(f)
        };
        let e1 = run(&self.enc1, self.stem.forward(p, zp)?)?;
        let mut l2 = self.down.forward(p, e1)?;
        match (&self.skip_proj, skip_in) {
            (Some(conv), Some(s)) => {
                if s.shape() != l2.shape() {
                    return Err(invalid!("skip features {:?} do not match level-2 features {:?}", s.shape(), l2.shape()));
                }
                l2 = l2.add(conv.forward(p, s)?)?;
            }
            (None, Some(_)) => return Err(invalid!("this cascade does not accept skip features")),
            (_, None) => {}
        }
        let skip = run(&self.latent, l2)?;
        let up = self.up.forward(p, skip)?;
        let d1 = self.fuse.forward(p, sdum_autograd::concat(&[up, e1], 0)?)?;
        let d1 = run(&self.refine, run(&self.dec1, d1)?)?;
        let center = zp.narrow(0, self.in_frames - 1, 2)?;
        let x = self.out.forward(p, d1)?.add(center)?;
        let x = if ph + pw > 0 { x.crop2d(0, 0, h, w)? } else { x };
        Ok(PriorOut { x, skip })
    }
}
