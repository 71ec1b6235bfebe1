//! Parameterized layers shared by the image prior and the sensitivity network.
//! Feature maps are `[C, H, W]`.

use crate::params::{Bound, Init, Specs};
use crate::{Float, Result, Var};

/// Square convolution with "same" zero padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub key: String,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub bias: bool,
    pub zero_init: bool,
}

impl Conv {
    pub fn new(key: impl Into<String>, ci: usize, co: usize, k: usize) -> Self {
        Self { key: key.into(), ci, co, k, bias: false, zero_init: false }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn specs(&self, s: &mut Specs) {
        let fan_in = self.ci * self.k * self.k;
        let init = if self.zero_init { Init::Zeros } else { Init::fan_in(fan_in) };
        s.add(format!("{}.w", self.key), &[self.co, self.ci, self.k, self.k], init);
        if self.bias {
            s.add(format!("{}.b", self.key), &[self.co], init);
        }
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = p.get(&format!("{}.w", self.key))?;
        let b = if self.bias { Some(p.get(&format!("{}.b", self.key))?) } else { None };
        Ok(x.conv2d(w, b, self.k / 2)?)
    }
}

/// Per-channel 3x3 (or `k x k`) convolution without bias.
#[derive(Clone, Debug)]
pub struct DwConv {
    pub key: String,
    pub c: usize,
    pub k: usize,
}

impl DwConv {
    pub fn new(key: impl Into<String>, c: usize, k: usize) -> Self {
        Self { key: key.into(), c, k }
    }

    pub fn specs(&self, s: &mut Specs) {
        s.add(format!("{}.w", self.key), &[self.c, 1, self.k, self.k], Init::fan_in(self.k * self.k));
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.depthwise_conv2d(p.get(&format!("{}.w", self.key))?, None, self.k / 2)?)
    }
}

/// `W x (+ b)` on a vector.
#[derive(Clone, Debug)]
pub struct Linear {
    pub key: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
    pub zero_init: bool,
}

impl Linear {
    pub fn new(key: impl Into<String>, din: usize, dout: usize) -> Self {
        Self { key: key.into(), din, dout, bias: true, zero_init: false }
    }

    pub fn specs(&self, s: &mut Specs) {
        let init = if self.zero_init { Init::Zeros } else { Init::fan_in(self.din) };
        s.add(format!("{}.w", self.key), &[self.dout, self.din], init);
        if self.bias {
            s.add(format!("{}.b", self.key), &[self.dout], init);
        }
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = p.get(&format!("{}.w", self.key))?;
        let y = w.matmul(x.reshape(&[self.din, 1])?)?.reshape(&[self.dout])?;
        if self.bias {
            Ok(y.add(p.get(&format!("{}.b", self.key))?)?)
        } else {
            Ok(y)
        }
    }
}

/// Normalization across channels at each pixel, with affine scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub key: String,
    pub c: usize,
}

impl LayerNorm {
    pub fn new(key: impl Into<String>, c: usize) -> Self {
        Self { key: key.into(), c }
    }

    pub fn specs(&self, s: &mut Specs) {
        s.add(format!("{}.w", self.key), &[self.c], Init::Const(1.0));
        s.add(format!("{}.b", self.key), &[self.c], Init::Zeros);
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = p.get(&format!("{}.w", self.key))?;
        let b = p.get(&format!("{}.b", self.key))?;
        Ok(x.layer_norm_channels(w, b, T::c(1e-5))?)
    }
}
