//! Attention, MLP, layer-norm and positional-encoding blocks.
//!
//! Each block exists twice: a free function over tape [`Var`]s (what the
//! gradient checks exercise) and a small named-parameter wrapper that binds
//! its weights from a [`Session`].

use std::f32::consts::PI;

use crate::error::{Error, Result};
use crate::params::{ParamInit, Session};
use crate::tensor::{Tape, Tensor, Var};

/// Weights of one multi-head attention layer, all `C×C`, no biases.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

/// Scaled dot-product attention with `heads` heads and scale `1/√head_dim`.
///
/// Queries come from `q_in` (`Nq×C`), keys from `k_in` and values from
/// `v_in` (both `Nk×C`). Self-attention is `q_in == k_in == v_in`.
pub fn mha(tape: &mut Tape, q_in: Var, k_in: Var, v_in: Var, p: &AttentionVars) -> Result<Var> {
    let c = tape.shape(p.wq)[0];
    for x in [q_in, k_in, v_in] {
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != c {
            return Err(Error::shape("mha", tape.shape(x), tape.shape(p.wq)));
        }
    }
    if tape.shape(k_in)[0] != tape.shape(v_in)[0] {
        return Err(Error::shape("mha keys/values", tape.shape(k_in), tape.shape(v_in)));
    }
    if p.heads == 0 || c % p.heads != 0 {
        return Err(Error::invalid(format!("{c} channels do not split into {} heads", p.heads)));
    }
    let d = c / p.heads;
    let scale = 1.0 / (d as f32).sqrt();
    let q = tape.matmul(q_in, p.wq)?;
    let k = tape.matmul(k_in, p.wk)?;
    let v = tape.matmul(v_in, p.wv)?;
    let mut outs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, h * d, d)?, tape.slice_cols(k, h * d, d)?, tape.slice_cols(v, h * d, d)?)
        };
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.matmul(merged, p.wo)
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Row-wise `gelu(x·W1 + b1)·W2 + b2`.
pub fn mlp(tape: &mut Tape, x: Var, p: &MlpVars) -> Result<Var> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_bias(h, p.b1)?;
    let h = tape.gelu(h);
    let y = tape.matmul(h, p.w2)?;
    tape.add_bias(y, p.b2)
}

#[derive(Clone, Debug)]
pub struct Attention {
    prefix: String,
    dim: usize,
    heads: usize,
}

impl Attention {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("{dim} channels do not split into {heads} heads")));
        }
        Ok(Attention { prefix: prefix.into(), dim, heads })
    }

    pub fn init(&self, p: &mut ParamInit) {
        for w in ["wq", "wk", "wv", "wo"] {
            p.weight(&format!("{}.{w}", self.prefix), &[self.dim, self.dim]);
        }
    }

    pub fn bind(&self, s: &mut Session) -> Result<AttentionVars> {
        Ok(AttentionVars {
            wq: s.param(&format!("{}.wq", self.prefix))?,
            wk: s.param(&format!("{}.wk", self.prefix))?,
            wv: s.param(&format!("{}.wv", self.prefix))?,
            wo: s.param(&format!("{}.wo", self.prefix))?,
            heads: self.heads,
        })
    }

    pub fn forward(&self, s: &mut Session, q: Var, k: Var, v: Var) -> Result<Var> {
        let p = self.bind(s)?;
        mha(&mut s.tape, q, k, v, &p)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    prefix: String,
    dim: usize,
    hidden: usize,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, dim: usize, hidden: usize) -> Self {
        Mlp { prefix: prefix.into(), dim, hidden }
    }

    pub fn init(&self, p: &mut ParamInit) {
        p.weight(&format!("{}.w1", self.prefix), &[self.dim, self.hidden]);
        p.zeros(&format!("{}.b1", self.prefix), &[self.hidden]);
        p.weight(&format!("{}.w2", self.prefix), &[self.hidden, self.dim]);
        p.zeros(&format!("{}.b2", self.prefix), &[self.dim]);
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let p = MlpVars {
            w1: s.param(&format!("{}.w1", self.prefix))?,
            b1: s.param(&format!("{}.b1", self.prefix))?,
            w2: s.param(&format!("{}.w2", self.prefix))?,
            b2: s.param(&format!("{}.b2", self.prefix))?,
        };
        mlp(&mut s.tape, x, &p)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    prefix: String,
    dim: usize,
    eps: f32,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, dim: usize, eps: f32) -> Self {
        LayerNorm { prefix: prefix.into(), dim, eps }
    }

    pub fn init(&self, p: &mut ParamInit) {
        p.ones(&format!("{}.gamma", self.prefix), &[self.dim]);
        p.zeros(&format!("{}.beta", self.prefix), &[self.dim]);
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(&format!("{}.gamma", self.prefix))?;
        let b = s.param(&format!("{}.beta", self.prefix))?;
        s.tape.layer_norm(x, g, b, self.eps)
    }
}

/// Highest spatial frequency, in cycles per unit coordinate.
const PE_MAX_FREQ: f32 = 16.0;

/// Fixed sine-cosine encoding of points in `[0, 1]²`.
///
/// Channel pairs `(2j, 2j+1)` hold `(sin(ω·u), cos(ω·u))`; even pairs encode
/// `x`, odd pairs encode `y`, with angular frequencies spaced geometrically
/// from `π` to `2π·PE_MAX_FREQ`.
pub fn positional_encoding(coords: &[(f32, f32)], dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!("positional encoding dim must be even, got {dim}")));
    }
    if coords.is_empty() {
        return Err(Error::invalid("no coordinates to encode"));
    }
    let pairs = dim / 2;
    let per_axis = [pairs.div_ceil(2), pairs / 2];
    let omega = |axis: usize, f: usize| -> f32 {
        let k = per_axis[axis];
        if k <= 1 {
            PI
        } else {
            PI * (2.0 * PE_MAX_FREQ).powf(f as f32 / (k - 1) as f32)
        }
    };
    let mut data = Vec::with_capacity(coords.len() * dim);
    for &(x, y) in coords {
        for j in 0..pairs {
            let axis = j % 2;
            let u = if axis == 0 { x } else { y };
            let (s, c) = (omega(axis, j / 2) * u).sin_cos();
            data.push(s);
            data.push(c);
        }
    }
    Tensor::new([coords.len(), dim], data)
}

/// Encoding of the centres of an `h×w` grid, row-major.
pub fn grid_encoding(h: usize, w: usize, dim: usize) -> Result<Tensor> {
    let coords: Vec<(f32, f32)> = (0..h * w)
        .map(|i| (((i % w) as f32 + 0.5) / w as f32, ((i / w) as f32 + 0.5) / h as f32))
        .collect();
    positional_encoding(&coords, dim)
}
