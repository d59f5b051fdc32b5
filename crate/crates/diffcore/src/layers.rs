//! Parameter bundles and composite layers built from graph primitives.

use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearParams {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, din: usize, dout: usize, bias: bool) -> Result<Self> {
        let w = store.add(format!("{prefix}.weight"), &[din, dout], Init::FanInUniform { fan_in: din })?;
        let b = if bias { Some(store.add(format!("{prefix}.bias"), &[dout], Init::Zeros)?) } else { None };
        Ok(Self { w, b })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
}

impl ConvParams {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self> {
        let w = store.add(format!("{prefix}.weight"), &[k, k, cin, cout], Init::FanInUniform { fan_in: k * k * cin })?;
        let b = Some(store.add(format!("{prefix}.bias"), &[cout], Init::Zeros)?);
        Ok(Self { w, b, stride })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride)
    }

    pub fn out_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.w).shape()[3]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<Self> {
        let gamma = store.add(format!("{prefix}.gamma"), &[d], Init::Ones)?;
        let beta = store.add(format!("{prefix}.beta"), &[d], Init::Zeros)?;
        Ok(Self { gamma, beta })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Logit scaling inside attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `1 / sqrt(d_head)`
    #[default]
    InvSqrtD,
    /// `1 / d_head`
    InvD,
}

impl AttentionScale {
    pub fn factor(self, d_head: usize) -> f64 {
        match self {
            AttentionScale::InvSqrtD => 1.0 / (d_head as f64).sqrt(),
            AttentionScale::InvD => 1.0 / d_head as f64,
        }
    }
}

/// Test hook that replaces the softmax weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionOverride {
    #[default]
    None,
    /// Every token attends only to itself.
    Identity,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub out: LinearParams,
    pub n_heads: usize,
    pub d: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// Row-stochastic `[n, n]` weights, one node per head.
    pub probs: Vec<Var>,
}

impl AttentionParams {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(DiffError::DimMismatch(format!("width {d} not divisible by {n_heads} heads")));
        }
        Ok(Self {
            q: LinearParams::register(store, &format!("{prefix}.q"), d, d, true)?,
            // a key bias shifts every logit in a row equally, so softmax ignores it
            k: LinearParams::register(store, &format!("{prefix}.k"), d, d, false)?,
            v: LinearParams::register(store, &format!("{prefix}.v"), d, d, true)?,
            out: LinearParams::register(store, &format!("{prefix}.out"), d, d, true)?,
            n_heads,
            d,
        })
    }
}

/// Multi-head self-attention over `[n, d]` tokens: per head
/// `softmax(Q Kᵀ σ) V`, heads concatenated, then an output projection.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<'_, T>,
    tokens: Var,
    p: &AttentionParams,
    scale: AttentionScale,
    hook: AttentionOverride,
) -> Result<AttentionOutput> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 2 || s[1] != p.d {
        return Err(DiffError::DimMismatch(format!("tokens {s:?} for attention width {}", p.d)));
    }
    let n = s[0];
    let dh = p.d / p.n_heads;
    let q = p.q.apply(g, tokens)?;
    let k = p.k.apply(g, tokens)?;
    let v = p.v.apply(g, tokens)?;
    let mut heads = Vec::with_capacity(p.n_heads);
    let mut probs = Vec::with_capacity(p.n_heads);
    for h in 0..p.n_heads {
        let qh = g.narrow(q, 1, h * dh, dh)?;
        let kh = g.narrow(k, 1, h * dh, dh)?;
        let vh = g.narrow(v, 1, h * dh, dh)?;
        let weights = match hook {
            AttentionOverride::None => {
                let logits = g.matmul(qh, kh, false, true)?;
                let scaled = g.scale(logits, scale.factor(dh));
                g.softmax(scaled, 1)?
            }
            AttentionOverride::Identity => {
                g.constant(Tensor::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() }))
            }
        };
        probs.push(weights);
        heads.push(g.matmul(weights, vh, false, false)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
    let out = p.out.apply(g, merged)?;
    Ok(AttentionOutput { out, probs })
}

/// 3x3 convolution, optional GELU, nearest 2x upsampling.
pub fn conv_upsample_block<T: Real>(g: &mut Graph<'_, T>, x: Var, conv: &ConvParams, activate: bool) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let w = g.params().value(conv.w).shape().to_vec();
    if s.len() != 3 || w[2] != s[2] {
        return Err(DiffError::DimMismatch(format!("block input {s:?} for kernel {w:?}")));
    }
    let y = conv.apply(g, x)?;
    let y = if activate { g.gelu(y) } else { y };
    g.upsample2x(y)
}
