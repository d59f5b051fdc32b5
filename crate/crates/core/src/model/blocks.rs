use diffcore::{
    conv_upsample_block, multi_head_attention, AttentionOverride, AttentionParams, AttentionScale, ConvParams, Graph,
    LayerNormParams, LinearParams, ParamStore, Real, Tensor, Var,
};

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Stack of stride-2 3x3 convolutions, each followed by GELU.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<ConvParams>,
}

impl Encoder {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut cin = 3;
        let mut stages = Vec::with_capacity(cfg.k);
        for (i, w) in cfg.encoder_widths().into_iter().enumerate() {
            stages.push(ConvParams::register(store, &format!("{prefix}.stage{i}"), 3, cin, w, 2)?);
            cin = w;
        }
        Ok(Self { stages })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for s in &self.stages {
            h = s.apply(g, h)?;
            h = g.gelu(h);
        }
        Ok(h)
    }
}

/// Parameter-free 2-D sinusoidal embedding, `[h * w, d]` with row `y * w + x`.
/// The first `d / 2` channels encode x and the rest y; each half interleaves
/// `sin(p ω_i), cos(p ω_i)` with `ω_i = 10000^(-i / (d / 4))`.
pub fn pos_embed_2d(h: usize, w: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::BadDim(d));
    }
    let nf = d / 4;
    let freqs: Vec<f64> = (0..nf).map(|i| 10000f64.powf(-(i as f64) / nf as f64)).collect();
    let mut out = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            for pos in [x as f64, y as f64] {
                for f in &freqs {
                    out.push((pos * f).sin());
                    out.push((pos * f).cos());
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ff1: LinearParams,
    pub ff2: LinearParams,
}

pub struct LayerOutput {
    pub tokens: Var,
    pub probs: Vec<Var>,
}

impl TransformerLayer {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize, n_heads: usize, mult: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNormParams::register(store, &format!("{prefix}.ln1"), d)?,
            attn: AttentionParams::register(store, &format!("{prefix}.attn"), d, n_heads)?,
            ln2: LayerNormParams::register(store, &format!("{prefix}.ln2"), d)?,
            ff1: LinearParams::register(store, &format!("{prefix}.ff1"), d, d * mult, true)?,
            ff2: LinearParams::register(store, &format!("{prefix}.ff2"), d * mult, d, true)?,
        })
    }

    /// Pre-norm block: `x + MHA(LN x)`, then `x + FFN(LN x)`.
    pub fn apply<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        scale: AttentionScale,
        hook: AttentionOverride,
    ) -> Result<LayerOutput> {
        let n = self.ln1.apply(g, x)?;
        let a = multi_head_attention(g, n, &self.attn, scale, hook)?;
        let x = g.add(x, a.out)?;
        let n = self.ln2.apply(g, x)?;
        let f = self.ff1.apply(g, n)?;
        let f = g.gelu(f);
        let f = self.ff2.apply(g, f)?;
        Ok(LayerOutput { tokens: g.add(x, f)?, probs: a.probs })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub attention: AttentionOverride,
    /// Drops the positional embedding (test hook for equivariance checks).
    pub zero_pos_embed: bool,
}

/// Projects background cells to tokens, prepends the object token and runs
/// the transformer; returns only the patch tokens.
#[derive(Clone, Debug)]
pub struct Correlator {
    pub proj: ConvParams,
    pub obj_proj: LinearParams,
    pub layers: Vec<TransformerLayer>,
    pub scale: AttentionScale,
    pub d_t: usize,
}

pub struct CorrelateOutput {
    /// `[g * g, d_t]`.
    pub tokens: Var,
    /// Per layer, per head `[n, n]` attention weights; row 0 is the object token.
    pub attention: Vec<Vec<Var>>,
}

impl Correlator {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let proj = ConvParams::register(store, &format!("{prefix}.proj"), 1, cfg.d_enc, cfg.d_t, 1)?;
        let obj_proj = LinearParams::register(store, &format!("{prefix}.obj_proj"), cfg.d_enc, cfg.d_t, true)?;
        let layers = (0..cfg.n_layers)
            .map(|i| TransformerLayer::register(store, &format!("{prefix}.layer{i}"), cfg.d_t, cfg.n_heads, cfg.ffn_mult))
            .collect::<Result<_>>()?;
        Ok(Self { proj, obj_proj, layers, scale: cfg.attn_scale, d_t: cfg.d_t })
    }

    /// `bg`: `[g, g, d_enc]`, `obj`: `[d_enc]`.
    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, bg: Var, obj: Var, opts: &ForwardOptions) -> Result<CorrelateOutput> {
        let s = g.shape(bg).to_vec();
        if s.len() != 3 {
            return Err(Error::DimMismatch(format!("background grid {s:?}")));
        }
        let (gh, gw) = (s[0], s[1]);
        let p = self.proj.apply(g, bg)?;
        let p = g.reshape(p, &[gh * gw, self.d_t])?;
        let p = if opts.zero_pos_embed {
            p
        } else {
            let pe = pos_embed_2d(gh, gw, self.d_t)?;
            let pe = g.constant(Tensor::new(&[gh * gw, self.d_t], pe.into_iter().map(T::lit).collect())?);
            g.add(p, pe)?
        };
        let o = self.obj_proj.apply(g, obj)?;
        let o = g.reshape(o, &[1, self.d_t])?;
        let mut x = g.concat(&[o, p], 0)?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer.apply(g, x, self.scale, opts.attention)?;
            x = out.tokens;
            attention.push(out.probs);
        }
        let tokens = g.narrow(x, 0, 1, gh * gw)?;
        Ok(CorrelateOutput { tokens, attention })
    }
}

/// `k` conv-GELU-upsample blocks halving the width, then a 3x3 conv to `c`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub blocks: Vec<ConvParams>,
    pub out: ConvParams,
    pub d_in: usize,
}

impl Decoder {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut cin = cfg.d_t;
        let mut blocks = Vec::with_capacity(cfg.k);
        for (i, w) in cfg.decoder_widths().into_iter().enumerate() {
            blocks.push(ConvParams::register(store, &format!("{prefix}.block{i}"), 3, cin, w, 1)?);
            cin = w;
        }
        let out = ConvParams::register(store, &format!("{prefix}.out"), 3, cin, cfg.c, 1)?;
        Ok(Self { blocks, out, d_in: cfg.d_t })
    }

    /// `tokens`: `[g * g, d_t]` (or already `[g, g, d_t]`).
    pub fn apply<T: Real>(&self, g: &mut Graph<'_, T>, tokens: Var, side: usize) -> Result<Var> {
        if g.value(tokens).len() != side * side * self.d_in {
            return Err(Error::DimMismatch(format!(
                "decoder expects {side}x{side}x{} features, got {:?}",
                self.d_in,
                g.shape(tokens)
            )));
        }
        let mut x = g.reshape(tokens, &[side, side, self.d_in])?;
        for b in &self.blocks {
            x = conv_upsample_block(g, x, b, true)?;
        }
        Ok(self.out.apply(g, x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pos_embed_origin_and_separability() {
        let d = 16;
        let pe = pos_embed_2d(5, 7, d).unwrap();
        assert_eq!(pe.len(), 35 * d);
        for (i, v) in pe[..d].iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        let row = |x: usize, y: usize| &pe[(y * 7 + x) * d..(y * 7 + x + 1) * d];
        assert_eq!(&row(2, 3)[d / 2..], &row(6, 3)[d / 2..]);
        assert_eq!(&row(4, 1)[..d / 2], &row(4, 4)[..d / 2]);
        assert!(matches!(pos_embed_2d(2, 2, 6), Err(Error::BadDim(6))));
        assert!(matches!(pos_embed_2d(2, 2, 0), Err(Error::BadDim(0))));
    }
}
