//! Interchangeable heads that turn encoder features into the model output.

use diffcore::{ConvParams, Graph, LinearParams, ParamStore, Real, Var};

use super::blocks::{Correlator, Decoder, ForwardOptions};
use super::config::{ModelConfig, FULL, GLOBAL_ONLY, LOCAL_CONCAT, REGRESSION};
use crate::error::{Error, Result};
use crate::loss::OutputKind;

/// Intermediate nodes a head may expose for inspection.
#[derive(Default)]
pub struct Trace {
    /// Per layer, per head attention weights (object token first).
    pub attention: Vec<Vec<Var>>,
    /// Patch tokens handed to the decoder.
    pub tokens: Option<Var>,
}

pub trait VariantHead<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn output_kind(&self) -> OutputKind {
        OutputKind::Heatmap
    }

    /// `bg`: `[g, g, d_enc]` feature grid; `obj`: `[d_enc]` pooled object feature.
    fn forward(&self, g: &mut Graph<'_, T>, bg: Var, obj: Var, opts: &ForwardOptions, trace: &mut Trace) -> Result<Var>;

    fn correlator(&self) -> Option<&Correlator> {
        None
    }
}

pub struct FullHead {
    pub correlator: Correlator,
    pub decoder: Decoder,
    side: usize,
}

impl<T: Real> VariantHead<T> for FullHead {
    fn name(&self) -> &'static str {
        FULL
    }

    fn forward(&self, g: &mut Graph<'_, T>, bg: Var, obj: Var, opts: &ForwardOptions, trace: &mut Trace) -> Result<Var> {
        let c = self.correlator.apply(g, bg, obj, opts)?;
        trace.attention = c.attention;
        trace.tokens = Some(c.tokens);
        self.decoder.apply(g, c.tokens, self.side)
    }

    fn correlator(&self) -> Option<&Correlator> {
        Some(&self.correlator)
    }
}

/// The object vector is appended to every background cell, then fused by a 1x1 conv.
pub struct LocalConcatHead {
    fuse: ConvParams,
    decoder: Decoder,
    side: usize,
}

impl<T: Real> VariantHead<T> for LocalConcatHead {
    fn name(&self) -> &'static str {
        LOCAL_CONCAT
    }

    fn forward(&self, g: &mut Graph<'_, T>, bg: Var, obj: Var, _: &ForwardOptions, trace: &mut Trace) -> Result<Var> {
        let d = g.shape(obj)[0];
        let n = self.side * self.side;
        let o = g.repeat_rows(obj, n)?;
        let o = g.reshape(o, &[self.side, self.side, d])?;
        let x = g.concat(&[bg, o], 2)?;
        let x = self.fuse.apply(g, x)?;
        trace.tokens = Some(x);
        self.decoder.apply(g, x, self.side)
    }
}

/// Pooled background and object vectors, broadcast over the token grid.
pub struct GlobalOnlyHead {
    fuse: ConvParams,
    decoder: Decoder,
    side: usize,
}

impl<T: Real> VariantHead<T> for GlobalOnlyHead {
    fn name(&self) -> &'static str {
        GLOBAL_ONLY
    }

    fn forward(&self, g: &mut Graph<'_, T>, bg: Var, obj: Var, _: &ForwardOptions, trace: &mut Trace) -> Result<Var> {
        let pooled = g.global_avg_pool(bg)?;
        let v = g.concat(&[pooled, obj], 0)?;
        let d = g.shape(v)[0];
        let v = g.repeat_rows(v, self.side * self.side)?;
        let v = g.reshape(v, &[self.side, self.side, d])?;
        let x = self.fuse.apply(g, v)?;
        trace.tokens = Some(x);
        self.decoder.apply(g, x, self.side)
    }
}

/// Two-layer MLP on the concatenated global features; sigmoid outputs
/// `(cx / w, cy / h, s, reserved)`.
pub struct RegressionHead {
    fc1: LinearParams,
    fc2: LinearParams,
}

impl<T: Real> VariantHead<T> for RegressionHead {
    fn name(&self) -> &'static str {
        REGRESSION
    }

    fn output_kind(&self) -> OutputKind {
        OutputKind::Box
    }

    fn forward(&self, g: &mut Graph<'_, T>, bg: Var, obj: Var, _: &ForwardOptions, _: &mut Trace) -> Result<Var> {
        let pooled = g.global_avg_pool(bg)?;
        let v = g.concat(&[pooled, obj], 0)?;
        let h = self.fc1.apply(g, v)?;
        let h = g.gelu(h);
        let o = self.fc2.apply(g, h)?;
        Ok(g.sigmoid(o))
    }
}

pub type VariantFactory<T> = fn(&mut ParamStore<T>, &ModelConfig) -> Result<Box<dyn VariantHead<T>>>;

/// Name → constructor table for model heads. Constructors register their
/// parameters under the `head.` prefix.
pub struct VariantRegistry<T: Real> {
    entries: Vec<(&'static str, VariantFactory<T>)>,
}

impl<T: Real> Default for VariantRegistry<T> {
    fn default() -> Self {
        let mut r = Self { entries: Vec::new() };
        r.register(FULL, |s, cfg| {
            Ok(Box::new(FullHead {
                correlator: Correlator::register(s, "head.correlate", cfg)?,
                decoder: Decoder::register(s, "head.decoder", cfg)?,
                side: cfg.grid_side(),
            }))
        });
        r.register(LOCAL_CONCAT, |s, cfg| {
            Ok(Box::new(LocalConcatHead {
                fuse: ConvParams::register(s, "head.fuse", 1, 2 * cfg.d_enc, cfg.d_t, 1)?,
                decoder: Decoder::register(s, "head.decoder", cfg)?,
                side: cfg.grid_side(),
            }))
        });
        r.register(GLOBAL_ONLY, |s, cfg| {
            Ok(Box::new(GlobalOnlyHead {
                fuse: ConvParams::register(s, "head.fuse", 1, 2 * cfg.d_enc, cfg.d_t, 1)?,
                decoder: Decoder::register(s, "head.decoder", cfg)?,
                side: cfg.grid_side(),
            }))
        });
        r.register(REGRESSION, |s, cfg| {
            Ok(Box::new(RegressionHead {
                fc1: LinearParams::register(s, "head.fc1", 2 * cfg.d_enc, cfg.regression_hidden, true)?,
                fc2: LinearParams::register(s, "head.fc2", cfg.regression_hidden, 4, true)?,
            }))
        });
        r
    }
}

impl<T: Real> VariantRegistry<T> {
    /// Adds or replaces an entry.
    pub fn register(&mut self, name: &'static str, f: VariantFactory<T>) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, f));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn build(&self, store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Box<dyn VariantHead<T>>> {
        let f = self.entries.iter().find(|(n, _)| *n == cfg.variant).map(|(_, f)| f).ok_or_else(|| {
            Error::UnknownStrategy { kind: "model variant", name: cfg.variant.clone(), known: self.names().join(", ") }
        })?;
        f(store, cfg)
    }
}
