//! The placement network: two convolutional encoders and an exchangeable
//! head (transformer correlation + upsampling decoder by default).

mod blocks;
mod config;
mod variants;

use std::sync::atomic::{AtomicUsize, Ordering};

use diffcore::{Graph, ParamStore, Real, Tensor, Var};

pub use blocks::{
    pos_embed_2d, CorrelateOutput, Correlator, Decoder, Encoder, ForwardOptions, LayerOutput, TransformerLayer,
};
pub use config::{ModelConfig, FULL, GLOBAL_ONLY, LOCAL_CONCAT, REGRESSION};
pub use variants::{FullHead, Trace, VariantFactory, VariantHead, VariantRegistry};

use crate::error::{Error, Result};
use crate::geometry::{ImageDims, PlacementBox, ScaleGrid};
use crate::heatmap::{Heatmap3D, Map2D};
use crate::image::RgbImage;
use crate::loss::OutputKind;

pub struct PlacementModel<T: Real> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    bg_encoder: Encoder,
    obj_encoder: Encoder,
    head: Box<dyn VariantHead<T>>,
    forwards: AtomicUsize,
}

pub struct ForwardOutput {
    /// `[h, w, c]` heatmap or `[4]` box parameters, per [`PlacementModel::output_kind`].
    pub output: Var,
    pub bg_features: Var,
    pub obj_feature: Var,
    pub trace: Trace,
}

impl<T: Real> PlacementModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_registry(cfg, seed, &VariantRegistry::default())
    }

    pub fn with_registry(cfg: ModelConfig, seed: u64, registry: &VariantRegistry<T>) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let bg_encoder = Encoder::register(&mut params, "bg_encoder", &cfg)?;
        let obj_encoder = Encoder::register(&mut params, "obj_encoder", &cfg)?;
        let head = registry.build(&mut params, &cfg)?;
        params.initialize(seed);
        Ok(Self { cfg, params, bg_encoder, obj_encoder, head, forwards: AtomicUsize::new(0) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn output_kind(&self) -> OutputKind {
        self.head.output_kind()
    }

    pub fn head(&self) -> &dyn VariantHead<T> {
        self.head.as_ref()
    }

    pub fn dims(&self) -> ImageDims {
        ImageDims { width: self.cfg.input_size, height: self.cfg.input_size }
    }

    /// Complete forward passes run since construction or the last reset.
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    pub fn prepare_background(&self, img: &RgbImage) -> Result<Tensor<T>> {
        let n = self.cfg.input_size;
        if img.width() != n || img.height() != n {
            return Err(Error::BadInputSize { got: (img.width(), img.height()), want: n });
        }
        Ok(img.to_tensor())
    }

    /// White-pads to a square and resizes to the network input.
    pub fn prepare_object(&self, img: &RgbImage) -> Result<Tensor<T>> {
        if img.is_empty() {
            return Err(Error::EmptyImage);
        }
        let n = self.cfg.input_size;
        Ok(img.pad_to_square().resize(n, n).to_tensor())
    }

    /// `[g, g, d_enc]` background feature grid.
    pub fn encode_background(&self, g: &mut Graph<'_, T>, bg: &Tensor<T>) -> Result<Var> {
        let x = g.constant(bg.clone());
        self.bg_encoder.apply(g, x)
    }

    /// `[d_enc]` pooled object feature.
    pub fn encode_object(&self, g: &mut Graph<'_, T>, obj: &Tensor<T>) -> Result<Var> {
        let x = g.constant(obj.clone());
        let f = self.obj_encoder.apply(g, x)?;
        Ok(g.global_avg_pool(f)?)
    }

    /// Records one full forward pass on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_, T>,
        bg: &Tensor<T>,
        obj: &Tensor<T>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let bg_features = self.encode_background(g, bg)?;
        let obj_feature = self.encode_object(g, obj)?;
        let mut trace = Trace::default();
        let output = self.head.forward(g, bg_features, obj_feature, opts, &mut trace)?;
        Ok(ForwardOutput { output, bg_features, obj_feature, trace })
    }

    pub fn graph(&self) -> Graph<'_, T> {
        Graph::new(&self.params)
    }

    /// Raw network output for one image pair.
    pub fn forward(&self, bg: &RgbImage, obj: &RgbImage) -> Result<Tensor<T>> {
        let (bt, ot) = (self.prepare_background(bg)?, self.prepare_object(obj)?);
        let mut g = self.graph();
        let out = self.forward_graph(&mut g, &bt, &ot, &ForwardOptions::default())?;
        Ok(g.value(out.output).clone())
    }

    /// Dense heatmap for one image pair; `grid` must have `c` entries.
    pub fn heatmap(&self, bg: &RgbImage, obj: &RgbImage, grid: &ScaleGrid) -> Result<Heatmap3D> {
        if self.output_kind() != OutputKind::Heatmap {
            return Err(Error::InvalidConfig(format!("variant `{}` does not emit a heatmap", self.cfg.variant)));
        }
        if grid.len() != self.cfg.c {
            return Err(Error::ShapeMismatch(format!("scale grid has {} values, model emits {}", grid.len(), self.cfg.c)));
        }
        let t = self.forward(bg, obj)?;
        Heatmap3D::new(self.dims(), grid.clone(), t.data().iter().map(|v| v.as_f64()).collect())
    }

    /// Box predicted by the regression head, at the object's aspect ratio.
    pub fn regression_forward(&self, bg: &RgbImage, obj: &RgbImage, aspect: f64) -> Result<PlacementBox> {
        if self.output_kind() != OutputKind::Box {
            return Err(Error::InvalidConfig(format!("variant `{}` does not emit a box", self.cfg.variant)));
        }
        let t = self.forward(bg, obj)?;
        Ok(box_from_regression(&t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>(), self.dims(), aspect))
    }

    /// Attention of the object token over the patch tokens at one layer and
    /// head, excluding its self-attention and renormalized to sum to one.
    pub fn attention_map(&self, bg: &RgbImage, obj: &RgbImage, layer: usize, head: usize) -> Result<Map2D> {
        if self.head.correlator().is_none() {
            return Err(Error::InvalidConfig(format!("variant `{}` has no attention", self.cfg.variant)));
        }
        if layer >= self.cfg.n_layers || head >= self.cfg.n_heads {
            return Err(Error::IndexOutOfRange(format!(
                "layer {layer} head {head} of {} layers x {} heads",
                self.cfg.n_layers, self.cfg.n_heads
            )));
        }
        let (bt, ot) = (self.prepare_background(bg)?, self.prepare_object(obj)?);
        let mut g = self.graph();
        let out = self.forward_graph(&mut g, &bt, &ot, &ForwardOptions::default())?;
        let probs = g.value(out.trace.attention[layer][head]);
        Ok(object_attention_row(probs, self.cfg.grid_side()))
    }
}

/// Row 0 of an `[n, n]` weight matrix without its first entry, renormalized
/// and laid out on the `side x side` grid.
pub fn object_attention_row<T: Real>(probs: &Tensor<T>, side: usize) -> Map2D {
    let n = probs.shape()[1];
    let row: Vec<f64> = probs.data()[1..n].iter().map(|v| v.as_f64()).collect();
    let total: f64 = row.iter().sum();
    let data = if total > 0.0 { row.iter().map(|v| v / total).collect() } else { vec![1.0 / row.len() as f64; row.len()] };
    Map2D { width: side, height: side, data }
}

/// Decodes `(cx / w, cy / h, s, _)` into a box of the given aspect.
pub fn box_from_regression(out: &[f64], dims: ImageDims, aspect: f64) -> PlacementBox {
    let (cx, cy) = (out[0] * dims.width as f64, out[1] * dims.height as f64);
    let s = out[2].max(1e-6);
    let area = s * s * dims.area();
    let (w, h) = ((area * aspect).sqrt(), (area / aspect).sqrt());
    PlacementBox { left: cx - w / 2.0, top: cy - h / 2.0, width: w, height: h }
}
