//! Optimization loop: AdamW with decoupled weight decay, cosine schedule,
//! stateless batch sampling and bit-exact checkpoints.

use std::path::Path;

use diffcore::params::{read_f32s, write_f32s};
use diffcore::{ManifestEntry, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalsuite::{evaluate_boxes, evaluate_heatmaps, EvalReport, ScaleError};
use crate::geometry::ScaleGrid;
use crate::heatmap::Heatmap3D;
use crate::loss::{LossConfig, Objective, ObjectiveRegistry, Target};
use crate::model::{box_from_regression, ForwardOptions, ModelConfig, PlacementModel};
use crate::synthworld::Scene;
use crate::loss::OutputKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    /// Steps between progress records; 0 disables them.
    pub eval_every: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            base_lr: 3e-4,
            weight_decay: 0.03,
            total_steps: 2000,
            eval_every: 100,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || self.total_steps == 0 || self.batch_size == 0 || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "train config needs base_lr > 0, total_steps >= 1, batch_size >= 1, weight_decay >= 0: {self:?}"
            )));
        }
        self.loss.validate()
    }
}

/// `base · ½(1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    let t = step.min(total_steps) as f64 / total_steps.max(1) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Scene indices for one step. Each epoch visits every scene once in an
/// order fixed by `(seed, epoch)`, so any step can be recomputed without state.
pub fn batch_indices(seed: u64, step: usize, batch_size: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for p in step * batch_size..(step + 1) * batch_size {
        let epoch = p / n;
        if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[p % n]);
    }
    out
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adaptive moments with bias correction and decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    /// Updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &diffcore::ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    /// `p ← p·(1 − lr·wd)`, then the bias-corrected moment step.
    pub fn step(&mut self, params: &mut diffcore::ParamStore<f32>, grads: &[Tensor<f32>], lr: f64, wd: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let decay = (1.0 - lr * wd) as f32;
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = ADAM_EPS as f32;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in
                p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *w *= decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Mean loss and mean parameter gradient over a batch. Samples run in
/// parallel; gradients are summed in batch order.
pub fn batch_gradients(
    model: &PlacementModel<f32>,
    objective: &dyn Objective<f32>,
    batch: &[&Scene],
    step: usize,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    if objective.output_kind() != model.output_kind() {
        return Err(Error::InvalidConfig(format!(
            "loss `{}` does not fit model variant `{}`",
            objective.name(),
            model.config().variant
        )));
    }
    let per_sample: Vec<Result<(f64, Vec<Option<Tensor<f32>>>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let bg = model.prepare_background(&scene.bg)?;
            let obj = model.prepare_object(&scene.obj)?;
            let mut g = model.graph();
            let out = model.forward_graph(&mut g, &bg, &obj, &ForwardOptions::default())?;
            let target = Target { gt: &scene.gt, dims: scene.dims(), c: model.config().c };
            let loss = objective.loss(&mut g, out.output, &target)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step, sample: i, value });
            }
            Ok((value, g.backward(loss)?.into_param_grads()))
        })
        .collect();
    let mut total = 0.0;
    let mut sum: Vec<Tensor<f32>> = model.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    for r in per_sample {
        let (l, grads) = r?;
        total += l;
        for (acc, g) in sum.iter_mut().zip(grads) {
            if let Some(g) = g {
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b);
            }
        }
    }
    let inv = 1.0 / batch.len() as f32;
    for t in &mut sum {
        t.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok((total / batch.len() as f64, sum))
}

/// One optimization step on `batch` at learning rate `lr`; returns the mean loss.
pub fn train_step(
    model: &mut PlacementModel<f32>,
    opt: &mut AdamW,
    objective: &dyn Objective<f32>,
    batch: &[&Scene],
    lr: f64,
    weight_decay: f64,
    step: usize,
) -> Result<f64> {
    let (loss, grads) = batch_gradients(model, objective, batch, step)?;
    opt.step(model.params_mut(), &grads, lr, weight_decay);
    Ok(loss)
}

/// Heatmaps for every scene (heatmap variants only).
pub fn predict_heatmaps(model: &PlacementModel<f32>, scenes: &[Scene], grid: &ScaleGrid) -> Result<Vec<Heatmap3D>> {
    scenes.par_iter().map(|s| model.heatmap(&s.bg, &s.obj, grid)).collect()
}

/// One forward per scene, then every applicable protocol.
pub fn evaluate_model(model: &PlacementModel<f32>, scenes: &[Scene], kind: ScaleError) -> Result<EvalReport> {
    match model.output_kind() {
        OutputKind::Heatmap => {
            let grid = scenes.first().map(|s| s.grid().clone()).unwrap_or_default();
            let hs = predict_heatmaps(model, scenes, &grid)?;
            evaluate_heatmaps(&hs, scenes, kind)
        }
        OutputKind::Box => {
            let preds = scenes
                .par_iter()
                .map(|s| model.regression_forward(&s.bg, &s.obj, s.aspect()).map(|b| vec![b]))
                .collect::<Result<Vec<_>>>()?;
            evaluate_boxes(&preds, scenes)
        }
    }
}

/// Raw regression outputs decoded into boxes.
pub fn regression_boxes(model: &PlacementModel<f32>, scenes: &[Scene]) -> Result<Vec<crate::geometry::PlacementBox>> {
    scenes
        .par_iter()
        .map(|s| {
            let t = model.forward(&s.bg, &s.obj)?;
            let v: Vec<f64> = t.data().iter().map(|&x| x as f64).collect();
            Ok(box_from_regression(&v, s.dims(), s.aspect()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub step: usize,
    pub lr: f64,
    /// Mean training loss since the previous record.
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<EvalReport>,
}

/// Model and train configuration stored with a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Model plus optimizer state at a step boundary.
pub struct Trainer {
    pub model: PlacementModel<f32>,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    /// Next step to run.
    pub step: usize,
    objective: Box<dyn Objective<f32>>,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = PlacementModel::new(model_cfg, cfg.seed)?;
        let opt = AdamW::new(model.params());
        Self::assemble(model, opt, cfg, 0)
    }

    fn assemble(model: PlacementModel<f32>, opt: AdamW, cfg: TrainConfig, step: usize) -> Result<Self> {
        let objective = ObjectiveRegistry::default().create(&cfg.loss, model.dims())?;
        if objective.output_kind() != model.output_kind() {
            return Err(Error::InvalidConfig(format!(
                "loss `{}` does not fit model variant `{}`",
                cfg.loss.kind,
                model.config().variant
            )));
        }
        Ok(Self { model, opt, cfg, step, objective })
    }

    pub fn snapshot(&self) -> ConfigSnapshot {
        ConfigSnapshot { model: self.model.config().clone(), train: self.cfg.clone() }
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.step, self.cfg.total_steps, self.cfg.base_lr)
    }

    /// Runs the next step on the batch the sampler assigns to it.
    pub fn step_once(&mut self, scenes: &[Scene]) -> Result<f64> {
        if scenes.is_empty() {
            return Err(Error::InvalidConfig("no training scenes".into()));
        }
        let idx = batch_indices(self.cfg.seed, self.step, self.cfg.batch_size, scenes.len());
        let batch: Vec<&Scene> = idx.iter().map(|&i| &scenes[i]).collect();
        let lr = self.lr();
        let loss =
            train_step(&mut self.model, &mut self.opt, self.objective.as_ref(), &batch, lr, self.cfg.weight_decay, self.step)?;
        self.step += 1;
        Ok(loss)
    }

    /// Trains until `until` (capped at `total_steps`), reporting every
    /// `eval_every` steps. Returns the per-step losses.
    pub fn run(
        &mut self,
        scenes: &[Scene],
        until: usize,
        eval: Option<&[Scene]>,
        progress: &mut dyn FnMut(&Progress),
    ) -> Result<Vec<f64>> {
        let until = until.min(self.cfg.total_steps);
        let mut losses = Vec::new();
        let mut window = Vec::new();
        while self.step < until {
            let lr = self.lr();
            let l = self.step_once(scenes)?;
            losses.push(l);
            window.push(l);
            let every = self.cfg.eval_every;
            if every > 0 && (self.step % every == 0 || self.step == until) {
                let metrics = match eval {
                    Some(e) if !e.is_empty() => Some(evaluate_model(&self.model, e, ScaleError::Absolute)?),
                    _ => None,
                };
                let loss = window.iter().sum::<f64>() / window.len() as f64;
                progress(&Progress { step: self.step, lr, loss, metrics });
                window.clear();
            }
        }
        Ok(losses)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config: self.snapshot(),
            params: self.model.params().clone(),
            opt: self.opt.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut model = PlacementModel::new(ck.config.model.clone(), ck.config.train.seed)?;
        *model.params_mut() = ck.params;
        Self::assemble(model, ck.opt, ck.config.train, ck.step)
    }
}

/// Everything needed to continue a run exactly.
pub struct Checkpoint {
    pub step: usize,
    pub config: ConfigSnapshot,
    pub params: diffcore::ParamStore<f32>,
    pub opt: AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    next_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    format: u32,
    step: usize,
    config: ConfigSnapshot,
    /// Batch order is a pure function of the seed and step.
    rng: RngState,
    adam_t: u64,
    params: Vec<ManifestEntry>,
    /// Offsets (in f32 elements) of the first and second moment sections.
    moments_offset: [usize; 2],
    blob_sha256: String,
}

pub const CHECKPOINT_FORMAT: u32 = 1;
const MANIFEST_FILE: &str = "checkpoint.json";
const BLOB_FILE: &str = "checkpoint.bin";

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut blob = self.params.to_blob();
        let n = self.params.num_scalars();
        for t in self.opt.m.iter().chain(&self.opt.v) {
            write_f32s(&mut blob, t.data());
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT,
            step: self.step,
            config: self.config.clone(),
            rng: RngState { seed: self.config.train.seed, next_step: self.step },
            adam_t: self.opt.t,
            params: self.params.manifest(),
            moments_offset: [n, 2 * n],
            blob_sha256: hex::encode(Sha256::digest(&blob)),
        };
        std::fs::write(dir.join(BLOB_FILE), &blob)?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads and verifies a checkpoint. With `expected`, the stored
    /// configuration must match it exactly.
    pub fn load(dir: &Path, expected: Option<&ConfigSnapshot>) -> Result<Self> {
        let corrupt = |m: String| Error::CorruptCheckpoint(m);
        let mbytes = std::fs::read(dir.join(MANIFEST_FILE)).map_err(|e| corrupt(format!("{MANIFEST_FILE}: {e}")))?;
        let manifest: CheckpointManifest =
            serde_json::from_slice(&mbytes).map_err(|e| corrupt(format!("{MANIFEST_FILE}: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(corrupt(format!("unsupported format {}", manifest.format)));
        }
        let blob = std::fs::read(dir.join(BLOB_FILE)).map_err(|e| corrupt(format!("{BLOB_FILE}: {e}")))?;
        if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
            return Err(corrupt("blob hash does not match manifest".into()));
        }
        if let Some(want) = expected {
            if *want != manifest.config {
                return Err(corrupt("stored configuration differs from the requested one".into()));
            }
        }
        let mut model = PlacementModel::<f32>::new(manifest.config.model.clone(), manifest.config.train.seed)
            .map_err(|e| corrupt(format!("stored model config: {e}")))?;
        let params = model.params_mut();
        let n = params.num_scalars();
        if blob.len() != 3 * n * 4 || manifest.moments_offset != [n, 2 * n] {
            return Err(corrupt(format!("blob holds {} bytes, expected {}", blob.len(), 3 * n * 4)));
        }
        params.load_blob(&manifest.params, &blob[..n * 4]).map_err(|e| corrupt(e.to_string()))?;
        let mut opt = AdamW::new(params);
        opt.t = manifest.adam_t;
        for (section, tensors) in [(n, &mut opt.m), (2 * n, &mut opt.v)] {
            for (e, t) in manifest.params.iter().zip(tensors.iter_mut()) {
                let vals = read_f32s(&blob, section + e.offset, t.len())
                    .ok_or_else(|| corrupt(format!("moment data for `{}` truncated", e.name)))?;
                t.data_mut().copy_from_slice(&vals);
            }
        }
        let params = model.params().clone();
        Ok(Self { step: manifest.step, config: manifest.config, params, opt })
    }
}

/// Model weights from a checkpoint directory, ready for inference.
pub fn load_model(dir: &Path) -> Result<PlacementModel<f32>> {
    let ck = Checkpoint::load(dir, None)?;
    let mut model = PlacementModel::new(ck.config.model.clone(), ck.config.train.seed)?;
    *model.params_mut() = ck.params;
    Ok(model)
}
