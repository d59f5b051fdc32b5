//! Evaluation protocols: top-k IOU, normalized score at the ground truth
//! with the scale fixed, scale error with the location fixed, and agreement
//! with the synthetic oracle.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_from_index, clipped_iou, scale_of_box, GridIndex, PlacementBox};
use crate::heatmap::Heatmap3D;
use crate::loss::GroundTruth;
use crate::synthworld::{oracle_plausibility, Scene};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.95, 0.9, 0.75];

/// Keys like `">0.95"`; kept as strings so the JSON stays readable.
pub type ThresholdMap = BTreeMap<String, f64>;

pub fn threshold_key(t: f64) -> String {
    format!(">{t}")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleError {
    #[default]
    Absolute,
    Squared,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    /// Fraction of samples whose best top-k IOU exceeds 0.5.
    pub frac_iou_gt_05: f64,
    pub mean_iou: f64,
    /// Normalized score at the ground truth, scale fixed to the ground truth channel.
    pub ns_mean: f64,
    pub ns_frac: ThresholdMap,
    /// Samples excluded from NS because their slice was constant.
    pub ns_degenerate: usize,
    /// IOU with the location fixed to the ground truth.
    pub scale_iou_frac: ThresholdMap,
    pub scale_mean_err: f64,
    pub oracle_top1_hit: f64,
    pub oracle_top5_hit: f64,
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn frac_above(v: &[f64], t: f64) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().filter(|&&x| x > t).count() as f64 / v.len() as f64
    }
}

/// Best clipped IOU between the ground truth and each of the `k` best boxes.
pub fn best_topk_iou(h: &Heatmap3D, gt: &GroundTruth, k: usize, aspect: f64) -> f64 {
    best_box_iou(h.top_k_boxes(k, aspect).iter().map(|(b, _)| b), &gt.bbox, h)
}

fn best_box_iou<'a>(boxes: impl Iterator<Item = &'a PlacementBox>, gt: &PlacementBox, h: &Heatmap3D) -> f64 {
    boxes.map(|b| clipped_iou(b, gt, h.dims())).fold(0.0, f64::max)
}

/// `(fraction with IOU > 0.5, mean IOU)` over samples.
pub fn topk_iou_stats(heatmaps: &[Heatmap3D], gts: &[GroundTruth], k: usize, aspects: &[f64]) -> Result<(f64, f64)> {
    check_len("heatmaps vs ground truths", heatmaps.len(), gts.len())?;
    check_len("heatmaps vs aspects", heatmaps.len(), aspects.len())?;
    let ious: Vec<f64> =
        heatmaps.iter().zip(gts).zip(aspects).map(|((h, g), &a)| best_topk_iou(h, g, k, a)).collect();
    Ok((frac_above(&ious, 0.5), mean(&ious)))
}

/// Same statistics for predictors that emit boxes directly.
pub fn box_iou_stats(preds: &[Vec<PlacementBox>], gts: &[GroundTruth], dims: crate::geometry::ImageDims) -> Result<(f64, f64)> {
    check_len("predictions vs ground truths", preds.len(), gts.len())?;
    let ious: Vec<f64> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| p.iter().map(|b| clipped_iou(b, &g.bbox, dims)).fold(0.0, f64::max))
        .collect();
    Ok((frac_above(&ious, 0.5), mean(&ious)))
}

/// Normalized score at the ground truth within its scale slice.
pub fn ns_at_gt(h: &Heatmap3D, gt: &GroundTruth) -> Result<f64> {
    Ok(h.slice_fixed_scale(gt.idx.z)?.at(gt.idx.x, gt.idx.y))
}

/// Normalized score at the ground truth over the whole volume.
pub fn ns_at_gt_3d(h: &Heatmap3D, gt: &GroundTruth) -> Result<f64> {
    Ok(h.normalize()?.at(gt.idx))
}

pub struct NsStats {
    pub mean: f64,
    pub frac: ThresholdMap,
    pub degenerate: usize,
    pub per_sample: Vec<Option<f64>>,
}

pub fn ns_location_stats(heatmaps: &[Heatmap3D], gts: &[GroundTruth], thresholds: &[f64]) -> Result<NsStats> {
    check_len("heatmaps vs ground truths", heatmaps.len(), gts.len())?;
    let mut per_sample = Vec::with_capacity(heatmaps.len());
    for (h, g) in heatmaps.iter().zip(gts) {
        match ns_at_gt(h, g) {
            Ok(v) => per_sample.push(Some(v)),
            Err(Error::DegenerateHeatmap) => per_sample.push(None),
            Err(e) => return Err(e),
        }
    }
    let vals: Vec<f64> = per_sample.iter().flatten().copied().collect();
    Ok(NsStats {
        mean: mean(&vals),
        frac: thresholds.iter().map(|&t| (threshold_key(t), frac_above(&vals, t))).collect(),
        degenerate: per_sample.len() - vals.len(),
        per_sample,
    })
}

pub struct ScaleStats {
    pub iou_frac: ThresholdMap,
    pub mean_err: f64,
    pub ious: Vec<f64>,
    pub errors: Vec<f64>,
}

fn scale_error(pred: f64, truth: f64, kind: ScaleError) -> f64 {
    match kind {
        ScaleError::Absolute => (pred - truth).abs(),
        ScaleError::Squared => (pred - truth) * (pred - truth),
    }
}

/// Location fixed to the ground truth; the scale is the best channel there.
pub fn scale_given_location(
    heatmaps: &[Heatmap3D],
    gts: &[GroundTruth],
    aspects: &[f64],
    thresholds: &[f64],
    kind: ScaleError,
) -> Result<ScaleStats> {
    check_len("heatmaps vs ground truths", heatmaps.len(), gts.len())?;
    check_len("heatmaps vs aspects", heatmaps.len(), aspects.len())?;
    let mut ious = Vec::with_capacity(heatmaps.len());
    let mut errors = Vec::with_capacity(heatmaps.len());
    for ((h, g), &a) in heatmaps.iter().zip(gts).zip(aspects) {
        let (_, z) = h.slice_fixed_location(g.idx.x, g.idx.y)?;
        let b = box_from_index(GridIndex::new(g.idx.x, g.idx.y, z), h.grid(), h.dims(), a);
        ious.push(clipped_iou(&b, &g.bbox, h.dims()));
        errors.push(scale_error(h.grid().value(z), scale_of_box(&g.bbox, h.dims()), kind));
    }
    Ok(ScaleStats {
        iou_frac: thresholds.iter().map(|&t| (threshold_key(t), frac_above(&ious, t))).collect(),
        mean_err: mean(&errors),
        ious,
        errors,
    })
}

/// Scale error of the unconstrained protocol: the scale of the global argmax.
pub fn unconstrained_scale_error(h: &Heatmap3D, gt: &GroundTruth, kind: ScaleError) -> f64 {
    scale_error(h.grid().value(h.argmax().z), scale_of_box(&gt.bbox, h.dims()), kind)
}

/// `(top-1 hit rate, top-k hit rate)` against the scenes' oracle.
pub fn oracle_agreement(heatmaps: &[Heatmap3D], scenes: &[Scene], k: usize) -> Result<(f64, f64)> {
    check_len("heatmaps vs scenes", heatmaps.len(), scenes.len())?;
    if heatmaps.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut top1 = 0;
    let mut topk = 0;
    for (h, s) in heatmaps.iter().zip(scenes) {
        let boxes = h.top_k_boxes(k, s.aspect());
        if oracle_plausibility(s, &boxes[0].0) {
            top1 += 1;
        }
        if boxes.iter().any(|(b, _)| oracle_plausibility(s, b)) {
            topk += 1;
        }
    }
    let n = heatmaps.len() as f64;
    Ok((top1 as f64 / n, topk as f64 / n))
}

/// Oracle hit rate for predictors that emit boxes directly.
pub fn box_oracle_agreement(preds: &[Vec<PlacementBox>], scenes: &[Scene]) -> Result<f64> {
    check_len("predictions vs scenes", preds.len(), scenes.len())?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().zip(scenes).filter(|(p, s)| p.iter().any(|b| oracle_plausibility(s, b))).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// All heatmap protocols over aligned heatmaps and scenes.
pub fn evaluate_heatmaps(heatmaps: &[Heatmap3D], scenes: &[Scene], kind: ScaleError) -> Result<EvalReport> {
    check_len("heatmaps vs scenes", heatmaps.len(), scenes.len())?;
    let gts: Vec<GroundTruth> = scenes.iter().map(|s| s.gt).collect();
    let aspects: Vec<f64> = scenes.iter().map(|s| s.aspect()).collect();
    let (frac_iou_gt_05, mean_iou) = topk_iou_stats(heatmaps, &gts, 5, &aspects)?;
    let ns = ns_location_stats(heatmaps, &gts, &DEFAULT_THRESHOLDS)?;
    let sc = scale_given_location(heatmaps, &gts, &aspects, &DEFAULT_THRESHOLDS, kind)?;
    let (oracle_top1_hit, oracle_top5_hit) = oracle_agreement(heatmaps, scenes, 5)?;
    Ok(EvalReport {
        n_samples: heatmaps.len(),
        frac_iou_gt_05,
        mean_iou,
        ns_mean: ns.mean,
        ns_frac: ns.frac,
        ns_degenerate: ns.degenerate,
        scale_iou_frac: sc.iou_frac,
        scale_mean_err: sc.mean_err,
        oracle_top1_hit,
        oracle_top5_hit,
    })
}

/// Box-only report: the location/scale protocols do not apply and stay zero.
pub fn evaluate_boxes(preds: &[Vec<PlacementBox>], scenes: &[Scene]) -> Result<EvalReport> {
    let gts: Vec<GroundTruth> = scenes.iter().map(|s| s.gt).collect();
    let dims = scenes.first().map(|s| s.dims()).unwrap_or(crate::geometry::ImageDims { width: 8, height: 8 });
    let (frac_iou_gt_05, mean_iou) = box_iou_stats(preds, &gts, dims)?;
    let hit = box_oracle_agreement(preds, scenes)?;
    Ok(EvalReport {
        n_samples: preds.len(),
        frac_iou_gt_05,
        mean_iou,
        oracle_top1_hit: hit,
        oracle_top5_hit: hit,
        ..EvalReport::default()
    })
}

impl EvalReport {
    /// Plain-text tables in the layout of the usual placement benchmarks.
    pub fn render_table(&self, title: &str) -> String {
        let pct = |v: f64| format!("{:6.2}", 100.0 * v);
        let get = |m: &ThresholdMap, t: f64| m.get(&threshold_key(t)).copied().unwrap_or(0.0);
        let mut s = String::new();
        s.push_str(&format!("{title} ({} samples)\n\n", self.n_samples));
        s.push_str("Top-5 placement          IOU>0.5 | Mean IOU\n");
        s.push_str(&format!("                          {} |  {:.3}\n\n", pct(self.frac_iou_gt_05), self.mean_iou));
        s.push_str("Location given scale     NS>0.95 |  NS>0.9 | NS>0.75 | Mean NS\n");
        s.push_str(&format!(
            "                          {} |  {} |  {} |  {:.3}\n",
            pct(get(&self.ns_frac, 0.95)),
            pct(get(&self.ns_frac, 0.9)),
            pct(get(&self.ns_frac, 0.75)),
            self.ns_mean
        ));
        if self.ns_degenerate > 0 {
            s.push_str(&format!("  ({} constant slices excluded)\n", self.ns_degenerate));
        }
        s.push('\n');
        s.push_str("Scale given location    IOU>0.95 | IOU>0.9 | IOU>0.75 | Mean Error\n");
        s.push_str(&format!(
            "                          {} |  {} |   {} |  {:.4}\n\n",
            pct(get(&self.scale_iou_frac, 0.95)),
            pct(get(&self.scale_iou_frac, 0.9)),
            pct(get(&self.scale_iou_frac, 0.75)),
            self.scale_mean_err
        ));
        s.push_str("Oracle agreement          top-1 | top-5\n");
        s.push_str(&format!("                          {} | {}\n", pct(self.oracle_top1_hit), pct(self.oracle_top5_hit)));
        s
    }
}
