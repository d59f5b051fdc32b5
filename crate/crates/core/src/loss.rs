//! Training objectives over a predicted heatmap (or box) node.
//!
//! Objectives are looked up by name in an [`ObjectiveRegistry`], so the
//! trainer and CLI can switch between them from configuration.

use diffcore::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{index_from_box, scale_of_box, GridIndex, ImageDims, PlacementBox, ScaleGrid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginSpec {
    pub radius_x: usize,
    pub radius_y: usize,
    pub radius_z: usize,
    pub margin: f64,
}

/// Neighbourhood radius of 20 cells at 224 px, scaled with resolution.
pub fn default_radius_xy(height: usize) -> usize {
    (20.0 * height as f64 / 224.0).round() as usize
}

pub const DEFAULT_RADIUS_Z: usize = 2;
pub const DEFAULT_MARGIN: f64 = 0.1;

impl MarginSpec {
    pub fn for_dims(dims: ImageDims) -> Self {
        let r = default_radius_xy(dims.height);
        Self { radius_x: r, radius_y: r, radius_z: DEFAULT_RADIUS_Z, margin: DEFAULT_MARGIN }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub idx: GridIndex,
    #[serde(rename = "box")]
    pub bbox: PlacementBox,
}

impl GroundTruth {
    pub fn from_box(bbox: PlacementBox, grid: &ScaleGrid, dims: ImageDims) -> Self {
        Self { idx: index_from_box(&bbox, grid, dims), bbox }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    /// The literal objective; trains a far sharper plausible band than `Mean`.
    #[default]
    Sum,
}

/// The `loss` section of a run config. Unset radii and sigmas follow the
/// image resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: String,
    pub reduction: Reduction,
    pub margin: f64,
    pub radius_x: Option<usize>,
    pub radius_y: Option<usize>,
    pub radius_z: usize,
    pub sigma_xy: Option<f64>,
    pub sigma_z: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: SPARSE_CONTRASTIVE.into(),
            reduction: Reduction::Sum,
            margin: DEFAULT_MARGIN,
            radius_x: None,
            radius_y: None,
            radius_z: DEFAULT_RADIUS_Z,
            sigma_xy: None,
            sigma_z: 2.0,
        }
    }
}

impl LossConfig {
    pub fn margin_spec(&self, dims: ImageDims) -> MarginSpec {
        let base = MarginSpec::for_dims(dims);
        MarginSpec {
            radius_x: self.radius_x.unwrap_or(base.radius_x),
            radius_y: self.radius_y.unwrap_or(base.radius_y),
            radius_z: self.radius_z,
            margin: self.margin,
        }
    }

    pub fn sigmas(&self, dims: ImageDims) -> (f64, f64) {
        let xy = self.sigma_xy.unwrap_or_else(|| self.margin_spec(dims).radius_y.max(1) as f64);
        (xy, self.sigma_z)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::InvalidConfig(format!("loss.margin must be >= 0, got {}", self.margin)));
        }
        if self.sigma_xy.is_some_and(|s| !(s > 0.0)) || !(self.sigma_z > 0.0) {
            return Err(Error::InvalidConfig("loss sigmas must be positive".into()));
        }
        Ok(())
    }
}

/// Zero inside the box neighbourhood of the ground truth, `margin` elsewhere.
pub fn margin_matrix(gt: &GroundTruth, dims: ImageDims, c: usize, spec: &MarginSpec) -> Vec<f64> {
    let g = gt.idx;
    let mut m = vec![spec.margin; dims.width * dims.height * c];
    for y in g.y.saturating_sub(spec.radius_y)..(g.y + spec.radius_y + 1).min(dims.height) {
        for x in g.x.saturating_sub(spec.radius_x)..(g.x + spec.radius_x + 1).min(dims.width) {
            for z in g.z.saturating_sub(spec.radius_z)..(g.z + spec.radius_z + 1).min(c) {
                m[(y * dims.width + x) * c + z] = 0.0;
            }
        }
    }
    m
}

fn check_heatmap<T: Real>(g: &Graph<'_, T>, h: Var, dims: ImageDims, c: usize) -> Result<()> {
    let want = [dims.height, dims.width, c];
    if g.shape(h) != want {
        return Err(Error::ShapeMismatch(format!("heatmap node has shape {:?}, expected {want:?}", g.shape(h))));
    }
    Ok(())
}

fn reduce<T: Real>(g: &mut Graph<'_, T>, x: Var, r: Reduction) -> Var {
    match r {
        Reduction::Mean => g.mean(x),
        Reduction::Sum => g.sum(x),
    }
}

/// Hinge `max(0, H - H(gt) + M)` reduced over every cell.
pub fn sparse_contrastive<T: Real>(
    g: &mut Graph<'_, T>,
    h: Var,
    margin: &[f64],
    gt: &GroundTruth,
    dims: ImageDims,
    c: usize,
    reduction: Reduction,
) -> Result<Var> {
    check_heatmap(g, h, dims, c)?;
    if margin.len() != g.value(h).len() {
        return Err(Error::ShapeMismatch(format!(
            "margin has {} entries, heatmap {}",
            margin.len(),
            g.value(h).len()
        )));
    }
    let at_gt = g.pick(h, gt.idx.flat(dims, c))?;
    let diff = g.sub_scalar(h, at_gt)?;
    let m = g.constant(Tensor::new(&[dims.height, dims.width, c], margin.iter().map(|&v| T::lit(v)).collect())?);
    let shifted = g.add(diff, m)?;
    let hinge = g.relu(shifted);
    Ok(reduce(g, hinge, reduction))
}

/// `|1 - H(gt)| + |min H|`.
pub fn range_loss<T: Real>(g: &mut Graph<'_, T>, h: Var, gt: &GroundTruth, dims: ImageDims, c: usize) -> Result<Var> {
    check_heatmap(g, h, dims, c)?;
    let at_gt = g.pick(h, gt.idx.flat(dims, c))?;
    let top = g.offset(at_gt, -1.0);
    let top = g.abs(top);
    let lo = g.min_all(h)?;
    let lo = g.abs(lo);
    Ok(g.add(top, lo)?)
}

pub fn total_loss<T: Real>(
    g: &mut Graph<'_, T>,
    h: Var,
    margin: &[f64],
    gt: &GroundTruth,
    dims: ImageDims,
    c: usize,
    reduction: Reduction,
) -> Result<Var> {
    let con = sparse_contrastive(g, h, margin, gt, dims, c, reduction)?;
    let range = range_loss(g, h, gt, dims, c)?;
    Ok(g.add(con, range)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AssignmentKind {
    Binary,
    Gaussian { sigma_xy: f64, sigma_z: f64 },
}

/// `exp(-(dx² + dy²) / 2σ_xy² - dz² / 2σ_z²)` around the ground truth.
pub fn gaussian_target(gt: &GroundTruth, dims: ImageDims, c: usize, sigma_xy: f64, sigma_z: f64) -> Vec<f64> {
    let g = gt.idx;
    let mut out = Vec::with_capacity(dims.width * dims.height * c);
    for y in 0..dims.height {
        let dy = y as f64 - g.y as f64;
        for x in 0..dims.width {
            let dx = x as f64 - g.x as f64;
            for z in 0..c {
                let dz = z as f64 - g.z as f64;
                out.push((-(dx * dx + dy * dy) / (2.0 * sigma_xy * sigma_xy) - dz * dz / (2.0 * sigma_z * sigma_z)).exp());
            }
        }
    }
    out
}

/// Binary: mean cross-entropy of `sigmoid(H)` against the one-hot target,
/// computed as `softplus(H) - t·H`. Gaussian: mean squared error of
/// `sigmoid(H)` against [`gaussian_target`].
pub fn assignment_loss<T: Real>(
    g: &mut Graph<'_, T>,
    h: Var,
    gt: &GroundTruth,
    dims: ImageDims,
    c: usize,
    kind: AssignmentKind,
) -> Result<Var> {
    check_heatmap(g, h, dims, c)?;
    let shape = [dims.height, dims.width, c];
    match kind {
        AssignmentKind::Binary => {
            let sp = g.softplus(h);
            let at_gt = g.pick(h, gt.idx.flat(dims, c))?;
            let sum = g.sum(sp);
            let diff = g.sub(sum, at_gt)?;
            Ok(g.scale(diff, 1.0 / g.value(h).len() as f64))
        }
        AssignmentKind::Gaussian { sigma_xy, sigma_z } => {
            if !(sigma_xy > 0.0 && sigma_z > 0.0) {
                return Err(Error::InvalidConfig("gaussian sigmas must be positive".into()));
            }
            let target = gaussian_target(gt, dims, c, sigma_xy, sigma_z);
            let t = g.constant(Tensor::new(&shape, target.into_iter().map(T::lit).collect())?);
            let p = g.sigmoid(h);
            let d = g.sub(p, t)?;
            let sq = g.mul(d, d)?;
            Ok(g.mean(sq))
        }
    }
}

/// Regression target `(cx / w, cy / h, s)` for the box head.
pub fn regression_target(gt: &GroundTruth, dims: ImageDims) -> [f64; 3] {
    let (cx, cy) = gt.bbox.center();
    [cx / dims.width as f64, cy / dims.height as f64, scale_of_box(&gt.bbox, dims)]
}

pub const SPARSE_CONTRASTIVE: &str = "sparse_contrastive";
pub const BINARY: &str = "binary";
pub const GAUSSIAN: &str = "gaussian";
pub const REGRESSION: &str = "regression";

/// What a model head emits and an objective consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    /// `[h, w, c]` raw scores.
    Heatmap,
    /// `[4]` sigmoid outputs: centre x, centre y, scale, reserved.
    Box,
}

pub struct Target<'a> {
    pub gt: &'a GroundTruth,
    pub dims: ImageDims,
    pub c: usize,
}

pub trait Objective<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn output_kind(&self) -> OutputKind {
        OutputKind::Heatmap
    }

    fn loss(&self, g: &mut Graph<'_, T>, output: Var, target: &Target<'_>) -> Result<Var>;
}

struct SparseContrastive {
    spec: MarginSpec,
    reduction: Reduction,
}

impl<T: Real> Objective<T> for SparseContrastive {
    fn name(&self) -> &'static str {
        SPARSE_CONTRASTIVE
    }

    fn loss(&self, g: &mut Graph<'_, T>, output: Var, t: &Target<'_>) -> Result<Var> {
        let m = margin_matrix(t.gt, t.dims, t.c, &self.spec);
        total_loss(g, output, &m, t.gt, t.dims, t.c, self.reduction)
    }
}

struct Assignment {
    name: &'static str,
    kind: AssignmentKind,
}

impl<T: Real> Objective<T> for Assignment {
    fn name(&self) -> &'static str {
        self.name
    }

    fn loss(&self, g: &mut Graph<'_, T>, output: Var, t: &Target<'_>) -> Result<Var> {
        assignment_loss(g, output, t.gt, t.dims, t.c, self.kind)
    }
}

struct RegressionMse;

impl<T: Real> Objective<T> for RegressionMse {
    fn name(&self) -> &'static str {
        REGRESSION
    }

    fn output_kind(&self) -> OutputKind {
        OutputKind::Box
    }

    fn loss(&self, g: &mut Graph<'_, T>, output: Var, t: &Target<'_>) -> Result<Var> {
        if g.shape(output) != [4] {
            return Err(Error::ShapeMismatch(format!("box head output {:?}", g.shape(output))));
        }
        let want = regression_target(t.gt, t.dims);
        let pred = g.narrow(output, 0, 0, 3)?;
        let target = g.constant(Tensor::new(&[3], want.iter().map(|&v| T::lit(v)).collect())?);
        let d = g.sub(pred, target)?;
        let sq = g.mul(d, d)?;
        Ok(g.mean(sq))
    }
}

pub type ObjectiveFactory<T> = fn(&LossConfig, ImageDims) -> Box<dyn Objective<T>>;

/// Name → constructor table for training objectives.
pub struct ObjectiveRegistry<T: Real> {
    entries: Vec<(&'static str, ObjectiveFactory<T>)>,
}

impl<T: Real> Default for ObjectiveRegistry<T> {
    fn default() -> Self {
        let mut r = Self { entries: Vec::new() };
        r.register(SPARSE_CONTRASTIVE, |cfg, dims| {
            Box::new(SparseContrastive { spec: cfg.margin_spec(dims), reduction: cfg.reduction })
        });
        r.register(BINARY, |_, _| Box::new(Assignment { name: BINARY, kind: AssignmentKind::Binary }));
        r.register(GAUSSIAN, |cfg, dims| {
            let (sigma_xy, sigma_z) = cfg.sigmas(dims);
            Box::new(Assignment { name: GAUSSIAN, kind: AssignmentKind::Gaussian { sigma_xy, sigma_z } })
        });
        r.register(REGRESSION, |_, _| Box::new(RegressionMse));
        r
    }
}

impl<T: Real> ObjectiveRegistry<T> {
    /// Adds or replaces an entry.
    pub fn register(&mut self, name: &'static str, f: ObjectiveFactory<T>) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, f));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn create(&self, cfg: &LossConfig, dims: ImageDims) -> Result<Box<dyn Objective<T>>> {
        cfg.validate()?;
        let f = self.entries.iter().find(|(n, _)| *n == cfg.kind).map(|(_, f)| f).ok_or_else(|| {
            Error::UnknownStrategy { kind: "loss", name: cfg.kind.clone(), known: self.names().join(", ") }
        })?;
        Ok(f(cfg, dims))
    }
}
