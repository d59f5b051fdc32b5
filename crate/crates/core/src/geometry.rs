//! Boxes, scales and the mapping between continuous boxes and heatmap cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: usize,
    pub height: usize,
}

impl ImageDims {
    pub const MIN_SIDE: usize = 8;

    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < Self::MIN_SIDE || height < Self::MIN_SIDE {
            return Err(Error::InvalidConfig(format!(
                "image dims {width}x{height} below minimum side {}",
                Self::MIN_SIDE
            )));
        }
        Ok(Self { width, height })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    pub fn area(&self) -> f64 {
        (self.width * self.height) as f64
    }
}

/// `[left, top, width, height]` in background pixels. Not clipped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct PlacementBox {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl PlacementBox {
    pub fn new(left: f64, top: f64, width: f64, height: f64) -> Result<Self> {
        let ok = [left, top, width, height].iter().all(|v| v.is_finite()) && width > 0.0 && height > 0.0;
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid box [{left}, {top}, {width}, {height}]")));
        }
        Ok(Self { left, top, width, height })
    }

    pub fn right(&self) -> f64 {
        self.left + self.width
    }

    pub fn bottom(&self) -> f64 {
        self.top + self.height
    }

    pub fn center(&self) -> (f64, f64) {
        (self.left + self.width / 2.0, self.top + self.height / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.left, self.top, self.width, self.height]
    }
}

impl TryFrom<[f64; 4]> for PlacementBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<PlacementBox> for [f64; 4] {
    fn from(b: PlacementBox) -> Self {
        b.to_array()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScaleGrid {
    values: Vec<f64>,
}

impl ScaleGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("scale grid is empty".into()));
        }
        if values.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::InvalidConfig("scale values must lie in (0, 1]".into()));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("scale values must be strictly increasing".into()));
        }
        Ok(Self { values })
    }

    /// `c` evenly spaced scales from `lo` to `hi` inclusive.
    pub fn linspace(lo: f64, hi: f64, c: usize) -> Result<Self> {
        if c == 1 {
            return Self::new(vec![lo]);
        }
        Self::new((0..c).map(|i| lo + (hi - lo) * i as f64 / (c - 1) as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, z: usize) -> f64 {
        self.values[z]
    }

    /// Index of the closest value; exact ties go to the smaller index.
    pub fn nearest(&self, s: f64) -> usize {
        let mut best = 0;
        let mut best_d = (s - self.values[0]).abs();
        for (z, v) in self.values.iter().enumerate().skip(1) {
            let d = (s - v).abs();
            if d < best_d {
                best = z;
                best_d = d;
            }
        }
        best
    }
}

impl Default for ScaleGrid {
    /// 0.15, 0.20, ..., 0.90.
    fn default() -> Self {
        Self { values: (0..16).map(|i| (15 + 5 * i) as f64 / 100.0).collect() }
    }
}

impl TryFrom<Vec<f64>> for ScaleGrid {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ScaleGrid> for Vec<f64> {
    fn from(g: ScaleGrid) -> Self {
        g.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridIndex {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl GridIndex {
    pub fn new(x: usize, y: usize, z: usize) -> Self {
        Self { x, y, z }
    }

    /// Flat offset in row-major (y, x, z) layout.
    pub fn flat(&self, dims: ImageDims, c: usize) -> usize {
        (self.y * dims.width + self.x) * c + self.z
    }

    pub fn from_flat(i: usize, dims: ImageDims, c: usize) -> Self {
        let z = i % c;
        let xy = i / c;
        Self { x: xy % dims.width, y: xy / dims.width, z }
    }

    pub fn in_range(&self, dims: ImageDims, c: usize) -> bool {
        self.x < dims.width && self.y < dims.height && self.z < c
    }
}

pub fn scale_of_box(b: &PlacementBox, dims: ImageDims) -> f64 {
    (b.width * b.height / dims.area()).sqrt()
}

pub fn box_from_index(idx: GridIndex, grid: &ScaleGrid, dims: ImageDims, aspect: f64) -> PlacementBox {
    let s = grid.value(idx.z);
    let area = s * s * dims.area();
    let w = (area * aspect).sqrt();
    let h = (area / aspect).sqrt();
    PlacementBox { left: idx.x as f64 - w / 2.0, top: idx.y as f64 - h / 2.0, width: w, height: h }
}

pub fn index_from_box(b: &PlacementBox, grid: &ScaleGrid, dims: ImageDims) -> GridIndex {
    let (cx, cy) = b.center();
    let clamp = |v: f64, n: usize| v.round().clamp(0.0, (n - 1) as f64) as usize;
    GridIndex { x: clamp(cx, dims.width), y: clamp(cy, dims.height), z: grid.nearest(scale_of_box(b, dims)) }
}

pub fn iou(a: &PlacementBox, b: &PlacementBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.left.max(b.left)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.top.max(b.top)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    // areas from the same edge differences as the intersection, so iou(a, a) is exactly 1
    let area = |p: &PlacementBox| (p.right() - p.left) * (p.bottom() - p.top);
    let union = area(a) + area(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn clip_box(b: &PlacementBox, dims: ImageDims) -> Result<PlacementBox> {
    let l = b.left.max(0.0);
    let t = b.top.max(0.0);
    let r = b.right().min(dims.width as f64);
    let btm = b.bottom().min(dims.height as f64);
    if r <= l || btm <= t {
        return Err(Error::EmptyClip);
    }
    if l == b.left && t == b.top && r == b.right() && btm == b.bottom() {
        // already inside; avoid re-deriving the size through r - l
        return Ok(*b);
    }
    Ok(PlacementBox { left: l, top: t, width: r - l, height: btm - t })
}

/// IOU after clipping both boxes to the image. A box with no visible area scores 0.
pub fn clipped_iou(a: &PlacementBox, b: &PlacementBox, dims: ImageDims) -> f64 {
    match (clip_box(a, dims), clip_box(b, dims)) {
        (Ok(a), Ok(b)) => iou(&a, &b),
        _ => 0.0,
    }
}
