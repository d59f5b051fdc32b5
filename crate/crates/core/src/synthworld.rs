//! Procedural scenes with an analytic plausibility oracle.
//!
//! A scene is a sky gradient over flat ground with a few box obstacles.
//! Grounded objects must stand on the ground with a scale that grows
//! linearly toward the bottom of the image; flyers must fit in the sky.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_from_index, iou, scale_of_box, GridIndex, ImageDims, PlacementBox, ScaleGrid};
use crate::heatmap::Heatmap3D;
use crate::image::{RgbImage, WHITE};
use crate::loss::GroundTruth;

pub const MAX_GT_DRAWS: usize = 10_000;
pub const MAX_RETRIES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleParams {
    /// Range the per-scene horizon fraction is drawn from.
    pub horizon_range: [f64; 2],
    /// Horizon fraction of this scene (overwritten by the generator).
    pub horizon_frac: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub tau_s: f64,
    pub flyer_band: [f64; 2],
    pub max_obstacle_iou: f64,
    /// Probability that a scene's object is grounded rather than a flyer.
    pub grounded_prob: f64,
    pub max_obstacles: usize,
    /// Probability that the first obstacle is a tower spanning the whole
    /// ground depth near the middle of the image, splitting the ground.
    pub tower_prob: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            horizon_range: [0.30, 0.50],
            horizon_frac: 0.40,
            s_min: 0.15,
            s_max: 0.60,
            tau_s: 0.05,
            flyer_band: [0.15, 0.35],
            max_obstacle_iou: 0.05,
            grounded_prob: 0.7,
            max_obstacles: 3,
            tower_prob: 0.2,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.s_min
            && self.s_min < self.s_max
            && self.s_max <= 0.9
            && self.tau_s > 0.0
            && self.flyer_band[0] <= self.flyer_band[1]
            && 0.0 <= self.horizon_range[0]
            && self.horizon_range[0] <= self.horizon_range[1]
            && self.horizon_range[1] < 1.0
            && (0.0..=1.0).contains(&self.grounded_prob)
            && (0.0..=1.0).contains(&self.tower_prob);
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid oracle parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Grounded,
    Flyer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Ellipse,
    Rectangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub category: Category,
    /// `w_o / h_o`, in `[0.5, 2]`.
    pub aspect: f64,
    pub color: [u8; 3],
    pub shape: Shape,
}

/// Everything the oracle needs to judge a placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub dims: ImageDims,
    pub grid: ScaleGrid,
    pub spec: ObjectSpec,
    pub oracle: OracleParams,
    pub horizon_row: usize,
    pub obstacles: Vec<PlacementBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub layout: Layout,
    pub bg: RgbImage,
    pub obj: RgbImage,
    pub gt: GroundTruth,
    pub seed: u64,
}

impl Scene {
    pub fn dims(&self) -> ImageDims {
        self.layout.dims
    }

    pub fn aspect(&self) -> f64 {
        self.layout.spec.aspect
    }

    pub fn spec(&self) -> &ObjectSpec {
        &self.layout.spec
    }

    pub fn grid(&self) -> &ScaleGrid {
        &self.layout.grid
    }
}

impl Layout {
    /// Scale the perspective rule expects for a box whose bottom edge is at `y_bot`.
    pub fn expected_scale(&self, y_bot: f64) -> f64 {
        let o = &self.oracle;
        let h = self.horizon_row as f64;
        let depth = (self.dims.height as f64 - 1.0 - h).max(1.0);
        o.s_min + (o.s_max - o.s_min) * (y_bot - h) / depth
    }

    pub fn plausible(&self, b: &PlacementBox) -> bool {
        let (w, h) = (self.dims.width as f64, self.dims.height as f64);
        let inside = b.left >= 0.0 && b.top >= 0.0 && b.right() <= w && b.bottom() <= h;
        if !inside {
            return false;
        }
        let s = scale_of_box(b, self.dims);
        let horizon = self.horizon_row as f64;
        match self.spec.category {
            Category::Flyer => {
                b.bottom() <= horizon && s >= self.oracle.flyer_band[0] && s <= self.oracle.flyer_band[1]
            }
            Category::Grounded => {
                let y_bot = b.bottom();
                y_bot >= horizon
                    && (s - self.expected_scale(y_bot)).abs() <= self.oracle.tau_s
                    && self.obstacles.iter().all(|o| iou(b, o) < self.oracle.max_obstacle_iou)
            }
        }
    }

    pub fn plausible_index(&self, idx: GridIndex) -> bool {
        self.plausible(&box_from_index(idx, &self.grid, self.dims, self.spec.aspect))
    }

    fn lattice_len(&self) -> usize {
        self.dims.width * self.dims.height * self.grid.len()
    }
}

pub fn oracle_plausibility(scene: &Scene, b: &PlacementBox) -> bool {
    scene.layout.plausible(b)
}

/// 1 at every plausible lattice placement, 0 elsewhere, on `grid`.
pub fn oracle_heatmap(scene: &Scene, grid: &ScaleGrid) -> Heatmap3D {
    let layout = Layout { grid: grid.clone(), ..scene.layout.clone() };
    Heatmap3D::from_fn(layout.dims, grid.clone(), |i| if layout.plausible_index(i) { 1.0 } else { 0.0 })
        .expect("oracle heatmap shape follows its layout")
}

/// Uniform rejection sampling over lattice indices.
pub fn sample_gt_placement(layout: &Layout, seed: u64) -> Result<GroundTruth> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_67a1_u64);
    let n = layout.lattice_len();
    for _ in 0..MAX_GT_DRAWS {
        let idx = GridIndex::from_flat(rng.gen_range(0..n), layout.dims, layout.grid.len());
        let b = box_from_index(idx, &layout.grid, layout.dims, layout.spec.aspect);
        if layout.plausible(&b) {
            return Ok(GroundTruth { idx, bbox: b });
        }
    }
    Err(Error::OracleInfeasible { seed, draws: MAX_GT_DRAWS })
}

fn derive_seed(seed: u64, attempt: usize) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add((attempt as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_scene(seed: u64, params: &OracleParams, dims: ImageDims) -> Result<Scene> {
    generate_scene_on_grid(seed, params, dims, &ScaleGrid::default())
}

/// Deterministic in `(seed, params, dims, grid)`. When no plausible placement
/// is found the layout is redrawn from a derived seed, up to [`MAX_RETRIES`] times.
pub fn generate_scene_on_grid(seed: u64, params: &OracleParams, dims: ImageDims, grid: &ScaleGrid) -> Result<Scene> {
    params.validate()?;
    for attempt in 0..=MAX_RETRIES {
        let s = if attempt == 0 { seed } else { derive_seed(seed, attempt) };
        match try_generate(s, params, dims, grid) {
            Ok(mut scene) => {
                scene.seed = seed;
                return Ok(scene);
            }
            Err(Error::OracleInfeasible { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::OracleInfeasible { seed, draws: MAX_GT_DRAWS * (MAX_RETRIES + 1) })
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f64| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

fn try_generate(seed: u64, params: &OracleParams, dims: ImageDims, grid: &ScaleGrid) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (dims.width, dims.height);
    let frac = rng.gen_range(params.horizon_range[0]..=params.horizon_range[1]);
    let horizon_row = ((frac * h as f64).round() as usize).min(h - 1);
    let oracle = OracleParams { horizon_frac: frac, ..params.clone() };

    let category = if rng.gen_bool(params.grounded_prob) { Category::Grounded } else { Category::Flyer };
    let aspect = 2f64.powf(rng.gen_range(-1.0..=1.0));
    let shape = if rng.gen_bool(0.5) { Shape::Ellipse } else { Shape::Rectangle };
    let hue = match category {
        Category::Grounded => rng.gen_range(0.0..40.0),
        Category::Flyer => rng.gen_range(260.0..320.0),
    };
    let color = hsv(hue, rng.gen_range(0.65..1.0), rng.gen_range(0.6..0.95));
    let spec = ObjectSpec { category, aspect, color, shape };

    let depth = h - horizon_row;
    let n_obstacles = rng.gen_range(0..=params.max_obstacles);
    let tower = rng.gen_bool(params.tower_prob);
    let mut obstacles = Vec::with_capacity(n_obstacles);
    for i in 0..n_obstacles {
        if depth < 4 {
            break;
        }
        let ow = rng.gen_range(4..=(w / 4).max(4));
        let (left, top, oh) = if i == 0 && tower {
            (rng.gen_range(w / 4..=(3 * w / 4).saturating_sub(ow).max(w / 4)), horizon_row, depth)
        } else {
            let oh = rng.gen_range(4..=depth);
            (rng.gen_range(0..=w - ow), rng.gen_range(horizon_row..=h - oh), oh)
        };
        obstacles.push(PlacementBox::new(left as f64, top as f64, ow as f64, oh as f64)?);
    }

    let sky_top = [rng.gen_range(40..110), rng.gen_range(90..160), rng.gen_range(190..=255)];
    let sky_low = [rng.gen_range(150..210), rng.gen_range(190..235), rng.gen_range(230..=255)];
    let ground = [rng.gen_range(70..140), rng.gen_range(110..170), rng.gen_range(30..80)];
    let stone = rng.gen_range(45..95u8);

    let mut bg = RgbImage::new(w, h, ground);
    for y in 0..horizon_row {
        let t = if horizon_row > 1 { y as f64 / (horizon_row - 1) as f64 } else { 0.0 };
        let px: [u8; 3] =
            std::array::from_fn(|c| (sky_top[c] as f64 * (1.0 - t) + sky_low[c] as f64 * t).round() as u8);
        bg.fill_rect(0, y as i64, w as i64, y as i64 + 1, px);
    }
    for o in &obstacles {
        let (x0, y0) = (o.left as i64, o.top as i64);
        bg.fill_rect(x0, y0, x0 + o.width as i64, y0 + o.height as i64, [stone, stone, stone + 10]);
    }

    let obj = render_object(&spec, w.max(h));
    let layout = Layout { dims, grid: grid.clone(), spec, oracle, horizon_row, obstacles };
    let gt = sample_gt_placement(&layout, rng.gen())?;
    Ok(Scene { layout, bg, obj, gt, seed })
}

/// Object raster on white; the long side is `long` pixels.
pub fn render_object(spec: &ObjectSpec, long: usize) -> RgbImage {
    let (wo, ho) = if spec.aspect >= 1.0 {
        (long, ((long as f64 / spec.aspect).round() as usize).max(1))
    } else {
        (((long as f64 * spec.aspect).round() as usize).max(1), long)
    };
    let mut img = RgbImage::new(wo, ho, WHITE);
    let margin = 2.0f64.min(wo as f64 / 4.0).min(ho as f64 / 4.0);
    let (cx, cy) = (wo as f64 / 2.0, ho as f64 / 2.0);
    let (rx, ry) = (cx - margin, cy - margin);
    for y in 0..ho {
        for x in 0..wo {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
            let hit = match spec.shape {
                Shape::Ellipse => dx * dx + dy * dy <= 1.0,
                Shape::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            };
            if hit {
                img.put(x, y, spec.color);
            }
        }
    }
    img
}

/// Sizes of the 26-connected components of the plausible lattice cells,
/// largest first.
pub fn plausible_components(oracle: &Heatmap3D) -> Vec<usize> {
    let dims = oracle.dims();
    let c = oracle.channels();
    let data = oracle.data();
    let mut seen = vec![false; data.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..data.len() {
        if data[start] <= 0.0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let g = GridIndex::from_flat(i, dims, c);
            for ny in g.y.saturating_sub(1)..(g.y + 2).min(dims.height) {
                for nx in g.x.saturating_sub(1)..(g.x + 2).min(dims.width) {
                    for nz in g.z.saturating_sub(1)..(g.z + 2).min(c) {
                        let j = (ny * dims.width + nx) * c + nz;
                        if data[j] > 0.0 && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        sizes.push(size);
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes
}

/// Number of plausible lattice placements per centre column.
pub fn plausible_columns(oracle: &Heatmap3D) -> Vec<usize> {
    let dims = oracle.dims();
    let c = oracle.channels();
    let mut cols = vec![0; dims.width];
    for (i, v) in oracle.data().iter().enumerate() {
        if *v > 0.0 {
            cols[(i / c) % dims.width] += 1;
        }
    }
    cols
}

/// Whether the plausible placements form two separated groups along x: some
/// column holds at most a tenth of the busiest column's count while each
/// side of it holds at least `min_share` of all plausible placements.
pub fn is_bimodal(scene: &Scene, min_share: f64) -> bool {
    let cols = plausible_columns(&oracle_heatmap(scene, scene.grid()));
    let total: usize = cols.iter().sum();
    let peak = cols.iter().copied().max().unwrap_or(0);
    if total == 0 {
        return false;
    }
    let need = min_share * total as f64;
    let mut left = 0;
    for &n in &cols {
        let right = total - left - n;
        if n as f64 <= 0.1 * peak as f64 && left as f64 >= need && right as f64 >= need {
            return true;
        }
        left += n;
    }
    false
}

/// Fraction of lattice placements the oracle accepts.
pub fn plausible_fraction(scene: &Scene) -> f64 {
    let h = oracle_heatmap(scene, scene.grid());
    h.data().iter().sum::<f64>() / h.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    count: usize,
    dims: ImageDims,
    grid: ScaleGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SampleMeta {
    seed: u64,
    spec: ObjectSpec,
    oracle: OracleParams,
    horizon_row: usize,
    obstacles: Vec<PlacementBox>,
    gt: GroundTruth,
}

pub const DATASET_FORMAT: u32 = 1;

/// Writes images, per-sample metadata and `manifest.json` into `dir`.
/// All scenes must share dims and scale grid.
pub fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (dims, grid) = match scenes.first() {
        Some(s) => (s.dims(), s.grid().clone()),
        None => (ImageDims { width: 8, height: 8 }, ScaleGrid::default()),
    };
    for (i, s) in scenes.iter().enumerate() {
        if s.dims() != dims || *s.grid() != grid {
            return Err(Error::InvalidConfig(format!("scene {i} differs in dims or scale grid")));
        }
        s.bg.save_ppm(&dir.join(format!("bg_{i:06}.ppm")))?;
        s.obj.save_ppm(&dir.join(format!("obj_{i:06}.ppm")))?;
        let meta = SampleMeta {
            seed: s.seed,
            spec: s.layout.spec,
            oracle: s.layout.oracle.clone(),
            horizon_row: s.layout.horizon_row,
            obstacles: s.layout.obstacles.clone(),
            gt: s.gt,
        };
        std::fs::write(dir.join(format!("meta_{i:06}.json")), serde_json::to_vec_pretty(&meta)?)?;
    }
    let manifest = Manifest { format: DATASET_FORMAT, count: scenes.len(), dims, grid };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let corrupt = |m: String| Error::CorruptDataset(m);
    let manifest: Manifest = serde_json::from_slice(
        &std::fs::read(dir.join("manifest.json")).map_err(|e| corrupt(format!("manifest.json: {e}")))?,
    )
    .map_err(|e| corrupt(format!("manifest.json: {e}")))?;
    if manifest.format != DATASET_FORMAT {
        return Err(corrupt(format!("unsupported dataset format {}", manifest.format)));
    }
    let on_disk = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("meta_"))
        .count();
    if on_disk != manifest.count {
        return Err(corrupt(format!("manifest lists {} samples, directory holds {on_disk}", manifest.count)));
    }
    let mut scenes = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let read = |name: String| std::fs::read(dir.join(&name)).map_err(|e| corrupt(format!("{name}: {e}")));
        let meta: SampleMeta = serde_json::from_slice(&read(format!("meta_{i:06}.json"))?)
            .map_err(|e| corrupt(format!("meta_{i:06}.json: {e}")))?;
        let bg = RgbImage::from_ppm(&read(format!("bg_{i:06}.ppm"))?).map_err(|e| corrupt(format!("bg_{i:06}: {e}")))?;
        let obj =
            RgbImage::from_ppm(&read(format!("obj_{i:06}.ppm"))?).map_err(|e| corrupt(format!("obj_{i:06}: {e}")))?;
        if bg.width() != manifest.dims.width || bg.height() != manifest.dims.height {
            return Err(corrupt(format!("bg_{i:06}.ppm is {}x{}", bg.width(), bg.height())));
        }
        let layout = Layout {
            dims: manifest.dims,
            grid: manifest.grid.clone(),
            spec: meta.spec,
            oracle: meta.oracle,
            horizon_row: meta.horizon_row,
            obstacles: meta.obstacles,
        };
        if !layout.plausible(&meta.gt.bbox) {
            return Err(corrupt(format!("sample {i}: stored ground truth is not plausible")));
        }
        scenes.push(Scene { layout, bg, obj, gt: meta.gt, seed: meta.seed });
    }
    Ok(scenes)
}

/// Scenes for seeds `base, base + 1, ...`; generation runs in parallel.
pub fn generate_dataset(base_seed: u64, n: usize, params: &OracleParams, dims: ImageDims, grid: &ScaleGrid) -> Result<Vec<Scene>> {
    use rayon::prelude::*;
    (0..n as u64)
        .into_par_iter()
        .map(|i| generate_scene_on_grid(base_seed.wrapping_add(i), params, dims, grid))
        .collect()
}
