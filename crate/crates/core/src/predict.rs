//! Single-pair inference and composite previews.

use crate::error::Result;
use crate::geometry::{clip_box, ImageDims, PlacementBox, ScaleGrid};
use crate::heatmap::Heatmap3D;
use crate::image::RgbImage;
use crate::model::PlacementModel;

/// Pixels at or above this value in every channel count as background.
pub const WHITE_TOLERANCE: u8 = 250;

pub struct Prediction {
    /// Raw network output over the input lattice.
    pub heatmap: Heatmap3D,
    /// Best boxes with their normalized scores, in background pixels.
    pub boxes: Vec<(PlacementBox, f64)>,
    /// Model forward passes spent on this prediction.
    pub forwards: usize,
}

/// `w / h` of an object raster.
pub fn object_aspect(obj: &RgbImage) -> f64 {
    obj.width() as f64 / obj.height() as f64
}

/// Scores every placement with one forward pass and returns the `k` best.
/// The background is resized to the network input if needed; boxes are
/// mapped back to its original pixel frame.
pub fn predict_pair(
    model: &PlacementModel<f32>,
    bg: &RgbImage,
    obj: &RgbImage,
    grid: &ScaleGrid,
    k: usize,
) -> Result<Prediction> {
    let n = model.config().input_size;
    let before = model.forward_count();
    let input = if bg.width() == n && bg.height() == n { bg.clone() } else { bg.resize(n, n) };
    let heatmap = model.heatmap(&input, obj, grid)?;
    let forwards = model.forward_count() - before;
    let (sx, sy) = (bg.width() as f64 / n as f64, bg.height() as f64 / n as f64);
    // the box aspect must hold in the original frame
    let aspect = object_aspect(obj) * sy / sx;
    let boxes = match heatmap.normalize() {
        Ok(hn) => hn.top_k_boxes(k, aspect),
        Err(_) => heatmap.top_k_boxes(k, aspect),
    }
    .into_iter()
    .map(|(b, s)| (PlacementBox { left: b.left * sx, top: b.top * sy, width: b.width * sx, height: b.height * sy }, s))
    .collect();
    Ok(Prediction { heatmap, boxes, forwards })
}

/// Pastes the object, resized to the clipped box, over the background.
/// Near-white object pixels are skipped.
pub fn composite_preview(bg: &RgbImage, obj: &RgbImage, b: &PlacementBox) -> Result<RgbImage> {
    let dims = ImageDims { width: bg.width(), height: bg.height() };
    let c = clip_box(b, dims)?;
    let x0 = c.left.round() as usize;
    let y0 = c.top.round() as usize;
    let x1 = (c.right().round() as usize).min(bg.width());
    let y1 = (c.bottom().round() as usize).min(bg.height());
    let mut out = bg.clone();
    if x1 <= x0 || y1 <= y0 || obj.is_empty() {
        return Ok(out);
    }
    let patch = obj.resize_nearest(x1 - x0, y1 - y0);
    for y in 0..patch.height() {
        for x in 0..patch.width() {
            let px = patch.get(x, y);
            if px.iter().all(|&v| v >= WHITE_TOLERANCE) {
                continue;
            }
            out.put(x0 + x, y0 + y, px);
        }
    }
    Ok(out)
}
