//! Post-processing of dense placement heatmaps.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{box_from_index, GridIndex, ImageDims, PlacementBox, ScaleGrid};
use crate::image::write_pgm;

/// Scores over `height x width x c`, scale channel fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap3D {
    dims: ImageDims,
    grid: ScaleGrid,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub idx: GridIndex,
    pub score: f64,
}

/// One scale channel, `height x width`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Map2D {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Map2D {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// First maximum in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        let i = first_argmax(&self.data);
        (i % self.width, i / self.width)
    }
}

pub(crate) fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn min_max_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = min_max(v);
    if hi <= lo {
        return Err(Error::DegenerateHeatmap);
    }
    let range = hi - lo;
    Ok(v.iter().map(|&x| if x == hi { 1.0 } else { (x - lo) / range }).collect())
}

impl Heatmap3D {
    pub fn new(dims: ImageDims, grid: ScaleGrid, data: Vec<f64>) -> Result<Self> {
        let want = dims.width * dims.height * grid.len();
        if data.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "heatmap data has {} entries, {}x{}x{} needs {want}",
                data.len(),
                dims.height,
                dims.width,
                grid.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diff(diffcore::DiffError::NonFiniteValue("heatmap".into())));
        }
        Ok(Self { dims, grid, data })
    }

    pub fn from_fn(dims: ImageDims, grid: ScaleGrid, f: impl Fn(GridIndex) -> f64) -> Result<Self> {
        let c = grid.len();
        let data = (0..dims.width * dims.height * c).map(|i| f(GridIndex::from_flat(i, dims, c))).collect();
        Self::new(dims, grid, data)
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn grid(&self) -> &ScaleGrid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.grid.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, idx: GridIndex) -> f64 {
        self.data[idx.flat(self.dims, self.channels())]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.dims, self.grid.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// `(H - min) / (max - min)`.
    pub fn normalize(&self) -> Result<Self> {
        Ok(Self { dims: self.dims, grid: self.grid.clone(), data: min_max_normalize(&self.data)? })
    }

    /// First global maximum in (y, x, z) scan order.
    pub fn argmax(&self) -> GridIndex {
        GridIndex::from_flat(first_argmax(&self.data), self.dims, self.channels())
    }

    /// Entries strictly above every neighbour in the surrounding 3x3x3 block
    /// (truncated at the borders), best first; ties by (y, x, z).
    pub fn local_maxima(&self) -> Vec<Peak> {
        let (w, h, c) = (self.dims.width, self.dims.height, self.channels());
        let mut peaks = Vec::new();
        for y in 0..h {
            for x in 0..w {
                'cell: for z in 0..c {
                    let v = self.data[(y * w + x) * c + z];
                    for ny in y.saturating_sub(1)..(y + 2).min(h) {
                        for nx in x.saturating_sub(1)..(x + 2).min(w) {
                            for nz in z.saturating_sub(1)..(z + 2).min(c) {
                                if (nx, ny, nz) != (x, y, z) && self.data[(ny * w + nx) * c + nz] >= v {
                                    continue 'cell;
                                }
                            }
                        }
                    }
                    peaks.push(Peak { idx: GridIndex::new(x, y, z), score: v });
                }
            }
        }
        // collected in (y, x, z) order, so a stable sort keeps the tie rule
        peaks.sort_by(|a, b| b.score.total_cmp(&a.score));
        peaks
    }

    /// Population mean plus two standard deviations over all entries.
    pub fn peak_threshold(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        mean + 2.0 * var.sqrt()
    }

    /// The `k` best lattice placements. Slot one is the global argmax; then
    /// peaks above the threshold, then the remaining peaks, then non-peak
    /// entries, each group by descending score.
    pub fn top_k_indices(&self, k: usize) -> Vec<Peak> {
        let c = self.channels();
        let mut out: Vec<Peak> = Vec::with_capacity(k);
        if k == 0 {
            return out;
        }
        let mut taken = vec![false; self.data.len()];
        let mut push = |out: &mut Vec<Peak>, p: Peak| {
            let f = p.idx.flat(self.dims, c);
            if out.len() < k && !taken[f] {
                taken[f] = true;
                out.push(p);
            }
        };
        let top = self.argmax();
        push(&mut out, Peak { idx: top, score: self.at(top) });
        let thr = self.peak_threshold();
        let peaks = self.local_maxima();
        for p in peaks.iter().filter(|p| p.score > thr) {
            push(&mut out, *p);
        }
        for p in peaks.iter().filter(|p| p.score <= thr) {
            push(&mut out, *p);
        }
        if out.len() < k {
            let mut order: Vec<usize> = (0..self.data.len()).collect();
            order.sort_by(|&a, &b| self.data[b].total_cmp(&self.data[a]));
            for i in order {
                if out.len() == k {
                    break;
                }
                push(&mut out, Peak { idx: GridIndex::from_flat(i, self.dims, c), score: self.data[i] });
            }
        }
        out
    }

    pub fn top_k_boxes(&self, k: usize, aspect: f64) -> Vec<(PlacementBox, f64)> {
        self.top_k_indices(k)
            .into_iter()
            .map(|p| (box_from_index(p.idx, &self.grid, self.dims, aspect), p.score))
            .collect()
    }

    /// Channel `z`, min-max normalized over that slice only.
    pub fn slice_fixed_scale(&self, z: usize) -> Result<Map2D> {
        Ok(Map2D { width: self.dims.width, height: self.dims.height, data: min_max_normalize(&self.channel(z)?)? })
    }

    /// Raw channel `z`.
    pub fn channel(&self, z: usize) -> Result<Vec<f64>> {
        let c = self.channels();
        if z >= c {
            return Err(Error::IndexOutOfRange(format!("scale channel {z} of {c}")));
        }
        Ok(self.data.iter().skip(z).step_by(c).copied().collect())
    }

    /// The `c` scores at one location and the best channel (ties to smaller z).
    pub fn slice_fixed_location(&self, x: usize, y: usize) -> Result<(Vec<f64>, usize)> {
        if x >= self.dims.width || y >= self.dims.height {
            return Err(Error::IndexOutOfRange(format!(
                "location ({x}, {y}) outside {}x{}",
                self.dims.width, self.dims.height
            )));
        }
        let c = self.channels();
        let start = (y * self.dims.width + x) * c;
        let v = self.data[start..start + c].to_vec();
        let z = first_argmax(&v);
        Ok((v, z))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(b"TOPH");
        for n in [self.dims.height, self.dims.width, self.channels()] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    /// Parses the binary format. The file does not carry scale values, so
    /// the caller supplies the grid; its length must match the stored `c`.
    pub fn from_bytes(bytes: &[u8], grid: ScaleGrid) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != b"TOPH" {
            return Err(Error::ImageFormat("missing TOPH header".into()));
        }
        let u = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
        let (h, w, c) = (u(4), u(8), u(12));
        if c != grid.len() {
            return Err(Error::ShapeMismatch(format!("file has {c} channels, grid has {}", grid.len())));
        }
        let n = h * w * c;
        let body = &bytes[16..];
        if body.len() != n * 4 {
            return Err(Error::ImageFormat(format!("expected {} data bytes, found {}", n * 4, body.len())));
        }
        let data = body.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        Self::new(ImageDims::new(w, h)?, grid, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, grid: ScaleGrid) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, grid)
    }

    /// Writes `<stem>_zNN.pgm` per channel; constant channels render black.
    pub fn render_channels(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::with_capacity(self.channels());
        for z in 0..self.channels() {
            let raw = self.channel(z)?;
            let vals = min_max_normalize(&raw).unwrap_or_else(|_| vec![0.0; raw.len()]);
            let path = dir.join(format!("{stem}_z{z:02}.pgm"));
            write_pgm(&path, self.dims.width, self.dims.height, &vals)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hm(w: usize, h: usize, c: usize, f: impl Fn(GridIndex) -> f64) -> Heatmap3D {
        Heatmap3D::from_fn(ImageDims::new(w, h).unwrap(), ScaleGrid::linspace(0.2, 0.8, c).unwrap(), f).unwrap()
    }

    fn bump(cx: f64, cy: f64, cz: f64, a: f64) -> impl Fn(GridIndex) -> f64 {
        move |i| {
            let d = (i.x as f64 - cx).powi(2) + (i.y as f64 - cy).powi(2) + (i.z as f64 - cz).powi(2);
            a * (-d / 4.0).exp()
        }
    }

    #[test]
    fn normalize_examples() {
        let h = hm(8, 8, 1, |i| if i.x == 0 && i.y == 0 { 2.0 } else if i.x == 1 && i.y == 0 { 0.0 } else { 1.0 });
        let n = h.normalize().unwrap();
        assert_eq!(n.data()[0], 1.0);
        assert_eq!(n.data()[1], 0.0);
        assert_eq!(n.data()[2], 0.5);
        assert!(matches!(hm(8, 8, 2, |_| 3.0).normalize(), Err(Error::DegenerateHeatmap)));
    }

    #[test]
    fn single_bump_has_one_peak() {
        let h = hm(12, 10, 4, bump(5.0, 4.0, 2.0, 1.0)).normalize().unwrap();
        let p = h.local_maxima();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].idx, GridIndex::new(5, 4, 2));
        assert_eq!(p[0].score, 1.0);
    }

    #[test]
    fn two_bumps_higher_first() {
        let (a, b) = (bump(2.0, 2.0, 0.0, 0.7), bump(12.0, 10.0, 3.0, 1.0));
        let h = hm(16, 14, 4, move |i| a(i).max(b(i)));
        let p = h.local_maxima();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].idx, GridIndex::new(12, 10, 3));
        assert_eq!(p[1].idx, GridIndex::new(2, 2, 0));
    }

    #[test]
    fn plateau_has_no_peak() {
        assert!(hm(8, 8, 3, |_| 0.5).local_maxima().is_empty());
        let h = hm(8, 8, 1, |i| if i.y == 3 && (i.x == 3 || i.x == 4) { 1.0 } else { 0.0 });
        assert!(h.local_maxima().is_empty());
        // the top-1 slot still reports the argmax
        assert_eq!(h.top_k_indices(1)[0].idx, GridIndex::new(3, 3, 0));
    }

    #[test]
    fn top1_is_argmax_and_k_is_filled() {
        let h = hm(10, 9, 3, bump(7.0, 3.0, 1.0, 1.0)).normalize().unwrap();
        let top = h.top_k_boxes(5, 1.5);
        assert_eq!(top.len(), 5);
        let (b, s) = top[0];
        assert_eq!(s, 1.0);
        assert_eq!(b.center(), (7.0, 3.0));
        let idx: std::collections::HashSet<_> = h.top_k_indices(50).iter().map(|p| p.idx).collect();
        assert_eq!(idx.len(), 50);
    }

    #[test]
    fn slices() {
        let h = hm(8, 8, 3, |i| if i.z == 1 { if i.x == 0 { 0.0 } else { 2.0 } } else { i.x as f64 });
        let s = h.slice_fixed_scale(1).unwrap();
        assert!(s.data.iter().all(|&v| v == 0.0 || v == 1.0));
        let again = Map2D { data: min_max_normalize(&s.data).unwrap(), ..s.clone() };
        assert_eq!(again, s);
        assert!(matches!(h.slice_fixed_scale(3), Err(Error::IndexOutOfRange(_))));
        assert!(matches!(hm(8, 8, 2, |i| i.z as f64).slice_fixed_scale(0), Err(Error::DegenerateHeatmap)));

        let v = [0.1, 0.9, 0.3, 0.9];
        let h = hm(8, 8, 4, |i| v[i.z]);
        assert_eq!(h.slice_fixed_location(3, 3).unwrap(), (v.to_vec(), 1));
        assert_eq!(hm(8, 8, 4, |_| 1.0).slice_fixed_location(0, 7).unwrap().1, 0);
        assert!(h.slice_fixed_location(8, 0).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let h = hm(9, 8, 3, |i| (i.x * 100 + i.y * 10 + i.z) as f64 * 0.25 - 3.0);
        let bytes = h.to_bytes();
        assert_eq!(&bytes[..4], b"TOPH");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 9);
        // z fastest: second value is (x=0, y=0, z=1)
        assert_eq!(f32::from_le_bytes(bytes[20..24].try_into().unwrap()), -2.75);
        let back = Heatmap3D::from_bytes(&bytes, h.grid().clone()).unwrap();
        assert_eq!(back, h);
        assert!(Heatmap3D::from_bytes(&bytes[..bytes.len() - 1], h.grid().clone()).is_err());
        assert!(Heatmap3D::from_bytes(&bytes, ScaleGrid::default()).is_err());
    }

    #[test]
    fn render_writes_graymaps() {
        let dir = tempfile::tempdir().unwrap();
        let h = hm(8, 8, 2, |i| i.x as f64);
        let paths = h.render_channels(dir.path(), "heat").unwrap();
        assert_eq!(paths.len(), 2);
        let bytes = std::fs::read(&paths[1]).unwrap();
        assert!(bytes.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(bytes.len(), 11 + 64);
        assert_eq!(bytes[11 + 7], 255);
    }
}
