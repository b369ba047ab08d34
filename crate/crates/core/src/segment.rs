//! Image segmentation and pixel-to-segment refinement.
//!
//! A segment is marked as distractor when the fraction of its pixels flagged
//! by the consistency stage exceeds `epsilon`. The output mask is the union
//! of marked segments. Segments come from graph-based merging, a fixed grid,
//! or an external id map.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::consistency::FlagMap;
use crate::error::{Error, Result};
use crate::par;
use crate::raster::{load_gray16_png, save_gray16_png, Grid, Mask, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentProvider {
    Felzenszwalb,
    Grid,
    External,
}

/// Dense segment ids of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentMap {
    ids: Grid<u32>,
    count: usize,
    provider: SegmentProvider,
}

impl SegmentMap {
    /// Renumbers arbitrary labels densely in row-major order of first
    /// appearance; the partition is preserved.
    pub fn from_labels<T: Copy + Eq + std::hash::Hash>(labels: &Grid<T>, provider: SegmentProvider) -> Self {
        let mut seen = std::collections::HashMap::new();
        let ids = labels.map(|l| {
            let next = seen.len() as u32;
            *seen.entry(*l).or_insert(next)
        });
        Self {
            ids,
            count: seen.len(),
            provider,
        }
    }

    pub fn ids(&self) -> &Grid<u32> {
        &self.ids
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn provider(&self) -> SegmentProvider {
        self.provider
    }

    pub fn dims(&self) -> (usize, usize) {
        self.ids.dims()
    }

    /// Pixel count of every segment.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &id in self.ids.as_slice() {
            sizes[id as usize] += 1;
        }
        sizes
    }

    /// 16-bit grayscale PNG of ids.
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.count > usize::from(u16::MAX) + 1 {
            return Err(Error::InvalidInput(format!(
                "{} segments do not fit a 16-bit id map",
                self.count
            )));
        }
        save_gray16_png(path, &self.ids.map(|&id| id as u16))
    }

    /// Reads a 16-bit id map, re-densifying ids.
    pub fn load(path: &Path, dims: (usize, usize), provider: SegmentProvider) -> Result<Self> {
        let raw = load_gray16_png(path)?;
        raw.ensure_dims(dims, &path.display().to_string())?;
        Ok(Self::from_labels(&raw, provider))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub epsilon: f64,
    /// Merge scale of graph-based segmentation; larger values give larger segments.
    pub k: f64,
    pub min_size: usize,
    /// Gaussian pre-smoothing in pixels; 0 disables it.
    pub sigma: f64,
    pub tile: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            k: 100.0,
            min_size: 20,
            sigma: 0.8,
            tile: 8,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config("epsilon must lie in [0, 1]".into()));
        }
        if !(self.k >= 0.0) || !self.k.is_finite() {
            return Err(Error::Config("k must be finite and non-negative".into()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config("sigma must be finite and non-negative".into()));
        }
        if self.tile == 0 {
            return Err(Error::Config("tile must be positive".into()));
        }
        Ok(())
    }
}

struct DisjointSets {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let up = self.parent[self.parent[a as usize] as usize];
            self.parent[a as usize] = up;
            a = up;
        }
        a
    }

    /// Joins two roots; the larger one (lower index on ties) survives.
    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (keep, drop) = match self.size[a as usize].cmp(&self.size[b as usize]) {
            std::cmp::Ordering::Less => (b, a),
            std::cmp::Ordering::Greater => (a, b),
            std::cmp::Ordering::Equal => (a.min(b), a.max(b)),
        };
        self.parent[drop as usize] = keep;
        self.size[keep as usize] += self.size[drop as usize];
        keep
    }
}

/// Separable Gaussian blur, truncated at 4σ, with clamped borders.
fn smooth(img: &RgbImage, sigma: f64) -> RgbImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (w, h) = img.dims();
    let pass = |src: &RgbImage, dx: isize, dy: isize| {
        Grid::from_fn(w, h, |x, y| {
            let mut acc = [0.0; 3];
            for (i, k) in (-r..=r).zip(&kernel) {
                let sx = (x as isize + i * dx).clamp(0, w as isize - 1) as usize;
                let sy = (y as isize + i * dy).clamp(0, h as isize - 1) as usize;
                let p = src.get(sx, sy);
                for c in 0..3 {
                    acc[c] += k * p[c];
                }
            }
            acc
        })
    };
    pass(&pass(img, 1, 0), 0, 1)
}

/// Graph-based segmentation over the 8-connected pixel grid.
///
/// Edge weights are RGB distances on a 0–255 scale. Edges are visited in
/// ascending weight, ties in edge-index order; two components merge when the
/// edge weight is within both internal differences plus `k / |C|`.
/// Components smaller than `min_size` are then absorbed along the same
/// edge order.
pub fn segment_felzenszwalb(image: &RgbImage, cfg: &RefineConfig) -> Result<SegmentMap> {
    cfg.validate()?;
    let (w, h) = image.dims();
    let img = smooth(image, cfg.sigma);
    let mut edges: Vec<(f64, u32, u32)> = Vec::with_capacity(4 * w * h);
    let dist = |a: (usize, usize), b: (usize, usize)| {
        let (p, q) = (img.get(a.0, a.1), img.get(b.0, b.1));
        (0..3).map(|c| ((p[c] - q[c]) * 255.0).powi(2)).sum::<f64>().sqrt()
    };
    for y in 0..h {
        for x in 0..w {
            let a = (y * w + x) as u32;
            let mut push = |nx: usize, ny: usize| edges.push((dist((x, y), (nx, ny)), a, (ny * w + nx) as u32));
            if x + 1 < w {
                push(x + 1, y);
            }
            if y + 1 < h {
                push(x, y + 1);
                if x + 1 < w {
                    push(x + 1, y + 1);
                }
                if x > 0 {
                    push(x - 1, y + 1);
                }
            }
        }
    }
    // stable: equal weights keep edge-index order
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut sets = DisjointSets::new(w * h);
    let mut threshold = vec![cfg.k; w * h];
    for &(wt, a, b) in &edges {
        let (ra, rb) = (sets.find(a), sets.find(b));
        if ra != rb && wt <= threshold[ra as usize] && wt <= threshold[rb as usize] {
            let root = sets.union(ra, rb);
            threshold[root as usize] = wt + cfg.k / sets.size[root as usize] as f64;
        }
    }
    for &(_, a, b) in &edges {
        let (ra, rb) = (sets.find(a), sets.find(b));
        if ra != rb
            && (sets.size[ra as usize] < cfg.min_size as u32 || sets.size[rb as usize] < cfg.min_size as u32)
        {
            sets.union(ra, rb);
        }
    }
    let roots = Grid::from_vec(w, h, (0..(w * h) as u32).map(|i| sets.find(i)).collect())?;
    Ok(SegmentMap::from_labels(&roots, SegmentProvider::Felzenszwalb))
}

/// `tile × tile` blocks with row-major ids; edge blocks may be smaller.
pub fn segment_grid(width: usize, height: usize, tile: usize) -> Result<SegmentMap> {
    if tile == 0 {
        return Err(Error::Config("tile must be positive".into()));
    }
    let cols = width.div_ceil(tile);
    let ids = Grid::from_fn(width, height, |x, y| ((y / tile) * cols + x / tile) as u32);
    let count = cols * height.div_ceil(tile);
    Ok(SegmentMap {
        ids,
        count,
        provider: SegmentProvider::Grid,
    })
}

/// 16-bit id PNG from any external segmenter. Ids need not be dense.
pub fn load_external_segments(path: &Path, dims: (usize, usize)) -> Result<SegmentMap> {
    SegmentMap::load(path, dims, SegmentProvider::External)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmenterConfig {
    #[default]
    Felzenszwalb,
    Grid,
    /// Directory of `view_NNNN.png` id maps.
    External { dir: std::path::PathBuf },
}

impl SegmenterConfig {
    pub fn provider(&self) -> SegmentProvider {
        match self {
            SegmenterConfig::Felzenszwalb => SegmentProvider::Felzenszwalb,
            SegmenterConfig::Grid => SegmentProvider::Grid,
            SegmenterConfig::External { .. } => SegmentProvider::External,
        }
    }
}

/// Segments every image with the chosen provider.
pub fn segment_views(images: &[&RgbImage], seg: &SegmenterConfig, cfg: &RefineConfig) -> Result<Vec<SegmentMap>> {
    cfg.validate()?;
    par::map_range(images.len(), |v| {
        let (w, h) = images[v].dims();
        match seg {
            SegmenterConfig::Felzenszwalb => segment_felzenszwalb(images[v], cfg),
            SegmenterConfig::Grid => segment_grid(w, h, cfg.tile),
            SegmenterConfig::External { dir } => {
                load_external_segments(&dir.join(format!("view_{v:04}.png")), (w, h))
            }
        }
    })
    .into_iter()
    .collect()
}

/// Marks whole segments whose flagged fraction strictly exceeds `epsilon`.
pub fn refine_view(flags: &Mask, segs: &SegmentMap, epsilon: f64) -> Result<Mask> {
    flags.ensure_dims(segs.dims(), "flag map")?;
    let sizes = segs.sizes();
    let mut hits = vec![0usize; segs.count];
    for (&id, &f) in segs.ids.as_slice().iter().zip(flags.as_slice()) {
        hits[id as usize] += usize::from(f);
    }
    let marked: Vec<bool> = hits
        .iter()
        .zip(&sizes)
        .map(|(&n, &s)| n as f64 / s as f64 > epsilon)
        .collect();
    Ok(segs.ids.map(|&id| marked[id as usize]))
}

/// Segment-level distractor masks of every view. Undetermined pixels count
/// as clean.
pub fn refine_pixel_to_segment(flags: &FlagMap, segs: &[SegmentMap], epsilon: f64) -> Result<Vec<Mask>> {
    if flags.flagged.len() != segs.len() {
        return Err(Error::InvalidInput(format!(
            "{} flag views for {} segment views",
            flags.flagged.len(),
            segs.len()
        )));
    }
    flags
        .flagged
        .iter()
        .zip(segs)
        .map(|(f, s)| refine_view(f, s, epsilon))
        .collect()
}
