use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{read_json, save_gray8_png, write_bytes_atomically, write_json_atomically, Grid, Mask};

use super::ScoreMetric;

/// One score per training pixel. Pixels outside `valid` carry no score.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    metric: ScoreMetric,
    views: Vec<Grid<f64>>,
    valid: Vec<Mask>,
}

/// Sidecar header of a persisted score grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreHeader {
    pub metric: ScoreMetric,
    pub view_id: usize,
    pub width: usize,
    pub height: usize,
}

fn stem(v: usize) -> String {
    format!("view_{v:04}")
}

impl ScoreMap {
    /// `valid = None` marks every pixel valid. Valid pixels must be finite.
    pub fn new(metric: ScoreMetric, views: Vec<Grid<f64>>, valid: Option<Vec<Mask>>) -> Result<Self> {
        let first = views
            .first()
            .ok_or_else(|| Error::InvalidInput("score map has no views".into()))?;
        let dims = first.dims();
        let valid = valid.unwrap_or_else(|| vec![Grid::filled(dims.0, dims.1, true); views.len()]);
        if valid.len() != views.len() {
            return Err(Error::InvalidInput("validity mask count differs from view count".into()));
        }
        for (v, (s, m)) in views.iter().zip(&valid).enumerate() {
            s.ensure_dims(dims, &format!("score view {v}"))?;
            m.ensure_dims(dims, &format!("validity view {v}"))?;
            if s.as_slice().iter().zip(m.as_slice()).any(|(x, &ok)| ok && !x.is_finite()) {
                return Err(Error::Numerical(format!("non-finite score in view {v}")));
            }
        }
        Ok(Self { metric, views, valid })
    }

    pub fn metric(&self) -> ScoreMetric {
        self.metric
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.views[0].dims()
    }

    pub fn view(&self, v: usize) -> &Grid<f64> {
        &self.views[v]
    }

    pub fn validity(&self) -> &[Mask] {
        &self.valid
    }

    pub fn get(&self, view: usize, x: usize, y: usize) -> Option<f64> {
        self.valid[view].get(x, y).then(|| *self.views[view].get(x, y))
    }

    /// `((view, y, x), score)` of every valid pixel in index order.
    pub fn valid_scores(&self) -> impl Iterator<Item = ((usize, usize, usize), f64)> + '_ {
        let w = self.dims().0;
        self.views.iter().zip(&self.valid).enumerate().flat_map(move |(v, (s, m))| {
            s.as_slice()
                .iter()
                .zip(m.as_slice())
                .enumerate()
                .filter(|(_, (_, &ok))| ok)
                .map(move |(i, (&x, _))| ((v, i / w, i % w), x))
        })
    }

    /// Mask of valid pixels whose score satisfies `pred`.
    pub fn mask_where(&self, pred: impl Fn(f64) -> bool) -> Vec<Mask> {
        self.views
            .iter()
            .zip(&self.valid)
            .map(|(s, m)| {
                let (w, h) = s.dims();
                Grid::from_fn(w, h, |x, y| *m.get(x, y) && pred(*s.get(x, y)))
            })
            .collect()
    }

    /// Write `view_NNNN.f32` (little-endian, row-major, NaN where invalid)
    /// and `view_NNNN.json` per view, plus a min–max normalized PNG heatmap
    /// when `heatmap` is set.
    pub fn save(&self, dir: &Path, heatmap: bool) -> Result<()> {
        let (w, h) = self.dims();
        for (v, (s, m)) in self.views.iter().zip(&self.valid).enumerate() {
            let mut bytes = Vec::with_capacity(w * h * 4);
            for (x, &ok) in s.as_slice().iter().zip(m.as_slice()) {
                let val = if ok { *x as f32 } else { f32::NAN };
                bytes.extend_from_slice(&val.to_le_bytes());
            }
            write_bytes_atomically(&dir.join(format!("{}.f32", stem(v))), &bytes)?;
            let header = ScoreHeader {
                metric: self.metric,
                view_id: v,
                width: w,
                height: h,
            };
            write_json_atomically(&dir.join(format!("{}.json", stem(v))), &header)?;
            if heatmap {
                save_gray8_png(&dir.join(format!("{}.png", stem(v))), &heatmap_of(s, m))?;
            }
        }
        Ok(())
    }

    /// Load `view_count` views saved by [`ScoreMap::save`]. Values come back
    /// at 32-bit precision.
    pub fn load(dir: &Path, view_count: usize) -> Result<Self> {
        let mut views = Vec::with_capacity(view_count);
        let mut valid = Vec::with_capacity(view_count);
        let mut metric = None;
        for v in 0..view_count {
            let hpath = dir.join(format!("{}.json", stem(v)));
            let header: ScoreHeader = read_json(&hpath)?;
            if header.view_id != v || metric.is_some_and(|m| m != header.metric) {
                return Err(Error::BadField {
                    path: hpath,
                    field: "view_id/metric".into(),
                    reason: "header does not match its position in the set".into(),
                });
            }
            metric = Some(header.metric);
            let bpath = dir.join(format!("{}.f32", stem(v)));
            if !bpath.exists() {
                return Err(Error::MissingFile(bpath));
            }
            let bytes = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
            let n = header.width * header.height;
            if bytes.len() != 4 * n {
                return Err(Error::BadField {
                    path: bpath,
                    field: "length".into(),
                    reason: format!("expected {} bytes, found {}", 4 * n, bytes.len()),
                });
            }
            let vals: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            valid.push(Grid::from_vec(header.width, header.height, vals.iter().map(|x| !x.is_nan()).collect())?);
            views.push(Grid::from_vec(header.width, header.height, vals)?);
        }
        let metric = metric.ok_or_else(|| Error::InvalidInput("no score views to load".into()))?;
        Self::new(metric, views, Some(valid))
    }
}

fn heatmap_of(s: &Grid<f64>, m: &Mask) -> Grid<u8> {
    let vals = s.as_slice().iter().zip(m.as_slice()).filter(|(_, &ok)| ok).map(|(x, _)| *x);
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    Grid::from_fn(s.width(), s.height(), |x, y| {
        if *m.get(x, y) {
            ((s.get(x, y) - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    })
}
