//! Per-pixel distraction scores.
//!
//! Three metrics are available: the photometric loss, the norm of the
//! last-layer gradient, and self-influence `gᵀ (H + λI)⁻¹ g`. Scores are
//! collected in a [`ScoreMap`] and turned into masks by [`otsu_mask`] or
//! [`topk_mask`].

mod hessian;
mod scoremap;
mod select;
pub mod toy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ray_and_target as pixel_ray;
use crate::field::{
    backprop_ray, last_layer_evals, train, FieldParams, LossConfig, PixelEval, RenderConfig,
    TrainConfig,
};
use crate::geometry::Ray;
use crate::par;
use crate::raster::{Grid, Mask, Rgb};
use crate::synth::{Dataset, PixelId};

pub use hessian::{
    central_difference_hessian, lanczos_top_eigenpairs, Curvature, HessianState,
};
pub use scoremap::{ScoreHeader, ScoreMap};
pub use select::{
    histogram, otsu_bin, otsu_mask, otsu_split, otsu_threshold, topk_count, topk_mask, OtsuSplit,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMetric {
    Loss,
    Gradnorm,
    SelfInfluence,
}

impl ScoreMetric {
    pub fn name(self) -> &'static str {
        match self {
            ScoreMetric::Loss => "loss",
            ScoreMetric::Gradnorm => "gradnorm",
            ScoreMetric::SelfInfluence => "self_influence",
        }
    }
}

/// Parameters the curvature is taken over.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InfluenceScope {
    /// Dense curvature over the final color layer.
    LastLayer,
    /// Top-`rank` eigenpairs of the curvature over all parameters.
    LowRank { rank: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// Mean outer product of per-pixel gradients.
    EmpiricalFisher,
    /// Central differences of the mean-loss gradient. Slow; for testing.
    ExactFdOracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceConfig {
    pub scope: InfluenceScope,
    pub hessian_mode: HessianMode,
    pub damping: f64,
    pub gradnorm_p: f64,
    /// Pixels sampled to form the low-rank curvature.
    pub curvature_rays: usize,
    /// Step of the finite-difference oracle.
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        Self {
            scope: InfluenceScope::LastLayer,
            hessian_mode: HessianMode::EmpiricalFisher,
            damping: 1e-2,
            gradnorm_p: 2.0,
            curvature_rays: 2048,
            fd_step: 1e-4,
            seed: 0,
        }
    }
}

impl InfluenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0) {
            return Err(Error::Config("damping must be positive".into()));
        }
        if !(self.gradnorm_p >= 1.0) {
            return Err(Error::Config("gradnorm p must be at least 1".into()));
        }
        if let InfluenceScope::LowRank { rank } = self.scope {
            if rank == 0 {
                return Err(Error::Config("low-rank influence needs rank >= 1".into()));
            }
        }
        if self.curvature_rays == 0 || !(self.fd_step > 0.0) {
            return Err(Error::Config(
                "curvature_rays and fd_step must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `‖g‖_p`.
pub fn p_norm(g: &[f64], p: f64) -> f64 {
    if p == 1.0 {
        g.iter().map(|v| v.abs()).sum()
    } else if p == 2.0 {
        g.iter().map(|v| v * v).sum::<f64>().sqrt()
    } else if p.is_infinite() {
        g.iter().fold(0.0, |m, v| m.max(v.abs()))
    } else {
        g.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// Midpoint-rendered loss and last-layer gradient for every valid pixel of
/// a dataset. Computed once and shared by all metrics.
pub struct PixelEvals {
    width: usize,
    height: usize,
    views: usize,
    /// Flat pixel index of every evaluated pixel, ascending.
    pixels: Vec<usize>,
    evals: Vec<PixelEval>,
    valid: Option<Vec<Mask>>,
}

impl PixelEvals {
    pub fn evals(&self) -> &[PixelEval] {
        &self.evals
    }

    pub fn pixels(&self) -> &[usize] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.evals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.evals.is_empty()
    }

    /// Per-view expected-depth maps; excluded pixels hold NaN.
    pub fn depth_maps(&self) -> Vec<Grid<f64>> {
        self.map_values(|e| e.depth)
    }

    pub fn color_maps(&self) -> Vec<Grid<Rgb>> {
        let mut out = vec![Grid::filled(self.width, self.height, [f64::NAN; 3]); self.views];
        let ppv = self.width * self.height;
        for (&flat, e) in self.pixels.iter().zip(&self.evals) {
            out[flat / ppv].as_mut_slice()[flat % ppv] = e.color;
        }
        out
    }

    fn map_values(&self, f: impl Fn(&PixelEval) -> f64) -> Vec<Grid<f64>> {
        let mut out = vec![Grid::filled(self.width, self.height, f64::NAN); self.views];
        let ppv = self.width * self.height;
        for (&flat, e) in self.pixels.iter().zip(&self.evals) {
            out[flat / ppv].as_mut_slice()[flat % ppv] = f(e);
        }
        out
    }

    fn score_map(&self, metric: ScoreMetric, f: impl Fn(usize, &PixelEval) -> f64) -> ScoreMap {
        let mut views = vec![Grid::filled(self.width, self.height, f64::NAN); self.views];
        let ppv = self.width * self.height;
        for (i, (&flat, e)) in self.pixels.iter().zip(&self.evals).enumerate() {
            views[flat / ppv].as_mut_slice()[flat % ppv] = f(i, e);
        }
        ScoreMap::new(metric, views, self.valid.clone()).expect("dims consistent")
    }
}

/// Everything needed to score the pixels of one dataset under one model.
pub struct Scorer<'a> {
    pub params: &'a FieldParams,
    pub dataset: &'a Dataset,
    pub rcfg: RenderConfig,
    pub loss: LossConfig,
    pub evals: PixelEvals,
}

impl<'a> Scorer<'a> {
    /// Render every pixel marked in `valid` (all pixels when `None`).
    pub fn new(
        params: &'a FieldParams,
        dataset: &'a Dataset,
        rcfg: &RenderConfig,
        loss: &LossConfig,
        valid: Option<&[Mask]>,
    ) -> Result<Self> {
        rcfg.validate()?;
        let mut rcfg = rcfg.clone();
        rcfg.stratified = false;
        let pixels: Vec<usize> = match valid {
            None => (0..dataset.pixel_count()).collect(),
            Some(masks) => {
                if masks.len() != dataset.view_count() {
                    return Err(Error::InvalidInput(format!(
                        "validity mask has {} views, dataset has {}",
                        masks.len(),
                        dataset.view_count()
                    )));
                }
                let ppv = dataset.pixels_per_view();
                let mut px = Vec::new();
                for (v, m) in masks.iter().enumerate() {
                    m.ensure_dims(dataset.dims(), &format!("validity mask {v}"))?;
                    px.extend(m.as_slice().iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| v * ppv + i));
                }
                px
            }
        };
        let (rays, targets): (Vec<Ray>, Vec<Rgb>) =
            pixels.iter().map(|&f| pixel_ray(dataset, f)).unzip();
        let evals = last_layer_evals(params, &rays, &targets, &rcfg, loss);
        let (width, height) = dataset.dims();
        Ok(Self {
            params,
            dataset,
            rcfg,
            loss: *loss,
            evals: PixelEvals {
                width,
                height,
                views: dataset.view_count(),
                pixels,
                evals,
                valid: valid.map(|m| m.to_vec()),
            },
        })
    }

    pub fn score_loss(&self) -> ScoreMap {
        self.evals.score_map(ScoreMetric::Loss, |_, e| e.loss)
    }

    pub fn score_gradnorm(&self, p: f64) -> ScoreMap {
        self.evals
            .score_map(ScoreMetric::Gradnorm, |_, e| p_norm(&e.last_layer_grad, p))
    }

    /// Content hash tying a curvature to this model, dataset and pixel set.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.params.fingerprint().as_bytes());
        h.update(serde_json::to_vec(&self.rcfg).expect("config serializes"));
        h.update(serde_json::to_vec(&self.loss).expect("config serializes"));
        for &flat in &self.evals.pixels {
            h.update((flat as u64).to_le_bytes());
            let (_, t) = pixel_ray(self.dataset, flat);
            for c in t {
                h.update(c.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Full-parameter gradients of the listed evaluated pixels.
    fn full_gradients(&self, which: &[usize]) -> Vec<Vec<f64>> {
        par::map_slice(which, |&i| {
            let (ray, target) = pixel_ray(self.dataset, self.evals.pixels[i]);
            backprop_ray(self.params, &ray, &target, &self.rcfg, &self.loss).grad
        })
    }

    pub fn build_hessian(&self, cfg: &InfluenceConfig) -> Result<HessianState> {
        cfg.validate()?;
        if self.evals.is_empty() {
            return Err(Error::InvalidInput("no pixels to build curvature from".into()));
        }
        let fingerprint = self.fingerprint();
        match (cfg.scope, cfg.hessian_mode) {
            (InfluenceScope::LastLayer, HessianMode::EmpiricalFisher) => {
                let grads: Vec<&[f64]> =
                    self.evals.evals.iter().map(|e| e.last_layer_grad.as_slice()).collect();
                HessianState::dense(hessian::fisher(&grads), cfg.damping, fingerprint)
            }
            (InfluenceScope::LastLayer, HessianMode::ExactFdOracle) => {
                let h = self.fd_last_layer_hessian(cfg.fd_step);
                HessianState::dense(h, cfg.damping, fingerprint)
            }
            (InfluenceScope::LowRank { rank }, HessianMode::EmpiricalFisher) => {
                let which = hessian::subsample(self.evals.len(), cfg.curvature_rays, cfg.seed);
                let grads = self.full_gradients(&which);
                HessianState::low_rank_from_gradients(&grads, rank, cfg.damping, cfg.seed, fingerprint)
            }
            (InfluenceScope::LowRank { .. }, HessianMode::ExactFdOracle) => Err(Error::Config(
                "the finite-difference oracle is only available for the last layer".into(),
            )),
        }
    }

    /// Hessian of the mean loss over the last layer by central differences
    /// of its gradient.
    pub fn fd_last_layer_hessian(&self, step: f64) -> nalgebra::DMatrix<f64> {
        let range = self.params.last_layer().range();
        let (rays, targets): (Vec<Ray>, Vec<Rgb>) = self
            .evals
            .pixels
            .iter()
            .map(|&f| pixel_ray(self.dataset, f))
            .unzip();
        let n = rays.len() as f64;
        let mean_grad = |theta: &[f64]| -> Vec<f64> {
            let mut p = self.params.clone();
            p.values_mut()[range.clone()].copy_from_slice(theta);
            let evals = last_layer_evals(&p, &rays, &targets, &self.rcfg, &self.loss);
            let mut g = vec![0.0; theta.len()];
            for e in &evals {
                for (a, b) in g.iter_mut().zip(&e.last_layer_grad) {
                    *a += b / n;
                }
            }
            g
        };
        central_difference_hessian(&self.params.values()[range.clone()], step, mean_grad)
    }

    pub fn score_self_influence(&self, state: &HessianState) -> Result<ScoreMap> {
        if state.fingerprint() != self.fingerprint() {
            return Err(Error::FingerprintMismatch);
        }
        let scores: Vec<f64> = match state.curvature() {
            Curvature::Dense { .. } => par::map_slice(&self.evals.evals, |e| {
                state.score(&e.last_layer_grad)
            }),
            Curvature::LowRank { .. } => {
                let idx: Vec<usize> = (0..self.evals.len()).collect();
                par::map_slice(&idx, |&i| {
                    let (ray, target) = pixel_ray(self.dataset, self.evals.pixels[i]);
                    let g = backprop_ray(self.params, &ray, &target, &self.rcfg, &self.loss).grad;
                    state.score(&g)
                })
            }
        };
        Ok(self.evals.score_map(ScoreMetric::SelfInfluence, |i, _| scores[i]))
    }

    pub fn score(&self, metric: ScoreMetric, cfg: &InfluenceConfig) -> Result<ScoreMap> {
        match metric {
            ScoreMetric::Loss => Ok(self.score_loss()),
            ScoreMetric::Gradnorm => Ok(self.score_gradnorm(cfg.gradnorm_p)),
            ScoreMetric::SelfInfluence => {
                let h = self.build_hessian(cfg)?;
                self.score_self_influence(&h)
            }
        }
    }
}

pub fn score_loss(
    params: &FieldParams,
    dataset: &Dataset,
    rcfg: &RenderConfig,
    loss: &LossConfig,
) -> Result<ScoreMap> {
    Ok(Scorer::new(params, dataset, rcfg, loss, None)?.score_loss())
}

pub fn score_gradnorm(
    params: &FieldParams,
    dataset: &Dataset,
    rcfg: &RenderConfig,
    loss: &LossConfig,
    p: f64,
) -> Result<ScoreMap> {
    Ok(Scorer::new(params, dataset, rcfg, loss, None)?.score_gradnorm(p))
}

/// Leave-one-out loss change of one pixel: retrain without it from the same
/// seed and compare its midpoint-rendered loss with the full-data model.
pub fn score_loo(
    dataset: &Dataset,
    pixel: PixelId,
    keep: Option<&[Mask]>,
    tcfg: &TrainConfig,
    rcfg: &RenderConfig,
) -> Result<f64> {
    let (w, h) = dataset.dims();
    let mut masks: Vec<Mask> = match keep {
        Some(m) => m.to_vec(),
        None => vec![Grid::filled(w, h, true); dataset.view_count()],
    };
    let (full, _) = train(dataset, Some(&masks), tcfg, rcfg)?;
    *masks[pixel.view].get_mut(pixel.x, pixel.y) = false;
    let (without, _) = train(dataset, Some(&masks), tcfg, rcfg)?;
    let (ray, target) = pixel_ray(dataset, dataset.flat_index(pixel));
    let mut mid = rcfg.clone();
    mid.stratified = false;
    let loss_of = |p: &FieldParams| {
        tcfg.loss
            .eval(&crate::field::render_ray(p, &ray, &mid).color, &target)
    };
    Ok(loss_of(&without) - loss_of(&full))
}
