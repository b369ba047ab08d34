//! Adam training over rays drawn from the kept pixels of a dataset.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Ray;
use crate::raster::{Mask, Rgb};
use crate::synth::Dataset;

use super::mlp::{FieldArch, FieldParams};
use super::render::{batch_gradient, LossConfig, RenderConfig};

/// Smallest kept fraction of the pixel pool that training accepts.
pub const MIN_KEPT_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: FieldArch,
    pub iterations: usize,
    pub batch_rays: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub warmup: usize,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: FieldArch::default(),
            iterations: 20_000,
            batch_rays: 1024,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-6,
            lr_start: 2e-3,
            lr_end: 2e-6,
            warmup: 512,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let positive = [self.lr_start, self.lr_end, self.adam_eps, self.loss.charbonnier_eps];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config(
                "learning rates and epsilons must be positive".into(),
            ));
        }
        if self.lr_end > self.lr_start {
            return Err(Error::Config("lr_end must not exceed lr_start".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.iterations == 0 || self.batch_rays == 0 {
            return Err(Error::Config(
                "iterations and batch_rays must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate at iteration `it`: log-linear decay from `lr_start` to
    /// `lr_end` times a linear warmup ramp.
    pub fn learning_rate(&self, it: usize) -> f64 {
        let p = (it as f64 / self.iterations as f64).clamp(0.0, 1.0);
        let decayed = (self.lr_start.ln() * (1.0 - p) + self.lr_end.ln() * p).exp();
        let ramp = if self.warmup == 0 {
            1.0
        } else {
            ((it + 1) as f64 / self.warmup as f64).min(1.0)
        };
        decayed * ramp
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Per-iteration mean batch loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

impl TrainLog {
    /// Mean loss of consecutive non-overlapping windows of `window` entries.
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        self.entries
            .chunks_exact(window.max(1))
            .map(|c| c.iter().map(|e| e.loss).sum::<f64>() / c.len() as f64)
            .collect()
    }

    /// Indices of windows whose mean loss rose above the previous window.
    pub fn rising_windows(&self, window: usize) -> Vec<usize> {
        self.window_means(window)
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1] > w[0])
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn final_loss(&self, window: usize) -> Option<f64> {
        let n = self.entries.len();
        if n == 0 {
            return None;
        }
        let tail = &self.entries[n.saturating_sub(window.max(1))..];
        Some(tail.iter().map(|e| e.loss).sum::<f64>() / tail.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,lr\n");
        for e in &self.entries {
            s.push_str(&format!("{},{:e},{:e}\n", e.iteration, e.loss, e.lr));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::raster::write_bytes_atomically(path, self.to_csv().as_bytes())
    }
}

/// Flat indices of trainable pixels.
pub fn kept_pixels(dataset: &Dataset, keep: Option<&[Mask]>) -> Result<Vec<usize>> {
    let total = dataset.pixel_count();
    let Some(masks) = keep else {
        return Ok((0..total).collect());
    };
    if masks.len() != dataset.view_count() {
        return Err(Error::InvalidInput(format!(
            "keep mask has {} views, dataset has {}",
            masks.len(),
            dataset.view_count()
        )));
    }
    let ppv = dataset.pixels_per_view();
    let mut kept = Vec::new();
    for (v, m) in masks.iter().enumerate() {
        m.ensure_dims(dataset.dims(), &format!("keep mask {v}"))?;
        kept.extend(
            m.as_slice()
                .iter()
                .enumerate()
                .filter(|(_, &k)| k)
                .map(|(i, _)| v * ppv + i),
        );
    }
    if (kept.len() as f64) < MIN_KEPT_FRACTION * total as f64 || kept.is_empty() {
        return Err(Error::TooFewKept {
            kept: kept.len(),
            total,
        });
    }
    Ok(kept)
}

pub(crate) fn ray_and_target(dataset: &Dataset, flat: usize) -> (Ray, Rgb) {
    let p = dataset.pixel_id(flat);
    let view = &dataset.views[p.view];
    (view.camera.ray_unchecked(p.x, p.y), *view.image.get(p.x, p.y))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, cfg: &TrainConfig, lr: f64, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
}

/// Fit a field to the kept pixels of `dataset`.
///
/// Rays are drawn uniformly with replacement from the kept pool. All
/// randomness (initialization, ray choice, stratified offsets) derives from
/// `cfg.seed`, so the result is reproducible for a fixed seed.
pub fn train(
    dataset: &Dataset,
    keep: Option<&[Mask]>,
    cfg: &TrainConfig,
    rcfg: &RenderConfig,
) -> Result<(FieldParams, TrainLog)> {
    cfg.validate()?;
    rcfg.validate()?;
    let pool = kept_pixels(dataset, keep)?;
    let mut params = FieldParams::init(cfg.arch.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5DEE_CE66_D1CE_5EED);
    let mut adam = Adam::new(params.len());
    let mut log = TrainLog::default();
    let mut rays = Vec::with_capacity(cfg.batch_rays);
    let mut targets = Vec::with_capacity(cfg.batch_rays);
    let mut jitter = vec![0.0; cfg.batch_rays * rcfg.n_samples];
    let scale = 1.0 / cfg.batch_rays as f64;

    for it in 0..cfg.iterations {
        rays.clear();
        targets.clear();
        for _ in 0..cfg.batch_rays {
            let (r, t) = ray_and_target(dataset, pool[rng.random_range(0..pool.len())]);
            rays.push(r);
            targets.push(t);
        }
        if rcfg.stratified {
            for j in jitter.iter_mut() {
                *j = rng.random::<f64>();
            }
        }
        let (loss, mut grad) = batch_gradient(
            &params,
            &rays,
            &targets,
            rcfg,
            &cfg.loss,
            rcfg.stratified.then_some(jitter.as_slice()),
        );
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite training loss at iteration {it}"
            )));
        }
        grad.iter_mut().for_each(|g| *g *= scale);
        let lr = cfg.learning_rate(it);
        adam.step(cfg, lr, params.values_mut(), &grad);
        log.entries.push(TrainLogEntry {
            iteration: it,
            loss: loss * scale,
            lr,
        });
    }

    for w in log.rising_windows(100) {
        log::debug!("training loss rose in window {w} (iterations {}..{})", w * 100, (w + 1) * 100);
    }
    let rising = log.rising_windows(100).len();
    if rising * 4 > log.entries.len() / 100 {
        log::warn!("training loss rose in {rising} of {} windows", log.entries.len() / 100);
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::EncodingConfig;
    use crate::synth::{presets, View};
    use crate::raster::Grid;

    fn constant_dataset(color: Rgb) -> Dataset {
        let (cams, _) = presets::ring_cameras(3, 0, 8);
        let views = cams
            .into_iter()
            .map(|camera| View {
                image: Grid::filled(8, 8, color),
                camera,
                clean: None,
                gt_mask: None,
            })
            .collect();
        Dataset::new(views, vec![]).unwrap()
    }

    fn small_cfg(iterations: usize) -> TrainConfig {
        TrainConfig {
            arch: FieldArch {
                encoding: EncodingConfig {
                    pos_frequencies: 2,
                    dir_frequencies: 1,
                },
                trunk_width: 16,
                trunk_depth: 2,
                color_width: 16,
            },
            iterations,
            batch_rays: 32,
            warmup: 50,
            lr_start: 1e-2,
            lr_end: 1e-3,
            loss: LossConfig::l2(),
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn rcfg() -> RenderConfig {
        RenderConfig {
            t_near: 2.8,
            t_far: 7.0,
            n_samples: 16,
            background: [0.0; 3],
            stratified: true,
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig::default();
        assert!((c.learning_rate(c.warmup) - 2e-3 * (1e-3f64).powf(512.0 / 20000.0)).abs() < 1e-12);
        assert!((c.learning_rate(0) - 2e-3 / 512.0).abs() < 1e-9);
        let end = c.learning_rate(c.iterations);
        assert!((end - 2e-6).abs() < 1e-15);
    }

    #[test]
    fn constant_color_converges() {
        let ds = constant_dataset([0.2, 0.6, 0.4]);
        let (params, log) = train(&ds, None, &small_cfg(2000), &rcfg()).unwrap();
        let mut eval = rcfg();
        eval.stratified = false;
        let mut worst: f64 = 0.0;
        for flat in 0..ds.pixel_count() {
            let (r, t) = ray_and_target(&ds, flat);
            let c = super::super::render::render_ray(&params, &r, &eval).color;
            worst = worst.max(LossConfig::l2().eval(&c, &t));
        }
        assert!(worst < 1e-4, "worst per-ray l2 {worst}");
        assert!(log.final_loss(100).unwrap() < 1e-4);
    }

    #[test]
    fn all_false_keep_mask_is_rejected() {
        let ds = constant_dataset([0.5; 3]);
        let masks = vec![Grid::filled(8, 8, false); 3];
        let err = train(&ds, Some(&masks), &small_cfg(5), &rcfg()).unwrap_err();
        assert!(matches!(err, Error::TooFewKept { kept: 0, .. }));
    }

    #[test]
    fn same_seed_is_bitwise_reproducible() {
        let ds = constant_dataset([0.1, 0.3, 0.9]);
        let cfg = small_cfg(30);
        let a = crate::par::with_threads(true, || train(&ds, None, &cfg, &rcfg()).unwrap().0);
        let b = crate::par::with_threads(true, || train(&ds, None, &cfg, &rcfg()).unwrap().0);
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn log_windows() {
        let log = TrainLog {
            entries: (0..300)
                .map(|i| TrainLogEntry {
                    iteration: i,
                    loss: if i < 200 { 1.0 / (1 + i) as f64 } else { 5.0 },
                    lr: 1e-3,
                })
                .collect(),
        };
        assert_eq!(log.window_means(100).len(), 3);
        assert_eq!(log.rising_windows(100), vec![2]);
        assert!(log.to_csv().starts_with("iteration,loss,lr\n0,"));
    }
}
