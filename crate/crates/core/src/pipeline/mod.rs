//! End-to-end orchestration, pruning and evaluation.
//!
//! A run trains a baseline field on every pixel, scores the pixels, flags
//! view-inconsistent scores, promotes flags to segments, removes the masked
//! pixels from the ray pool, retrains, and evaluates on held-out views.
//! Every stage persists its artifacts under the output directory together
//! with a content key; a rerun with unchanged inputs reloads them instead of
//! recomputing.

mod benchmark;
mod metrics;
mod run;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyConfig;
use crate::error::{Error, Result};
use crate::field::{RenderConfig, TrainConfig};
use crate::influence::{InfluenceConfig, ScoreMetric};
use crate::segment::{RefineConfig, SegmenterConfig};
use crate::synth::MANIFEST_FILE;

pub use benchmark::{benchmark_config, BenchmarkSpec};
pub use metrics::{mask_metrics, prune, psnr, ssim, MaskMetrics, PruneReport, SSIM_SIGMA, SSIM_WINDOW};
pub use run::{
    evaluate, render_view, run_ablation, run_pipeline, run_variants, verify_manifest, Db, EvalMetrics, RunManifest,
    RunMetrics, StageRecord, VariantResult, RUN_MANIFEST_FILE,
};

/// How the final distraction mask is derived from the scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PruningMode {
    /// Consistency flags refined to whole segments.
    Segment,
    /// Consistency flags used directly.
    Pixel,
    /// The `k`% highest scores.
    Topk { k: f64 },
    /// Upper Otsu class of the scores, without the consistency check.
    Otsu,
}

impl PruningMode {
    pub fn tag(&self) -> String {
        match self {
            PruningMode::Segment => "segment".into(),
            PruningMode::Pixel => "pixel".into(),
            PruningMode::Topk { k } => format!("topk_{k}"),
            PruningMode::Otsu => "otsu".into(),
        }
    }

    pub fn uses_consistency(&self) -> bool {
        matches!(self, PruningMode::Segment | PruningMode::Pixel)
    }
}

/// A base score metric paired with a pruning mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub metric: ScoreMetric,
    pub pruning: PruningMode,
}

impl Variant {
    pub fn tag(&self) -> String {
        format!("{}-{}", self.metric.name(), self.pruning.tag())
    }
}

/// Otsu-only, pixel flags, and segment-refined flags, all on one metric.
pub fn ablation_ladder(metric: ScoreMetric) -> Vec<Variant> {
    [PruningMode::Otsu, PruningMode::Pixel, PruningMode::Segment]
        .into_iter()
        .map(|pruning| Variant { metric, pruning })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    /// Seeds training and curvature subsampling; overrides the sub-config seeds.
    pub seed: u64,
    pub render: RenderConfig,
    pub train: TrainConfig,
    pub influence: InfluenceConfig,
    pub consistency: ConsistencyConfig,
    pub refine: RefineConfig,
    pub segmenter: SegmenterConfig,
    pub metric: ScoreMetric,
    pub pruning: PruningMode,
    pub otsu_bins: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            out: PathBuf::from("runs/default"),
            seed: 0,
            render: RenderConfig::default(),
            train: TrainConfig::default(),
            influence: InfluenceConfig::default(),
            consistency: ConsistencyConfig::default(),
            refine: RefineConfig::default(),
            segmenter: SegmenterConfig::default(),
            metric: ScoreMetric::SelfInfluence,
            pruning: PruningMode::Segment,
            otsu_bins: 256,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        crate::raster::read_json(path)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::raster::write_json_atomically(path, self)
    }

    /// Copy with `seed` pushed into the sub-configs.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        c.train.seed = self.seed;
        c.influence.seed = self.seed;
        c
    }

    pub fn variant(&self) -> Variant {
        Variant {
            metric: self.metric,
            pruning: self.pruning,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let manifest = self.dataset.join(MANIFEST_FILE);
        if !manifest.exists() {
            return Err(Error::Config(format!(
                "dataset {} has no {MANIFEST_FILE}",
                self.dataset.display()
            )));
        }
        self.render.validate()?;
        self.train.validate()?;
        self.influence.validate()?;
        self.consistency.validate()?;
        self.refine.validate()?;
        if let SegmenterConfig::External { dir } = &self.segmenter {
            if !dir.is_dir() {
                return Err(Error::Config(format!("segment directory {} does not exist", dir.display())));
            }
        }
        if self.otsu_bins < 2 {
            return Err(Error::Config("otsu_bins must be at least 2".into()));
        }
        if let PruningMode::Topk { k } = self.pruning {
            if !(0.0..=100.0).contains(&k) {
                return Err(Error::Config(format!("top-k percentage {k} outside [0, 100]")));
            }
        }
        Ok(())
    }
}
