use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consistency::{flag_all, FlagMap, SurfaceMaps};
use crate::error::{Error, Result};
use crate::field::{render_rays, train, Checkpoint, FieldParams, RenderConfig};
use crate::influence::{otsu_mask, topk_mask, ScoreMap, ScoreMetric, Scorer};
use crate::raster::{
    load_mask_png, read_json, save_mask_png, save_rgb_png, write_bytes_atomically, write_json_atomically, Grid, Mask,
    RgbImage,
};
use crate::segment::{refine_pixel_to_segment, segment_views, SegmentMap};
use crate::synth::{load_dataset, Dataset};

use super::metrics::{mask_metrics, prune, psnr, ssim, MaskMetrics, PruneReport};
use super::{ablation_ladder, PipelineConfig, PruningMode, Variant};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
const STAGE_FILE: &str = "stage.json";
const CHECKPOINT_FILE: &str = "checkpoint.json";

/// PSNR in dB; `+inf` serializes as the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Db(pub f64);

impl Serialize for Db {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Db {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Db(v)),
            Raw::Str(s) if s == "inf" => Ok(Db(f64::INFINITY)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub psnr: Vec<Db>,
    /// `None` for images smaller than the SSIM window.
    pub ssim: Vec<Option<f64>>,
    pub mean_psnr: Db,
    pub mean_ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub tag: String,
    /// Against the dataset's ground-truth masks when present.
    pub mask: Option<MaskMetrics>,
    pub prune: PruneReport,
    pub eval: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub baseline: EvalMetrics,
    pub variants: Vec<VariantResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub key: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub dataset_key: String,
    pub stages: Vec<StageRecord>,
    /// Output-relative path to SHA-256 of every artifact.
    pub artifacts: BTreeMap<String, String>,
    pub metrics: RunMetrics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StageMarker {
    name: String,
    key: String,
    seconds: f64,
    artifacts: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn key_of(parts: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(parts.to_string().as_bytes()))
}

/// Non-hidden files under `dir`, as sorted `/`-joined relative paths.
fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if entry.file_name().to_string_lossy().starts_with('.') {
                continue;
            }
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

fn hash_files(dir: &Path) -> Result<BTreeMap<String, String>> {
    list_files(dir)?
        .into_iter()
        .filter(|f| f != STAGE_FILE)
        .map(|f| Ok((f.clone(), sha256_file(&dir.join(&f))?)))
        .collect()
}

fn view_file(v: usize, ext: &str) -> String {
    format!("view_{v:04}.{ext}")
}

/// Midpoint rendering of a full camera image.
pub fn render_view(params: &FieldParams, camera: &crate::geometry::Camera, rcfg: &RenderConfig) -> RgbImage {
    let mut mid = rcfg.clone();
    mid.stratified = false;
    let rays: Vec<_> = (0..camera.pixel_count())
        .map(|i| camera.ray_unchecked(i % camera.width, i / camera.width))
        .collect();
    let colors = render_rays(params, &rays, &mid).into_iter().map(|r| r.color).collect();
    Grid::from_vec(camera.width, camera.height, colors).expect("sized")
}

/// PSNR and SSIM of `params` on every held-out view.
pub fn evaluate(params: &FieldParams, dataset: &Dataset, rcfg: &RenderConfig) -> Result<(EvalMetrics, Vec<RgbImage>)> {
    if dataset.test_views.is_empty() {
        return Err(Error::InvalidInput("dataset has no held-out views".into()));
    }
    let renders: Vec<RgbImage> = dataset.test_views.iter().map(|t| render_view(params, &t.camera, rcfg)).collect();
    let mut p = Vec::new();
    let mut s = Vec::new();
    for (r, t) in renders.iter().zip(&dataset.test_views) {
        p.push(Db(psnr(r, &t.image)?));
        s.push(ssim(r, &t.image).ok());
    }
    let mean_psnr = Db(p.iter().map(|d| d.0).sum::<f64>() / p.len() as f64);
    let mean_ssim = s.iter().copied().collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / v.len() as f64);
    Ok((
        EvalMetrics {
            psnr: p,
            ssim: s,
            mean_psnr,
            mean_ssim,
        },
        renders,
    ))
}

/// Stage records and artifact hashes of one output directory.
struct Book {
    out: PathBuf,
    stages: Vec<StageRecord>,
    artifacts: BTreeMap<String, String>,
}

struct Runner {
    cfg: PipelineConfig,
    dataset: Dataset,
    dataset_key: String,
    book: Book,
}

impl Book {
    /// Runs `compute` into the stage directory unless a marker with the same
    /// key and intact artifacts is present, then reads the result back with
    /// `load`. Returns the stage key.
    fn stage<T>(
        &mut self,
        name: &str,
        key: String,
        compute: impl FnOnce(&Path) -> Result<()>,
        load: impl Fn(&Path) -> Result<T>,
    ) -> Result<(T, String)> {
        let wrap = |e: Error| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        };
        let dir = self.out.join(name);
        let marker_path = dir.join(STAGE_FILE);
        let reuse = read_json::<StageMarker>(&marker_path).ok().filter(|m| {
            m.key == key && m.artifacts.iter().all(|(f, h)| sha256_file(&dir.join(f)).is_ok_and(|x| &x == h))
        });
        let marker = match reuse.and_then(|m| Some((m, load(&dir).ok()?))) {
            Some((m, value)) => {
                log::info!("stage {name}: up to date");
                self.record(name, m);
                return Ok((value, key));
            }
            None => {
                if dir.exists() {
                    std::fs::remove_dir_all(&dir).map_err(|e| wrap(Error::io(&dir, e)))?;
                }
                std::fs::create_dir_all(&dir).map_err(|e| wrap(Error::io(&dir, e)))?;
                log::info!("stage {name}: running");
                let t = Instant::now();
                compute(&dir).map_err(wrap)?;
                let marker = StageMarker {
                    name: name.to_string(),
                    key: key.clone(),
                    seconds: t.elapsed().as_secs_f64(),
                    artifacts: hash_files(&dir).map_err(wrap)?,
                };
                write_json_atomically(&marker_path, &marker).map_err(wrap)?;
                marker
            }
        };
        let value = load(&dir).map_err(wrap)?;
        self.record(name, marker);
        Ok((value, key))
    }

    fn record(&mut self, name: &str, m: StageMarker) {
        if self.stages.iter().any(|s| s.name == name) {
            return;
        }
        for (f, h) in &m.artifacts {
            self.artifacts.insert(format!("{name}/{f}"), h.clone());
        }
        self.stages.push(StageRecord {
            name: name.to_string(),
            key: m.key,
            seconds: m.seconds,
        });
    }
}

impl Runner {
    fn new(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.effective();
        let dataset = load_dataset(&cfg.dataset)?;
        let mut h = Sha256::new();
        for f in list_files(&cfg.dataset)? {
            h.update(f.as_bytes());
            h.update(sha256_file(&cfg.dataset.join(&f))?.as_bytes());
        }
        std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
        Ok(Self {
            book: Book {
                out: cfg.out.clone(),
                stages: Vec::new(),
                artifacts: BTreeMap::new(),
            },
            dataset_key: hex::encode(h.finalize()),
            cfg,
            dataset,
        })
    }

    fn train_stage(&mut self, name: &str, upstream: &str, keep: Option<Vec<Mask>>) -> Result<(FieldParams, String)> {
        let key = key_of(&serde_json::json!({
            "stage": "train", "upstream": upstream, "train": self.cfg.train, "render": self.cfg.render,
        }));
        let (ds, tcfg, rcfg) = (&self.dataset, self.cfg.train.clone(), self.cfg.render.clone());
        let compute = |dir: &Path| {
            let (params, log) = train(ds, keep.as_deref(), &tcfg, &rcfg)?;
            log.write_csv(&dir.join("train_log.csv"))?;
            Checkpoint::new(&params, &tcfg, &rcfg).save(&dir.join(CHECKPOINT_FILE))
        };
        self.book.stage(name, key, compute, |dir| Checkpoint::load(&dir.join(CHECKPOINT_FILE))?.params())
    }

    fn eval_stage(&mut self, name: &str, model_key: &str, params: &FieldParams) -> Result<EvalMetrics> {
        let key = key_of(&serde_json::json!({ "stage": "eval", "model": model_key, "render": self.cfg.render }));
        let (ds, rcfg) = (&self.dataset, self.cfg.render.clone());
        let compute = |dir: &Path| {
            let (m, renders) = evaluate(params, ds, &rcfg)?;
            for (v, r) in renders.iter().enumerate() {
                save_rgb_png(&dir.join(view_file(v, "png")), r)?;
            }
            write_json_atomically(&dir.join("metrics.json"), &m)
        };
        Ok(self.book.stage(name, key, compute, |dir| read_json(&dir.join("metrics.json")))?.0)
    }

    fn score_stage(&mut self, metric: ScoreMetric, model_key: &str, params: &FieldParams) -> Result<(ScoreMap, String)> {
        let key = key_of(&serde_json::json!({
            "stage": "score", "model": model_key, "metric": metric, "render": self.cfg.render,
            "loss": self.cfg.train.loss,
            "influence": (metric == ScoreMetric::SelfInfluence).then_some(&self.cfg.influence),
        }));
        let n = self.dataset.view_count();
        let (ds, cfg) = (&self.dataset, &self.cfg);
        let compute = |dir: &Path| {
            let scorer = Scorer::new(params, ds, &cfg.render, &cfg.train.loss, None)?;
            scorer.score(metric, &cfg.influence)?.save(dir, true)
        };
        self.book.stage(&format!("scores_{}", metric.name()), key, compute, |dir| ScoreMap::load(dir, n))
    }

    fn depth_stage(&mut self, model_key: &str, params: &FieldParams) -> Result<(Vec<Grid<f64>>, String)> {
        let key = key_of(&serde_json::json!({ "stage": "depth", "model": model_key, "render": self.cfg.render }));
        let cams = self.dataset.cameras();
        let (w, h) = self.dataset.dims();
        let rcfg = self.cfg.render.clone();
        let compute = |dir: &Path| {
            for (v, d) in crate::consistency::expected_depths(params, &cams, &rcfg).iter().enumerate() {
                let bytes: Vec<u8> = d.as_slice().iter().flat_map(|x| x.to_le_bytes()).collect();
                write_bytes_atomically(&dir.join(view_file(v, "f64")), &bytes)?;
            }
            Ok(())
        };
        let load = |dir: &Path| {
            (0..cams.len())
                .map(|v| {
                    let path = dir.join(view_file(v, "f64"));
                    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    if bytes.len() != 8 * w * h {
                        return Err(Error::BadField {
                            path,
                            field: "length".into(),
                            reason: format!("expected {} bytes", 8 * w * h),
                        });
                    }
                    let vals = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
                    Grid::from_vec(w, h, vals.collect())
                })
                .collect::<Result<Vec<_>>>()
        };
        self.book.stage("depth", key, compute, load)
    }

    fn flag_stage(&mut self, metric: ScoreMetric, scores: (&ScoreMap, &str), depth: (&[Grid<f64>], &str)) -> Result<(FlagMap, String)> {
        let key = key_of(&serde_json::json!({
            "stage": "flags", "scores": scores.1, "depth": depth.1, "consistency": self.cfg.consistency,
        }));
        let cams = self.dataset.cameras();
        let cfg = self.cfg.consistency.clone();
        let compute = |dir: &Path| {
            let surfaces = SurfaceMaps::from_depths(&cams, depth.0)?;
            flag_all(&surfaces, scores.0, &cfg)?.save(dir)
        };
        self.book.stage(&format!("flags_{}", metric.name()), key, compute, FlagMap::load)
    }

    fn segment_stage(&mut self) -> Result<(Vec<SegmentMap>, String)> {
        let r = &self.cfg.refine;
        let key = key_of(&serde_json::json!({
            "stage": "segments", "dataset": self.dataset_key, "segmenter": self.cfg.segmenter,
            "k": r.k, "min_size": r.min_size, "sigma": r.sigma, "tile": r.tile,
        }));
        let dims = self.dataset.dims();
        let n = self.dataset.view_count();
        let provider = self.cfg.segmenter.provider();
        let (ds, seg, refine) = (&self.dataset, &self.cfg.segmenter, &self.cfg.refine);
        let compute = |dir: &Path| {
            let images: Vec<&RgbImage> = ds.views.iter().map(|v| &v.image).collect();
            for (v, s) in segment_views(&images, seg, refine)?.iter().enumerate() {
                s.save(&dir.join(view_file(v, "png")))?;
            }
            Ok(())
        };
        let load = |dir: &Path| (0..n).map(|v| SegmentMap::load(&dir.join(view_file(v, "png")), dims, provider)).collect();
        self.book.stage("segments", key, compute, load)
    }

    fn mask_stage(&mut self, variant: &Variant, upstream: serde_json::Value, make: impl FnOnce() -> Result<Vec<Mask>>) -> Result<(Vec<Mask>, String)> {
        let key = key_of(&serde_json::json!({
            "stage": "mask", "variant": variant, "upstream": upstream,
            "epsilon": self.cfg.refine.epsilon, "otsu_bins": self.cfg.otsu_bins,
        }));
        let n = self.dataset.view_count();
        let compute = |dir: &Path| {
            for (v, m) in make()?.iter().enumerate() {
                save_mask_png(&dir.join(view_file(v, "png")), m)?;
            }
            Ok(())
        };
        let load = |dir: &Path| (0..n).map(|v| load_mask_png(&dir.join(view_file(v, "png")))).collect();
        self.book.stage(&format!("mask_{}", variant.tag()), key, compute, load)
    }

    fn manifest(&self, metrics: RunMetrics) -> RunManifest {
        RunManifest {
            config: self.cfg.clone(),
            dataset_key: self.dataset_key.clone(),
            stages: self.book.stages.clone(),
            artifacts: self.book.artifacts.clone(),
            metrics,
        }
    }
}

/// Runs every variant against one shared baseline. Scores, depth, flags and
/// segments are computed once and reused by the variants that need them.
pub fn run_variants(cfg: &PipelineConfig, variants: &[Variant]) -> Result<RunManifest> {
    let mut r = Runner::new(cfg)?;
    let (params, base_key) = r.train_stage("baseline", &r.dataset_key.clone(), None)?;
    let baseline = r.eval_stage("eval_baseline", &base_key, &params)?;
    let gt = r.dataset.gt_masks();

    let mut scores: BTreeMap<&'static str, (ScoreMap, String)> = BTreeMap::new();
    let mut flags: BTreeMap<&'static str, (FlagMap, String)> = BTreeMap::new();
    let mut depth: Option<(Vec<Grid<f64>>, String)> = None;
    let mut segments: Option<(Vec<SegmentMap>, String)> = None;
    let mut results = Vec::new();

    for variant in variants {
        let m = variant.metric;
        if !scores.contains_key(m.name()) {
            let s = r.score_stage(m, &base_key, &params)?;
            scores.insert(m.name(), s);
        }
        let (score_map, score_key) = &scores[m.name()];
        if variant.pruning.uses_consistency() && !flags.contains_key(m.name()) {
            if depth.is_none() {
                depth = Some(r.depth_stage(&base_key, &params)?);
            }
            let (d, dk) = depth.as_ref().expect("set above");
            let f = r.flag_stage(m, (score_map, score_key), (d, dk))?;
            flags.insert(m.name(), f);
        }
        if variant.pruning == PruningMode::Segment && segments.is_none() {
            segments = Some(r.segment_stage()?);
        }
        let (mask, mask_key) = match variant.pruning {
            PruningMode::Topk { k } => r.mask_stage(variant, score_key.as_str().into(), || topk_mask(score_map, k))?,
            PruningMode::Otsu => {
                let bins = r.cfg.otsu_bins;
                r.mask_stage(variant, score_key.as_str().into(), || otsu_mask(score_map, bins))?
            }
            PruningMode::Pixel => {
                let (f, fk) = &flags[m.name()];
                r.mask_stage(variant, fk.as_str().into(), || Ok(f.flagged.clone()))?
            }
            PruningMode::Segment => {
                let (f, fk) = &flags[m.name()];
                let (s, sk) = segments.as_ref().expect("set above");
                let eps = r.cfg.refine.epsilon;
                r.mask_stage(variant, serde_json::json!([fk, sk]), || refine_pixel_to_segment(f, s, eps))?
            }
        };
        let mask_metrics = gt.as_deref().map(|g| mask_metrics(&mask, g)).transpose()?;
        let (keep, report) = prune(&r.dataset, &mask).map_err(|e| Error::Stage {
            stage: format!("prune_{}", variant.tag()),
            source: Box::new(e),
        })?;
        let (retrained, rk) = r.train_stage(&format!("retrain_{}", variant.tag()), &mask_key, Some(keep))?;
        let eval = r.eval_stage(&format!("eval_{}", variant.tag()), &rk, &retrained)?;
        log::info!(
            "{}: psnr {:.3} dB (baseline {:.3}), kept {:.4}",
            variant.tag(),
            eval.mean_psnr.0,
            baseline.mean_psnr.0,
            report.keep_fraction
        );
        results.push(VariantResult {
            variant: *variant,
            tag: variant.tag(),
            mask: mask_metrics,
            prune: report,
            eval,
        });
    }

    let manifest = r.manifest(RunMetrics {
        baseline,
        variants: results,
    });
    write_json_atomically(&r.book.out.join(RUN_MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Single run with the configured metric and pruning mode.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest> {
    run_variants(cfg, &[cfg.variant()])
}

/// Baseline plus the three ladder rungs on the configured metric. PSNR
/// ordering along the ladder is logged, not enforced.
pub fn run_ablation(cfg: &PipelineConfig) -> Result<RunManifest> {
    let manifest = run_variants(cfg, &ablation_ladder(cfg.metric))?;
    let mut prev = manifest.metrics.baseline.mean_psnr.0;
    for v in &manifest.metrics.variants {
        let now = v.eval.mean_psnr.0;
        if now < prev {
            log::warn!("ladder rung {} lowers PSNR: {now:.3} < {prev:.3}", v.tag);
        }
        prev = now;
    }
    Ok(manifest)
}

/// Checks that every artifact listed in a run manifest exists with its hash.
pub fn verify_manifest(out: &Path) -> Result<RunManifest> {
    let manifest: RunManifest = read_json(&out.join(RUN_MANIFEST_FILE))?;
    for (f, h) in &manifest.artifacts {
        let path = out.join(f);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        if &sha256_file(&path)? != h {
            return Err(Error::BadField {
                path,
                field: "sha256".into(),
                reason: "artifact content differs from the run manifest".into(),
            });
        }
    }
    Ok(manifest)
}
