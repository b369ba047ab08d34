use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use radprune::consistency::{expected_depths, flag_all, FlagMap, SurfaceMaps};
use radprune::field::{train, Checkpoint, FieldParams};
use radprune::influence::{ScoreMap, ScoreMetric, Scorer};
use radprune::pipeline::{
    benchmark_config, evaluate, mask_metrics, prune, run_ablation, run_pipeline, BenchmarkSpec, PipelineConfig,
};
use radprune::raster::{load_mask_png, save_mask_png, save_rgb_png, Mask};
use radprune::segment::{refine_pixel_to_segment, segment_views, SegmentMap};
use radprune::synth::{load_dataset, Dataset};
use radprune::{par, Error, Result};

#[derive(Parser)]
#[command(name = "radprune", version, about = "Distractor pruning for small radiance fields")]
struct Cli {
    /// Pipeline configuration (JSON); defaults apply to omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Single worker thread, so reductions run in one fixed order.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DatasetArg {
    /// Dataset root; overrides the configured one.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Loss,
    Gradnorm,
    SelfInfluence,
}

impl From<MetricArg> for ScoreMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Loss => ScoreMetric::Loss,
            MetricArg::Gradnorm => ScoreMetric::Gradnorm,
            MetricArg::SelfInfluence => ScoreMetric::SelfInfluence,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark dataset into --out.
    Synth {
        #[arg(long, default_value_t = 20)]
        views: usize,
        #[arg(long, default_value_t = 5)]
        test_views: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Probability that a view receives a distractor.
        #[arg(long, default_value_t = 0.5)]
        probability: f64,
    },
    /// Write a configuration file for the benchmark settings to stdout.
    InitConfig,
    /// Train a field on all pixels, or on the pixels outside --mask.
    Train {
        #[command(flatten)]
        dataset: DatasetArg,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Score every training pixel under a checkpoint.
    Score {
        #[command(flatten)]
        dataset: DatasetArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
    },
    /// Flag scores that disagree with their cross-view correspondences.
    Consistency {
        #[command(flatten)]
        dataset: DatasetArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Segment every training view.
    Segment {
        #[command(flatten)]
        dataset: DatasetArg,
    },
    /// Promote pixel flags to whole segments.
    Refine {
        #[arg(long)]
        flags: PathBuf,
        #[arg(long)]
        segments: PathBuf,
    },
    /// Remove masked pixels from the ray pool and retrain.
    PruneRetrain {
        #[command(flatten)]
        dataset: DatasetArg,
        #[arg(long)]
        mask: PathBuf,
    },
    /// PSNR/SSIM on held-out views, plus mask metrics when --mask is given.
    Eval {
        #[command(flatten)]
        dataset: DatasetArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Full run with the configured metric and pruning mode.
    Pipeline {
        #[command(flatten)]
        dataset: DatasetArg,
    },
    /// Baseline, Otsu-only, pixel flags and segment refinement in one run.
    Ablate {
        #[command(flatten)]
        dataset: DatasetArg,
    },
}

fn view_file(v: usize) -> String {
    format!("view_{v:04}.png")
}

fn out_dir(cli: &Cli, cfg: &PipelineConfig) -> Result<PathBuf> {
    let out = cli.out.clone().unwrap_or_else(|| cfg.out.clone());
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

fn config(cli: &Cli, dataset: Option<&DatasetArg>) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| Error::Config(e.to_string()))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(d) = dataset.and_then(|d| d.dataset.clone()) {
        cfg.dataset = d;
    }
    Ok(cfg.effective())
}

fn load_masks(dir: &Path, n: usize) -> Result<Vec<Mask>> {
    (0..n).map(|v| load_mask_png(&dir.join(view_file(v)))).collect()
}

fn save_masks(dir: &Path, masks: &[Mask]) -> Result<()> {
    masks.iter().enumerate().try_for_each(|(v, m)| save_mask_png(&dir.join(view_file(v)), m))
}

fn load_params(path: &Path) -> Result<FieldParams> {
    Checkpoint::load(path)?.params()
}

fn train_into(cfg: &PipelineConfig, ds: &Dataset, keep: Option<&[Mask]>, out: &Path) -> Result<()> {
    let (params, log) = train(ds, keep, &cfg.train, &cfg.render)?;
    log.write_csv(&out.join("train_log.csv"))?;
    let path = out.join("checkpoint.json");
    Checkpoint::new(&params, &cfg.train, &cfg.render).save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth {
            views,
            test_views,
            size,
            probability,
        } => {
            let cfg = config(cli, None)?;
            let mut spec = BenchmarkSpec::new(cfg.seed);
            spec.views = *views;
            spec.test_views = *test_views;
            spec.size = *size;
            spec.distractors.per_view_probability = *probability;
            let out = out_dir(cli, &cfg)?;
            let m = spec.generate(&out)?;
            println!("{} views written to {}", m.view_count, out.display());
        }
        Command::InitConfig => {
            let cfg = config(cli, None)?;
            print_json(&benchmark_config(&cfg.dataset, &cfg.out, cfg.seed));
        }
        Command::Train { dataset, mask } => {
            let cfg = config(cli, Some(dataset))?;
            let ds = load_dataset(&cfg.dataset)?;
            let keep = match mask {
                Some(m) => Some(prune(&ds, &load_masks(m, ds.view_count())?)?.0),
                None => None,
            };
            train_into(&cfg, &ds, keep.as_deref(), &out_dir(cli, &cfg)?)?;
        }
        Command::Score {
            dataset,
            checkpoint,
            metric,
        } => {
            let cfg = config(cli, Some(dataset))?;
            let ds = load_dataset(&cfg.dataset)?;
            let params = load_params(checkpoint)?;
            let metric = metric.map_or(cfg.metric, ScoreMetric::from);
            let scorer = Scorer::new(&params, &ds, &cfg.render, &cfg.train.loss, None)?;
            let out = out_dir(cli, &cfg)?;
            scorer.score(metric, &cfg.influence)?.save(&out, true)?;
            println!("{} scores written to {}", metric.name(), out.display());
        }
        Command::Consistency {
            dataset,
            checkpoint,
            scores,
        } => {
            let cfg = config(cli, Some(dataset))?;
            let ds = load_dataset(&cfg.dataset)?;
            let params = load_params(checkpoint)?;
            let cams = ds.cameras();
            let surfaces = SurfaceMaps::from_depths(&cams, &expected_depths(&params, &cams, &cfg.render))?;
            let scores = ScoreMap::load(scores, ds.view_count())?;
            let flags = flag_all(&surfaces, &scores, &cfg.consistency)?;
            flags.save(&out_dir(cli, &cfg)?)?;
            print_json(&flags.summary());
        }
        Command::Segment { dataset } => {
            let cfg = config(cli, Some(dataset))?;
            let ds = load_dataset(&cfg.dataset)?;
            let images: Vec<_> = ds.views.iter().map(|v| &v.image).collect();
            let out = out_dir(cli, &cfg)?;
            for (v, s) in segment_views(&images, &cfg.segmenter, &cfg.refine)?.iter().enumerate() {
                s.save(&out.join(view_file(v)))?;
                println!("view {v}: {} segments", s.count());
            }
        }
        Command::Refine { flags, segments } => {
            let cfg = config(cli, None)?;
            let flags = FlagMap::load(flags)?;
            let dims = flags.flagged.first().map(|m| m.dims()).unwrap_or((0, 0));
            let segs = (0..flags.flagged.len())
                .map(|v| SegmentMap::load(&segments.join(view_file(v)), dims, cfg.segmenter.provider()))
                .collect::<Result<Vec<_>>>()?;
            let masks = refine_pixel_to_segment(&flags, &segs, cfg.refine.epsilon)?;
            save_masks(&out_dir(cli, &cfg)?, &masks)?;
            println!("{} pixels marked", masks.iter().map(|m| m.count()).sum::<usize>());
        }
        Command::PruneRetrain { dataset, mask } => {
            let cfg = config(cli, Some(dataset))?;
            let ds = load_dataset(&cfg.dataset)?;
            let (keep, report) = prune(&ds, &load_masks(mask, ds.view_count())?)?;
            print_json(&report);
            train_into(&cfg, &ds, Some(&keep), &out_dir(cli, &cfg)?)?;
        }
        Command::Eval {
            dataset,
            checkpoint,
            mask,
        } => {
            let cfg = config(cli, Some(dataset))?;
            let ds = load_dataset(&cfg.dataset)?;
            let (metrics, renders) = evaluate(&load_params(checkpoint)?, &ds, &cfg.render)?;
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                for (v, r) in renders.iter().enumerate() {
                    save_rgb_png(&out.join(view_file(v)), r)?;
                }
            }
            print_json(&metrics);
            if let (Some(m), Some(gt)) = (mask, ds.gt_masks()) {
                print_json(&mask_metrics(&load_masks(m, ds.view_count())?, &gt)?);
            }
        }
        Command::Pipeline { dataset } => {
            let m = run_pipeline(&config(cli, Some(dataset))?)?;
            print_json(&m.metrics);
        }
        Command::Ablate { dataset } => {
            let m = run_ablation(&config(cli, Some(dataset))?)?;
            print_json(&m.metrics);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match par::with_threads(cli.deterministic, || run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
