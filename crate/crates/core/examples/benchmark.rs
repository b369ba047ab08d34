//! Runs the synthetic distractor benchmark for one seed and prints the
//! ablation ladder and the top-k metric comparison.
//!
//! ```text
//! cargo run --release -p radprune --example benchmark -- [seed] [out_dir]
//! ```

use std::path::PathBuf;

use radprune::influence::ScoreMetric;
use radprune::pipeline::{ablation_ladder, benchmark_config, run_variants, BenchmarkSpec, PruningMode, Variant};

fn main() -> radprune::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let root = args.next().map_or_else(|| std::env::temp_dir().join("radprune-benchmark"), PathBuf::from);
    let data = root.join(format!("data_{seed}"));
    let out = root.join(format!("run_{seed}"));
    BenchmarkSpec::new(seed).generate(&data)?;

    let mut variants = ablation_ladder(ScoreMetric::SelfInfluence);
    for k in [5.0, 10.0] {
        for metric in [ScoreMetric::Loss, ScoreMetric::SelfInfluence] {
            variants.push(Variant {
                metric,
                pruning: PruningMode::Topk { k },
            });
        }
    }
    let m = run_variants(&benchmark_config(&data, &out, seed), &variants)?;
    println!("baseline: psnr {:.3}", m.metrics.baseline.mean_psnr.0);
    for v in &m.metrics.variants {
        let mm = v.mask.expect("benchmark has ground truth");
        println!(
            "{:32} psnr {:.3}  precision {:.3} recall {:.3} iou {:.3} kept {:.4}",
            v.tag, v.eval.mean_psnr.0, mm.precision, mm.recall, mm.iou, v.prune.keep_fraction
        );
    }
    for s in &m.stages {
        println!("{:36} {:8.1} s", s.name, s.seconds);
    }
    Ok(())
}
