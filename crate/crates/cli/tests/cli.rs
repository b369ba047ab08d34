use std::path::Path;
use std::process::{Command, Output};

fn radprune(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radprune"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = r#"{
  "render": {"t_near": 2.8, "t_far": 7.5, "n_samples": 8, "background": [0.05, 0.05, 0.08], "stratified": true},
  "train": {
    "arch": {"encoding": {"pos_frequencies": 2, "dir_frequencies": 1}, "trunk_width": 8, "trunk_depth": 2, "color_width": 6},
    "iterations": 60, "batch_rays": 8, "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-6,
    "lr_start": 0.002, "lr_end": 0.0002, "warmup": 10,
    "loss": {"kind": "charbonnier", "charbonnier_eps": 0.001}, "seed": 0
  },
  "pruning": {"kind": "topk", "k": 5}
}"#;

fn setup(dir: &Path) {
    std::fs::write(dir.join("tiny.json"), TINY).unwrap();
    ok(radprune(
        &["synth", "--views", "6", "--test-views", "2", "--size", "16", "--seed", "2", "--out", "data"],
        dir,
    ));
}

#[test]
fn stage_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d);
    let c = ["--config", "tiny.json", "--dataset", "data"];
    let with = |cmd: &str, extra: &[&str]| {
        let mut a = vec![cmd];
        a.extend_from_slice(&c);
        a.extend_from_slice(extra);
        ok(radprune(&a, d))
    };
    with("train", &["--out", "base"]);
    assert!(d.join("base/checkpoint.json").exists());
    with("score", &["--checkpoint", "base/checkpoint.json", "--metric", "self-influence", "--out", "scores"]);
    assert!(d.join("scores/view_0005.f32").exists());
    let summary = with("consistency", &["--checkpoint", "base/checkpoint.json", "--scores", "scores", "--out", "flags"]);
    assert!(summary.contains("undetermined"));
    with("segment", &["--out", "segs"]);
    ok(radprune(&["refine", "--config", "tiny.json", "--flags", "flags", "--segments", "segs", "--out", "mask"], d));
    assert!(d.join("mask/view_0000.png").exists());
    with("prune-retrain", &["--mask", "mask", "--out", "retrained"]);
    let metrics = with("eval", &["--checkpoint", "retrained/checkpoint.json", "--mask", "mask"]);
    assert!(metrics.contains("mean_psnr") && metrics.contains("precision"));
}

#[test]
fn pipeline_and_deterministic_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d);
    let a = ok(radprune(&["pipeline", "--config", "tiny.json", "--dataset", "data", "--out", "r1", "--deterministic"], d));
    let b = ok(radprune(&["pipeline", "--config", "tiny.json", "--dataset", "data", "--out", "r2", "--deterministic"], d));
    assert_eq!(a, b);
    assert!(d.join("r1/run_manifest.json").exists());
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d);
    // configuration problems
    assert_eq!(radprune(&["train", "--config", "missing.json"], d).status.code(), Some(2));
    std::fs::write(d.join("bad.json"), "{\"seed\": \"x\"}").unwrap();
    assert_eq!(radprune(&["train", "--config", "bad.json"], d).status.code(), Some(2));
    assert_eq!(radprune(&["no-such-command"], d).status.code(), Some(2));
    // data problems
    assert_eq!(radprune(&["train", "--config", "tiny.json", "--dataset", "nowhere"], d).status.code(), Some(3));
    // numerical problems: a learning rate that overflows the parameters
    let blow = TINY.replace("\"lr_start\": 0.002", "\"lr_start\": 1e300");
    std::fs::write(d.join("blow.json"), blow).unwrap();
    let out = radprune(&["train", "--config", "blow.json", "--dataset", "data", "--out", "x"], d);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn init_config_is_loadable() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = ok(radprune(&["init-config", "--seed", "4"], d));
    std::fs::write(d.join("bench.json"), &out).unwrap();
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["seed"], 4);
    assert_eq!(v["train"]["iterations"], 20000);
}
