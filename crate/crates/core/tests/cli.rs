use std::path::{Path, PathBuf};
use std::process::Command;

use mom_core::recall::{run_experiment, ExperimentConfig, Precision};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn mom(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mom")).arg("--quiet").arg("--out").arg(out).args(args).output().unwrap()
}

#[test]
fn shipped_configs_parse() {
    for name in ["mom.toml", "expanded.toml", "single.toml", "tiny.toml"] {
        let cfg = ExperimentConfig::load(&configs().join(name)).unwrap();
        cfg.validate().unwrap();
    }
    let mom = ExperimentConfig::load(&configs().join("mom.toml")).unwrap();
    let expanded = ExperimentConfig::load(&configs().join("expanded.toml")).unwrap();
    assert_eq!(mom.task, expanded.task);
    assert_eq!(mom.train, expanded.train);
    // equal activated value width: (top_k + shared) memories of d_v
    assert_eq!(expanded.model.layer_config().d_v, 3 * mom.model.d_v);
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = configs().join("tiny.toml");
    let out = mom(&["train", "--config", tiny.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let loss = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let mut lines = loss.lines();
    assert_eq!(lines.next(), Some("step,loss,aux_loss"));
    assert_eq!(lines.count(), 20);

    let routing = std::fs::read_to_string(dir.path().join("routing.csv")).unwrap();
    let mut rows = routing.lines();
    assert_eq!(rows.next(), Some("layer,memory,fraction"));
    let total: f64 = rows.map(|r| r.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-6, "one layer, fractions sum to {total}");

    let run: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("run.json")).unwrap()).unwrap();
    assert!(run["invariants"].as_array().unwrap().iter().all(|c| c["pass"] == true));
    assert!(run.get("wall_time").is_none());
}

#[test]
fn bad_config_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "name = \"bad\"\n[task]\nvocab_size = 4\n").unwrap();
    let out = mom(&["train", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn equivalence_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = mom(&["equivalence", "--trials", "5"], dir.path());
    assert!(out.status.success());
    assert!(dir.path().join("equivalence.json").exists());
}

#[test]
fn f32_training_tracks_f64() {
    let cfg = ExperimentConfig::load(&configs().join("tiny.toml")).unwrap();
    let mut single = cfg.clone();
    single.precision = Precision::F32;
    let a = run_experiment(&cfg, &mut |_| {}).unwrap();
    let b = run_experiment(&single, &mut |_| {}).unwrap();
    assert_eq!(a.loss.len(), b.loss.len());
    let (first_a, first_b) = (a.loss[0].loss, b.loss[0].loss);
    assert!((first_a - first_b).abs() < 1e-4 * first_a.abs(), "{first_a} vs {first_b}");
}
