//! End-to-end runs of the `amg` binary on small datasets.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use amg_core::baseline::MlpConfig;
use amg_core::checkpoint::{self, ModelSpec, Net};
use amg_core::data::read_dataset;
use amg_core::model::NeuralOperator;
use amg_core::run::metrics_without_wall_time;
use amg_core::train::{Normalizer, TrainConfig};

fn amg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amg")).args(args).current_dir(cwd).output().expect("spawn amg")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = amg(args, cwd);
    assert!(
        out.status.success(),
        "amg {args:?} exited {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    amg(args, cwd).status.code().expect("exit code")
}

/// 4 train / 1 val / 2 test samples of 48 points.
fn small_dataset(cwd: &Path, name: &str, seed: &str) {
    ok(
        &["generate", "--out", name, "--train", "4", "--val", "1", "--test", "2", "--n-points", "48", "--grid-n", "33", "--seed", seed],
        cwd,
    );
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn same_tree(a: &Path, b: &Path) {
    let (fa, fb) = (files(a), files(b));
    assert_eq!(fa, fb);
    for f in fa {
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{}", f.display());
    }
}

#[test]
fn generate_writes_counts_and_refuses_to_overwrite() {
    let t = tempfile::tempdir().unwrap();
    small_dataset(t.path(), "ds", "1");
    let ds = t.path().join("ds");
    let recs = files(&ds).into_iter().filter(|p| p.extension().is_some_and(|e| e == "rec")).count();
    assert_eq!(recs, 7);
    assert!(ds.join("manifest.toml").exists() && ds.join("config.toml").exists());

    assert_eq!(code(&["generate", "--out", "ds", "--train", "1", "--val", "1", "--test", "1"], t.path()), 2);
    fs::write(ds.join("notes.txt"), "keep").unwrap();
    ok(
        &["generate", "--out", "ds", "--train", "1", "--val", "1", "--test", "1", "--n-points", "32", "--grid-n", "17", "--force"],
        t.path(),
    );
    let recs = files(&ds).into_iter().filter(|p| p.extension().is_some_and(|e| e == "rec")).count();
    assert_eq!(recs, 3);
    assert_eq!(fs::read_to_string(ds.join("notes.txt")).unwrap(), "keep");
}

#[test]
fn generate_replays_bitwise_from_seed_and_from_resolved_config() {
    let t = tempfile::tempdir().unwrap();
    small_dataset(t.path(), "a", "5");
    small_dataset(t.path(), "b", "5");
    same_tree(&t.path().join("a"), &t.path().join("b"));
    ok(&["generate", "--out", "c", "--config", "a/config.toml"], t.path());
    same_tree(&t.path().join("a"), &t.path().join("c"));
    small_dataset(t.path(), "d", "6");
    assert_ne!(fs::read(t.path().join("a/train/000000.rec")).unwrap(), fs::read(t.path().join("d/train/000000.rec")).unwrap());
}

#[test]
fn bad_inputs_exit_2() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&["train", "--data", "missing", "--out", "run", "--epochs", "1"], t.path()), 2);
    assert_eq!(code(&["eval", "--data", "missing", "--checkpoint", "missing", "--out", "ev"], t.path()), 2);
    assert_eq!(code(&["train", "--bogus"], t.path()), 2);
    fs::write(t.path().join("bad.toml"), "[train]\nepoch = 3\n").unwrap();
    assert_eq!(code(&["generate", "--out", "ds", "--config", "bad.toml"], t.path()), 2);
}

#[test]
fn train_amg_and_mlp_smoke_runs_and_replays_from_config() {
    let t = tempfile::tempdir().unwrap();
    small_dataset(t.path(), "ds", "2");
    ok(&["train", "--data", "ds", "--out", "amg", "--epochs", "1", "--seed", "4"], t.path());
    ok(&["train", "--data", "ds", "--out", "mlp", "--model", "mlp", "--epochs", "2", "--precision", "f32"], t.path());
    for run in ["amg", "mlp"] {
        let dir = t.path().join(run);
        assert!(dir.join("config.toml").exists() && dir.join("final/params.bin").exists());
        let m = fs::read_to_string(dir.join("metrics.csv")).unwrap();
        assert!(m.starts_with("epoch,train_loss,val_rel_l2_u,lr,wall_time_s\n"), "{m}");
    }
    assert_eq!(checkpoint::read_manifest(&t.path().join("mlp/final")).unwrap().precision, "f32");

    ok(&["train", "--data", "ds", "--out", "replay", "--config", "amg/config.toml"], t.path());
    assert_eq!(metrics_without_wall_time(&t.path().join("amg")).unwrap(), metrics_without_wall_time(&t.path().join("replay")).unwrap());
    assert_eq!(fs::read(t.path().join("amg/final/params.bin")).unwrap(), fs::read(t.path().join("replay/final/params.bin")).unwrap());
}

#[test]
fn non_finite_training_exits_3() {
    let t = tempfile::tempdir().unwrap();
    small_dataset(t.path(), "ds", "2");
    assert_eq!(code(&["train", "--data", "ds", "--out", "run", "--model", "mlp", "--epochs", "2", "--lr", "1e300"], t.path()), 3);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let t = tempfile::tempdir().unwrap();
    small_dataset(t.path(), "ds", "3");
    ok(&["train", "--data", "ds", "--out", "full", "--epochs", "2", "--checkpoint-every", "1"], t.path());
    ok(&["train", "--data", "ds", "--out", "part", "--epochs", "1"], t.path());
    ok(&["train", "--data", "ds", "--out", "part", "--resume", "part/final", "--epochs", "2"], t.path());
    assert_eq!(fs::read(t.path().join("full/final/params.bin")).unwrap(), fs::read(t.path().join("part/final/params.bin")).unwrap());
    assert_eq!(fs::read(t.path().join("full/final/optimizer.bin")).unwrap(), fs::read(t.path().join("part/final/optimizer.bin")).unwrap());
    assert_eq!(metrics_without_wall_time(&t.path().join("full")).unwrap(), metrics_without_wall_time(&t.path().join("part")).unwrap());
    assert_eq!(code(&["train", "--data", "ds", "--out", "x", "--resume", "part/final", "--lr", "1"], t.path()), 2);
}

#[test]
fn eval_is_deterministic_and_null_predictor_scores_one() {
    let t = tempfile::tempdir().unwrap();
    small_dataset(t.path(), "ds", "4");
    let data = read_dataset(&t.path().join("ds")).unwrap();
    let norm = Normalizer::fit(&data.train).unwrap();
    let mut net = Net::<f64>::new(&ModelSpec::Mlp(MlpConfig::default())).unwrap();
    for p in net.params_mut().tensors_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    checkpoint::save(&t.path().join("zero"), &net, &norm, &TrainConfig::default(), None, 0).unwrap();

    ok(&["eval", "--checkpoint", "zero", "--data", "ds", "--out", "ev1"], t.path());
    ok(&["eval", "--checkpoint", "zero", "--data", "ds", "--out", "ev2"], t.path());
    same_tree(&t.path().join("ev1"), &t.path().join("ev2"));
    let csv = fs::read_to_string(t.path().join("ev1/report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "sample,u");
    assert_eq!(lines.len(), 4);
    assert_eq!(*lines.last().unwrap(), "mean,1.0");
    let preds = fs::read_to_string(t.path().join("ev1/predictions.csv")).unwrap();
    assert_eq!(preds.lines().next().unwrap(), "sample,node,x,y,a,pred_u,target_u");
    assert_eq!(preds.lines().count(), 1 + 2 * 48);

    let wide = Net::<f64>::new(&ModelSpec::Mlp(MlpConfig { d_u: 2, ..MlpConfig::default() })).unwrap();
    checkpoint::save(&t.path().join("wide"), &wide, &Normalizer::identity(1, 2), &TrainConfig::default(), None, 0).unwrap();
    assert_eq!(code(&["eval", "--checkpoint", "wide", "--data", "ds", "--out", "ev3"], t.path()), 2);
}

#[test]
fn inspect_graph_dumps_all_three_graphs() {
    let t = tempfile::tempdir().unwrap();
    small_dataset(t.path(), "ds", "5");
    let summary = ok(&["inspect-graph", "--data", "ds", "--out", "ig", "--index", "1"], t.path());
    assert!(summary.contains("M^2 = 1024: ok"), "{summary}");
    let ig = t.path().join("ig");
    for f in ["nodes.csv", "selected.csv", "edges.csv", "degrees.csv", "summary.txt", "config.toml"] {
        assert!(ig.join(f).exists(), "{f}");
    }
    let edges = fs::read_to_string(ig.join("edges.csv")).unwrap();
    assert_eq!(edges.lines().filter(|l| l.starts_with("physics,")).count(), 32 * 32);
    let nodes = fs::read_to_string(ig.join("nodes.csv")).unwrap();
    assert_eq!(nodes.lines().count(), 1 + 48);
    // every node of every graph has a self-loop, so no zero-degree bucket
    let degrees = fs::read_to_string(ig.join("degrees.csv")).unwrap();
    for line in degrees.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_ne!(cols[1], "0", "{line}");
    }
    let again = ok(&["inspect-graph", "--data", "ds", "--out", "ig2", "--index", "1"], t.path());
    assert_eq!(summary, again);
    same_tree(&ig, &t.path().join("ig2"));
    assert_eq!(code(&["inspect-graph", "--data", "ds", "--out", "ig3", "--index", "99"], t.path()), 2);
}

#[test]
fn verify_filters_and_detects_injected_faults() {
    let t = tempfile::tempdir().unwrap();
    let out = ok(&["verify", "--only", "mc-integral", "--out", "v"], t.path());
    assert!(out.starts_with("PASS mc-integral"), "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).count(), 1);
    assert!(t.path().join("v/verify.txt").exists());
    assert_eq!(code(&["verify", "--only", "nonsense"], t.path()), 2);
    assert_eq!(code(&["verify", "--inject", "nonsense"], t.path()), 2);
    let bad = amg(&["verify", "--only", "grad-check", "--inject", "perturb-gradient"], t.path());
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL grad-check"));
}
