use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "dataset.v_unlabeled=60",
    "--set",
    "bm.n_paths=100",
    "--set",
    "bm.n_steps=20",
    "--set",
    "lvm.m=15",
    "--set",
    "lvm.optimizer.max_iters=80",
    "--set",
    "gp.optimizer.max_iters=100",
];

fn gpum(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpum"))
        .arg("--out")
        .arg(out)
        .args(SMALL)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = gpum(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn staged_pipeline_runs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["gen-swiss"]);
    ok(out, &["train-lvm"]);
    ok(out, &["simulate", "--start", "2"]);
    ok(out, &["build-kernel"]);
    let fit = ok(out, &["fit"]);
    assert!(fit.contains("log marginal"));
    let pred = ok(out, &["predict"]);
    assert!(pred.contains("rmse"));
    for f in ["model.json", "boundary.json", "latents.csv", "paths.csv", "stack/meta.json", "fit.json", "predictions.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let preds = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 61);

    let stack = std::fs::read(out.join("stack/sigma_0010.csv")).unwrap();
    let model = std::fs::read(out.join("model.json")).unwrap();
    ok(out, &["train-lvm"]);
    ok(out, &["build-kernel"]);
    assert_eq!(model, std::fs::read(out.join("model.json")).unwrap());
    assert_eq!(stack, std::fs::read(out.join("stack/sigma_0010.csv")).unwrap());
}

#[test]
fn fit_on_row_subset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for s in ["gen-swiss", "train-lvm", "build-kernel"] {
        ok(out, &[s]);
    }
    ok(out, &["fit", "--rows", "0,1,2,3,4,5,6,7"]);
    let fit: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["rows"].as_array().unwrap().len(), 8);
    ok(out, &["predict"]);
    assert_eq!(code(&gpum(out, &["fit", "--rows", "0,500"])), 2);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(code(&gpum(out, &["gen-swiss", "--set", "bm.bogus=1"])), 2);
    assert_eq!(code(&gpum(out, &["gen-swiss", "--set", "bm.n_paths=0"])), 2);
    assert_eq!(code(&gpum(out, &["gen-swiss", "--set", "novalue"])), 2);
    // Downstream stage without its inputs.
    assert_eq!(code(&gpum(out, &["fit"])), 2);
}

#[test]
fn modified_artifact_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["gen-swiss"]);
    let p = out.join("data/labeled.csv");
    let mut text = std::fs::read_to_string(&p).unwrap();
    text = text.replacen('1', "2", 1);
    std::fs::write(&p, text).unwrap();
    let o = gpum(out, &["train-lvm"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-swiss"));
}

#[test]
fn io_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = gpum(dir.path(), &["gen-swiss", "--config", "/definitely/not/here.toml"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn numerical_domain_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = gpum(dir.path(), &["profile", "--analytic-only", "--set", "profile.start=[6.0, 20.0]"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("gpum profile:"));
}

#[test]
fn config_file_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 3\ndataset.n_labeled = 10\n[benchmark]\nn_train = 8\n").unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&a, &["gen-swiss", "--config", cfg.to_str().unwrap()]);
    ok(&b, &["gen-swiss", "--config", cfg.to_str().unwrap(), "--seed", "4"]);
    let la = std::fs::read_to_string(a.join("data/labeled.csv")).unwrap();
    let lb = std::fs::read_to_string(b.join("data/labeled.csv")).unwrap();
    assert_eq!(la.lines().count(), 11);
    assert_ne!(la, lb);
    let resolved = std::fs::read_to_string(b.join("gen-swiss.toml")).unwrap();
    assert!(resolved.contains("seed = 4"));
}

#[test]
fn analytic_profile_leaves_learned_column_empty() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["profile", "--analytic-only", "--set", "profile.n_paths_analytic=400", "--set", "profile.t=5"]);
    let text = std::fs::read_to_string(out.join("profile.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("target_radius,density_analytic,density_learned,mc_stderr"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 29);
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("")));
}

#[test]
fn benchmark_report_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let args = ["benchmark", "--set", "benchmark.repetitions=2", "--set", "benchmark.n_train=20"];
    let stdout = ok(out, &args);
    assert!(stdout.contains("gpum") && stdout.contains("graph_laplacian"));
    let first = std::fs::read(out.join("report.json")).unwrap();
    assert!(out.join("timings.json").exists());
    ok(out, &args);
    assert_eq!(first, std::fs::read(out.join("report.json")).unwrap());
}
