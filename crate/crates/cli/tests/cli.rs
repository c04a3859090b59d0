use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use plastica::taskstream::Dataset;

fn plastica(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plastica"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("PLASTICA_OUT")
        .output()
        .expect("spawn plastica")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A tiny dataset plus a config pointing at it.
fn fixture() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let o = plastica(
        &["gen-data", "--classes", "6", "--per-class", "14", "--size", "16", "--seed", "1", "--out", "data.clds"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "# tiny smoke run\nnet.activation = reludown\ndbp.enabled = true\nstream.n_tasks = 2\nstream.epochs = 1\nstream.batch = 8\ndata.path = data.clds\nout.dir = out\nhist.tasks = 0\n",
    )
    .unwrap();
    (dir, cfg)
}

fn rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn gen_data_writes_a_readable_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = plastica(
        &["gen-data", "--classes", "10", "--per-class", "70", "--size", "16", "--seed", "1", "--out", "d.clds"],
        dir.path(),
    );
    assert!(o.status.success());
    let d = Dataset::read(&dir.path().join("d.clds")).unwrap();
    assert_eq!((d.n_classes, d.per_class, d.height, d.width, d.channels), (10, 70, 16, 16, 3));
    let again = plastica(
        &["gen-data", "--classes", "10", "--per-class", "70", "--size", "16", "--seed", "1", "--out", "e.clds"],
        dir.path(),
    );
    assert!(again.status.success());
    assert_eq!(fs::read(dir.path().join("d.clds")).unwrap(), fs::read(dir.path().join("e.clds")).unwrap());
}

#[test]
fn run_writes_metrics_histograms_and_resolved_config() {
    let (dir, cfg) = fixture();
    let o = plastica(&["run", cfg.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    let metrics = rows(&out.join("metrics.csv"));
    assert_eq!(metrics[0], "task,method,plasticity_acc,stability_acc,wall_time_s");
    assert_eq!(metrics.len(), 3);
    let first: Vec<&str> = metrics[1].split(',').collect();
    assert_eq!(first[0], "0");
    assert_eq!(first[1], "rdbp");
    assert_eq!(first[3], "", "no stability for the first task");
    assert!(!metrics[2].split(',').nth(3).unwrap().is_empty());
    assert_eq!(rows(&out.join("timing.csv")).len(), 3);
    let hist = rows(&out.join("hist_0.csv"));
    assert_eq!(hist[0], "layer,bin_lo,bin_hi,count");
    assert!(hist.iter().any(|l| l.starts_with("conv1,dormant_fraction,")));
    let resolved = fs::read_to_string(out.join("resolved_config.txt")).unwrap();
    assert!(resolved.contains("net.layers = 5-deep"));
    assert!(resolved.contains("train.lr = 0.01"));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let (dir, cfg) = fixture();
    assert!(plastica(&["run", cfg.to_str().unwrap()], dir.path()).status.success());
    let first = fs::read(dir.path().join("out/metrics.csv")).unwrap();
    fs::copy(dir.path().join("out/resolved_config.txt"), dir.path().join("again.cfg")).unwrap();
    let o = plastica(&["run", "again.cfg", "--set", "out.dir=out2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(first, fs::read(dir.path().join("out2/metrics.csv")).unwrap());
}

#[test]
fn set_overrides_task_count() {
    let (dir, cfg) = fixture();
    let o = plastica(&["run", cfg.to_str().unwrap(), "--set", "stream.n_tasks=5"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(rows(&dir.path().join("out/metrics.csv")).len(), 6);
}

#[test]
fn env_overrides_output_dir() {
    let (dir, cfg) = fixture();
    let o = Command::new(env!("CARGO_BIN_EXE_plastica"))
        .args(["run", cfg.to_str().unwrap()])
        .current_dir(dir.path())
        .env("RUST_LOG", "warn")
        .env("PLASTICA_OUT", "elsewhere")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("elsewhere/metrics.csv").exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_data_file_is_a_usage_error() {
    let (dir, cfg) = fixture();
    let o = plastica(&["run", cfg.to_str().unwrap(), "--set", "data.path=nowhere.clds"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.clds"));
}

#[test]
fn nonpositive_dbp_asymptote_is_a_usage_error() {
    let (dir, cfg) = fixture();
    let o = plastica(
        &["run", cfg.to_str().unwrap(), "--set", "dbp.f=0.2", "net.layers=6-deep"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("asymptotic factor nonpositive"), "{}", stderr(&o));
}

#[test]
fn batch_larger_than_a_task_is_a_usage_error() {
    let (dir, cfg) = fixture();
    let o = plastica(&["run", cfg.to_str().unwrap(), "--set", "stream.batch=500"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!dir.path().join("out/metrics.csv").exists());
}

#[test]
fn unknown_key_reports_the_line() {
    let (dir, _) = fixture();
    fs::write(dir.path().join("bad.cfg"), "stream.n_tasks = 2\nstream.epoch = 3\n").unwrap();
    let o = plastica(&["run", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 2") && err.contains("stream.epoch = 3"), "{err}");
}

#[test]
fn corrupted_magic_is_a_usage_error() {
    let (dir, cfg) = fixture();
    let path = dir.path().join("data.clds");
    let mut bytes = fs::read(&path).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    fs::write(&path, bytes).unwrap();
    let o = plastica(&["run", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad magic"));
}

#[test]
fn plot_draws_two_panels_and_skips_missing_stability() {
    let (dir, cfg) = fixture();
    assert!(plastica(&["run", cfg.to_str().unwrap()], dir.path()).status.success());
    let o = plastica(&["plot", "out/metrics.csv", "--out", "fig.svg", "--reference", "0.95"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(dir.path().join("fig.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    // the stability series has a single point (task 1); task 0 is not drawn as zero
    let stability = svg.split("<polyline").nth(2).unwrap();
    let points = stability.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
    assert_eq!(points.split(' ').count(), 1);
    assert!(svg.contains("stroke-dasharray"));
}

#[test]
fn plot_reports_malformed_row() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("m.csv"),
        "task,method,plasticity_acc,stability_acc,wall_time_s\n0,relu,0.9,,\n1,relu,oops,0.8,\n",
    )
    .unwrap();
    let o = plastica(&["plot", "m.csv", "--out", "f.svg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 3"), "{}", stderr(&o));
}

#[test]
fn grad_check_small_stack_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = plastica(
        &["grad-check", "--seed", "3", "--instances", "5", "--samples", "20", "--layers", "5-deep"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("network 5-deep with pau"));
    assert!(out.contains("all gradient checks passed"));
}
