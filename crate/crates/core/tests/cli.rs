use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ideal::report::metrics_without_seconds;
use ideal::service::{spawn, ServiceConfig};
use ideal::tensor::SeededRng;

fn ideal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ideal"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("IDEAL_API_KEY")
        .output()
        .unwrap()
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

fn write_idx(dir: &Path, prefix: &str, n: usize, classes: usize, seed: u64) {
    let mut rng = SeededRng::new(seed, prefix);
    let labels: Vec<u8> = (0..n).map(|i| (i % classes) as u8).collect();
    let mut images = Vec::with_capacity(16 + n * 784);
    images.extend_from_slice(&0x0803u32.to_be_bytes());
    for d in [n as u32, 28, 28] {
        images.extend_from_slice(&d.to_be_bytes());
    }
    for &l in &labels {
        // A bright block whose position encodes the class, plus noise.
        for p in 0..784 {
            let (r, c) = (p / 28, p % 28);
            let on = r / 7 == (l as usize) % 4 && c / 7 == (l as usize) / 4;
            let noise = (rng.uniform(&[1], 0.0, 40.0).data()[0]) as u8;
            images.push(if on { 255 - noise } else { noise });
        }
    }
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&0x0801u32.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(&labels);
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
}

fn dataset(dir: &Path, classes: usize) {
    fs::create_dir_all(dir).unwrap();
    write_idx(dir, "train", 200, classes, 1);
    write_idx(dir, "t10k", 60, classes, 2);
}

fn teacher(dir: &Path, data: &Path, seed: &str) -> (std::path::PathBuf, String) {
    let out = dir.join(format!("t{seed}.w"));
    let o = ideal(&[
        "train-teacher", "--arch", "mlp", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--epochs", "2", "--seed", seed,
    ]);
    assert!(o.status.success(), "{}", text(&o));
    (out, String::from_utf8_lossy(&o.stdout).into_owned())
}

const SMALL_RUN: &[&str] = &[
    "--budget", "200", "--batch-size", "50", "--gen-rounds", "1", "--inner-steps", "1", "--student-arch", "mlp",
    "--eval-every", "2", "--seed", "3",
];

#[test]
fn usage_errors_exit_nonzero() {
    let o = ideal(&["train-teacher", "--out", "x.w"]);
    assert!(!o.status.success());
    assert!(text(&o).contains("--data"), "{}", text(&o));
    assert!(!ideal(&["no-such-command"]).status.success());
    assert!(!ideal(&["distill", "--out", "/tmp/never"]).status.success());
}

#[test]
fn indivisible_budget_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = ideal(&[
        "distill", "--teacher-weights", "/nonexistent.w", "--out", run.to_str().unwrap(), "--budget", "25001",
        "--batch-size", "250",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("multiple of the batch size"), "{}", text(&o));
    assert!(!run.exists(), "a rejected config must not leave a run directory");
}

#[test]
fn teacher_training_is_deterministic_and_eval_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    dataset(&data, 10);
    let (a, report) = teacher(dir.path(), &data, "7");
    let a2 = dir.path().join("again.w");
    let o = ideal(&[
        "train-teacher", "--arch", "mlp", "--data", data.to_str().unwrap(), "--out", a2.to_str().unwrap(), "--epochs",
        "2", "--seed", "7",
    ]);
    assert!(o.status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&a2).unwrap());

    let reported = report.trim().rsplit(' ').next().unwrap().to_string();
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.with_extension("json")).unwrap()).unwrap();
    assert_eq!(json["arch"], "mlp");
    let o = ideal(&["eval", "--weights", a.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), reported);
}

#[test]
fn eval_rejects_class_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (ten, two) = (dir.path().join("ten"), dir.path().join("two"));
    dataset(&ten, 10);
    dataset(&two, 2);
    let (w, _) = teacher(dir.path(), &ten, "1");
    let o = ideal(&["eval", "--weights", w.to_str().unwrap(), "--data", two.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("classes"), "{}", text(&o));
}

#[test]
fn distill_writes_run_directory_and_replays_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    dataset(&data, 10);
    let (w, _) = teacher(dir.path(), &data, "2");
    let run = dir.path().join("run");
    let mut args = vec!["distill", "--teacher-weights", w.to_str().unwrap(), "--out", run.to_str().unwrap()];
    args.extend(["--eval-data", data.to_str().unwrap()]);
    args.extend(SMALL_RUN);
    let o = ideal(&args);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["manifest.json", "metrics.csv", "student.w", "generator.w"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    assert!(!run.join("FAILED").exists());
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(csv.starts_with("epoch,l_ce,l_info,l_gen,l_md,queries_used,test_acc,seconds\n"));
    assert!(csv.lines().last().unwrap().contains(",200,"));

    let rerun = dir.path().join("rerun");
    let o = ideal(&[
        "distill", "--manifest", run.join("manifest.json").to_str().unwrap(), "--out", rerun.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let again = fs::read_to_string(rerun.join("metrics.csv")).unwrap();
    assert_eq!(metrics_without_seconds(&csv), metrics_without_seconds(&again));
    assert_eq!(fs::read(run.join("student.w")).unwrap(), fs::read(rerun.join("student.w")).unwrap());

    let pgm = dir.path().join("grid.pgm");
    let o = ideal(&["visualize", "--generator", run.to_str().unwrap(), "--out", pgm.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let bytes = fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n280 280\n255\n"));
    assert_eq!(bytes.len(), b"P5\n280 280\n255\n".len() + 280 * 280);
}

#[test]
fn visualize_without_snapshot_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.pgm");
    let o = ideal(&["visualize", "--generator", dir.path().to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn remote_run_matches_local_and_stops_cleanly_when_budget_runs_out() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    dataset(&data, 10);
    let (w, _) = teacher(dir.path(), &data, "5");
    let local = dir.path().join("local");
    let mut args = vec!["distill", "--teacher-weights", w.to_str().unwrap(), "--out", local.to_str().unwrap()];
    args.extend(SMALL_RUN);
    assert!(ideal(&args).status.success());

    let svc = spawn(ServiceConfig {
        bind: "127.0.0.1:0".parse().unwrap(),
        teacher_weights: w.clone(),
        budgets: HashMap::from([("full".to_string(), 200), ("short".to_string(), 120)]),
        usage_log: None,
    })
    .unwrap();
    let url = svc.url();
    let remote = dir.path().join("remote");
    let mut args = vec!["distill", "--oracle-url", &url, "--api-key", "full", "--out", remote.to_str().unwrap()];
    args.extend(SMALL_RUN);
    let o = ideal(&args);
    assert!(o.status.success(), "{}", text(&o));
    let read = |p: &Path| metrics_without_seconds(&fs::read_to_string(p.join("metrics.csv")).unwrap());
    assert_eq!(read(&local), read(&remote));

    let short = dir.path().join("short");
    let o = Command::new(env!("CARGO_BIN_EXE_ideal"))
        .args(["distill", "--oracle-url", &url, "--out", short.to_str().unwrap()])
        .args(SMALL_RUN)
        .env("IDEAL_API_KEY", "short")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    assert!(short.join("FAILED").is_file());
    assert!(short.join("manifest.json").is_file());
    assert_eq!(fs::read_to_string(short.join("metrics.csv")).unwrap().lines().count(), 1 + 2);
    assert!(!short.join("student.w").exists());
}
