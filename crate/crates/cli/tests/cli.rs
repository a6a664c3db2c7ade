use std::fs;
use std::process::{Command, Output};

use tempfile::TempDir;

const BASE: &str = "dimension = 2\nsigma = 2, 0.5; 0.5, 1\nseed = 7\n";

fn run(dir: &TempDir, cmd: &str, cfg: &str) -> Output {
    let path = dir.path().join(format!("{cmd}.cfg"));
    fs::write(&path, cfg).unwrap();
    Command::new(env!("CARGO_BIN_EXE_scrb"))
        .args([cmd, "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(dir: &TempDir, name: &str) -> String {
    fs::read_to_string(dir.path().join("out").join(name)).unwrap()
}

fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

fn block(csv: &str, name: &str, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; q * q];
    for line in data_lines(csv).into_iter().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[0] == name {
            let (i, j): (usize, usize) = (f[1].parse().unwrap(), f[2].parse().unwrap());
            out[i * q + j] = f[3].parse().unwrap();
        }
    }
    out
}

#[test]
fn sample_writes_batch_with_fingerprint() {
    let dir = TempDir::new().unwrap();
    let cfg = format!("{BASE}generator = gaussian\nM = 100\n");
    let o = run(&dir, "sample", &cfg);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = read(&dir, "batch.csv");
    assert!(text.lines().any(|l| l.starts_with("# batch_fingerprint")));
    assert!(text.lines().any(|l| l.starts_with("# config_hash")));
    let rows = data_lines(&text);
    assert_eq!(rows[0], "x0,x1");
    assert_eq!(rows.len(), 101);
    assert!(rows[1..].iter().all(|r| r.split(',').count() == 2));

    let again = TempDir::new().unwrap();
    assert!(run(&again, "sample", &cfg).status.success());
    assert_eq!(text, read(&again, "batch.csv"));
}

#[test]
fn different_seeds_give_different_batches() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    assert!(run(&a, "sample", &format!("{BASE}M = 50\n"))
        .status
        .success());
    let other = BASE.replace("seed = 7", "seed = 8") + "M = 50\n";
    assert!(run(&b, "sample", &other).status.success());
    assert_ne!(
        data_lines(&read(&a, "batch.csv")),
        data_lines(&read(&b, "batch.csv"))
    );
}

#[test]
fn missing_variance_is_a_moment_error() {
    let dir = TempDir::new().unwrap();
    let o = run(
        &dir,
        "crb",
        &format!("{BASE}generator = student_t\nshape_param = 1.5\nM = 1000\n"),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).to_lowercase().contains("moment"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn gaussian_location_crb_matches_scatter() {
    let dir = TempDir::new().unwrap();
    let m = 200_000;
    let o = run(
        &dir,
        "crb",
        &format!("{BASE}generator = gaussian\ninterest = mu\nM = {m}\n"),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = read(&dir, "crb.csv");
    // sigma rescaled to trace 2
    let sigma = [4.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0];
    let tol = 4.0 / (m as f64).sqrt() * 2.0;
    for name in ["crb_schur", "crb_projection"] {
        let crb = block(&csv, name, 2);
        for (c, s) in crb.iter().zip(sigma) {
            assert!((c - s).abs() < tol * 4.0 / 3.0, "{name}: {crb:?}");
        }
    }
}

#[test]
fn tiny_batch_is_not_identifiable() {
    let dir = TempDir::new().unwrap();
    let o = run(&dir, "crb", &format!("{BASE}generator = gaussian\nM = 2\n"));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn non_nested_spline_schedule_is_rejected() {
    let dir = TempDir::new().unwrap();
    let o = run(
        &dir,
        "scrb",
        &format!("{BASE}family = bspline_quantile\nschedule = 2, 3\nM = 1000\n"),
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn single_trial_bench_is_rejected() {
    let dir = TempDir::new().unwrap();
    let o = run(&dir, "bench", &format!("{BASE}R = 1\nM = 100\n"));
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let o = run(&dir, "sample", &format!("{BASE}M = 10\ncolour = blue\n"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("colour"));
}

#[test]
fn scrb_trace_is_monotone() {
    let dir = TempDir::new().unwrap();
    let cfg = format!("{BASE}generator = student_t\nshape_param = 5\ninterest = shape\nschedule = 2, 4, 8\nM = 20000\n");
    let o = run(&dir, "scrb", &cfg);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = read(&dir, "scrb.csv");
    let rows: Vec<Vec<&str>> = data_lines(&csv)
        .into_iter()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(
        rows.iter().map(|r| r[0]).collect::<Vec<_>>(),
        ["2", "4", "8"]
    );
    let bound: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(bound.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{bound:?}");
}

#[test]
fn bench_reports_every_estimator() {
    let dir = TempDir::new().unwrap();
    let cfg = format!(
        "{BASE}generator = student_t\nshape_param = 4\ninterest = mu\nR = 20\nM = 200\nbound_M = 20000\nschedule = 2, 4\nestimators = sample_mean, tyler, huber:0.9, student_t:4\n"
    );
    let o = run(&dir, "bench", &cfg);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read(&dir, "bench.csv");
    assert_eq!(data_lines(&report).len(), 5);
    let trials = read(&dir, "bench_trials.csv");
    // 4 estimators, 20 trials, 2 coordinates
    assert_eq!(data_lines(&trials).len(), 1 + 4 * 20 * 2);
}
