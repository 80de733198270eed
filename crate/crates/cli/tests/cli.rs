use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use cvdm_core::io::{read_npy, Checkpoint};
use cvdm_core::metrics::MetricReport;
use cvdm_core::qpi::read_manifest;

fn base(count: usize, limit: usize) -> String {
    format!(
        "seed = 11\n[data.source]\nkind = \"procedural\"\ncount = {count}\n\
         [sampler]\nsteps = 10\nn_samples = 2\n[eval]\nlimit = {limit}\n"
    )
}

fn cvdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvdm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn cvdm")
}

fn ok(args: &[&str]) -> Output {
    let out = cvdm(args);
    assert!(
        out.status.success(),
        "cvdm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Run {
    _dir: tempfile::TempDir,
    config: PathBuf,
    run: PathBuf,
}

impl Run {
    fn new(extra: &str) -> Self {
        Self::sized(8, 1, extra)
    }

    fn sized(count: usize, limit: usize, extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.toml");
        std::fs::write(&config, base(count, limit) + extra).unwrap();
        let run = dir.path().join("run");
        Self { _dir: dir, config, run }
    }

    fn args<'a>(&'a self, rest: &[&'a str]) -> Vec<&'a str> {
        let mut v = vec!["--config", self.config.to_str().unwrap(), "--out", self.run.to_str().unwrap()];
        v.extend_from_slice(rest);
        v
    }

    fn ok(&self, rest: &[&str]) -> Output {
        ok(&self.args(rest))
    }

    fn fail(&self, rest: &[&str]) -> String {
        let out = cvdm(&self.args(rest));
        assert!(!out.status.success(), "cvdm {rest:?} unexpectedly succeeded");
        String::from_utf8_lossy(&out.stderr).into_owned()
    }
}

fn file_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_data_is_reproducible() {
    let r = Run::new("");
    r.ok(&["generate-data"]);
    let first = file_bytes(&r.run.join("dataset"));
    std::fs::remove_dir_all(r.run.join("dataset")).unwrap();
    r.ok(&["generate-data"]);
    assert_eq!(file_bytes(&r.run.join("dataset")), first);
    assert!(r.run.join("config.toml").exists());

    let other = Run::new("");
    other.ok(&["--seed", "12", "generate-data"]);
    assert_ne!(file_bytes(&other.run.join("dataset")), first);
}

#[test]
fn splits_follow_fractions() {
    let r = Run::new("[data.splits]\ntrain = 0.5\nval = 0.25\ntest = 0.25\n");
    r.ok(&["generate-data"]);
    let m = read_manifest(&r.run.join("dataset")).unwrap();
    let counts: Vec<(String, usize)> = m.splits.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    assert_eq!(
        counts,
        vec![("test".to_string(), 2), ("train".to_string(), 4), ("val".to_string(), 2)]
    );
}

#[test]
fn toy_blur_has_single_channel_condition() {
    let r = Run::new("[data.task]\nkind = \"toy_blur\"\nkernel_sigma = 1.5\nnoise_sigma = 0.01\n");
    r.ok(&["generate-data"]);
    let dir = r.run.join("dataset");
    let m = read_manifest(&dir).unwrap();
    assert_eq!(m.condition_channels, 1);
    let e = &m.splits["train"][0];
    assert_eq!(read_npy(&dir.join(&e.x_file)).unwrap().shape(), [1, 32, 32]);
    let copy = std::fs::read_to_string(r.run.join("config.toml")).unwrap();
    assert!(copy.contains("condition_channels = 1"));
}

#[test]
fn rejects_unknown_keys_and_missing_inputs() {
    let r = Run::new("[train]\nlearning_rate = 0.1\n");
    let err = r.fail(&["generate-data"]);
    assert!(err.contains("unknown field"), "{err}");

    let r = Run::new("");
    let err = r.fail(&["train", "--steps", "2"]);
    assert!(err.contains("generate-data"), "{err}");
    let err = r.fail(&["sample"]);
    assert!(err.contains("checkpoint"), "{err}");
}

#[test]
fn eval_of_ground_truth_is_perfect_and_repeatable() {
    let r = Run::new("");
    r.ok(&["generate-data"]);
    let truth = r.run.join("dataset").join("test");
    let truth = truth.to_str().unwrap();
    r.ok(&["eval", "--predictions", truth]);
    let text = std::fs::read_to_string(r.run.join("metrics.json")).unwrap();
    let report: MetricReport = serde_json::from_str(&text).unwrap();
    assert_eq!(report.aggregate.mae, 0.0);
    assert_eq!(report.aggregate.ms_ssim, 1.0);
    assert_eq!(report.aggregate.psnr, f64::INFINITY);
    r.ok(&["eval", "--predictions", truth]);
    assert_eq!(std::fs::read_to_string(r.run.join("metrics.json")).unwrap(), text);
}

#[test]
fn resume_matches_uninterrupted_training() {
    let straight = Run::new("");
    straight.ok(&["generate-data"]);
    straight.ok(&["train", "--steps", "6"]);

    let split = Run::new("");
    split.ok(&["generate-data"]);
    split.ok(&["train", "--steps", "3"]);
    let mid = split.run.join("step_0000003.ckpt");
    split.ok(&["train", "--steps", "6", "--checkpoint", mid.to_str().unwrap()]);

    let a = Checkpoint::load(&straight.run.join("final.ckpt")).unwrap();
    let b = Checkpoint::load(&split.run.join("final.ckpt")).unwrap();
    assert_eq!(a, b);
    let log = std::fs::read_to_string(split.run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 7);

    let err = split.fail(&["train", "--steps", "6", "--checkpoint", mid.to_str().unwrap(), "--seed", "99"]);
    assert!(err.contains("digest"), "{err}");
}

#[test]
fn sample_refuses_mismatched_checkpoint() {
    let r = Run::new("");
    r.ok(&["generate-data"]);
    r.ok(&["train", "--steps", "2"]);
    let err = r.fail(&["--seed", "12", "sample"]);
    assert!(err.contains("digest"), "{err}");
}

#[test]
fn schedule_report_has_101_rows() {
    let r = Run::new("");
    r.ok(&["generate-data"]);
    r.ok(&["train", "--steps", "2"]);
    r.ok(&["schedule-report"]);
    let csv = std::fs::read_to_string(r.run.join("schedule_report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 102);
    assert!(lines[0].starts_with("t,mean_gamma,mean_beta"));
    assert!(lines[1].starts_with("0.0,1.0,"));
    assert!(lines[101].starts_with("1.0,"));
    assert!(r.run.join("schedule_report.svg").exists());
    assert!(r.run.join("schedule_lambda.png").exists());
}

#[test]
fn convergence_writes_tables_and_chart() {
    let r = Run::new("");
    let out = r.ok(&["convergence"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 2);
    let csv = std::fs::read_to_string(r.run.join("convergence.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
    let svg = std::fs::read_to_string(r.run.join("convergence.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn end_to_end_smoke() {
    let start = Instant::now();
    let r = Run::sized(16, 2, "[data.splits]\ntrain = 0.75\nval = 0.125\ntest = 0.125\n");
    r.ok(&["generate-data"]);
    r.ok(&["train", "--steps", "500"]);
    r.ok(&["sample", "--T", "100", "--samples", "4"]);
    let out = r.ok(&["eval"]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("n=2 "));
    let samples = r.run.join("samples");
    let m = read_manifest(&r.run.join("dataset")).unwrap();
    let id = &m.splits["test"][0].id;
    assert_eq!(read_npy(&samples.join(format!("{id}_samples.npy"))).unwrap().shape(), [4, 1, 32, 32]);
    assert!(samples.join(format!("{id}_mean.png")).exists());
    assert!(samples.join(format!("{id}_var.png")).exists());
    let report: MetricReport =
        serde_json::from_str(&std::fs::read_to_string(r.run.join("metrics.json")).unwrap()).unwrap();
    assert!(report.aggregate.mae.is_finite());
    assert!(start.elapsed() < Duration::from_secs(15 * 60));
}
