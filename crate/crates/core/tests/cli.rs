//! End-to-end runs of the `remix` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set", "width=16",
    "--set", "depth=2",
    "--set", "time_embed_dim=8",
    "--set", "timesteps=20",
    "--set", "batch_size=16",
    "--set", "dataset_size=256",
    "--set", "experts=4",
    "--set", "bases=2",
];

fn remix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_remix"))
        .args(args)
        .env_remove("REMIX_SEED")
        .output()
        .expect("spawn remix")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train_small(out: &Path, steps: usize, extra: &[&str]) -> Output {
    let steps = format!("total_steps={steps}");
    let out = out.to_str().unwrap();
    let mut args = vec!["train", "--quiet", "--out", out, "--set", &steps];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    remix(&args)
}

fn trained(dir: &Path) -> PathBuf {
    let run = dir.join("run");
    let o = train_small(&run, 10, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    run.join("model.ckpt")
}

#[test]
fn missing_config_exits_2_naming_path() {
    let o = remix(&["train", "--config", "/no/such/run.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/run.cfg"), "{}", stderr(&o));
}

#[test]
fn unknown_key_and_bad_flag_exit_2() {
    let o = remix(&["train", "--set", "widht=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("widht"));
    assert_eq!(remix(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(remix(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(remix(&["--help"]).status.code(), Some(0));
}

#[test]
fn ten_step_run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train_small(&run, 10, &["--set", "checkpoint_every=5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "step,expert,loss,reg,gamma,lr");
    assert_eq!(lines.len(), 11);
    for (i, line) in lines[1..].iter().enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 6);
        assert_eq!(f[0].parse::<usize>().unwrap(), i);
        assert!(f[1].parse::<usize>().unwrap() < 4);
        assert!(f[2].parse::<f64>().unwrap().is_finite());
    }
    for f in ["model.ckpt", "config.resolved.txt", "coefficients.csv", "checkpoints/step_000005.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    // The final state lives in model.ckpt only.
    assert!(!run.join("checkpoints/step_000010.ckpt").exists());
    let resolved = fs::read_to_string(run.join("config.resolved.txt")).unwrap();
    assert!(resolved.contains("total_steps = 10"));
    assert!(resolved.contains("width = 16"));
}

#[test]
fn single_step_run_has_one_metrics_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_small(dir.path(), 1, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn config_file_then_set_then_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# tiny\nseed = 5\nwidth = 16\ndepth = 2\ntime_embed_dim = 8\ntimesteps = 20\n").unwrap();
    let run = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_remix"))
        .args(["train", "--quiet", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()])
        .args(["--set", "total_steps=2", "--set", "width=24", "--set", "dataset_size=64", "--set", "batch_size=8"])
        .env("REMIX_SEED", "42")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let resolved = fs::read_to_string(run.join("config.resolved.txt")).unwrap();
    assert!(resolved.contains("seed = 42"), "{resolved}");
    assert!(resolved.contains("width = 24"));
    assert!(resolved.contains("depth = 2"));
}

#[test]
fn bad_config_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "width = 16\nthis line has no equals\n").unwrap();
    let o = remix(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn rerun_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(train_small(&a, 6, &[]).status.code(), Some(0));
    assert_eq!(train_small(&b, 6, &[]).status.code(), Some(0));
    for f in ["metrics.csv", "model.ckpt", "coefficients.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let resolved = |d: &Path| {
        let text = fs::read_to_string(d.join("config.resolved.txt")).unwrap();
        text.lines().filter(|l| !l.starts_with("out_dir")).map(String::from).collect::<Vec<_>>()
    };
    assert_eq!(resolved(&a), resolved(&b));
}

#[test]
fn diverging_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_small(dir.path(), 50, &["--set", "learning_rate=1e30"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn sample_modes_compare_equal() {
    let dir = tempfile::tempdir().unwrap();
    let ck = trained(dir.path());
    let ck = ck.to_str().unwrap();
    let pre = dir.path().join("pre.csv");
    let rt = dir.path().join("rt.npy");
    let other = dir.path().join("other.csv");
    let o = remix(&["sample", "--checkpoint", ck, "--n", "32", "--out", pre.to_str().unwrap(), "--precompute", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = remix(&["sample", "--checkpoint", ck, "--n", "32", "--out", rt.to_str().unwrap(), "--runtime-mix", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = remix(&["compare", pre.to_str().unwrap(), rt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));

    let o = remix(&["sample", "--checkpoint", ck, "--n", "32", "--out", other.to_str().unwrap(), "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(remix(&["compare", pre.to_str().unwrap(), other.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn sample_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let ck = trained(dir.path());
    let ck = ck.to_str().unwrap();
    let empty = dir.path().join("empty.csv");
    let o = remix(&["sample", "--checkpoint", ck, "--n", "0", "--out", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(&empty).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");

    let o = remix(&["sample", "--checkpoint", ck, "--n", "4", "--steps", "21", "--out", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = remix(&["sample", "--checkpoint", "/no/such.ckpt", "--n", "4", "--out", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such.ckpt"));
    let o = remix(&["sample", "--checkpoint", ck, "--out", empty.to_str().unwrap(), "--precompute", "--runtime-mix"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_rejects_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let ck = trained(dir.path());
    let ck = ck.to_str().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    remix(&["sample", "--checkpoint", ck, "--n", "4", "--out", a.to_str().unwrap()]);
    remix(&["sample", "--checkpoint", ck, "--n", "5", "--out", b.to_str().unwrap()]);
    assert_eq!(remix(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn analyze_and_bench_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ck = trained(dir.path());
    let ck = ck.to_str().unwrap();
    let out = dir.path().join("report");
    let o = remix(&["analyze", "--checkpoint", ck, "--out", out.to_str().unwrap(), "--n-eval", "64"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let losses = fs::read_to_string(out.join("losses.csv")).unwrap();
    assert_eq!(losses.lines().next(), Some("expert,interval,t_mid,loss"));
    assert_eq!(losses.lines().count(), 1 + 4 * 4);
    assert!(out.join("coefficients.csv").exists());
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("diagonal_wins = "));
    assert!(summary.contains("adjacent_row_cosine = "));

    let o = remix(&["bench", "--checkpoint", ck, "--out", out.to_str().unwrap(), "--reps", "3", "--warmup", "1", "--batch", "8"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let bench = fs::read_to_string(out.join("bench.csv")).unwrap();
    let lines: Vec<&str> = bench.lines().collect();
    assert_eq!(lines[0], "mode,mean_ms,p50_ms,p95_ms,batch,K,N");
    assert!(lines[1].starts_with("runtime-mix,"));
    assert!(lines[2].starts_with("precomputed,"));
    assert!(lines[1].ends_with(",8,2,4"));
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let o = remix(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
    let o = remix(&["gradcheck", "--corrupt-backward"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn gradcheck_onehot_includes_isolation() {
    let o = remix(&["gradcheck", "--set", "mixer_kind=onehot", "--set", "width=16", "--set", "depth=2", "--set", "time_embed_dim=8"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("onehot/isolation"));
}
