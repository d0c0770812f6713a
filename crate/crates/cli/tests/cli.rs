use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
classes = 3
dim = 4
train_per_class = 20
test_per_class = 6
encoder_hidden = [8]
feature_dim = 6
head_hidden = [6]
embed_dim = 4
n_clients = 3
rounds = 2
local_epochs = 1
batch_size = 16
server_epochs = 1
n_repeat = 2
seeds = [1, 2]
"#;

fn fedsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(args)
        .env("FEDSIM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn config(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_writes_artifacts_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = fedsim(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("fedcspc final accuracy over 2 seed(s)"));
    for f in ["metrics_seed1.csv", "metrics_seed2.csv", "summary.json", "checkpoint_seed1.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let out = dir.path().join("one");
    let o = fedsim(&["run", "--config", &cfg, "--seed", "9", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(out.join("metrics_seed9.csv").exists());
    assert!(!out.join("metrics_seed1.csv").exists());
}

#[test]
fn partition_inspect_prints_one_line_per_client() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let o = fedsim(&["partition", "--config", &cfg, "--inspect"]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 3);
    let total: usize = lines
        .iter()
        .map(|l| l.split(':').nth(1).unwrap().split_whitespace().map(|c| c.parse::<usize>().unwrap()).sum::<usize>())
        .sum();
    assert_eq!(total, 60);

    let plan = fedsim(&["partition", "--config", &cfg]);
    assert!(String::from_utf8_lossy(&plan.stdout).contains("\"assignments\""));
}

#[test]
fn ablate_prints_nine_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &SMALL.replace("seeds = [1, 2]", "seeds = [1]"));
    let out = dir.path().join("abl");
    let o = fedsim(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().count(), 9);
    assert!(stdout.lines().next().unwrap().starts_with("Base"));
    assert!(out.join("ablation.csv").exists());
}

#[test]
fn gradcheck_passes() {
    let o = fedsim(&["gradcheck", "--instances", "2"]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("server_objective"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn bad_config_reports_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "beta = -1.0\n");
    let o = fedsim(&["run", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("beta"));

    let o = fedsim(&["run", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
