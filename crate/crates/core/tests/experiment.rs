use std::fs;
use std::path::Path;

use fedsim_core::data::make_synthetic;
use fedsim_core::prototype::{read_exchange, ExchangeRecord};
use fedsim_core::sim::{run_ablation, run_experiment, ExperimentConfig, Method, METRICS_HEADER};
use fedsim_core::{Error, ModelParams};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        classes: 3,
        dim: 4,
        train_per_class: 24,
        test_per_class: 8,
        encoder_hidden: vec![8],
        feature_dim: 6,
        head_hidden: vec![6],
        embed_dim: 4,
        n_clients: 3,
        rounds: 3,
        local_epochs: 1,
        batch_size: 16,
        server_epochs: 2,
        n_repeat: 2,
        ..Default::default()
    }
}

fn final_fused(csv: &str) -> f64 {
    let last = csv.lines().last().unwrap();
    last.split(',').nth(5).unwrap().parse().unwrap()
}

#[test]
fn identical_config_and_seed_give_identical_csv() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&small(), Some(a.path())).unwrap();
    run_experiment(&small(), Some(b.path())).unwrap();
    let read = |d: &Path| fs::read(d.join("metrics_seed1.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn three_seeds_write_three_metric_files_and_one_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        seeds: vec![1, 2, 3],
        ..small()
    };
    let result = run_experiment(&cfg, Some(dir.path())).unwrap();
    let mut finals = Vec::new();
    for s in [1, 2, 3] {
        let csv = fs::read_to_string(dir.path().join(format!("metrics_seed{s}.csv"))).unwrap();
        assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER);
        assert_eq!(csv.lines().count(), 1 + cfg.rounds);
        finals.push(final_fused(&csv));
    }
    let summaries: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("summary"))
        .collect();
    assert_eq!(summaries.len(), 1);

    let mean = (finals[0] + finals[1] + finals[2]) / 3.0;
    let var = finals.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / 2.0;
    assert!((result.summary.mean_acc - mean).abs() < 1e-12);
    assert!((result.summary.std_acc - var.sqrt()).abs() < 1e-12);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert!((json["mean_acc"].as_f64().unwrap() - mean).abs() < 1e-12);
}

#[test]
fn artifacts_reload() {
    let dir = tempfile::tempdir().unwrap();
    let result = run_experiment(&small(), Some(dir.path())).unwrap();
    let model = ModelParams::load(&dir.path().join("checkpoint_seed1.json")).unwrap();
    assert_eq!(model, result.runs[0].state.model);
    let protos = read_exchange(&dir.path().join("prototypes_seed1.jsonl")).unwrap();
    assert!(protos.iter().any(|r| matches!(r, ExchangeRecord::Prototype(_))));
    assert!(protos.iter().any(|r| matches!(r, ExchangeRecord::GlobalPrototype { .. })));
    let kb = read_exchange(&dir.path().join("knowledge_base_seed1.jsonl")).unwrap();
    assert_eq!(kb.len(), result.runs[0].state.knowledge_base.exemplars.len());
    assert!(kb.iter().all(|r| matches!(r, ExchangeRecord::Exemplar { .. })));
}

#[test]
fn unwritable_output_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("not-a-dir");
    fs::write(&blocker, b"x").unwrap();
    let cfg = ExperimentConfig {
        rounds: 10_000,
        ..small()
    };
    let started = std::time::Instant::now();
    let err = run_experiment(&cfg, Some(&blocker.join("out"))).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    assert!(started.elapsed().as_secs() < 5);
}

#[test]
fn timing_is_opt_in() {
    let cfg = ExperimentConfig {
        record_timing: true,
        rounds: 1,
        ..small()
    };
    let result = run_experiment(&cfg, None).unwrap();
    assert_eq!(result.runs[0].metrics.len(), 1);
    let plain = run_experiment(&small(), None).unwrap();
    assert!(plain.runs[0].metrics.iter().all(|m| m.wall_ms == 0));
}

#[test]
fn csv_datasets_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    make_synthetic(3, 4, 20, 0.5, 3).unwrap().write_csv(&dir.path().join("train.csv")).unwrap();
    make_synthetic(3, 4, 5, 0.5, 3).unwrap().write_csv(&dir.path().join("test.csv")).unwrap();
    let mut cfg = small();
    cfg.train_csv = Some("train.csv".into());
    cfg.test_csv = Some("test.csv".into());
    let path = dir.path().join("exp.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let loaded = ExperimentConfig::load(&path).unwrap();
    assert_eq!(loaded.train_csv.as_deref(), Some(dir.path().join("train.csv").as_path()));
    let result = run_experiment(&loaded, None).unwrap();
    assert_eq!(result.runs[0].metrics.len(), 3);
}

#[test]
fn ablation_base_row_is_plain_fedavg_and_repeatable() {
    let cfg = ExperimentConfig {
        rounds: 2,
        seeds: vec![4, 5],
        ..small()
    };
    let first = run_ablation(&cfg, None).unwrap();
    assert_eq!(first.rows.len(), 9);
    let fedavg = run_experiment(
        &ExperimentConfig {
            method: Method::FedAvg,
            ..cfg.clone()
        },
        None,
    )
    .unwrap();
    assert_eq!(first.rows[0].summary, fedavg.summary);
    let second = run_ablation(&cfg, None).unwrap();
    assert_eq!(first.rows[0], second.rows[0]);
    assert_eq!(first.to_csv().lines().count(), 10);
}
