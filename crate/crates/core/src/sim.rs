//! Round loop, experiment runner, ablation harness and metrics output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{
    train_client, AngleMode, ClientConfig, ClientUpdate, EdgePenalty, EpochLoss,
    GlobalPrototypeSet, PrototypeMode,
};
use crate::data::{dirichlet_partition, load_csv, split_client, LabeledDataset, PartitionPlan, Mixture};
use crate::error::{Error, Result};
use crate::model::{ClassifierInput, ModelConfig, ModelParams};
use crate::prototype::{write_exchange, ExchangeRecord, Prototype, PrototypeConfig};
use crate::seed;
use crate::server::{
    calibrate, global_prototypes, knowledge_base, predict_fused, top1, FusionNorm, KnowledgeBase,
    ServerConfig, ServerEpochLoss,
};

/// Environment variable capping client-training worker threads.
pub const THREADS_ENV: &str = "FEDSIM_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    FedAvg,
    FedCspc,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::FedCspc => "fedcspc",
        }
    }
}

/// Clustered (`cpm`) or single class-mean (`tpg`) prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeKind {
    Cpm,
    Tpg,
}

/// Flat experiment configuration; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seeds: Vec<u64>,

    // synthetic data, ignored when train_csv is set
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    pub data_seed: u64,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,

    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub head_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub classifier_input: ClassifierInput,

    pub n_clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta: f64,

    pub k: usize,
    pub r: f64,
    pub n_repeat: usize,

    pub tau_l: f64,
    pub kappa: f64,
    pub max_relations: usize,
    pub angle_mode: AngleMode,
    pub edge_penalty: EdgePenalty,

    pub lambda_u: f64,
    pub n_aug: usize,
    pub alpha: f64,
    pub tau_g: f64,
    pub eta: f64,
    pub server_epochs: usize,
    pub server_lr: f64,
    pub server_batch: usize,
    pub acl_clamp: bool,
    pub calibrate_every: usize,

    pub lambda_p: f64,
    pub fusion_norm: FusionNorm,

    pub lrl: bool,
    pub prototype_mode: PrototypeKind,
    pub pa: bool,
    pub ca: bool,
    pub kp: bool,

    /// Fill `wall_ms`; off keeps the metrics file byte-reproducible.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::FedCspc,
            seeds: vec![1],
            classes: 10,
            dim: 32,
            train_per_class: 250,
            test_per_class: 100,
            spread: 1.0,
            data_seed: 0,
            train_csv: None,
            test_csv: None,
            encoder_hidden: vec![64],
            feature_dim: 32,
            head_hidden: vec![32],
            embed_dim: 16,
            classifier_input: ClassifierInput::Encoder,
            n_clients: 10,
            participation: 1.0,
            rounds: 100,
            local_epochs: 10,
            batch_size: 64,
            lr: 0.01,
            weight_decay: 1e-5,
            beta: 0.5,
            k: 2,
            r: 0.5,
            n_repeat: 5,
            tau_l: 0.5,
            kappa: 0.1,
            max_relations: 16,
            angle_mode: AngleMode::Difference,
            edge_penalty: EdgePenalty::Square,
            lambda_u: 0.3,
            n_aug: 5,
            alpha: 1.0,
            tau_g: 0.5,
            eta: 0.1,
            server_epochs: 20,
            server_lr: 0.01,
            server_batch: 32,
            acl_clamp: true,
            calibrate_every: 1,
            lambda_p: 0.3,
            fusion_norm: FusionNorm::Softmax,
            lrl: true,
            prototype_mode: PrototypeKind::Cpm,
            pa: true,
            ca: true,
            kp: true,
            record_timing: false,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be non-negative, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative CSV paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| e.context(path.display().to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.train_csv, &mut cfg.test_csv].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if self.n_clients < 2 {
            return Err(Error::config("n_clients must be >= 2"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config(format!(
                "participation must be in (0, 1], got {}",
                self.participation
            )));
        }
        if self.rounds == 0 || self.batch_size == 0 || self.calibrate_every == 0 || self.server_batch == 0 {
            return Err(Error::config("rounds, batch_size, server_batch and calibrate_every must be >= 1"));
        }
        positive("beta", self.beta)?;
        positive("lr", self.lr)?;
        non_negative("weight_decay", self.weight_decay)?;
        positive("tau_l", self.tau_l)?;
        positive("tau_g", self.tau_g)?;
        positive("lambda_u", self.lambda_u)?;
        non_negative("kappa", self.kappa)?;
        non_negative("eta", self.eta)?;
        non_negative("alpha", self.alpha)?;
        non_negative("server_lr", self.server_lr)?;
        if !(0.0..=1.0).contains(&self.lambda_p) {
            return Err(Error::config(format!("lambda_p must be in [0, 1], got {}", self.lambda_p)));
        }
        self.prototype_config().validate()?;
        self.model_config(self.classes.max(2), self.dim.max(1)).validate()?;
        if self.train_csv.is_none() && (self.train_per_class == 0 || self.test_per_class == 0) {
            return Err(Error::config("train_per_class and test_per_class must be >= 1"));
        }
        if self.train_csv.is_some() != self.test_csv.is_some() {
            return Err(Error::config("train_csv and test_csv must be given together"));
        }
        Ok(())
    }

    pub fn prototype_config(&self) -> PrototypeConfig {
        PrototypeConfig {
            k: self.k,
            r: self.r,
            n_repeat: self.n_repeat,
        }
    }

    pub fn model_config(&self, classes: usize, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            encoder_hidden: self.encoder_hidden.clone(),
            feature_dim: self.feature_dim,
            head_hidden: self.head_hidden.clone(),
            embed_dim: self.embed_dim,
            classes,
            classifier_input: self.classifier_input,
        }
    }

    fn is_cspc(&self) -> bool {
        self.method == Method::FedCspc
    }

    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            kappa: self.kappa,
            tau_l: self.tau_l,
            lrl: self.is_cspc() && self.lrl,
            max_relations: self.max_relations,
            angle_mode: self.angle_mode,
            edge_penalty: self.edge_penalty,
        }
    }

    pub fn server_config(&self) -> ServerConfig {
        ServerConfig {
            eta: self.eta,
            alpha: self.alpha,
            tau_g: self.tau_g,
            lambda_u: self.lambda_u,
            n_aug: self.n_aug,
            epochs: self.server_epochs,
            lr: self.server_lr,
            batch_anchors: self.server_batch,
            pa: self.pa,
            acl_clamp: self.acl_clamp,
        }
    }

    pub fn upload_mode(&self) -> PrototypeMode {
        match (self.method, self.prototype_mode) {
            (Method::FedAvg, _) => PrototypeMode::None,
            (Method::FedCspc, PrototypeKind::Cpm) => PrototypeMode::Clustered(self.prototype_config()),
            (Method::FedCspc, PrototypeKind::Tpg) => PrototypeMode::Traditional,
        }
    }

    /// Fusion weight actually used for the final prediction.
    pub fn effective_lambda_p(&self) -> f64 {
        if self.is_cspc() && self.kp {
            self.lambda_p
        } else {
            0.0
        }
    }

    pub fn participants_per_round(&self) -> usize {
        ((self.participation * self.n_clients as f64).ceil() as usize).clamp(1, self.n_clients)
    }

    /// Train and test sets for this config.
    pub fn datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match (&self.train_csv, &self.test_csv) {
            (Some(train), Some(test)) => {
                let train = load_csv(train)?;
                let mut test = load_csv(test)?;
                if train.dim() != test.dim() {
                    return Err(Error::Dimension {
                        op: "train/test csv",
                        left: vec![train.dim()],
                        right: vec![test.dim()],
                    });
                }
                let classes = train.classes.max(test.classes);
                let train = LabeledDataset::new(train.features, train.labels, classes)?;
                test.classes = classes;
                Ok((train, test))
            }
            _ => {
                let mix = Mixture {
                    classes: self.classes,
                    dim: self.dim,
                    spread: self.spread,
                    seed: self.data_seed,
                };
                Ok((mix.sample(self.train_per_class, 0)?, mix.sample(self.test_per_class, 1)?))
            }
        }
    }
}

/// Seed-scoped stream tags.
mod stream {
    pub const INIT: u64 = 10;
    pub const PARTITION: u64 = 11;
    pub const PARTICIPANTS: u64 = 12;
    pub const CLIENT: u64 = 13;
    pub const SERVER: u64 = 14;
}

pub fn init_seed(run_seed: u64) -> u64 {
    seed::derive(&[run_seed, stream::INIT])
}

pub fn partition_seed(run_seed: u64) -> u64 {
    seed::derive(&[run_seed, stream::PARTITION])
}

pub fn client_seed(run_seed: u64, round: usize, client: usize) -> u64 {
    seed::derive(&[run_seed, stream::CLIENT, round as u64, client as u64])
}

pub fn server_seed(run_seed: u64, round: usize) -> u64 {
    seed::derive(&[run_seed, stream::SERVER, round as u64])
}

/// Sorted client ids taking part in `round`.
pub fn participants(run_seed: u64, round: usize, n_clients: usize, m: usize) -> Vec<usize> {
    if m >= n_clients {
        return (0..n_clients).collect();
    }
    let mut rng = seed::rng(&[run_seed, stream::PARTICIPANTS, round as u64]);
    let mut ids = index::sample(&mut rng, n_clients, m).into_vec();
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub round: usize,
    pub model: ModelParams,
    pub globals: Option<GlobalPrototypeSet>,
    pub knowledge_base: KnowledgeBase,
    /// Prototypes uploaded in the last round.
    pub last_pool: Vec<Prototype>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub seed: u64,
    pub method: Method,
    pub client_losses: Vec<(usize, EpochLoss)>,
    /// Sample-weighted mean of the clients' last-epoch losses.
    pub client_loss: EpochLoss,
    /// Last calibration epoch; zero when calibration did not run.
    pub server_loss: ServerEpochLoss,
    pub acc_net: f64,
    pub acc_kb: Option<f64>,
    pub acc_fused: f64,
    pub alignment_before: Option<f64>,
    pub alignment_after: Option<f64>,
    pub calibrated: bool,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str =
    "round,seed,method,acc_net,acc_kb,acc_fused,loss_base,loss_node,loss_angle,loss_edge,loss_sup,loss_wcl,loss_acl,wall_ms";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RoundMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.seed,
            self.method.as_str(),
            self.acc_net,
            opt(self.acc_kb),
            self.acc_fused,
            self.client_loss.base,
            self.client_loss.node,
            self.client_loss.angle,
            self.client_loss.edge,
            self.server_loss.sup,
            self.server_loss.wcl,
            self.server_loss.acl,
            self.wall_ms
        )
    }
}

/// Everything fixed for one seeded run.
pub struct Federation {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub plan: PartitionPlan,
    pub clients: Vec<LabeledDataset>,
    pub test: LabeledDataset,
}

impl Federation {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (train, test) = config.datasets()?;
        Self::from_data(config, seed, &train, test)
    }

    pub fn from_data(
        config: &ExperimentConfig,
        seed: u64,
        train: &LabeledDataset,
        test: LabeledDataset,
    ) -> Result<Self> {
        let plan = dirichlet_partition(train, config.n_clients, config.beta, partition_seed(seed))?;
        let clients = (0..config.n_clients)
            .map(|c| split_client(train, &plan, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            seed,
            plan,
            clients,
            test,
        })
    }

    pub fn initial_state(&self) -> Result<RunState> {
        let classes = self.clients[0].classes.max(self.test.classes);
        let model = ModelParams::init(
            &self.config.model_config(classes, self.test.dim()),
            init_seed(self.seed),
        )?;
        Ok(RunState {
            round: 0,
            model,
            globals: None,
            knowledge_base: KnowledgeBase::default(),
            last_pool: Vec::new(),
        })
    }
}

/// Worker pool for client training.
pub struct Simulator {
    pool: rayon::ThreadPool,
}

impl Simulator {
    /// Thread count from `FEDSIM_THREADS` when set, rayon's default otherwise.
    pub fn from_env() -> Result<Self> {
        let threads = match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("{THREADS_ENV}={v} is not a thread count")))?,
            Err(_) => 0,
        };
        Self::with_threads(threads)
    }

    /// `0` means rayon's default.
    pub fn with_threads(threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        Ok(Self { pool })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// One federated round: local training, aggregation, calibration, evaluation.
    pub fn run_round(&self, fed: &Federation, state: &RunState) -> Result<(RunState, RoundMetrics)> {
        let started = Instant::now();
        let cfg = &fed.config;
        let round = state.round + 1;
        let ids = participants(fed.seed, round, cfg.n_clients, cfg.participants_per_round());
        let client_cfg = cfg.client_config();
        let mode = cfg.upload_mode();

        let updates: Vec<ClientUpdate> = self.pool.install(|| {
            ids.par_iter()
                .map(|&k| {
                    train_client(
                        &state.model,
                        &fed.clients[k],
                        state.globals.as_ref(),
                        &client_cfg,
                        mode,
                        k,
                        client_seed(fed.seed, round, k),
                    )
                    .map_err(|e| e.context(format!("round {round}, client {k}")))
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let models: Vec<ModelParams> = updates.iter().map(|u| u.params.clone()).collect();
        let weights: Vec<f64> = updates.iter().map(|u| u.sample_count as f64).collect();
        let aggregated = ModelParams::aggregate(&models, &weights)
            .map_err(|e| e.context(format!("round {round}, aggregation")))?;

        let total: f64 = weights.iter().sum();
        let mut client_loss = EpochLoss::default();
        let mut client_losses = Vec::with_capacity(updates.len());
        for u in &updates {
            let last = u.loss_trace.last().copied().unwrap_or_default();
            let w = u.sample_count as f64 / total;
            client_loss.base += w * last.base;
            client_loss.node += w * last.node;
            client_loss.angle += w * last.angle;
            client_loss.edge += w * last.edge;
            client_losses.push((u.client, last));
        }

        let pool: Vec<Prototype> = updates.into_iter().flat_map(|u| u.prototypes).collect();
        let mut next = RunState {
            round,
            model: aggregated,
            globals: state.globals.clone(),
            knowledge_base: state.knowledge_base.clone(),
            last_pool: Vec::new(),
        };
        let mut server_loss = ServerEpochLoss::default();
        let (mut alignment_before, mut alignment_after, mut calibrated) = (None, None, false);
        if cfg.is_cspc() && !pool.is_empty() {
            if cfg.ca && round.is_multiple_of(cfg.calibrate_every) {
                let out = calibrate(&next.model, &pool, &cfg.server_config(), server_seed(fed.seed, round))
                    .map_err(|e| e.context(format!("round {round}, calibration")))?;
                server_loss = out.loss_trace.last().copied().unwrap_or_default();
                alignment_before = out.alignment_before;
                alignment_after = out.alignment_after;
                calibrated = true;
                next.model = out.model;
                next.globals = Some(out.global_prototypes);
                next.knowledge_base = out.knowledge_base;
            } else {
                next.globals = Some(global_prototypes(&pool)?);
                next.knowledge_base = knowledge_base(&next.model, &pool)?;
            }
        }
        next.last_pool = pool;

        let (acc_net, acc_kb, acc_fused) = evaluate(&next.model, &next.knowledge_base, &fed.test, cfg)?;
        let wall_ms = if cfg.record_timing {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        let metrics = RoundMetrics {
            round,
            seed: fed.seed,
            method: cfg.method,
            client_losses,
            client_loss,
            server_loss,
            acc_net,
            acc_kb,
            acc_fused,
            alignment_before,
            alignment_after,
            calibrated,
            wall_ms,
        };
        Ok((next, metrics))
    }

    /// All rounds of one seed; returns the final state and per-round metrics.
    pub fn run_seed(&self, fed: &Federation) -> Result<(RunState, Vec<RoundMetrics>)> {
        let mut state = fed.initial_state()?;
        let mut rows = Vec::with_capacity(fed.config.rounds);
        for _ in 0..fed.config.rounds {
            let (next, m) = self.run_round(fed, &state)?;
            state = next;
            rows.push(m);
        }
        Ok((state, rows))
    }
}

/// Network-only, knowledge-only and final accuracy on `test`.
pub fn evaluate(
    model: &ModelParams,
    kb: &KnowledgeBase,
    test: &LabeledDataset,
    cfg: &ExperimentConfig,
) -> Result<(f64, Option<f64>, f64)> {
    let p = predict_fused(model, kb, &test.features, cfg.effective_lambda_p(), cfg.fusion_norm)?;
    let acc_net = top1(&p.net, &test.labels);
    let acc_kb = p.kb.as_ref().map(|k| top1(k, &test.labels));
    Ok((acc_net, acc_kb, top1(&p.fused, &test.labels)))
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_acc: f64,
    pub final_acc_net: f64,
    pub final_acc_kb: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub rounds: usize,
    pub seeds: Vec<SeedResult>,
    pub mean_acc: f64,
    pub std_acc: f64,
}

impl Summary {
    pub fn from_seeds(method: Method, rounds: usize, seeds: Vec<SeedResult>) -> Self {
        let finals: Vec<f64> = seeds.iter().map(|s| s.final_acc).collect();
        let (mean_acc, std_acc) = mean_std(&finals);
        Self {
            method,
            rounds,
            seeds,
            mean_acc,
            std_acc,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} final accuracy over {} seed(s): {:.2} ± {:.2}",
            self.method.as_str(),
            self.seeds.len(),
            100.0 * self.mean_acc,
            100.0 * self.std_acc
        )
    }
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: Vec<RoundMetrics>,
    pub state: RunState,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub runs: Vec<SeedRun>,
    pub summary: Summary,
}

pub fn metrics_csv(rows: &[RoundMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn calibration_csv(rows: &[RoundMetrics]) -> String {
    let mut out = String::from("round,seed,calibrated,alignment_before,alignment_after\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.round,
            r.seed,
            r.calibrated,
            opt(r.alignment_before),
            opt(r.alignment_after)
        );
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Creates `dir` and proves it is writable.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".fedsim-write-probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

fn write_artifacts(dir: &Path, run: &SeedRun) -> Result<()> {
    let s = run.seed;
    write(&dir.join(format!("metrics_seed{s}.csv")), &metrics_csv(&run.metrics))?;
    write(&dir.join(format!("calibration_seed{s}.csv")), &calibration_csv(&run.metrics))?;
    run.state.model.save(&dir.join(format!("checkpoint_seed{s}.json")))?;
    let mut protos: Vec<ExchangeRecord> =
        run.state.last_pool.iter().cloned().map(ExchangeRecord::Prototype).collect();
    if let Some(g) = &run.state.globals {
        protos.extend(g.by_class.iter().map(|(&class, v)| ExchangeRecord::GlobalPrototype {
            class,
            vector: v.clone(),
        }));
    }
    write_exchange(&dir.join(format!("prototypes_seed{s}.jsonl")), &protos)?;
    let kb: Vec<ExchangeRecord> = run
        .state
        .knowledge_base
        .exemplars
        .iter()
        .map(|(&class, v)| ExchangeRecord::Exemplar {
            class,
            vector: v.clone(),
        })
        .collect();
    write_exchange(&dir.join(format!("knowledge_base_seed{s}.jsonl")), &kb)
}

/// Runs every seed; with `out_dir`, writes per-seed artifacts and `summary.json`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentResult> {
    config.validate()?;
    if let Some(dir) = out_dir {
        ensure_writable(dir)?;
    }
    let sim = Simulator::from_env()?;
    let (train, test) = config.datasets()?;
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &s in &config.seeds {
        let fed = Federation::from_data(config, s, &train, test.clone())
            .map_err(|e| e.context(format!("seed {s}")))?;
        let (state, metrics) = sim.run_seed(&fed).map_err(|e| e.context(format!("seed {s}")))?;
        let run = SeedRun { seed: s, metrics, state };
        if let Some(dir) = out_dir {
            write_artifacts(dir, &run)?;
        }
        runs.push(run);
    }
    let seeds = runs
        .iter()
        .map(|r| {
            let last = r.metrics.last().expect("rounds >= 1");
            SeedResult {
                seed: r.seed,
                final_acc: last.acc_fused,
                final_acc_net: last.acc_net,
                final_acc_kb: last.acc_kb,
            }
        })
        .collect();
    let summary = Summary::from_seeds(config.method, config.rounds, seeds);
    if let Some(dir) = out_dir {
        write(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(ExperimentResult { runs, summary })
}

/// Component switches of one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub tpg: bool,
    pub cpm: bool,
    pub lrl: bool,
    pub pa: bool,
    pub ca: bool,
    pub kp: bool,
}

impl AblationFlags {
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        for (on, tag) in [
            (self.lrl, "LRL"),
            (self.tpg, "TPG"),
            (self.cpm, "CPM"),
            (self.pa, "PA"),
            (self.ca, "CA"),
            (self.kp, "KP"),
        ] {
            if on {
                parts.push(tag);
            }
        }
        if parts.is_empty() {
            "Base".to_string()
        } else {
            format!("+{}", parts.join("+"))
        }
    }

    /// Base config with this row's switches applied.
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        if !(self.tpg || self.cpm) {
            cfg.method = Method::FedAvg;
            cfg.lrl = false;
            cfg.pa = false;
            cfg.ca = false;
            cfg.kp = false;
            return cfg;
        }
        cfg.method = Method::FedCspc;
        cfg.prototype_mode = if self.cpm { PrototypeKind::Cpm } else { PrototypeKind::Tpg };
        cfg.lrl = self.lrl;
        cfg.pa = self.pa;
        cfg.ca = self.ca;
        cfg.kp = self.kp;
        cfg
    }
}

/// The nine component combinations, from plain FedAvg to the full method.
pub fn ablation_rows() -> [AblationFlags; 9] {
    let f = |tpg, cpm, lrl, pa, ca, kp| AblationFlags { tpg, cpm, lrl, pa, ca, kp };
    [
        f(false, false, false, false, false, false),
        f(true, false, false, false, true, false),
        f(false, true, false, false, true, false),
        f(false, true, true, false, true, false),
        f(false, true, true, false, true, true),
        f(true, false, false, true, true, false),
        f(false, true, false, true, true, false),
        f(false, true, true, true, true, false),
        f(false, true, true, true, true, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: AblationFlags,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,name,mean_acc,std_acc,seeds\n");
        for (i, r) in self.rows.iter().enumerate() {
            let seeds: Vec<String> = r.summary.seeds.iter().map(|s| s.final_acc.to_string()).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                i + 1,
                r.name,
                r.summary.mean_acc,
                r.summary.std_acc,
                seeds.join(";")
            );
        }
        out
    }

    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4);
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:6.2} ± {:.2}",
                r.name,
                100.0 * r.summary.mean_acc,
                100.0 * r.summary.std_acc
            );
        }
        out
    }
}

/// Runs all nine rows under the base config's seeds.
pub fn run_ablation(base: &ExperimentConfig, out_dir: Option<&Path>) -> Result<AblationTable> {
    base.validate()?;
    if let Some(dir) = out_dir {
        ensure_writable(dir)?;
    }
    let mut rows = Vec::with_capacity(9);
    for flags in ablation_rows() {
        let name = flags.name();
        let result = run_experiment(&flags.apply(base), None).map_err(|e| e.context(name.clone()))?;
        rows.push(AblationRow {
            name,
            flags,
            summary: result.summary,
        });
    }
    let table = AblationTable { rows };
    if let Some(dir) = out_dir {
        write(&dir.join("ablation.csv"), &table.to_csv())?;
    }
    Ok(table)
}

/// Per-client class histograms of the partition the config would produce.
pub fn inspect_partition(config: &ExperimentConfig, seed: u64) -> Result<BTreeMap<usize, Vec<usize>>> {
    config.validate()?;
    let (train, _) = config.datasets()?;
    let plan = dirichlet_partition(&train, config.n_clients, config.beta, partition_seed(seed))?;
    Ok(plan.histograms(&train))
}
