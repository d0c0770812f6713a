//! Central finite-difference checks of every differentiable loss.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::client::{
    client_objective, cross_entropy, loss_angle, loss_edge, loss_node, sample_relations, AngleMode,
    ClientConfig, EdgePenalty, GlobalPrototypeSet,
};
use crate::error::{Error, Result};
use crate::model::{BoundParams, ClassifierInput, ModelConfig, ModelParams, Part, ALL_PARTS};
use crate::prototype::Prototype;
use crate::seed;
use crate::server::{augment, loss_acl, loss_wcl, server_objective, CalibrationEntry, EntryKind, ServerConfig};
use crate::tensor::{l2_norm, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-6)` over whole gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = l2_norm(analytic).max(l2_norm(numeric)).max(1e-6);
    l2_norm(&diff) / scale
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::contract("gradient check needs a scalar loss"));
    }
    Ok(t.item())
}

/// Gradient of `f` with respect to each input tensor, analytic vs numeric.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| g.grad(v).into_data()).collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for t in 0..work.len() {
        for i in 0..work[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + STEP;
            let up = eval(&work)?;
            work[t].data_mut()[i] = orig - STEP;
            let down = eval(&work)?;
            work[t].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

fn param_slot(m: &mut ModelParams, layer: usize, which: usize, i: usize) -> &mut f64 {
    let layer = &mut m.layers[layer];
    let t = if which == 0 { &mut layer.weight } else { &mut layer.bias };
    &mut t.data_mut()[i]
}

/// Gradient of `f` with respect to the parameters of `parts`.
pub fn check_params<F>(model: &ModelParams, parts: &[Part], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = model.bind(&mut g, parts);
    let out = f(&mut g, &bound)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let grads = bound.gradients(&g, parts);

    let eval = |m: &ModelParams| -> Result<f64> {
        let mut g = Graph::new();
        let bound = m.bind(&mut g, &[]);
        let out = f(&mut g, &bound)?;
        scalar_of(&g, out)
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work = model.clone();
    for li in 0..work.layers.len() {
        if !parts.contains(&work.layers[li].part) {
            continue;
        }
        let name = work.layers[li].name.clone();
        let (gw, gb) = grads
            .get(&name)
            .ok_or_else(|| Error::contract(format!("no gradient for {name}")))?;
        analytic.extend_from_slice(gw.data());
        analytic.extend_from_slice(gb.data());
        for which in 0..2 {
            let n = if which == 0 {
                work.layers[li].weight.numel()
            } else {
                work.layers[li].bias.numel()
            };
            for i in 0..n {
                let base = *param_slot(&mut work, li, which, i);
                *param_slot(&mut work, li, which, i) = base + STEP;
                let up = eval(&work)?;
                *param_slot(&mut work, li, which, i) = base - STEP;
                let down = eval(&work)?;
                *param_slot(&mut work, li, which, i) = base;
                numeric.push((up - down) / (2.0 * STEP));
            }
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl LossReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub losses: Vec<LossReport>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.losses.iter().all(LossReport::passed)
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches")
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn random_globals(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> GlobalPrototypeSet {
    GlobalPrototypeSet {
        by_class: (0..classes).map(|c| (c, random_vec(rng, dim))).collect(),
    }
}

/// Small network with random biases so no unit sits exactly at a ReLU kink
/// or yields an all-zero embedding row.
fn tiny_model(rng: &mut ChaCha8Rng) -> Result<ModelParams> {
    let mut model = ModelParams::init(
        &ModelConfig {
            input_dim: 3,
            encoder_hidden: vec![5],
            feature_dim: 4,
            head_hidden: vec![4],
            embed_dim: 3,
            classes: 3,
            classifier_input: ClassifierInput::Encoder,
        },
        rng.random(),
    )?;
    for layer in &mut model.layers {
        for b in layer.bias.data_mut() {
            *b = rng.random_range(0.1..0.5);
        }
    }
    Ok(model)
}

fn required(v: Option<Var>, what: &str) -> Result<Var> {
    v.ok_or_else(|| Error::contract(format!("{what} produced no loss")))
}

fn node_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let f = random_matrix(rng, 5, 4);
    let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
    let globals = random_globals(rng, 3, 4);
    let tau = rng.random_range(0.3..1.0);
    check_inputs(&[f], |g, v| required(loss_node(g, v[0], &labels, &globals, tau)?, "node"))
}

fn angle_instance(rng: &mut ChaCha8Rng, mode: AngleMode) -> Result<f64> {
    let f = random_matrix(rng, 6, 3);
    let triples = [[0, 1, 2], [3, 4, 5], [0, 3, 5]];
    let protos: Vec<Vec<f64>> = (0..9).map(|_| random_vec(rng, 3)).collect();
    let refs: Vec<[&[f64]; 3]> = (0..3)
        .map(|t| [&protos[3 * t][..], &protos[3 * t + 1][..], &protos[3 * t + 2][..]])
        .collect();
    check_inputs(&[f], |g, v| required(loss_angle(g, v[0], &triples, &refs, mode)?.loss, "angle"))
}

fn edge_instance(rng: &mut ChaCha8Rng, penalty: EdgePenalty) -> Result<f64> {
    let f = random_matrix(rng, 5, 3);
    let pairs = [[0, 1], [2, 3], [1, 4]];
    let protos: Vec<Vec<f64>> = (0..6).map(|_| random_vec(rng, 3)).collect();
    let refs: Vec<[&[f64]; 2]> = (0..3).map(|p| [&protos[2 * p][..], &protos[2 * p + 1][..]]).collect();
    check_inputs(&[f], |g, v| required(loss_edge(g, v[0], &pairs, &refs, penalty)?, "edge"))
}

fn wcl_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let kinds = [
        (0, 0, EntryKind::Real),
        (0, 1, EntryKind::Real),
        (1, 0, EntryKind::Real),
        (1, 1, EntryKind::AugPositive),
        (1, 1, EntryKind::Real),
        (2, 0, EntryKind::AugNegative),
        (0, 1, EntryKind::AugPositive),
        (2, 1, EntryKind::Real),
    ];
    let set: Vec<CalibrationEntry> = kinds
        .iter()
        .map(|&(class, client, kind)| CalibrationEntry {
            vector: Vec::new(),
            class,
            client,
            kind,
            anchor: None,
        })
        .collect();
    let refs: Vec<&CalibrationEntry> = set.iter().collect();
    let h = random_matrix(rng, set.len(), 3);
    let tau = rng.random_range(0.3..1.0);
    check_inputs(&[h], |g, v| {
        let z = g.normalize_rows(v[0]);
        required(loss_wcl(g, z, &refs, &[0, 1, 2, 4, 7], tau)?.loss, "wcl")
    })
}

fn acl_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let a = random_matrix(rng, 4, 3);
    let p = random_matrix(rng, 4, 3);
    let n = random_matrix(rng, 4, 3);
    let alpha = rng.random_range(0.5..1.5);
    check_inputs(&[a, p, n], |g, v| loss_acl(g, v[0], v[1], v[2], alpha, true))
}

fn sup_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let model = tiny_model(rng)?;
    let u = random_matrix(rng, 6, 4);
    let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
    check_params(&model, &[Part::Classifier], |g, b| {
        let x = g.constant(u.clone());
        let logits = b.classify(g, x)?;
        cross_entropy(g, logits, &labels)
    })
}

fn client_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let model = tiny_model(rng)?;
    let x = random_matrix(rng, 8, 3);
    let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
    let globals = random_globals(rng, 3, 4);
    let relations = sample_relations(&labels, &globals, 6, rng);
    let cfg = ClientConfig {
        kappa: 0.5,
        ..Default::default()
    };
    check_params(&model, &ALL_PARTS, |g, b| {
        let xv = g.constant(x.clone());
        Ok(client_objective(g, b, xv, &labels, Some((&globals, &relations)), &cfg)?.0)
    })
}

fn server_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let model = tiny_model(rng)?;
    let pool: Vec<Prototype> = (0..6)
        .map(|i| Prototype {
            vector: random_vec(rng, 4),
            class: i % 3,
            client: i / 3,
            cluster: 0,
            repeat: 0,
        })
        .collect();
    let batch = augment(&pool, 0.3, 2, rng.random())?;
    let members: Vec<usize> = (0..batch.entries.len()).collect();
    let anchors: Vec<usize> = (0..batch.real_count).collect();
    let cfg = ServerConfig {
        eta: 0.5,
        ..Default::default()
    };
    check_params(&model, &[Part::Head, Part::Classifier], |g, b| {
        Ok(server_objective(g, b, &batch, &members, &anchors, &cfg)?.0)
    })
}

/// Runs `instances` random cases of every loss; seeds are per loss and instance.
pub fn run_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    type Case = fn(&mut ChaCha8Rng) -> Result<f64>;
    let cases: [(&'static str, Case); 10] = [
        ("node", node_instance),
        ("angle", |r| angle_instance(r, AngleMode::Difference)),
        ("angle_literal_l1", |r| angle_instance(r, AngleMode::LiteralL1)),
        ("edge", |r| edge_instance(r, EdgePenalty::Square)),
        ("edge_abs", |r| edge_instance(r, EdgePenalty::Abs)),
        ("wcl", wcl_instance),
        ("acl", acl_instance),
        ("sup", sup_instance),
        ("client_objective", client_instance),
        ("server_objective", server_instance),
    ];
    let started = Instant::now();
    let mut losses = Vec::with_capacity(cases.len());
    for (id, (name, case)) in cases.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = seed::rng(&[seed, id as u64, i as u64]);
            let err = case(&mut rng).map_err(|e| e.context(format!("{name} instance {i}")))?;
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        losses.push(LossReport {
            name,
            instances,
            max_rel_err: worst,
        });
    }
    Ok(SuiteReport {
        losses,
        elapsed: started.elapsed(),
    })
}
