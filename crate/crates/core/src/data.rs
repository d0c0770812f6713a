//! Labeled datasets, synthetic Gaussian mixtures, CSV ingestion and
//! Dirichlet label-skew partitioning across clients.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{squared_distance, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `n_samples x input_dim`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "dataset",
                left: features.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::contract(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::contract("cannot build an empty dataset"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::contract(format!("sample index {bad} out of range")));
        }
        Ok(Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Writes `label,f1,...,fd` lines; values round-trip exactly.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (row, y) in self.features.iter_rows().zip(&self.labels) {
            out.push_str(&y.to_string());
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

const MEAN_RETRIES: usize = 1000;

/// Parameters of a Gaussian-mixture dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub classes: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Mixture {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 2 {
            return Err(Error::config("synthetic data needs classes >= 2 and dim >= 2"));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::config("spread must be finite and non-negative"));
        }
        Ok(())
    }

    /// Class means: standard normal draws, rejected until every pair is at
    /// least `4 * spread` apart.
    pub fn means(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let min_sq = (4.0 * self.spread).powi(2);
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(self.classes);
        for c in 0..self.classes {
            let mut accepted = None;
            for _ in 0..MEAN_RETRIES {
                let cand: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                if means.iter().all(|m| squared_distance(m, &cand) >= min_sq) {
                    accepted = Some(cand);
                    break;
                }
            }
            match accepted {
                Some(m) => means.push(m),
                None => {
                    return Err(Error::config(format!(
                        "could not place class {c} mean at separation {} after {MEAN_RETRIES} tries",
                        4.0 * self.spread
                    )))
                }
            }
        }
        Ok(means)
    }

    /// Draws `per_class` samples of every class; `stream` selects an
    /// independent sample stream over the same means.
    pub fn sample(&self, per_class: usize, stream: u64) -> Result<LabeledDataset> {
        if per_class == 0 {
            return Err(Error::config("per_class must be >= 1"));
        }
        let means = self.means()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let mut data = Vec::with_capacity(self.classes * per_class * self.dim);
        let mut labels = Vec::with_capacity(self.classes * per_class);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                for &m in mean {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(m + self.spread * z);
                }
                labels.push(c);
            }
        }
        let features = Tensor::matrix(labels.len(), self.dim, data)?;
        LabeledDataset::new(features, labels, self.classes)
    }
}

/// Gaussian mixture with `per_class` samples per class, deterministic per seed.
pub fn make_synthetic(
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    Mixture {
        classes,
        dim,
        spread,
        seed,
    }
    .sample(per_class, 0)
}

pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file)
}

/// Parses `label,f1,...,fd` rows; `#` lines are comments.
pub fn parse_csv(reader: impl Read) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dim: Option<usize> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            detail: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() < 2 {
            return Err(Error::Parse {
                line,
                detail: "expected a label followed by at least one feature".into(),
            });
        }
        let d = rec.len() - 1;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::Parse {
                    line,
                    detail: format!("ragged row: {d} features, expected {expected}"),
                })
            }
            _ => {}
        }
        let label: usize = rec[0].parse().map_err(|_| Error::Parse {
            line,
            detail: format!("label {:?} is not a non-negative integer", &rec[0]),
        })?;
        labels.push(label);
        for field in rec.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                detail: format!("feature {field:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    detail: format!("feature {field:?} is not finite"),
                });
            }
            data.push(v);
        }
    }
    let Some(dim) = dim else {
        return Err(Error::Parse {
            line: 1,
            detail: "no samples".into(),
        });
    };
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let features = Tensor::matrix(labels.len(), dim, data)?;
    LabeledDataset::new(features, labels, classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub beta: f64,
    pub seed: u64,
    pub assignments: BTreeMap<usize, Vec<usize>>,
}

impl PartitionPlan {
    pub fn n_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.values().map(Vec::len).collect()
    }

    /// `p_k = |D_k| / D` in client-id order.
    pub fn client_weights(&self) -> Vec<f64> {
        let total: usize = self.sizes().iter().sum();
        self.sizes().iter().map(|&s| s as f64 / total as f64).collect()
    }

    /// True when assignments are pairwise disjoint and cover `0..n` exactly once.
    pub fn is_disjoint_cover(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for idx in self.assignments.values().flatten() {
            if *idx >= n || seen[*idx] {
                return false;
            }
            seen[*idx] = true;
        }
        seen.into_iter().all(|s| s)
    }

    /// Per-client class histograms.
    pub fn histograms(&self, data: &LabeledDataset) -> BTreeMap<usize, Vec<usize>> {
        self.assignments
            .iter()
            .map(|(&c, idx)| {
                let mut h = vec![0; data.classes];
                for &i in idx {
                    h[data.labels[i]] += 1;
                }
                (c, h)
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Splits `total` items proportionally to `shares` with largest-remainder rounding.
pub fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    let quotas: Vec<f64> = shares.iter().map(|s| s / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    // Largest fractional part first, lowest index on ties.
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn sample_dirichlet(rng: &mut impl Rng, beta: f64, n: usize) -> Result<Vec<f64>> {
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::config(format!("beta: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return Ok(draws.into_iter().map(|d| d / sum).collect());
        }
    }
}

const PARTITION_RETRIES: usize = 100;

/// Per-class Dirichlet split of sample indices across `n_clients`.
pub fn dirichlet_partition(
    data: &LabeledDataset,
    n_clients: usize,
    beta: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if n_clients < 2 {
        return Err(Error::config("need at least 2 clients"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::config("beta must be positive"));
    }
    if data.len() < n_clients {
        return Err(Error::config(format!(
            "{} samples cannot cover {n_clients} clients",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = vec![Vec::new(); n_clients];
    for _ in 0..PARTITION_RETRIES {
        assignments.iter_mut().for_each(Vec::clear);
        for class in 0..data.classes {
            let mut idx = data.indices_of_class(class);
            if idx.is_empty() {
                continue;
            }
            idx.shuffle(&mut rng);
            let q = sample_dirichlet(&mut rng, beta, n_clients)?;
            let counts = largest_remainder(&q, idx.len());
            let mut start = 0;
            for (client, &c) in counts.iter().enumerate() {
                assignments[client].extend_from_slice(&idx[start..start + c]);
                start += c;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            break;
        }
    }
    // Still-empty clients take one sample from the currently largest client.
    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let largest = (0..n_clients)
            .max_by(|&a, &b| assignments[a].len().cmp(&assignments[b].len()).then(b.cmp(&a)))
            .expect("non-empty");
        let moved = assignments[largest].pop().expect("largest client has samples");
        assignments[empty].push(moved);
    }
    let assignments = assignments
        .into_iter()
        .enumerate()
        .map(|(c, mut idx)| {
            idx.sort_unstable();
            (c, idx)
        })
        .collect();
    Ok(PartitionPlan {
        beta,
        seed,
        assignments,
    })
}

/// Rows assigned to one client.
pub fn split_client(
    data: &LabeledDataset,
    plan: &PartitionPlan,
    client: usize,
) -> Result<LabeledDataset> {
    let idx = plan
        .assignments
        .get(&client)
        .ok_or_else(|| Error::contract(format!("unknown client {client}")))?;
    data.subset(idx)
}
