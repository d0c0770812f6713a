//! Clustering-based prototype extraction.
//!
//! Each present class is clustered with k-means over encoder features, then
//! every cluster emits `n_repeat` prototypes, each the mean of a random
//! `ceil(r * |cluster|)`-sized subset of its members.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{squared_distance, Tensor};

pub const MAX_LLOYD_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, first entry from the seeding.
    pub history: Vec<f64>,
}

impl ClusterResult {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == cluster)
            .collect()
    }
}

/// Mean of the given rows, summed in ascending index order.
fn mean_of(points: &Tensor, members: &[usize]) -> Vec<f64> {
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    let mut acc = vec![0.0; points.cols()];
    for &i in &sorted {
        for (a, v) in acc.iter_mut().zip(points.row(i)) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= sorted.len() as f64);
    acc
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &Tensor, centroids: &[Vec<f64>]) -> Vec<usize> {
    points.iter_rows().map(|p| nearest(p, centroids).0).collect()
}

fn inertia(points: &Tensor, centroids: &[Vec<f64>], assignment: &[usize]) -> f64 {
    points
        .iter_rows()
        .zip(assignment)
        .map(|(p, &j)| squared_distance(p, &centroids[j]))
        .sum()
}

fn plus_plus(points: &Tensor, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut centroids = vec![points.row(rng.random_range(0..n)).to_vec()];
    while centroids.len() < k {
        let d2: Vec<f64> = points.iter_rows().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points.row(pick).to_vec());
    }
    centroids
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(points: &Tensor, centroids: &mut [Vec<f64>], assignment: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        assignment.iter().for_each(|&j| sizes[j] += 1);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let donor = (0..assignment.len())
            .filter(|&i| sizes[assignment[i]] > 1)
            .map(|i| (i, squared_distance(points.row(i), &centroids[assignment[i]])))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        let Some((p, _)) = donor else { return };
        centroids[empty] = points.row(p).to_vec();
        assignment[p] = empty;
    }
}

/// Lloyd's algorithm from k-means++ seeding.
pub fn kmeans(points: &Tensor, k: usize, seed: u64) -> Result<ClusterResult> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    if k > n {
        return Err(Error::config(format!("k = {k} exceeds {n} points")));
    }
    let mut rng = seed::rng(&[seed]);
    let mut centroids = plus_plus(points, k, &mut rng);
    let mut assignment = assign(points, &centroids);
    repair_empty(points, &mut centroids, &mut assignment);
    let mut history = vec![inertia(points, &centroids, &assignment)];

    for _ in 0..MAX_LLOYD_ITERS {
        centroids = (0..k)
            .map(|j| {
                let m: Vec<usize> = (0..n).filter(|&i| assignment[i] == j).collect();
                mean_of(points, &m)
            })
            .collect();
        let mut next = assign(points, &centroids);
        repair_empty(points, &mut centroids, &mut next);
        history.push(inertia(points, &centroids, &next));
        if next == assignment {
            break;
        }
        assignment = next;
    }

    let centroids: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let m: Vec<usize> = (0..n).filter(|&i| assignment[i] == j).collect();
            mean_of(points, &m)
        })
        .collect();
    let inertia = inertia(points, &centroids, &assignment);
    Ok(ClusterResult {
        centroids,
        assignment,
        inertia,
        history,
    })
}

/// Lowest-inertia result over several seeds.
pub fn kmeans_restarts(points: &Tensor, k: usize, seeds: &[u64]) -> Result<ClusterResult> {
    let mut best: Option<ClusterResult> = None;
    for &s in seeds {
        let r = kmeans(points, k, s)?;
        if best.as_ref().is_none_or(|b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    best.ok_or_else(|| Error::contract("kmeans_restarts needs at least one seed"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub vector: Vec<f64>,
    pub class: usize,
    pub client: usize,
    pub cluster: usize,
    pub repeat: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrototypeConfig {
    /// Clusters per class.
    pub k: usize,
    /// Fraction of a cluster drawn per repeat.
    pub r: f64,
    pub n_repeat: usize,
}

impl PrototypeConfig {
    /// Single class-mean prototype.
    pub const TRADITIONAL: PrototypeConfig = PrototypeConfig {
        k: 1,
        r: 1.0,
        n_repeat: 1,
    };

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_repeat == 0 {
            return Err(Error::config("k and n_repeat must be >= 1"));
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(Error::config(format!("r = {} must lie in (0, 1]", self.r)));
        }
        Ok(())
    }
}

pub fn make_prototypes(
    features: &Tensor,
    labels: &[usize],
    cfg: PrototypeConfig,
    client: usize,
    seed: u64,
) -> Result<Vec<Prototype>> {
    cfg.validate()?;
    if features.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "make_prototypes",
            left: features.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }

    let mut out = Vec::new();
    for (&class, rows) in &by_class {
        let points = features.select_rows(rows);
        let k = cfg.k.min(rows.len());
        let clusters = kmeans(&points, k, seed::derive(&[seed, class as u64, 0]))?;
        let mut rng = seed::rng(&[seed, class as u64, 1]);
        for cluster in 0..k {
            let members = clusters.members(cluster);
            let take = ((cfg.r * members.len() as f64).ceil() as usize).clamp(1, members.len());
            for repeat in 0..cfg.n_repeat {
                let drawn: Vec<usize> = index::sample(&mut rng, members.len(), take)
                    .into_iter()
                    .map(|j| members[j])
                    .collect();
                out.push(Prototype {
                    vector: mean_of(&points, &drawn),
                    class,
                    client,
                    cluster,
                    repeat,
                });
            }
        }
    }
    Ok(out)
}

/// One class-mean prototype per present class.
pub fn traditional_prototypes(
    features: &Tensor,
    labels: &[usize],
    client: usize,
) -> Result<Vec<Prototype>> {
    make_prototypes(features, labels, PrototypeConfig::TRADITIONAL, client, 0)
}

/// One line of a JSON-lines exchange file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExchangeRecord {
    Prototype(Prototype),
    GlobalPrototype { class: usize, vector: Vec<f64> },
    Exemplar { class: usize, vector: Vec<f64> },
}

pub fn write_exchange(path: &Path, records: &[ExchangeRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_exchange(path: &Path) -> Result<Vec<ExchangeRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}
