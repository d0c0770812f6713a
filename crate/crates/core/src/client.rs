//! Local training: cross-entropy plus the prototype alignment regularizer
//! (node, angle and edge terms against global prototypes).

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Reduction, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{BoundParams, ModelParams, Stage, ALL_PARTS};
use crate::prototype::{make_prototypes, Prototype, PrototypeConfig};
use crate::seed;
use crate::tensor::{l2_norm, Tensor};

/// One feature-space prototype per class, broadcast by the server.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalPrototypeSet {
    pub by_class: BTreeMap<usize, Vec<f64>>,
}

impl GlobalPrototypeSet {
    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.by_class.get(&class).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_class.is_empty()
    }
}

/// How the angle term compares the two cosines.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleMode {
    /// `|cos_f - cos_u|`
    #[default]
    Difference,
    /// `|cos_f| + |cos_u|`, the L1 norm of the pair read literally. Diagnostics only.
    LiteralL1,
}

/// Outer penalty of the edge term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgePenalty {
    #[default]
    Square,
    Abs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub kappa: f64,
    pub tau_l: f64,
    /// Local representation learning switch; off drops the alignment term.
    pub lrl: bool,
    /// Cap on sampled triples and pairs per batch.
    pub max_relations: usize,
    pub angle_mode: AngleMode,
    pub edge_penalty: EdgePenalty,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 0.01,
            weight_decay: 1e-5,
            kappa: 0.1,
            tau_l: 0.5,
            lrl: true,
            max_relations: 16,
            angle_mode: AngleMode::Difference,
            edge_penalty: EdgePenalty::Square,
        }
    }
}

/// Which prototypes a client uploads after training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrototypeMode {
    None,
    Clustered(PrototypeConfig),
    /// Single class mean per class.
    Traditional,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub base: f64,
    pub node: f64,
    pub angle: f64,
    pub edge: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub params: ModelParams,
    pub prototypes: Vec<Prototype>,
    pub sample_count: usize,
    pub loss_trace: Vec<EpochLoss>,
    /// Angle triples dropped because two points coincided.
    pub skipped_angles: usize,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = l2_norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Mean prototype-contrast loss over rows whose label has a global prototype.
///
/// Features and prototypes are L2-normalized before the dot product.
/// Returns `None` when no row qualifies or fewer than two classes exist.
pub fn loss_node(
    g: &mut Graph,
    features: Var,
    labels: &[usize],
    globals: &GlobalPrototypeSet,
    tau: f64,
) -> Result<Option<Var>> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!("tau_l must be positive, got {tau}")));
    }
    if globals.len() < 2 {
        return Ok(None);
    }
    let classes: Vec<usize> = globals.by_class.keys().copied().collect();
    let column: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| column.contains_key(&labels[i])).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let dim = g.value(features).cols();
    let mut u_t = vec![0.0; dim * classes.len()];
    for (j, c) in classes.iter().enumerate() {
        for (d, v) in normalized(&globals.by_class[c]).into_iter().enumerate() {
            u_t[d * classes.len() + j] = v;
        }
    }
    let u_t = g.constant(Tensor::matrix(dim, classes.len(), u_t)?);
    let mut mask = vec![0.0; rows.len() * classes.len()];
    for (r, &i) in rows.iter().enumerate() {
        mask[r * classes.len() + column[&labels[i]]] = 1.0;
    }
    let mask = g.constant(Tensor::matrix(rows.len(), classes.len(), mask)?);

    let f = g.select_rows(features, &rows)?;
    let f = g.normalize_rows(f);
    let sims = g.matmul(f, u_t)?;
    let logits = g.scale(sims, 1.0 / tau);
    let log_p = g.log_softmax_rows(logits);
    let picked = g.mul(log_p, mask)?;
    let total = g.sum(picked);
    Ok(Some(g.scale(total, -1.0 / rows.len() as f64)))
}

/// `cos` of the angle at the middle point.
pub fn vertex_cosine(a: &[f64], b: &[f64], c: &[f64]) -> Option<f64> {
    let u: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let v: Vec<f64> = c.iter().zip(b).map(|(x, y)| x - y).collect();
    let (nu, nv) = (l2_norm(&u), l2_norm(&v));
    if nu == 0.0 || nv == 0.0 {
        return None;
    }
    Some(u.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() / (nu * nv))
}

#[derive(Debug)]
pub struct RelationLoss {
    pub loss: Option<Var>,
    pub skipped: usize,
}

/// Angle alignment over `triples` of feature rows against matching prototype triples.
pub fn loss_angle(
    g: &mut Graph,
    features: Var,
    triples: &[[usize; 3]],
    prototypes: &[[&[f64]; 3]],
    mode: AngleMode,
) -> Result<RelationLoss> {
    if triples.len() != prototypes.len() {
        return Err(Error::contract("one prototype triple per feature triple"));
    }
    let fv = g.value(features);
    let mut kept = Vec::new();
    let mut targets = Vec::new();
    for (t, p) in triples.iter().zip(prototypes) {
        let feat = vertex_cosine(fv.row(t[0]), fv.row(t[1]), fv.row(t[2]));
        let proto = vertex_cosine(p[0], p[1], p[2]);
        if let (Some(_), Some(target)) = (feat, proto) {
            kept.push(*t);
            targets.push(target);
        }
    }
    let skipped = triples.len() - kept.len();
    if kept.is_empty() {
        return Ok(RelationLoss {
            loss: None,
            skipped,
        });
    }
    let pick = |k: usize| kept.iter().map(|t| t[k]).collect::<Vec<_>>();
    let a = g.select_rows(features, &pick(0))?;
    let b = g.select_rows(features, &pick(1))?;
    let c = g.select_rows(features, &pick(2))?;
    let ab = g.sub(a, b)?;
    let cb = g.sub(c, b)?;
    let ab = g.normalize_rows(ab);
    let cb = g.normalize_rows(cb);
    let prod = g.mul(ab, cb)?;
    let cos = g.reduce(Reduction::Sum, prod, Some(1))?;
    let per = match mode {
        AngleMode::Difference => {
            let target = g.constant(Tensor::vector(targets));
            let diff = g.sub(cos, target)?;
            g.abs(diff)
        }
        AngleMode::LiteralL1 => {
            let target = g.constant(Tensor::vector(targets.iter().map(|t| t.abs()).collect()));
            let mag = g.abs(cos);
            g.add(mag, target)?
        }
    };
    Ok(RelationLoss {
        loss: Some(g.mean(per)),
        skipped,
    })
}

/// Edge alignment: penalized gap between feature and prototype distances.
pub fn loss_edge(
    g: &mut Graph,
    features: Var,
    pairs: &[[usize; 2]],
    prototypes: &[[&[f64]; 2]],
    penalty: EdgePenalty,
) -> Result<Option<Var>> {
    if pairs.len() != prototypes.len() {
        return Err(Error::contract("one prototype pair per feature pair"));
    }
    if pairs.is_empty() {
        return Ok(None);
    }
    let targets: Vec<f64> = prototypes
        .iter()
        .map(|p| {
            let d: Vec<f64> = p[0].iter().zip(p[1]).map(|(x, y)| x - y).collect();
            l2_norm(&d)
        })
        .collect();
    let a = g.select_rows(features, &pairs.iter().map(|p| p[0]).collect::<Vec<_>>())?;
    let b = g.select_rows(features, &pairs.iter().map(|p| p[1]).collect::<Vec<_>>())?;
    let diff = g.sub(a, b)?;
    let dist = g.reduce(Reduction::L2Norm, diff, Some(1))?;
    let target = g.constant(Tensor::vector(targets));
    let gap = g.sub(dist, target)?;
    let per = match penalty {
        EdgePenalty::Square => g.square(gap),
        EdgePenalty::Abs => g.abs(gap),
    };
    Ok(Some(g.mean(per)))
}

/// Mean cross-entropy of `logits` rows against `labels`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let t = g.value(logits);
    let (rows, cols) = (t.rows(), t.cols());
    if rows != labels.len() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            left: t.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let mut mask = vec![0.0; rows * cols];
    for (r, &y) in labels.iter().enumerate() {
        if y >= cols {
            return Err(Error::contract(format!("label {y} outside {cols} classes")));
        }
        mask[r * cols + y] = 1.0;
    }
    let mask = g.constant(Tensor::matrix(rows, cols, mask)?);
    let log_p = g.log_softmax_rows(logits);
    let picked = g.mul(log_p, mask)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / rows as f64))
}

/// Label-distinct triples and pairs sampled for one batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Relations {
    pub triples: Vec<[usize; 3]>,
    pub pairs: Vec<[usize; 2]>,
}

/// Samples up to `max` label-distinct triples and pairs, uniformly without
/// replacement, among rows whose class has a global prototype.
pub fn sample_relations(
    labels: &[usize],
    globals: &GlobalPrototypeSet,
    max: usize,
    rng: &mut impl Rng,
) -> Relations {
    let eligible: Vec<usize> = (0..labels.len())
        .filter(|&i| globals.by_class.contains_key(&labels[i]))
        .collect();
    let mut pairs = Vec::new();
    let mut triples = Vec::new();
    for (x, &i) in eligible.iter().enumerate() {
        for (y, &j) in eligible.iter().enumerate().skip(x + 1) {
            if labels[i] == labels[j] {
                continue;
            }
            pairs.push([i, j]);
            for &l in &eligible[y + 1..] {
                if labels[l] != labels[i] && labels[l] != labels[j] {
                    triples.push([i, j, l]);
                }
            }
        }
    }
    let mut choose = |n: usize| -> Vec<usize> {
        let mut picked = index::sample(rng, n, max.min(n)).into_vec();
        picked.sort_unstable();
        picked
    };
    let tri_idx = choose(triples.len());
    let pair_idx = choose(pairs.len());
    Relations {
        triples: tri_idx.into_iter().map(|i| triples[i]).collect(),
        pairs: pair_idx.into_iter().map(|i| pairs[i]).collect(),
    }
}

/// Scalar values of one batch objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct BatchLoss {
    pub total: f64,
    pub base: f64,
    pub node: f64,
    pub angle: f64,
    pub edge: f64,
    pub skipped_angles: usize,
}

/// Builds `L_base + kappa * (L_N + L_A + L_E)` for one batch. The alignment
/// part is omitted when `alignment` is `None`.
pub fn client_objective(
    g: &mut Graph,
    bound: &BoundParams,
    x: Var,
    labels: &[usize],
    alignment: Option<(&GlobalPrototypeSet, &Relations)>,
    cfg: &ClientConfig,
) -> Result<(Var, BatchLoss)> {
    let f = bound.encode(g, x)?;
    let logits = bound.classify(g, f)?;
    let base = cross_entropy(g, logits, labels)?;
    let mut out = BatchLoss {
        base: g.value(base).item(),
        ..Default::default()
    };
    let Some((globals, rel)) = alignment else {
        out.total = out.base;
        return Ok((base, out));
    };

    let mut terms = Vec::new();
    if let Some(node) = loss_node(g, f, labels, globals, cfg.tau_l)? {
        out.node = g.value(node).item();
        terms.push(node);
    }
    let proto = |c: usize| globals.get(c).expect("relation classes have prototypes");
    let tri_protos: Vec<[&[f64]; 3]> = rel
        .triples
        .iter()
        .map(|t| [proto(labels[t[0]]), proto(labels[t[1]]), proto(labels[t[2]])])
        .collect();
    let angle = loss_angle(g, f, &rel.triples, &tri_protos, cfg.angle_mode)?;
    out.skipped_angles = angle.skipped;
    if let Some(a) = angle.loss {
        out.angle = g.value(a).item();
        terms.push(a);
    }
    let pair_protos: Vec<[&[f64]; 2]> = rel
        .pairs
        .iter()
        .map(|p| [proto(labels[p[0]]), proto(labels[p[1]])])
        .collect();
    if let Some(e) = loss_edge(g, f, &rel.pairs, &pair_protos, cfg.edge_penalty)? {
        out.edge = g.value(e).item();
        terms.push(e);
    }

    let mut total = base;
    for t in terms {
        let weighted = g.scale(t, cfg.kappa);
        total = g.add(total, weighted)?;
    }
    out.total = g.value(total).item();
    Ok((total, out))
}

/// Runs local epochs of mini-batch SGD and extracts prototypes.
///
/// RNG streams derive from `seed` only, so the result is independent of
/// which worker runs it.
pub fn train_client(
    params: &ModelParams,
    data: &LabeledDataset,
    globals: Option<&GlobalPrototypeSet>,
    cfg: &ClientConfig,
    prototypes: PrototypeMode,
    client: usize,
    seed: u64,
) -> Result<ClientUpdate> {
    if data.is_empty() {
        return Err(Error::contract(format!("client {client} has no data")));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let globals = globals.filter(|g| cfg.lrl && cfg.kappa != 0.0 && g.len() >= 2);
    let mut shuffle_rng = seed::rng(&[seed, 0]);
    let mut relation_rng = seed::rng(&[seed, 1]);
    let mut params = params.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut skipped_angles = 0;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = EpochLoss::default();
        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut g = Graph::new();
            let bound = params.bind(&mut g, &ALL_PARTS);
            let x = g.constant(data.features.select_rows(chunk));
            let relations = globals
                .map(|gp| (gp, sample_relations(&labels, gp, cfg.max_relations, &mut relation_rng)));
            let alignment = relations.as_ref().map(|(gp, r)| (*gp, r));
            let (loss, parts) = client_objective(&mut g, &bound, x, &labels, alignment, cfg)?;
            g.backward(loss)?;
            let grads = bound.gradients(&g, &ALL_PARTS);
            params = params.sgd_step(&grads, cfg.lr, cfg.weight_decay)?;

            let w = chunk.len() as f64;
            sums.base += parts.base * w;
            sums.node += parts.node * w;
            sums.angle += parts.angle * w;
            sums.edge += parts.edge * w;
            skipped_angles += parts.skipped_angles;
        }
        let n = data.len() as f64;
        trace.push(EpochLoss {
            base: sums.base / n,
            node: sums.node / n,
            angle: sums.angle / n,
            edge: sums.edge / n,
        });
    }

    let protos = match prototypes {
        PrototypeMode::None => Vec::new(),
        mode => {
            let features = params.forward(&data.features, Stage::Encoder)?;
            let cfg = match mode {
                PrototypeMode::Clustered(c) => c,
                _ => PrototypeConfig::TRADITIONAL,
            };
            make_prototypes(&features, &data.labels, cfg, client, seed::derive(&[seed, 2]))?
        }
    };

    Ok(ClientUpdate {
        client,
        params,
        prototypes: protos,
        sample_count: data.len(),
        loss_trace: trace,
        skipped_angles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Mixture;
    use crate::model::{ClassifierInput, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn globals(entries: &[(usize, Vec<f64>)]) -> GlobalPrototypeSet {
        GlobalPrototypeSet {
            by_class: entries.iter().cloned().collect(),
        }
    }

    fn node_value(f: &[f64], label: usize, gp: &GlobalPrototypeSet, tau: f64) -> Option<f64> {
        let mut g = Graph::new();
        let fv = g.leaf(Tensor::matrix(1, f.len(), f.to_vec()).unwrap());
        loss_node(&mut g, fv, &[label], gp, tau)
            .unwrap()
            .map(|v| g.value(v).item())
    }

    #[test]
    fn node_loss_unit_positive_orthogonal_negative() {
        let gp = globals(&[(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]);
        let v = node_value(&[1.0, 0.0], 0, &gp, 0.5).unwrap();
        let e2 = 2f64.exp();
        let expected = -(e2 / (e2 + 1.0)).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.12693).abs() < 1e-5);
    }

    #[test]
    fn node_loss_negatives_equal_positive() {
        let gp = globals(&[(0, vec![0.6, 0.8]), (1, vec![0.6, 0.8]), (2, vec![0.6, 0.8])]);
        let v = node_value(&[0.3, -0.2], 0, &gp, 0.5).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn node_loss_skips_and_rejects() {
        let gp = globals(&[(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]);
        assert_eq!(node_value(&[1.0, 0.0], 5, &gp, 0.5), None);
        let lonely = globals(&[(0, vec![1.0, 0.0])]);
        assert_eq!(node_value(&[1.0, 0.0], 0, &lonely, 0.5), None);
        let mut g = Graph::new();
        let fv = g.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        assert!(matches!(loss_node(&mut g, fv, &[0], &gp, 0.0), Err(Error::Contract(_))));
    }

    fn angle_value(f: [[f64; 2]; 3], p: [[f64; 2]; 3], mode: AngleMode) -> RelationLoss {
        let mut g = Graph::new();
        let fv = g.leaf(Tensor::from_rows(&f).unwrap());
        let protos = [[&p[0][..], &p[1][..], &p[2][..]]];
        loss_angle(&mut g, fv, &[[0, 1, 2]], &protos, mode).inspect(|r| {
            if let Some(l) = r.loss {
                assert!(g.value(l).is_finite());
            }
        })
        .unwrap()
    }

    fn angle_scalar(f: [[f64; 2]; 3], p: [[f64; 2]; 3], mode: AngleMode) -> f64 {
        let mut g = Graph::new();
        let fv = g.leaf(Tensor::from_rows(&f).unwrap());
        let protos = [[&p[0][..], &p[1][..], &p[2][..]]];
        let r = loss_angle(&mut g, fv, &[[0, 1, 2]], &protos, mode).unwrap();
        g.value(r.loss.unwrap()).item()
    }

    #[test]
    fn angle_identity_and_right_vs_straight() {
        let tri = [[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]];
        assert_eq!(angle_scalar(tri, tri, AngleMode::Difference), 0.0);
        let straight = [[1.0, 0.0], [0.0, 0.0], [-1.0, 0.0]];
        let v = angle_scalar(tri, straight, AngleMode::Difference);
        assert!((v - 1.0).abs() < 1e-15);
        // The literal L1 reading penalizes a congruent configuration.
        let lit = angle_scalar(straight, straight, AngleMode::LiteralL1);
        assert!((lit - 2.0).abs() < 1e-15);
    }

    #[test]
    fn angle_skips_coincident_points() {
        let f = [[1.0, 1.0], [1.0, 1.0], [0.0, 1.0]];
        let p = [[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]];
        let r = angle_value(f, p, AngleMode::Difference);
        assert!(r.loss.is_none());
        assert_eq!(r.skipped, 1);
    }

    #[test]
    fn angle_invariant_under_similarity_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let mut pt = || [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let f = [pt(), pt(), pt()];
            let p = [pt(), pt(), pt()];
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let scale: f64 = rng.random_range(0.1..10.0);
            let shift = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let (c, s) = (theta.cos(), theta.sin());
            let tf = f.map(|v| {
                [
                    scale * (c * v[0] - s * v[1]) + shift[0],
                    scale * (s * v[0] + c * v[1]) + shift[1],
                ]
            });
            let a = angle_scalar(f, p, AngleMode::Difference);
            let b = angle_scalar(tf, p, AngleMode::Difference);
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            assert!((0.0..=2.0).contains(&a));
        }
    }

    fn edge_value(f: [[f64; 2]; 2], p: [[f64; 2]; 2], penalty: EdgePenalty) -> f64 {
        let mut g = Graph::new();
        let fv = g.leaf(Tensor::from_rows(&f).unwrap());
        let protos = [[&p[0][..], &p[1][..]]];
        let l = loss_edge(&mut g, fv, &[[0, 1]], &protos, penalty).unwrap().unwrap();
        g.value(l).item()
    }

    #[test]
    fn edge_examples() {
        let f = [[0.0, 0.0], [3.0, 4.0]];
        assert_eq!(edge_value(f, f, EdgePenalty::Square), 0.0);
        let p = [[0.0, 0.0], [0.0, 3.0]];
        assert_eq!(edge_value(f, p, EdgePenalty::Square), 4.0);
        assert_eq!(edge_value(f, p, EdgePenalty::Abs), 2.0);
    }

    #[test]
    fn relations_are_label_distinct_and_bounded() {
        let labels = vec![0, 0, 1, 2, 3, 1, 2, 0, 5];
        let gp = globals(&[(0, vec![0.0]), (1, vec![1.0]), (2, vec![2.0]), (3, vec![3.0])]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rel = sample_relations(&labels, &gp, 16, &mut rng);
        assert_eq!(rel.triples.len(), 16);
        assert_eq!(rel.pairs.len(), 16);
        for t in &rel.triples {
            let (a, b, c) = (labels[t[0]], labels[t[1]], labels[t[2]]);
            assert!(a != b && b != c && a != c);
            assert!(t.iter().all(|&i| labels[i] != 5));
        }
        let unique: std::collections::HashSet<_> = rel.triples.iter().collect();
        assert_eq!(unique.len(), rel.triples.len());

        let one_class = vec![0, 0, 0];
        let rel = sample_relations(&one_class, &gp, 16, &mut rng);
        assert!(rel.triples.is_empty() && rel.pairs.is_empty());
    }

    fn tiny_model(input: usize, classes: usize, seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            input_dim: input,
            encoder_hidden: vec![16],
            feature_dim: 8,
            head_hidden: vec![8],
            embed_dim: 4,
            classes,
            classifier_input: ClassifierInput::Encoder,
        };
        ModelParams::init(&cfg, seed).unwrap()
    }

    #[test]
    fn zero_epochs_leave_params() {
        let data = Mixture { classes: 2, dim: 3, spread: 0.3, seed: 1 }.sample(5, 0).unwrap();
        let m = tiny_model(3, 2, 0);
        let cfg = ClientConfig { epochs: 0, ..Default::default() };
        let up = train_client(&m, &data, None, &cfg, PrototypeMode::None, 0, 1).unwrap();
        assert_eq!(up.params, m);
        assert_eq!(up.sample_count, 10);
        assert!(up.loss_trace.is_empty());
    }

    #[test]
    fn kappa_zero_matches_plain_training() {
        let data = Mixture { classes: 3, dim: 4, spread: 0.5, seed: 2 }.sample(12, 0).unwrap();
        let m = tiny_model(4, 3, 3);
        let gp = globals(&[(0, vec![1.0; 8]), (1, vec![0.5; 8]), (2, vec![-1.0; 8])]);
        let plain = ClientConfig { epochs: 3, batch_size: 8, lrl: false, ..Default::default() };
        let zero = ClientConfig { kappa: 0.0, lrl: true, ..plain.clone() };
        let a = train_client(&m, &data, None, &plain, PrototypeMode::None, 1, 9).unwrap();
        let b = train_client(&m, &data, Some(&gp), &zero, PrototypeMode::None, 1, 9).unwrap();
        assert_eq!(a.params, b.params);
        let c = train_client(&m, &data, Some(&gp), &ClientConfig { kappa: 0.5, ..zero }, PrototypeMode::None, 1, 9)
            .unwrap();
        assert_ne!(a.params, c.params);
        assert!(c.loss_trace.iter().all(|e| e.node > 0.0 && e.edge.is_finite() && e.angle.is_finite()));
    }

    #[test]
    fn empty_dataset_rejected() {
        let data = Mixture { classes: 2, dim: 3, spread: 0.3, seed: 1 }.sample(2, 0).unwrap();
        let empty = LabeledDataset {
            features: data.features.clone(),
            labels: vec![],
            classes: 2,
        };
        let m = tiny_model(3, 2, 0);
        let r = train_client(&m, &empty, None, &ClientConfig::default(), PrototypeMode::None, 0, 0);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn prototypes_emitted_per_mode() {
        let data = Mixture { classes: 3, dim: 4, spread: 0.5, seed: 2 }.sample(10, 0).unwrap();
        let m = tiny_model(4, 3, 3);
        let cfg = ClientConfig { epochs: 1, ..Default::default() };
        let pc = PrototypeConfig { k: 2, r: 0.5, n_repeat: 5 };
        let up = train_client(&m, &data, None, &cfg, PrototypeMode::Clustered(pc), 4, 0).unwrap();
        assert_eq!(up.prototypes.len(), 3 * 2 * 5);
        assert!(up.prototypes.iter().all(|p| p.client == 4 && p.vector.len() == 8));
        let up = train_client(&m, &data, None, &cfg, PrototypeMode::Traditional, 4, 0).unwrap();
        assert_eq!(up.prototypes.len(), 3);
    }
}
