//! Server-side calibration of the projection head and classifier over the
//! cross-client prototype pool, plus knowledge-base prediction.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Reduction, Var};
use crate::client::{cross_entropy, GlobalPrototypeSet};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Part, Stage};
use crate::prototype::Prototype;
use crate::seed;
use crate::tensor::{cosine, mean_vector, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Real,
    AugPositive,
    AugNegative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationEntry {
    pub vector: Vec<f64>,
    /// For negatives this is the anchor's class; negatives never count as
    /// same-class with anything.
    pub class: usize,
    /// Augmented entries inherit the anchor's client.
    pub client: usize,
    pub kind: EntryKind,
    /// Index of the real anchor an augmented entry came from.
    pub anchor: Option<usize>,
}

impl CalibrationEntry {
    fn same_class(&self, other: &CalibrationEntry) -> bool {
        self.kind != EntryKind::AugNegative
            && other.kind != EntryKind::AugNegative
            && self.class == other.class
    }

    /// 1 for same class across clients or different class within a client,
    /// 0.5 otherwise.
    fn sigma(&self, other: &CalibrationEntry) -> f64 {
        let same_class = self.same_class(other);
        let same_client = self.client == other.client;
        if same_class != same_client {
            1.0
        } else {
            0.5
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentDiagnostics {
    pub anchors_without_partner: usize,
    pub anchors_without_negative: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBatch {
    /// Real anchors first, in pool order, then augmented entries.
    pub entries: Vec<CalibrationEntry>,
    pub real_count: usize,
    /// Per anchor: (positive entry indices, negative entry indices).
    pub augments: Vec<(Vec<usize>, Vec<usize>)>,
    pub diagnostics: AugmentDiagnostics,
}

impl CalibrationBatch {
    pub fn real_only(pool: &[Prototype]) -> Self {
        let entries = pool
            .iter()
            .map(|p| CalibrationEntry {
                vector: p.vector.clone(),
                class: p.class,
                client: p.client,
                kind: EntryKind::Real,
                anchor: None,
            })
            .collect();
        Self {
            entries,
            real_count: pool.len(),
            augments: vec![(Vec::new(), Vec::new()); pool.len()],
            diagnostics: AugmentDiagnostics::default(),
        }
    }
}

/// Positive mixing by extrapolation past a same-class prototype and hard
/// negative mining by interpolation toward a different-class prototype.
pub fn augment(
    pool: &[Prototype],
    lambda_u: f64,
    n_aug: usize,
    seed: u64,
) -> Result<CalibrationBatch> {
    if pool.is_empty() {
        return Err(Error::contract("augment needs a non-empty pool"));
    }
    if !(lambda_u > 0.0 && lambda_u.is_finite()) {
        return Err(Error::contract(format!("lambda_u must be positive, got {lambda_u}")));
    }
    let mut batch = CalibrationBatch::real_only(pool);
    let mut rng = seed::rng(&[seed, 3]);
    for (i, anchor) in pool.iter().enumerate() {
        let same: Vec<usize> = (0..pool.len())
            .filter(|&j| j != i && pool[j].class == anchor.class)
            .collect();
        let other: Vec<usize> = (0..pool.len()).filter(|&j| pool[j].class != anchor.class).collect();
        if same.is_empty() {
            batch.diagnostics.anchors_without_partner += 1;
        }
        if other.is_empty() {
            batch.diagnostics.anchors_without_negative += 1;
        }
        let u = &anchor.vector;
        for _ in 0..n_aug {
            if !same.is_empty() {
                let uj = &pool[same[rng.random_range(0..same.len())]].vector;
                let v = u.iter().zip(uj).map(|(a, b)| (b - a) * lambda_u + b).collect();
                batch.augments[i].0.push(batch.entries.len());
                batch.entries.push(CalibrationEntry {
                    vector: v,
                    class: anchor.class,
                    client: anchor.client,
                    kind: EntryKind::AugPositive,
                    anchor: Some(i),
                });
            }
            if !other.is_empty() {
                let uk = &pool[other[rng.random_range(0..other.len())]].vector;
                let v = u.iter().zip(uk).map(|(a, c)| (c - a) * lambda_u + a).collect();
                batch.augments[i].1.push(batch.entries.len());
                batch.entries.push(CalibrationEntry {
                    vector: v,
                    class: anchor.class,
                    client: anchor.client,
                    kind: EntryKind::AugNegative,
                    anchor: Some(i),
                });
            }
        }
    }
    Ok(batch)
}

/// Triplet term on head outputs; rows of the three inputs are aligned.
pub fn loss_acl(
    g: &mut Graph,
    anchor: Var,
    positive: Var,
    negative: Var,
    alpha: f64,
    clamp: bool,
) -> Result<Var> {
    let dp = g.sub(anchor, positive)?;
    let dp = g.square(dp);
    let dp = g.reduce(Reduction::Sum, dp, Some(1))?;
    let dn = g.sub(anchor, negative)?;
    let dn = g.square(dn);
    let dn = g.reduce(Reduction::Sum, dn, Some(1))?;
    let gap = g.sub(dp, dn)?;
    let margin = g.constant(Tensor::scalar(alpha));
    let v = g.add(gap, margin)?;
    let v = if clamp { g.relu(v) } else { v };
    Ok(g.mean(v))
}

#[derive(Debug)]
pub struct WclLoss {
    pub loss: Option<Var>,
    /// Anchors dropped for having no positive in the set.
    pub skipped: usize,
}

/// Weighted contrastive loss of `anchors` against every other entry of `set`.
///
/// `z` holds the L2-normalized head outputs of `set`, row-aligned.
pub fn loss_wcl(
    g: &mut Graph,
    z: Var,
    set: &[&CalibrationEntry],
    anchors: &[usize],
    tau: f64,
) -> Result<WclLoss> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!("tau_g must be positive, got {tau}")));
    }
    let n = set.len();
    let mut kept = Vec::new();
    let mut weights = Vec::new();
    let mut pos = Vec::new();
    let mut log_sigma_const = Vec::new();
    for &i in anchors {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && set[j].kind != EntryKind::AugNegative && set[i].same_class(set[j]))
            .collect();
        if positives.is_empty() {
            continue;
        }
        kept.push(i);
        let mut w_row = vec![0.0; n];
        for (k, w) in w_row.iter_mut().enumerate() {
            if k != i {
                *w = set[i].sigma(set[k]);
            }
        }
        let share = 1.0 / positives.len() as f64;
        let mut p_row = vec![0.0; n];
        let mut c = 0.0;
        for &j in &positives {
            p_row[j] = share;
            c += share * w_row[j].ln();
        }
        weights.extend(w_row);
        pos.extend(p_row);
        log_sigma_const.push(c);
    }
    let skipped = anchors.len() - kept.len();
    if kept.is_empty() {
        return Ok(WclLoss {
            loss: None,
            skipped,
        });
    }
    let m = kept.len();
    let za = g.select_rows(z, &kept)?;
    let zt = g.transpose(z)?;
    let sims = g.matmul(za, zt)?;
    let sims = g.scale(sims, 1.0 / tau);
    let w = g.constant(Tensor::matrix(m, n, weights)?);
    let p = g.constant(Tensor::matrix(m, n, pos)?);
    let e = g.exp(sims);
    let weighted = g.mul(e, w)?;
    let den = g.reduce(Reduction::Sum, weighted, Some(1))?;
    let log_den = g.log(den)?;
    let num = g.mul(sims, p)?;
    let num = g.reduce(Reduction::Sum, num, Some(1))?;
    let c = g.constant(Tensor::vector(log_sigma_const));
    let per = g.sub(log_den, num)?;
    let per = g.sub(per, c)?;
    Ok(WclLoss {
        loss: Some(g.mean(per)),
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub eta: f64,
    pub alpha: f64,
    pub tau_g: f64,
    pub lambda_u: f64,
    pub n_aug: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Real anchors per server mini-batch; their augmentations ride along.
    pub batch_anchors: usize,
    /// Prototype augmentation switch.
    pub pa: bool,
    /// Hinge on the triplet term; off gives the unbounded form.
    pub acl_clamp: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            alpha: 1.0,
            tau_g: 0.5,
            lambda_u: 0.3,
            n_aug: 5,
            epochs: 20,
            lr: 0.01,
            batch_anchors: 32,
            pa: true,
            acl_clamp: true,
        }
    }
}

/// Calibrated per-class embedding exemplars.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub exemplars: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerEpochLoss {
    pub sup: f64,
    pub wcl: f64,
    pub acl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerRoundOutput {
    pub model: ModelParams,
    pub global_prototypes: GlobalPrototypeSet,
    pub knowledge_base: KnowledgeBase,
    pub loss_trace: Vec<ServerEpochLoss>,
    /// Mean same-class cross-client cosine of head outputs before and after.
    pub alignment_before: Option<f64>,
    pub alignment_after: Option<f64>,
    pub augment: AugmentDiagnostics,
    pub skipped_wcl: usize,
}

/// Flat per-class mean over every prototype (all clients, clusters, repeats).
pub fn global_prototypes(pool: &[Prototype]) -> Result<GlobalPrototypeSet> {
    if pool.is_empty() {
        return Err(Error::contract("global_prototypes needs a non-empty pool"));
    }
    let mut grouped: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for p in pool {
        grouped.entry(p.class).or_default().push(&p.vector);
    }
    Ok(GlobalPrototypeSet {
        by_class: grouped
            .into_iter()
            .map(|(c, vs)| (c, mean_vector(vs).expect("non-empty group")))
            .collect(),
    })
}

fn pool_matrix(pool: &[Prototype]) -> Result<Tensor> {
    Tensor::from_rows(&pool.iter().map(|p| p.vector.as_slice()).collect::<Vec<_>>())
}

/// Mean cosine between head outputs of same-class prototypes from different clients.
pub fn cross_client_alignment(model: &ModelParams, pool: &[Prototype]) -> Result<Option<f64>> {
    if pool.is_empty() {
        return Ok(None);
    }
    let h = model.project(&pool_matrix(pool)?)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for a in 0..pool.len() {
        for b in a + 1..pool.len() {
            if pool[a].class == pool[b].class && pool[a].client != pool[b].client {
                sum += cosine(h.row(a), h.row(b));
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// Exemplars: per-class mean of calibrated head outputs.
pub fn knowledge_base(model: &ModelParams, pool: &[Prototype]) -> Result<KnowledgeBase> {
    if pool.is_empty() {
        return Ok(KnowledgeBase::default());
    }
    let h = model.project(&pool_matrix(pool)?)?;
    let mut grouped: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (i, p) in pool.iter().enumerate() {
        grouped.entry(p.class).or_default().push(h.row(i));
    }
    Ok(KnowledgeBase {
        exemplars: grouped
            .into_iter()
            .map(|(c, vs)| (c, mean_vector(vs).expect("non-empty group")))
            .collect(),
    })
}

/// Scalar losses of one server mini-batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct ServerBatchLoss {
    pub sup: f64,
    pub wcl: f64,
    pub acl: f64,
    pub skipped_wcl: usize,
}

/// `mean L_sup + eta * (mean L_WCL + mean L_ACL)` over the entries `members`
/// of `batch`, with `anchors` (real entries) driving the contrastive terms.
pub fn server_objective(
    g: &mut Graph,
    bound: &crate::model::BoundParams,
    batch: &CalibrationBatch,
    members: &[usize],
    anchors: &[usize],
    cfg: &ServerConfig,
) -> Result<(Var, ServerBatchLoss)> {
    let set: Vec<&CalibrationEntry> = members.iter().map(|&i| &batch.entries[i]).collect();
    let rows: Vec<&[f64]> = set.iter().map(|e| e.vector.as_slice()).collect();
    let u = g.constant(Tensor::from_rows(&rows)?);
    let mut out = ServerBatchLoss::default();

    let sup_rows: Vec<usize> = (0..set.len())
        .filter(|&i| set[i].kind != EntryKind::AugNegative)
        .collect();
    let sup_labels: Vec<usize> = sup_rows.iter().map(|&i| set[i].class).collect();
    let u_sup = g.select_rows(u, &sup_rows)?;
    let logits = bound.classify(g, u_sup)?;
    let sup = cross_entropy(g, logits, &sup_labels)?;
    out.sup = g.value(sup).item();
    if cfg.eta == 0.0 {
        return Ok((sup, out));
    }

    let h = bound.project(g, u)?;
    let position: BTreeMap<usize, usize> = members.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let anchor_pos: Vec<usize> = anchors.iter().map(|a| position[a]).collect();
    let mut contrast = Vec::new();

    let z = g.normalize_rows(h);
    let wcl = loss_wcl(g, z, &set, &anchor_pos, cfg.tau_g)?;
    out.skipped_wcl = wcl.skipped;
    if let Some(w) = wcl.loss {
        out.wcl = g.value(w).item();
        contrast.push(w);
    }

    let (mut ta, mut tp, mut tn) = (Vec::new(), Vec::new(), Vec::new());
    for &a in anchors {
        let (ps, ns) = &batch.augments[a];
        for (p, n) in ps.iter().zip(ns) {
            ta.push(position[&a]);
            tp.push(position[p]);
            tn.push(position[n]);
        }
    }
    if !ta.is_empty() {
        let ha = g.select_rows(h, &ta)?;
        let hp = g.select_rows(h, &tp)?;
        let hn = g.select_rows(h, &tn)?;
        let acl = loss_acl(g, ha, hp, hn, cfg.alpha, cfg.acl_clamp)?;
        out.acl = g.value(acl).item();
        contrast.push(acl);
    }

    let mut total = sup;
    for c in contrast {
        let weighted = g.scale(c, cfg.eta);
        total = g.add(total, weighted)?;
    }
    Ok((total, out))
}

const SERVER_PARTS: [Part; 2] = [Part::Head, Part::Classifier];

/// Retrains head and classifier of the aggregated model on the prototype
/// pool; the encoder is left untouched.
pub fn calibrate(
    aggregated: &ModelParams,
    pool: &[Prototype],
    cfg: &ServerConfig,
    seed: u64,
) -> Result<ServerRoundOutput> {
    if pool.is_empty() {
        return Err(Error::config("calibration needs at least one prototype"));
    }
    if cfg.batch_anchors == 0 {
        return Err(Error::config("server batch size must be >= 1"));
    }
    let batch = if cfg.pa {
        augment(pool, cfg.lambda_u, cfg.n_aug, seed)?
    } else {
        CalibrationBatch::real_only(pool)
    };
    let alignment_before = cross_client_alignment(aggregated, pool)?;

    let mut model = aggregated.clone();
    let mut rng = seed::rng(&[seed, 4]);
    let mut order: Vec<usize> = (0..batch.real_count).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut skipped_wcl = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sums, mut batches) = (ServerEpochLoss::default(), 0usize);
        for chunk in order.chunks(cfg.batch_anchors) {
            let mut anchors = chunk.to_vec();
            anchors.sort_unstable();
            let mut members = anchors.clone();
            for &a in &anchors {
                members.extend(&batch.augments[a].0);
                members.extend(&batch.augments[a].1);
            }
            let mut g = Graph::new();
            let bound = model.bind(&mut g, &SERVER_PARTS);
            let (loss, parts) = server_objective(&mut g, &bound, &batch, &members, &anchors, cfg)?;
            g.backward(loss)?;
            let grads = bound.gradients(&g, &SERVER_PARTS);
            model = model.sgd_step_parts(&grads, cfg.lr, 0.0, &SERVER_PARTS)?;
            sums.sup += parts.sup;
            sums.wcl += parts.wcl;
            sums.acl += parts.acl;
            skipped_wcl += parts.skipped_wcl;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        trace.push(ServerEpochLoss {
            sup: sums.sup / b,
            wcl: sums.wcl / b,
            acl: sums.acl / b,
        });
    }

    Ok(ServerRoundOutput {
        alignment_after: cross_client_alignment(&model, pool)?,
        knowledge_base: knowledge_base(&model, pool)?,
        global_prototypes: global_prototypes(pool)?,
        model,
        loss_trace: trace,
        alignment_before,
        augment: batch.diagnostics,
        skipped_wcl,
    })
}

/// Normalization applied to both prediction branches before fusing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionNorm {
    #[default]
    Softmax,
    MinMax,
}

impl FusionNorm {
    /// Maps scores to a probability vector; `-inf` entries get zero mass.
    pub fn apply(self, scores: &[f64]) -> Vec<f64> {
        match self {
            FusionNorm::Softmax => {
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let total: f64 = e.iter().sum();
                e.into_iter().map(|v| v / total).collect()
            }
            FusionNorm::MinMax => {
                let finite = scores.iter().copied().filter(|s| s.is_finite());
                let lo = finite.clone().fold(f64::INFINITY, f64::min);
                let hi = finite.fold(f64::NEG_INFINITY, f64::max);
                let scaled: Vec<f64> = scores
                    .iter()
                    .map(|&s| {
                        if !s.is_finite() {
                            0.0
                        } else if hi > lo {
                            (s - lo) / (hi - lo)
                        } else {
                            1.0
                        }
                    })
                    .collect();
                let total: f64 = scaled.iter().sum();
                if total > 0.0 {
                    scaled.into_iter().map(|v| v / total).collect()
                } else {
                    let finite_count = scores.iter().filter(|s| s.is_finite()).count().max(1);
                    scores
                        .iter()
                        .map(|s| if s.is_finite() { 1.0 / finite_count as f64 } else { 0.0 })
                        .collect()
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// Normalized network branch per sample.
    pub net: Vec<Vec<f64>>,
    /// Normalized knowledge branch per sample; absent with an empty base.
    pub kb: Option<Vec<Vec<f64>>>,
    pub fused: Vec<Vec<f64>>,
}

/// `(1 - lambda_p) * Norm(net) + lambda_p * Norm(kb)` for every row of `x`.
pub fn predict_fused(
    model: &ModelParams,
    kb: &KnowledgeBase,
    x: &Tensor,
    lambda_p: f64,
    norm: FusionNorm,
) -> Result<Predictions> {
    if !(0.0..=1.0).contains(&lambda_p) {
        return Err(Error::contract(format!("lambda_p = {lambda_p} outside [0, 1]")));
    }
    let classes = model.config.classes;
    let features = model.forward(x, Stage::Encoder)?;
    let logits = model.classify(&features)?;
    let net: Vec<Vec<f64>> = logits.iter_rows().map(|r| norm.apply(r)).collect();
    let kb_probs = if kb.exemplars.is_empty() {
        None
    } else {
        let emb = model.project(&features)?;
        Some(
            emb.iter_rows()
                .map(|f| {
                    let sims: Vec<f64> = (0..classes)
                        .map(|c| kb.exemplars.get(&c).map_or(f64::NEG_INFINITY, |e| cosine(f, e)))
                        .collect();
                    norm.apply(&sims)
                })
                .collect::<Vec<_>>(),
        )
    };
    let fused = match &kb_probs {
        Some(k) if lambda_p > 0.0 => net
            .iter()
            .zip(k)
            .map(|(n, k)| {
                if lambda_p == 1.0 {
                    k.clone()
                } else {
                    n.iter().zip(k).map(|(a, b)| (1.0 - lambda_p) * a + lambda_p * b).collect()
                }
            })
            .collect(),
        _ => net.clone(),
    };
    Ok(Predictions {
        net,
        kb: kb_probs,
        fused,
    })
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax matches the label.
pub fn top1(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = scores.iter().zip(labels).filter(|(s, &y)| argmax(s) == y).count();
    hits as f64 / labels.len() as f64
}

/// Top-1 accuracy of the fused prediction.
pub fn accuracy(
    model: &ModelParams,
    kb: &KnowledgeBase,
    data: &LabeledDataset,
    lambda_p: f64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("accuracy needs at least one sample"));
    }
    let p = predict_fused(model, kb, &data.features, lambda_p, FusionNorm::Softmax)?;
    Ok(top1(&p.fused, &data.labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassifierInput, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn proto(v: &[f64], class: usize, client: usize) -> Prototype {
        Prototype {
            vector: v.to_vec(),
            class,
            client,
            cluster: 0,
            repeat: 0,
        }
    }

    fn model(feature: usize, classes: usize, seed: u64) -> ModelParams {
        ModelParams::init(
            &ModelConfig {
                input_dim: 3,
                encoder_hidden: vec![6],
                feature_dim: feature,
                head_hidden: vec![6],
                embed_dim: 4,
                classes,
                classifier_input: ClassifierInput::Encoder,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn augment_formulas() {
        let pool = vec![proto(&[0.0, 0.0], 0, 0), proto(&[1.0, 1.0], 0, 1)];
        let b = augment(&pool, 0.5, 1, 0).unwrap();
        let pos = &b.entries[b.augments[0].0[0]];
        assert_eq!(pos.vector, vec![1.5, 1.5]);
        assert_eq!(pos.kind, EntryKind::AugPositive);
        assert_eq!(pos.anchor, Some(0));
        assert_eq!(b.diagnostics.anchors_without_negative, 2);

        let pool = vec![proto(&[0.0, 0.0], 0, 0), proto(&[2.0, 0.0], 1, 0)];
        let b = augment(&pool, 0.5, 2, 0).unwrap();
        let neg = &b.entries[b.augments[0].1[0]];
        assert_eq!(neg.vector, vec![1.0, 0.0]);
        assert_eq!(neg.kind, EntryKind::AugNegative);
        assert_eq!(b.augments[0].1.len(), 2);
        assert!(b.augments[0].0.is_empty());
        assert_eq!(b.diagnostics.anchors_without_partner, 2);
    }

    #[test]
    fn augment_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pool: Vec<Prototype> = (0..12)
            .map(|i| {
                let v: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                proto(&v, i % 3, i % 4)
            })
            .collect();
        let lambda = 0.3;
        let b = augment(&pool, lambda, 4, 1).unwrap();
        for e in &b.entries[b.real_count..] {
            let a = &pool[e.anchor.unwrap()].vector;
            // Recover the partner from the formula and check it is in the pool.
            let partner: Vec<f64> = match e.kind {
                EntryKind::AugPositive => e.vector.iter().zip(a).map(|(v, u)| (v + lambda * u) / (1.0 + lambda)).collect(),
                EntryKind::AugNegative => e.vector.iter().zip(a).map(|(v, u)| u + (v - u) / lambda).collect(),
                EntryKind::Real => unreachable!(),
            };
            let found = pool.iter().any(|p| p.vector.iter().zip(&partner).all(|(x, y)| (x - y).abs() < 1e-9));
            assert!(found);
            // Collinearity with parameter in range.
            let d_partner: Vec<f64> = partner.iter().zip(a).map(|(p, u)| p - u).collect();
            let d_entry: Vec<f64> = e.vector.iter().zip(a).map(|(v, u)| v - u).collect();
            let t = crate::tensor::dot(&d_entry, &d_partner) / crate::tensor::dot(&d_partner, &d_partner);
            for (de, dp) in d_entry.iter().zip(&d_partner) {
                assert!((de - t * dp).abs() < 1e-9);
            }
            match e.kind {
                EntryKind::AugNegative => assert!(t > 0.0 && t < 1.0),
                _ => assert!(t > 1.0),
            }
        }
    }

    #[test]
    fn augment_vanishing_lambda() {
        let pool = vec![proto(&[0.25, -1.5], 0, 0), proto(&[1.0, 3.0], 0, 1), proto(&[-2.0, 0.5], 1, 0)];
        let b = augment(&pool, 1e-300, 3, 2).unwrap();
        for e in &b.entries[b.real_count..] {
            let a = &pool[e.anchor.unwrap()];
            match e.kind {
                EntryKind::AugNegative => assert_eq!(e.vector, a.vector),
                EntryKind::AugPositive => assert!(pool.iter().any(|p| p.vector == e.vector && p.class == a.class)),
                EntryKind::Real => unreachable!(),
            }
        }
        assert!(augment(&pool, 0.0, 1, 0).is_err());
        assert!(augment(&[], 0.5, 1, 0).is_err());
    }

    fn acl_value(a: &[f64], p: &[f64], n: &[f64], alpha: f64, clamp: bool) -> f64 {
        let mut g = Graph::new();
        let av = g.leaf(Tensor::matrix(1, a.len(), a.to_vec()).unwrap());
        let pv = g.leaf(Tensor::matrix(1, p.len(), p.to_vec()).unwrap());
        let nv = g.leaf(Tensor::matrix(1, n.len(), n.to_vec()).unwrap());
        let l = loss_acl(&mut g, av, pv, nv, alpha, clamp).unwrap();
        g.value(l).item()
    }

    #[test]
    fn acl_examples() {
        let a = [1.0, 1.0];
        let n = [2.0, 0.0]; // squared distance 2
        assert_eq!(acl_value(&a, &a, &n, 1.0, true), 0.0);
        assert_eq!(acl_value(&a, &a, &n, 1.0, false), -1.0);
        assert_eq!(acl_value(&a, &[3.0, -1.0], &[3.0, -1.0], 0.7, true), 0.7);
    }

    fn entry(class: usize, client: usize, kind: EntryKind) -> CalibrationEntry {
        CalibrationEntry {
            vector: vec![],
            class,
            client,
            kind,
            anchor: None,
        }
    }

    fn wcl_value(z: &[Vec<f64>], set: &[CalibrationEntry], anchors: &[usize], tau: f64) -> Option<f64> {
        let mut g = Graph::new();
        let zv = g.leaf(Tensor::from_rows(z).unwrap());
        let refs: Vec<&CalibrationEntry> = set.iter().collect();
        let r = loss_wcl(&mut g, zv, &refs, anchors, tau).unwrap();
        r.loss.map(|l| g.value(l).item())
    }

    #[test]
    fn wcl_symmetric_pair() {
        // anchor 0, positive 1 (same class, other client: sigma 1),
        // negative 2 (other class, same client: sigma 1), equal dot products.
        let z = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let set = vec![
            entry(0, 0, EntryKind::Real),
            entry(0, 1, EntryKind::Real),
            entry(1, 0, EntryKind::Real),
        ];
        let v = wcl_value(&z, &set, &[0], 0.5).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let v2 = wcl_value(&z, &set, &[0], 1.0).unwrap();
        assert!((v - v2).abs() < 1e-12);
    }

    #[test]
    fn wcl_without_positive_is_skipped() {
        let z = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let set = vec![entry(0, 0, EntryKind::Real), entry(1, 0, EntryKind::Real)];
        assert_eq!(wcl_value(&z, &set, &[0, 1], 0.5), None);
    }

    #[test]
    fn sigma_rule() {
        let a = entry(0, 0, EntryKind::Real);
        assert_eq!(a.sigma(&entry(0, 1, EntryKind::Real)), 1.0);
        assert_eq!(a.sigma(&entry(1, 0, EntryKind::Real)), 1.0);
        assert_eq!(a.sigma(&entry(0, 0, EntryKind::AugPositive)), 0.5);
        assert_eq!(a.sigma(&entry(1, 1, EntryKind::Real)), 0.5);
        assert_eq!(a.sigma(&entry(0, 0, EntryKind::AugNegative)), 1.0);
    }

    #[test]
    fn global_prototype_means() {
        let g = global_prototypes(&[proto(&[0.0, 0.0], 0, 0), proto(&[2.0, 2.0], 0, 1), proto(&[5.0, 1.0], 3, 0)]).unwrap();
        assert_eq!(g.get(0).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.get(3).unwrap(), &[5.0, 1.0]);
        assert!(global_prototypes(&[]).is_err());
    }

    #[test]
    fn calibrate_zero_epochs_keeps_head_and_classifier() {
        let m = model(5, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pool: Vec<Prototype> = (0..9)
            .map(|i| proto(&(0..5).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>(), i % 3, i % 2))
            .collect();
        let cfg = ServerConfig { epochs: 0, ..Default::default() };
        let out = calibrate(&m, &pool, &cfg, 0).unwrap();
        assert_eq!(out.model, m);
        assert_eq!(out.knowledge_base.exemplars.len(), 3);
        assert_eq!(out.global_prototypes.len(), 3);
        assert!(calibrate(&m, &[], &cfg, 0).is_err());
    }

    #[test]
    fn calibrate_eta_zero_has_no_contrast_trace() {
        let m = model(5, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool: Vec<Prototype> = (0..12)
            .map(|i| proto(&(0..5).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>(), i % 3, i % 2))
            .collect();
        let cfg = ServerConfig { eta: 0.0, epochs: 3, batch_anchors: 4, ..Default::default() };
        let out = calibrate(&m, &pool, &cfg, 0).unwrap();
        assert_eq!(out.loss_trace.len(), 3);
        assert!(out.loss_trace.iter().all(|t| t.wcl == 0.0 && t.acl == 0.0 && t.sup > 0.0));
        // Encoder bit-identical, classifier moved.
        for (a, b) in out.model.parts(Part::Encoder).zip(m.parts(Part::Encoder)) {
            assert_eq!(a, b);
        }
        assert_ne!(out.model.layer("classifier.0"), m.layer("classifier.0"));
    }

    #[test]
    fn fusion_norms_are_distributions() {
        for norm in [FusionNorm::Softmax, FusionNorm::MinMax] {
            let p = norm.apply(&[0.2, f64::NEG_INFINITY, -0.4, 0.9]);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(p[1], 0.0);
            let flat = norm.apply(&[0.5, 0.5]);
            assert_eq!(flat, vec![0.5, 0.5]);
        }
    }

    #[test]
    fn lambda_p_range_checked() {
        let m = model(5, 3, 1);
        let x = Tensor::zeros(&[1, 3]);
        assert!(predict_fused(&m, &KnowledgeBase::default(), &x, 1.5, FusionNorm::Softmax).is_err());
        assert!(predict_fused(&m, &KnowledgeBase::default(), &x, -0.1, FusionNorm::Softmax).is_err());
    }

    #[test]
    fn top1_ties_and_counts() {
        assert_eq!(argmax(&[0.3, 0.3, 0.1]), 0);
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.5, 0.5], vec![0.6, 0.4]];
        assert_eq!(top1(&scores, &[0, 1, 1, 0]), 0.75);
        let constant = vec![vec![1.0, 0.0]; 4];
        assert_eq!(top1(&constant, &[0, 1, 0, 1]), 0.5);
    }

    #[test]
    fn wcl_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let kinds = [EntryKind::Real, EntryKind::AugPositive, EntryKind::AugNegative];
        for _ in 0..20 {
            let set: Vec<CalibrationEntry> = (0..6)
                .map(|i| entry(rng.random_range(0..2), rng.random_range(0..2), if i < 2 { EntryKind::Real } else { kinds[rng.random_range(0..3)] }))
                .collect();
            let z: Vec<Vec<f64>> = (0..6)
                .map(|_| {
                    let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let n = crate::tensor::l2_norm(&v);
                    v.into_iter().map(|x| x / n).collect()
                })
                .collect();
            let tau = 0.5;
            let anchors: Vec<usize> = (0..6).filter(|&i| set[i].kind == EntryKind::Real).collect();
            // straight-line evaluation of the weighted contrastive loss
            let mut total = 0.0;
            let mut kept = 0;
            for &i in &anchors {
                let positives: Vec<usize> = (0..6)
                    .filter(|&j| {
                        j != i && set[j].kind != EntryKind::AugNegative && set[i].kind != EntryKind::AugNegative && set[j].class == set[i].class
                    })
                    .collect();
                if positives.is_empty() {
                    continue;
                }
                let sigma = |k: usize| {
                    let same_class = set[k].kind != EntryKind::AugNegative && set[k].class == set[i].class;
                    let same_client = set[k].client == set[i].client;
                    if (same_class && !same_client) || (!same_class && same_client) { 1.0 } else { 0.5 }
                };
                let sim = |k: usize| crate::tensor::dot(&z[i], &z[k]) / tau;
                let den: f64 = (0..6).filter(|&k| k != i).map(|k| sigma(k) * sim(k).exp()).sum();
                let l: f64 = positives.iter().map(|&j| -((sigma(j) * sim(j).exp()) / den).ln()).sum::<f64>()
                    / positives.len() as f64;
                total += l;
                kept += 1;
            }
            let got = wcl_value(&z, &set, &anchors, tau);
            if kept == 0 {
                assert_eq!(got, None);
            } else {
                assert!((got.unwrap() - total / kept as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn calibration_aligns_offset_clients() {
        // client 1 sees every class shifted by a class-specific offset
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let centers: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(0.0..2.0)).collect()).collect();
        let offsets: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut pool = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for r in 0..4 {
                let jitter: Vec<f64> = (0..5).map(|_| rng.random_range(-0.1..0.1)).collect();
                let a: Vec<f64> = center.iter().zip(&jitter).map(|(m, j)| m + j).collect();
                let b: Vec<f64> = a.iter().zip(&offsets[c]).map(|(x, o)| (x + o).max(0.0)).collect();
                pool.push(Prototype { vector: a, class: c, client: 0, cluster: 0, repeat: r });
                pool.push(Prototype { vector: b, class: c, client: 1, cluster: 0, repeat: r });
            }
        }
        let m = model(5, 3, 4);
        let cfg = ServerConfig { eta: 1.0, epochs: 30, lr: 0.05, ..Default::default() };
        let out = calibrate(&m, &pool, &cfg, 2).unwrap();
        let before = out.alignment_before.unwrap();
        let after = out.alignment_after.unwrap();
        assert!(after > before, "{before} -> {after}");
        for (a, b) in out.model.parts(Part::Encoder).zip(m.parts(Part::Encoder)) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn exemplars_are_grouped_means_of_calibrated_prototypes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pool: Vec<Prototype> = (0..10)
            .map(|i| proto(&(0..5).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<_>>(), i % 3, i % 2))
            .collect();
        let m = model(5, 3, 6);
        let out = calibrate(&m, &pool, &ServerConfig { epochs: 2, ..Default::default() }, 1).unwrap();
        for c in 0..3 {
            let members: Vec<&Prototype> = pool.iter().filter(|p| p.class == c).collect();
            let mut mean = [0.0; 4];
            for p in &members {
                let h = out.model.project(&Tensor::matrix(1, 5, p.vector.clone()).unwrap()).unwrap();
                for (a, v) in mean.iter_mut().zip(h.data()) {
                    *a += v / members.len() as f64;
                }
            }
            for (a, b) in mean.iter().zip(&out.knowledge_base.exemplars[&c]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn global_prototypes_match_grouped_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let pool: Vec<Prototype> = (0..rng.random_range(1..15))
                .map(|_| proto(&(0..3).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>(), rng.random_range(0..4), rng.random_range(0..3)))
                .collect();
            let g = global_prototypes(&pool).unwrap();
            for (c, v) in &g.by_class {
                let members: Vec<&Prototype> = pool.iter().filter(|p| p.class == *c).collect();
                for d in 0..3 {
                    let oracle = members.iter().map(|p| p.vector[d]).sum::<f64>() / members.len() as f64;
                    assert!((v[d] - oracle).abs() < 1e-12);
                }
            }
            let classes: std::collections::BTreeSet<usize> = pool.iter().map(|p| p.class).collect();
            assert_eq!(g.len(), classes.len());
        }
    }

    #[test]
    fn zero_lambda_ignores_knowledge_base() {
        let m = model(5, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::matrix(6, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let kb_a = KnowledgeBase { exemplars: (0..3).map(|c| (c, vec![c as f64, 1.0, 0.0, 2.0])).collect() };
        let kb_b = KnowledgeBase { exemplars: [(1, vec![-1.0, 0.5, 0.3, 0.0])].into_iter().collect() };
        let a = predict_fused(&m, &kb_a, &x, 0.0, FusionNorm::Softmax).unwrap();
        let b = predict_fused(&m, &kb_b, &x, 0.0, FusionNorm::Softmax).unwrap();
        assert_eq!(a.fused, b.fused);
        let mixed = predict_fused(&m, &kb_a, &x, 0.4, FusionNorm::Softmax).unwrap();
        for ((f, n), k) in mixed.fused.iter().zip(&mixed.net).zip(mixed.kb.as_ref().unwrap()) {
            for c in 0..3 {
                assert!((f[c] - (0.6 * n[c] + 0.4 * k[c])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn top1_ten_sample_hand_count() {
        let scores: Vec<Vec<f64>> = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0]
            .iter()
            .map(|&p| (0..3).map(|c| if c == p { 1.0 } else { 0.0 }).collect())
            .collect();
        let labels = [0, 1, 2, 1, 1, 0, 0, 2, 2, 1];
        // hits at 0, 1, 2, 4, 6, 8
        assert_eq!(top1(&scores, &labels), 0.6);
        assert_eq!(top1(&scores, &[0, 1, 2, 0, 1, 2, 0, 1, 2, 0]), 1.0);
    }
}
