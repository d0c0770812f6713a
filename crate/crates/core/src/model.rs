//! The encoder / projection head / classifier network, its optimizer step,
//! and weighted parameter aggregation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which part of the network a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Encoder,
    Head,
    Classifier,
}

/// What the classifier consumes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierInput {
    /// Classifier and head both hang off the encoder features.
    #[default]
    Encoder,
    /// Classifier sits on top of the projection head.
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub head_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub classes: usize,
    #[serde(default)]
    pub classifier_input: ClassifierInput,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.feature_dim, self.embed_dim, self.classes];
        if dims.iter().chain(&self.encoder_hidden).chain(&self.head_hidden).any(|&d| d == 0) {
            return Err(Error::config("all model dimensions must be >= 1"));
        }
        Ok(())
    }

    fn classifier_in(&self) -> usize {
        match self.classifier_input {
            ClassifierInput::Encoder => self.feature_dim,
            ClassifierInput::Head => self.embed_dim,
        }
    }

    /// (name, part, fan_in, fan_out) for every layer in chain order.
    fn layout(&self) -> Vec<(String, Part, usize, usize)> {
        let mut out = Vec::new();
        let mut chain = |prefix: &str, part: Part, dims: Vec<usize>| {
            for (i, w) in dims.windows(2).enumerate() {
                out.push((format!("{prefix}.{i}"), part, w[0], w[1]));
            }
        };
        let mut enc = vec![self.input_dim];
        enc.extend(&self.encoder_hidden);
        enc.push(self.feature_dim);
        chain("encoder", Part::Encoder, enc);

        let mut head = vec![self.feature_dim];
        head.extend(&self.head_hidden);
        head.push(self.embed_dim);
        chain("head", Part::Head, head);

        chain(
            "classifier",
            Part::Classifier,
            vec![self.classifier_in(), self.classes],
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub part: Part,
    /// `fan_in x fan_out`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
}

/// Per-layer (weight, bias) gradients keyed by layer name.
pub type Gradients = BTreeMap<String, (Tensor, Tensor)>;

/// How far through the network to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Encoder features.
    Encoder,
    /// Projection head output.
    ThroughHead,
    /// Classifier logits.
    Full,
}

/// Parameter leaves of one model registered on a graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    layers: Vec<(String, Part, Var, Var)>,
    classifier_input: ClassifierInput,
}

impl BoundParams {
    fn part(&self, part: Part) -> impl Iterator<Item = &(String, Part, Var, Var)> {
        self.layers.iter().filter(move |l| l.1 == part)
    }

    fn run_part(&self, g: &mut Graph, part: Part, mut x: Var, relu_last: bool) -> Result<Var> {
        let layers: Vec<_> = self.part(part).collect();
        let n = layers.len();
        for (i, (_, _, w, b)) in layers.into_iter().enumerate() {
            let xw = g.matmul(x, *w)?;
            x = g.add_row(xw, *b)?;
            if i + 1 < n || relu_last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    /// Encoder features `E(x)`; every encoder layer is followed by ReLU.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.run_part(g, Part::Encoder, x, true)
    }

    /// Projection head applied to feature-space inputs.
    pub fn project(&self, g: &mut Graph, features: Var) -> Result<Var> {
        self.run_part(g, Part::Head, features, false)
    }

    /// Classifier logits from feature-space inputs, honoring the wiring switch.
    pub fn classify(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let input = match self.classifier_input {
            ClassifierInput::Encoder => features,
            ClassifierInput::Head => self.project(g, features)?,
        };
        self.run_part(g, Part::Classifier, input, false)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, stage: Stage) -> Result<Var> {
        let f = self.encode(g, x)?;
        match stage {
            Stage::Encoder => Ok(f),
            Stage::ThroughHead => self.project(g, f),
            Stage::Full => self.classify(g, f),
        }
    }

    /// Collects gradients for the layers in `parts`.
    pub fn gradients(&self, g: &Graph, parts: &[Part]) -> Gradients {
        self.layers
            .iter()
            .filter(|l| parts.contains(&l.1))
            .map(|(name, _, w, b)| (name.clone(), (g.grad(*w), g.grad(*b))))
            .collect()
    }
}

pub const ALL_PARTS: [Part; 3] = [Part::Encoder, Part::Head, Part::Classifier];

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layout()
            .into_iter()
            .map(|(name, part, fan_in, fan_out)| {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Layer {
                    name,
                    part,
                    weight: Tensor::matrix(fan_in, fan_out, data).expect("layout"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn parts(&self, part: Part) -> impl Iterator<Item = &Layer> {
        self.layers.iter().filter(move |l| l.part == part)
    }

    /// Registers layers as graph leaves; layers outside `trainable` become constants.
    pub fn bind(&self, g: &mut Graph, trainable: &[Part]) -> BoundParams {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = if trainable.contains(&l.part) {
                    (g.leaf(l.weight.clone()), g.leaf(l.bias.clone()))
                } else {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                };
                (l.name.clone(), l.part, w, b)
            })
            .collect();
        BoundParams {
            layers,
            classifier_input: self.config.classifier_input,
        }
    }

    fn check_input(&self, x: &Tensor, cols: usize) -> Result<()> {
        if x.rank() != 2 || x.cols() != cols {
            return Err(Error::Dimension {
                op: "forward",
                left: x.shape().to_vec(),
                right: vec![cols],
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, stage: Stage) -> Result<Tensor> {
        self.check_input(x, self.config.input_dim)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, &[]);
        let xv = g.constant(x.clone());
        let out = bound.forward(&mut g, xv, stage)?;
        Ok(g.value(out).clone())
    }

    /// Runs the projection head on feature-space rows.
    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        self.check_input(features, self.config.feature_dim)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, &[]);
        let f = g.constant(features.clone());
        let out = bound.project(&mut g, f)?;
        Ok(g.value(out).clone())
    }

    /// Runs the classifier on feature-space rows.
    pub fn classify(&self, features: &Tensor) -> Result<Tensor> {
        self.check_input(features, self.config.feature_dim)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, &[]);
        let f = g.constant(features.clone());
        let out = bound.classify(&mut g, f)?;
        Ok(g.value(out).clone())
    }

    /// `w <- w - lr * (g + wd * w)` on every layer.
    pub fn sgd_step(&self, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<Self> {
        self.sgd_step_parts(grads, lr, weight_decay, &ALL_PARTS)
    }

    /// Like [`sgd_step`](Self::sgd_step) but only touches layers in `parts`.
    pub fn sgd_step_parts(
        &self,
        grads: &Gradients,
        lr: f64,
        weight_decay: f64,
        parts: &[Part],
    ) -> Result<Self> {
        let mut next = self.clone();
        for layer in next.layers.iter_mut().filter(|l| parts.contains(&l.part)) {
            let (gw, gb) = grads
                .get(&layer.name)
                .ok_or_else(|| Error::contract(format!("missing gradient for {}", layer.name)))?;
            for (param, grad) in [(&mut layer.weight, gw), (&mut layer.bias, gb)] {
                if param.shape() != grad.shape() {
                    return Err(Error::Dimension {
                        op: "sgd_step",
                        left: param.shape().to_vec(),
                        right: grad.shape().to_vec(),
                    });
                }
                for (w, g) in param.data_mut().iter_mut().zip(grad.data()) {
                    *w -= lr * (g + weight_decay * *w);
                }
            }
        }
        Ok(next)
    }

    fn same_architecture(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.name == b.name
                    && a.part == b.part
                    && a.weight.shape() == b.weight.shape()
                    && a.bias.shape() == b.bias.shape()
            })
    }

    /// Weighted average `sum_k p_k * w_k` with `p_k = weight_k / sum(weights)`.
    pub fn aggregate(models: &[ModelParams], weights: &[f64]) -> Result<Self> {
        let Some(first) = models.first() else {
            return Err(Error::contract("aggregate needs at least one model"));
        };
        if models.len() != weights.len() {
            return Err(Error::contract(format!(
                "{} models but {} weights",
                models.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::contract("aggregation weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::contract("aggregation weights are all zero"));
        }
        if let Some(i) = models.iter().position(|m| !first.same_architecture(m)) {
            return Err(Error::contract(format!(
                "model {i} does not match the architecture of model 0"
            )));
        }

        let mut out = first.clone();
        for (li, layer) in out.layers.iter_mut().enumerate() {
            for (which, target) in [&mut layer.weight, &mut layer.bias].into_iter().enumerate() {
                let acc = target.data_mut();
                acc.iter_mut().for_each(|v| *v = 0.0);
                for (model, &w) in models.iter().zip(weights) {
                    let src = &model.layers[li];
                    let src = if which == 0 { &src.weight } else { &src.bias };
                    for (a, s) in acc.iter_mut().zip(src.data()) {
                        *a += w * s;
                    }
                }
                acc.iter_mut().for_each(|v| *v /= total);
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            model: self.clone(),
        };
        let text = serde_json::to_string_pretty(&file)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Checkpoint = serde_json::from_str(&text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format {:?}", file.format)));
        }
        let model = file.model;
        let expected = ModelParams::init(&model.config, 0)?;
        if !expected.same_architecture(&model) {
            return Err(Error::Format("checkpoint layers do not match its config".into()));
        }
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "fedsim-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    model: ModelParams,
}
