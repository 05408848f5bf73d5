//! Local objectives, stochastic gradients, clipping and data ingestion.
//!
//! Node `i` minimises `f_i(x) = (1/m) sum_{s in D_i} loss(x; s)` and the
//! network objective is `f(x) = sum_i f_i(x)`. Three losses are provided:
//!
//! * `Quadratic`: `0.5 ||x - z||^2`, where the sample features are the target;
//! * `Logistic`: multi-class softmax regression with a bias per class;
//! * `Mlp`: one tanh hidden layer followed by a softmax output.
//!
//! Gradients are written by hand and checked against central differences in
//! the tests.

use std::io::Read;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{Purpose, StreamKey};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("row {row}: expected {expected} features, found {found}")]
    DimensionMismatch { row: usize, expected: usize, found: usize },
    #[error("parameter vector has length {found}, objective expects {expected}")]
    ParamLength { expected: usize, found: usize },
    #[error("node {0} holds no samples")]
    EmptyPartition(usize),
    #[error("{samples} samples cannot be split evenly over {nodes} nodes")]
    UnbalancedPartition { samples: usize, nodes: usize },
    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("clip bound must be positive, got {0}")]
    InvalidClip(f64),
    #[error("batch rate must lie in (0, 1], got {0}")]
    InvalidBatchRate(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    #[default]
    Contiguous,
    Random,
}

/// Labelled samples plus a balanced assignment of sample indices to nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    q: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    partition: Vec<Vec<usize>>,
}

impl Dataset {
    /// All samples on a single node.
    pub fn new(q: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self, ObjectiveError> {
        if features.len() != q * labels.len() {
            return Err(ObjectiveError::DimensionMismatch {
                row: 0,
                expected: q * labels.len(),
                found: features.len(),
            });
        }
        let partition = vec![(0..labels.len()).collect()];
        Ok(Self {
            q,
            features,
            labels,
            partition,
        })
    }

    /// Splits the samples evenly over `nodes`.
    pub fn partitioned(mut self, nodes: usize, scheme: PartitionScheme, seed: u64) -> Result<Self, ObjectiveError> {
        let n = self.labels.len();
        if nodes == 0 || n == 0 || !n.is_multiple_of(nodes) {
            return Err(ObjectiveError::UnbalancedPartition { samples: n, nodes });
        }
        let mut order: Vec<usize> = (0..n).collect();
        if scheme == PartitionScheme::Random {
            let mut rng = StreamKey::new(seed, 0, 0, Purpose::Partition).rng();
            // Fisher-Yates
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
        }
        let m = n / nodes;
        self.partition = order.chunks(m).map(|c| c.to_vec()).collect();
        Ok(self)
    }

    pub fn feature_dim(&self) -> usize {
        self.q
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.partition.len()
    }

    /// Samples per node.
    pub fn local_size(&self) -> usize {
        self.partition.first().map_or(0, Vec::len)
    }

    pub fn node_samples(&self, node: usize) -> &[usize] {
        &self.partition[node]
    }

    pub fn features(&self, sample: usize) -> &[f64] {
        &self.features[sample * self.q..(sample + 1) * self.q]
    }

    pub fn label(&self, sample: usize) -> usize {
        self.labels[sample]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn max_label(&self) -> Option<usize> {
        self.labels.iter().copied().max()
    }
}

/// Parses rows `label, f1, ..., fq`. Row numbers in errors are 1-based.
pub fn parse_csv(reader: impl Read) -> Result<Dataset, ObjectiveError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut q = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let row = idx + 1;
        let record = record?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let mut fields = record.iter();
        let label_txt = fields.next().unwrap_or_default();
        let label: f64 = label_txt.parse().map_err(|_| ObjectiveError::Parse {
            row,
            msg: format!("bad label {label_txt:?}"),
        })?;
        if !(label >= 0.0 && label.fract() == 0.0 && label.is_finite()) {
            return Err(ObjectiveError::Parse {
                row,
                msg: format!("label {label} is not a non-negative integer"),
            });
        }
        let start = features.len();
        for f in fields {
            let v: f64 = f.parse().map_err(|_| ObjectiveError::Parse {
                row,
                msg: format!("bad feature {f:?}"),
            })?;
            if !v.is_finite() {
                return Err(ObjectiveError::Parse {
                    row,
                    msg: format!("non-finite feature {f:?}"),
                });
            }
            features.push(v);
        }
        let found = features.len() - start;
        match q {
            None => q = Some(found),
            Some(expected) if expected != found => {
                return Err(ObjectiveError::DimensionMismatch { row, expected, found });
            }
            _ => {}
        }
        labels.push(label as usize);
    }
    Dataset::new(q.unwrap_or(0), features, labels)
}

pub fn load_csv(path: &Path) -> Result<Dataset, ObjectiveError> {
    parse_csv(std::fs::File::open(path)?)
}

/// Gaussian class clusters: centres `~ N(0, I_q)`, samples `centre + N(0, I_q)`,
/// labels uniform over the classes. All samples on one node.
pub fn synth_classification(n_classes: usize, q: usize, n_samples: usize, seed: u64) -> Dataset {
    let mut rng = StreamKey::new(seed, 0, 0, Purpose::Data).rng();
    let centres: Vec<f64> = (0..n_classes * q).map(|_| rng.sample(StandardNormal)).collect();
    let mut features = Vec::with_capacity(n_samples * q);
    let mut labels = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let label = rng.random_range(0..n_classes);
        for c in 0..q {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(centres[label * q + c] + noise);
        }
        labels.push(label);
    }
    Dataset::new(q, features, labels).expect("consistent shapes")
}

/// One target `c_i ~ N(0, I_q)` per node.
pub fn synth_quadratic(n_nodes: usize, q: usize, seed: u64) -> Dataset {
    let mut rng = StreamKey::new(seed, 0, 0, Purpose::Data).rng();
    let features: Vec<f64> = (0..n_nodes * q).map(|_| rng.sample(StandardNormal)).collect();
    Dataset::new(q, features, vec![0; n_nodes])
        .and_then(|d| d.partitioned(n_nodes, PartitionScheme::Contiguous, 0))
        .expect("one sample per node")
}

/// Minimiser of the quadratic network objective: the mean of the per-node
/// target means.
pub fn quadratic_minimizer(dataset: &Dataset) -> Vec<f64> {
    let q = dataset.feature_dim();
    let mut out = vec![0.0; q];
    let nodes = dataset.node_count() as f64;
    for node in 0..dataset.node_count() {
        let samples = dataset.node_samples(node);
        let w = 1.0 / (samples.len() as f64 * nodes);
        for &s in samples {
            for (o, v) in out.iter_mut().zip(dataset.features(s)) {
                *o += w * v;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    Quadratic,
    Logistic { classes: usize },
    Mlp { hidden: usize, classes: usize },
}

impl Objective {
    /// Parameter dimension for `q` input features.
    pub fn dim(&self, q: usize) -> usize {
        match *self {
            Objective::Quadratic => q,
            Objective::Logistic { classes } => classes * (q + 1),
            Objective::Mlp { hidden, classes } => hidden * (q + 1) + classes * (hidden + 1),
        }
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<(), ObjectiveError> {
        let classes = match *self {
            Objective::Quadratic => return Ok(()),
            Objective::Logistic { classes } | Objective::Mlp { classes, .. } => classes,
        };
        match dataset.max_label() {
            Some(label) if label >= classes => Err(ObjectiveError::LabelOutOfRange { label, classes }),
            _ => Ok(()),
        }
    }

    /// Adds `grad loss(x; sample)` into `grad` and returns the loss.
    pub fn sample_loss_grad(&self, x: &[f64], features: &[f64], label: usize, grad: &mut [f64]) -> f64 {
        match *self {
            Objective::Quadratic => {
                let mut loss = 0.0;
                for ((g, xi), zi) in grad.iter_mut().zip(x).zip(features) {
                    let r = xi - zi;
                    loss += 0.5 * r * r;
                    *g += r;
                }
                loss
            }
            Objective::Logistic { classes } => logistic_loss_grad(x, features, label, classes, grad),
            Objective::Mlp { hidden, classes } => mlp_loss_grad(x, features, label, hidden, classes, grad),
        }
    }

    /// Mean loss and gradient over `samples`.
    pub fn loss_grad_on(&self, x: &[f64], dataset: &Dataset, samples: &[usize]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; x.len()];
        let mut loss = 0.0;
        for &s in samples {
            loss += self.sample_loss_grad(x, dataset.features(s), dataset.label(s), &mut grad);
        }
        let scale = 1.0 / samples.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        (loss * scale, grad)
    }

    /// `f_i` and its gradient on node `node`'s full local data.
    pub fn node_loss_grad(&self, x: &[f64], dataset: &Dataset, node: usize) -> (f64, Vec<f64>) {
        self.loss_grad_on(x, dataset, dataset.node_samples(node))
    }

    /// Smoothness constant of the per-sample loss, where a closed-form bound
    /// exists.
    pub fn smoothness_estimate(&self, dataset: &Dataset) -> Option<f64> {
        match self {
            Objective::Quadratic => Some(1.0),
            Objective::Logistic { .. } => {
                // softmax cross-entropy Hessian is bounded by 0.5 ||(phi, 1)||^2
                let max_sq = (0..dataset.len())
                    .map(|s| 1.0 + dataset.features(s).iter().map(|v| v * v).sum::<f64>())
                    .fold(0.0, f64::max);
                Some(0.5 * max_sq)
            }
            Objective::Mlp { .. } => None,
        }
    }
}

fn softmax_in_place(logits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    logits.iter_mut().for_each(|l| *l /= sum);
    max + sum.ln()
}

fn logistic_loss_grad(x: &[f64], phi: &[f64], label: usize, classes: usize, grad: &mut [f64]) -> f64 {
    let q = phi.len();
    let (weights, bias) = x.split_at(classes * q);
    let mut probs: Vec<f64> = (0..classes)
        .map(|k| bias[k] + weights[k * q..(k + 1) * q].iter().zip(phi).map(|(w, v)| w * v).sum::<f64>())
        .collect();
    let label_logit = probs[label];
    let log_norm = softmax_in_place(&mut probs);
    let (gw, gb) = grad.split_at_mut(classes * q);
    for k in 0..classes {
        let delta = probs[k] - if k == label { 1.0 } else { 0.0 };
        gb[k] += delta;
        for (g, v) in gw[k * q..(k + 1) * q].iter_mut().zip(phi) {
            *g += delta * v;
        }
    }
    log_norm - label_logit
}

fn mlp_loss_grad(x: &[f64], phi: &[f64], label: usize, hidden: usize, classes: usize, grad: &mut [f64]) -> f64 {
    let q = phi.len();
    let (w1, rest) = x.split_at(hidden * q);
    let (b1, rest) = rest.split_at(hidden);
    let (w2, b2) = rest.split_at(classes * hidden);

    let h: Vec<f64> = (0..hidden)
        .map(|j| (b1[j] + w1[j * q..(j + 1) * q].iter().zip(phi).map(|(w, v)| w * v).sum::<f64>()).tanh())
        .collect();
    let mut probs: Vec<f64> = (0..classes)
        .map(|k| b2[k] + w2[k * hidden..(k + 1) * hidden].iter().zip(&h).map(|(w, v)| w * v).sum::<f64>())
        .collect();
    let label_logit = probs[label];
    let log_norm = softmax_in_place(&mut probs);

    let (gw1, grest) = grad.split_at_mut(hidden * q);
    let (gb1, grest) = grest.split_at_mut(hidden);
    let (gw2, gb2) = grest.split_at_mut(classes * hidden);
    let mut back_h = vec![0.0; hidden];
    for k in 0..classes {
        let delta = probs[k] - if k == label { 1.0 } else { 0.0 };
        gb2[k] += delta;
        for j in 0..hidden {
            gw2[k * hidden + j] += delta * h[j];
            back_h[j] += delta * w2[k * hidden + j];
        }
    }
    for j in 0..hidden {
        let pre = back_h[j] * (1.0 - h[j] * h[j]);
        gb1[j] += pre;
        for (g, v) in gw1[j * q..(j + 1) * q].iter_mut().zip(phi) {
            *g += pre * v;
        }
    }
    log_norm - label_logit
}

/// `max(1, round(tau m))` local samples, uniformly without replacement,
/// returned as sorted global sample indices.
pub fn draw_batch(dataset: &Dataset, node: usize, tau: f64, key: StreamKey) -> Result<Vec<usize>, ObjectiveError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(ObjectiveError::InvalidBatchRate(tau));
    }
    let local = dataset.node_samples(node);
    if local.is_empty() {
        return Err(ObjectiveError::EmptyPartition(node));
    }
    let m = local.len();
    let size = ((tau * m as f64).round() as usize).clamp(1, m);
    if size == m {
        return Ok(local.to_vec());
    }
    let mut rng = key.rng();
    let mut batch: Vec<usize> = sample(&mut rng, m, size).into_iter().map(|k| local[k]).collect();
    batch.sort_unstable();
    Ok(batch)
}

/// Mini-batch gradient of `f_i` at `x`; returns the batch alongside.
pub fn stochastic_gradient(
    objective: &Objective,
    x: &[f64],
    dataset: &Dataset,
    node: usize,
    tau: f64,
    key: StreamKey,
) -> Result<(Vec<usize>, Vec<f64>), ObjectiveError> {
    let expected = objective.dim(dataset.feature_dim());
    if x.len() != expected {
        return Err(ObjectiveError::ParamLength {
            expected,
            found: x.len(),
        });
    }
    let batch = draw_batch(dataset, node, tau, key)?;
    let (_, grad) = objective.loss_grad_on(x, dataset, &batch);
    Ok((batch, grad))
}

/// Full-data `f(x) = sum_i f_i(x)` and its gradient.
pub fn global_loss_and_grad(objective: &Objective, x: &[f64], dataset: &Dataset) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; x.len()];
    for node in 0..dataset.node_count() {
        let (l, g) = objective.node_loss_grad(x, dataset, node);
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    (loss, grad)
}

/// Per-coordinate magnitude bound `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ClipConfig {
    bound: f64,
}

impl ClipConfig {
    pub fn new(bound: f64) -> Result<Self, ObjectiveError> {
        if bound > 0.0 {
            Ok(Self { bound })
        } else {
            Err(ObjectiveError::InvalidClip(bound))
        }
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Implied l2 bound `sqrt(d) C` on a clipped gradient.
    pub fn l2_bound(&self, dim: usize) -> f64 {
        (dim as f64).sqrt() * self.bound
    }
}

impl TryFrom<f64> for ClipConfig {
    type Error = ObjectiveError;
    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ClipConfig> for f64 {
    fn from(c: ClipConfig) -> f64 {
        c.bound
    }
}

/// Coordinate `i` becomes `sign(g_i) min(|g_i|, C)`.
pub fn clip_gradient(g: &[f64], cfg: ClipConfig) -> Vec<f64> {
    g.iter().map(|v| v.clamp(-cfg.bound, cfg.bound)).collect()
}

/// Smoothness, gradient bound and gradient-noise bound of an objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveProfile {
    pub smoothness_l: f64,
    pub grad_bound_g: f64,
    pub noise_var: f64,
}

/// Largest per-node variance of single-sample gradients at `x`.
pub fn gradient_variance(objective: &Objective, x: &[f64], dataset: &Dataset) -> f64 {
    let mut worst = 0.0_f64;
    for node in 0..dataset.node_count() {
        let samples = dataset.node_samples(node);
        let (_, mean) = objective.loss_grad_on(x, dataset, samples);
        let mut acc = 0.0;
        for &s in samples {
            let (_, g) = objective.loss_grad_on(x, dataset, &[s]);
            acc += g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        worst = worst.max(acc / samples.len() as f64);
    }
    worst
}
