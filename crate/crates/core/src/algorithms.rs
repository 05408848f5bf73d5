//! Decentralized update engines.
//!
//! All variants run in barrier-synchronous rounds. In a round every node
//! computes a message from its own state and read-only copies of its
//! neighbours' states; afterwards every node applies the messages it received.
//! Random draws are keyed per `(seed, node, round, purpose)`, so a round's
//! outcome does not depend on thread scheduling.
//!
//! Per round, node `i` of the differential variants computes
//!
//! ```text
//! y_i = (1 - theta) x_i + theta (sum_j W_ij x_j - gamma (g_i + eta_i))
//! d_i = y_i - x_i
//! ```
//!
//! and broadcasts `S(d_i)`; every holder of a copy of `x_i` then adds `S(d_i)`.
//! `DcDsgd` is the same engine with `theta = 1`. `AltDesign` sparsifies the
//! noise-free differential first and masks only the surviving coordinates.
//! `Dsgd` exchanges full states: `x_i <- sum_j W_ij x_j - gamma (g_i + eta_i)`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::ConsensusMatrix;
use crate::objectives::{clip_gradient, stochastic_gradient, ClipConfig, Dataset, Objective, ObjectiveError};
use crate::rng::{Purpose, StreamKey};
use crate::sparsifier::{sparsify, SparseVector, SparsifierConfig};

#[derive(Debug, Error)]
pub enum AlgorithmError {
    #[error("invalid algorithm configuration: {0}")]
    Config(String),
    #[error("theta = {theta} violates theta < 2p / (1 - lambda_min + gamma L) = {limit}")]
    ScheduleViolation { theta: f64, limit: f64 },
    #[error("{name} out of domain: {value}")]
    Domain { name: &'static str, value: f64 },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dsgd,
    DcDsgd,
    SdmDsgd,
    AltDesign,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Dsgd => "dsgd",
            Variant::DcDsgd => "dc_dsgd",
            Variant::SdmDsgd => "sdm_dsgd",
            Variant::AltDesign => "alt_design",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    /// Use the configured `theta` and `gamma`.
    #[default]
    Fixed,
    /// `gamma = c sqrt(n ln T / T)`, `theta = min(p / (1 - lambda_min + gamma L), p / 2)`.
    Corollary2 {
        #[serde(default = "one")]
        c: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub variant: Variant,
    #[serde(default = "one")]
    pub theta: f64,
    pub gamma: f64,
    #[serde(default = "one")]
    pub transmit_prob: f64,
    #[serde(default)]
    pub sigma2: f64,
    /// Subsampling rate `tau` of the local mini-batches.
    #[serde(default = "one")]
    pub batch_rate: f64,
    #[serde(default)]
    pub clip: Option<ClipConfig>,
    #[serde(default)]
    pub schedule: Schedule,
    /// Smoothness constant `L`; estimated from the objective when absent.
    #[serde(default)]
    pub smoothness_l: Option<f64>,
}

impl AlgorithmConfig {
    pub fn new(variant: Variant, gamma: f64) -> Self {
        Self {
            variant,
            theta: 1.0,
            gamma,
            transmit_prob: 1.0,
            sigma2: 0.0,
            batch_rate: 1.0,
            clip: None,
            schedule: Schedule::Fixed,
            smoothness_l: None,
        }
    }

    pub fn validate(&self) -> Result<(), AlgorithmError> {
        let bad = |msg: String| Err(AlgorithmError::Config(msg));
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return bad(format!("theta must lie in (0, 1], got {}", self.theta));
        }
        if self.schedule == Schedule::Fixed && !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.transmit_prob > 0.0 && self.transmit_prob <= 1.0) {
            return bad(format!("transmit_prob must lie in (0, 1], got {}", self.transmit_prob));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return bad(format!("sigma2 must be non-negative, got {}", self.sigma2));
        }
        if !(self.batch_rate > 0.0 && self.batch_rate <= 1.0) {
            return bad(format!("batch_rate must lie in (0, 1], got {}", self.batch_rate));
        }
        if let Schedule::Corollary2 { c } = self.schedule {
            if !(c > 0.0) {
                return bad(format!("schedule constant c must be positive, got {c}"));
            }
        }
        match self.variant {
            Variant::DcDsgd if self.theta != 1.0 => bad("dc_dsgd fixes theta = 1".into()),
            Variant::Dsgd if self.theta != 1.0 || self.transmit_prob != 1.0 => {
                bad("dsgd exchanges full states: theta = 1 and transmit_prob = 1".into())
            }
            _ => Ok(()),
        }
    }

    /// Applies the schedule for a run of `iterations` rounds on `n` nodes.
    pub fn resolve(&self, lambda_min: f64, smoothness_l: f64, n: usize, iterations: u64) -> Result<Self, AlgorithmError> {
        self.validate()?;
        let mut out = *self;
        if let Schedule::Corollary2 { c } = self.schedule {
            let s = recommended_schedule(self.transmit_prob, lambda_min, smoothness_l, n, iterations, c)?;
            out.gamma = s.gamma;
            if matches!(self.variant, Variant::SdmDsgd | Variant::AltDesign) {
                out.theta = s.theta;
            }
            out.schedule = Schedule::Fixed;
        }
        Ok(out)
    }

    fn sparsifier(&self) -> SparsifierConfig {
        SparsifierConfig::new(self.transmit_prob).expect("validated transmit probability")
    }
}

/// `2p / (1 - lambda_min + gamma L)`.
pub fn theta_limit(p: f64, lambda_min: f64, gamma: f64, smoothness_l: f64) -> f64 {
    2.0 * p / (1.0 - lambda_min + gamma * smoothness_l)
}

/// Returns a warning when `theta` does not satisfy the convergence
/// precondition. Only meaningful for the differential variants.
pub fn precondition_warning(cfg: &AlgorithmConfig, lambda_min: f64, smoothness_l: f64) -> Option<String> {
    if cfg.variant == Variant::Dsgd {
        return None;
    }
    let limit = theta_limit(cfg.transmit_prob, lambda_min, cfg.gamma, smoothness_l);
    (cfg.theta >= limit).then(|| {
        format!(
            "theta = {} violates theta < 2p / (1 - lambda_min + gamma L) = {limit:.6}; convergence is not guaranteed",
            cfg.theta
        )
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub theta: f64,
    pub gamma: f64,
}

pub fn recommended_schedule(
    p: f64,
    lambda_min: f64,
    smoothness_l: f64,
    n: usize,
    iterations: u64,
    c: f64,
) -> Result<ScheduleValues, AlgorithmError> {
    if iterations < 2 {
        return Err(AlgorithmError::Domain {
            name: "T",
            value: iterations as f64,
        });
    }
    let t = iterations as f64;
    let gamma = c * (n as f64 * t.ln() / t).sqrt();
    let theta = (p / (1.0 - lambda_min + gamma * smoothness_l)).min(p / 2.0);
    Ok(ScheduleValues { theta, gamma })
}

/// Per-node state: own copy, intermediate, differential and reconstructed
/// neighbour copies.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub d: Vec<f64>,
    pub neighbor_copies: BTreeMap<usize, Vec<f64>>,
}

/// Zero-initialised states for every node of `w`.
pub fn initial_states(w: &ConsensusMatrix, dim: usize) -> Vec<NodeState> {
    (0..w.node_count())
        .map(|i| NodeState {
            x: vec![0.0; dim],
            y: vec![0.0; dim],
            d: vec![0.0; dim],
            neighbor_copies: w
                .support(i)
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| (j, vec![0.0; dim]))
                .collect(),
        })
        .collect()
}

/// True when every reconstructed copy equals the owner's state bit for bit.
pub fn neighbor_copies_consistent(states: &[NodeState]) -> bool {
    states
        .iter()
        .all(|s| s.neighbor_copies.iter().all(|(&j, copy)| *copy == states[j].x))
}

/// What one node did in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRound {
    /// State at the start of the round.
    pub x: Vec<f64>,
    pub batch: Vec<usize>,
    /// Clipped stochastic gradient.
    pub grad: Vec<f64>,
    /// Gaussian mask drawn this round. For `AltDesign` it is zero outside the
    /// active set.
    pub noise: Vec<f64>,
    pub differential: Vec<f64>,
    /// The released message.
    pub message: SparseVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutput {
    pub iteration: u64,
    pub nodes: Vec<NodeRound>,
}

impl RoundOutput {
    pub fn transmitted(&self) -> impl Iterator<Item = &SparseVector> {
        self.nodes.iter().map(|n| &n.message)
    }
}

/// Objective and data shared by all nodes.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub objective: Objective,
    pub dataset: &'a Dataset,
}

impl Problem<'_> {
    pub fn dim(&self) -> usize {
        self.objective.dim(self.dataset.feature_dim())
    }
}

fn gaussian(key: StreamKey, count: usize, sigma2: f64) -> Vec<f64> {
    if sigma2 == 0.0 {
        return vec![0.0; count];
    }
    let sigma = sigma2.sqrt();
    let mut rng = key.rng();
    (0..count).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `sum_j W_ij x_j` using node `i`'s view of its neighbours.
fn local_mix(w: &ConsensusMatrix, i: usize, state: &NodeState) -> Vec<f64> {
    let mut mix = vec![0.0; state.x.len()];
    for &j in w.support(i) {
        let wij = w.get(i, j);
        let xj = if j == i { &state.x } else { &state.neighbor_copies[&j] };
        for (m, v) in mix.iter_mut().zip(xj) {
            *m += wij * v;
        }
    }
    mix
}

fn local_gradient(
    problem: &Problem<'_>,
    cfg: &AlgorithmConfig,
    x: &[f64],
    node: usize,
    seed: u64,
    t: u64,
) -> Result<(Vec<usize>, Vec<f64>), AlgorithmError> {
    let key = StreamKey::new(seed, node, t, Purpose::Batch);
    let (batch, grad) = stochastic_gradient(&problem.objective, x, problem.dataset, node, cfg.batch_rate, key)?;
    let grad = match cfg.clip {
        Some(clip) => clip_gradient(&grad, clip),
        None => grad,
    };
    Ok((batch, grad))
}

fn differential(theta: f64, gamma: f64, x: &[f64], mix: &[f64], grad: &[f64], noise: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let y: Vec<f64> = (0..x.len())
        .map(|k| (1.0 - theta) * x[k] + theta * (mix[k] - gamma * (grad[k] + noise[k])))
        .collect();
    let d = y.iter().zip(x).map(|(a, b)| a - b).collect();
    (y, d)
}

fn node_round(
    i: usize,
    state: &NodeState,
    w: &ConsensusMatrix,
    cfg: &AlgorithmConfig,
    problem: &Problem<'_>,
    seed: u64,
    t: u64,
) -> Result<(NodeRound, Vec<f64>), AlgorithmError> {
    let dim = state.x.len();
    let mix = local_mix(w, i, state);
    let (batch, grad) = local_gradient(problem, cfg, &state.x, i, seed, t)?;
    let mask_key = StreamKey::new(seed, i, t, Purpose::Mask);
    let sparsify_key = StreamKey::new(seed, i, t, Purpose::Sparsify);
    let (y, differential, noise, message) = match cfg.variant {
        Variant::SdmDsgd | Variant::DcDsgd => {
            let theta = if cfg.variant == Variant::DcDsgd { 1.0 } else { cfg.theta };
            let noise = gaussian(mask_key, dim, cfg.sigma2);
            let (y, d) = differential(theta, cfg.gamma, &state.x, &mix, &grad, &noise);
            let message = sparsify(&d, cfg.sparsifier(), sparsify_key);
            (y, d, noise, message)
        }
        Variant::AltDesign => {
            let zeros = vec![0.0; dim];
            let (y, d) = differential(cfg.theta, cfg.gamma, &state.x, &mix, &grad, &zeros);
            let mut message = sparsify(&d, cfg.sparsifier(), sparsify_key);
            let draws = gaussian(mask_key, message.active_count(), cfg.sigma2);
            let mut noise = zeros;
            let scale = cfg.theta * cfg.gamma;
            let active = message.active_indices().to_vec();
            for ((v, k), z) in message.values_mut().iter_mut().zip(active).zip(&draws) {
                *v += scale * z;
                noise[k] = *z;
            }
            (y, d, noise, message)
        }
        Variant::Dsgd => {
            let noise = gaussian(mask_key, dim, cfg.sigma2);
            let y: Vec<f64> = (0..dim).map(|k| mix[k] - cfg.gamma * (grad[k] + noise[k])).collect();
            let d = y.iter().zip(&state.x).map(|(a, b)| a - b).collect();
            let message = SparseVector::from_dense(&y);
            (y, d, noise, message)
        }
    };
    Ok((
        NodeRound {
            x: state.x.clone(),
            batch,
            grad,
            noise,
            differential,
            message,
        },
        y,
    ))
}

/// Runs one synchronous round for whichever variant `cfg` names.
pub fn step(
    states: &mut [NodeState],
    w: &ConsensusMatrix,
    cfg: &AlgorithmConfig,
    problem: &Problem<'_>,
    seed: u64,
    t: u64,
) -> Result<RoundOutput, AlgorithmError> {
    cfg.validate()?;
    if states.len() != w.node_count() || problem.dataset.node_count() != w.node_count() {
        return Err(AlgorithmError::Config(format!(
            "{} states, {} data partitions and a {}-node consensus matrix",
            states.len(),
            problem.dataset.node_count(),
            w.node_count()
        )));
    }
    let rounds: Vec<(NodeRound, Vec<f64>)> = states
        .par_iter()
        .enumerate()
        .map(|(i, s)| node_round(i, s, w, cfg, problem, seed, t))
        .collect::<Result<_, _>>()?;

    let full_exchange = cfg.variant == Variant::Dsgd;
    states.par_iter_mut().enumerate().for_each(|(i, state)| {
        let (round, y) = &rounds[i];
        state.y.clone_from(y);
        state.d.clone_from(&round.differential);
        if full_exchange {
            state.x = round.message.to_dense();
        } else {
            round.message.add_to(&mut state.x);
        }
        for (&j, copy) in state.neighbor_copies.iter_mut() {
            let msg = &rounds[j].0.message;
            if full_exchange {
                *copy = msg.to_dense();
            } else {
                msg.add_to(copy);
            }
        }
    });

    Ok(RoundOutput {
        iteration: t,
        nodes: rounds.into_iter().map(|(r, _)| r).collect(),
    })
}

/// One round of mask-then-sparsify SDM-DSGD.
pub fn sdm_dsgd_step(
    states: &mut [NodeState],
    w: &ConsensusMatrix,
    cfg: &AlgorithmConfig,
    problem: &Problem<'_>,
    seed: u64,
    t: u64,
) -> Result<RoundOutput, AlgorithmError> {
    if !matches!(cfg.variant, Variant::SdmDsgd | Variant::DcDsgd) {
        return Err(AlgorithmError::Config(format!("{} is not a mask-then-sparsify variant", cfg.variant.name())));
    }
    step(states, w, cfg, problem, seed, t)
}

/// One round of the sparsify-then-mask ordering.
pub fn alt_design_step(
    states: &mut [NodeState],
    w: &ConsensusMatrix,
    cfg: &AlgorithmConfig,
    problem: &Problem<'_>,
    seed: u64,
    t: u64,
) -> Result<RoundOutput, AlgorithmError> {
    if cfg.variant != Variant::AltDesign {
        return Err(AlgorithmError::Config(format!("{} is not alt_design", cfg.variant.name())));
    }
    step(states, w, cfg, problem, seed, t)
}

/// Stacks node states node-major into one `N d` vector.
pub fn stack(states: &[NodeState]) -> Vec<f64> {
    states.iter().flat_map(|s| s.x.iter().copied()).collect()
}

/// Mean of the node states.
pub fn average(states: &[NodeState]) -> Vec<f64> {
    let n = states.len() as f64;
    let mut out = vec![0.0; states.first().map_or(0, |s| s.x.len())];
    for s in states {
        out.iter_mut().zip(&s.x).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// `||x - 1 ⊗ x_bar||^2`.
pub fn consensus_error(states: &[NodeState]) -> f64 {
    let mean = average(states);
    states
        .iter()
        .flat_map(|s| s.x.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)))
        .sum()
}

/// Lyapunov function `½ xᵀ(I - W̃)x + gamma sum_i f(x_i; B_i)` and its gradient
/// `(I - W̃)x + gamma ∇f`, with `W̃ = W ⊗ I_d` applied blockwise.
///
/// `batches` selects each node's samples (full local data when `None`). With
/// `clip` set, the `f` part of the gradient is the clipped stochastic gradient
/// the engines use; the value is left unclipped.
pub fn lyapunov_value_and_grad(
    x_stacked: &[f64],
    w: &ConsensusMatrix,
    gamma: f64,
    problem: &Problem<'_>,
    batches: Option<&[Vec<usize>]>,
    clip: Option<ClipConfig>,
) -> (f64, Vec<f64>) {
    let dim = problem.dim();
    let mixed = w.mix_stacked(x_stacked, dim);
    let mut value = 0.0;
    let mut grad = vec![0.0; x_stacked.len()];
    for i in 0..w.node_count() {
        let xi = &x_stacked[i * dim..(i + 1) * dim];
        let samples = match batches {
            Some(b) => &b[i][..],
            None => problem.dataset.node_samples(i),
        };
        let (f, g) = problem.objective.loss_grad_on(xi, problem.dataset, samples);
        let g = match clip {
            Some(c) => clip_gradient(&g, c),
            None => g,
        };
        value += gamma * f;
        for k in 0..dim {
            let lap = xi[k] - mixed[i * dim + k];
            value += 0.5 * xi[k] * lap;
            grad[i * dim + k] = lap + gamma * g[k];
        }
    }
    (value, grad)
}

/// Inputs of the convergence bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// `f(0) - f(x*)`.
    pub c1: f64,
    /// Stochastic gradient variance.
    pub sigma_tilde2: f64,
    pub m: f64,
    pub tau: f64,
    pub sigma2: f64,
    pub n: f64,
    pub d: f64,
    pub g: f64,
    pub beta: f64,
    pub lambda_min: f64,
    pub l: f64,
    pub gamma: f64,
    pub theta: f64,
    pub p: f64,
    pub t: f64,
}

/// Which printed form of the bound to evaluate. The two are algebraically
/// equal and are kept as mutually checking evaluators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundForm {
    /// Term-by-term statement.
    #[default]
    Statement,
    /// The summed inequality at the end of the proof, divided by `T`.
    SummedProof,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundTerms {
    pub total: f64,
    pub term_i: f64,
    pub term_ii: f64,
    pub term_iii: f64,
    pub term_iv: f64,
}

/// Upper bound on `min_t ||∇f(x_bar_t)||^2` as the sum of four terms.
pub fn convergence_bound(b: &BoundInputs, form: BoundForm) -> Result<BoundTerms, AlgorithmError> {
    let kappa = 1.0 - b.lambda_min + b.gamma * b.l;
    let limit = 2.0 * b.p / kappa;
    if !(b.theta < limit) {
        return Err(AlgorithmError::ScheduleViolation { theta: b.theta, limit });
    }
    let c2 = b.n * b.sigma_tilde2 / (b.m * b.tau) + b.n * b.d * b.sigma2;
    let c3 = (b.n * b.g).powi(2) + (b.n * b.d).powi(2) * b.sigma2;
    let gap = 1.0 - b.beta;
    let compress = 1.0 / b.p - 1.0;
    let slack = 2.0 * b.p - kappa * b.theta;
    let (term_i, term_ii, term_iii, term_iv) = match form {
        BoundForm::Statement => {
            let i = 2.0 * b.c1 / (b.theta * b.gamma * b.t);
            let ii = 2.0 * b.l * c3 / b.n * (b.gamma / gap).powi(2);
            let iii = 2.0 * b.theta * b.gamma.powi(2) * b.l * c2 / (b.n * gap) * compress
                + b.l * b.theta * b.gamma * c2 / (b.n * b.n * b.p);
            let iv = (2.0 * b.gamma * b.l / (b.n * gap) + b.l / (b.n * b.n))
                * compress
                * (2.0 * b.p * b.n * b.c1 / (slack * b.t) + kappa * b.theta.powi(2) * b.gamma * c2 / slack);
            (i, ii, iii, iv)
        }
        BoundForm::SummedProof => {
            let i = 2.0 * b.c1 / (b.theta * b.gamma);
            let ii = 2.0 * b.t * b.l * c3 / b.n * (b.gamma / gap).powi(2);
            let iii = 2.0 * b.t * b.theta * b.gamma.powi(2) * b.l * c2 / (b.n * gap) * compress
                + b.l * b.t * b.theta * b.gamma * c2 / (b.n * b.n * b.p);
            let iv = (2.0 * b.theta * b.gamma * b.l / (b.n * gap) + b.l * b.theta / (b.n * b.n))
                * compress
                * (2.0 * b.p * b.n * b.c1 / (2.0 * b.p * b.theta - kappa * b.theta.powi(2))
                    + kappa * b.theta * b.gamma * b.t * c2 / slack);
            (i / b.t, ii / b.t, iii / b.t, iv / b.t)
        }
    };
    Ok(BoundTerms {
        total: term_i + term_ii + term_iii + term_iv,
        term_i,
        term_ii,
        term_iii,
        term_iv,
    })
}
