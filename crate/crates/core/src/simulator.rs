//! End-to-end runs: topology, data, engine, privacy ledger and metrics.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithms::{
    self, average, consensus_error, initial_states, precondition_warning, AlgorithmConfig, AlgorithmError, NodeState,
    Problem, RoundOutput, Variant,
};
use crate::graph::{build_consensus_matrix, generate_erdos_renyi, ConsensusMatrix, GraphError, Topology};
use crate::objectives::{
    global_loss_and_grad, load_csv, synth_classification, synth_quadratic, Dataset, Objective, ObjectiveError,
    PartitionScheme,
};
use crate::privacy::{AlphaRule, Accounting, PrivacyError, PrivacyLedger, PrivacyParams, Release, SIGMA2_FLOOR};
use crate::rng::derive_seed;
use crate::sparsifier::SparseVector;
use crate::trace::{TraceError, TraceWriter};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_DIVERGENCE_FACTOR: f64 = 1e6;
pub const METRICS_HEADER: [&str; 7] = ["iter", "loss", "grad_norm_sq", "consensus_err", "cum_nnz", "cum_epsilon", "status"];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Algorithm(#[from] AlgorithmError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TopologySpec {
    ErdosRenyi { n: usize, edge_prob: f64 },
    Ring { n: usize },
    Path { n: usize },
    Complete { n: usize },
    EdgeList { path: PathBuf },
}

impl TopologySpec {
    pub fn build(&self, seed: u64) -> Result<Topology, GraphError> {
        match self {
            TopologySpec::ErdosRenyi { n, edge_prob } => generate_erdos_renyi(*n, *edge_prob, seed),
            TopologySpec::Ring { n } => Topology::ring(*n),
            TopologySpec::Path { n } => Topology::path(*n),
            TopologySpec::Complete { n } => Topology::complete(*n),
            TopologySpec::EdgeList { path } => Topology::read_edge_list(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DatasetSpec {
    /// One random target per node.
    Quadratic { features: usize },
    /// Gaussian class clusters, `samples_per_node` samples for every node.
    Classification {
        classes: usize,
        features: usize,
        samples_per_node: usize,
    },
    /// `label,feature...` rows.
    Csv { path: PathBuf },
}

/// Privacy accounting settings. The noise variance, batch rate and transmit
/// probability come from the algorithm section; `m` is the local data size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySpec {
    pub delta: f64,
    pub epsilon_target: f64,
    #[serde(default)]
    pub alpha_rule: AlphaRule,
    #[serde(default)]
    pub accounting: Accounting,
    /// Gradient l2 bound `G`; defaults to `sqrt(d) C` from the clip bound.
    #[serde(default)]
    pub sensitivity_g: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CommCounting {
    /// Every neighbour receives its own copy.
    #[default]
    PerEdge,
    /// One broadcast per node and round.
    PerBroadcast,
}

fn default_stride() -> u64 {
    1
}

fn default_divergence() -> f64 {
    DEFAULT_DIVERGENCE_FACTOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub iterations: u64,
    #[serde(default = "default_stride")]
    pub metric_stride: u64,
    #[serde(default)]
    pub comm_counting: CommCounting,
    #[serde(default = "default_divergence")]
    pub divergence_factor: f64,
    pub topology: TopologySpec,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub partition: PartitionScheme,
    pub objective: Objective,
    pub algorithm: AlgorithmConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub privacy: Option<PrivacySpec>,
    /// Where to write the per-round record stream, if anywhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(SimError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.iterations == 0 {
            return Err(SimError::Config("iterations must be at least 1".into()));
        }
        if self.metric_stride == 0 {
            return Err(SimError::Config("metric_stride must be at least 1".into()));
        }
        // TOML integers are signed 64-bit; larger seeds could not be written to a manifest
        if self.seed > i64::MAX as u64 {
            return Err(SimError::Config(format!("seed must be at most {}, got {}", i64::MAX, self.seed)));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(SimError::Config(format!(
                "divergence_factor must exceed 1, got {}",
                self.divergence_factor
            )));
        }
        self.algorithm.validate()?;
        Ok(())
    }

    /// Makes relative file references relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let TopologySpec::EdgeList { path } = &mut self.topology {
            fix(path);
        }
        if let DatasetSpec::Csv { path } = &mut self.dataset {
            fix(path);
        }
        if let Some(path) = &mut self.trace {
            fix(path);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Completed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: u64,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub consensus_err: f64,
    pub cum_nnz: u64,
    pub cum_epsilon: Option<f64>,
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<MetricRecord>,
    pub status: RunStatus,
    pub iterations_run: u64,
    pub initial_loss: f64,
    pub min_grad_norm_sq: f64,
    pub final_average: Vec<f64>,
    pub algorithm: AlgorithmConfig,
    pub warnings: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunMetrics {
    pub fn last(&self) -> Option<&MetricRecord> {
        self.records.last()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(METRICS_HEADER)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Entries sent in one round.
pub fn count_transmission(transmitted: &[SparseVector], topology: &Topology, mode: CommCounting) -> u64 {
    transmitted
        .iter()
        .enumerate()
        .map(|(i, msg)| {
            let nnz = msg.nnz() as u64;
            match mode {
                CommCounting::PerBroadcast => nnz,
                CommCounting::PerEdge => nnz * topology.degree(i) as u64,
            }
        })
        .sum()
}

/// A run in progress. Drive it with [`Simulation::step`] or
/// [`Simulation::run`].
pub struct Simulation {
    pub config: RunConfig,
    pub topology: Topology,
    pub consensus: ConsensusMatrix,
    pub dataset: Dataset,
    pub algorithm: AlgorithmConfig,
    pub privacy: Option<PrivacyParams>,
    pub states: Vec<NodeState>,
    pub warnings: Vec<String>,
    engine_seed: u64,
    ledger: Option<PrivacyLedger>,
    step_rho: f64,
    round: u64,
}

fn build_dataset(spec: &DatasetSpec, partition: PartitionScheme, nodes: usize, seed: u64) -> Result<Dataset, SimError> {
    let data = match spec {
        DatasetSpec::Quadratic { features } => return Ok(synth_quadratic(nodes, *features, seed)),
        DatasetSpec::Classification {
            classes,
            features,
            samples_per_node,
        } => synth_classification(*classes, *features, nodes * samples_per_node, seed),
        DatasetSpec::Csv { path } => load_csv(path)?,
    };
    Ok(data.partitioned(nodes, partition, derive_seed(seed, 1))?)
}

impl Simulation {
    pub fn new(config: RunConfig) -> Result<Self, SimError> {
        config.validate()?;
        let topology = config.topology.build(derive_seed(config.seed, 1))?;
        let consensus = build_consensus_matrix(&topology);
        let n = topology.node_count();
        let dataset = build_dataset(&config.dataset, config.partition, n, derive_seed(config.seed, 2))?;
        config.objective.validate(&dataset)?;
        let dim = config.objective.dim(dataset.feature_dim());
        let lambda_min = consensus.spectral().lambda_min;

        let mut warnings = Vec::new();
        let smoothness = config.algorithm.smoothness_l.or_else(|| config.objective.smoothness_estimate(&dataset));
        let algorithm = match smoothness {
            Some(l) => config.algorithm.resolve(lambda_min, l, n, config.iterations)?,
            None if config.algorithm.schedule != algorithms::Schedule::Fixed => {
                return Err(SimError::Config(
                    "the corollary2 schedule needs algorithm.smoothness_l for this objective".into(),
                ))
            }
            None => config.algorithm,
        };
        if let Some(w) = smoothness.and_then(|l| precondition_warning(&algorithm, lambda_min, l)) {
            warnings.push(w);
        }

        let (privacy, ledger, step_rho) = match config.privacy {
            None => (None, None, 0.0),
            Some(spec) => {
                let g = match (spec.sensitivity_g, algorithm.clip) {
                    (Some(g), _) => g,
                    (None, Some(c)) => c.l2_bound(dim),
                    (None, None) => {
                        return Err(SimError::Config(
                            "privacy accounting needs a clip bound or privacy.sensitivity_g".into(),
                        ))
                    }
                };
                let params = PrivacyParams {
                    sigma2: algorithm.sigma2,
                    tau: algorithm.batch_rate,
                    sensitivity_g: g,
                    local_samples_m: dataset.local_size() as u64,
                    transmit_prob_p: algorithm.transmit_prob,
                    delta: spec.delta,
                    epsilon_target: spec.epsilon_target,
                    alpha_rule: spec.alpha_rule,
                    accounting: spec.accounting,
                };
                if params.sigma2 < SIGMA2_FLOOR {
                    warnings.push(format!(
                        "sigma2 = {} is below the floor {SIGMA2_FLOOR}; the reported epsilon is not a valid guarantee",
                        params.sigma2
                    ));
                }
                let release = match algorithm.variant {
                    Variant::AltDesign => Release::SparsifyThenMask,
                    _ => Release::MaskThenSparsify,
                };
                let rho = params.step_rho_unchecked(release)?;
                (Some(params), Some(PrivacyLedger::new(params.alpha()?)?), rho)
            }
        };

        let states = initial_states(&consensus, dim);
        Ok(Self {
            engine_seed: derive_seed(config.seed, 3),
            config,
            topology,
            consensus,
            dataset,
            algorithm,
            privacy,
            states,
            warnings,
            ledger,
            step_rho,
            round: 0,
        })
    }

    pub fn problem(&self) -> Problem<'_> {
        Problem {
            objective: self.config.objective,
            dataset: &self.dataset,
        }
    }

    pub fn engine_seed(&self) -> u64 {
        self.engine_seed
    }

    /// Rounds completed so far.
    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn dim(&self) -> usize {
        self.problem().dim()
    }

    /// `f(x_bar; D)` and its gradient at the current average.
    pub fn global_loss_and_grad(&self) -> (f64, Vec<f64>) {
        global_loss_and_grad(&self.config.objective, &average(&self.states), &self.dataset)
    }

    pub fn cum_epsilon(&self) -> Option<f64> {
        let (ledger, params) = (self.ledger.as_ref()?, self.privacy.as_ref()?);
        ledger.epsilon(params.delta).ok()
    }

    /// Executes one round and charges it to the privacy ledger.
    pub fn step(&mut self) -> Result<RoundOutput, SimError> {
        let problem = Problem {
            objective: self.config.objective,
            dataset: &self.dataset,
        };
        let out = algorithms::step(
            &mut self.states,
            &self.consensus,
            &self.algorithm,
            &problem,
            self.engine_seed,
            self.round,
        )?;
        if let Some(ledger) = &mut self.ledger {
            ledger.compose(self.step_rho)?;
        }
        self.round += 1;
        Ok(out)
    }

    pub fn run(self) -> Result<RunMetrics, SimError> {
        self.run_with(|_, _| {})
    }

    /// Runs to completion or divergence, calling `observe` after every round.
    pub fn run_with(mut self, mut observe: impl FnMut(&Simulation, &RoundOutput)) -> Result<RunMetrics, SimError> {
        let start = Instant::now();
        let mut trace = match &self.config.trace {
            Some(path) => Some(TraceWriter::new(
                BufWriter::new(File::create(path)?),
                self.engine_seed,
                self.topology.node_count(),
                self.dim(),
                self.algorithm,
            )?),
            None => None,
        };
        let (initial_loss, _) = self.global_loss_and_grad();
        let threshold = self.config.divergence_factor * initial_loss.abs().max(f64::MIN_POSITIVE);
        let mut records = Vec::new();
        let mut cum_nnz = 0u64;
        let mut min_grad = f64::INFINITY;
        let mut status = RunStatus::Completed;

        for t in 1..=self.config.iterations {
            let out = self.step()?;
            if let Some(w) = &mut trace {
                w.record(&out)?;
            }
            let sent: Vec<SparseVector> = out.transmitted().cloned().collect();
            cum_nnz += count_transmission(&sent, &self.topology, self.config.comm_counting);
            observe(&self, &out);

            let (loss, grad) = self.global_loss_and_grad();
            let grad_norm_sq: f64 = grad.iter().map(|g| g * g).sum();
            let diverged = !loss.is_finite() || loss > threshold || !grad_norm_sq.is_finite();
            if !diverged {
                min_grad = min_grad.min(grad_norm_sq);
            }
            let last = t == self.config.iterations || diverged;
            if last || t % self.config.metric_stride == 0 {
                records.push(MetricRecord {
                    iter: t,
                    loss,
                    grad_norm_sq,
                    consensus_err: consensus_error(&self.states),
                    cum_nnz,
                    cum_epsilon: self.cum_epsilon(),
                    status: match (last, diverged) {
                        (_, true) => RunStatus::Diverged,
                        (true, false) => RunStatus::Completed,
                        _ => RunStatus::Ok,
                    },
                });
            }
            if diverged {
                status = RunStatus::Diverged;
                break;
            }
        }
        if let Some(w) = trace {
            w.finish()?.flush()?;
        }
        Ok(RunMetrics {
            records,
            status,
            iterations_run: self.round,
            initial_loss,
            min_grad_norm_sq: min_grad,
            final_average: average(&self.states),
            algorithm: self.algorithm,
            warnings: self.warnings,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        })
    }
}

pub fn run(config: RunConfig) -> Result<RunMetrics, SimError> {
    Simulation::new(config)?.run()
}

/// Runs every configuration, in parallel. A failing run does not stop the
/// others.
pub fn sweep(configs: &[RunConfig]) -> Vec<Result<RunMetrics, SimError>> {
    configs.par_iter().map(|c| run(c.clone())).collect()
}

/// Long-format CSV: the metrics header prefixed with `config_id`.
pub fn write_sweep_csv<'a, W: Write>(
    out: W,
    runs: impl IntoIterator<Item = (&'a str, &'a RunMetrics)>,
) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["config_id"];
    header.extend(METRICS_HEADER);
    w.write_record(&header)?;
    for (id, metrics) in runs {
        for r in &metrics.records {
            w.write_record(&[
                id.to_string(),
                r.iter.to_string(),
                r.loss.to_string(),
                r.grad_norm_sq.to_string(),
                r.consensus_err.to_string(),
                r.cum_nnz.to_string(),
                r.cum_epsilon.map(|e| e.to_string()).unwrap_or_default(),
                status_name(r.status).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn status_name(status: RunStatus) -> &'static str {
    match status {
        RunStatus::Ok => "ok",
        RunStatus::Completed => "completed",
        RunStatus::Diverged => "diverged",
    }
}

/// Last record whose cumulative transmission and privacy spend both fit the
/// budgets. A run without privacy accounting is only limited by `max_nnz`.
pub fn at_budget(metrics: &RunMetrics, max_nnz: u64, max_epsilon: f64) -> Option<&MetricRecord> {
    metrics
        .records
        .iter()
        .take_while(|r| r.cum_nnz <= max_nnz && r.cum_epsilon.is_none_or(|e| e <= max_epsilon))
        .last()
}

/// Number of records within a transmission budget.
pub fn records_within(metrics: &RunMetrics, max_nnz: u64) -> usize {
    metrics.records.iter().take_while(|r| r.cum_nnz <= max_nnz).count()
}
