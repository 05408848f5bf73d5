//! Decentralized SGD with sparse differential Gaussian masking.
//!
//! The crate simulates barrier-synchronous decentralized training over a fixed
//! undirected graph. Nodes exchange sparsified, noise-masked differentials of
//! their local models; the [`privacy`] module accounts the resulting
//! differential-privacy guarantee in closed form.
//!
//! - [`graph`]: topologies and the consensus matrix.
//! - [`sparsifier`]: Bernoulli coordinate sparsification.
//! - [`privacy`]: Rényi accounting, noise calibration and the budget ledger.
//! - [`objectives`]: datasets, losses, gradients and clipping.
//! - [`algorithms`]: the update engines and convergence diagnostics.
//! - [`simulator`]: full runs with metrics and communication accounting.
//! - [`trace`]: the per-round record stream.

pub mod algorithms;
pub mod graph;
pub mod objectives;
pub mod privacy;
pub mod rng;
pub mod simulator;
pub mod sparsifier;
pub mod trace;

pub use algorithms::{AlgorithmConfig, Variant};
pub use graph::{build_consensus_matrix, ConsensusMatrix, Topology};
pub use simulator::{run, RunConfig, RunMetrics, RunStatus, Simulation};
