//! Network topologies and the consensus (mixing) matrix.
//!
//! The consensus matrix is built from the graph Laplacian as
//! `W = I - 2 / (3 * lambda_max(L)) * L`, which makes `W` symmetric, doubly
//! stochastic, supported on the edges plus the diagonal, and places its whole
//! spectrum in `[1/3, 1]`. The eigenvalue `1` is simple exactly when the graph
//! is connected.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use thiserror::Error;

use crate::rng::{Purpose, StreamKey};

/// Row/column sum tolerance for the doubly stochastic check.
pub const STOCHASTIC_TOL: f64 = 1e-10;
/// Tolerance used to decide that an eigenvalue equals one.
pub const UNIT_EIGEN_TOL: f64 = 1e-9;
/// Resampling budget for Erdős–Rényi generation.
pub const MAX_RESAMPLE_ATTEMPTS: u32 = 1000;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("need at least {min} nodes, got {n}")]
    TooFewNodes { n: usize, min: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("edge ({a}, {b}) references a node outside 0..{n}")]
    NodeOutOfRange { a: usize, b: usize, n: usize },
    #[error("graph is disconnected ({components} components)")]
    Disconnected { components: usize },
    #[error("edge probability must lie in (0, 1], got {0}")]
    InvalidEdgeProb(f64),
    #[error("no connected sample after {attempts} attempts (n = {n}, edge_prob = {edge_prob})")]
    ConnectivityFailure {
        n: usize,
        edge_prob: f64,
        attempts: u32,
    },
    #[error("theta must lie in (0, 1], got {0}")]
    Domain(f64),
    #[error("invalid consensus matrix: {0}")]
    InvalidMatrix(String),
    #[error("edge list line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An undirected, connected simple graph on nodes `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    /// Sorted, each pair stored as `(lo, hi)`.
    edges: Vec<(usize, usize)>,
    adjacency: Vec<bool>,
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    /// Builds a topology, rejecting self-loops, out-of-range nodes and
    /// disconnected graphs. Duplicate edges (in either orientation) collapse.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, GraphError> {
        let topo = Self::unchecked(n, edges)?;
        let components = topo.component_count();
        if components != 1 {
            return Err(GraphError::Disconnected { components });
        }
        Ok(topo)
    }

    fn unchecked(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::TooFewNodes { n, min: 1 });
        }
        let mut adjacency = vec![false; n * n];
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(GraphError::NodeOutOfRange { a, b, n });
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            adjacency[a * n + b] = true;
            adjacency[b * n + a] = true;
        }
        let mut edge_list = Vec::new();
        let mut neighbors = vec![Vec::new(); n];
        for i in 0..n {
            for j in 0..n {
                if adjacency[i * n + j] {
                    neighbors[i].push(j);
                    if i < j {
                        edge_list.push((i, j));
                    }
                }
            }
        }
        Ok(Self {
            n,
            edges: edge_list,
            adjacency,
            neighbors,
        })
    }

    pub fn ring(n: usize) -> Result<Self, GraphError> {
        if n < 3 {
            return Err(GraphError::TooFewNodes { n, min: 3 });
        }
        Self::new(n, (0..n).map(|i| (i, (i + 1) % n)))
    }

    pub fn path(n: usize) -> Result<Self, GraphError> {
        Self::new(n, (1..n).map(|i| (i - 1, i)))
    }

    pub fn complete(n: usize) -> Result<Self, GraphError> {
        Self::new(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))))
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Combinatorial Laplacian `D - A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| {
            if i == j {
                self.degree(i) as f64
            } else if self.is_adjacent(i, j) {
                -1.0
            } else {
                0.0
            }
        })
    }

    fn component_count(&self) -> usize {
        let mut seen = vec![false; self.n];
        let mut components = 0;
        for start in 0..self.n {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &self.neighbors[u] {
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
        }
        components
    }

    /// Edge-list text: first line `N`, then one `i j` pair per line, 0-indexed.
    /// `#` starts a comment when parsing.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{}\n", self.n);
        for (a, b) in &self.edges {
            let _ = writeln!(out, "{a} {b}");
        }
        out
    }

    pub fn parse_edge_list(text: &str) -> Result<Self, GraphError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let (line, header) = lines.next().ok_or(GraphError::Parse {
            line: 1,
            msg: "missing node count".into(),
        })?;
        let n: usize = header.parse().map_err(|_| GraphError::Parse {
            line,
            msg: format!("expected node count, found {header:?}"),
        })?;
        let mut edges = Vec::new();
        for (line, l) in lines {
            let mut parts = l.split_whitespace();
            let mut next = || -> Result<usize, GraphError> {
                let tok = parts.next().ok_or_else(|| GraphError::Parse {
                    line,
                    msg: "expected two node ids".into(),
                })?;
                tok.parse().map_err(|_| GraphError::Parse {
                    line,
                    msg: format!("bad node id {tok:?}"),
                })
            };
            let a = next()?;
            let b = next()?;
            if parts.next().is_some() {
                return Err(GraphError::Parse {
                    line,
                    msg: "trailing tokens".into(),
                });
            }
            edges.push((a, b));
        }
        Self::new(n, edges)
    }

    pub fn read_edge_list(path: &Path) -> Result<Self, GraphError> {
        Self::parse_edge_list(&std::fs::read_to_string(path)?)
    }

    pub fn write_edge_list(&self, path: &Path) -> Result<(), GraphError> {
        std::fs::write(path, self.to_edge_list())?;
        Ok(())
    }
}

/// Samples G(n, edge_prob), resampling with derived sub-seeds until the
/// sample is connected.
pub fn generate_erdos_renyi(n: usize, edge_prob: f64, seed: u64) -> Result<Topology, GraphError> {
    if n < 2 {
        return Err(GraphError::TooFewNodes { n, min: 2 });
    }
    if !(edge_prob > 0.0 && edge_prob <= 1.0) {
        return Err(GraphError::InvalidEdgeProb(edge_prob));
    }
    for attempt in 0..MAX_RESAMPLE_ATTEMPTS {
        let mut rng = StreamKey::new(seed, 0, attempt as u64, Purpose::Graph).rng();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < edge_prob {
                    edges.push((i, j));
                }
            }
        }
        let topo = Topology::unchecked(n, edges)?;
        if topo.component_count() == 1 {
            return Ok(topo);
        }
    }
    Err(GraphError::ConnectivityFailure {
        n,
        edge_prob,
        attempts: MAX_RESAMPLE_ATTEMPTS,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralProfile {
    /// Sorted in decreasing order; `eigenvalues[0]` is (numerically) one.
    pub eigenvalues: Vec<f64>,
    /// Second-largest eigenvalue magnitude, `max(|lambda_2|, |lambda_N|)`.
    pub beta: f64,
    pub lambda_min: f64,
}

impl SpectralProfile {
    fn of_symmetric(m: &DMatrix<f64>) -> Self {
        let mut eigenvalues: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        let beta = eigenvalues[1..].iter().fold(0.0_f64, |acc, l| acc.max(l.abs()));
        let lambda_min = *eigenvalues.last().expect("non-empty spectrum");
        Self {
            eigenvalues,
            beta,
            lambda_min,
        }
    }

    pub fn lambda_2(&self) -> Option<f64> {
        self.eigenvalues.get(1).copied()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// `1 - beta`.
    pub fn spectral_gap(&self) -> f64 {
        1.0 - self.beta
    }
}

/// Symmetric doubly stochastic mixing matrix with its spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusMatrix {
    n: usize,
    entries: Vec<f64>,
    /// Column indices with non-zero weight in each row (diagonal included).
    support: Vec<Vec<usize>>,
    spectral: SpectralProfile,
}

/// `W = I - 2 / (3 lambda_max(L)) L`.
pub fn build_consensus_matrix(topology: &Topology) -> ConsensusMatrix {
    let n = topology.node_count();
    let laplacian = topology.laplacian();
    let lambda_max = if topology.edge_count() == 0 {
        0.0
    } else {
        SpectralProfile::of_symmetric(&laplacian).lambda_max()
    };
    let scale = if lambda_max > 0.0 { 2.0 / (3.0 * lambda_max) } else { 0.0 };
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        entries[i * n + i] = 1.0 - scale * topology.degree(i) as f64;
        for &j in topology.neighbors(i) {
            entries[i * n + j] = scale;
        }
    }
    ConsensusMatrix::from_parts(n, entries)
}

impl ConsensusMatrix {
    fn from_parts(n: usize, entries: Vec<f64>) -> Self {
        let support = (0..n)
            .map(|i| (0..n).filter(|&j| entries[i * n + j] != 0.0).collect())
            .collect();
        let spectral = SpectralProfile::of_symmetric(&DMatrix::from_row_slice(n, n, &entries));
        Self {
            n,
            entries,
            support,
            spectral,
        }
    }

    /// Imports a matrix given row-major, checking symmetry, stochasticity,
    /// non-negativity, the sparsity pattern against `topology`, and the
    /// spectral conditions.
    pub fn from_entries(topology: &Topology, entries: Vec<f64>) -> Result<Self, GraphError> {
        let n = topology.node_count();
        if entries.len() != n * n {
            return Err(GraphError::InvalidMatrix(format!(
                "expected {} entries, got {}",
                n * n,
                entries.len()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let w = entries[i * n + j];
                if !w.is_finite() || w < 0.0 {
                    return Err(GraphError::InvalidMatrix(format!("entry ({i}, {j}) = {w}")));
                }
                let allowed = i == j || topology.is_adjacent(i, j);
                if i != j && allowed != (w > 0.0) {
                    return Err(GraphError::InvalidMatrix(format!(
                        "entry ({i}, {j}) = {w} does not match the topology"
                    )));
                }
            }
        }
        let w = Self::from_parts(n, entries);
        w.validate()?;
        Ok(w)
    }

    /// Checks the structural and spectral invariants.
    pub fn validate(&self) -> Result<(), GraphError> {
        if !self.is_symmetric() {
            return Err(GraphError::InvalidMatrix("not symmetric".into()));
        }
        let defect = self.stochasticity_defect();
        if defect > STOCHASTIC_TOL {
            return Err(GraphError::InvalidMatrix(format!(
                "row/column sums deviate from 1 by {defect:e}"
            )));
        }
        let ev = &self.spectral.eigenvalues;
        if (ev[0] - 1.0).abs() > UNIT_EIGEN_TOL {
            return Err(GraphError::InvalidMatrix(format!("largest eigenvalue is {}", ev[0])));
        }
        if self.unit_eigenvalue_multiplicity() != 1 {
            return Err(GraphError::InvalidMatrix("eigenvalue 1 is not simple".into()));
        }
        if self.spectral.lambda_min <= -1.0 {
            return Err(GraphError::InvalidMatrix(format!(
                "smallest eigenvalue {} is not above -1",
                self.spectral.lambda_min
            )));
        }
        Ok(())
    }

    /// `W_theta = (1 - theta) I + theta W`.
    pub fn mixed(&self, theta: f64) -> Result<Self, GraphError> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(GraphError::Domain(theta));
        }
        let n = self.n;
        let entries = (0..n * n)
            .map(|k| {
                let identity = if k / n == k % n { 1.0 } else { 0.0 };
                (1.0 - theta) * identity + theta * self.entries[k]
            })
            .collect();
        Ok(Self::from_parts(n, entries))
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn support(&self, i: usize) -> &[usize] {
        &self.support[i]
    }

    pub fn spectral(&self) -> &SpectralProfile {
        &self.spectral
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.entries)
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Largest deviation of any row or column sum from one.
    pub fn stochasticity_defect(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.n {
            let row: f64 = (0..self.n).map(|j| self.get(i, j)).sum();
            let col: f64 = (0..self.n).map(|j| self.get(j, i)).sum();
            worst = worst.max((row - 1.0).abs()).max((col - 1.0).abs());
        }
        worst
    }

    pub fn unit_eigenvalue_multiplicity(&self) -> usize {
        self.spectral
            .eigenvalues
            .iter()
            .filter(|l| (*l - 1.0).abs() <= UNIT_EIGEN_TOL)
            .count()
    }

    /// Blockwise product `(W ⊗ I_d) x` for a node-major stacked vector.
    pub fn mix_stacked(&self, x: &[f64], dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for i in 0..self.n {
            let dst = &mut out[i * dim..(i + 1) * dim];
            for &j in &self.support[i] {
                let w = self.get(i, j);
                for (o, v) in dst.iter_mut().zip(&x[j * dim..(j + 1) * dim]) {
                    *o += w * v;
                }
            }
        }
        out
    }
}
