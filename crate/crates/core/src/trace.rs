//! Line-delimited JSON record stream of a run's random draws.
//!
//! The first line is a [`TraceHeader`]; each following line is one
//! [`TraceRecord`] for a `(iteration, node)` pair, in iteration-major order.
//! Replaying the records reproduces the trajectory without touching any RNG.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithms::{AlgorithmConfig, RoundOutput};

pub const TRACE_FORMAT: &str = "sdm-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("unsupported trace format {format:?} version {version}")]
    Version { format: String, version: u32 },
    #[error("empty trace")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub nodes: usize,
    pub dim: usize,
    pub algorithm: AlgorithmConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: u64,
    pub node: usize,
    pub batch: Vec<usize>,
    pub noise: Vec<f64>,
    pub differential: Vec<f64>,
    pub active: Vec<usize>,
    pub values: Vec<f64>,
}

pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, seed: u64, nodes: usize, dim: usize, algorithm: AlgorithmConfig) -> Result<Self, TraceError> {
        let header = TraceHeader {
            format: TRACE_FORMAT.into(),
            version: TRACE_VERSION,
            seed,
            nodes,
            dim,
            algorithm,
        };
        write_line(&mut out, &header, 0)?;
        Ok(Self { out })
    }

    pub fn record(&mut self, round: &RoundOutput) -> Result<(), TraceError> {
        for (node, r) in round.nodes.iter().enumerate() {
            let rec = TraceRecord {
                iter: round.iteration,
                node,
                batch: r.batch.clone(),
                noise: r.noise.clone(),
                differential: r.differential.clone(),
                active: r.message.active_indices().to_vec(),
                values: r.message.values().to_vec(),
            };
            write_line(&mut self.out, &rec, 0)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, TraceError> {
        self.out.flush()?;
        Ok(self.out)
    }
}

fn write_line<W: Write, T: Serialize>(out: &mut W, value: &T, line: usize) -> Result<(), TraceError> {
    serde_json::to_writer(&mut *out, value).map_err(|source| TraceError::Json { line, source })?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<(TraceHeader, Vec<TraceRecord>), TraceError> {
    let mut lines = input.lines().enumerate();
    let (_, first) = lines.next().ok_or(TraceError::Empty)?;
    let header: TraceHeader = serde_json::from_str(&first?).map_err(|source| TraceError::Json { line: 1, source })?;
    if header.format != TRACE_FORMAT || header.version != TRACE_VERSION {
        return Err(TraceError::Version {
            format: header.format,
            version: header.version,
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|source| TraceError::Json { line: i + 1, source })?);
    }
    Ok((header, records))
}
