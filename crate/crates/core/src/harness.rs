//! Synthetic data-parallel training loop.
//!
//! Layers are pure timing: a forward and a backward compute time and a
//! gradient size. Gradients are grouped into buckets in reverse layer
//! order; each bucket's all-reduce is issued as soon as its last layer's
//! backward pass finishes, overlapping with the remaining backward work.
//!
//! Model file format (TOML):
//!
//! ```toml
//! name = "example"
//! iterations = 60
//! warmup_iterations = 5
//! update_us = 0          # optional post-backward phase
//!
//! [[layers]]
//! forward_us = 500
//! backward_us = 1000
//! grad_bytes = 131072
//! repeat = 8             # optional, default 1
//! ```

use std::ops::Range;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{compute_for, micros_f64, process_cpu_time, Timestamp};
use crate::dag::CollectiveKind;
use crate::report::{summarize, Summary};
use crate::session::{DType, OpHandle, Session, SessionError};
use crate::wire::handshake::PlanEntry;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("model: {0}")]
    Model(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Session(#[from] SessionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub forward_us: f64,
    pub backward_us: f64,
    pub grad_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub iterations: usize,
    pub warmup_iterations: usize,
    pub update_us: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    forward_us: f64,
    backward_us: f64,
    grad_bytes: u64,
    #[serde(default = "one")]
    repeat: usize,
}

fn one() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    #[serde(default)]
    name: Option<String>,
    layers: Vec<LayerDoc>,
    #[serde(default = "default_iterations")]
    iterations: usize,
    #[serde(default = "default_warmup")]
    warmup_iterations: usize,
    #[serde(default)]
    update_us: f64,
}

fn default_iterations() -> usize {
    60
}

fn default_warmup() -> usize {
    5
}

impl ModelSpec {
    pub fn parse(text: &str) -> Result<ModelSpec, HarnessError> {
        let doc: ModelDoc = toml::from_str(text).map_err(|e| HarnessError::Model(e.to_string()))?;
        let layers: Vec<LayerSpec> = doc
            .layers
            .iter()
            .flat_map(|l| {
                let layer = LayerSpec {
                    forward_us: l.forward_us,
                    backward_us: l.backward_us,
                    grad_bytes: l.grad_bytes,
                };
                std::iter::repeat_n(layer, l.repeat)
            })
            .collect();
        let model = ModelSpec {
            name: doc.name.unwrap_or_else(|| "custom".into()),
            layers,
            iterations: doc.iterations,
            warmup_iterations: doc.warmup_iterations,
            update_us: doc.update_us,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<ModelSpec, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        ModelSpec::parse(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.layers.is_empty() {
            return Err(HarnessError::Model("at least one layer is required".into()));
        }
        let bad = |v: f64| !v.is_finite() || v < 0.0;
        if let Some(i) = self
            .layers
            .iter()
            .position(|l| bad(l.forward_us) || bad(l.backward_us))
        {
            return Err(HarnessError::Model(format!(
                "layer {i}: durations must be ≥ 0"
            )));
        }
        if bad(self.update_us) {
            return Err(HarnessError::Model("update_us must be ≥ 0".into()));
        }
        Ok(())
    }

    fn uniform(name: &str, layers: usize, fwd: f64, bwd: f64, grad: u64) -> ModelSpec {
        ModelSpec {
            name: name.into(),
            layers: vec![
                LayerSpec {
                    forward_us: fwd,
                    backward_us: bwd,
                    grad_bytes: grad,
                };
                layers
            ],
            iterations: default_iterations(),
            warmup_iterations: default_warmup(),
            update_us: 0.0,
        }
    }

    pub fn total_compute_us(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.forward_us + l.backward_us)
            .sum::<f64>()
            + self.update_us
    }
}

/// Bucket size the shipped profiles are designed for.
pub const PROFILE_BUCKET_BYTES: u64 = 256 * 1024;

pub const PROFILE_NAMES: [&str; 3] = ["bert-like", "small", "wide"];

/// Shipped synthetic profiles, sized for [`PROFILE_BUCKET_BYTES`]:
/// `bert-like` has 4 buckets of 2 ms backward each, `small` one bucket,
/// `wide` 16 buckets.
pub fn profile(name: &str) -> Option<ModelSpec> {
    Some(match name {
        "bert-like" => ModelSpec::uniform(name, 8, 500.0, 1000.0, 128 * 1024),
        "small" => ModelSpec::uniform(name, 2, 1000.0, 2000.0, 64 * 1024),
        "wide" => ModelSpec::uniform(name, 16, 200.0, 400.0, 256 * 1024),
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bucket {
    pub id: usize,
    /// Layer indices, ascending. Filled from the end of the model.
    pub layers: Range<usize>,
    pub bytes: u64,
}

impl Bucket {
    /// The layer whose backward pass completes the bucket.
    pub fn ready_after(&self) -> usize {
        self.layers.start
    }
}

/// Greedy fill in reverse layer order. A bucket closes when the next layer
/// would push it past `bucket_bytes`; a layer larger than `bucket_bytes`
/// gets a bucket of its own.
pub fn bucketize(model: &ModelSpec, bucket_bytes: u64) -> Vec<Bucket> {
    let mut out: Vec<Bucket> = Vec::new();
    let mut cur: Option<Bucket> = None;
    for i in (0..model.layers.len()).rev() {
        let g = model.layers[i].grad_bytes;
        if let Some(b) = cur.as_mut() {
            if b.bytes.saturating_add(g) > bucket_bytes {
                out.push(cur.take().unwrap());
            } else {
                b.layers.start = i;
                b.bytes += g;
                continue;
            }
        }
        cur = Some(Bucket {
            id: out.len(),
            layers: i..i + 1,
            bytes: g,
        });
    }
    out.extend(cur);
    out
}

/// Collectives issued by one iteration, in issue order.
pub fn collective_plan(buckets: &[Bucket]) -> Vec<PlanEntry> {
    buckets
        .iter()
        .map(|b| PlanEntry {
            kind: CollectiveKind::AllReduce,
            elem_size: 1,
            bytes: b.bytes,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BucketTiming {
    pub bucket_id: usize,
    pub issue: Timestamp,
    pub complete: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IterationTrace {
    pub iter: usize,
    pub warmup: bool,
    pub start: Timestamp,
    pub end: Timestamp,
    pub buckets: Vec<BucketTiming>,
    /// Process CPU time consumed during the iteration.
    pub cpu: Duration,
}

impl IterationTrace {
    pub fn iteration_time_us(&self) -> f64 {
        (self.end - self.start).as_secs_f64() * 1e6
    }
}

/// One row of the training trace CSV. Times are microseconds since the
/// start of the first iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub start_us: f64,
    pub end_us: f64,
    pub bucket_id: usize,
    pub issue_us: f64,
    pub complete_us: f64,
}

pub const TRACE_HEADER: [&str; 6] = [
    "iter",
    "start_us",
    "end_us",
    "bucket_id",
    "issue_us",
    "complete_us",
];

pub fn trace_rows(traces: &[IterationTrace]) -> Vec<TraceRow> {
    let Some(t0) = traces.first().map(|t| t.start) else {
        return Vec::new();
    };
    let us = |t: Timestamp| (t - t0).as_secs_f64() * 1e6;
    traces
        .iter()
        .flat_map(|t| {
            t.buckets.iter().map(move |b| TraceRow {
                iter: t.iter,
                start_us: us(t.start),
                end_us: us(t.end),
                bucket_id: b.bucket_id,
                issue_us: us(b.issue),
                complete_us: us(b.complete),
            })
        })
        .collect()
}

/// Post-warmup statistics of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub iteration_us: Summary,
    /// Process CPU time over wall time, 1.0 = one core busy.
    pub cpu_share: f64,
}

pub fn run_stats(traces: &[IterationTrace]) -> RunStats {
    let measured: Vec<&IterationTrace> = traces.iter().filter(|t| !t.warmup).collect();
    let times: Vec<f64> = measured.iter().map(|t| t.iteration_time_us()).collect();
    let wall: f64 = times.iter().sum::<f64>() / 1e6;
    let cpu: f64 = measured.iter().map(|t| t.cpu.as_secs_f64()).sum();
    RunStats {
        iteration_us: summarize(&times),
        cpu_share: if wall > 0.0 { cpu / wall } else { 0.0 },
    }
}

/// Runs warmup plus measured iterations of `model` over `session`.
pub fn run_training_loop(
    session: &Session,
    model: &ModelSpec,
    buckets: &[Bucket],
) -> Result<Vec<IterationTrace>, HarnessError> {
    model.validate()?;
    let mut bucket_of_layer = vec![None; model.layers.len()];
    for b in buckets {
        bucket_of_layer[b.ready_after()] = Some(b.id);
    }
    let total = model.warmup_iterations + model.iterations;
    let mut traces = Vec::with_capacity(total);
    for iter in 0..total {
        let cpu0 = process_cpu_time();
        let start = Timestamp::now();
        for l in &model.layers {
            compute_for(micros_f64(l.forward_us));
        }
        let mut inflight: Vec<(usize, OpHandle)> = Vec::with_capacity(buckets.len());
        for i in (0..model.layers.len()).rev() {
            compute_for(micros_f64(model.layers[i].backward_us));
            if let Some(id) = bucket_of_layer[i] {
                let grads = vec![0u8; buckets[id].bytes as usize];
                inflight.push((id, session.allreduce_async(grads, DType::U8)?));
            }
        }
        let mut timings = Vec::with_capacity(inflight.len());
        for (id, h) in &inflight {
            session.wait(h)?;
            timings.push(BucketTiming {
                bucket_id: *id,
                issue: h.issued_at(),
                complete: h.completed_at().expect("waited"),
            });
        }
        compute_for(micros_f64(model.update_us));
        let end = Timestamp::now();
        traces.push(IterationTrace {
            iter,
            warmup: iter < model.warmup_iterations,
            start,
            end,
            buckets: timings,
            cpu: process_cpu_time().saturating_sub(cpu0),
        });
    }
    Ok(traces)
}
