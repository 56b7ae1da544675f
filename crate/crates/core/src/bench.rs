//! Measurement primitives shared by the experiment drivers.

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::dag::CollectiveKind;
use crate::report::{fit_slope, summarize, Summary};
use crate::session::{DType, Session, SessionError};
use crate::wire::handshake::PlanEntry;

/// The size ladder of the microbenchmark: 1 KiB to 1 GiB.
pub const TABLE_SIZES: [u64; 8] = [
    1 << 10,
    4 << 10,
    32 << 10,
    256 << 10,
    2 << 20,
    16 << 20,
    128 << 20,
    1 << 30,
];

/// Bytes each rank contributes to a call of nominal `size`. All-gather
/// sizes name the gathered output, so each rank sends `size / n`.
pub fn per_rank_bytes(kind: CollectiveKind, size: u64, n: usize) -> u64 {
    match kind {
        CollectiveKind::AllReduce => size,
        CollectiveKind::AllGather => size / n as u64,
    }
}

/// The collectives a [`run_collbench`] call issues, in order.
pub fn collbench_plan(
    ops: &[CollectiveKind],
    sizes: &[u64],
    n: usize,
    warmup: usize,
    reps: usize,
) -> Vec<PlanEntry> {
    let mut plan = Vec::new();
    for &size in sizes {
        for &kind in ops {
            let entry = PlanEntry {
                kind,
                elem_size: 1,
                bytes: per_rank_bytes(kind, size, n),
            };
            plan.extend(std::iter::repeat_n(entry, warmup + reps));
        }
    }
    plan
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollbenchPoint {
    pub op: CollectiveKind,
    pub size_bytes: u64,
    pub times_us: Vec<f64>,
}

impl CollbenchPoint {
    pub fn summary(&self) -> Summary {
        summarize(&self.times_us)
    }
}

/// Times `reps` blocking calls per (size, op) after `warmup` untimed ones.
pub fn run_collbench(
    session: &Session,
    ops: &[CollectiveKind],
    sizes: &[u64],
    warmup: usize,
    reps: usize,
) -> Result<Vec<CollbenchPoint>, SessionError> {
    let n = session.world_size();
    let mut out = Vec::new();
    for &size in sizes {
        for &kind in ops {
            let bytes = per_rank_bytes(kind, size, n) as usize;
            let mut times = Vec::with_capacity(reps);
            for i in 0..warmup + reps {
                let buf = vec![1u8; bytes];
                let t0 = Timestamp::now();
                let h = match kind {
                    CollectiveKind::AllReduce => session.allreduce_async(buf, DType::U8)?,
                    CollectiveKind::AllGather => session.allgather_async(buf)?,
                };
                session.wait(&h)?;
                if i >= warmup {
                    times.push((Timestamp::now() - t0).as_secs_f64() * 1e6);
                }
            }
            out.push(CollbenchPoint {
                op: kind,
                size_bytes: size,
                times_us: times,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Emulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrobenchResult {
    pub op: CollectiveKind,
    pub size_bytes: u64,
    pub mode: Mode,
    pub mean_us: f64,
    pub stddev_us: f64,
    pub repetitions: usize,
}

pub const MICROBENCH_HEADER: [&str; 6] = [
    "op",
    "size_bytes",
    "mode",
    "mean_us",
    "stddev_us",
    "repetitions",
];

impl MicrobenchResult {
    pub fn from_point(p: &CollbenchPoint, mode: Mode) -> Self {
        let s = p.summary();
        MicrobenchResult {
            op: p.op,
            size_bytes: p.size_bytes,
            mode,
            mean_us: s.mean,
            stddev_us: s.stddev,
            repetitions: s.count,
        }
    }
}

/// Emulated over baseline mean time per (op, size).
pub fn overhead_ratios(rows: &[MicrobenchResult]) -> Vec<(CollectiveKind, u64, f64)> {
    let mut out = Vec::new();
    for b in rows.iter().filter(|r| r.mode == Mode::Baseline) {
        if let Some(e) = rows
            .iter()
            .find(|e| e.mode == Mode::Emulated && e.op == b.op && e.size_bytes == b.size_bytes)
        {
            out.push((b.op, b.size_bytes, e.mean_us / b.mean_us));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub inject_us: f64,
    pub mean_us: f64,
    pub stddev_us: f64,
}

pub const SWEEP_HEADER: [&str; 3] = ["inject_us", "mean_us", "stddev_us"];

/// Least-squares slope of iteration time over injected delay for the
/// points with `inject_us > knee_us`.
pub fn tail_slope(points: &[SweepPoint], knee_us: f64) -> Option<f64> {
    let tail: Vec<&SweepPoint> = points.iter().filter(|p| p.inject_us > knee_us).collect();
    let xs: Vec<f64> = tail.iter().map(|p| p.inject_us).collect();
    let ys: Vec<f64> = tail.iter().map(|p| p.mean_us).collect();
    fit_slope(&xs, &ys)
}

/// One profile of the end-to-end comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub profile: String,
    pub iterations: usize,
    pub baseline_mean_us: f64,
    pub baseline_stddev_us: f64,
    pub emulated_mean_us: f64,
    pub emulated_stddev_us: f64,
    pub rel_error: f64,
    pub baseline_cpu_share: f64,
    pub emulated_cpu_share: f64,
}

pub const FIDELITY_HEADER: [&str; 9] = [
    "profile",
    "iterations",
    "baseline_mean_us",
    "baseline_stddev_us",
    "emulated_mean_us",
    "emulated_stddev_us",
    "rel_error",
    "baseline_cpu_share",
    "emulated_cpu_share",
];

/// Relative error `|emulated − baseline| / baseline`.
pub fn relative_error(baseline: f64, emulated: f64) -> f64 {
    (emulated - baseline).abs() / baseline
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allgather_sizes_name_the_output() {
        assert_eq!(
            per_rank_bytes(CollectiveKind::AllGather, 1 << 20, 4),
            1 << 18
        );
        assert_eq!(
            per_rank_bytes(CollectiveKind::AllReduce, 1 << 20, 4),
            1 << 20
        );
    }

    #[test]
    fn plan_repeats_each_entry() {
        let plan = collbench_plan(
            &[CollectiveKind::AllReduce, CollectiveKind::AllGather],
            &[1024, 4096],
            2,
            1,
            2,
        );
        assert_eq!(plan.len(), 12);
        assert_eq!(plan[3].kind, CollectiveKind::AllGather);
        assert_eq!(plan[3].bytes, 512);
        assert_eq!(plan[6].bytes, 4096);
    }

    #[test]
    fn ratios_pair_modes() {
        let row = |mode, mean_us| MicrobenchResult {
            op: CollectiveKind::AllReduce,
            size_bytes: 8,
            mode,
            mean_us,
            stddev_us: 0.0,
            repetitions: 100,
        };
        let r = overhead_ratios(&[row(Mode::Baseline, 10.0), row(Mode::Emulated, 10.5)]);
        assert_eq!(r.len(), 1);
        assert!((r[0].2 - 1.05).abs() < 1e-12);
    }

    #[test]
    fn slope_ignores_the_head() {
        let pts: Vec<SweepPoint> = [0.0, 1000.0, 4000.0, 6000.0, 8000.0]
            .iter()
            .map(|&d| SweepPoint {
                inject_us: d,
                mean_us: if d > 2000.0 {
                    10_000.0 + 4.0 * d
                } else {
                    18_000.0 + d
                },
                stddev_us: 1.0,
            })
            .collect();
        assert!((tail_slope(&pts, 2000.0).unwrap() - 4.0).abs() < 1e-9);
        assert_eq!(tail_slope(&pts[..1], 2000.0), None);
    }
}
