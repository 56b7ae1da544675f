//! Randomised correctness trials for multi-process rings.
//!
//! Inputs are a pure function of `(seed, trial, rank)`, so a checker can
//! regenerate them and compute the expected results independently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dag::CollectiveKind;
use crate::session::{DType, Session, SessionError};
use crate::wire::handshake::PlanEntry;

/// Rank id used to derive values shared by every rank.
const SHARED: u64 = u64::MAX;

/// Magnitude bound of generated values; sums of up to 2^20 ranks stay
/// far from overflow.
pub const VALUE_BOUND: i64 = 1 << 40;

fn rng(seed: u64, trial: u64, rank: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&trial.to_le_bytes());
    key[16..24].copy_from_slice(&rank.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Element counts of a trial's all-reduce and all-gather inputs.
pub fn trial_lengths(seed: u64, trial: u64, max_len: usize) -> (usize, usize) {
    let mut r = rng(seed, trial, SHARED);
    (r.gen_range(0..=max_len), r.gen_range(0..=max_len))
}

/// `(allreduce input, allgather input)` of one rank.
pub fn trial_inputs(seed: u64, trial: u64, rank: usize, max_len: usize) -> (Vec<i64>, Vec<i64>) {
    let (a, g) = trial_lengths(seed, trial, max_len);
    let mut r = rng(seed, trial, rank as u64);
    let mut draw = |k: usize| -> Vec<i64> {
        (0..k)
            .map(|_| r.gen_range(-VALUE_BOUND..VALUE_BOUND))
            .collect()
    };
    let reduce = draw(a);
    let gather = draw(g);
    (reduce, gather)
}

pub fn verify_plan(seed: u64, trials: u64, max_len: usize) -> Vec<PlanEntry> {
    (0..trials)
        .flat_map(|t| {
            let (a, g) = trial_lengths(seed, t, max_len);
            [
                PlanEntry {
                    kind: CollectiveKind::AllReduce,
                    elem_size: 8,
                    bytes: 8 * a as u64,
                },
                PlanEntry {
                    kind: CollectiveKind::AllGather,
                    elem_size: 1,
                    bytes: 8 * g as u64,
                },
            ]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyRecord {
    pub trial: u64,
    pub op: CollectiveKind,
    pub output: Vec<i64>,
}

fn to_bytes(v: &[i64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn from_bytes(b: &[u8]) -> Vec<i64> {
    b.chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Runs every trial on this rank and returns the outputs.
pub fn run_verify(
    session: &Session,
    seed: u64,
    trials: u64,
    max_len: usize,
) -> Result<Vec<VerifyRecord>, SessionError> {
    let rank = session.rank();
    let mut out = Vec::with_capacity(2 * trials as usize);
    for trial in 0..trials {
        let (reduce, gather) = trial_inputs(seed, trial, rank, max_len);
        let a = session.allreduce_async(to_bytes(&reduce), DType::I64)?;
        // All-gather payloads are opaque bytes; 8-byte values keep them
        // readable in the record.
        let g = session.allgather_async(to_bytes(&gather))?;
        out.push(VerifyRecord {
            trial,
            op: CollectiveKind::AllReduce,
            output: from_bytes(&session.wait(&a)?),
        });
        out.push(VerifyRecord {
            trial,
            op: CollectiveKind::AllGather,
            output: from_bytes(&session.wait(&g)?),
        });
    }
    Ok(out)
}
