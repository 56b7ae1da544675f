//! Communication delay models.
//!
//! A model turns a boundary DAG into one release offset per to-real vertex,
//! measured from the moment the emulator registers the call. The emulator
//! never replies earlier than `registration + offset`, and never before the
//! reply's dependencies are met.

use thiserror::Error;

use crate::config::{DelayKind, JobConfig, LinkParams};
use crate::dag::{BoundaryDag, CollectiveKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DelayError {
    #[error("delay model needs world size ≥ 2, got {0}")]
    InvalidWorldSize(usize),
}

/// `2(n−1)α + 2((n−1)/n)mβ + ((n−1)/n)mγ` in microseconds.
pub fn ring_allreduce_delay(n: usize, m: u64, link: &LinkParams) -> Result<f64, DelayError> {
    if n < 2 {
        return Err(DelayError::InvalidWorldSize(n));
    }
    let nf = n as f64;
    let frac = (nf - 1.0) / nf;
    let m = m as f64;
    Ok(2.0 * (nf - 1.0) * link.alpha_us
        + 2.0 * frac * m * link.beta_us_per_byte
        + frac * m * link.gamma_us_per_byte)
}

/// `(n−1)α + (n−1)·m_per_rank·β` in microseconds.
pub fn ring_allgather_delay(
    n: usize,
    m_per_rank: u64,
    link: &LinkParams,
) -> Result<f64, DelayError> {
    if n < 2 {
        return Err(DelayError::InvalidWorldSize(n));
    }
    let k = n as f64 - 1.0;
    Ok(k * link.alpha_us + k * m_per_rank as f64 * link.beta_us_per_byte)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayModelParams {
    pub kind: DelayKind,
    pub link: LinkParams,
    pub fixed_us: f64,
    /// Stall added before the first reply of every call.
    pub inject_us: f64,
}

impl DelayModelParams {
    pub fn none() -> Self {
        DelayModelParams {
            kind: DelayKind::None,
            link: LinkParams::default(),
            fixed_us: 0.0,
            inject_us: 0.0,
        }
    }

    pub fn from_config(cfg: &JobConfig) -> Self {
        DelayModelParams {
            kind: cfg.delay.kind,
            link: cfg.link,
            fixed_us: cfg.delay.fixed_us,
            inject_us: cfg.delay.inject_us,
        }
    }
}

/// What a delay model knows about the call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpMeta {
    pub kind: CollectiveKind,
    pub world_size: usize,
    /// Buffer size as passed by the caller: the full buffer for all-reduce,
    /// the per-rank contribution for all-gather.
    pub bytes: u64,
}

/// A delay plugin. Implementations return one offset in microseconds per
/// entry of `boundary.to_real()`, in the same order.
pub trait DelayModel: Send + Sync {
    fn offsets(&self, boundary: &BoundaryDag, op: &OpMeta) -> Result<Vec<f64>, DelayError>;
}

/// The built-in `none`, `alpha_beta` and `fixed` models plus injection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuiltinDelay(pub DelayModelParams);

impl DelayModel for BuiltinDelay {
    fn offsets(&self, boundary: &BoundaryDag, op: &OpMeta) -> Result<Vec<f64>, DelayError> {
        release_offsets(boundary, &self.0, op)
    }
}

/// Offsets of the built-in models.
///
/// `alpha_beta` spreads the closed-form call total linearly: the `k`-th of
/// `K` to-real vertices gets `(k+1)/K` of it. `inject_us` is added to the
/// first offset only, and later offsets are raised to keep the vector
/// nondecreasing.
pub fn release_offsets(
    boundary: &BoundaryDag,
    params: &DelayModelParams,
    op: &OpMeta,
) -> Result<Vec<f64>, DelayError> {
    let count = boundary.to_real().len();
    let mut out = match params.kind {
        DelayKind::None => vec![0.0; count],
        DelayKind::Fixed => vec![params.fixed_us.max(0.0); count],
        DelayKind::AlphaBeta => {
            let total = match op.kind {
                CollectiveKind::AllReduce => {
                    ring_allreduce_delay(op.world_size, op.bytes, &params.link)?
                }
                CollectiveKind::AllGather => {
                    ring_allgather_delay(op.world_size, op.bytes, &params.link)?
                }
            };
            (0..count)
                .map(|k| total * (k + 1) as f64 / count as f64)
                .collect()
        }
    };
    if let Some(first) = out.first_mut() {
        *first += params.inject_us.max(0.0);
    }
    for k in 1..out.len() {
        if out[k] < out[k - 1] {
            out[k] = out[k - 1];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::{build_ring_allgather_dag, build_ring_allreduce_dag, project_boundary, OpId};
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * b.abs().max(1.0)
    }

    fn boundary(n: usize, bytes: u64) -> BoundaryDag {
        let dag = build_ring_allreduce_dag(n, bytes, OpId(0)).unwrap();
        project_boundary(&dag, &[0].into_iter().collect()).unwrap()
    }

    #[test]
    fn allreduce_examples() {
        let zero = LinkParams::default();
        assert_eq!(ring_allreduce_delay(7, 1 << 20, &zero).unwrap(), 0.0);
        let a = LinkParams::new(3.0, 1.0, 1.0);
        assert!(close(ring_allreduce_delay(2, 0, &a).unwrap(), 6.0));
        let l = LinkParams::new(10.0, 0.01, 0.001);
        assert!(close(ring_allreduce_delay(4, 4096, &l).unwrap(), 124.512));
        assert!(ring_allreduce_delay(1, 0, &l).is_err());
    }

    #[test]
    fn allgather_examples() {
        let l = LinkParams::new(5.0, 0.02, 0.0);
        assert!(close(ring_allgather_delay(2, 0, &l).unwrap(), 5.0));
        assert!(close(ring_allgather_delay(4, 1024, &l).unwrap(), 76.44));
        assert_eq!(
            ring_allgather_delay(4, 1024, &LinkParams::default()).unwrap(),
            0.0
        );
        assert!(ring_allgather_delay(0, 1, &l).is_err());
    }

    fn meta(n: usize, bytes: u64) -> OpMeta {
        OpMeta {
            kind: CollectiveKind::AllReduce,
            world_size: n,
            bytes,
        }
    }

    #[test]
    fn builtin_offsets() {
        let b = boundary(4, 4096);
        let mut p = DelayModelParams::none();
        assert_eq!(
            release_offsets(&b, &p, &meta(4, 4096)).unwrap(),
            vec![0.0; 6]
        );
        p.kind = DelayKind::Fixed;
        p.fixed_us = 100.0;
        assert_eq!(
            release_offsets(&b, &p, &meta(4, 4096)).unwrap(),
            vec![100.0; 6]
        );
        p.kind = DelayKind::AlphaBeta;
        p.link = LinkParams::new(10.0, 0.01, 0.001);
        let d = 124.512;
        let got = release_offsets(&b, &p, &meta(4, 4096)).unwrap();
        for (k, v) in got.iter().enumerate() {
            assert!(close(*v, d * (k + 1) as f64 / 6.0), "{got:?}");
        }
    }

    #[test]
    fn injection_moves_only_the_first_release() {
        let b = boundary(4, 4096);
        let mut p = DelayModelParams::none();
        p.kind = DelayKind::AlphaBeta;
        p.link = LinkParams::new(10.0, 0.0, 0.0);
        let base = release_offsets(&b, &p, &meta(4, 4096)).unwrap();
        p.inject_us = 5.0;
        let injected = release_offsets(&b, &p, &meta(4, 4096)).unwrap();
        assert!(close(injected[0] - base[0], 5.0));
        assert_eq!(&injected[2..], &base[2..]);
        assert!(injected.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn allgather_uses_its_own_total() {
        let dag = build_ring_allgather_dag(4, 1024, OpId(0)).unwrap();
        let b = project_boundary(&dag, &[0].into_iter().collect()).unwrap();
        let p = DelayModelParams {
            kind: DelayKind::AlphaBeta,
            link: LinkParams::new(5.0, 0.02, 0.0),
            fixed_us: 0.0,
            inject_us: 0.0,
        };
        let op = OpMeta {
            kind: CollectiveKind::AllGather,
            world_size: 4,
            bytes: 1024,
        };
        let got = BuiltinDelay(p).offsets(&b, &op).unwrap();
        assert_eq!(got.len(), 3);
        assert!(close(*got.last().unwrap(), 76.44));
    }

    proptest! {
        #[test]
        fn allreduce_is_monotone(
            n in 2usize..64, m in 0u64..1 << 30,
            a in 0.0f64..100.0, b in 0.0f64..1.0, g in 0.0f64..1.0,
            which in 0usize..5, bump in 0.0f64..10.0,
        ) {
            let l = LinkParams::new(a, b, g);
            let base = ring_allreduce_delay(n, m, &l).unwrap();
            let (mut n2, mut m2, mut l2) = (n, m, l);
            match which {
                0 => n2 += 1 + bump as usize,
                1 => m2 += 1 + (bump * 1000.0) as u64,
                2 => l2.alpha_us += bump,
                3 => l2.beta_us_per_byte += bump,
                _ => l2.gamma_us_per_byte += bump,
            }
            let bumped = ring_allreduce_delay(n2, m2, &l2).unwrap();
            prop_assert!(bumped >= base * (1.0 - 1e-12));
        }

        #[test]
        fn offsets_are_monotone(
            n in 2usize..10, kind in 0u8..3, fixed in 0.0f64..1000.0, inject in 0.0f64..1e4,
            a in 0.0f64..50.0, b in 0.0f64..0.1,
        ) {
            let p = DelayModelParams {
                kind: [DelayKind::None, DelayKind::AlphaBeta, DelayKind::Fixed][kind as usize],
                link: LinkParams::new(a, b, 0.0),
                fixed_us: fixed,
                inject_us: inject,
            };
            let bd = boundary(n, 1 << 16);
            let got = release_offsets(&bd, &p, &meta(n, 1 << 16)).unwrap();
            prop_assert_eq!(got.len(), bd.to_real().len());
            prop_assert!(got.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(got.iter().all(|v| *v >= 0.0));
        }
    }
}
