//! Emulated-environment bookkeeping.
//!
//! Every in-flight collective is an [`OpState`]: two bitmaps over its
//! boundary DAG plus a release time per to-real vertex. The [`Controller`]
//! owns all live operations, hands out releasable messages round-robin and
//! checks incoming messages against the expected sequence.

pub mod server;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use fixedbitset::FixedBitSet;
use thiserror::Error;

use crate::clock::{micros_f64, Timestamp};
use crate::dag::{BoundaryDag, Direction, MsgDesc, OpId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("{op_id}: unexpected message {actual}; expected step {} chunk {} ({})",
        expected.step, expected.chunk_index, expected)]
    Unexpected {
        op_id: OpId,
        expected: MsgDesc,
        actual: MsgDesc,
    },
    #[error("{op_id}: duplicate message {msg}")]
    Duplicate { op_id: OpId, msg: MsgDesc },
    #[error("{op_id}: message {msg} after every expected message arrived")]
    Surplus { op_id: OpId, msg: MsgDesc },
    #[error("message for unknown operation {0}")]
    UnknownOp(OpId),
    #[error("operation {0} registered twice")]
    DuplicateOpId(OpId),
    #[error("operation {0} has an empty boundary")]
    EmptyBoundary(OpId),
    #[error("operation {op_id}: {got} release offsets for {want} to-real messages")]
    OffsetCount {
        op_id: OpId,
        got: usize,
        want: usize,
    },
}

/// A message the engine decided to transmit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Release {
    pub vertex: usize,
    pub msg: MsgDesc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Send,
    Recv,
    Complete,
    Error,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Send => "send",
            EventKind::Recv => "recv",
            EventKind::Complete => "complete",
            EventKind::Error => "error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub at: Timestamp,
    pub op_id: OpId,
    pub kind: EventKind,
    pub step: Option<u32>,
    pub chunk: Option<usize>,
}

impl fmt::Display for TraceEvent {
    /// `timestamp_us op_id direction step chunk`, with `-` for absent fields.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<u64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
        write!(
            f,
            "{} {} {} {} {}",
            self.at.as_micros(),
            self.op_id.0,
            self.kind.as_str(),
            opt(self.step.map(u64::from)),
            opt(self.chunk.map(|c| c as u64))
        )
    }
}

/// Bookkeeping of one collective call.
#[derive(Debug, Clone)]
pub struct OpState {
    op_id: OpId,
    boundary: Arc<BoundaryDag>,
    /// Indexed by position in `boundary.to_real()`.
    sent: FixedBitSet,
    /// Indexed by position in `boundary.from_real()`.
    received: FixedBitSet,
    /// Boundary vertex → position in its direction list.
    slot: Vec<usize>,
    release_not_before: Vec<Timestamp>,
    created_at: Timestamp,
    events: Vec<TraceEvent>,
}

impl OpState {
    /// `offsets_us[k]` delays the `k`-th to-real vertex relative to `now`.
    pub fn new(
        op_id: OpId,
        boundary: Arc<BoundaryDag>,
        offsets_us: &[f64],
        now: Timestamp,
    ) -> Result<OpState, ProtocolError> {
        if boundary.is_empty() {
            return Err(ProtocolError::EmptyBoundary(op_id));
        }
        let to_real = boundary.to_real().len();
        if offsets_us.len() != to_real {
            return Err(ProtocolError::OffsetCount {
                op_id,
                got: offsets_us.len(),
                want: to_real,
            });
        }
        let mut slot = vec![0; boundary.len()];
        for (k, &v) in boundary.to_real().iter().enumerate() {
            slot[v] = k;
        }
        for (k, &v) in boundary.from_real().iter().enumerate() {
            slot[v] = k;
        }
        Ok(OpState {
            op_id,
            sent: FixedBitSet::with_capacity(to_real),
            received: FixedBitSet::with_capacity(boundary.from_real().len()),
            slot,
            release_not_before: offsets_us.iter().map(|&us| now + micros_f64(us)).collect(),
            created_at: now,
            events: Vec::new(),
            boundary,
        })
    }

    pub fn op_id(&self) -> OpId {
        self.op_id
    }

    pub fn boundary(&self) -> &BoundaryDag {
        &self.boundary
    }

    pub fn created_at(&self) -> Timestamp {
        self.created_at
    }

    pub fn release_not_before(&self) -> &[Timestamp] {
        &self.release_not_before
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn is_marked(&self, v: usize) -> bool {
        match self.boundary.vertex(v).direction {
            Direction::ToReal => self.sent.contains(self.slot[v]),
            Direction::FromReal => self.received.contains(self.slot[v]),
        }
    }

    fn ready(&self, v: usize) -> bool {
        self.boundary
            .predecessors(v)
            .iter()
            .all(|&u| self.is_marked(u))
    }

    pub fn sent_count(&self) -> usize {
        self.sent.count_ones(..)
    }

    pub fn received_count(&self) -> usize {
        self.received.count_ones(..)
    }

    /// Both bitmaps full.
    pub fn is_complete(&self) -> bool {
        self.sent.is_full() && self.received.is_full()
    }

    fn record(&mut self, at: Timestamp, kind: EventKind, msg: Option<&MsgDesc>) {
        self.events.push(TraceEvent {
            at,
            op_id: self.op_id,
            kind,
            step: msg.map(|m| m.step),
            chunk: msg.map(|m| m.chunk_index),
        });
    }

    /// Marks and returns the lowest-ordered unsent to-real vertex whose
    /// predecessors are all marked and whose release time has passed.
    pub fn try_send_to_real(&mut self, now: Timestamp) -> Option<Release> {
        let k = (0..self.release_not_before.len()).find(|&k| {
            !self.sent.contains(k)
                && self.release_not_before[k] <= now
                && self.ready(self.boundary.to_real()[k])
        })?;
        let v = self.boundary.to_real()[k];
        debug_assert!(self.ready(v));
        self.sent.insert(k);
        let msg = MsgDesc {
            op_id: self.op_id,
            ..self.boundary.vertex(v).msg
        };
        self.record(now, EventKind::Send, Some(&msg));
        Some(Release { vertex: v, msg })
    }

    /// Earliest time at which some unsent to-real vertex becomes releasable
    /// without further input, if any.
    pub fn next_release_at(&self) -> Option<Timestamp> {
        (0..self.release_not_before.len())
            .filter(|&k| !self.sent.contains(k) && self.ready(self.boundary.to_real()[k]))
            .map(|k| self.release_not_before[k])
            .min()
    }

    /// Accepts `msg` iff it is the next unreceived from-real message of its
    /// source rank.
    pub fn on_receive_from_real(
        &mut self,
        msg: &MsgDesc,
        now: Timestamp,
    ) -> Result<(), ProtocolError> {
        let from_real = self.boundary.from_real();
        let same_src = |k: &usize| self.boundary.vertex(from_real[*k]).msg.src_rank == msg.src_rank;
        let Some(k) = (0..from_real.len())
            .filter(same_src)
            .find(|&k| !self.received.contains(k))
        else {
            return Err(ProtocolError::Surplus {
                op_id: self.op_id,
                msg: *msg,
            });
        };
        let mut expected = self.boundary.vertex(from_real[k]).msg;
        expected.op_id = self.op_id;
        if expected == *msg {
            self.received.insert(k);
            self.record(now, EventKind::Recv, Some(msg));
            return Ok(());
        }
        let already = (0..k).filter(same_src).any(|j| {
            MsgDesc {
                op_id: msg.op_id,
                ..self.boundary.vertex(from_real[j]).msg
            } == *msg
        });
        if already {
            Err(ProtocolError::Duplicate {
                op_id: self.op_id,
                msg: *msg,
            })
        } else {
            Err(ProtocolError::Unexpected {
                op_id: self.op_id,
                expected,
                actual: *msg,
            })
        }
    }

    /// True iff every marked to-real vertex has all predecessors marked.
    pub fn check_safety(&self) -> bool {
        self.boundary
            .to_real()
            .iter()
            .enumerate()
            .all(|(k, &v)| !self.sent.contains(k) || self.ready(v))
    }
}

/// Completed or failed operation retained for analysis.
#[derive(Debug, Clone)]
pub struct OpTrace {
    pub op_id: OpId,
    pub created_at: Timestamp,
    pub finished_at: Timestamp,
    pub failed: bool,
    pub events: Vec<TraceEvent>,
}

/// Outcome of a successful receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Received {
    /// The message completed its operation, which has been retired.
    pub completed: bool,
}

/// Registry of live operations.
pub struct Controller {
    ops: BTreeMap<OpId, OpState>,
    cursor: Option<OpId>,
    next_id: u32,
    traces: VecDeque<OpTrace>,
    trace_capacity: usize,
    errors: Vec<ProtocolError>,
    log: Option<Box<dyn Write + Send>>,
    completed: Vec<OpId>,
}

impl fmt::Debug for Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Controller")
            .field("live", &self.ops.len())
            .field("cursor", &self.cursor)
            .field("errors", &self.errors.len())
            .finish()
    }
}

impl Default for Controller {
    fn default() -> Self {
        Controller::new(1024)
    }
}

impl Controller {
    pub fn new(trace_capacity: usize) -> Controller {
        Controller {
            ops: BTreeMap::new(),
            cursor: None,
            next_id: 0,
            traces: VecDeque::new(),
            trace_capacity,
            errors: Vec::new(),
            log: None,
            completed: Vec::new(),
        }
    }

    /// Writes one line per send, receive, completion and error to `out`.
    pub fn set_event_log(&mut self, out: Box<dyn Write + Send>) {
        self.log = Some(out);
    }

    pub fn flush_log(&mut self) {
        if let Some(out) = self.log.as_mut() {
            let _ = out.flush();
        }
    }

    fn log(&mut self, ev: &TraceEvent) {
        if let Some(out) = self.log.as_mut() {
            if writeln!(out, "{ev}").is_err() {
                log::warn!("event log write failed; disabling it");
                self.log = None;
            }
        }
    }

    /// Registers under the next free id.
    pub fn register(
        &mut self,
        boundary: Arc<BoundaryDag>,
        offsets_us: &[f64],
        now: Timestamp,
    ) -> Result<OpId, ProtocolError> {
        let mut id = OpId(self.next_id);
        while self.ops.contains_key(&id) {
            id = OpId(id.0.wrapping_add(1));
        }
        self.register_with_id(id, boundary, offsets_us, now)?;
        Ok(id)
    }

    /// Registers under an id chosen by the peer.
    pub fn register_with_id(
        &mut self,
        op_id: OpId,
        boundary: Arc<BoundaryDag>,
        offsets_us: &[f64],
        now: Timestamp,
    ) -> Result<(), ProtocolError> {
        if self.ops.contains_key(&op_id) {
            return Err(ProtocolError::DuplicateOpId(op_id));
        }
        let state = OpState::new(op_id, boundary, offsets_us, now)?;
        self.ops.insert(op_id, state);
        self.next_id = self.next_id.max(op_id.0.wrapping_add(1));
        if self.cursor.is_none() {
            self.cursor = Some(op_id);
        }
        Ok(())
    }

    pub fn get(&self, op_id: OpId) -> Option<&OpState> {
        self.ops.get(&op_id)
    }

    pub fn live(&self) -> usize {
        self.ops.len()
    }

    pub fn is_live(&self, op_id: OpId) -> bool {
        self.ops.contains_key(&op_id)
    }

    pub fn traces(&self) -> impl Iterator<Item = &OpTrace> + '_ {
        self.traces.iter()
    }

    /// Protocol errors since the last call.
    pub fn take_errors(&mut self) -> Vec<ProtocolError> {
        std::mem::take(&mut self.errors)
    }

    /// Operations retired as complete since the last call, in retirement order.
    pub fn take_completed(&mut self) -> Vec<OpId> {
        std::mem::take(&mut self.completed)
    }

    fn retire(&mut self, op_id: OpId, now: Timestamp, failed: bool) {
        let Some(mut state) = self.ops.remove(&op_id) else {
            return;
        };
        let kind = if failed {
            EventKind::Error
        } else {
            EventKind::Complete
        };
        state.record(now, kind, None);
        let last = *state.events.last().unwrap();
        self.log(&last);
        if !failed {
            self.completed.push(op_id);
        }
        if self.cursor == Some(op_id) {
            self.cursor = self
                .ops
                .range(op_id..)
                .next()
                .or_else(|| self.ops.iter().next())
                .map(|(&k, _)| k);
        }
        if self.trace_capacity > 0 {
            if self.traces.len() == self.trace_capacity {
                self.traces.pop_front();
            }
            self.traces.push_back(OpTrace {
                op_id,
                created_at: state.created_at,
                finished_at: now,
                failed,
                events: state.events,
            });
        }
    }

    /// Applies an incoming message. A protocol error fails the operation,
    /// which is retired and reported to the error sink.
    pub fn on_receive(&mut self, msg: &MsgDesc, now: Timestamp) -> Result<Received, ProtocolError> {
        let Some(state) = self.ops.get_mut(&msg.op_id) else {
            let err = ProtocolError::UnknownOp(msg.op_id);
            self.errors.push(err.clone());
            return Err(err);
        };
        match state.on_receive_from_real(msg, now) {
            Ok(()) => {
                let ev = *state.events.last().unwrap();
                let completed = state.is_complete();
                self.log(&ev);
                if completed {
                    self.retire(msg.op_id, now, false);
                }
                Ok(Received { completed })
            }
            Err(err) => {
                self.errors.push(err.clone());
                self.retire(msg.op_id, now, true);
                Err(err)
            }
        }
    }

    /// One fair pass: at most one release per live operation, starting at
    /// the cursor. Completed operations are retired.
    pub fn poll_round_robin(&mut self, now: Timestamp) -> Vec<(OpId, Release)> {
        let Some(start) = self.cursor else {
            return Vec::new();
        };
        let order: Vec<OpId> = self
            .ops
            .range(start..)
            .chain(self.ops.range(..start))
            .map(|(&k, _)| k)
            .collect();
        let mut out = Vec::new();
        let mut done = Vec::new();
        for id in &order {
            let state = self.ops.get_mut(id).unwrap();
            if let Some(rel) = state.try_send_to_real(now) {
                let ev = *state.events.last().unwrap();
                out.push((*id, rel));
                self.log(&ev);
            }
            if self.ops[id].is_complete() {
                done.push(*id);
            }
        }
        self.cursor = order.get(1).or(order.first()).copied();
        for id in done {
            self.retire(id, now, false);
        }
        out
    }

    /// Earliest pending release deadline over all live operations.
    pub fn next_deadline(&self) -> Option<Timestamp> {
        self.ops.values().filter_map(OpState::next_release_at).min()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::{build_ring_allreduce_dag, project_boundary};
    use std::collections::BTreeSet;

    fn boundary(n: usize) -> Arc<BoundaryDag> {
        let real: BTreeSet<usize> = [0].into_iter().collect();
        let dag = build_ring_allreduce_dag(n, 64 * n as u64, OpId(0)).unwrap();
        Arc::new(project_boundary(&dag, &real).unwrap())
    }

    fn zeros(b: &BoundaryDag) -> Vec<f64> {
        vec![0.0; b.to_real().len()]
    }

    fn from_msg(b: &BoundaryDag, k: usize, op: OpId) -> MsgDesc {
        let mut m = b.vertex(b.from_real()[k]).msg;
        m.op_id = op;
        m
    }

    fn t(us: u64) -> Timestamp {
        Timestamp::from_micros(us)
    }

    #[test]
    fn registration_ids_and_bitmaps() {
        let mut c = Controller::default();
        let b = boundary(4);
        let a = c.register(b.clone(), &zeros(&b), t(0)).unwrap();
        let d = c.register(b.clone(), &zeros(&b), t(0)).unwrap();
        assert_eq!((a, d), (OpId(0), OpId(1)));
        let s = c.get(a).unwrap();
        assert_eq!(s.boundary().len(), 12);
        assert_eq!((s.sent_count(), s.received_count()), (0, 0));
        assert!(!s.is_complete());
        assert_eq!(
            c.register_with_id(OpId(1), b.clone(), &zeros(&b), t(0)),
            Err(ProtocolError::DuplicateOpId(OpId(1)))
        );
        assert!(matches!(
            c.register(b, &[1.0], t(0)),
            Err(ProtocolError::OffsetCount { .. })
        ));
    }

    #[test]
    fn two_rank_exchange() {
        let b = boundary(2);
        let mut s = OpState::new(OpId(0), b.clone(), &zeros(&b), t(0)).unwrap();
        let first = s.try_send_to_real(t(0)).unwrap();
        assert_eq!(first.msg.step, 0);
        // The second reply waits on the real rank's first message.
        assert_eq!(s.try_send_to_real(t(0)), None);
        s.on_receive_from_real(&from_msg(&b, 0, OpId(0)), t(1))
            .unwrap();
        assert_eq!(s.try_send_to_real(t(1)).unwrap().msg.step, 1);
        s.on_receive_from_real(&from_msg(&b, 1, OpId(0)), t(2))
            .unwrap();
        assert!(s.is_complete());
        assert_eq!(s.try_send_to_real(t(3)), None);
        assert!(s.check_safety());
    }

    #[test]
    fn release_time_gates_sending() {
        let b = boundary(2);
        let mut s = OpState::new(OpId(0), b, &[50.0, 50.0], t(100)).unwrap();
        assert_eq!(s.try_send_to_real(t(149)), None);
        assert_eq!(s.next_release_at(), Some(t(150)));
        assert!(s.try_send_to_real(t(150)).is_some());
    }

    #[test]
    fn receive_errors() {
        let b = boundary(4);
        let mut s = OpState::new(OpId(3), b.clone(), &zeros(&b), t(0)).unwrap();
        let err = s
            .on_receive_from_real(&from_msg(&b, 1, OpId(3)), t(0))
            .unwrap_err();
        assert!(err.to_string().contains("expected step 0"), "{err}");
        s.on_receive_from_real(&from_msg(&b, 0, OpId(3)), t(0))
            .unwrap();
        let dup = s
            .on_receive_from_real(&from_msg(&b, 0, OpId(3)), t(0))
            .unwrap_err();
        assert!(matches!(dup, ProtocolError::Duplicate { .. }), "{dup}");
        let mut wrong_size = from_msg(&b, 1, OpId(3));
        wrong_size.size_bytes += 1;
        assert!(matches!(
            s.on_receive_from_real(&wrong_size, t(0)),
            Err(ProtocolError::Unexpected { .. })
        ));
    }

    #[test]
    fn round_robin_fairness_and_cap() {
        let mut c = Controller::default();
        assert!(c.poll_round_robin(t(0)).is_empty());
        let b = boundary(4);
        let a = c.register(b.clone(), &zeros(&b), t(0)).unwrap();
        let d = c.register(b.clone(), &zeros(&b), t(0)).unwrap();
        let first: Vec<OpId> = c.poll_round_robin(t(0)).iter().map(|r| r.0).collect();
        assert_eq!(first, vec![a, d]);
        // The cursor advanced, so the other operation goes first now.
        let second: Vec<OpId> = c.poll_round_robin(t(0)).iter().map(|r| r.0).collect();
        assert_eq!(second, vec![d, a]);
        let a_steps: Vec<u32> = c
            .get(a)
            .unwrap()
            .events()
            .iter()
            .filter_map(|e| e.step)
            .collect();
        assert_eq!(a_steps, vec![0, 1]);
    }

    #[test]
    fn full_exchange_retires_into_trace() {
        let mut c = Controller::new(2);
        let b = boundary(3);
        for _ in 0..3 {
            let id = c.register(b.clone(), &zeros(&b), t(0)).unwrap();
            let mut next_from = 0;
            while c.is_live(id) {
                c.poll_round_robin(t(0));
                if next_from < b.from_real().len() {
                    c.on_receive(&from_msg(&b, next_from, id), t(0)).unwrap();
                    next_from += 1;
                }
            }
            assert_eq!(next_from, b.from_real().len());
        }
        let traces: Vec<OpId> = c.traces().map(|tr| tr.op_id).collect();
        assert_eq!(traces, vec![OpId(1), OpId(2)]);
        assert_eq!(c.take_completed().len(), 3);
        assert!(c.take_errors().is_empty());
    }

    #[test]
    fn protocol_error_fails_the_operation() {
        let mut c = Controller::default();
        let b = boundary(3);
        let id = c.register(b.clone(), &zeros(&b), t(0)).unwrap();
        assert!(c.on_receive(&from_msg(&b, 2, id), t(0)).is_err());
        assert!(!c.is_live(id));
        assert!(c.traces().next().unwrap().failed);
        assert_eq!(c.take_errors().len(), 1);
        assert_eq!(
            c.on_receive(&from_msg(&b, 0, id), t(0)),
            Err(ProtocolError::UnknownOp(id))
        );
    }

    #[test]
    fn event_log_lines() {
        #[derive(Clone, Default)]
        struct Shared(Arc<std::sync::Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
                self.0.lock().unwrap().extend_from_slice(buf);
                Ok(buf.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let sink = Shared::default();
        let mut c = Controller::default();
        c.set_event_log(Box::new(sink.clone()));
        let b = boundary(2);
        let id = c.register(b.clone(), &zeros(&b), t(5)).unwrap();
        c.poll_round_robin(t(7));
        c.on_receive(&from_msg(&b, 0, id), t(9)).unwrap();
        let text = String::from_utf8(sink.0.lock().unwrap().clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, vec!["7 0 send 0 1", "9 0 recv 0 0"]);
    }
}
