//! Worker-side collective session.
//!
//! A session owns two connections: one to the ring successor (outgoing
//! DATA) and one from the predecessor (incoming DATA). When the successor
//! also hosts the predecessor, as the emulator does, one connection serves
//! both directions. Collective calls return immediately; a FIFO executor
//! thread runs the ring schedule and a reader thread files incoming chunks.

use std::cell::Cell;
use std::collections::HashMap;
use std::io::Read;
use std::marker::PhantomData;
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;

use crate::clock::Timestamp;
use crate::config::{ring_order, synthesize_global_topology, JobConfig};
use crate::dag::{ring_steps, ChunkLayout, CollectiveKind, DagError, OpId};
use crate::wire::conn::{bind, dial, Acceptor};
use crate::wire::handshake::{
    encode_open_op, perform_handshake, Hello, HostedRank, OpenOp, PlanEntry, Side, Topo,
};
use crate::wire::{read_header, skip_payload, Frame, FrameHeader, FrameWriter, MsgType, WireError};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error("collective failed: {0}")]
    Failed(String),
    #[error("usage: {0}")]
    Usage(String),
}

/// Element type used when reducing. Sums wrap on overflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    U8,
    I64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::I64 => 8,
        }
    }

    pub fn from_size(size: u8) -> Option<DType> {
        match size {
            1 => Some(DType::U8),
            8 => Some(DType::I64),
            _ => None,
        }
    }
}

/// `acc += incoming`, element-wise.
pub fn reduce_into(dtype: DType, acc: &mut [u8], incoming: &[u8]) {
    debug_assert_eq!(acc.len(), incoming.len());
    match dtype {
        DType::U8 => {
            for (a, b) in acc.iter_mut().zip(incoming) {
                *a = a.wrapping_add(*b);
            }
        }
        DType::I64 => {
            for (a, b) in acc.chunks_exact_mut(8).zip(incoming.chunks_exact(8)) {
                let x = i64::from_le_bytes(a.try_into().unwrap());
                let y = i64::from_le_bytes(b.try_into().unwrap());
                a.copy_from_slice(&x.wrapping_add(y).to_le_bytes());
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SessionOptions {
    /// Overrides the rank's own endpoint.
    pub listen: Option<String>,
    /// Overrides the successor's endpoint.
    pub connect: Option<String>,
    /// Collectives of one iteration; call `i` must match `plan[i % len]`.
    pub plan: Vec<PlanEntry>,
}

#[derive(Default)]
struct Inbox {
    chunks: HashMap<(u32, u32), (u16, Vec<u8>)>,
    error: Option<String>,
    closed: bool,
}

struct Shared {
    inbox: Mutex<Inbox>,
    cv: Condvar,
}

impl Shared {
    fn fail(&self, reason: String) {
        let mut ib = self.inbox.lock().unwrap();
        ib.error.get_or_insert(reason);
        self.cv.notify_all();
    }

    fn take(&self, op: u32, seq: u32) -> Result<(u16, Vec<u8>), String> {
        let mut ib = self.inbox.lock().unwrap();
        loop {
            if let Some(v) = ib.chunks.remove(&(op, seq)) {
                return Ok(v);
            }
            if let Some(e) = &ib.error {
                return Err(e.clone());
            }
            if ib.closed {
                return Err("peer closed the session".into());
            }
            ib = self.cv.wait(ib).unwrap();
        }
    }
}

type OpResult = Result<Arc<Vec<u8>>, String>;

#[derive(Default)]
struct OpSlot {
    result: Mutex<Option<(OpResult, Timestamp)>>,
    cv: Condvar,
}

impl OpSlot {
    fn complete(&self, r: OpResult) {
        *self.result.lock().unwrap() = Some((r, Timestamp::now()));
        self.cv.notify_all();
    }
}

/// Completion handle of an asynchronous collective. Not shareable across
/// threads.
pub struct OpHandle {
    op_id: OpId,
    session: u64,
    issued_at: Timestamp,
    slot: Arc<OpSlot>,
    _not_sync: PhantomData<Cell<()>>,
}

impl OpHandle {
    pub fn op_id(&self) -> OpId {
        self.op_id
    }

    pub fn issued_at(&self) -> Timestamp {
        self.issued_at
    }

    pub fn is_done(&self) -> bool {
        self.slot.result.lock().unwrap().is_some()
    }

    /// When the executor finished the operation.
    pub fn completed_at(&self) -> Option<Timestamp> {
        self.slot.result.lock().unwrap().as_ref().map(|r| r.1)
    }
}

struct Job {
    op_id: u32,
    kind: CollectiveKind,
    dtype: DType,
    buf: Vec<u8>,
    slot: Arc<OpSlot>,
}

static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

pub struct Session {
    id: u64,
    rank: usize,
    world_size: usize,
    plan: Vec<PlanEntry>,
    issued: Cell<u32>,
    writer: FrameWriter<TcpStream>,
    out_stream: TcpStream,
    in_stream: TcpStream,
    jobs: Option<mpsc::Sender<Job>>,
    executor: Option<JoinHandle<()>>,
    reader: Option<JoinHandle<()>>,
    peer_is_emulator: bool,
}

impl Session {
    /// Dials the successor, accepts the predecessor, and starts the
    /// background threads.
    pub fn connect(
        cfg: &JobConfig,
        rank: usize,
        opts: SessionOptions,
    ) -> Result<Session, SessionError> {
        let n = cfg.world_size;
        if rank >= n {
            return Err(SessionError::Config(format!(
                "rank {rank} outside world of {n}"
            )));
        }
        for e in &opts.plan {
            if DType::from_size(e.elem_size).is_none() {
                return Err(SessionError::Usage(format!(
                    "unsupported element size {}",
                    e.elem_size
                )));
            }
        }
        let ring = ring_order(&synthesize_global_topology(cfg));
        let succ = ring.successor(rank);
        let pred = ring.predecessor(rank);
        let listen = opts
            .listen
            .clone()
            .unwrap_or_else(|| cfg.endpoints[rank].clone());
        let connect = opts
            .connect
            .clone()
            .unwrap_or_else(|| cfg.endpoints[succ].clone());
        let timeout = Duration::from_millis(cfg.transport.handshake_timeout_ms);
        let cap = cfg.transport.max_payload_bytes;

        let hello = Hello::for_config(cfg, rank, opts.plan.clone());
        let topo = Topo {
            bidirectional: false,
            hosted: vec![HostedRank {
                rank: rank as u16,
                class: cfg.node_class[rank].clone(),
            }],
        };
        let listener = bind(&listen)?;
        let acceptor = Acceptor::spawn(listener, hello.clone(), topo.clone(), timeout, cap);

        let dialed = dial(&connect, timeout).and_then(|mut s| {
            let out = perform_handshake(&mut s, Side::Dial, &hello, &topo, timeout, cap)?;
            Ok((s, out))
        });
        let (out_stream, out) = match dialed {
            Ok(v) => v,
            Err(e) => {
                acceptor.cancel();
                return Err(e.into());
            }
        };
        if !(out.peer.rank as usize == succ || out.peer_topo.hosts(succ)) {
            acceptor.cancel();
            return Err(SessionError::Config(format!(
                "{connect} answered as rank {}, expected successor {succ}",
                out.peer.rank
            )));
        }
        let peer_is_emulator = out.peer_topo.bidirectional && out.peer_topo.hosts(pred);
        let in_stream = if peer_is_emulator {
            acceptor.cancel();
            out_stream.try_clone().map_err(WireError::from)?
        } else {
            let (s, inbound) = acceptor.join()?;
            if !(inbound.peer.rank as usize == pred || inbound.peer_topo.hosts(pred)) {
                return Err(SessionError::Config(format!(
                    "inbound peer is rank {}, expected predecessor {pred}",
                    inbound.peer.rank
                )));
            }
            s
        };
        log::debug!(
            "rank {rank}: session up (succ {succ} at {connect}, pred {pred}{})",
            if peer_is_emulator { ", emulated" } else { "" }
        );

        let shared = Arc::new(Shared {
            inbox: Mutex::new(Inbox::default()),
            cv: Condvar::new(),
        });
        let reader = {
            let shared = shared.clone();
            let mut s = in_stream.try_clone().map_err(WireError::from)?;
            thread::Builder::new()
                .name(format!("cemu-rx{rank}"))
                .spawn(move || reader_loop(&mut s, &shared, rank, pred, cap))
                .expect("spawn reader")
        };
        let writer = FrameWriter::new(out_stream.try_clone().map_err(WireError::from)?);
        let (tx, rx) = mpsc::channel::<Job>();
        let executor = {
            let writer = writer.clone();
            thread::Builder::new()
                .name(format!("cemu-exec{rank}"))
                .spawn(move || {
                    let mut sticky: Option<String> = None;
                    for job in rx {
                        let slot = job.slot.clone();
                        let r = match &sticky {
                            Some(e) => Err(e.clone()),
                            None => run_ring(job, rank, n, succ, &writer, &shared),
                        };
                        if let Err(e) = &r {
                            sticky.get_or_insert_with(|| e.clone());
                        }
                        slot.complete(r.map(Arc::new));
                    }
                })
                .expect("spawn executor")
        };
        Ok(Session {
            id: NEXT_SESSION.fetch_add(1, Ordering::Relaxed),
            rank,
            world_size: n,
            plan: opts.plan,
            issued: Cell::new(0),
            writer,
            out_stream,
            in_stream,
            jobs: Some(tx),
            executor: Some(executor),
            reader: Some(reader),
            peer_is_emulator,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    /// True when the successor is an emulator hosting every other rank.
    pub fn peer_is_emulator(&self) -> bool {
        self.peer_is_emulator
    }

    fn issue(
        &self,
        kind: CollectiveKind,
        dtype: DType,
        buf: Vec<u8>,
    ) -> Result<OpHandle, SessionError> {
        let op = self.issued.get();
        let entry = PlanEntry {
            kind,
            elem_size: dtype.size() as u8,
            bytes: buf.len() as u64,
        };
        let plan_index = if self.plan.is_empty() {
            0
        } else {
            let i = op as usize % self.plan.len();
            if self.plan[i] != entry {
                return Err(SessionError::Usage(format!(
                    "call {op} is {entry:?} but the declared plan expects {:?}",
                    self.plan[i]
                )));
            }
            i as u32
        };
        match kind {
            CollectiveKind::AllReduce => {
                ChunkLayout::for_allreduce(self.world_size, buf.len() as u64, dtype.size())?;
            }
            CollectiveKind::AllGather => {
                ChunkLayout::for_allgather(self.world_size, buf.len() as u64)?;
            }
        }
        let open = Frame::control(
            MsgType::OpenOp,
            encode_open_op(&OpenOp { entry, plan_index }),
        );
        let header = FrameHeader {
            op_id: op,
            src: self.rank as u16,
            ..open.header
        };
        self.writer
            .send(header, &open.payload)
            .map_err(WireError::from)?;
        let slot = Arc::new(OpSlot::default());
        let job = Job {
            op_id: op,
            kind,
            dtype,
            buf,
            slot: slot.clone(),
        };
        self.jobs
            .as_ref()
            .expect("session open")
            .send(job)
            .map_err(|_| SessionError::Failed("executor stopped".into()))?;
        self.issued.set(op.wrapping_add(1));
        Ok(OpHandle {
            op_id: OpId(op),
            session: self.id,
            issued_at: Timestamp::now(),
            slot,
            _not_sync: PhantomData,
        })
    }

    /// Starts a sum all-reduce over `buf`.
    pub fn allreduce_async(&self, buf: Vec<u8>, dtype: DType) -> Result<OpHandle, SessionError> {
        self.issue(CollectiveKind::AllReduce, dtype, buf)
    }

    /// Starts an all-gather of this rank's `buf`. The result holds every
    /// rank's contribution in rank order.
    pub fn allgather_async(&self, buf: Vec<u8>) -> Result<OpHandle, SessionError> {
        self.issue(CollectiveKind::AllGather, DType::U8, buf)
    }

    /// Blocks until the operation completes. Waiting again returns the same
    /// result.
    pub fn wait(&self, h: &OpHandle) -> Result<Arc<Vec<u8>>, SessionError> {
        if h.session != self.id {
            return Err(SessionError::Usage(format!(
                "{} belongs to another session",
                h.op_id
            )));
        }
        let mut r = h.slot.result.lock().unwrap();
        while r.is_none() {
            r = h.slot.cv.wait(r).unwrap();
        }
        r.as_ref().unwrap().0.clone().map_err(SessionError::Failed)
    }

    /// Drains outstanding operations and ends the session with BYE.
    pub fn close(mut self) -> Result<(), SessionError> {
        self.stop_executor();
        let bye = self.writer.send(FrameHeader::control(MsgType::Bye), &[]);
        let _ = self.out_stream.shutdown(Shutdown::Write);
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
        bye.map_err(WireError::from)?;
        Ok(())
    }

    fn stop_executor(&mut self) {
        self.jobs.take();
        if let Some(e) = self.executor.take() {
            let _ = e.join();
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if self.reader.is_none() {
            return;
        }
        self.stop_executor();
        let _ = self.out_stream.shutdown(Shutdown::Both);
        let _ = self.in_stream.shutdown(Shutdown::Both);
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}

fn reader_loop(s: &mut TcpStream, shared: &Shared, rank: usize, pred: usize, cap: u32) {
    loop {
        let header = match read_header(s, cap) {
            Ok(h) => h,
            Err(WireError::Closed) => {
                let mut ib = shared.inbox.lock().unwrap();
                ib.closed = true;
                shared.cv.notify_all();
                return;
            }
            Err(e) => return shared.fail(format!("receive: {e}")),
        };
        match header.msg_type {
            MsgType::Data => {
                if header.src as usize != pred || header.dst as usize != rank {
                    return shared.fail(format!(
                        "DATA {}→{} on the link {pred}→{rank}",
                        header.src, header.dst
                    ));
                }
                let mut payload = vec![0u8; header.payload_len as usize];
                if let Err(e) = s.read_exact(&mut payload) {
                    return shared.fail(format!("receive: {e}"));
                }
                let mut ib = shared.inbox.lock().unwrap();
                let key = (header.op_id, header.seq);
                if ib.chunks.contains_key(&key) {
                    drop(ib);
                    return shared.fail(format!("duplicate DATA op {} seq {}", key.0, key.1));
                }
                ib.chunks.insert(key, (header.chunk, payload));
                shared.cv.notify_all();
            }
            MsgType::OpenOp => {
                if let Err(e) = skip_payload(s, header.payload_len) {
                    return shared.fail(format!("receive: {e}"));
                }
            }
            MsgType::Error => {
                let mut payload = vec![0u8; header.payload_len as usize];
                let reason = match s.read_exact(&mut payload) {
                    Ok(()) => String::from_utf8_lossy(&payload).into_owned(),
                    Err(e) => e.to_string(),
                };
                return shared.fail(format!("peer error: {reason}"));
            }
            MsgType::Bye => {
                let mut ib = shared.inbox.lock().unwrap();
                ib.closed = true;
                shared.cv.notify_all();
                return;
            }
            other => return shared.fail(format!("unexpected {other:?} after handshake")),
        }
    }
}

fn run_ring(
    job: Job,
    rank: usize,
    n: usize,
    succ: usize,
    writer: &FrameWriter<TcpStream>,
    shared: &Shared,
) -> Result<Vec<u8>, String> {
    let (layout, mut buf) = match job.kind {
        CollectiveKind::AllReduce => {
            let layout = ChunkLayout::for_allreduce(n, job.buf.len() as u64, job.dtype.size())
                .map_err(|e| e.to_string())?;
            (layout, job.buf)
        }
        CollectiveKind::AllGather => {
            let per = job.buf.len() as u64;
            let layout = ChunkLayout::for_allgather(n, per).map_err(|e| e.to_string())?;
            let mut out = vec![0u8; layout.total() as usize];
            out[layout.range(rank)].copy_from_slice(&job.buf);
            (layout, out)
        }
    };
    for st in ring_steps(job.kind, n, rank) {
        let header = FrameHeader {
            msg_type: MsgType::Data,
            op_id: job.op_id,
            seq: st.step,
            src: rank as u16,
            dst: succ as u16,
            chunk: st.send_chunk as u16,
            payload_len: 0,
        };
        writer
            .send(header, &buf[layout.range(st.send_chunk)])
            .map_err(|e| format!("send: {e}"))?;
        let (chunk, data) = shared.take(job.op_id, st.step)?;
        if chunk as usize != st.recv_chunk || data.len() as u64 != layout.len(st.recv_chunk) {
            let reason = format!(
                "op {} step {}: got chunk {} ({} B), expected chunk {} ({} B)",
                job.op_id,
                st.step,
                chunk,
                data.len(),
                st.recv_chunk,
                layout.len(st.recv_chunk)
            );
            shared.fail(reason.clone());
            return Err(reason);
        }
        let dst = &mut buf[layout.range(st.recv_chunk)];
        if st.reduce {
            reduce_into(job.dtype, dst, &data);
        } else {
            dst.copy_from_slice(&data);
        }
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduction_wraps() {
        let mut a = vec![250u8, 1];
        reduce_into(DType::U8, &mut a, &[10, 2]);
        assert_eq!(a, vec![4, 3]);
        let mut a: Vec<u8> = [i64::MAX, -5]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let b: Vec<u8> = [1i64, 7].iter().flat_map(|v| v.to_le_bytes()).collect();
        reduce_into(DType::I64, &mut a, &b);
        let got: Vec<i64> = a
            .chunks(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(got, vec![i64::MIN, 2]);
    }

    #[test]
    fn dtype_sizes() {
        assert_eq!(DType::from_size(8), Some(DType::I64));
        assert_eq!(DType::from_size(4), None);
        assert_eq!(DType::U8.size(), 1);
    }
}
