//! The emulator process: accepts the real rank, answers its collectives.
//!
//! A reader thread feeds OPEN_OP and DATA frames into the [`Controller`];
//! replies whose dependencies are met go out immediately, and a poller
//! thread releases the ones held back by the delay model when their time
//! comes. Payloads are never inspected; replies carry zeros.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs::File;
use std::io::BufWriter;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use thiserror::Error;

use super::{Controller, ProtocolError};
use crate::clock::{self, Timestamp};
use crate::config::{ring_order, synthesize_global_topology, JobConfig};
use crate::dag::{build_collective_dag, project_boundary, BoundaryDag, DagError, MsgDesc, OpId};
use crate::delay::{BuiltinDelay, DelayError, DelayModel, OpMeta};
use crate::wire::handshake::{
    decode_open_op, perform_handshake, Hello, HostedRank, PlanEntry, Side, Topo,
};
use crate::wire::{read_header, skip_payload, Frame, FrameHeader, FrameWriter, MsgType, WireError};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Delay(#[from] DelayError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("session failed: {0}")]
    Failed(String),
}

/// Counters of one served session.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionSummary {
    pub real_rank: usize,
    pub ops_completed: usize,
    pub data_in: u64,
    pub data_out: u64,
}

pub struct Emulator {
    cfg: JobConfig,
    real_rank: usize,
    listener: TcpListener,
    delay: Arc<dyn DelayModel>,
    trace: Option<PathBuf>,
}

impl Emulator {
    /// Binds at `listen`, or at the endpoint of the real rank's successor.
    pub fn bind(cfg: JobConfig, listen: Option<&str>) -> Result<Emulator, ServerError> {
        if cfg.real_ranks.len() != 1 {
            return Err(ServerError::Config(format!(
                "the emulator serves exactly one real rank, config lists {}",
                cfg.real_ranks.len()
            )));
        }
        let real_rank = *cfg.real_ranks.iter().next().unwrap();
        let ring = ring_order(&synthesize_global_topology(&cfg));
        let addr = listen
            .map(str::to_string)
            .unwrap_or_else(|| cfg.endpoints[ring.successor(real_rank)].clone());
        let listener = crate::wire::conn::bind(&addr)?;
        let delay = Arc::new(BuiltinDelay(crate::delay::DelayModelParams::from_config(
            &cfg,
        )));
        Ok(Emulator {
            cfg,
            real_rank,
            listener,
            delay,
            trace: std::env::var_os("CEMU_TRACE").map(PathBuf::from),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener")
    }

    pub fn set_delay_model(&mut self, model: Arc<dyn DelayModel>) {
        self.delay = model;
    }

    /// Event log destination; overrides `CEMU_TRACE`.
    pub fn set_trace(&mut self, path: Option<PathBuf>) {
        if path.is_some() {
            self.trace = path;
        }
    }

    /// Serves `sessions` consecutive sessions, or forever when `None`.
    pub fn serve(&self, sessions: Option<usize>) -> Result<Vec<SessionSummary>, ServerError> {
        let mut out = Vec::new();
        while sessions.is_none_or(|k| out.len() < k) {
            out.push(self.serve_one()?);
        }
        Ok(out)
    }

    /// Accepts one real rank and runs until it says BYE.
    pub fn serve_one(&self) -> Result<SessionSummary, ServerError> {
        let (mut stream, _) = self.listener.accept().map_err(WireError::from)?;
        stream.set_nodelay(true).map_err(WireError::from)?;
        clock::tighten_timer_slack();
        let cfg = &self.cfg;
        let ring = ring_order(&synthesize_global_topology(cfg));
        let hosted: Vec<HostedRank> = cfg
            .emulated_ranks()
            .into_iter()
            .map(|r| HostedRank {
                rank: r as u16,
                class: cfg.node_class[r].clone(),
            })
            .collect();
        let hello = Hello::for_config(cfg, ring.successor(self.real_rank), Vec::new());
        let topo = Topo {
            bidirectional: true,
            hosted,
        };
        let timeout = Duration::from_millis(cfg.transport.handshake_timeout_ms);
        let cap = cfg.transport.max_payload_bytes;
        let hs = perform_handshake(&mut stream, Side::Accept, &hello, &topo, timeout, cap)?;
        let writer = FrameWriter::new(stream.try_clone().map_err(WireError::from)?);
        if hs.peer.rank as usize != self.real_rank {
            let reason = format!(
                "rank {} connected, the emulated ring expects real rank {}",
                hs.peer.rank, self.real_rank
            );
            let _ = writer.send_frame(&Frame::error(&reason));
            return Err(ServerError::Config(reason));
        }
        log::info!(
            "emulator: session with rank {} ({} plan entries)",
            self.real_rank,
            hs.peer.plan.len()
        );

        let mut boundaries = HashMap::new();
        let mut max_chunk = 0u64;
        for e in &hs.peer.plan {
            if boundaries.contains_key(e) {
                continue;
            }
            let dag = build_collective_dag(
                e.kind,
                cfg.world_size,
                e.bytes,
                e.elem_size as usize,
                OpId(0),
            )?;
            let b = project_boundary(&dag, &cfg.real_ranks)?;
            max_chunk = b
                .vertices()
                .iter()
                .map(|v| v.msg.size_bytes)
                .fold(max_chunk, u64::max);
            boundaries.insert(*e, Arc::new(b));
        }
        let mut ctrl = Controller::new(cfg.emulator.trace_capacity);
        if let Some(path) = &self.trace {
            match File::create(path) {
                Ok(f) => ctrl.set_event_log(Box::new(BufWriter::new(f))),
                Err(e) => log::warn!("cannot open trace {}: {e}", path.display()),
            }
        }
        let shared = Arc::new(Served {
            state: Mutex::new(State {
                ctrl,
                pending: VecDeque::new(),
                known: HashSet::new(),
                done: false,
                failure: None,
                summary: SessionSummary {
                    real_rank: self.real_rank,
                    ..SessionSummary::default()
                },
            }),
            cv: Condvar::new(),
            writer,
            zeros: vec![0u8; max_chunk as usize],
            plan: hs.peer.plan.clone(),
            boundaries,
            delay: self.delay.clone(),
            world_size: cfg.world_size,
            serialize: cfg.emulator.serialize_ops,
            poll_period: Duration::from_micros(cfg.emulator.poll_period_us),
        });

        let poller = {
            let shared = shared.clone();
            thread::Builder::new()
                .name("cemu-poll".into())
                .spawn(move || shared.poll_loop())
                .expect("spawn poller")
        };
        let result = shared.read_loop(&mut stream.try_clone().map_err(WireError::from)?, cap);
        {
            let mut st = shared.lock();
            st.done = true;
            shared.cv.notify_all();
        }
        let _ = poller.join();
        let mut st = shared.lock();
        st.ctrl.flush_log();
        let failure = st.failure.clone();
        let summary = st.summary.clone();
        drop(st);
        match (result, failure) {
            (Ok(()), None) => {
                let _ = shared.writer.send(FrameHeader::control(MsgType::Bye), &[]);
                let _ = stream.shutdown(Shutdown::Write);
                log::info!("emulator: session done, {} ops", summary.ops_completed);
                Ok(summary)
            }
            (Err(e), _) => {
                let _ = shared.writer.send_frame(&Frame::error(&e.to_string()));
                let _ = stream.shutdown(Shutdown::Both);
                Err(e)
            }
            (Ok(()), Some(reason)) => {
                let _ = shared.writer.send_frame(&Frame::error(&reason));
                let _ = stream.shutdown(Shutdown::Both);
                Err(ServerError::Failed(reason))
            }
        }
    }
}

struct State {
    ctrl: Controller,
    /// Announced operations not yet registered, in arrival order.
    pending: VecDeque<(OpId, PlanEntry, Arc<BoundaryDag>)>,
    known: HashSet<OpId>,
    done: bool,
    failure: Option<String>,
    summary: SessionSummary,
}

struct Served {
    state: Mutex<State>,
    cv: Condvar,
    writer: FrameWriter<TcpStream>,
    zeros: Vec<u8>,
    plan: Vec<PlanEntry>,
    boundaries: HashMap<PlanEntry, Arc<BoundaryDag>>,
    delay: Arc<dyn DelayModel>,
    world_size: usize,
    serialize: bool,
    poll_period: Duration,
}

impl Served {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn register_front(&self, st: &mut State, now: Timestamp) -> Result<(), ServerError> {
        let (op_id, entry, boundary) = st.pending.pop_front().expect("pending op");
        let meta = OpMeta {
            kind: entry.kind,
            world_size: self.world_size,
            bytes: entry.bytes,
        };
        let offsets = self.delay.offsets(&boundary, &meta)?;
        st.ctrl.register_with_id(op_id, boundary, &offsets, now)?;
        Ok(())
    }

    /// Registers pending operations. With serialization on, an operation
    /// starts only once its predecessor completed, as on a single stream.
    fn activate(&self, st: &mut State, now: Timestamp) -> Result<(), ServerError> {
        while !st.pending.is_empty() && (!self.serialize || st.ctrl.live() == 0) {
            self.register_front(st, now)?;
        }
        Ok(())
    }

    /// Releases everything currently releasable and writes it out.
    fn drain(&self, st: &mut State) -> Result<(), ServerError> {
        loop {
            let now = Timestamp::now();
            let released = st.ctrl.poll_round_robin(now);
            let completed = st.ctrl.take_completed();
            st.summary.ops_completed += completed.len();
            if !completed.is_empty() {
                self.activate(st, now)?;
            }
            if released.is_empty() && completed.is_empty() {
                return Ok(());
            }
            for (op_id, rel) in released {
                let m = rel.msg;
                let header = FrameHeader {
                    msg_type: MsgType::Data,
                    op_id: op_id.0,
                    seq: m.step,
                    src: m.src_rank as u16,
                    dst: m.dst_rank as u16,
                    chunk: m.chunk_index as u16,
                    payload_len: 0,
                };
                self.writer
                    .send(header, &self.zeros[..m.size_bytes as usize])
                    .map_err(WireError::from)?;
                st.summary.data_out += 1;
            }
        }
    }

    fn fail(&self, st: &mut State, reason: String) {
        log::error!("emulator: {reason}");
        st.failure.get_or_insert(reason);
        self.cv.notify_all();
    }

    fn poll_loop(&self) {
        let mut st = self.lock();
        loop {
            if st.done || st.failure.is_some() {
                return;
            }
            if let Err(e) = self.drain(&mut st) {
                return self.fail(&mut st, e.to_string());
            }
            let now = Timestamp::now();
            st = match st.ctrl.next_deadline() {
                None => self.cv.wait(st).unwrap_or_else(|p| p.into_inner()),
                Some(d) if d.saturating_since(now) <= self.poll_period => {
                    drop(st);
                    while Timestamp::now() < d {
                        thread::yield_now();
                    }
                    self.lock()
                }
                Some(d) => {
                    let wait = d.saturating_since(now) - self.poll_period;
                    self.cv
                        .wait_timeout(st, wait)
                        .unwrap_or_else(|p| p.into_inner())
                        .0
                }
            };
        }
    }

    fn read_loop(&self, s: &mut TcpStream, cap: u32) -> Result<(), ServerError> {
        let mut payload = Vec::new();
        loop {
            let header = match read_header(s, cap) {
                Ok(h) => h,
                Err(WireError::Closed) => {
                    return Err(ServerError::Failed(
                        "real rank disconnected without BYE".into(),
                    ))
                }
                Err(e) => return Err(e.into()),
            };
            match header.msg_type {
                MsgType::OpenOp => {
                    payload.resize(header.payload_len as usize, 0);
                    std::io::Read::read_exact(s, &mut payload).map_err(WireError::from)?;
                    let open = decode_open_op(&payload)?;
                    let op_id = OpId(header.op_id);
                    let expected = self.plan.get(open.plan_index as usize);
                    if expected != Some(&open.entry) {
                        return Err(ServerError::Failed(format!(
                            "{op_id}: {:?} at plan index {} does not match the declared plan",
                            open.entry, open.plan_index
                        )));
                    }
                    let boundary = self.boundaries[&open.entry].clone();
                    let mut st = self.lock();
                    if !st.known.insert(op_id) {
                        return Err(ProtocolError::DuplicateOpId(op_id).into());
                    }
                    st.pending.push_back((op_id, open.entry, boundary));
                    self.activate(&mut st, Timestamp::now())?;
                    self.drain(&mut st)?;
                    self.cv.notify_all();
                }
                MsgType::Data => {
                    skip_payload(s, header.payload_len)?;
                    let msg = MsgDesc {
                        op_id: OpId(header.op_id),
                        step: header.seq,
                        src_rank: header.src as usize,
                        dst_rank: header.dst as usize,
                        chunk_index: header.chunk as usize,
                        size_bytes: header.payload_len as u64,
                    };
                    let mut st = self.lock();
                    st.summary.data_in += 1;
                    let now = Timestamp::now();
                    if !st.ctrl.is_live(msg.op_id) {
                        // Data can outrun serialization only if the peer
                        // runs operations concurrently; start them now.
                        if let Some(pos) = st.pending.iter().position(|p| p.0 == msg.op_id) {
                            for _ in 0..=pos {
                                self.register_front(&mut st, now)?;
                            }
                        }
                    }
                    st.ctrl.on_receive(&msg, now)?;
                    self.drain(&mut st)?;
                    self.cv.notify_all();
                }
                MsgType::Bye => return Ok(()),
                MsgType::Error => {
                    payload.resize(header.payload_len as usize, 0);
                    std::io::Read::read_exact(s, &mut payload).map_err(WireError::from)?;
                    return Err(ServerError::Failed(format!(
                        "real rank reported: {}",
                        String::from_utf8_lossy(&payload)
                    )));
                }
                other => {
                    return Err(ServerError::Failed(format!(
                        "unexpected {other:?} after handshake"
                    )));
                }
            }
            if let Some(reason) = self.lock().failure.clone() {
                return Err(ServerError::Failed(reason));
            }
        }
    }
}
