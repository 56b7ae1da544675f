//! Message DAGs for ring collectives and their projection onto the
//! real/emulated boundary.
//!
//! A [`CollectiveDag`] holds one send and one recv task per message of a ring
//! schedule. Edges are data dependencies: a rank forwards a chunk only after it
//! has received it, and a recv completes only after the matching send.
//! [`project_boundary`] keeps the tasks whose message crosses the boundary and
//! collapses every other path into transitive edges.

use std::collections::{BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::ops::Range;

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct OpId(pub u32);

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "op#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollectiveKind {
    AllReduce,
    AllGather,
}

impl CollectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CollectiveKind::AllReduce => "allreduce",
            CollectiveKind::AllGather => "allgather",
        }
    }

    /// Number of schedule positions per rank.
    pub fn steps(self, n: usize) -> usize {
        match self {
            CollectiveKind::AllReduce => 2 * (n - 1),
            CollectiveKind::AllGather => n - 1,
        }
    }

    pub fn to_wire(self) -> u8 {
        match self {
            CollectiveKind::AllReduce => 1,
            CollectiveKind::AllGather => 2,
        }
    }

    pub fn from_wire(v: u8) -> Option<Self> {
        match v {
            1 => Some(CollectiveKind::AllReduce),
            2 => Some(CollectiveKind::AllGather),
            _ => None,
        }
    }
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DagError {
    #[error("world size must be ≥ 2, got {0}")]
    InvalidWorldSize(usize),
    #[error("world size {0} exceeds the 16-bit rank space")]
    WorldTooLarge(usize),
    #[error("payload of {total} bytes is not a multiple of the element size {elem}")]
    Misaligned { total: u64, elem: usize },
    #[error("chunk of {0} bytes does not fit a 32-bit payload length")]
    ChunkTooLarge(u64),
    #[error("invalid real set: {0}")]
    InvalidRealSet(String),
}

/// One point-to-point message of a collective call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MsgDesc {
    pub op_id: OpId,
    pub step: u32,
    pub src_rank: usize,
    pub dst_rank: usize,
    pub chunk_index: usize,
    pub size_bytes: u64,
}

impl fmt::Display for MsgDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} step {} {}→{} chunk {} ({} B)",
            self.op_id, self.step, self.src_rank, self.dst_rank, self.chunk_index, self.size_bytes
        )
    }
}

/// Partition of a collective buffer into `n` chunks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkLayout {
    offsets: Vec<u64>,
}

impl ChunkLayout {
    /// `n` chunks of `⌊elems/n⌋` elements; the last chunk absorbs the remainder.
    pub fn for_allreduce(n: usize, total_bytes: u64, elem_size: usize) -> Result<Self, DagError> {
        check_world(n)?;
        let elem = elem_size.max(1) as u64;
        if !total_bytes.is_multiple_of(elem) {
            return Err(DagError::Misaligned {
                total: total_bytes,
                elem: elem_size,
            });
        }
        let elems = total_bytes / elem;
        let base = elems / n as u64;
        let mut offsets: Vec<u64> = (0..n as u64).map(|c| c * base * elem).collect();
        offsets.push(total_bytes);
        let layout = ChunkLayout { offsets };
        layout.check_sizes()?;
        Ok(layout)
    }

    /// One chunk per rank, each holding that rank's contribution.
    pub fn for_allgather(n: usize, bytes_per_rank: u64) -> Result<Self, DagError> {
        check_world(n)?;
        let offsets = (0..=n as u64).map(|c| c * bytes_per_rank).collect();
        let layout = ChunkLayout { offsets };
        layout.check_sizes()?;
        Ok(layout)
    }

    fn check_sizes(&self) -> Result<(), DagError> {
        for c in 0..self.chunks() {
            let len = self.len(c);
            if len > u32::MAX as u64 {
                return Err(DagError::ChunkTooLarge(len));
            }
        }
        Ok(())
    }

    pub fn chunks(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn len(&self, chunk: usize) -> u64 {
        self.offsets[chunk + 1] - self.offsets[chunk]
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn total(&self) -> u64 {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, chunk: usize) -> Range<usize> {
        self.offsets[chunk] as usize..self.offsets[chunk + 1] as usize
    }
}

/// What a rank does at one schedule position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingStep {
    pub step: u32,
    pub send_chunk: usize,
    pub recv_chunk: usize,
    /// Reduce-scatter positions accumulate into the received chunk; the
    /// gather positions overwrite it.
    pub reduce: bool,
}

/// The per-rank ring schedule.
///
/// All-reduce: reduce-scatter positions `s = 0..n−2` send chunk `(r−s) mod n`
/// and receive `(r−s−1) mod n`; gather positions `t = 0..n−2` send
/// `(r+1−t) mod n` and receive `(r−t) mod n`. All-gather uses `n−1` positions
/// sending `(r−t) mod n` and receiving `(r−t−1) mod n`.
pub fn ring_steps(kind: CollectiveKind, n: usize, rank: usize) -> Vec<RingStep> {
    let m = |x: isize| x.rem_euclid(n as isize) as usize;
    let r = rank as isize;
    match kind {
        CollectiveKind::AllReduce => {
            let scatter = (0..n as isize - 1).map(|s| RingStep {
                step: s as u32,
                send_chunk: m(r - s),
                recv_chunk: m(r - s - 1),
                reduce: true,
            });
            let gather = (0..n as isize - 1).map(|t| RingStep {
                step: (n as isize - 1 + t) as u32,
                send_chunk: m(r + 1 - t),
                recv_chunk: m(r - t),
                reduce: false,
            });
            scatter.chain(gather).collect()
        }
        CollectiveKind::AllGather => (0..n as isize - 1)
            .map(|t| RingStep {
                step: t as u32,
                send_chunk: m(r - t),
                recv_chunk: m(r - t - 1),
                reduce: false,
            })
            .collect(),
    }
}

fn check_world(n: usize) -> Result<(), DagError> {
    if n < 2 {
        return Err(DagError::InvalidWorldSize(n));
    }
    if n > crate::config::MAX_WORLD_SIZE {
        return Err(DagError::WorldTooLarge(n));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Send,
    Recv,
}

impl TaskKind {
    pub fn flipped(self) -> TaskKind {
        match self {
            TaskKind::Send => TaskKind::Recv,
            TaskKind::Recv => TaskKind::Send,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            TaskKind::Send => "send",
            TaskKind::Recv => "recv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Task {
    pub kind: TaskKind,
    pub msg: MsgDesc,
    pub owner: usize,
}

#[derive(Debug, Clone)]
pub struct CollectiveDag {
    kind: Option<CollectiveKind>,
    world_size: usize,
    tasks: Vec<Task>,
    edges: Vec<(usize, usize)>,
    succ: Vec<Vec<usize>>,
}

impl CollectiveDag {
    /// Assembles a graph from raw parts without any structural checks.
    pub fn from_parts(world_size: usize, tasks: Vec<Task>, edges: Vec<(usize, usize)>) -> Self {
        let mut succ = vec![Vec::new(); tasks.len()];
        for &(u, v) in &edges {
            succ[u].push(v);
        }
        CollectiveDag {
            kind: None,
            world_size,
            tasks,
            edges,
            succ,
        }
    }

    pub fn kind(&self) -> Option<CollectiveKind> {
        self.kind
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn successors(&self, v: usize) -> &[usize] {
        &self.succ[v]
    }

    pub fn tasks_of(&self, rank: usize) -> impl Iterator<Item = &Task> + '_ {
        self.tasks.iter().filter(move |t| t.owner == rank)
    }

    /// Text dump: a header, one `v` line per task, then one `e` line per edge.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let kind = self.kind.map(|k| k.as_str()).unwrap_or("custom");
        let _ = writeln!(out, "# cemu-dag v1 kind={kind} n={}", self.world_size);
        let _ = writeln!(out, "# v id op_id kind step src dst chunk size");
        for (i, t) in self.tasks.iter().enumerate() {
            let m = &t.msg;
            let _ = writeln!(
                out,
                "v {i} {} {} {} {} {} {} {}",
                m.op_id.0,
                t.kind.as_str(),
                m.step,
                m.src_rank,
                m.dst_rank,
                m.chunk_index,
                m.size_bytes
            );
        }
        let _ = writeln!(out, "# e from to");
        for (u, v) in &self.edges {
            let _ = writeln!(out, "e {u} {v}");
        }
        out
    }
}

fn build_ring_dag(
    kind: CollectiveKind,
    n: usize,
    layout: &ChunkLayout,
    op_id: OpId,
) -> CollectiveDag {
    let steps = kind.steps(n);
    // Task index of (rank, position, kind): rank-major, send before recv.
    let index = |rank: usize, pos: usize, tk: TaskKind| {
        (rank * steps + pos) * 2 + usize::from(tk == TaskKind::Recv)
    };
    let mut tasks = Vec::with_capacity(n * steps * 2);
    for rank in 0..n {
        let succ = (rank + 1) % n;
        let pred = (rank + n - 1) % n;
        for st in ring_steps(kind, n, rank) {
            tasks.push(Task {
                kind: TaskKind::Send,
                owner: rank,
                msg: MsgDesc {
                    op_id,
                    step: st.step,
                    src_rank: rank,
                    dst_rank: succ,
                    chunk_index: st.send_chunk,
                    size_bytes: layout.len(st.send_chunk),
                },
            });
            tasks.push(Task {
                kind: TaskKind::Recv,
                owner: rank,
                msg: MsgDesc {
                    op_id,
                    step: st.step,
                    src_rank: pred,
                    dst_rank: rank,
                    chunk_index: st.recv_chunk,
                    size_bytes: layout.len(st.recv_chunk),
                },
            });
        }
    }
    let mut edges = Vec::with_capacity(n * steps * 2);
    for rank in 0..n {
        let succ = (rank + 1) % n;
        for pos in 0..steps {
            edges.push((
                index(rank, pos, TaskKind::Send),
                index(succ, pos, TaskKind::Recv),
            ));
            if pos + 1 < steps {
                edges.push((
                    index(rank, pos, TaskKind::Recv),
                    index(rank, pos + 1, TaskKind::Send),
                ));
            }
        }
    }
    let mut dag = CollectiveDag::from_parts(n, tasks, edges);
    dag.kind = Some(kind);
    dag
}

/// Ring all-reduce over a byte buffer of `total_bytes`.
pub fn build_ring_allreduce_dag(
    n: usize,
    total_bytes: u64,
    op_id: OpId,
) -> Result<CollectiveDag, DagError> {
    build_ring_allreduce_dag_aligned(n, total_bytes, 1, op_id)
}

/// Ring all-reduce whose chunk boundaries respect `elem_size`.
pub fn build_ring_allreduce_dag_aligned(
    n: usize,
    total_bytes: u64,
    elem_size: usize,
    op_id: OpId,
) -> Result<CollectiveDag, DagError> {
    let layout = ChunkLayout::for_allreduce(n, total_bytes, elem_size)?;
    Ok(build_ring_dag(CollectiveKind::AllReduce, n, &layout, op_id))
}

pub fn build_ring_allgather_dag(
    n: usize,
    bytes_per_rank: u64,
    op_id: OpId,
) -> Result<CollectiveDag, DagError> {
    let layout = ChunkLayout::for_allgather(n, bytes_per_rank)?;
    Ok(build_ring_dag(CollectiveKind::AllGather, n, &layout, op_id))
}

/// Builds the DAG for one call described by its kind and payload size.
pub fn build_collective_dag(
    kind: CollectiveKind,
    n: usize,
    bytes: u64,
    elem_size: usize,
    op_id: OpId,
) -> Result<CollectiveDag, DagError> {
    match kind {
        CollectiveKind::AllReduce => build_ring_allreduce_dag_aligned(n, bytes, elem_size, op_id),
        CollectiveKind::AllGather => build_ring_allgather_dag(n, bytes, op_id),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleReport {
    /// Vertices of one cycle, in edge order.
    pub witness: Vec<usize>,
}

/// Kahn's algorithm. Returns a topological order, or a cycle witness.
pub fn validate_acyclic(dag: &CollectiveDag) -> Result<Vec<usize>, CycleReport> {
    let n = dag.tasks.len();
    let mut indeg = vec![0usize; n];
    for &(_, v) in &dag.edges {
        indeg[v] += 1;
    }
    let mut stack: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(u) = stack.pop() {
        order.push(u);
        for &v in &dag.succ[u] {
            indeg[v] -= 1;
            if indeg[v] == 0 {
                stack.push(v);
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // Every leftover vertex has a leftover predecessor; walk predecessors
    // until one repeats.
    let mut pred_in_rest = vec![usize::MAX; n];
    for &(u, v) in &dag.edges {
        if indeg[u] > 0 && indeg[v] > 0 {
            pred_in_rest[v] = u;
        }
    }
    let start = (0..n).find(|&v| indeg[v] > 0).expect("leftover vertex");
    let mut pos = HashMap::new();
    let mut walk = Vec::new();
    let mut v = start;
    while !pos.contains_key(&v) {
        pos.insert(v, walk.len());
        walk.push(v);
        v = pred_in_rest[v];
    }
    let mut witness = walk[pos[&v]..].to_vec();
    witness.reverse();
    Err(CycleReport { witness })
}

// ---------------------------------------------------------------------------
// Boundary projection
// ---------------------------------------------------------------------------

/// Which side owns the retained tasks of a projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perspective {
    /// Tasks executed by the emulated environment (the emulator's view).
    Emulated,
    /// Tasks executed by the real ranks.
    Real,
}

/// Direction of a boundary message relative to the real set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    ToReal,
    FromReal,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::ToReal => "to_real",
            Direction::FromReal => "from_real",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryVertex {
    pub direction: Direction,
    /// Task kind from the owning side's point of view.
    pub task: TaskKind,
    pub msg: MsgDesc,
}

#[derive(Debug, Clone)]
pub struct BoundaryDag {
    kind: Option<CollectiveKind>,
    world_size: usize,
    perspective: Perspective,
    vertices: Vec<BoundaryVertex>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
    to_real: Vec<usize>,
    from_real: Vec<usize>,
}

impl BoundaryDag {
    pub fn kind(&self) -> Option<CollectiveKind> {
        self.kind
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn perspective(&self) -> Perspective {
        self.perspective
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertices(&self) -> &[BoundaryVertex] {
        &self.vertices
    }

    pub fn vertex(&self, v: usize) -> &BoundaryVertex {
        &self.vertices[v]
    }

    pub fn predecessors(&self, v: usize) -> &[usize] {
        &self.preds[v]
    }

    pub fn successors(&self, v: usize) -> &[usize] {
        &self.succs[v]
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.succs
            .iter()
            .enumerate()
            .flat_map(|(u, vs)| vs.iter().map(move |&v| (u, v)))
    }

    pub fn edge_count(&self) -> usize {
        self.succs.iter().map(Vec::len).sum()
    }

    /// Vertices carrying messages into the real set, in schedule order.
    pub fn to_real(&self) -> &[usize] {
        &self.to_real
    }

    /// Vertices carrying messages out of the real set, in schedule order.
    pub fn from_real(&self) -> &[usize] {
        &self.from_real
    }

    /// Same graph with every message relabelled to `op_id`.
    pub fn with_op_id(&self, op_id: OpId) -> BoundaryDag {
        let mut out = self.clone();
        for v in &mut out.vertices {
            v.msg.op_id = op_id;
        }
        out
    }

    /// Builds a boundary graph from explicit vertices and edges. Intended
    /// for tests and custom tooling; no structural checks are performed.
    pub fn from_parts(
        world_size: usize,
        perspective: Perspective,
        vertices: Vec<BoundaryVertex>,
        edges: &[(usize, usize)],
    ) -> BoundaryDag {
        let mut preds = vec![Vec::new(); vertices.len()];
        let mut succs = vec![Vec::new(); vertices.len()];
        for &(u, v) in edges {
            succs[u].push(v);
            preds[v].push(u);
        }
        let mut to_real: Vec<usize> = Vec::new();
        let mut from_real: Vec<usize> = Vec::new();
        for (i, v) in vertices.iter().enumerate() {
            match v.direction {
                Direction::ToReal => to_real.push(i),
                Direction::FromReal => from_real.push(i),
            }
        }
        let key = |i: &usize| (vertices[*i].msg.step, vertices[*i].msg.src_rank);
        to_real.sort_by_key(key);
        from_real.sort_by_key(key);
        BoundaryDag {
            kind: None,
            world_size,
            perspective,
            vertices,
            preds,
            succs,
            to_real,
            from_real,
        }
    }
}

fn check_real_set(dag: &CollectiveDag, real_set: &BTreeSet<usize>) -> Result<(), DagError> {
    if real_set.is_empty() {
        return Err(DagError::InvalidRealSet("real set is empty".into()));
    }
    if let Some(r) = real_set.iter().find(|&&r| r >= dag.world_size) {
        return Err(DagError::InvalidRealSet(format!(
            "rank {r} outside the world"
        )));
    }
    if real_set.len() == dag.world_size {
        return Err(DagError::InvalidRealSet(
            "real set covers every rank; nothing is emulated".into(),
        ));
    }
    Ok(())
}

/// The emulator's view: boundary tasks owned by emulated ranks, with every
/// path through the full DAG collapsed into transitively reduced edges.
pub fn project_boundary(
    dag: &CollectiveDag,
    real_set: &BTreeSet<usize>,
) -> Result<BoundaryDag, DagError> {
    project(dag, real_set, Perspective::Emulated)
}

/// The real side's view of the same boundary, used to check that both
/// sides agree on the message structure.
pub fn project_real_view(
    dag: &CollectiveDag,
    real_set: &BTreeSet<usize>,
) -> Result<BoundaryDag, DagError> {
    project(dag, real_set, Perspective::Real)
}

fn project(
    dag: &CollectiveDag,
    real_set: &BTreeSet<usize>,
    perspective: Perspective,
) -> Result<BoundaryDag, DagError> {
    check_real_set(dag, real_set)?;
    let is_real = |r: usize| real_set.contains(&r);

    let mut retained: Vec<usize> = Vec::new();
    for (i, t) in dag.tasks.iter().enumerate() {
        let crosses = is_real(t.msg.src_rank) != is_real(t.msg.dst_rank);
        let owner_side = if is_real(t.owner) {
            Perspective::Real
        } else {
            Perspective::Emulated
        };
        if crosses && owner_side == perspective {
            retained.push(i);
        }
    }
    retained.sort_by_key(|&i| {
        let t = &dag.tasks[i];
        (t.msg.step, t.msg.src_rank, t.kind)
    });
    let mut slot = vec![usize::MAX; dag.tasks.len()];
    for (k, &i) in retained.iter().enumerate() {
        slot[i] = k;
    }

    let order = validate_acyclic(dag).map_err(|c| {
        DagError::InvalidRealSet(format!("input graph has a cycle {:?}", c.witness))
    })?;
    let r = retained.len();
    // reach[v]: retained vertices reachable from v by a non-empty path.
    let mut reach: Vec<FixedBitSet> = vec![FixedBitSet::with_capacity(r); dag.tasks.len()];
    for &v in order.iter().rev() {
        let mut acc = FixedBitSet::with_capacity(r);
        for &s in &dag.succ[v] {
            acc.union_with(&reach[s]);
            if slot[s] != usize::MAX {
                acc.insert(slot[s]);
            }
        }
        reach[v] = acc;
    }

    let mut edges = Vec::new();
    for (k, &i) in retained.iter().enumerate() {
        let all = &reach[i];
        let mut implied = FixedBitSet::with_capacity(r);
        for w in all.ones() {
            implied.union_with(&reach[retained[w]]);
        }
        let mut direct = all.clone();
        direct.difference_with(&implied);
        for v in direct.ones() {
            edges.push((k, v));
        }
    }

    let vertices = retained
        .iter()
        .map(|&i| {
            let t = dag.tasks[i];
            let direction = if is_real(t.msg.dst_rank) {
                Direction::ToReal
            } else {
                Direction::FromReal
            };
            BoundaryVertex {
                direction,
                task: t.kind,
                msg: t.msg,
            }
        })
        .collect();
    let mut out = BoundaryDag::from_parts(dag.world_size, perspective, vertices, &edges);
    out.kind = dag.kind;
    Ok(out)
}

/// Label used for matching: the task kind seen from the emulated side,
/// plus step and chunk.
fn canonical_label(dag: &BoundaryDag, v: usize) -> (TaskKind, u32, usize) {
    let vx = &dag.vertices[v];
    let task = match dag.perspective {
        Perspective::Emulated => vx.task,
        Perspective::Real => vx.task.flipped(),
    };
    (task, vx.msg.step, vx.msg.chunk_index)
}

/// True iff a label-preserving bijection maps the edges of `a` exactly onto
/// the edges of `b`. Views from opposite sides are compared with send and
/// recv swapped.
pub fn check_isomorphic(a: &BoundaryDag, b: &BoundaryDag) -> bool {
    if a.len() != b.len() || a.edge_count() != b.edge_count() {
        return false;
    }
    let mut b_index = HashMap::with_capacity(b.len());
    for v in 0..b.len() {
        if b_index.insert(canonical_label(b, v), v).is_some() {
            return false;
        }
    }
    let mut map = vec![0usize; a.len()];
    let mut used = vec![false; b.len()];
    for (v, slot) in map.iter_mut().enumerate() {
        let Some(&w) = b_index.get(&canonical_label(a, v)) else {
            return false;
        };
        if used[w] {
            return false;
        }
        used[w] = true;
        *slot = w;
    }
    let b_edges: BTreeSet<(usize, usize)> = b.edges().collect();
    a.edges().all(|(u, v)| b_edges.contains(&(map[u], map[v])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn real0() -> BTreeSet<usize> {
        [0].into_iter().collect()
    }

    #[test]
    fn allreduce_counts_per_rank() {
        let two = build_ring_allreduce_dag(2, 16, OpId(0)).unwrap();
        for r in 0..2 {
            let sends = two.tasks_of(r).filter(|t| t.kind == TaskKind::Send).count();
            let recvs = two.tasks_of(r).filter(|t| t.kind == TaskKind::Recv).count();
            assert_eq!((sends, recvs), (2, 2));
        }
        let four = build_ring_allreduce_dag(4, 4096, OpId(0)).unwrap();
        assert_eq!(four.tasks().len(), 48);
        for r in 0..4 {
            assert_eq!(
                four.tasks_of(r)
                    .filter(|t| t.kind == TaskKind::Send)
                    .count(),
                6
            );
        }
    }

    #[test]
    fn allgather_counts_per_rank() {
        let two = build_ring_allgather_dag(2, 8, OpId(0)).unwrap();
        assert_eq!(two.tasks_of(0).count(), 2);
        let four = build_ring_allgather_dag(4, 8, OpId(0)).unwrap();
        for r in 0..4 {
            assert_eq!(
                four.tasks_of(r)
                    .filter(|t| t.kind == TaskKind::Send)
                    .count(),
                3
            );
            assert_eq!(
                four.tasks_of(r)
                    .filter(|t| t.kind == TaskKind::Recv)
                    .count(),
                3
            );
        }
    }

    #[test]
    fn invalid_inputs() {
        assert_eq!(
            build_ring_allreduce_dag(1, 16, OpId(0)).unwrap_err(),
            DagError::InvalidWorldSize(1)
        );
        assert!(matches!(
            build_ring_allreduce_dag_aligned(4, 30, 8, OpId(0)),
            Err(DagError::Misaligned { .. })
        ));
        assert!(matches!(
            build_ring_allgather_dag(2, 1 << 33, OpId(0)),
            Err(DagError::ChunkTooLarge(_))
        ));
        assert!(build_ring_allgather_dag(0, 1, OpId(0)).is_err());
    }

    #[test]
    fn last_chunk_absorbs_remainder() {
        let layout = ChunkLayout::for_allreduce(4, 10, 1).unwrap();
        let lens: Vec<u64> = (0..4).map(|c| layout.len(c)).collect();
        assert_eq!(lens, vec![2, 2, 2, 4]);
        let aligned = ChunkLayout::for_allreduce(3, 80, 8).unwrap();
        let lens: Vec<u64> = (0..3).map(|c| aligned.len(c)).collect();
        assert_eq!(lens, vec![24, 24, 32]);
    }

    #[test]
    fn built_dags_are_acyclic() {
        for n in 2..=8 {
            let ar = build_ring_allreduce_dag(n, 64, OpId(0)).unwrap();
            assert_eq!(validate_acyclic(&ar).unwrap().len(), ar.tasks().len());
        }
        let ag = build_ring_allgather_dag(8, 32, OpId(0)).unwrap();
        assert!(validate_acyclic(&ag).is_ok());
    }

    #[test]
    fn two_vertex_cycle_is_reported() {
        let t = Task {
            kind: TaskKind::Send,
            owner: 0,
            msg: MsgDesc {
                op_id: OpId(0),
                step: 0,
                src_rank: 0,
                dst_rank: 1,
                chunk_index: 0,
                size_bytes: 1,
            },
        };
        let dag = CollectiveDag::from_parts(2, vec![t, t], vec![(0, 1), (1, 0)]);
        let report = validate_acyclic(&dag).unwrap_err();
        assert_eq!(report.witness.len(), 2);
        let mut w = report.witness.clone();
        w.sort();
        assert_eq!(w, vec![0, 1]);
    }

    #[test]
    fn cycle_witness_follows_edges() {
        let t = build_ring_allreduce_dag(2, 4, OpId(0)).unwrap().tasks()[0];
        // 0 -> 1 -> 2 -> 3 -> 1, plus a tail 3 -> 4
        let dag =
            CollectiveDag::from_parts(2, vec![t; 5], vec![(0, 1), (1, 2), (2, 3), (3, 1), (3, 4)]);
        let w = validate_acyclic(&dag).unwrap_err().witness;
        assert_eq!(w.len(), 3);
        let edges: BTreeSet<_> = dag.edges().iter().copied().collect();
        for i in 0..w.len() {
            assert!(edges.contains(&(w[i], w[(i + 1) % w.len()])), "{w:?}");
        }
    }

    #[test]
    fn boundary_of_four_rank_allreduce() {
        let dag = build_ring_allreduce_dag(4, 4096, OpId(0)).unwrap();
        let b = project_boundary(&dag, &real0()).unwrap();
        assert_eq!(b.len(), 12);
        assert_eq!(b.from_real().len(), 6);
        assert_eq!(b.to_real().len(), 6);
        for &v in b.from_real() {
            let m = b.vertex(v).msg;
            assert_eq!((m.src_rank, m.dst_rank), (0, 1));
        }
        for &v in b.to_real() {
            let m = b.vertex(v).msg;
            assert_eq!((m.src_rank, m.dst_rank), (3, 0));
        }
        // The emulator's reply at position p waits for the real rank's send
        // at p − (n − 1): that chunk needs n − 1 hops to come back.
        for &v in b.to_real() {
            let step = b.vertex(v).msg.step;
            let preds: Vec<u32> = b
                .predecessors(v)
                .iter()
                .map(|&u| {
                    assert_eq!(b.vertex(u).direction, Direction::FromReal);
                    b.vertex(u).msg.step
                })
                .collect();
            if step >= 3 {
                assert_eq!(preds, vec![step - 3]);
            } else {
                assert!(preds.is_empty());
            }
        }
    }

    #[test]
    fn boundary_of_two_rank_allreduce() {
        let dag = build_ring_allreduce_dag(2, 16, OpId(0)).unwrap();
        let b = project_boundary(&dag, &real0()).unwrap();
        assert_eq!(b.len(), 4);
        let label = |v: usize| (b.vertex(v).direction, b.vertex(v).msg.step);
        let mut edges: Vec<_> = b.edges().map(|(u, v)| (label(u), label(v))).collect();
        edges.sort();
        // Each side's second message waits on the other side's first one.
        assert_eq!(
            edges,
            vec![
                ((Direction::ToReal, 0), (Direction::FromReal, 1)),
                ((Direction::FromReal, 0), (Direction::ToReal, 1)),
            ]
        );
    }

    #[test]
    fn projection_rejects_bad_real_sets() {
        let dag = build_ring_allreduce_dag(3, 9, OpId(0)).unwrap();
        assert!(project_boundary(&dag, &BTreeSet::new()).is_err());
        assert!(project_boundary(&dag, &(0..3).collect()).is_err());
        assert!(project_boundary(&dag, &[7].into_iter().collect()).is_err());
    }

    #[test]
    fn isomorphism_examples() {
        let ar = build_ring_allreduce_dag(4, 4096, OpId(0)).unwrap();
        let emu = project_boundary(&ar, &real0()).unwrap();
        let real = project_real_view(&ar, &real0()).unwrap();
        assert!(check_isomorphic(&real, &emu));
        assert!(check_isomorphic(&emu, &emu));
        let ag = build_ring_allgather_dag(4, 1024, OpId(0)).unwrap();
        let ag_b = project_boundary(&ag, &real0()).unwrap();
        assert!(!check_isomorphic(&emu, &ag_b));
    }

    #[test]
    fn isomorphism_detects_a_moved_edge() {
        let ar = build_ring_allreduce_dag(3, 300, OpId(0)).unwrap();
        let emu = project_boundary(&ar, &real0()).unwrap();
        let mut edges: Vec<_> = emu.edges().collect();
        let (u, v) = edges.pop().unwrap();
        let w = (0..emu.len())
            .find(|&w| w != v && w != u && !edges.contains(&(u, w)))
            .unwrap();
        edges.push((u, w));
        let tampered =
            BoundaryDag::from_parts(3, Perspective::Emulated, emu.vertices().to_vec(), &edges);
        assert!(!check_isomorphic(&emu, &tampered));
    }

    #[test]
    fn dump_golden_two_rank_allgather() {
        let dag = build_ring_allgather_dag(2, 4, OpId(7)).unwrap();
        let expected = "\
# cemu-dag v1 kind=allgather n=2
# v id op_id kind step src dst chunk size
v 0 7 send 0 0 1 0 4
v 1 7 recv 0 1 0 1 4
v 2 7 send 0 1 0 1 4
v 3 7 recv 0 0 1 0 4
# e from to
e 0 3
e 2 1
";
        assert_eq!(dag.dump(), expected);
    }

    #[test]
    fn op_id_relabel() {
        let dag = build_ring_allreduce_dag(2, 16, OpId(0)).unwrap();
        let b = project_boundary(&dag, &real0())
            .unwrap()
            .with_op_id(OpId(9));
        assert!(b.vertices().iter().all(|v| v.msg.op_id == OpId(9)));
    }
}
