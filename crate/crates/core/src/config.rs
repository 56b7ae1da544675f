//! Job configuration, fabricated global topology and ring order.
//!
//! The configuration is a single TOML document. Top-level keys describe the
//! job; `[delay]` selects the communication model used inside the emulator;
//! `[transport]` and `[emulator]` hold runtime knobs. See `README.md` for the
//! full key list.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Largest world size addressable by the 16-bit rank fields on the wire.
pub const MAX_WORLD_SIZE: usize = 1 << 16;

pub const DEFAULT_BASE_PORT: u16 = 29500;
pub const DEFAULT_BUCKET_BYTES: u64 = 25 * 1024 * 1024;
pub const DEFAULT_MAX_PAYLOAD_BYTES: u32 = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("`{field}` is out of scope: {reason}")]
    OutOfScope { field: &'static str, reason: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    /// Name of the offending field, when the error is tied to one.
    pub fn field(&self) -> Option<&'static str> {
        match self {
            ConfigError::Invalid { field, .. } | ConfigError::OutOfScope { field, .. } => {
                Some(field)
            }
            _ => None,
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// Classical collective cost parameters, all in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LinkParams {
    /// Per-message latency.
    pub alpha_us: f64,
    /// Transfer time per byte (inverse bandwidth).
    pub beta_us_per_byte: f64,
    /// Reduction time per byte.
    pub gamma_us_per_byte: f64,
}

impl LinkParams {
    pub fn new(alpha_us: f64, beta_us_per_byte: f64, gamma_us_per_byte: f64) -> Self {
        Self {
            alpha_us,
            beta_us_per_byte,
            gamma_us_per_byte,
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("delay.alpha_us", self.alpha_us),
            ("delay.beta_us_per_byte", self.beta_us_per_byte),
            ("delay.gamma_us_per_byte", self.gamma_us_per_byte),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(field, format!("must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveAlgo {
    #[default]
    Ring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ChunkPolicy {
    #[default]
    #[serde(rename = "one-chunk-per-partition")]
    OneChunkPerPartition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayKind {
    #[default]
    None,
    AlphaBeta,
    Fixed,
}

impl fmt::Display for DelayKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DelayKind::None => "none",
            DelayKind::AlphaBeta => "alpha_beta",
            DelayKind::Fixed => "fixed",
        })
    }
}

/// Delay model selection. Link parameters live in [`JobConfig::link`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DelaySpec {
    pub kind: DelayKind,
    pub fixed_us: f64,
    /// Extra stall injected into every collective call (what-if knob).
    pub inject_us: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportSettings {
    pub max_payload_bytes: u32,
    pub handshake_timeout_ms: u64,
}

impl Default for TransportSettings {
    fn default() -> Self {
        Self {
            max_payload_bytes: DEFAULT_MAX_PAYLOAD_BYTES,
            handshake_timeout_ms: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmulatorSettings {
    /// Spin window of the background poller before it blocks.
    pub poll_period_us: u64,
    /// Activate operations one at a time in op-id order, the way a single
    /// collective stream executes on every emulated rank.
    pub serialize_ops: bool,
    /// Number of completed operation traces kept for post-run analysis.
    pub trace_capacity: usize,
}

impl Default for EmulatorSettings {
    fn default() -> Self {
        Self {
            poll_period_us: 10,
            serialize_ops: true,
            trace_capacity: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobConfig {
    pub world_size: usize,
    pub real_ranks: BTreeSet<usize>,
    /// One label per rank; uniform in this implementation.
    pub node_class: Vec<String>,
    pub link: LinkParams,
    pub collective_algo: CollectiveAlgo,
    pub bucket_bytes: u64,
    pub chunk_policy: ChunkPolicy,
    pub delay: DelaySpec,
    /// Listen address of every rank, indexed by rank.
    pub endpoints: Vec<String>,
    pub transport: TransportSettings,
    pub emulator: EmulatorSettings,
}

// ---------------------------------------------------------------------------
// On-disk representation
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum NodeClassDoc {
    Uniform(String),
    PerRank(Vec<String>),
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DelayDoc {
    #[serde(default)]
    kind: DelayKind,
    #[serde(default)]
    alpha_us: f64,
    #[serde(default)]
    beta_us_per_byte: f64,
    #[serde(default)]
    gamma_us_per_byte: f64,
    #[serde(default)]
    fixed_us: f64,
    #[serde(default)]
    inject_us: f64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransportDoc {
    max_payload_bytes: Option<u32>,
    handshake_timeout_ms: Option<u64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmulatorDoc {
    poll_period_us: Option<u64>,
    serialize_ops: Option<bool>,
    trace_capacity: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JobDoc {
    world_size: i64,
    real_ranks: Vec<i64>,
    #[serde(default)]
    node_class: Option<NodeClassDoc>,
    #[serde(default)]
    collective_algo: CollectiveAlgo,
    #[serde(default)]
    chunk_policy: ChunkPolicy,
    #[serde(default)]
    bucket_bytes: Option<i64>,
    #[serde(default)]
    endpoints: Option<Vec<String>>,
    #[serde(default)]
    delay: DelayDoc,
    #[serde(default)]
    transport: TransportDoc,
    #[serde(default)]
    emulator: EmulatorDoc,
}

/// Parses and validates a configuration document.
pub fn parse_job_config(text: &str) -> Result<JobConfig, ConfigError> {
    let doc: JobDoc = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    JobConfig::from_doc(doc)
}

impl JobConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<JobConfig, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        parse_job_config(&text)
    }

    /// A valid job on loopback with default ports and no delay model.
    pub fn local(world_size: usize, real_ranks: &[usize]) -> Result<JobConfig, ConfigError> {
        parse_job_config(&format!(
            "world_size = {world_size}\nreal_ranks = {real_ranks:?}\n"
        ))
    }

    fn from_doc(doc: JobDoc) -> Result<JobConfig, ConfigError> {
        if doc.world_size < 2 {
            return Err(invalid(
                "world_size",
                format!("world_size ≥ 2 required, got {}", doc.world_size),
            ));
        }
        if doc.world_size as u64 > MAX_WORLD_SIZE as u64 {
            return Err(invalid(
                "world_size",
                format!(
                    "world_size ≤ {MAX_WORLD_SIZE} required, got {}",
                    doc.world_size
                ),
            ));
        }
        let world_size = doc.world_size as usize;

        let mut real_ranks = BTreeSet::new();
        for r in doc.real_ranks {
            if r < 0 || r as usize >= world_size {
                return Err(invalid(
                    "real_ranks",
                    format!("rank {r} outside 0..{world_size}"),
                ));
            }
            real_ranks.insert(r as usize);
        }
        if real_ranks.is_empty() {
            return Err(invalid("real_ranks", "real_ranks must be nonempty"));
        }
        if real_ranks.len() == world_size {
            return Err(invalid(
                "real_ranks",
                "real_ranks must be a strict subset of the ranks (nothing left to emulate)",
            ));
        }

        let node_class = match doc.node_class {
            None => vec!["default".to_string(); world_size],
            Some(NodeClassDoc::Uniform(c)) => vec![c; world_size],
            Some(NodeClassDoc::PerRank(v)) => {
                if v.len() != world_size {
                    return Err(invalid(
                        "node_class",
                        format!("expected {world_size} labels, got {}", v.len()),
                    ));
                }
                v
            }
        };
        if node_class.iter().any(|c| c.is_empty()) {
            return Err(invalid("node_class", "labels must be nonempty"));
        }
        if node_class.iter().any(|c| c != &node_class[0]) {
            return Err(ConfigError::OutOfScope {
                field: "node_class",
                reason: "all ranks must share one node class".into(),
            });
        }

        let bucket_bytes = match doc.bucket_bytes {
            None => DEFAULT_BUCKET_BYTES,
            Some(b) if b > 0 => b as u64,
            Some(b) => return Err(invalid("bucket_bytes", format!("must be > 0, got {b}"))),
        };

        let link = LinkParams::new(
            doc.delay.alpha_us,
            doc.delay.beta_us_per_byte,
            doc.delay.gamma_us_per_byte,
        );
        link.validate()?;
        for (field, v) in [
            ("delay.fixed_us", doc.delay.fixed_us),
            ("delay.inject_us", doc.delay.inject_us),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(field, format!("must be finite and ≥ 0, got {v}")));
            }
        }
        let delay = DelaySpec {
            kind: doc.delay.kind,
            fixed_us: doc.delay.fixed_us,
            inject_us: doc.delay.inject_us,
        };

        let endpoints = match doc.endpoints {
            Some(eps) => eps,
            None => {
                if world_size + DEFAULT_BASE_PORT as usize > u16::MAX as usize {
                    return Err(invalid(
                        "endpoints",
                        "world too large for default port assignment; list endpoints",
                    ));
                }
                (0..world_size)
                    .map(|r| format!("127.0.0.1:{}", DEFAULT_BASE_PORT as usize + r))
                    .collect()
            }
        };
        if endpoints.len() != world_size {
            return Err(invalid(
                "endpoints",
                format!("expected {world_size} endpoints, got {}", endpoints.len()),
            ));
        }
        let mut seen = HashSet::new();
        for ep in &endpoints {
            if ep.trim().is_empty() {
                return Err(invalid("endpoints", "empty endpoint"));
            }
            if !seen.insert(ep.as_str()) {
                return Err(invalid("endpoints", format!("duplicate endpoint {ep}")));
            }
        }

        let defaults = TransportSettings::default();
        let transport = TransportSettings {
            max_payload_bytes: doc
                .transport
                .max_payload_bytes
                .unwrap_or(defaults.max_payload_bytes),
            handshake_timeout_ms: doc
                .transport
                .handshake_timeout_ms
                .unwrap_or(defaults.handshake_timeout_ms),
        };
        if transport.max_payload_bytes == 0 {
            return Err(invalid("transport.max_payload_bytes", "must be > 0"));
        }
        if transport.handshake_timeout_ms == 0 {
            return Err(invalid("transport.handshake_timeout_ms", "must be > 0"));
        }

        let defaults = EmulatorSettings::default();
        let emulator = EmulatorSettings {
            poll_period_us: doc
                .emulator
                .poll_period_us
                .unwrap_or(defaults.poll_period_us),
            serialize_ops: doc.emulator.serialize_ops.unwrap_or(defaults.serialize_ops),
            trace_capacity: doc
                .emulator
                .trace_capacity
                .unwrap_or(defaults.trace_capacity),
        };

        Ok(JobConfig {
            world_size,
            real_ranks,
            node_class,
            link,
            collective_algo: doc.collective_algo,
            bucket_bytes,
            chunk_policy: doc.chunk_policy,
            delay,
            endpoints,
            transport,
            emulator,
        })
    }

    fn to_doc(&self) -> JobDoc {
        JobDoc {
            world_size: self.world_size as i64,
            real_ranks: self.real_ranks.iter().map(|&r| r as i64).collect(),
            node_class: Some(NodeClassDoc::Uniform(self.node_class[0].clone())),
            collective_algo: self.collective_algo,
            chunk_policy: self.chunk_policy,
            bucket_bytes: Some(self.bucket_bytes as i64),
            endpoints: Some(self.endpoints.clone()),
            delay: DelayDoc {
                kind: self.delay.kind,
                alpha_us: self.link.alpha_us,
                beta_us_per_byte: self.link.beta_us_per_byte,
                gamma_us_per_byte: self.link.gamma_us_per_byte,
                fixed_us: self.delay.fixed_us,
                inject_us: self.delay.inject_us,
            },
            transport: TransportDoc {
                max_payload_bytes: Some(self.transport.max_payload_bytes),
                handshake_timeout_ms: Some(self.transport.handshake_timeout_ms),
            },
            emulator: EmulatorDoc {
                poll_period_us: Some(self.emulator.poll_period_us),
                serialize_ops: Some(self.emulator.serialize_ops),
                trace_capacity: Some(self.emulator.trace_capacity),
            },
        }
    }

    /// Renders the configuration back into its document form.
    pub fn render(&self) -> String {
        toml::to_string(&self.to_doc()).expect("config document is always serialisable")
    }

    pub fn delay_inject_us(&self) -> f64 {
        self.delay.inject_us
    }

    pub fn is_real(&self, rank: usize) -> bool {
        self.real_ranks.contains(&rank)
    }

    pub fn emulated_ranks(&self) -> Vec<usize> {
        (0..self.world_size).filter(|r| !self.is_real(*r)).collect()
    }

    /// Digest of the fields every participant must agree on.
    ///
    /// Covers the job identity only. Rank roles, endpoints and the delay model
    /// are deliberately excluded: a baseline peer and an emulator must both be
    /// able to serve the same real worker.
    pub fn digest(&self) -> [u8; 32] {
        let canonical = format!(
            "world_size={};algo={:?};chunk={:?};bucket_bytes={};class={}",
            self.world_size,
            self.collective_algo,
            self.chunk_policy,
            self.bucket_bytes,
            self.node_class[0]
        );
        Sha256::digest(canonical.as_bytes()).into()
    }
}

// ---------------------------------------------------------------------------
// Topology
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub rank: usize,
    pub class: String,
    pub is_real: bool,
}

/// Global job graph: every rank plus a uniform fabric linking all pairs.
///
/// Edges are implicit (a full mesh with identical link parameters), so the
/// structure stays O(n) even for large emulated worlds.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyGraph {
    nodes: Vec<NodeRecord>,
    link: LinkParams,
}

impl TopologyGraph {
    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn world_size(&self) -> usize {
        self.nodes.len()
    }

    pub fn link(&self, src: usize, dst: usize) -> Option<LinkParams> {
        (src != dst && src < self.nodes.len() && dst < self.nodes.len()).then_some(self.link)
    }

    /// Ordered pairs `(src, dst)` that share a link.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, LinkParams)> + '_ {
        let n = self.nodes.len();
        let link = self.link;
        (0..n).flat_map(move |a| (0..n).filter(move |&b| b != a).map(move |b| (a, b, link)))
    }

    pub fn neighbors(&self, rank: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(move |&r| r != rank)
    }

    pub fn real_ranks(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter(|n| n.is_real).map(|n| n.rank)
    }
}

/// Builds the global graph, fabricating records for the emulated ranks.
pub fn synthesize_global_topology(cfg: &JobConfig) -> TopologyGraph {
    let nodes = (0..cfg.world_size)
        .map(|rank| NodeRecord {
            rank,
            class: cfg.node_class[rank].clone(),
            is_real: cfg.is_real(rank),
        })
        .collect();
    TopologyGraph {
        nodes,
        link: cfg.link,
    }
}

/// Ring permutation shared by every participant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingOrder {
    order: Vec<usize>,
    position: Vec<usize>,
}

impl RingOrder {
    /// Ascending rank ring `0 → 1 → … → n−1 → 0`.
    pub fn ascending(n: usize) -> RingOrder {
        let order: Vec<usize> = (0..n).collect();
        RingOrder {
            position: order.clone(),
            order,
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn ranks(&self) -> &[usize] {
        &self.order
    }

    pub fn successor(&self, rank: usize) -> usize {
        let n = self.order.len();
        self.order[(self.position[rank] + 1) % n]
    }

    pub fn predecessor(&self, rank: usize) -> usize {
        let n = self.order.len();
        self.order[(self.position[rank] + n - 1) % n]
    }
}

/// Derives the ring from the topology. Link weights are ignored: both sides
/// of a connection must compute the same ring without coordination.
pub fn ring_order(topo: &TopologyGraph) -> RingOrder {
    RingOrder::ascending(topo.world_size())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    #[test]
    fn minimal_document_has_one_emulated_rank() {
        let cfg = parse_job_config("world_size = 2\nreal_ranks = [0]\n").unwrap();
        assert_eq!(cfg.world_size, 2);
        assert_eq!(cfg.emulated_ranks(), vec![1]);
        assert_eq!(cfg.bucket_bytes, DEFAULT_BUCKET_BYTES);
        assert_eq!(cfg.endpoints, vec!["127.0.0.1:29500", "127.0.0.1:29501"]);
    }

    #[test]
    fn world_size_one_is_rejected() {
        let err = parse_job_config("world_size = 1\nreal_ranks = [0]\n").unwrap_err();
        assert_eq!(err.field(), Some("world_size"));
        assert!(err.to_string().contains("world_size ≥ 2"), "{err}");
    }

    #[test]
    fn all_real_ranks_is_rejected() {
        let err = parse_job_config("world_size = 2\nreal_ranks = [0, 1]\n").unwrap_err();
        assert_eq!(err.field(), Some("real_ranks"));
        assert!(err.to_string().contains("strict subset"), "{err}");
    }

    #[test]
    fn other_validation_errors_name_their_field() {
        let cases = [
            ("world_size = 2\nreal_ranks = []\n", "real_ranks"),
            ("world_size = 2\nreal_ranks = [5]\n", "real_ranks"),
            (
                "world_size = 2\nreal_ranks = [0]\nbucket_bytes = 0\n",
                "bucket_bytes",
            ),
            (
                "world_size = 2\nreal_ranks = [0]\nendpoints = [\"a:1\", \"a:1\"]\n",
                "endpoints",
            ),
            (
                "world_size = 2\nreal_ranks = [0]\nendpoints = [\"a:1\"]\n",
                "endpoints",
            ),
            (
                "world_size = 2\nreal_ranks = [0]\n[delay]\nalpha_us = -1.0\n",
                "delay.alpha_us",
            ),
            (
                "world_size = 2\nreal_ranks = [0]\n[delay]\ninject_us = -5.0\n",
                "delay.inject_us",
            ),
        ];
        for (doc, field) in cases {
            let err = parse_job_config(doc).unwrap_err();
            assert_eq!(err.field(), Some(field), "{doc}: {err}");
        }
    }

    #[test]
    fn non_uniform_classes_are_out_of_scope() {
        let err = parse_job_config(
            "world_size = 2\nreal_ranks = [0]\nnode_class = [\"v100\", \"a100\"]\n",
        )
        .unwrap_err();
        assert!(matches!(
            err,
            ConfigError::OutOfScope {
                field: "node_class",
                ..
            }
        ));
    }

    #[test]
    fn malformed_documents_are_parse_errors() {
        assert!(matches!(
            parse_job_config("world_size = = 2"),
            Err(ConfigError::Parse(_))
        ));
        let err =
            parse_job_config("world_size = 2\nreal_ranks = [0]\n[delay]\nkind = \"packet\"\n")
                .unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
        assert!(err.to_string().contains("kind"), "{err}");
    }

    #[test]
    fn full_document_parses() {
        let cfg = parse_job_config(
            r#"
world_size = 4
real_ranks = [0]
node_class = "v100"
bucket_bytes = 1048576
endpoints = ["127.0.0.1:7000", "127.0.0.1:7001", "127.0.0.1:7002", "127.0.0.1:7003"]

[delay]
kind = "alpha_beta"
alpha_us = 10.0
beta_us_per_byte = 0.01
gamma_us_per_byte = 0.001
inject_us = 250.0

[emulator]
serialize_ops = false
"#,
        )
        .unwrap();
        assert_eq!(cfg.delay.kind, DelayKind::AlphaBeta);
        assert_eq!(cfg.delay_inject_us(), 250.0);
        assert_eq!(cfg.link, LinkParams::new(10.0, 0.01, 0.001));
        assert!(!cfg.emulator.serialize_ops);
        assert_eq!(cfg.emulator.poll_period_us, 10);
    }

    #[test]
    fn digest_ignores_delay_and_roles() {
        let a = JobConfig::local(2, &[0]).unwrap();
        let mut b = a.clone();
        b.delay.inject_us = 1000.0;
        b.real_ranks = [1].into_iter().collect();
        assert_eq!(a.digest(), b.digest());
        let c = JobConfig::local(3, &[0]).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn topology_flags_emulated_ranks() {
        let cfg = JobConfig::local(4, &[0]).unwrap();
        let topo = synthesize_global_topology(&cfg);
        assert_eq!(topo.world_size(), 4);
        let flags: Vec<bool> = topo.nodes().iter().map(|n| n.is_real).collect();
        assert_eq!(flags, vec![true, false, false, false]);
        assert_eq!(topo.real_ranks().collect::<Vec<_>>(), vec![0]);

        let two = synthesize_global_topology(&JobConfig::local(2, &[0]).unwrap());
        assert_eq!(two.world_size(), 2);
        assert_eq!(two.edges().count(), 2);
    }

    fn connected_by_bfs(topo: &TopologyGraph) -> bool {
        let n = topo.world_size();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for (a, b, _) in topo.edges() {
                if a == u && !seen[b] {
                    seen[b] = true;
                    queue.push_back(b);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    #[test]
    fn eight_rank_topology_is_connected() {
        let topo = synthesize_global_topology(&JobConfig::local(8, &[0]).unwrap());
        assert_eq!(topo.world_size(), 8);
        assert!(connected_by_bfs(&topo));
        let ranks: Vec<usize> = topo.nodes().iter().map(|n| n.rank).collect();
        assert_eq!(ranks, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn edge_structure_does_not_depend_on_roles() {
        let a = synthesize_global_topology(&JobConfig::local(5, &[0]).unwrap());
        let b = synthesize_global_topology(&JobConfig::local(5, &[2, 3]).unwrap());
        let ea: Vec<_> = a.edges().map(|(x, y, _)| (x, y)).collect();
        let eb: Vec<_> = b.edges().map(|(x, y, _)| (x, y)).collect();
        assert_eq!(ea, eb);
    }

    #[test]
    fn ring_neighbors() {
        let two = ring_order(&synthesize_global_topology(
            &JobConfig::local(2, &[0]).unwrap(),
        ));
        assert_eq!(two.successor(0), 1);
        assert_eq!(two.successor(1), 0);
        let topo = synthesize_global_topology(&JobConfig::local(4, &[0]).unwrap());
        let four = ring_order(&topo);
        assert_eq!(four.predecessor(0), 3);
        assert_eq!(four, ring_order(&topo));
    }

    fn arb_config() -> impl Strategy<Value = JobConfig> {
        (
            2usize..40,
            any::<u64>(),
            1u64..u32::MAX as u64,
            0u8..3,
            any::<bool>(),
        )
            .prop_flat_map(|(n, seed, bucket, kind, ser)| {
                let reals = proptest::collection::btree_set(0..n, 1..n);
                let floats = proptest::collection::vec(0.0f64..1.0e6, 5);
                (Just((n, seed, bucket, kind, ser)), reals, floats)
            })
            .prop_map(|((n, seed, bucket, kind, ser), reals, f)| {
                let mut cfg =
                    JobConfig::local(n, &reals.iter().copied().collect::<Vec<_>>()).expect("valid");
                cfg.bucket_bytes = bucket;
                cfg.link = LinkParams::new(f[0], f[1], f[2]);
                cfg.delay = DelaySpec {
                    kind: [DelayKind::None, DelayKind::AlphaBeta, DelayKind::Fixed][kind as usize],
                    fixed_us: f[3],
                    inject_us: f[4],
                };
                cfg.node_class = vec![format!("class{}", seed % 7); n];
                cfg.emulator.serialize_ops = ser;
                cfg.endpoints = (0..n)
                    .map(|r| format!("10.0.{}.{}:{}", r / 250, r % 250, 4000 + r))
                    .collect();
                cfg
            })
    }

    proptest! {
        #[test]
        fn render_round_trips(cfg in arb_config()) {
            let text = cfg.render();
            let back = parse_job_config(&text).unwrap();
            prop_assert_eq!(back, cfg);
        }

        #[test]
        fn ring_is_a_permutation(n in 2usize..200) {
            let ring = RingOrder::ascending(n);
            let mut seen = vec![false; n];
            for &r in ring.ranks() {
                prop_assert!(!seen[r]);
                seen[r] = true;
            }
            for r in 0..n {
                prop_assert_eq!(ring.successor(ring.predecessor(r)), r);
                prop_assert_eq!(ring.predecessor(ring.successor(r)), r);
            }
        }
    }
}
