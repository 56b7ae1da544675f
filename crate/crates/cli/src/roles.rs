//! Single-process roles. Each prints one JSON summary line on stdout.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use cemu::bench::{collbench_plan, run_collbench, MicrobenchResult, Mode};
use cemu::config::JobConfig;
use cemu::dag::CollectiveKind;
use cemu::engine::server::Emulator;
use cemu::harness::{
    bucketize, collective_plan, profile, run_stats, run_training_loop, trace_rows, ModelSpec,
    TRACE_HEADER,
};
use cemu::report::write_csv;
use cemu::session::{Session, SessionOptions};
use cemu::verify::{run_verify, verify_plan};

#[derive(Args, Debug)]
pub struct WorkerArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    rank: usize,
    /// Model file (TOML).
    #[arg(long, conflicts_with = "profile")]
    model: Option<PathBuf>,
    /// Shipped profile: bert-like, small or wide.
    #[arg(long)]
    profile: Option<String>,
    /// Measured iterations (overrides the model).
    #[arg(long)]
    iters: Option<usize>,
    /// Warmup iterations (overrides the model).
    #[arg(long)]
    warmup: Option<usize>,
    /// Per-bucket trace CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Address to accept the ring predecessor on.
    #[arg(long)]
    listen: Option<String>,
    /// Address of the ring successor.
    #[arg(long)]
    connect: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WorkerSummary {
    pub rank: usize,
    pub model: String,
    pub buckets: usize,
    pub mean_us: f64,
    pub stddev_us: f64,
    pub count: usize,
    pub cpu_share: f64,
}

pub fn load_model(model: Option<&PathBuf>, name: Option<&str>) -> Result<ModelSpec> {
    match (model, name) {
        (Some(path), _) => Ok(ModelSpec::load(path)?),
        (None, Some(n)) => profile(n).with_context(|| format!("unknown profile {n:?}")),
        (None, None) => bail!("one of --model or --profile is required"),
    }
}

fn options(listen: Option<String>, connect: Option<String>) -> SessionOptions {
    SessionOptions {
        listen,
        connect,
        plan: Vec::new(),
    }
}

pub fn worker(a: WorkerArgs) -> Result<()> {
    let cfg = JobConfig::load(&a.config)?;
    let mut model = load_model(a.model.as_ref(), a.profile.as_deref())?;
    if let Some(k) = a.iters {
        model.iterations = k;
    }
    if let Some(k) = a.warmup {
        model.warmup_iterations = k;
    }
    let buckets = bucketize(&model, cfg.bucket_bytes);
    let mut opts = options(a.listen, a.connect);
    opts.plan = collective_plan(&buckets);
    let session = Session::connect(&cfg, a.rank, opts)?;
    let traces = run_training_loop(&session, &model, &buckets)?;
    session.close()?;
    if let Some(path) = &a.out {
        write_csv(path, &TRACE_HEADER, &trace_rows(&traces), false)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let stats = run_stats(&traces);
    let summary = WorkerSummary {
        rank: a.rank,
        model: model.name,
        buckets: buckets.len(),
        mean_us: stats.iteration_us.mean,
        stddev_us: stats.iteration_us.stddev,
        count: stats.iteration_us.count,
        cpu_share: stats.cpu_share,
    };
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

#[derive(Args, Debug)]
pub struct EmulatorArgs {
    #[arg(long)]
    config: PathBuf,
    /// Listen address; defaults to the endpoint of the real rank's successor.
    #[arg(long)]
    listen: Option<String>,
    /// Number of sessions to serve before exiting; unlimited if absent.
    #[arg(long, conflicts_with = "once")]
    sessions: Option<usize>,
    /// Serve a single session.
    #[arg(long)]
    once: bool,
    /// Event log path (also taken from CEMU_TRACE).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmulatorSummary {
    pub sessions: usize,
    pub ops_completed: usize,
}

pub fn emulator(a: EmulatorArgs) -> Result<()> {
    let cfg = JobConfig::load(&a.config)?;
    let mut emu = Emulator::bind(cfg, a.listen.as_deref())?;
    emu.set_trace(a.trace);
    log::info!("emulator listening on {}", emu.local_addr());
    let sessions = if a.once { Some(1) } else { a.sessions };
    let done = emu.serve(sessions)?;
    let summary = EmulatorSummary {
        sessions: done.len(),
        ops_completed: done.iter().map(|s| s.ops_completed).sum(),
    };
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

/// Parses `4096`, `4KB`, `2MB`, `1GB` (binary multiples).
pub fn parse_size(s: &str) -> Result<u64, String> {
    let t = s.trim().to_ascii_uppercase();
    let (num, mult) = [
        ("GB", 1u64 << 30),
        ("MB", 1 << 20),
        ("KB", 1 << 10),
        ("B", 1),
    ]
    .iter()
    .find_map(|(suf, m)| t.strip_suffix(suf).map(|n| (n.to_string(), *m)))
    .unwrap_or((t.clone(), 1));
    num.trim()
        .parse::<u64>()
        .map(|v| v * mult)
        .map_err(|e| format!("bad size {s:?}: {e}"))
}

pub fn parse_op(s: &str) -> Result<CollectiveKind, String> {
    match s {
        "allreduce" => Ok(CollectiveKind::AllReduce),
        "allgather" => Ok(CollectiveKind::AllGather),
        _ => Err(format!("unknown collective {s:?}")),
    }
}

#[derive(Args, Debug)]
pub struct CollbenchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    rank: usize,
    #[arg(long, value_delimiter = ',', value_parser = parse_op, default_value = "allreduce,allgather")]
    ops: Vec<CollectiveKind>,
    #[arg(long, value_delimiter = ',', value_parser = parse_size, default_value = "1KB,4KB,32KB,256KB,2MB")]
    sizes: Vec<u64>,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    connect: Option<String>,
}

pub fn collbench(a: CollbenchArgs) -> Result<()> {
    let cfg = JobConfig::load(&a.config)?;
    let mut opts = options(a.listen, a.connect);
    opts.plan = collbench_plan(&a.ops, &a.sizes, cfg.world_size, a.warmup, a.reps);
    let session = Session::connect(&cfg, a.rank, opts)?;
    let mode = if session.peer_is_emulator() {
        Mode::Emulated
    } else {
        Mode::Baseline
    };
    let points = run_collbench(&session, &a.ops, &a.sizes, a.warmup, a.reps)?;
    session.close()?;
    let rows: Vec<MicrobenchResult> = points
        .iter()
        .map(|p| MicrobenchResult::from_point(p, mode))
        .collect();
    println!("{}", serde_json::to_string(&rows)?);
    Ok(())
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    rank: usize,
    #[arg(long, default_value_t = 100)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest vector length in elements.
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// JSON-lines file receiving one record per collective.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    connect: Option<String>,
}

pub fn verify(a: VerifyArgs) -> Result<()> {
    let cfg = JobConfig::load(&a.config)?;
    let mut opts = options(a.listen, a.connect);
    opts.plan = verify_plan(a.seed, a.trials, a.max_len);
    let session = Session::connect(&cfg, a.rank, opts)?;
    let records = run_verify(&session, a.seed, a.trials, a.max_len)?;
    session.close()?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{{\"rank\":{},\"records\":{}}}", a.rank, records.len());
    Ok(())
}
