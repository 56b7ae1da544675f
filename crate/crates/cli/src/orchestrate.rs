//! Experiment drivers. They spawn `cemu` child processes on loopback and
//! aggregate the JSON summaries those print.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::de::DeserializeOwned;

use cemu::bench::{
    overhead_ratios, relative_error, tail_slope, FidelityRow, MicrobenchResult, SweepPoint,
    FIDELITY_HEADER, MICROBENCH_HEADER, SWEEP_HEADER,
};
use cemu::config::{DelayKind, JobConfig};
use cemu::dag::CollectiveKind;
use cemu::harness::{bucketize, ModelSpec, PROFILE_BUCKET_BYTES, PROFILE_NAMES};
use cemu::report::{fit_slope, pool, write_csv, Summary};

use crate::roles::{load_model, parse_op, parse_size, WorkerSummary};
use crate::Common;

/// Largest emulated/baseline time ratio accepted at sizes ≥ 2 MiB.
pub const MICROBENCH_TOLERANCE: f64 = 1.05;
pub const FIDELITY_TOLERANCE: f64 = 0.05;
/// Accepted tail slope, as a fraction of the bucket count.
pub const SLOPE_BAND: (f64, f64) = (0.9, 1.1);

struct Workdir(PathBuf);

impl Workdir {
    fn new(tag: &str) -> Result<Workdir> {
        let dir = std::env::temp_dir().join(format!("cemu-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        Ok(Workdir(dir))
    }

    fn write_config(&self, name: &str, cfg: &JobConfig) -> Result<PathBuf> {
        let path = self.0.join(name);
        std::fs::write(&path, cfg.render())?;
        Ok(path)
    }
}

impl Drop for Workdir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn free_port() -> Result<String> {
    let l = TcpListener::bind("127.0.0.1:0")?;
    Ok(l.local_addr()?.to_string())
}

/// Loads `--config` (or a loopback default) and assigns fresh ports.
fn prepare_config(common: &Common) -> Result<JobConfig> {
    let mut cfg = match &common.config {
        Some(p) => JobConfig::load(p)?,
        None => {
            let mut c = JobConfig::local(common.world_size, &[0])?;
            c.bucket_bytes = PROFILE_BUCKET_BYTES;
            c
        }
    };
    cfg.endpoints = (0..cfg.world_size)
        .map(|_| free_port())
        .collect::<Result<_>>()?;
    Ok(cfg)
}

fn real_rank(cfg: &JobConfig) -> Result<usize> {
    match cfg.real_ranks.iter().collect::<Vec<_>>()[..] {
        [r] => Ok(*r),
        _ => bail!("emulated runs need exactly one real rank"),
    }
}

struct Child {
    name: String,
    proc: std::process::Child,
}

fn spawn(name: String, args: &[String]) -> Result<Child> {
    let exe = std::env::current_exe()?;
    let proc = Command::new(exe)
        .args(args)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .with_context(|| format!("spawning {name}"))?;
    Ok(Child { name, proc })
}

/// Waits for every child and returns the last stdout line of each. A
/// failing or overdue child takes the others down with it.
fn finish(mut children: Vec<Child>, timeout: Duration) -> Result<Vec<String>> {
    let deadline = Instant::now() + timeout;
    let mut done = vec![false; children.len()];
    while done.iter().any(|d| !d) {
        for (i, c) in children.iter_mut().enumerate() {
            if done[i] {
                continue;
            }
            if let Some(status) = c.proc.try_wait()? {
                done[i] = true;
                if !status.success() {
                    let name = c.name.clone();
                    kill_all(&mut children);
                    bail!("{name} exited with {status}");
                }
            }
        }
        if Instant::now() > deadline {
            kill_all(&mut children);
            bail!("children still running after {timeout:?}");
        }
        thread::sleep(Duration::from_millis(20));
    }
    children
        .into_iter()
        .map(|c| {
            let out = c.proc.wait_with_output()?;
            let text = String::from_utf8_lossy(&out.stdout).into_owned();
            Ok(text.lines().last().unwrap_or_default().to_string())
        })
        .collect()
}

fn kill_all(children: &mut [Child]) {
    for c in children {
        let _ = c.proc.kill();
        let _ = c.proc.wait();
    }
}

fn parse_line<T: DeserializeOwned>(line: &str) -> Result<T> {
    serde_json::from_str(line).with_context(|| format!("unexpected child output {line:?}"))
}

fn s(v: impl ToString) -> String {
    v.to_string()
}

/// Runs `role` on every rank of an all-real ring; returns rank 0's output.
fn run_baseline(
    cfg_path: &Path,
    n: usize,
    role: &str,
    extra: &[String],
    timeout: Duration,
) -> Result<String> {
    let children = (0..n)
        .map(|rank| {
            let mut args = vec![
                s(role),
                s("--config"),
                s(cfg_path.display()),
                s("--rank"),
                s(rank),
            ];
            args.extend_from_slice(extra);
            spawn(format!("{role} rank {rank}"), &args)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(finish(children, timeout)?.swap_remove(0))
}

/// Runs the emulator and `role` on the real rank; returns the role's output.
#[allow(clippy::too_many_arguments)]
fn run_emulated(
    worker_cfg: &Path,
    emu_cfg: &Path,
    rank: usize,
    role: &str,
    extra: &[String],
    trace: Option<&Path>,
    timeout: Duration,
) -> Result<String> {
    let mut emu_args = vec![
        s("emulator"),
        s("--config"),
        s(emu_cfg.display()),
        s("--once"),
    ];
    if let Some(t) = trace {
        emu_args.extend([s("--trace"), s(t.display())]);
    }
    let emu = spawn(s("emulator"), &emu_args)?;
    let mut args = vec![
        s(role),
        s("--config"),
        s(worker_cfg.display()),
        s("--rank"),
        s(rank),
    ];
    args.extend_from_slice(extra);
    let worker = match spawn(format!("{role} rank {rank}"), &args) {
        Ok(w) => w,
        Err(e) => {
            kill_all(&mut [emu]);
            return Err(e);
        }
    };
    Ok(finish(vec![worker, emu], timeout)?.swap_remove(0))
}

#[derive(Args, Debug)]
pub struct MicrobenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', value_parser = parse_size,
          default_value = "1KB,4KB,32KB,256KB,2MB,16MB,128MB")]
    sizes: Vec<u64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_op, default_value = "allreduce,allgather")]
    ops: Vec<CollectiveKind>,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
}

pub fn microbench(a: MicrobenchArgs) -> Result<bool> {
    let cfg = prepare_config(&a.common)?;
    let rank = real_rank(&cfg)?;
    let dir = Workdir::new("micro")?;
    let path = dir.write_config("job.toml", &cfg)?;
    let timeout = Duration::from_secs(a.common.timeout_s);
    let ops: Vec<&str> = a.ops.iter().map(|o| o.as_str()).collect();
    let sizes: Vec<String> = a.sizes.iter().map(u64::to_string).collect();
    let extra = vec![
        s("--ops"),
        ops.join(","),
        s("--sizes"),
        sizes.join(","),
        s("--reps"),
        s(a.reps),
        s("--warmup"),
        s(a.warmup),
    ];
    let mut rows: Vec<MicrobenchResult> = parse_line(&run_baseline(
        &path,
        cfg.world_size,
        "collbench",
        &extra,
        timeout,
    )?)?;
    let emulated: Vec<MicrobenchResult> = parse_line(&run_emulated(
        &path,
        &path,
        rank,
        "collbench",
        &extra,
        a.common.trace.as_deref(),
        timeout,
    )?)?;
    rows.extend(emulated);
    if let Some(out) = &a.common.out {
        write_csv(out, &MICROBENCH_HEADER, &rows, a.common.deterministic)?;
    }
    println!(
        "{:<10} {:>12} {:>14} {:>14} {:>8}",
        "op", "size_bytes", "baseline_us", "emulated_us", "ratio"
    );
    let mut ok = true;
    for (op, size, ratio) in overhead_ratios(&rows) {
        let mean = |mode| {
            rows.iter()
                .find(|r| r.op == op && r.size_bytes == size && r.mode == mode)
                .map_or(f64::NAN, |r| r.mean_us)
        };
        println!(
            "{:<10} {:>12} {:>14.1} {:>14.1} {:>8.3}",
            op.as_str(),
            size,
            mean(cemu::bench::Mode::Baseline),
            mean(cemu::bench::Mode::Emulated),
            ratio
        );
        if size >= 2 << 20 && ratio > MICROBENCH_TOLERANCE {
            ok = false;
        }
    }
    Ok(ok || !a.common.check)
}

#[derive(Args, Debug)]
pub struct E2eArgs {
    #[command(flatten)]
    common: Common,
    /// Profiles to compare; all shipped profiles by default.
    #[arg(long, value_delimiter = ',')]
    profile: Vec<String>,
    /// Compare a model file instead of the profiles.
    #[arg(long, conflicts_with = "profile")]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    /// Alternating baseline/emulated runs per profile, pooled.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    rounds: u32,
}

fn pooled(xs: &[WorkerSummary]) -> Summary {
    pool(
        &xs.iter()
            .map(|x| Summary {
                mean: x.mean_us,
                stddev: x.stddev_us,
                count: x.count,
            })
            .collect::<Vec<_>>(),
    )
}

pub fn e2e(a: E2eArgs) -> Result<bool> {
    let cfg = prepare_config(&a.common)?;
    let rank = real_rank(&cfg)?;
    let dir = Workdir::new("e2e")?;
    let path = dir.write_config("job.toml", &cfg)?;
    let timeout = Duration::from_secs(a.common.timeout_s);
    let models: Vec<(Vec<String>, String)> = match &a.model {
        Some(m) => vec![(vec![s("--model"), s(m.display())], ModelSpec::load(m)?.name)],
        None => {
            let names: Vec<String> = if a.profile.is_empty() {
                PROFILE_NAMES.iter().map(s).collect()
            } else {
                a.profile.clone()
            };
            names
                .into_iter()
                .map(|n| (vec![s("--profile"), n.clone()], n))
                .collect()
        }
    };
    let mut rows = Vec::new();
    for (model_args, name) in models {
        let mut extra = model_args;
        extra.extend([s("--iters"), s(a.iters), s("--warmup"), s(a.warmup)]);
        let (mut base, mut emu) = (Vec::new(), Vec::new());
        for _ in 0..a.rounds {
            let b: WorkerSummary = parse_line(&run_baseline(
                &path,
                cfg.world_size,
                "worker",
                &extra,
                timeout,
            )?)?;
            base.push(b);
            let e: WorkerSummary = parse_line(&run_emulated(
                &path,
                &path,
                rank,
                "worker",
                &extra,
                a.common.trace.as_deref(),
                timeout,
            )?)?;
            emu.push(e);
        }
        let (b, e) = (pooled(&base), pooled(&emu));
        let cpu =
            |xs: &[WorkerSummary]| xs.iter().map(|x| x.cpu_share).sum::<f64>() / xs.len() as f64;
        rows.push(FidelityRow {
            profile: name,
            iterations: b.count.min(e.count),
            baseline_mean_us: b.mean,
            baseline_stddev_us: b.stddev,
            emulated_mean_us: e.mean,
            emulated_stddev_us: e.stddev,
            rel_error: relative_error(b.mean, e.mean),
            baseline_cpu_share: cpu(&base),
            emulated_cpu_share: cpu(&emu),
        });
    }
    if let Some(out) = &a.common.out {
        write_csv(out, &FIDELITY_HEADER, &rows, a.common.deterministic)?;
    }
    println!(
        "{:<10} {:>20} {:>20} {:>8} {:>7} {:>7}",
        "profile", "baseline_us", "emulated_us", "error", "cpu_b", "cpu_e"
    );
    for r in &rows {
        println!(
            "{:<10} {:>11.1} ± {:<6.1} {:>11.1} ± {:<6.1} {:>7.2}% {:>7.2} {:>7.2}",
            r.profile,
            r.baseline_mean_us,
            r.baseline_stddev_us,
            r.emulated_mean_us,
            r.emulated_stddev_us,
            100.0 * r.rel_error,
            r.baseline_cpu_share,
            r.emulated_cpu_share
        );
    }
    let ok = rows.iter().all(|r| r.rel_error <= FIDELITY_TOLERANCE);
    Ok(ok || !a.common.check)
}

#[derive(Args, Debug)]
pub struct WhatifArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "bert-like", conflicts_with = "model")]
    profile: String,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Injected delays in milliseconds.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2,4,6,8,10")]
    delays_ms: Vec<f64>,
    /// Delays above this many microseconds form the fitted tail; defaults
    /// to the longest per-bucket backward time.
    #[arg(long)]
    knee_us: Option<f64>,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
}

/// Longest backward time covered by one bucket.
fn max_bucket_backward_us(model: &ModelSpec, bucket_bytes: u64) -> f64 {
    bucketize(model, bucket_bytes)
        .iter()
        .map(|b| {
            model.layers[b.layers.clone()]
                .iter()
                .map(|l| l.backward_us)
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

pub fn whatif(a: WhatifArgs) -> Result<bool> {
    if a.delays_ms.is_empty() {
        bail!("no delays given");
    }
    if let Some(d) = a.delays_ms.iter().find(|d| !d.is_finite() || **d < 0.0) {
        bail!("delays must be ≥ 0, got {d}");
    }
    let cfg = prepare_config(&a.common)?;
    let rank = real_rank(&cfg)?;
    let model = load_model(a.model.as_ref(), Some(&a.profile))?;
    let buckets = bucketize(&model, cfg.bucket_bytes).len() as f64;
    let knee = a
        .knee_us
        .unwrap_or_else(|| max_bucket_backward_us(&model, cfg.bucket_bytes));
    let dir = Workdir::new("whatif")?;
    let path = dir.write_config("job.toml", &cfg)?;
    let timeout = Duration::from_secs(a.common.timeout_s);
    let mut extra = match &a.model {
        Some(m) => vec![s("--model"), s(m.display())],
        None => vec![s("--profile"), a.profile.clone()],
    };
    extra.extend([s("--iters"), s(a.iters), s("--warmup"), s(a.warmup)]);
    let mut points = Vec::new();
    for (i, d_ms) in a.delays_ms.iter().enumerate() {
        let mut emu_cfg = cfg.clone();
        emu_cfg.delay.kind = DelayKind::None;
        emu_cfg.delay.inject_us = d_ms * 1000.0;
        let emu_path = dir.write_config(&format!("emu{i}.toml"), &emu_cfg)?;
        let summary: WorkerSummary = parse_line(&run_emulated(
            &path,
            &emu_path,
            rank,
            "worker",
            &extra,
            a.common.trace.as_deref(),
            timeout,
        )?)?;
        points.push(SweepPoint {
            inject_us: d_ms * 1000.0,
            mean_us: summary.mean_us,
            stddev_us: summary.stddev_us,
        });
    }
    if let Some(out) = &a.common.out {
        write_csv(out, &SWEEP_HEADER, &points, a.common.deterministic)?;
    }
    println!("{:>10} {:>14} {:>10}", "inject_us", "mean_us", "stddev_us");
    for p in &points {
        println!(
            "{:>10.0} {:>14.1} {:>10.1}",
            p.inject_us, p.mean_us, p.stddev_us
        );
    }
    let head: Vec<&SweepPoint> = points.iter().filter(|p| p.inject_us < knee).collect();
    let head_slope = fit_slope(
        &head.iter().map(|p| p.inject_us).collect::<Vec<_>>(),
        &head.iter().map(|p| p.mean_us).collect::<Vec<_>>(),
    );
    let tail = tail_slope(&points, knee);
    let show = |v: Option<f64>| v.map_or_else(|| s("absent"), |v| format!("{v:.3}"));
    println!(
        "buckets {buckets}, knee {knee:.0} us, head slope {}, tail slope {}",
        show(head_slope),
        show(tail)
    );
    let tail_ok = tail.is_some_and(|t| t >= SLOPE_BAND.0 * buckets && t <= SLOPE_BAND.1 * buckets);
    let head_ok = head_slope.is_none_or(|h| h < buckets);
    Ok((tail_ok && head_ok) || !a.common.check)
}
