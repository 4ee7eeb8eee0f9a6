use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use rollsim_core::dgds::wire::{serve, RemoteDraftService};
use rollsim_core::dgds::{DraftServer, DraftService, ShardMap};
use rollsim_core::scheduler::{run_iteration, MetricsReport};
use rollsim_core::workload::{generate_workload, length_summary, load_trace, save_trace, PromptGroup};
use serde::Deserialize;

use crate::config::ExperimentConfig;

pub const TRACE_FILE: &str = "trace.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const COMPARE_FILE: &str = "compare.csv";
pub const CONFIG_FILE: &str = "config.toml";

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?.next().is_some();
        if occupied && !force {
            bail!("output directory {} is not empty; pass --force to overwrite", dir.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Write the iteration-0 trace to `<out>/trace.jsonl`. Replaying it with
/// `run --trace` reproduces iteration 0 of a generating run.
pub fn generate(cfg: &ExperimentConfig, force: bool) -> Result<PathBuf> {
    let groups = generate_workload(&cfg.workload_for(0))?;
    prepare_out_dir(&cfg.out, force)?;
    let path = cfg.out.join(TRACE_FILE);
    save_trace(&groups, &path).with_context(|| format!("writing {}", path.display()))?;
    let s = length_summary(&groups)?;
    eprintln!(
        "wrote {}: {} groups, {} requests, p50 {} p90 {} p99 {} max {}",
        path.display(),
        groups.len(),
        s.requests,
        s.p50,
        s.p90,
        s.p99,
        s.max
    );
    Ok(path)
}

fn file_stem(policy: &str) -> String {
    policy.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Run every (iteration, policy) pair; writes `summary.csv`, `config.toml`
/// and `runs/<policy>-<iteration>/timeline.jsonl`.
pub fn run(cfg: &ExperimentConfig, force: bool) -> Result<Vec<MetricsReport>> {
    let policies = cfg.policy_specs()?;
    let trace = match &cfg.trace {
        Some(p) => Some(load_trace(p).with_context(|| format!("loading trace {}", p.display()))?),
        None => None,
    };
    let remote = match &cfg.service_dgds {
        Some(addr) => Some(
            RemoteDraftService::connect(addr.as_str()).with_context(|| format!("connecting to draft server {addr}"))?,
        ),
        None => None,
    };
    prepare_out_dir(&cfg.out, force)?;
    fs::write(cfg.out.join(CONFIG_FILE), cfg.to_toml()?)?;
    // keeps this invocation's groups apart from others on a shared server
    let session = format!(
        "{}-{}",
        std::process::id(),
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0)
    );
    let mut reports = Vec::new();
    for i in 0..cfg.iterations {
        let generated;
        let groups: &[PromptGroup] = match &trace {
            Some(t) => t,
            None => {
                generated = generate_workload(&cfg.workload_for(i))?;
                &generated
            }
        };
        for policy in &policies {
            let mut sim = cfg.sim_for(i);
            if remote.is_some() {
                sim.dgds_namespace = format!("{session}/{i}/{}/", policy.name);
            }
            let svc = remote.as_ref().map(|r| r as &dyn DraftService);
            let r = run_iteration(groups, policy, &sim, i, svc)
                .with_context(|| format!("policy {} iteration {i}", policy.name))?;
            eprintln!(
                "{:<18} iter {i}: completion {:.1}s  throughput {:.1} tok/s  tail {:.1}s  preemptions {}",
                r.policy, r.completion_time, r.throughput, r.tail_latency, r.preemption_count
            );
            let dir = cfg.out.join("runs").join(format!("{}-{i}", file_stem(&policy.name)));
            fs::create_dir_all(&dir)?;
            r.write_timeline_jsonl(BufWriter::new(File::create(dir.join("timeline.jsonl"))?))?;
            reports.push(r);
        }
    }
    MetricsReport::write_summary_csv(&reports, BufWriter::new(File::create(cfg.out.join(SUMMARY_FILE))?))?;
    Ok(reports)
}

/// The summary.csv columns that compare and report read.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub iteration: u32,
    pub trace_fingerprint: String,
    pub params_fingerprint: String,
    pub requests: usize,
    pub completion_time_s: f64,
    pub throughput_tok_s: f64,
    pub tail_latency_s: f64,
    pub preemptions: u64,
    pub max_kv_utilization: f64,
    pub mean_acceptance_length: f64,
    pub fidelity_mismatches: u64,
}

pub fn read_summary(dir: &Path) -> Result<Vec<SummaryRow>> {
    let path = dir.join(SUMMARY_FILE);
    let mut rd = csv::Reader::from_path(&path).with_context(|| format!("opening {}", path.display()))?;
    rd.deserialize().collect::<Result<Vec<SummaryRow>, _>>().with_context(|| format!("reading {}", path.display()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub policy: String,
    pub iterations: usize,
    pub throughput: f64,
    /// Mean over iterations of throughput / the first policy's throughput.
    pub multiplier: f64,
    pub tail_latency: f64,
    /// Mean over iterations of tail latency / the first policy's tail latency.
    pub tail_ratio: f64,
    pub preemptions: f64,
    pub acceptance_length: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a / b
    }
}

/// Normalize every policy against the first one, iteration by iteration.
pub fn compare_rows(rows: &[SummaryRow]) -> Result<Vec<Comparison>> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_policy: BTreeMap<&str, BTreeMap<u32, &SummaryRow>> = BTreeMap::new();
    for r in rows {
        if !order.contains(&r.policy.as_str()) {
            order.push(&r.policy);
        }
        if by_policy.entry(&r.policy).or_default().insert(r.iteration, r).is_some() {
            bail!("policy {} has two rows for iteration {}", r.policy, r.iteration);
        }
    }
    if order.len() < 2 {
        bail!("need reports from at least two policies, found {}", order.len());
    }
    if let Some(r) = rows.iter().find(|r| r.params_fingerprint != rows[0].params_fingerprint) {
        bail!(
            "reports were produced with different simulator parameters ({} has {}, {} has {}); refusing to compare",
            rows[0].policy,
            rows[0].params_fingerprint,
            r.policy,
            r.params_fingerprint
        );
    }
    let base = &by_policy[order[0]];
    for p in &order[1..] {
        let runs = &by_policy[p];
        if runs.keys().ne(base.keys()) {
            bail!("policy {p} covers different iterations than {}; refusing to compare", order[0]);
        }
        for (i, r) in runs {
            if r.trace_fingerprint != base[i].trace_fingerprint {
                bail!(
                    "iteration {i} of {p} ran on a different trace ({} vs {}); refusing to compare",
                    r.trace_fingerprint,
                    base[i].trace_fingerprint
                );
            }
        }
    }
    let out = order
        .iter()
        .map(|p| {
            let runs = &by_policy[p];
            let n = runs.len() as f64;
            let mean = |f: &dyn Fn(&SummaryRow, &SummaryRow) -> f64| runs.iter().map(|(i, r)| f(r, base[i])).sum::<f64>() / n;
            Comparison {
                policy: p.to_string(),
                iterations: runs.len(),
                throughput: mean(&|r, _| r.throughput_tok_s),
                multiplier: mean(&|r, b| ratio(r.throughput_tok_s, b.throughput_tok_s)),
                tail_latency: mean(&|r, _| r.tail_latency_s),
                tail_ratio: mean(&|r, b| ratio(r.tail_latency_s, b.tail_latency_s)),
                preemptions: mean(&|r, _| r.preemptions as f64),
                acceptance_length: mean(&|r, _| r.mean_acceptance_length),
            }
        })
        .collect();
    Ok(out)
}

pub fn comparison_table(rows: &[Comparison]) -> String {
    let mut s = format!(
        "{:<20} {:>5} {:>14} {:>9} {:>10} {:>10} {:>12} {:>10}\n",
        "policy", "iters", "throughput", "speedup", "tail (s)", "tail ratio", "preemptions", "accept len"
    );
    for c in rows {
        writeln!(
            s,
            "{:<20} {:>5} {:>14.1} {:>8.2}× {:>10.1} {:>10.2} {:>12.0} {:>10.2}",
            c.policy, c.iterations, c.throughput, c.multiplier, c.tail_latency, c.tail_ratio, c.preemptions, c.acceptance_length
        )
        .unwrap();
    }
    s
}

pub fn comparison_csv(rows: &[Comparison]) -> String {
    let mut s = String::from(
        "policy,iterations,throughput_tok_s,throughput_multiplier,tail_latency_s,tail_ratio,preemptions,mean_acceptance_length\n",
    );
    for c in rows {
        writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            c.policy, c.iterations, c.throughput, c.multiplier, c.tail_latency, c.tail_ratio, c.preemptions, c.acceptance_length
        )
        .unwrap();
    }
    s
}

/// Compare the summaries in `dirs`; writes `compare.csv` into the first one.
pub fn compare(dirs: &[PathBuf]) -> Result<String> {
    let mut rows = Vec::new();
    for d in dirs {
        rows.extend(read_summary(d)?);
    }
    let table = compare_rows(&rows)?;
    fs::write(dirs[0].join(COMPARE_FILE), comparison_csv(&table))?;
    Ok(comparison_table(&table))
}

/// Per-run table of a results directory.
pub fn report_runs(dir: &Path) -> Result<String> {
    let rows = read_summary(dir)?;
    let mut s = format!(
        "{:<20} {:>5} {:>12} {:>14} {:>10} {:>12} {:>8} {:>10} {:>8}\n",
        "policy", "iter", "time (s)", "throughput", "tail (s)", "preemptions", "max kv", "accept len", "faithful"
    );
    for r in rows {
        writeln!(
            s,
            "{:<20} {:>5} {:>12.1} {:>14.1} {:>10.1} {:>12} {:>8.3} {:>10.2} {:>8}",
            r.policy,
            r.iteration,
            r.completion_time_s,
            r.throughput_tok_s,
            r.tail_latency_s,
            r.preemptions,
            r.max_kv_utilization,
            r.mean_acceptance_length,
            if r.fidelity_mismatches == 0 { "yes" } else { "NO" }
        )
        .unwrap();
    }
    Ok(s)
}

/// Output-length distribution of a trace as a text histogram.
pub fn report_trace(path: &Path) -> Result<String> {
    let groups = load_trace(path).with_context(|| format!("loading trace {}", path.display()))?;
    let s = length_summary(&groups)?;
    let mut out = format!(
        "{} groups, {} requests; output length p50 {} p90 {} p99 {} max {}\n",
        groups.len(),
        s.requests,
        s.p50,
        s.p90,
        s.p99,
        s.max
    );
    let peak = s.histogram.iter().map(|b| b.count).max().unwrap_or(0).max(1);
    for b in &s.histogram {
        let bar = "#".repeat((b.count * 50).div_ceil(peak));
        writeln!(out, "{:>8}..{:<8} {:>7} {bar}", b.lo, b.hi, b.count).unwrap();
    }
    Ok(out)
}

/// Serve the draft service on `listen` until the process ends.
pub fn serve_dgds(listen: &str, shards: usize) -> Result<()> {
    let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    let map = ShardMap::from_env(shards);
    eprintln!("draft server listening on {} ({} shards)", listener.local_addr()?, map.shard_count);
    serve(listener, Arc::new(DraftServer::new(map)))?;
    Ok(())
}
