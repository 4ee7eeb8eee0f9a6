//! Browser demo exports. Each function takes plain values and returns a JSON
//! string; failures come back as `{"error": "..."}`.

use std::collections::HashMap;

use rollsim_core::cst::{Cutoffs, GroupDraftIndex, SpeculationArgs};
use rollsim_core::presets::preset;
use rollsim_core::scheduler::{run_iteration, PolicySpec};
use rollsim_core::util::derive_seed;
use rollsim_core::workload::{generate_lengths, generate_workload, nearest_rank, trace_fingerprint};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Points kept per plotted curve.
const CURVE_POINTS: usize = 200;

fn respond<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

fn thin<T: Copy>(points: &[T]) -> Vec<T> {
    if points.len() <= CURVE_POINTS {
        return points.to_vec();
    }
    let step = points.len() as f64 / CURVE_POINTS as f64;
    let mut out: Vec<T> = (0..CURVE_POINTS).map(|i| points[(i as f64 * step) as usize]).collect();
    out.push(*points.last().unwrap());
    out
}

#[derive(Serialize)]
struct PolicyCurve {
    policy: String,
    completion_time: f64,
    throughput: f64,
    tail_latency: f64,
    preemptions: u64,
    acceptance_length: f64,
    /// (time, share of requests finished)
    finished: Vec<(f64, f64)>,
    /// (time, KV utilization)
    kv: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct Curves {
    trace_fingerprint: String,
    requests: usize,
    instances: u32,
    policies: Vec<PolicyCurve>,
}

fn curves(preset_name: &str, scale: f64, seed: u64, policies: &str) -> Result<Curves, String> {
    let p = preset(preset_name, scale, seed).map_err(|e| e.to_string())?;
    let groups = generate_workload(&p.workload).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for name in policies.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let spec = PolicySpec::parse(name).map_err(|e| e.to_string())?;
        let r = run_iteration(&groups, &spec, &p.sim, 0, None).map_err(|e| e.to_string())?;
        let mut done = r.completion_times.clone();
        done.sort_by(f64::total_cmp);
        let n = done.len() as f64;
        let finished: Vec<(f64, f64)> = done.iter().enumerate().map(|(i, &t)| (t, (i + 1) as f64 / n)).collect();
        let kv: Vec<(f64, f64)> = r
            .timeline
            .iter()
            .map(|s| (s.time, if s.kv_capacity == 0 { 0.0 } else { s.kv_used as f64 / s.kv_capacity as f64 }))
            .collect();
        out.push(PolicyCurve {
            policy: r.policy.clone(),
            completion_time: r.completion_time,
            throughput: r.throughput,
            tail_latency: r.tail_latency,
            preemptions: r.preemption_count,
            acceptance_length: r.mean_acceptance_length,
            finished: thin(&finished),
            kv: thin(&kv),
        });
    }
    if out.is_empty() {
        return Err("no policies given".into());
    }
    Ok(Curves {
        trace_fingerprint: format!("{:016x}", trace_fingerprint(&groups)),
        requests: groups.iter().map(|g| g.outputs.len()).sum(),
        instances: p.sim.instances,
        policies: out,
    })
}

/// Simulate one iteration of a preset under each comma-separated policy and
/// return completion and KV-utilization curves. The run matches iteration 0
/// of `rollsim run` with the same preset, scale and seed.
#[wasm_bindgen]
pub fn simulate_curves(preset_name: &str, scale: f64, seed: u32, policies: &str) -> String {
    respond(curves(preset_name, scale, derive_seed(seed as u64, 0), policies))
}

#[derive(Serialize)]
struct Path {
    text: String,
    score: f64,
    support: u32,
}

fn speculate_text(corpus: &str, context: &str, max_spec: u32, top_k: u32) -> Result<Vec<Path>, String> {
    let mut ids: HashMap<&str, u32> = HashMap::new();
    let mut words: Vec<&str> = Vec::new();
    let mut intern = |w| {
        *ids.entry(w).or_insert_with(|| {
            words.push(w);
            words.len() as u32 - 1
        })
    };
    let mut idx = GroupDraftIndex::new("demo");
    for (r, line) in corpus.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let toks: Vec<u32> = line.split_whitespace().map(&mut intern).collect();
        idx.append(r as u32, 0, &toks).map_err(|e| e.to_string())?;
    }
    let pattern: Vec<u32> = context.split_whitespace().map(&mut intern).collect();
    let args = SpeculationArgs { max_spec_tokens: max_spec, pattern_lookup_max: 16, pattern_lookup_min: 1, top_k };
    args.validate().map_err(|e| e.to_string())?;
    let paths = idx.speculate_with(&pattern, &args, &Cutoffs::default());
    Ok(paths
        .into_iter()
        .map(|c| Path {
            text: c.tokens.iter().map(|&t| words[t as usize]).collect::<Vec<_>>().join(" "),
            score: c.score,
            support: c.support,
        })
        .collect())
}

/// Draft continuations of `context` from a corpus of responses, one per line,
/// with whitespace-separated words as tokens.
#[wasm_bindgen]
pub fn speculate(corpus: &str, context: &str, max_spec: u32, top_k: u32) -> String {
    respond(speculate_text(corpus, context, max_spec, top_k))
}

#[derive(Serialize)]
struct Bin {
    lo: u32,
    hi: u32,
    count: usize,
}

#[derive(Serialize)]
struct Histogram {
    requests: usize,
    max_tokens: u32,
    p50: u32,
    p90: u32,
    p99: u32,
    /// Share of requests cut off at the generation limit.
    truncated: f64,
    /// Mean over groups of the within-group coefficient of variation.
    within_group_cv: f64,
    bins: Vec<Bin>,
}

fn histogram(preset_name: &str, scale: f64, seed: u64, group_correlation: f64, bins: u32) -> Result<Histogram, String> {
    let mut p = preset(preset_name, scale, seed).map_err(|e| e.to_string())?;
    p.workload.length_model.group_correlation = group_correlation;
    let groups = generate_lengths(&p.workload).map_err(|e| e.to_string())?;
    let max = p.workload.max_tokens;
    let bins = bins.clamp(1, 200);
    let width = max.div_ceil(bins).max(1);
    let mut out: Vec<Bin> =
        (0..bins).map(|i| Bin { lo: i * width + 1, hi: ((i + 1) * width).min(max), count: 0 }).collect();
    let mut all = Vec::new();
    let mut cv_sum = 0.0;
    for (_, lens) in &groups {
        let n = lens.len() as f64;
        let mean = lens.iter().map(|&l| l as f64).sum::<f64>() / n;
        let var = lens.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n;
        cv_sum += var.sqrt() / mean;
        for &l in lens {
            out[((l - 1) / width) as usize].count += 1;
            all.push(l);
        }
    }
    all.sort_unstable();
    Ok(Histogram {
        requests: all.len(),
        max_tokens: max,
        p50: nearest_rank(&all, 0.5),
        p90: nearest_rank(&all, 0.9),
        p99: nearest_rank(&all, 0.99),
        truncated: all.iter().filter(|&&l| l == max).count() as f64 / all.len() as f64,
        within_group_cv: cv_sum / groups.len() as f64,
        bins: out,
    })
}

/// Output-length histogram of a preset's workload with the given
/// within-group length correlation.
#[wasm_bindgen]
pub fn length_histogram(preset_name: &str, scale: f64, seed: u32, group_correlation: f64, bins: u32) -> String {
    respond(histogram(preset_name, scale, derive_seed(seed as u64, 0), group_correlation, bins))
}
