use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::error::Result;

/// Time spent solely on the last 10% of requests: t_end − t_(⌈0.9N⌉).
pub fn tail_latency(finish_times: &[f64]) -> f64 {
    if finish_times.is_empty() {
        return 0.0;
    }
    let mut t = finish_times.to_vec();
    t.sort_by(f64::total_cmp);
    let n = t.len();
    let rank = ((0.9 * n as f64).ceil() as usize).clamp(1, n);
    t[n - 1] - t[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineSample {
    pub time: f64,
    pub kv_used: u64,
    pub kv_capacity: u64,
    pub running: u32,
    pub buffered: u32,
    /// Tokens emitted per request-step since the previous sample.
    pub acceptance_length: f64,
    pub mean_draft_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub time: f64,
    pub instance: u32,
    pub batch: u32,
    pub drafted: u64,
    pub accepted: u64,
    pub emitted: u64,
    pub kv_used: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub policy: String,
    pub iteration: u32,
    pub seed: u64,
    pub trace_fingerprint: String,
    pub params_fingerprint: String,
    pub requests: usize,
    pub output_tokens: u64,
    pub completion_time: f64,
    pub throughput: f64,
    pub tail_latency: f64,
    pub preemption_count: u64,
    pub recompute_tokens: u64,
    pub max_kv_utilization: f64,
    pub kv_violations: u64,
    pub steps: u64,
    pub drafted_tokens: u64,
    pub accepted_tokens: u64,
    pub mean_acceptance_length: f64,
    pub offloads: u64,
    pub loads: u64,
    pub fairness_picks: u64,
    pub dgds_bytes_fetched: u64,
    pub dgds_appends: u64,
    pub fidelity_mismatches: u64,
    pub kv_conserved: bool,
    /// Per request, in trace order.
    pub completion_times: Vec<f64>,
    pub timeline: Vec<TimelineSample>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub step_log: Vec<StepRecord>,
}

pub const SUMMARY_HEADER: &str = "policy,iteration,seed,trace_fingerprint,params_fingerprint,requests,output_tokens,\
completion_time_s,throughput_tok_s,tail_latency_s,preemptions,recompute_tokens,max_kv_utilization,kv_violations,\
steps,drafted_tokens,accepted_tokens,mean_acceptance_length,offloads,loads,fairness_picks,dgds_bytes_fetched,\
dgds_appends,fidelity_mismatches,kv_conserved";

impl MetricsReport {
    pub fn fidelity_ok(&self) -> bool {
        self.fidelity_mismatches == 0
    }

    /// One summary.csv row with fixed float precision.
    pub fn summary_row(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{},{},{:.6},{},{},{},{},{:.6},{},{},{},{},{},{},{}",
            self.policy,
            self.iteration,
            self.seed,
            self.trace_fingerprint,
            self.params_fingerprint,
            self.requests,
            self.output_tokens,
            self.completion_time,
            self.throughput,
            self.tail_latency,
            self.preemption_count,
            self.recompute_tokens,
            self.max_kv_utilization,
            self.kv_violations,
            self.steps,
            self.drafted_tokens,
            self.accepted_tokens,
            self.mean_acceptance_length,
            self.offloads,
            self.loads,
            self.fairness_picks,
            self.dgds_bytes_fetched,
            self.dgds_appends,
            self.fidelity_mismatches,
            self.kv_conserved,
        )
        .unwrap();
        s
    }

    pub fn write_summary_csv<W: Write>(reports: &[MetricsReport], mut w: W) -> Result<()> {
        writeln!(w, "{SUMMARY_HEADER}")?;
        for r in reports {
            writeln!(w, "{}", r.summary_row())?;
        }
        Ok(())
    }

    /// Line-delimited records: timeline samples, then step records, then one
    /// record per request completion.
    pub fn write_timeline_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        #[serde(tag = "type", rename_all = "snake_case")]
        enum Row<'a> {
            Sample(&'a TimelineSample),
            Step(&'a StepRecord),
            Completion { request: usize, time: f64 },
        }
        for s in &self.timeline {
            serde_json::to_writer(&mut w, &Row::Sample(s))?;
            writeln!(w)?;
        }
        for s in &self.step_log {
            serde_json::to_writer(&mut w, &Row::Step(s))?;
            writeln!(w)?;
        }
        for (request, &time) in self.completion_times.iter().enumerate() {
            serde_json::to_writer(&mut w, &Row::Completion { request, time })?;
            writeln!(w)?;
        }
        Ok(())
    }
}
