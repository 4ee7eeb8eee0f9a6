//! Request buffer, per-group length estimates and dispatch policies.

mod metrics;
mod sim;

pub use metrics::{tail_latency, MetricsReport, StepRecord, TimelineSample, SUMMARY_HEADER};
pub use sim::{run_iteration, DgdsParams, FairnessParams, PolicySpec, SdMode, SimParams};

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvpool::RequestKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedVariant {
    GroupBaseline,
    DividedOnly,
    ContextAware,
    OracleLfs,
}

impl SchedVariant {
    pub fn name(self) -> &'static str {
        match self {
            SchedVariant::GroupBaseline => "group-baseline",
            SchedVariant::DividedOnly => "divided-only",
            SchedVariant::ContextAware => "context-aware",
            SchedVariant::OracleLfs => "oracle-lfs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "group-baseline" => SchedVariant::GroupBaseline,
            "divided-only" => SchedVariant::DividedOnly,
            "context-aware" => SchedVariant::ContextAware,
            "oracle-lfs" => SchedVariant::OracleLfs,
            _ => return Err(Error::Config(format!("unknown scheduler '{s}'"))),
        })
    }

    pub fn is_divided(self) -> bool {
        self != SchedVariant::GroupBaseline
    }
}

/// L̂_g per group: the longest finished member so far, or the original
/// max_tokens before any member finished.
#[derive(Debug, Clone, Default)]
pub struct ContextManager {
    ori_max: Vec<u32>,
    observed: Vec<Option<u32>>,
    completions: Vec<Vec<u32>>,
}

impl ContextManager {
    pub fn new(ori_max_tokens: Vec<u32>) -> Self {
        let n = ori_max_tokens.len();
        ContextManager { ori_max: ori_max_tokens, observed: vec![None; n], completions: vec![Vec::new(); n] }
    }

    pub fn estimate(&self, group: u32) -> u32 {
        let g = group as usize;
        self.observed[g].unwrap_or(self.ori_max[g])
    }

    pub fn completions(&self, group: u32) -> &[u32] {
        &self.completions[group as usize]
    }

    pub fn update_estimate(&mut self, group: u32, finished_len: u32) -> u32 {
        let g = group as usize;
        self.completions[g].push(finished_len);
        let v = self.observed[g].map_or(finished_len, |o| o.max(finished_len));
        self.observed[g] = Some(v);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferedRequest {
    pub key: RequestKey,
    pub prompt_len: u32,
    pub ori_max_tokens: u32,
    pub generated: u32,
    /// min(|output|, max_tokens); read only by the oracle policy.
    pub true_len: u32,
    pub enqueued_at: f64,
}

impl BufferedRequest {
    /// KV footprint once admitted with `budget` tokens reserved.
    pub fn footprint(&self, budget: u32) -> u64 {
        self.prompt_len as u64 + self.generated as u64 + budget as u64
    }
}

/// Q_spec holds each group's speculative request (index 0) under the
/// context-aware policy; everything else waits in C_rest.
#[derive(Debug, Clone, Default)]
pub struct RequestBuffer {
    pub spec_queue: Vec<BufferedRequest>,
    pub rest: Vec<BufferedRequest>,
}

impl RequestBuffer {
    pub fn new() -> Self {
        RequestBuffer::default()
    }

    pub fn len(&self) -> usize {
        self.spec_queue.len() + self.rest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn enqueue(&mut self, mut r: BufferedRequest, speculative: bool, now: f64) {
        r.enqueued_at = now;
        if speculative {
            self.spec_queue.push(r);
        } else {
            self.rest.push(r);
        }
    }

    pub fn contains(&self, key: RequestKey) -> bool {
        self.spec_queue.iter().chain(&self.rest).any(|r| r.key == key)
    }

    fn take(&mut self, from_spec: bool, i: usize) -> BufferedRequest {
        if from_spec {
            self.spec_queue.remove(i)
        } else {
            self.rest.remove(i)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceView {
    pub instance_id: u32,
    pub committed_tokens: u64,
    pub capacity_tokens: u64,
    pub running: u32,
    pub batch_cap: u32,
}

impl InstanceView {
    fn fits(&self, tokens: u64) -> bool {
        self.running < self.batch_cap && self.committed_tokens + tokens <= self.capacity_tokens
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Dispatch { request: BufferedRequest, instance: u32, chunk_budget: u32 },
    Stall(String),
    /// Nothing is waiting in the buffer.
    Done,
}

/// Chunk service statistics and per-group execution time, used by the
/// anti-starvation pick.
#[derive(Debug, Clone, Default)]
pub struct ExecLedger {
    service_times: Vec<f64>,
    median: Option<f64>,
    group_exec: BTreeMap<u32, f64>,
    running_groups: BTreeMap<u32, u32>,
    pub fairness_picks: u64,
}

impl ExecLedger {
    pub fn dispatched(&mut self, group: u32) {
        *self.running_groups.entry(group).or_default() += 1;
    }

    pub fn chunk_finished(&mut self, group: u32, service_time: f64) {
        if let Some(c) = self.running_groups.get_mut(&group) {
            *c -= 1;
            if *c == 0 {
                self.running_groups.remove(&group);
            }
        }
        *self.group_exec.entry(group).or_default() += service_time;
        self.service_times.push(service_time);
        let mut s = self.service_times.clone();
        let mid = s.len() / 2;
        let (_, m, _) = s.select_nth_unstable_by(mid, f64::total_cmp);
        self.median = Some(*m);
    }

    pub fn median_service_time(&self) -> Option<f64> {
        self.median
    }

    pub fn group_exec_time(&self, group: u32) -> f64 {
        self.group_exec.get(&group).copied().unwrap_or(0.0)
    }

    fn is_running(&self, group: u32) -> bool {
        self.running_groups.contains_key(&group)
    }
}

#[derive(Debug, Clone)]
pub struct SchedulerPolicy {
    pub variant: SchedVariant,
    pub chunk_size: u32,
    pub fairness: sim::FairnessParams,
}

fn lfs_order(a: &BufferedRequest, b: &BufferedRequest, ctx: &ContextManager, gids: &[String]) -> Ordering {
    let rem = |r: &BufferedRequest| r.ori_max_tokens - r.generated.min(r.ori_max_tokens);
    ctx.estimate(b.key.group)
        .cmp(&ctx.estimate(a.key.group))
        .then(rem(b).cmp(&rem(a)))
        .then_with(|| gids[a.key.group as usize].cmp(&gids[b.key.group as usize]))
        .then(a.key.index.cmp(&b.key.index))
}

fn sfs_order(a: &BufferedRequest, b: &BufferedRequest, gids: &[String]) -> Ordering {
    a.generated
        .cmp(&b.generated)
        .then_with(|| gids[a.key.group as usize].cmp(&gids[b.key.group as usize]))
        .then(a.key.index.cmp(&b.key.index))
}

/// First come first served by original request arrival (trace order); a
/// resubmitted chunk keeps its request's place.
fn arrival_order(a: &BufferedRequest, b: &BufferedRequest) -> Ordering {
    (a.key.group, a.key.index).cmp(&(b.key.group, b.key.index))
}

fn oracle_order(a: &BufferedRequest, b: &BufferedRequest, gids: &[String]) -> Ordering {
    let rem = |r: &BufferedRequest| r.true_len.saturating_sub(r.generated);
    rem(b)
        .cmp(&rem(a))
        .then_with(|| gids[a.key.group as usize].cmp(&gids[b.key.group as usize]))
        .then(a.key.index.cmp(&b.key.index))
}

fn argmin_by<T>(items: &[T], mut cmp: impl FnMut(&T, &T) -> Ordering) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..items.len() {
        if best.is_none_or(|b| cmp(&items[i], &items[b]) == Ordering::Less) {
            best = Some(i);
        }
    }
    best
}

/// Uniform seeded choice among C_rest requests of the group(s) with the least
/// cumulative execution time.
pub fn fairness_pick(rest: &[BufferedRequest], ledger: &ExecLedger, rng: &mut ChaCha8Rng) -> Option<usize> {
    let groups: BTreeSet<u32> = rest.iter().map(|r| r.key.group).collect();
    let least = groups.iter().map(|&g| ledger.group_exec_time(g)).min_by(f64::total_cmp)?;
    let tied: Vec<u32> = groups.into_iter().filter(|&g| ledger.group_exec_time(g) == least).collect();
    let g = *tied.choose(rng)?;
    let members: Vec<usize> = rest.iter().enumerate().filter(|(_, r)| r.key.group == g).map(|(i, _)| i).collect();
    Some(members[rng.gen_range(0..members.len() as u64) as usize])
}

/// Whether some group with buffered requests and nothing running has waited
/// longer than `wait_factor` median chunk service times.
fn starving(rest: &[BufferedRequest], ledger: &ExecLedger, wait_factor: f64, now: f64) -> bool {
    let Some(median) = ledger.median_service_time() else {
        return false;
    };
    let limit = wait_factor * median;
    rest.iter().any(|r| !ledger.is_running(r.key.group) && now - r.enqueued_at > limit)
}

/// One scheduling decision. Dispatching removes the request from the buffer.
#[allow(clippy::too_many_arguments)]
pub fn next_decision(
    buffer: &mut RequestBuffer,
    ctx: &ContextManager,
    ledger: &mut ExecLedger,
    policy: &SchedulerPolicy,
    instances: &[InstanceView],
    group_ids: &[String],
    rng: &mut ChaCha8Rng,
    now: f64,
) -> Decision {
    if buffer.is_empty() {
        return Decision::Done;
    }
    let (from_spec, i) = match policy.variant {
        SchedVariant::ContextAware if !buffer.spec_queue.is_empty() => {
            (true, argmin_by(&buffer.spec_queue, |a, b| sfs_order(a, b, group_ids)).unwrap())
        }
        SchedVariant::ContextAware => {
            let f = &policy.fairness;
            let pick = if f.enabled && starving(&buffer.rest, ledger, f.wait_factor, now) {
                fairness_pick(&buffer.rest, ledger, rng).inspect(|_| ledger.fairness_picks += 1)
            } else {
                None
            };
            (false, pick.unwrap_or_else(|| argmin_by(&buffer.rest, |a, b| lfs_order(a, b, ctx, group_ids)).unwrap()))
        }
        SchedVariant::OracleLfs | SchedVariant::DividedOnly | SchedVariant::GroupBaseline => {
            let all_rest = buffer.spec_queue.is_empty();
            let q = if all_rest { &buffer.rest } else { &buffer.spec_queue };
            let i = if policy.variant == SchedVariant::OracleLfs {
                argmin_by(q, |a, b| oracle_order(a, b, group_ids))
            } else {
                argmin_by(q, arrival_order)
            };
            (!all_rest, i.unwrap())
        }
    };
    let r = if from_spec { &buffer.spec_queue[i] } else { &buffer.rest[i] };
    let chunk_budget = policy.chunk_size.min(r.ori_max_tokens.saturating_sub(r.generated)).max(1);
    let need = r.footprint(chunk_budget);
    let target = instances
        .iter()
        .filter(|v| v.fits(need))
        .min_by(|a, b| a.committed_tokens.cmp(&b.committed_tokens).then(a.instance_id.cmp(&b.instance_id)));
    match target {
        Some(v) => {
            let instance = v.instance_id;
            let request = buffer.take(from_spec, i);
            ledger.dispatched(request.key.group);
            Decision::Dispatch { request, instance, chunk_budget }
        }
        None => Decision::Stall("no available instance for this cycle".into()),
    }
}

/// Group-to-instance assignment for the group-level baseline: seeded shuffle
/// of the groups, then round-robin.
pub fn group_assignment(groups: usize, instances: u32, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut order: Vec<usize> = (0..groups).collect();
    order.shuffle(rng);
    let mut out = vec![0; groups];
    for (slot, g) in order.into_iter().enumerate() {
        out[g] = (slot % instances as usize) as u32;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn req(group: u32, index: u32, generated: u32, max: u32) -> BufferedRequest {
        BufferedRequest {
            key: RequestKey::new(group, index),
            prompt_len: 100,
            ori_max_tokens: max,
            generated,
            true_len: max,
            enqueued_at: 0.0,
        }
    }

    fn view(id: u32, committed: u64) -> InstanceView {
        InstanceView { instance_id: id, committed_tokens: committed, capacity_tokens: 100_000, running: 0, batch_cap: 256 }
    }

    fn policy(variant: SchedVariant, fairness: bool) -> SchedulerPolicy {
        SchedulerPolicy { variant, chunk_size: 8192, fairness: sim::FairnessParams { enabled: fairness, wait_factor: 2.0 } }
    }

    fn gids(n: usize) -> Vec<String> {
        (0..n).map(|g| format!("g{g}")).collect()
    }

    fn decide(buf: &mut RequestBuffer, ctx: &ContextManager, p: &SchedulerPolicy, inst: &[InstanceView]) -> Decision {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        next_decision(buf, ctx, &mut ExecLedger::default(), p, inst, &gids(4), &mut rng, 0.0)
    }

    #[test]
    fn sfs_over_spec_queue() {
        let mut b = RequestBuffer::new();
        b.enqueue(req(0, 0, 4096, 65536), true, 0.0);
        b.enqueue(req(1, 0, 0, 65536), true, 0.0);
        b.enqueue(req(2, 1, 0, 65536), false, 0.0);
        let ctx = ContextManager::new(vec![65536; 4]);
        match decide(&mut b, &ctx, &policy(SchedVariant::ContextAware, false), &[view(0, 0)]) {
            Decision::Dispatch { request, .. } => assert_eq!(request.key, RequestKey::new(1, 0)),
            d => panic!("{d:?}"),
        }
    }

    #[test]
    fn lfs_by_estimate() {
        let mut b = RequestBuffer::new();
        b.enqueue(req(1, 1, 0, 65536), false, 0.0);
        b.enqueue(req(0, 1, 0, 65536), false, 0.0);
        let mut ctx = ContextManager::new(vec![65536; 4]);
        ctx.update_estimate(0, 60000);
        ctx.update_estimate(1, 9000);
        match decide(&mut b, &ctx, &policy(SchedVariant::ContextAware, false), &[view(0, 0)]) {
            Decision::Dispatch { request, .. } => assert_eq!(request.key.group, 0),
            d => panic!("{d:?}"),
        }
    }

    #[test]
    fn chunk_budget_is_min_of_chunk_and_remaining() {
        let mut b = RequestBuffer::new();
        b.enqueue(req(0, 1, 5000, 8000), false, 0.0);
        let ctx = ContextManager::new(vec![8000; 4]);
        match decide(&mut b, &ctx, &policy(SchedVariant::ContextAware, false), &[view(0, 0)]) {
            Decision::Dispatch { chunk_budget, .. } => assert_eq!(chunk_budget, 3000),
            d => panic!("{d:?}"),
        }
    }

    #[test]
    fn least_loaded_instance_that_fits() {
        let mut b = RequestBuffer::new();
        b.enqueue(req(0, 1, 0, 8192), false, 0.0);
        let ctx = ContextManager::new(vec![8192; 4]);
        let inst = [view(0, 50_000), view(1, 20_000), view(2, 95_000)];
        match decide(&mut b, &ctx, &policy(SchedVariant::DividedOnly, false), &inst) {
            Decision::Dispatch { instance, .. } => assert_eq!(instance, 1),
            d => panic!("{d:?}"),
        }
        b.enqueue(req(0, 2, 0, 8192), false, 0.0);
        let full = [view(0, 95_000), view(1, 99_000)];
        assert!(matches!(decide(&mut b, &ctx, &policy(SchedVariant::DividedOnly, false), &full), Decision::Stall(_)));
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn divided_only_serves_in_arrival_order() {
        let mut b = RequestBuffer::new();
        b.enqueue(req(1, 0, 0, 8192), false, 0.0);
        // a resubmitted chunk of an earlier request keeps its place
        b.enqueue(req(0, 3, 819, 8192), false, 5.0);
        let ctx = ContextManager::new(vec![8192; 2]);
        match decide(&mut b, &ctx, &policy(SchedVariant::DividedOnly, false), &[view(0, 0)]) {
            Decision::Dispatch { request, .. } => assert_eq!(request.key, RequestKey::new(0, 3)),
            d => panic!("{d:?}"),
        }
    }

    #[test]
    fn empty_buffer_is_done() {
        let mut b = RequestBuffer::new();
        let ctx = ContextManager::new(vec![]);
        assert_eq!(decide(&mut b, &ctx, &policy(SchedVariant::ContextAware, false), &[view(0, 0)]), Decision::Done);
    }

    #[test]
    fn estimate_uses_max_semantics() {
        let mut c = ContextManager::new(vec![65536, 65536]);
        assert_eq!(c.estimate(0), 65536);
        assert_eq!(c.update_estimate(0, 7000), 7000);
        assert_eq!(c.update_estimate(0, 5000), 7000);
        assert_eq!(c.update_estimate(1, 5000), 5000);
        assert_eq!(c.update_estimate(1, 7000), 7000);
    }

    #[test]
    fn fairness_prefers_least_served_group() {
        let mut ledger = ExecLedger::default();
        ledger.chunk_finished(1, 100.0);
        ledger.chunk_finished(2, 5.0);
        let rest = vec![req(1, 1, 0, 100), req(2, 1, 0, 100), req(2, 2, 0, 100)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let i = fairness_pick(&rest, &ledger, &mut rng).unwrap();
            assert_eq!(rest[i].key.group, 2);
        }
        let tied = vec![req(5, 0, 0, 100), req(6, 0, 0, 100)];
        let a: Vec<usize> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..16).map(|_| fairness_pick(&tied, &ledger, &mut r).unwrap()).collect()
        };
        let b: Vec<usize> = {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            (0..16).map(|_| fairness_pick(&tied, &ledger, &mut r).unwrap()).collect()
        };
        assert_eq!(a, b);
        assert!(a.contains(&0) && a.contains(&1));
    }

    #[test]
    fn fairness_trigger_and_off_switch() {
        let mut ledger = ExecLedger::default();
        ledger.chunk_finished(0, 10.0);
        let mut b = RequestBuffer::new();
        b.enqueue(req(0, 1, 0, 65536), false, 0.0);
        b.enqueue(req(1, 1, 0, 100), false, 0.0);
        let mut ctx = ContextManager::new(vec![65536, 100]);
        ctx.update_estimate(0, 60000);
        ctx.update_estimate(1, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let on = policy(SchedVariant::ContextAware, true);
        let d = next_decision(&mut b.clone(), &ctx, &mut ledger.clone(), &on, &[view(0, 0)], &gids(2), &mut rng, 30.0);
        assert!(matches!(d, Decision::Dispatch { ref request, .. } if request.key.group == 1));
        let off = policy(SchedVariant::ContextAware, false);
        let d = next_decision(&mut b, &ctx, &mut ledger, &off, &[view(0, 0)], &gids(2), &mut rng, 30.0);
        assert!(matches!(d, Decision::Dispatch { ref request, .. } if request.key.group == 0));
    }

    #[test]
    fn round_robin_assignment_is_balanced_and_seeded() {
        let a = group_assignment(10, 4, &mut ChaCha8Rng::seed_from_u64(5));
        let b = group_assignment(10, 4, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let mut per = [0; 4];
        for &i in &a {
            per[i as usize] += 1;
        }
        assert_eq!(per.iter().max().unwrap() - per.iter().min().unwrap(), 1);
    }
}
