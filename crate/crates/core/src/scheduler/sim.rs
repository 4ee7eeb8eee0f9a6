//! Discrete-event driver for one rollout iteration.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{tail_latency, MetricsReport, StepRecord, TimelineSample};
use super::{
    group_assignment, next_decision, BufferedRequest, ContextManager, Decision, ExecLedger, InstanceView,
    RequestBuffer, SchedVariant, SchedulerPolicy,
};
use crate::cst::{Cutoffs, SpeculationArgs};
use crate::dgds::{ClientConfig, DraftClient};
use crate::dgds::{DraftServer, DraftService, ShardMap, DEFAULT_TTL_SECONDS};
use crate::engine::{ActiveRequest, AdaptiveSpecPolicy, InstanceState, SpecSetup, StepTimeModel};
use crate::error::{Error, Result};
use crate::kvpool::{KvParams, KvPool, RequestKey};
use crate::util::{derive_seed, fnv1a};
use crate::workload::{trace_fingerprint, PromptGroup, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdMode {
    Off,
    /// Adaptive budget, drafts from the whole group.
    Grouped,
    /// Adaptive budget, drafts only from the request's own history.
    NoContext,
    /// Group drafts with a fixed budget.
    Fixed,
}

impl SdMode {
    pub fn name(self) -> &'static str {
        match self {
            SdMode::Off => "off",
            SdMode::Grouped => "grouped",
            SdMode::NoContext => "no-context",
            SdMode::Fixed => "fixed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "off" => SdMode::Off,
            "grouped" => SdMode::Grouped,
            "no-context" => SdMode::NoContext,
            "fixed" => SdMode::Fixed,
            _ => return Err(Error::Config(format!("unknown speculative decoding mode '{s}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicySpec {
    pub name: String,
    pub sched: SchedVariant,
    pub sd: SdMode,
}

impl PolicySpec {
    /// Named policies, or `scheduler:sd` such as `divided-only:grouped`.
    pub fn parse(s: &str) -> Result<Self> {
        let (sched, sd) = match s {
            "group-baseline" => (SchedVariant::GroupBaseline, SdMode::Off),
            "divided-only" => (SchedVariant::DividedOnly, SdMode::Off),
            "context-aware" | "no-sd" => (SchedVariant::ContextAware, SdMode::Off),
            "full" => (SchedVariant::ContextAware, SdMode::Grouped),
            "oracle-lfs" => (SchedVariant::OracleLfs, SdMode::Off),
            "no-adapt" => (SchedVariant::ContextAware, SdMode::Fixed),
            "no-group-context" => (SchedVariant::ContextAware, SdMode::NoContext),
            other => match other.split_once(':') {
                Some((a, b)) => (SchedVariant::parse(a)?, SdMode::parse(b)?),
                None => return Err(Error::Config(format!("unknown policy '{other}'"))),
            },
        };
        Ok(PolicySpec { name: s.to_string(), sched, sd })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgdsParams {
    pub shards: usize,
    pub fetch_period: f64,
    pub append_batch_tokens: u32,
    pub ttl_seconds: u32,
    pub cutoffs: Cutoffs,
}

impl Default for DgdsParams {
    fn default() -> Self {
        DgdsParams {
            shards: 4,
            fetch_period: 0.2,
            append_batch_tokens: 16,
            ttl_seconds: DEFAULT_TTL_SECONDS,
            cutoffs: Cutoffs::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessParams {
    pub enabled: bool,
    /// Trigger after this many median chunk service times without progress.
    pub wait_factor: f64,
}

impl Default for FairnessParams {
    fn default() -> Self {
        FairnessParams { enabled: false, wait_factor: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub instances: u32,
    pub kv: KvParams,
    pub step: StepTimeModel,
    pub chunk_size: u32,
    pub spec: AdaptiveSpecPolicy,
    pub spec_args: SpeculationArgs,
    pub dgds: DgdsParams,
    pub fairness: FairnessParams,
    pub seed: u64,
    /// Seconds between timeline samples.
    pub timeline_interval: f64,
    pub record_steps: bool,
    /// Prefix for draft group ids, to keep runs apart on a shared server.
    pub dgds_namespace: String,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            instances: 4,
            kv: KvParams::default(),
            step: StepTimeModel::default(),
            chunk_size: 8192,
            spec: AdaptiveSpecPolicy::default(),
            spec_args: SpeculationArgs::default(),
            dgds: DgdsParams::default(),
            fairness: FairnessParams::default(),
            seed: 0,
            timeline_interval: 1.0,
            record_steps: false,
            dgds_namespace: String::new(),
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::Config("need at least one instance".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be >= 1".into()));
        }
        if self.dgds.shards == 0 {
            return Err(Error::Config("dgds shards must be >= 1".into()));
        }
        if !(self.timeline_interval > 0.0) {
            return Err(Error::Config("timeline_interval must be positive".into()));
        }
        self.kv.validate()?;
        self.step.validate()?;
        self.spec.validate()?;
        self.spec_args.validate()
    }

    /// Fingerprint of everything except the seed and output-only switches.
    pub fn fingerprint(&self) -> String {
        let mut p = self.clone();
        p.seed = 0;
        p.record_steps = false;
        p.dgds_namespace.clear();
        let json = serde_json::to_vec(&p).expect("params serialize");
        format!("{:016x}", fnv1a(&json))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    StepEnd(u32),
    OffloadDone(RequestKey),
    Wake(u32),
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // reversed: BinaryHeap pops the earliest event first
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Waiting,
    Running,
    Offloading,
    Finished,
}

struct Req {
    key: RequestKey,
    prompt_len: u32,
    ori_max: u32,
    target: u32,
    generated: u32,
    status: Status,
    has_kv: bool,
    /// Tokens to prefill on the next admission (baseline re-prefill).
    refill: u64,
    dispatched_at: f64,
    finished_at: f64,
    pushed: u32,
}

struct Sim<'a> {
    groups: &'a [PromptGroup],
    gids: Vec<String>,
    offsets: Vec<usize>,
    policy: &'a PolicySpec,
    params: &'a SimParams,
    spec: Option<SpecSetup>,
    svc: &'a dyn DraftService,
    clients: Vec<DraftClient>,
    instances: Vec<InstanceState>,
    pool: KvPool,
    reqs: Vec<Req>,
    outputs: Vec<Vec<TokenId>>,
    buffer: RequestBuffer,
    ctx: ContextManager,
    ledger: ExecLedger,
    sched: SchedulerPolicy,
    /// Group-baseline per-instance FIFO queues.
    queues: Vec<VecDeque<usize>>,
    rng: ChaCha8Rng,
    heap: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    finished: usize,
    steps: u64,
    drafted: u64,
    accepted: u64,
    emitted_items: u64,
    emitted_tokens: u64,
    max_kv_util: f64,
    kv_violations: u64,
    timeline: Vec<TimelineSample>,
    next_sample: f64,
    window: (u64, u64, u64, u64),
    step_log: Vec<StepRecord>,
}

impl<'a> Sim<'a> {
    fn flat(&self, key: RequestKey) -> usize {
        self.offsets[key.group as usize] + key.index as usize
    }

    fn truth(&self, key: RequestKey) -> &'a [TokenId] {
        self.groups[key.group as usize].outputs[key.index as usize].as_slice()
    }

    fn draft_group(&self, key: RequestKey) -> String {
        let ns = &self.params.dgds_namespace;
        let gid = &self.gids[key.group as usize];
        match self.policy.sd {
            SdMode::NoContext => format!("{ns}{gid}#{}", key.index),
            _ => format!("{ns}{gid}"),
        }
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        self.heap.push(Event { time, seq: self.seq, kind });
        self.seq += 1;
    }

    fn buffered(&self, i: usize) -> BufferedRequest {
        let r = &self.reqs[i];
        BufferedRequest {
            key: r.key,
            prompt_len: r.prompt_len,
            ori_max_tokens: r.ori_max,
            generated: r.generated,
            true_len: r.target,
            enqueued_at: 0.0,
        }
    }

    fn enqueue(&mut self, i: usize) {
        let speculative = self.sched.variant == SchedVariant::ContextAware && self.reqs[i].key.index == 0;
        let b = self.buffered(i);
        self.buffer.enqueue(b, speculative, self.now);
        self.reqs[i].status = Status::Waiting;
    }

    fn views(&self) -> Vec<InstanceView> {
        self.instances
            .iter()
            .map(|inst| InstanceView {
                instance_id: inst.instance_id,
                committed_tokens: self.pool.instance_committed(inst.instance_id),
                capacity_tokens: self.pool.instance_capacity(),
                running: inst.running.len() as u32,
                batch_cap: self.params.step.batch_cap,
            })
            .collect()
    }

    fn activate(&mut self, i: usize, inst: u32, chunk_end: u32, ready_at: f64, prefill: u64) -> Result<()> {
        let key = self.reqs[i].key;
        let draft_group = self.draft_group(key);
        if self.spec.is_some() && !self.clients[inst as usize].is_registered(&draft_group) {
            self.clients[inst as usize].register_group(self.svc, &draft_group, self.params.dgds.ttl_seconds)?;
        }
        let r = &mut self.reqs[i];
        r.status = Status::Running;
        r.dispatched_at = self.now;
        let a = ActiveRequest {
            key,
            draft_group,
            prompt_len: r.prompt_len,
            generated: r.generated,
            chunk_end,
            target: r.target,
            admit_seq: 0,
            ready_at,
            prefill_pending: prefill,
            pushed: r.pushed,
        };
        self.instances[inst as usize].join(a);
        Ok(())
    }

    /// Dispatch from the request buffer until it stalls or empties.
    fn schedule(&mut self) -> Result<()> {
        if !self.sched.variant.is_divided() {
            return Ok(());
        }
        let mut touched = BTreeSet::new();
        loop {
            let views = self.views();
            let d = next_decision(
                &mut self.buffer,
                &self.ctx,
                &mut self.ledger,
                &self.sched,
                &views,
                &self.gids,
                &mut self.rng,
                self.now,
            );
            let Decision::Dispatch { request, instance, chunk_budget } = d else {
                break;
            };
            let i = self.flat(request.key);
            let chunk_end = self.reqs[i].generated + chunk_budget;
            if self.reqs[i].has_kv {
                let ready = self
                    .pool
                    .load(request.key, instance, chunk_budget as u64, self.now)?
                    .ok_or_else(|| Error::Sim(format!("load of {:?} refused after fit check", request.key)))?;
                self.activate(i, instance, chunk_end, ready, 0)?;
            } else {
                let prompt = self.reqs[i].prompt_len as u64;
                if !self.pool.place(request.key, instance, prompt, chunk_budget as u64, self.now)? {
                    return Err(Error::Sim(format!("placement of {:?} refused after fit check", request.key)));
                }
                self.reqs[i].has_kv = true;
                self.activate(i, instance, chunk_end, self.now, prompt)?;
            }
            touched.insert(instance);
        }
        for inst in touched {
            self.try_start(inst)?;
        }
        Ok(())
    }

    /// Group-baseline admission from the instance's FIFO queue.
    fn baseline_admit(&mut self, inst: u32) -> Result<()> {
        let cap = self.pool.instance_capacity();
        while let Some(&i) = self.queues[inst as usize].front() {
            let st = &self.instances[inst as usize];
            if st.running.len() as u32 >= self.params.step.batch_cap {
                break;
            }
            let growth = st.max_step_growth(self.now, self.spec.as_ref());
            let r = &self.reqs[i];
            let tokens = r.prompt_len as u64 + r.generated as u64;
            if self.pool.instance_committed(inst) + growth + tokens + 1 > cap {
                if st.running.is_empty() {
                    return Err(Error::Capacity(format!(
                        "request {:?} needs {} tokens but instance capacity is {cap}",
                        r.key,
                        tokens + 1
                    )));
                }
                break;
            }
            self.queues[inst as usize].pop_front();
            let key = r.key;
            let prefill = if r.has_kv { 0 } else { r.refill.max(r.prompt_len as u64) };
            if !self.pool.place(key, inst, tokens, 1, self.now)? {
                return Err(Error::Sim(format!("placement of {key:?} refused after fit check")));
            }
            self.reqs[i].has_kv = true;
            self.reqs[i].refill = 0;
            let target = self.reqs[i].target;
            self.activate(i, inst, target, self.now, prefill)?;
        }
        Ok(())
    }

    /// Preempt newest requests until one more step cannot overflow the KV.
    fn baseline_preempt(&mut self, inst: u32) -> Result<()> {
        let cap = self.pool.instance_capacity();
        loop {
            let st = &self.instances[inst as usize];
            let growth = st.max_step_growth(self.now, self.spec.as_ref());
            if st.running.is_empty() || self.pool.instance_committed(inst) + growth <= cap {
                return Ok(());
            }
            let victim = self.instances[inst as usize].preempt().expect("nonempty");
            let i = self.flat(victim.key);
            let dropped = self.pool.discard(victim.key, self.now)?;
            self.pool.charge_recompute(dropped);
            if let Some(c) = self.spec.and(self.clients.get_mut(inst as usize)) {
                c.flush(self.svc, &victim.draft_group, victim.key.index)?;
            }
            let r = &mut self.reqs[i];
            r.has_kv = false;
            r.refill = dropped;
            r.status = Status::Waiting;
            self.queues[inst as usize].push_front(i);
        }
    }

    fn try_start(&mut self, inst: u32) -> Result<()> {
        let iu = inst as usize;
        if self.instances[iu].is_busy() {
            return Ok(());
        }
        if !self.sched.variant.is_divided() {
            self.baseline_preempt(inst)?;
            self.baseline_admit(inst)?;
        }
        if self.spec.is_some() {
            let client = &mut self.clients[iu];
            if client.fetch_due(self.now) && !self.instances[iu].running.is_empty() {
                let groups: BTreeSet<String> = self.instances[iu].running.iter().map(|r| r.draft_group.clone()).collect();
                let groups: Vec<String> = groups.into_iter().collect();
                self.svc.advance_clock(self.now)?;
                client.sync(self.svc, &groups, self.now)?;
            }
        }
        let groups = self.groups;
        let plan = self.instances[iu].plan_step(
            self.now,
            &self.params.step,
            self.spec.as_ref(),
            self.spec.and(Some(&self.clients[iu])),
            |k| groups[k.group as usize].outputs[k.index as usize].as_slice(),
        );
        match plan {
            Some(p) => {
                for item in &p.items {
                    if let Some(r) = self.instances[iu].running.iter_mut().find(|r| r.key == item.key) {
                        r.prefill_pending = 0;
                    }
                }
                let end = p.end();
                self.instances[iu].step = Some(p);
                self.push(end, EventKind::StepEnd(inst));
            }
            None => {
                if let Some(t) = self.instances[iu].next_ready(self.now) {
                    self.push(t, EventKind::Wake(inst));
                }
            }
        }
        Ok(())
    }

    fn step_end(&mut self, inst: u32) -> Result<()> {
        let iu = inst as usize;
        let plan = self.instances[iu].step.take().ok_or_else(|| Error::Sim("step end without a step".into()))?;
        self.steps += 1;
        let mut step_drafted = 0;
        let mut step_accepted = 0;
        for item in &plan.items {
            let i = self.flat(item.key);
            let r = &mut self.reqs[i];
            self.outputs[i].extend_from_slice(&item.tokens);
            r.generated += item.emitted;
            self.pool.grow(item.key, item.emitted as u64)?;
            let accepted = item.accepted.min(item.emitted) as u64;
            step_drafted += item.drafted as u64;
            step_accepted += accepted;
            let a = self.instances[iu].running.iter_mut().find(|a| a.key == item.key).expect("running");
            a.generated += item.emitted;
            if self.spec.is_some() {
                let prev = a.pushed;
                a.pushed += item.emitted;
                let group = a.draft_group.clone();
                self.clients[iu].push_tokens(self.svc, &group, item.key.index, prev, &item.tokens)?;
                self.reqs[i].pushed = prev + item.emitted;
            }
        }
        self.drafted += step_drafted;
        self.accepted += step_accepted;
        self.emitted_items += plan.items.len() as u64;
        self.emitted_tokens += plan.emitted();
        self.window.0 += plan.emitted();
        self.window.1 += plan.items.len() as u64;
        self.window.2 += plan.draft_len as u64;
        self.window.3 += 1;
        if self.params.record_steps {
            self.step_log.push(StepRecord {
                time: self.now,
                instance: inst,
                batch: plan.items.len() as u32,
                drafted: step_drafted,
                accepted: step_accepted,
                emitted: plan.emitted(),
                kv_used: self.pool.instance_resident(inst),
            });
        }

        let done: Vec<ActiveRequest> = {
            let st = &mut self.instances[iu];
            let (done, keep) = std::mem::take(&mut st.running).into_iter().partition(|a| a.chunk_done());
            st.running = keep;
            done
        };
        for a in done {
            let i = self.flat(a.key);
            if self.spec.is_some() {
                self.clients[iu].flush(self.svc, &a.draft_group, a.key.index)?;
            }
            let service = self.now - self.reqs[i].dispatched_at;
            if self.sched.variant.is_divided() {
                self.ledger.chunk_finished(a.key.group, service);
            }
            if self.reqs[i].generated >= self.reqs[i].target {
                self.pool.release(a.key, self.now);
                let r = &mut self.reqs[i];
                r.status = Status::Finished;
                r.has_kv = false;
                r.finished_at = self.now;
                self.finished += 1;
                let len = r.generated;
                self.ctx.update_estimate(a.key.group, len);
            } else {
                let t = self.pool.offload(a.key, self.now)?;
                self.reqs[i].status = Status::Offloading;
                self.push(t, EventKind::OffloadDone(a.key));
            }
        }
        self.sample();
        self.schedule()?;
        self.try_start(inst)
    }

    fn sample(&mut self) {
        let cap = self.pool.instance_capacity();
        for inst in &self.instances {
            let util = self.pool.instance_resident(inst.instance_id) as f64 / cap as f64;
            self.max_kv_util = self.max_kv_util.max(util);
            if self.pool.instance_committed(inst.instance_id) > cap {
                self.kv_violations += 1;
            }
        }
        if self.now + 1e-12 < self.next_sample {
            return;
        }
        let (em, items, dsum, steps) = std::mem::take(&mut self.window);
        self.timeline.push(TimelineSample {
            time: self.now,
            kv_used: self.instances.iter().map(|i| self.pool.instance_resident(i.instance_id)).sum(),
            kv_capacity: cap * self.instances.len() as u64,
            running: self.instances.iter().map(|i| i.running.len() as u32).sum(),
            buffered: self.buffer.len() as u32,
            acceptance_length: if items > 0 { em as f64 / items as f64 } else { 0.0 },
            mean_draft_len: if steps > 0 { dsum as f64 / steps as f64 } else { 0.0 },
        });
        while self.next_sample <= self.now {
            self.next_sample += self.params.timeline_interval;
        }
    }

    fn run(&mut self) -> Result<()> {
        let n = self.reqs.len();
        if self.sched.variant.is_divided() {
            for i in 0..n {
                self.enqueue(i);
            }
            self.schedule()?;
        } else {
            let assign = group_assignment(self.groups.len(), self.params.instances, &mut self.rng);
            for i in 0..n {
                let g = self.reqs[i].key.group as usize;
                self.queues[assign[g] as usize].push_back(i);
            }
            for inst in 0..self.params.instances {
                self.try_start(inst)?;
            }
        }
        while let Some(ev) = self.heap.pop() {
            self.now = ev.time;
            match ev.kind {
                EventKind::StepEnd(i) => self.step_end(i)?,
                EventKind::OffloadDone(key) => {
                    self.pool.finish_offload(key, self.now)?;
                    let i = self.flat(key);
                    self.enqueue(i);
                    self.schedule()?;
                }
                EventKind::Wake(i) => self.try_start(i)?,
            }
            if self.finished == n {
                break;
            }
        }
        if self.finished != n {
            let stuck = self.reqs.iter().find(|r| r.status != Status::Finished).map(|r| r.key);
            return Err(Error::Sim(format!(
                "simulation stalled with {} of {n} requests unfinished (first: {stuck:?}); \
                 instance capacity {} may be too small for a single request",
                n - self.finished,
                self.pool.instance_capacity()
            )));
        }
        Ok(())
    }
}

/// Simulate one rollout iteration of `groups` under `policy`. Drafts go
/// through `service` when given, otherwise through a private in-process
/// draft server.
pub fn run_iteration(
    groups: &[PromptGroup],
    policy: &PolicySpec,
    params: &SimParams,
    iteration: u32,
    service: Option<&dyn DraftService>,
) -> Result<MetricsReport> {
    params.validate()?;
    if groups.is_empty() {
        return Err(Error::InvalidTrace("trace has no groups".into()));
    }
    for g in groups {
        g.validate()?;
    }
    let local;
    let svc: &dyn DraftService = match service {
        Some(s) => s,
        None => {
            local = DraftServer::new(ShardMap::new(params.dgds.shards));
            &local
        }
    };
    let spec = match policy.sd {
        SdMode::Off => None,
        SdMode::Fixed => Some(SpecSetup { policy: AdaptiveSpecPolicy { enabled: false, ..params.spec }, args: params.spec_args }),
        SdMode::Grouped | SdMode::NoContext => {
            Some(SpecSetup { policy: AdaptiveSpecPolicy { enabled: true, ..params.spec }, args: params.spec_args })
        }
    };
    let client_cfg = ClientConfig {
        fetch_period: params.dgds.fetch_period,
        append_batch_tokens: params.dgds.append_batch_tokens,
        ttl_seconds: params.dgds.ttl_seconds,
        cutoffs: params.dgds.cutoffs,
    };
    let mut offsets = Vec::with_capacity(groups.len());
    let mut reqs = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        offsets.push(reqs.len());
        for (ri, out) in g.outputs.iter().enumerate() {
            reqs.push(Req {
                key: RequestKey::new(gi as u32, ri as u32),
                prompt_len: g.prompt_len,
                ori_max: g.max_tokens,
                target: (out.len() as u32).min(g.max_tokens),
                generated: 0,
                status: Status::Waiting,
                has_kv: false,
                refill: 0,
                dispatched_at: 0.0,
                finished_at: 0.0,
                pushed: 0,
            });
        }
    }
    let n = reqs.len();
    let mut sim = Sim {
        groups,
        gids: groups.iter().map(|g| g.group_id.clone()).collect(),
        offsets,
        policy,
        params,
        spec,
        svc,
        clients: (0..params.instances).map(|_| DraftClient::new(client_cfg)).collect(),
        instances: (0..params.instances).map(InstanceState::new).collect(),
        pool: KvPool::new(params.kv, params.instances as usize)?,
        reqs,
        outputs: vec![Vec::new(); n],
        buffer: RequestBuffer::new(),
        ctx: ContextManager::new(groups.iter().map(|g| g.max_tokens).collect()),
        ledger: ExecLedger::default(),
        sched: SchedulerPolicy { variant: policy.sched, chunk_size: params.chunk_size, fairness: params.fairness },
        queues: vec![VecDeque::new(); params.instances as usize],
        rng: ChaCha8Rng::seed_from_u64(derive_seed(params.seed, 0x5c4e_d000)),
        heap: BinaryHeap::new(),
        seq: 0,
        now: 0.0,
        finished: 0,
        steps: 0,
        drafted: 0,
        accepted: 0,
        emitted_items: 0,
        emitted_tokens: 0,
        max_kv_util: 0.0,
        kv_violations: 0,
        timeline: Vec::new(),
        next_sample: 0.0,
        window: (0, 0, 0, 0),
        step_log: Vec::new(),
    };
    sim.run()?;

    let mut fidelity_mismatches = 0;
    for (i, r) in sim.reqs.iter().enumerate() {
        let truth = sim.truth(r.key);
        if sim.outputs[i].as_slice() != &truth[..r.target as usize] {
            fidelity_mismatches += 1;
        }
    }
    let produced: u64 = sim.reqs.iter().map(|r| r.prompt_len as u64 + r.target as u64).sum();
    let kv_conserved = sim.pool.stored_tokens() == 0 && sim.pool.released_tokens() == produced;
    let completion_times: Vec<f64> = sim.reqs.iter().map(|r| r.finished_at).collect();
    let completion_time = completion_times.iter().copied().fold(0.0, f64::max);
    let output_tokens: u64 = sim.reqs.iter().map(|r| r.target as u64).sum();
    let counters = sim.pool.counters();
    let stats = sim.clients.iter().map(|c| c.stats()).fold((0, 0), |a, s| (a.0 + s.bytes_fetched, a.1 + s.appends_sent));
    Ok(MetricsReport {
        policy: policy.name.clone(),
        iteration,
        seed: params.seed,
        trace_fingerprint: format!("{:016x}", trace_fingerprint(groups)),
        params_fingerprint: params.fingerprint(),
        requests: n,
        output_tokens,
        completion_time,
        throughput: if completion_time > 0.0 { output_tokens as f64 / completion_time } else { 0.0 },
        tail_latency: tail_latency(&completion_times),
        preemption_count: sim.instances.iter().map(|i| i.preemption_count).sum(),
        recompute_tokens: counters.recompute_tokens,
        max_kv_utilization: sim.max_kv_util,
        kv_violations: sim.kv_violations,
        steps: sim.steps,
        drafted_tokens: sim.drafted,
        accepted_tokens: sim.accepted,
        mean_acceptance_length: if sim.emitted_items > 0 { sim.emitted_tokens as f64 / sim.emitted_items as f64 } else { 0.0 },
        offloads: counters.offloads,
        loads: counters.loads,
        fairness_picks: sim.ledger.fairness_picks,
        dgds_bytes_fetched: stats.0,
        dgds_appends: stats.1,
        fidelity_mismatches,
        kv_conserved,
        completion_times,
        timeline: sim.timeline,
        step_log: sim.step_log,
    })
}
