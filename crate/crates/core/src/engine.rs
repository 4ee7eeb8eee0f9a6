//! Simulated inference instance.
//!
//! A step is planned when it starts and applied when it ends: planning fixes
//! the batch, the drafts and the verification outcome from the state at the
//! start, and the simulator applies the emitted tokens at `start + duration`.

use serde::{Deserialize, Serialize};

use crate::cst::{DraftCandidate, SpeculationArgs};
use crate::dgds::{DraftClient, SpecRequest};
use crate::error::{Error, Result};
use crate::kvpool::RequestKey;
use crate::workload::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTimeModel {
    pub t_base: f64,
    /// per decoded or verified token
    pub t_tok: f64,
    pub t_prefill_tok: f64,
    pub batch_cap: u32,
}

impl Default for StepTimeModel {
    fn default() -> Self {
        StepTimeModel { t_base: 0.030, t_tok: 40e-6, t_prefill_tok: 10e-6, batch_cap: 256 }
    }
}

impl StepTimeModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_base >= 0.0 && self.t_tok >= 0.0 && self.t_prefill_tok >= 0.0) || self.batch_cap == 0 {
            return Err(Error::Config("step time terms must be nonnegative and batch_cap >= 1".into()));
        }
        Ok(())
    }

    pub fn step_duration(&self, decode_tokens: u64, prefill_tokens: u64) -> f64 {
        self.t_base + self.t_tok * decode_tokens as f64 + self.t_prefill_tok * prefill_tokens as f64
    }
}

/// Draft budgeting. With `enabled`, both the per-request draft length and the
/// number of paths shrink as the batch grows; otherwise every request drafts
/// `per_request_cap` tokens on `multi_path_k` paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveSpecPolicy {
    pub batch_token_budget: u32,
    pub per_request_cap: u32,
    pub enabled: bool,
    pub multi_path_k: u32,
}

impl Default for AdaptiveSpecPolicy {
    fn default() -> Self {
        AdaptiveSpecPolicy { batch_token_budget: 256, per_request_cap: 8, enabled: true, multi_path_k: 4 }
    }
}

impl AdaptiveSpecPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.multi_path_k == 0 {
            return Err(Error::Config("multi_path_k must be >= 1".into()));
        }
        Ok(())
    }

    /// d_r = min(c_max, floor(B_total / running)).
    pub fn draft_len(&self, running: usize) -> u32 {
        if !self.enabled {
            return self.per_request_cap;
        }
        let share = self.batch_token_budget as usize / running.max(1);
        self.per_request_cap.min(share.min(u32::MAX as usize) as u32)
    }

    /// Paths per request: as many as the batch budget allows at depth `d`,
    /// between 1 and `multi_path_k`.
    pub fn path_count(&self, running: usize, d: u32) -> u32 {
        if !self.enabled {
            return self.multi_path_k;
        }
        let per = self.batch_token_budget as usize / (running.max(1) * d.max(1) as usize);
        (per.min(self.multi_path_k as usize) as u32).max(1)
    }
}

/// A request occupying an instance slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveRequest {
    pub key: RequestKey,
    /// Draft group this request reads from and appends to.
    pub draft_group: String,
    pub prompt_len: u32,
    pub generated: u32,
    /// `generated` value at which the current chunk ends.
    pub chunk_end: u32,
    /// min(|output|, max_tokens)
    pub target: u32,
    pub admit_seq: u64,
    /// The request cannot join a step before its KV is available.
    pub ready_at: f64,
    /// Tokens to prefill in the first step this request joins.
    pub prefill_pending: u64,
    /// Tokens already handed to the draft client for this request.
    pub pushed: u32,
}

impl ActiveRequest {
    pub fn chunk_remaining(&self) -> u32 {
        self.chunk_end.min(self.target) - self.generated
    }

    pub fn chunk_done(&self) -> bool {
        self.generated >= self.chunk_end || self.generated >= self.target
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepItem {
    pub key: RequestKey,
    pub paths: u32,
    pub drafted: u32,
    pub accepted: u32,
    pub emitted: u32,
    /// Verified draft tokens followed by the model's own token.
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepPlan {
    pub start: f64,
    pub duration: f64,
    pub prefill_tokens: u64,
    pub draft_len: u32,
    pub items: Vec<StepItem>,
}

impl StepPlan {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    pub fn emitted(&self) -> u64 {
        self.items.iter().map(|i| i.emitted as u64).sum()
    }

    pub fn drafted(&self) -> u64 {
        self.items.iter().map(|i| i.drafted as u64).sum()
    }
}

/// Longest exact prefix match over the paths, and the tokens emitted when at
/// most `limit` may be produced this step.
pub fn verify(paths: &[DraftCandidate], truth_ahead: &[TokenId], limit: u32) -> (u32, u32) {
    let (accepted, emitted, _) = verify_tokens(paths, truth_ahead, limit);
    (accepted, emitted)
}

/// As [`verify`], also returning the emitted tokens: the accepted prefix of
/// the best path, then the target model's next token from `truth_ahead`.
pub fn verify_tokens(paths: &[DraftCandidate], truth_ahead: &[TokenId], limit: u32) -> (u32, u32, Vec<TokenId>) {
    let mut best: Option<(&DraftCandidate, u32)> = None;
    for p in paths {
        let m = p.tokens.iter().zip(truth_ahead).take_while(|(a, b)| a == b).count() as u32;
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((p, m));
        }
    }
    let accepted = best.map_or(0, |(_, m)| m);
    let emitted = (accepted + 1).min(limit).min(truth_ahead.len() as u32);
    let from_draft = emitted.min(accepted) as usize;
    let mut tokens = best.map_or(Vec::new(), |(p, _)| p.tokens[..from_draft].to_vec());
    tokens.extend_from_slice(&truth_ahead[from_draft..emitted as usize]);
    (accepted, emitted, tokens)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecSetup {
    pub policy: AdaptiveSpecPolicy,
    pub args: SpeculationArgs,
}

#[derive(Debug, Clone)]
pub struct InstanceState {
    pub instance_id: u32,
    pub running: Vec<ActiveRequest>,
    pub preemption_count: u64,
    pub step: Option<StepPlan>,
    next_seq: u64,
}

impl InstanceState {
    pub fn new(instance_id: u32) -> Self {
        InstanceState { instance_id, running: Vec::new(), preemption_count: 0, step: None, next_seq: 0 }
    }

    pub fn is_busy(&self) -> bool {
        self.step.is_some()
    }

    pub fn join(&mut self, mut r: ActiveRequest) {
        r.admit_seq = self.next_seq;
        self.next_seq += 1;
        self.running.push(r);
    }

    pub fn ready_count(&self, now: f64) -> usize {
        self.running.iter().filter(|r| r.ready_at <= now).count()
    }

    /// Earliest time a waiting request becomes ready, if none is ready now.
    pub fn next_ready(&self, now: f64) -> Option<f64> {
        self.running.iter().map(|r| r.ready_at).filter(|&t| t > now).min_by(f64::total_cmp)
    }

    /// Remove the most recently admitted request.
    pub fn preempt(&mut self) -> Option<ActiveRequest> {
        let (i, _) = self.running.iter().enumerate().max_by_key(|(_, r)| r.admit_seq)?;
        self.preemption_count += 1;
        Some(self.running.remove(i))
    }

    pub fn remove(&mut self, key: RequestKey) -> Option<ActiveRequest> {
        let i = self.running.iter().position(|r| r.key == key)?;
        Some(self.running.remove(i))
    }

    /// Largest number of tokens the ready requests could add to the KV in
    /// one step.
    pub fn max_step_growth(&self, now: f64, spec: Option<&SpecSetup>) -> u64 {
        let ready = self.ready_count(now);
        let d = spec.map_or(0, |s| s.policy.draft_len(ready)) as u64;
        self.running
            .iter()
            .filter(|r| r.ready_at <= now)
            .map(|r| (1 + d).min(r.chunk_remaining() as u64))
            .sum()
    }

    /// Plan one continuous-batching step over the ready requests. `truth`
    /// returns a request's ground-truth output.
    pub fn plan_step<'t>(
        &self,
        now: f64,
        model: &StepTimeModel,
        spec: Option<&SpecSetup>,
        client: Option<&DraftClient>,
        truth: impl Fn(RequestKey) -> &'t [TokenId],
    ) -> Option<StepPlan> {
        let batch: Vec<&ActiveRequest> = self
            .running
            .iter()
            .filter(|r| r.ready_at <= now && !r.chunk_done())
            .take(model.batch_cap as usize)
            .collect();
        if batch.is_empty() {
            return None;
        }
        let n = batch.len();
        let (d, k) = match spec {
            Some(s) => {
                let d = s.policy.draft_len(n);
                (d, s.policy.path_count(n, d).min(s.policy.multi_path_k.max(1)))
            }
            None => (0, 1),
        };

        let mut drafts: Vec<Vec<DraftCandidate>> = vec![Vec::new(); n];
        if let (Some(s), Some(c), true) = (spec, client, d > 0) {
            let lookup = s.args.pattern_lookup_max as usize;
            let mut reqs = Vec::with_capacity(n);
            let mut slots = Vec::with_capacity(n);
            for (i, r) in batch.iter().enumerate() {
                let cap = d.min(r.chunk_remaining().saturating_sub(1));
                if cap == 0 {
                    continue;
                }
                let seen = &truth(r.key)[..r.generated as usize];
                let args = SpeculationArgs { max_spec_tokens: cap, top_k: k, ..s.args };
                reqs.push(SpecRequest { group_id: &r.draft_group, pattern: &seen[seen.len().saturating_sub(lookup)..], args });
                slots.push(i);
            }
            for (i, cands) in slots.into_iter().zip(c.batch_speculate(&reqs)) {
                drafts[i] = cands;
            }
        }

        let mut items = Vec::with_capacity(n);
        let mut decode_tokens = 0u64;
        let mut prefill_tokens = 0u64;
        for (r, paths) in batch.iter().zip(&drafts) {
            let ahead = &truth(r.key)[r.generated as usize..];
            let (accepted, emitted, tokens) = verify_tokens(paths, ahead, r.chunk_remaining());
            let drafted: u32 = paths.iter().map(|p| p.tokens.len() as u32).sum();
            decode_tokens += 1 + drafted as u64;
            prefill_tokens += r.prefill_pending;
            items.push(StepItem { key: r.key, paths: paths.len() as u32, drafted, accepted, emitted, tokens });
        }
        Some(StepPlan {
            start: now,
            duration: model.step_duration(decode_tokens, prefill_tokens),
            prefill_tokens,
            draft_len: d,
            items,
        })
    }
}
