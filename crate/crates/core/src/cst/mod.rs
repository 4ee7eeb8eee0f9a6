//! Per-group draft index over the emitted tokens of every member request.
//!
//! The index is an online generalized suffix automaton. Each request owns an
//! independent token stream; streams never join, so a continuation is only
//! ever observed inside the stream that produced it. Every state carries the
//! number of (stream, end position) pairs at which its substrings occur,
//! which is all the beam walk needs:
//!
//! * `count(c)`   = occurrences of context `c` across all streams,
//! * `count(c·t)` = occurrences of `c` followed by token `t`.
//!
//! # Draft query
//!
//! `speculate` takes the requester's trailing tokens. It finds the longest
//! suffix `m` of the pattern with `pattern_lookup_min <= |m| <=
//! pattern_lookup_max` that occurs in the index (none: no drafts), then runs a
//! beam walk of width `top_k` from `m`:
//!
//! 1. Start with the single empty path.
//! 2. At each depth, every live path `p` is extended by each child token `t`
//!    of `m·p` whose step frequency `count(m·p·t) / count(m·p)` is at least
//!    `min_step_freq` and whose support `count(m·p·t)` is at least
//!    `min_support`. A non-empty path without admissible children is done.
//! 3. The extensions are ranked (score desc, support desc, tokens asc) and
//!    the best `top_k` stay live. Stop at depth `max_spec_tokens`.
//! 4. Done paths plus the survivors are ranked the same way; up to `top_k`
//!    are returned.
//!
//! A path's score is the product of its step frequencies, which telescopes to
//! `count(m·p) / count(m)`.

mod delta;
mod oracle;

pub use delta::{DeltaKind, DeltaOutcome, DraftDelta, DELTA_FORMAT_VERSION, DELTA_MAGIC};
pub use oracle::speculate_oracle;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeculationArgs {
    pub max_spec_tokens: u32,
    pub pattern_lookup_max: u32,
    pub pattern_lookup_min: u32,
    pub top_k: u32,
}

impl Default for SpeculationArgs {
    fn default() -> Self {
        SpeculationArgs { max_spec_tokens: 8, pattern_lookup_max: 16, pattern_lookup_min: 2, top_k: 1 }
    }
}

impl SpeculationArgs {
    pub fn validate(&self) -> Result<()> {
        if self.pattern_lookup_min == 0 || self.pattern_lookup_min > self.pattern_lookup_max {
            return Err(Error::Config(format!(
                "need 1 <= pattern_lookup_min ({}) <= pattern_lookup_max ({})",
                self.pattern_lookup_min, self.pattern_lookup_max
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Confidence filters applied while extending draft paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoffs {
    pub min_step_freq: f64,
    pub min_support: u32,
}

impl Default for Cutoffs {
    fn default() -> Self {
        Cutoffs { min_step_freq: 0.25, min_support: 1 }
    }
}

impl Cutoffs {
    pub const NONE: Cutoffs = Cutoffs { min_step_freq: 0.0, min_support: 1 };

    fn admits(&self, child: u32, parent: u32) -> bool {
        child >= self.min_support && child as f64 >= self.min_step_freq * parent as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftCandidate {
    pub tokens: Vec<TokenId>,
    pub score: f64,
    pub support: u32,
}

/// Canonical candidate order: score desc, support desc, tokens asc. Scores
/// of candidates from one query share a denominator, so support decides.
pub(crate) fn rank(a_support: u32, a_tokens: &[TokenId], b_support: u32, b_tokens: &[TokenId]) -> Ordering {
    b_support.cmp(&a_support).then_with(|| a_tokens.cmp(b_tokens))
}

const NONE: u32 = u32::MAX;
const ROOT: u32 = 0;

#[derive(Debug, Clone)]
struct State {
    len: u32,
    link: u32,
    count: u32,
    next: Vec<(TokenId, u32)>,
}

impl State {
    fn get(&self, t: TokenId) -> Option<u32> {
        self.next.binary_search_by_key(&t, |e| e.0).ok().map(|i| self.next[i].1)
    }

    fn set(&mut self, t: TokenId, to: u32) {
        match self.next.binary_search_by_key(&t, |e| e.0) {
            Ok(i) => self.next[i].1 = to,
            Err(i) => self.next.insert(i, (t, to)),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Stream {
    tokens: Vec<TokenId>,
    last: u32,
}

#[derive(Debug, Clone, Copy)]
struct LogEntry {
    version: u64,
    request_id: u32,
    start: u32,
    len: u32,
}

#[derive(Debug, Clone)]
pub struct GroupDraftIndex {
    group_id: String,
    states: Vec<State>,
    streams: BTreeMap<u32, Stream>,
    version: u64,
    log: Vec<LogEntry>,
    /// Appends with version <= history_floor are no longer in `log`.
    history_floor: u64,
}

impl GroupDraftIndex {
    pub fn new(group_id: impl Into<String>) -> Self {
        GroupDraftIndex {
            group_id: group_id.into(),
            states: vec![State { len: 0, link: NONE, count: 0, next: Vec::new() }],
            streams: BTreeMap::new(),
            version: 0,
            log: Vec::new(),
            history_floor: 0,
        }
    }

    pub fn group_id(&self) -> &str {
        &self.group_id
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Tokens appended so far for `request_id`.
    pub fn token_count(&self, request_id: u32) -> u32 {
        self.streams.get(&request_id).map_or(0, |s| s.tokens.len() as u32)
    }

    pub fn total_tokens(&self) -> usize {
        self.streams.values().map(|s| s.tokens.len()).sum()
    }

    pub fn request_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.streams.keys().copied()
    }

    pub fn stream(&self, request_id: u32) -> Option<&[TokenId]> {
        self.streams.get(&request_id).map(|s| s.tokens.as_slice())
    }

    /// Append `new_tokens` to the stream of `request_id`.
    ///
    /// `prev_token_count` must equal the number of tokens already stored for
    /// the request; otherwise nothing changes and the acknowledged count is
    /// reported back.
    pub fn append(&mut self, request_id: u32, prev_token_count: u32, new_tokens: &[TokenId]) -> Result<u64> {
        let have = self.token_count(request_id);
        if prev_token_count != have {
            return Err(Error::OutOfOrder { acknowledged: have, got: prev_token_count });
        }
        let mut stream = self.streams.remove(&request_id).unwrap_or_default();
        let start = stream.tokens.len() as u32;
        for &t in new_tokens {
            stream.last = self.extend(stream.last, t);
            stream.tokens.push(t);
        }
        self.streams.insert(request_id, stream);
        self.version += 1;
        self.log.push(LogEntry { version: self.version, request_id, start, len: new_tokens.len() as u32 });
        Ok(self.version)
    }

    fn new_state(&mut self, len: u32, link: u32, count: u32, next: Vec<(TokenId, u32)>) -> u32 {
        self.states.push(State { len, link, count, next });
        (self.states.len() - 1) as u32
    }

    fn clone_state(&mut self, from_len: u32, q: u32) -> u32 {
        let s = &self.states[q as usize];
        let (link, count, next) = (s.link, s.count, s.next.clone());
        let clone = self.new_state(from_len + 1, link, count, next);
        self.states[q as usize].link = clone;
        clone
    }

    fn redirect(&mut self, mut p: u32, t: TokenId, from: u32, to: u32) {
        while p != NONE && self.states[p as usize].get(t) == Some(from) {
            self.states[p as usize].set(t, to);
            p = self.states[p as usize].link;
        }
    }

    /// Generalized suffix automaton extension of the string ending at `last`
    /// by token `t`; returns the state of the extended string and records
    /// one new occurrence for every suffix of it.
    fn extend(&mut self, last: u32, t: TokenId) -> u32 {
        let last_len = self.states[last as usize].len;
        let target = if let Some(q) = self.states[last as usize].get(t) {
            if self.states[q as usize].len == last_len + 1 {
                q
            } else {
                let clone = self.clone_state(last_len, q);
                self.redirect(last, t, q, clone);
                clone
            }
        } else {
            let cur = self.new_state(last_len + 1, ROOT, 0, Vec::new());
            let mut p = last;
            while p != NONE && self.states[p as usize].get(t).is_none() {
                self.states[p as usize].set(t, cur);
                p = self.states[p as usize].link;
            }
            if p != NONE {
                let q = self.states[p as usize].get(t).expect("transition present");
                let p_len = self.states[p as usize].len;
                if self.states[q as usize].len == p_len + 1 {
                    self.states[cur as usize].link = q;
                } else {
                    let clone = self.clone_state(p_len, q);
                    self.redirect(p, t, q, clone);
                    self.states[cur as usize].link = clone;
                }
            }
            cur
        };
        let mut x = target;
        while x != ROOT {
            self.states[x as usize].count += 1;
            x = self.states[x as usize].link;
        }
        target
    }

    /// Longest suffix of `window` that occurs in the index followed by at
    /// least one token: (state, length). A suffix seen only at the end of a
    /// stream (typically the requester's own latest tokens) cannot seed a
    /// draft, so the match backs off to a shorter suffix.
    fn locate(&self, window: &[TokenId]) -> (u32, u32) {
        let (mut v, mut l) = (ROOT, 0u32);
        for &t in window {
            while v != ROOT && self.states[v as usize].get(t).is_none() {
                v = self.states[v as usize].link;
                l = self.states[v as usize].len;
            }
            match self.states[v as usize].get(t) {
                Some(w) => {
                    v = w;
                    l += 1;
                }
                None => {
                    v = ROOT;
                    l = 0;
                }
            }
        }
        while v != ROOT && self.states[v as usize].next.is_empty() {
            v = self.states[v as usize].link;
            l = self.states[v as usize].len;
        }
        (v, l)
    }

    /// Occurrence count of an arbitrary token string (0 if absent).
    pub fn occurrences(&self, s: &[TokenId]) -> u32 {
        if s.is_empty() {
            return self.total_tokens() as u32;
        }
        let mut v = ROOT;
        for &t in s {
            match self.states[v as usize].get(t) {
                Some(w) => v = w,
                None => return 0,
            }
        }
        self.states[v as usize].count
    }

    pub fn speculate(&self, pattern: &[TokenId], args: &SpeculationArgs) -> Vec<DraftCandidate> {
        self.speculate_with(pattern, args, &Cutoffs::default())
    }

    pub fn speculate_with(&self, pattern: &[TokenId], args: &SpeculationArgs, cutoffs: &Cutoffs) -> Vec<DraftCandidate> {
        if args.max_spec_tokens == 0 || args.top_k == 0 || args.pattern_lookup_min == 0 {
            return Vec::new();
        }
        let window_len = pattern.len().min(args.pattern_lookup_max as usize);
        if window_len < args.pattern_lookup_min as usize {
            return Vec::new();
        }
        let (state, matched) = self.locate(&pattern[pattern.len() - window_len..]);
        if matched < args.pattern_lookup_min {
            return Vec::new();
        }
        let root_count = self.states[state as usize].count;
        let k = args.top_k as usize;

        struct Path {
            state: u32,
            tokens: Vec<TokenId>,
        }
        let mut live = vec![Path { state, tokens: Vec::new() }];
        let mut done: Vec<Path> = Vec::new();
        for _ in 0..args.max_spec_tokens {
            let mut ext: Vec<Path> = Vec::new();
            for p in live.drain(..) {
                let node = &self.states[p.state as usize];
                let before = ext.len();
                for &(t, child) in &node.next {
                    if cutoffs.admits(self.states[child as usize].count, node.count) {
                        let mut tokens = p.tokens.clone();
                        tokens.push(t);
                        ext.push(Path { state: child, tokens });
                    }
                }
                if ext.len() == before && !p.tokens.is_empty() {
                    done.push(p);
                }
            }
            let count = |p: &Path| self.states[p.state as usize].count;
            ext.sort_by(|a, b| rank(count(a), &a.tokens, count(b), &b.tokens));
            ext.truncate(k);
            live = ext;
            if live.is_empty() {
                break;
            }
        }
        done.append(&mut live);
        let count = |p: &Path| self.states[p.state as usize].count;
        done.sort_by(|a, b| rank(count(a), &a.tokens, count(b), &b.tokens));
        done.truncate(k);
        done.into_iter()
            .map(|p| {
                let support = count(&p);
                DraftCandidate { score: support as f64 / root_count as f64, support, tokens: p.tokens }
            })
            .collect()
    }

    /// Changes since `since_version`, or `FullRequired` when that version is
    /// not reachable from the retained history.
    pub fn snapshot_delta(&self, since_version: u64) -> DeltaOutcome {
        if since_version > self.version || since_version < self.history_floor {
            return DeltaOutcome::FullRequired;
        }
        let entries = self
            .log
            .iter()
            .filter(|e| e.version > since_version)
            .map(|e| {
                let toks = &self.streams[&e.request_id].tokens[e.start as usize..(e.start + e.len) as usize];
                (e.request_id, e.start, toks.to_vec())
            })
            .collect();
        DeltaOutcome::Delta(DraftDelta {
            group_id: self.group_id.clone(),
            kind: DeltaKind::Incremental,
            base_version: since_version,
            target_version: self.version,
            entries,
        })
    }

    pub fn full_snapshot(&self) -> DraftDelta {
        DraftDelta {
            group_id: self.group_id.clone(),
            kind: DeltaKind::Full,
            base_version: 0,
            target_version: self.version,
            entries: self.streams.iter().map(|(&r, s)| (r, 0, s.tokens.clone())).collect(),
        }
    }

    /// Drop retained history up to and including `version`. Later deltas
    /// from before that point require a full snapshot.
    pub fn compact_history(&mut self, version: u64) {
        let version = version.min(self.version);
        self.log.retain(|e| e.version > version);
        self.history_floor = self.history_floor.max(version);
    }

    /// Bring this replica to the delta's target version.
    pub fn apply_delta(&mut self, delta: &DraftDelta) -> Result<u64> {
        if delta.group_id != self.group_id {
            return Err(Error::Delta(format!(
                "delta for group {} applied to replica of {}",
                delta.group_id, self.group_id
            )));
        }
        match delta.kind {
            DeltaKind::Incremental => {
                if delta.base_version != self.version {
                    return Err(Error::Delta(format!(
                        "delta base {} does not match replica version {}",
                        delta.base_version, self.version
                    )));
                }
                if delta.target_version - delta.base_version != delta.entries.len() as u64 {
                    return Err(Error::Delta("entry count does not match version span".into()));
                }
                for (r, prev, toks) in &delta.entries {
                    self.append(*r, *prev, toks)?;
                }
            }
            DeltaKind::Full => {
                let mut fresh = GroupDraftIndex::new(self.group_id.clone());
                for (r, prev, toks) in &delta.entries {
                    fresh.append(*r, *prev, toks)?;
                }
                fresh.version = delta.target_version;
                fresh.log.clear();
                fresh.history_floor = delta.target_version;
                *self = fresh;
            }
        }
        Ok(self.version)
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(max_spec: u32, min: u32, max: u32, k: u32) -> SpeculationArgs {
        SpeculationArgs { max_spec_tokens: max_spec, pattern_lookup_max: max, pattern_lookup_min: min, top_k: k }
    }

    #[test]
    fn single_sequence_containment() {
        let mut idx = GroupDraftIndex::new("g");
        idx.append(1, 0, &[1, 2, 3]).unwrap();
        let c = idx.speculate(&[2], &args(8, 1, 4, 1));
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].tokens, vec![3]);
    }

    #[test]
    fn no_cross_request_stitching() {
        let mut idx = GroupDraftIndex::new("g");
        idx.append(1, 0, &[1, 2]).unwrap();
        idx.append(2, 0, &[2, 9]).unwrap();
        let c = idx.speculate_with(&[1, 2], &args(8, 2, 2, 4), &Cutoffs::NONE);
        assert!(c.is_empty(), "got {c:?}");
        // the unigram [2] does continue with 9 inside request 2
        let c = idx.speculate_with(&[2], &args(8, 1, 1, 4), &Cutoffs::NONE);
        assert_eq!(c[0].tokens, vec![9]);
        assert_eq!(idx.occurrences(&[1, 2, 9]), 0);
    }

    #[test]
    fn own_trailing_context_backs_off() {
        let mut idx = GroupDraftIndex::new("g");
        idx.append(0, 0, &[5, 6, 7, 8]).unwrap();
        idx.append(1, 0, &[1, 6, 7]).unwrap();
        // [1, 6, 7] ends request 1 with nothing after it; [6, 7] continues in request 0
        let c = idx.speculate(&[1, 6, 7], &args(8, 1, 4, 1));
        assert_eq!(c[0].tokens, vec![8]);
    }

    #[test]
    fn out_of_order_append_rejected() {
        let mut idx = GroupDraftIndex::new("g");
        idx.append(1, 0, &[1, 2, 3]).unwrap();
        let v = idx.version();
        match idx.append(1, 5, &[4]) {
            Err(Error::OutOfOrder { acknowledged, got }) => assert_eq!((acknowledged, got), (3, 5)),
            other => panic!("{other:?}"),
        }
        assert_eq!(idx.version(), v);
        assert_eq!(idx.token_count(1), 3);
    }

    #[test]
    fn unique_continuation_scores_one() {
        let mut idx = GroupDraftIndex::new("g");
        idx.append(0, 0, &[1, 2, 3, 4, 5]).unwrap();
        let c = idx.speculate(&[2, 3], &args(8, 1, 4, 1));
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].tokens, vec![4, 5]);
        assert_eq!(c[0].score, 1.0);
    }

    #[test]
    fn symmetric_split() {
        let mut idx = GroupDraftIndex::new("g");
        idx.append(0, 0, &[1, 2, 3]).unwrap();
        idx.append(1, 0, &[1, 2, 4]).unwrap();
        let c = idx.speculate(&[1, 2], &args(8, 1, 4, 2));
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].tokens, vec![3]);
        assert_eq!(c[1].tokens, vec![4]);
        assert!(c.iter().all(|x| x.score == 0.5));
    }

    #[test]
    fn zero_spec_tokens_or_short_pattern_is_empty() {
        let mut idx = GroupDraftIndex::new("g");
        idx.append(0, 0, &[1, 2, 3]).unwrap();
        assert!(idx.speculate(&[1], &args(0, 1, 4, 1)).is_empty());
        assert!(idx.speculate(&[1], &args(4, 2, 4, 1)).is_empty());
        assert!(idx.speculate(&[7, 8], &args(4, 1, 4, 1)).is_empty());
    }

    #[test]
    fn counts_match_substring_occurrences() {
        let mut idx = GroupDraftIndex::new("g");
        idx.append(0, 0, &[1, 1, 1, 2]).unwrap();
        idx.append(1, 0, &[1, 1]).unwrap();
        idx.append(0, 4, &[1, 1]).unwrap();
        assert_eq!(idx.occurrences(&[1]), 7);
        assert_eq!(idx.occurrences(&[1, 1]), 4);
        assert_eq!(idx.occurrences(&[1, 1, 1]), 1);
        assert_eq!(idx.occurrences(&[2, 1]), 1);
        assert_eq!(idx.occurrences(&[1, 2, 1, 1]), 1);
    }

    #[test]
    fn delta_since_current_is_empty() {
        let mut idx = GroupDraftIndex::new("g");
        idx.append(0, 0, &[1, 2, 3]).unwrap();
        match idx.snapshot_delta(idx.version()) {
            DeltaOutcome::Delta(d) => {
                assert!(d.entries.is_empty());
                let mut replica = idx.clone();
                let v = replica.apply_delta(&d).unwrap();
                assert_eq!(v, idx.version());
            }
            DeltaOutcome::FullRequired => panic!("expected delta"),
        }
    }

    #[test]
    fn compacted_history_requires_full_snapshot() {
        let mut idx = GroupDraftIndex::new("g");
        idx.append(0, 0, &[1, 2, 3]).unwrap();
        idx.append(1, 0, &[1, 2, 4]).unwrap();
        idx.append(0, 3, &[5]).unwrap();
        idx.compact_history(2);
        assert_eq!(idx.snapshot_delta(1), DeltaOutcome::FullRequired);
        assert!(matches!(idx.snapshot_delta(2), DeltaOutcome::Delta(_)));

        let blob = idx.full_snapshot().encode();
        let decoded = DraftDelta::decode(&blob).unwrap();
        let mut replica = GroupDraftIndex::new("g");
        replica.apply_delta(&decoded).unwrap();
        assert_eq!(replica.version(), idx.version());
        for pat in [&[1u32, 2][..], &[2], &[3], &[1]] {
            let a = args(4, 1, 4, 3);
            assert_eq!(replica.speculate_with(pat, &a, &Cutoffs::NONE), idx.speculate_with(pat, &a, &Cutoffs::NONE));
        }
    }

    #[test]
    fn mismatched_base_is_rejected() {
        let mut src = GroupDraftIndex::new("g");
        src.append(0, 0, &[1]).unwrap();
        src.append(0, 1, &[2]).unwrap();
        let DeltaOutcome::Delta(d) = src.snapshot_delta(1) else { panic!() };
        let mut replica = GroupDraftIndex::new("g");
        assert!(matches!(replica.apply_delta(&d), Err(Error::Delta(_))));
    }
}
