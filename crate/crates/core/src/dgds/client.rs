use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{DraftCacheInfo, DraftService, FetchReply, DEFAULT_TTL_SECONDS};
use crate::cst::{Cutoffs, DraftCandidate, GroupDraftIndex, SpeculationArgs};
use crate::error::Result;
use crate::workload::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    /// Simulated seconds between fetches; 0 fetches before every query batch.
    pub fetch_period: f64,
    pub append_batch_tokens: u32,
    pub ttl_seconds: u32,
    pub cutoffs: Cutoffs,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            fetch_period: 0.2,
            append_batch_tokens: 16,
            ttl_seconds: DEFAULT_TTL_SECONDS,
            cutoffs: Cutoffs::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpecRequest<'a> {
    pub group_id: &'a str,
    pub pattern: &'a [TokenId],
    pub args: SpeculationArgs,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClientStats {
    pub appends_sent: u64,
    pub fetches: u64,
    pub deltas_applied: u64,
    pub full_snapshots: u64,
    pub bytes_fetched: u64,
}

#[derive(Debug)]
struct PendingAppend {
    prev_token_count: u32,
    tokens: Vec<TokenId>,
}

/// Draft client embedded in one inference instance.
#[derive(Debug)]
pub struct DraftClient {
    config: ClientConfig,
    replicas: BTreeMap<String, GroupDraftIndex>,
    registered: BTreeSet<String>,
    pending: BTreeMap<(String, u32), PendingAppend>,
    last_fetch: Option<f64>,
    stats: ClientStats,
}

impl DraftClient {
    pub fn new(config: ClientConfig) -> Self {
        DraftClient {
            config,
            replicas: BTreeMap::new(),
            registered: BTreeSet::new(),
            pending: BTreeMap::new(),
            last_fetch: None,
            stats: ClientStats::default(),
        }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn stats(&self) -> ClientStats {
        self.stats
    }

    pub fn register_group<S: DraftService + ?Sized>(&mut self, svc: &S, group_id: &str, ttl_seconds: u32) -> Result<()> {
        svc.register_group(group_id, ttl_seconds)?;
        self.registered.insert(group_id.to_string());
        Ok(())
    }

    pub fn is_registered(&self, group_id: &str) -> bool {
        self.registered.contains(group_id)
    }

    pub fn replica(&self, group_id: &str) -> Option<&GroupDraftIndex> {
        self.replicas.get(group_id)
    }

    pub fn cached_version(&self, group_id: &str) -> u64 {
        self.replicas.get(group_id).map_or(0, |r| r.version())
    }

    /// Buffer tokens emitted by a request. `prev_token_count` is the number of
    /// tokens of this request the server has already been sent, and is only
    /// read when no buffer exists yet. Sends once the batch threshold is hit.
    pub fn push_tokens<S: DraftService + ?Sized>(
        &mut self,
        svc: &S,
        group_id: &str,
        request_id: u32,
        prev_token_count: u32,
        tokens: &[TokenId],
    ) -> Result<()> {
        let key = (group_id.to_string(), request_id);
        let p = self
            .pending
            .entry(key.clone())
            .or_insert_with(|| PendingAppend { prev_token_count, tokens: Vec::new() });
        p.tokens.extend_from_slice(tokens);
        if p.tokens.len() as u32 >= self.config.append_batch_tokens {
            self.flush_one(svc, &key)?;
        }
        Ok(())
    }

    fn flush_one<S: DraftService + ?Sized>(&mut self, svc: &S, key: &(String, u32)) -> Result<()> {
        if let Some(p) = self.pending.remove(key) {
            if !p.tokens.is_empty() {
                svc.update_cst(&key.0, key.1, p.prev_token_count, &p.tokens)?;
                self.stats.appends_sent += 1;
            }
        }
        Ok(())
    }

    /// Send whatever is buffered for one request.
    pub fn flush<S: DraftService + ?Sized>(&mut self, svc: &S, group_id: &str, request_id: u32) -> Result<()> {
        self.flush_one(svc, &(group_id.to_string(), request_id))
    }

    pub fn flush_all<S: DraftService + ?Sized>(&mut self, svc: &S) -> Result<()> {
        let keys: Vec<_> = self.pending.keys().cloned().collect();
        for k in keys {
            self.flush_one(svc, &k)?;
        }
        Ok(())
    }

    pub fn pending_tokens(&self, group_id: &str, request_id: u32) -> usize {
        self.pending.get(&(group_id.to_string(), request_id)).map_or(0, |p| p.tokens.len())
    }

    pub fn fetch_due(&self, now: f64) -> bool {
        match self.last_fetch {
            None => true,
            Some(t) => now - t >= self.config.fetch_period - 1e-9,
        }
    }

    /// Synchronize replicas for exactly the given groups. Replicas of groups
    /// not listed are dropped.
    pub fn sync<S: DraftService + ?Sized>(&mut self, svc: &S, group_ids: &[String], now: f64) -> Result<()> {
        self.last_fetch = Some(now);
        let wanted: BTreeSet<&String> = group_ids.iter().collect();
        self.replicas.retain(|g, _| wanted.contains(g));
        if group_ids.is_empty() {
            return Ok(());
        }
        let ids: Vec<String> = wanted.iter().map(|g| (*g).clone()).collect();
        let infos: Vec<DraftCacheInfo> = ids
            .iter()
            .map(|g| DraftCacheInfo { group_id: g.clone(), cached_version: self.cached_version(g) })
            .collect();
        let replies = svc.fetch_cst(&ids, &infos)?;
        self.stats.fetches += 1;
        for (gid, reply) in ids.iter().zip(replies) {
            self.stats.bytes_fetched += reply.payload_len() as u64;
            match reply {
                FetchReply::UpToDate => {}
                FetchReply::Delta(d) => {
                    let replica = self.replicas.entry(gid.clone()).or_insert_with(|| GroupDraftIndex::new(gid.clone()));
                    if replica.apply_delta(&d).is_err() {
                        // stale base; start over from a full snapshot next time
                        self.replicas.remove(gid);
                    } else {
                        self.stats.deltas_applied += 1;
                    }
                }
                FetchReply::Full(d) => {
                    let mut replica = GroupDraftIndex::new(gid.clone());
                    replica.apply_delta(&d)?;
                    self.replicas.insert(gid.clone(), replica);
                    self.stats.full_snapshots += 1;
                }
                FetchReply::UnknownGroup => {
                    self.replicas.remove(gid);
                    self.registered.remove(gid);
                }
            }
        }
        Ok(())
    }

    /// Draft candidates for a batch of requests, read from local replicas.
    pub fn batch_speculate(&self, requests: &[SpecRequest<'_>]) -> Vec<Vec<DraftCandidate>> {
        requests.iter().map(|r| self.speculate(r)).collect()
    }

    pub fn speculate(&self, r: &SpecRequest<'_>) -> Vec<DraftCandidate> {
        match self.replicas.get(r.group_id) {
            Some(idx) => idx.speculate_with(r.pattern, &r.args, &self.config.cutoffs),
            None => Vec::new(),
        }
    }
}
