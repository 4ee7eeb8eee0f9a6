//! Grouped draft server and its embedded client.
//!
//! The server shards [`GroupDraftIndex`] instances by a stable hash of the
//! group id. Clients buffer each request's emitted tokens and push them in
//! batches (`update_cst`), periodically pull deltas for the groups they are
//! currently serving (`fetch_cst`), and answer draft queries from their local
//! replicas only (`batch_speculate`).

mod client;
pub mod wire;

pub use client::{ClientConfig, ClientStats, DraftClient, SpecRequest};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::cst::{Cutoffs, DeltaOutcome, DraftCandidate, DraftDelta, GroupDraftIndex, SpeculationArgs};
use crate::error::{Error, Result};
use crate::util::fnv1a;
use crate::workload::TokenId;

pub const DEFAULT_TTL_SECONDS: u32 = 600;
pub const SHARDS_ENV: &str = "ROLLSIM_DGDS_SHARDS";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftCacheInfo {
    pub group_id: String,
    /// 0 when the client holds nothing for the group.
    pub cached_version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FetchReply {
    UpToDate,
    Delta(DraftDelta),
    Full(DraftDelta),
    UnknownGroup,
}

impl FetchReply {
    pub fn payload_len(&self) -> usize {
        match self {
            FetchReply::Delta(d) | FetchReply::Full(d) => d.encoded_len(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardMap {
    pub shard_count: usize,
}

impl ShardMap {
    pub fn new(shard_count: usize) -> Self {
        ShardMap { shard_count: shard_count.max(1) }
    }

    /// Shard count from `ROLLSIM_DGDS_SHARDS`, falling back to `default`.
    pub fn from_env(default: usize) -> Self {
        let n = std::env::var(SHARDS_ENV).ok().and_then(|v| v.trim().parse().ok()).unwrap_or(default);
        ShardMap::new(n)
    }

    pub fn route(&self, group_id: &str) -> usize {
        (fnv1a(group_id.as_bytes()) % self.shard_count as u64) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRegistration {
    pub group_id: String,
    pub ttl_seconds: u32,
    pub registered_at: f64,
    pub last_touch: f64,
}

impl GroupRegistration {
    fn expired(&self, now: f64) -> bool {
        now > self.last_touch + self.ttl_seconds as f64
    }
}

#[derive(Debug)]
struct GroupEntry {
    index: GroupDraftIndex,
    registration: GroupRegistration,
}

#[derive(Debug, Default)]
struct Shard {
    groups: BTreeMap<String, GroupEntry>,
    expired: u64,
}

impl Shard {
    fn purge(&mut self, now: f64) {
        let before = self.groups.len();
        self.groups.retain(|_, g| !g.registration.expired(now));
        self.expired += (before - self.groups.len()) as u64;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServerStats {
    pub groups: usize,
    pub stored_tokens: usize,
    pub expired_groups: u64,
}

/// The sharded draft server. Each shard sits behind its own lock, so
/// operations on groups in different shards never contend.
#[derive(Debug)]
pub struct DraftServer {
    map: ShardMap,
    shards: Vec<Mutex<Shard>>,
    clock_bits: AtomicU64,
    default_ttl: u32,
}

impl DraftServer {
    pub fn new(map: ShardMap) -> Self {
        DraftServer {
            map,
            shards: (0..map.shard_count).map(|_| Mutex::new(Shard::default())).collect(),
            clock_bits: AtomicU64::new(0f64.to_bits()),
            default_ttl: DEFAULT_TTL_SECONDS,
        }
    }

    pub fn with_default_ttl(mut self, ttl_seconds: u32) -> Self {
        self.default_ttl = ttl_seconds.max(1);
        self
    }

    pub fn shard_map(&self) -> ShardMap {
        self.map
    }

    pub fn now(&self) -> f64 {
        f64::from_bits(self.clock_bits.load(Ordering::SeqCst))
    }

    fn shard(&self, group_id: &str) -> std::sync::MutexGuard<'_, Shard> {
        let mut s = self.shards[self.map.route(group_id)].lock().expect("shard lock poisoned");
        s.purge(self.now());
        s
    }

    /// Group ids currently stored on shard `i`, sorted.
    pub fn shard_groups(&self, i: usize) -> Vec<String> {
        self.shards[i].lock().expect("shard lock poisoned").groups.keys().cloned().collect()
    }

    pub fn group_version(&self, group_id: &str) -> Option<u64> {
        self.shard(group_id).groups.get(group_id).map(|g| g.index.version())
    }

    /// Server-side draft query, used as the reference for client replicas.
    pub fn speculate(&self, group_id: &str, pattern: &[TokenId], args: &SpeculationArgs, cutoffs: &Cutoffs) -> Vec<DraftCandidate> {
        self.shard(group_id)
            .groups
            .get(group_id)
            .map(|g| g.index.speculate_with(pattern, args, cutoffs))
            .unwrap_or_default()
    }

    pub fn stats(&self) -> ServerStats {
        let mut st = ServerStats::default();
        for s in &self.shards {
            let s = s.lock().expect("shard lock poisoned");
            st.groups += s.groups.len();
            st.stored_tokens += s.groups.values().map(|g| g.index.total_tokens()).sum::<usize>();
            st.expired_groups += s.expired;
        }
        st
    }
}

/// The operations a draft client needs from a server, over any transport.
pub trait DraftService {
    fn register_group(&self, group_id: &str, ttl_seconds: u32) -> Result<()>;
    fn update_cst(&self, group_id: &str, request_id: u32, prev_token_count: u32, new_tokens: &[TokenId]) -> Result<u64>;
    fn fetch_cst(&self, group_ids: &[String], infos: &[DraftCacheInfo]) -> Result<Vec<FetchReply>>;
    /// Move the server's simulated clock forward; expired groups are dropped.
    fn advance_clock(&self, now: f64) -> Result<()>;
}

impl DraftService for DraftServer {
    fn register_group(&self, group_id: &str, ttl_seconds: u32) -> Result<()> {
        if ttl_seconds == 0 {
            return Err(Error::Config("ttl_seconds must be > 0".into()));
        }
        let now = self.now();
        let mut shard = self.shard(group_id);
        let entry = shard.groups.entry(group_id.to_string()).or_insert_with(|| GroupEntry {
            index: GroupDraftIndex::new(group_id),
            registration: GroupRegistration {
                group_id: group_id.to_string(),
                ttl_seconds,
                registered_at: now,
                last_touch: now,
            },
        });
        entry.registration.ttl_seconds = ttl_seconds;
        entry.registration.last_touch = now;
        Ok(())
    }

    fn update_cst(&self, group_id: &str, request_id: u32, prev_token_count: u32, new_tokens: &[TokenId]) -> Result<u64> {
        let now = self.now();
        let default_ttl = self.default_ttl;
        let mut shard = self.shard(group_id);
        let entry = shard.groups.entry(group_id.to_string()).or_insert_with(|| GroupEntry {
            index: GroupDraftIndex::new(group_id),
            registration: GroupRegistration {
                group_id: group_id.to_string(),
                ttl_seconds: default_ttl,
                registered_at: now,
                last_touch: now,
            },
        });
        let v = entry.index.append(request_id, prev_token_count, new_tokens)?;
        entry.registration.last_touch = now;
        Ok(v)
    }

    fn fetch_cst(&self, group_ids: &[String], infos: &[DraftCacheInfo]) -> Result<Vec<FetchReply>> {
        if group_ids.len() != infos.len() {
            return Err(Error::Config(format!(
                "fetch_cst got {} group ids but {} cache infos",
                group_ids.len(),
                infos.len()
            )));
        }
        Ok(group_ids
            .iter()
            .zip(infos)
            .map(|(gid, info)| {
                let shard = self.shard(gid);
                let Some(entry) = shard.groups.get(gid) else {
                    return FetchReply::UnknownGroup;
                };
                let idx = &entry.index;
                let cached = if info.group_id == *gid { info.cached_version } else { 0 };
                if cached == idx.version() && cached != 0 {
                    return FetchReply::UpToDate;
                }
                if cached == 0 {
                    return FetchReply::Full(idx.full_snapshot());
                }
                match idx.snapshot_delta(cached) {
                    DeltaOutcome::Delta(d) => {
                        let full = idx.full_snapshot();
                        if full.encoded_len() < d.encoded_len() {
                            FetchReply::Full(full)
                        } else {
                            FetchReply::Delta(d)
                        }
                    }
                    DeltaOutcome::FullRequired => FetchReply::Full(idx.full_snapshot()),
                }
            })
            .collect())
    }

    fn advance_clock(&self, now: f64) -> Result<()> {
        let prev = self.now();
        if now > prev {
            self.clock_bits.store(now.to_bits(), Ordering::SeqCst);
        }
        for s in &self.shards {
            s.lock().expect("shard lock poisoned").purge(self.now());
        }
        Ok(())
    }
}

impl<T: DraftService + ?Sized> DraftService for std::sync::Arc<T> {
    fn register_group(&self, group_id: &str, ttl_seconds: u32) -> Result<()> {
        (**self).register_group(group_id, ttl_seconds)
    }
    fn update_cst(&self, group_id: &str, request_id: u32, prev_token_count: u32, new_tokens: &[TokenId]) -> Result<u64> {
        (**self).update_cst(group_id, request_id, prev_token_count, new_tokens)
    }
    fn fetch_cst(&self, group_ids: &[String], infos: &[DraftCacheInfo]) -> Result<Vec<FetchReply>> {
        (**self).fetch_cst(group_ids, infos)
    }
    fn advance_clock(&self, now: f64) -> Result<()> {
        (**self).advance_clock(now)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info(g: &str, v: u64) -> DraftCacheInfo {
        DraftCacheInfo { group_id: g.into(), cached_version: v }
    }

    #[test]
    fn first_append_creates_group_at_version_one() {
        let s = DraftServer::new(ShardMap::new(4));
        assert_eq!(s.update_cst("g1", 0, 0, &[1, 2, 3]).unwrap(), 1);
        assert_eq!(s.group_version("g1"), Some(1));
    }

    #[test]
    fn groups_route_to_their_own_shard() {
        let s = DraftServer::new(ShardMap::new(8));
        let map = s.shard_map();
        let (a, b) = ("alpha", "omega-7");
        assert_ne!(map.route(a), map.route(b));
        s.update_cst(a, 0, 0, &[1]).unwrap();
        assert_eq!(s.shard_groups(map.route(a)), vec![a.to_string()]);
        assert!(s.shard_groups(map.route(b)).is_empty());
        s.update_cst(b, 0, 0, &[1]).unwrap();
        assert_eq!(s.shard_groups(map.route(a)), vec![a.to_string()]);
        assert_eq!(s.shard_groups(map.route(b)), vec![b.to_string()]);
    }

    #[test]
    fn duplicate_append_is_rejected_without_change() {
        let s = DraftServer::new(ShardMap::new(2));
        s.update_cst("g", 3, 0, &[5, 6]).unwrap();
        let err = s.update_cst("g", 3, 0, &[5, 6]).unwrap_err();
        assert!(matches!(err, Error::OutOfOrder { acknowledged: 2, got: 0 }));
        assert_eq!(s.group_version("g"), Some(1));
        assert_eq!(s.stats().stored_tokens, 2);
    }

    #[test]
    fn fetch_reply_kinds() {
        let s = DraftServer::new(ShardMap::new(2));
        s.update_cst("g", 0, 0, &[1, 2]).unwrap();
        s.update_cst("g", 0, 2, &[3]).unwrap();
        let gids = vec!["g".to_string(), "g".to_string(), "g".to_string(), "nope".to_string()];
        let r = s.fetch_cst(&gids, &[info("g", 2), info("g", 0), info("g", 1), info("nope", 0)]).unwrap();
        assert_eq!(r[0], FetchReply::UpToDate);
        assert_eq!(r[0].payload_len(), 0);
        assert!(matches!(r[1], FetchReply::Full(_)));
        assert!(matches!(r[2], FetchReply::Delta(_)));
        assert_eq!(r[3], FetchReply::UnknownGroup);
        assert!(s.fetch_cst(&gids, &[]).is_err());
    }

    #[test]
    fn ttl_expiry_and_renewal() {
        let s = DraftServer::new(ShardMap::new(2));
        s.register_group("g", 60).unwrap();
        s.advance_clock(61.0).unwrap();
        let r = s.fetch_cst(&["g".to_string()], &[info("g", 0)]).unwrap();
        assert_eq!(r[0], FetchReply::UnknownGroup);
        assert_eq!(s.stats().expired_groups, 1);

        s.register_group("h", 60).unwrap();
        s.advance_clock(100.0).unwrap();
        s.register_group("h", 60).unwrap();
        s.advance_clock(150.0).unwrap();
        assert!(s.group_version("h").is_some());
        s.advance_clock(161.0).unwrap();
        assert!(s.group_version("h").is_none());
        assert!(s.register_group("z", 0).is_err());
    }

    #[test]
    fn shard_balance_over_random_ids() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let map = ShardMap::new(8);
        let mut load = [0usize; 8];
        let n = 10_000;
        for _ in 0..n {
            let id: String = (0..12).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            load[map.route(&id)] += 1;
        }
        let mean = n as f64 / 8.0;
        assert!(*load.iter().max().unwrap() as f64 <= 1.35 * mean, "{load:?}");
    }
}
