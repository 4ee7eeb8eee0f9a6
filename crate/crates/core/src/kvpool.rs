//! Global KV cache pool and per-instance KV occupancy.
//!
//! Capacities are counted in tokens. Each request owns at most one entry,
//! which lives on exactly one tier. Instance occupancy is split into the
//! tokens actually resident and the tokens reserved for the chunk a request
//! is currently allowed to generate; admission checks use the sum.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvParams {
    /// Accounting-only metadata.
    pub bytes_per_token: u64,
    pub instance_capacity_tokens: u64,
    pub dram_capacity_tokens: u64,
    pub ssd_capacity_tokens: u64,
    /// tokens per second
    pub dram_bandwidth: f64,
    pub ssd_bandwidth: f64,
}

impl Default for KvParams {
    fn default() -> Self {
        KvParams {
            bytes_per_token: 160 * 1024,
            instance_capacity_tokens: 400_000,
            dram_capacity_tokens: 4_000_000,
            ssd_capacity_tokens: 40_000_000,
            dram_bandwidth: 1.0e6,
            ssd_bandwidth: 2.0e5,
        }
    }
}

impl KvParams {
    pub fn validate(&self) -> Result<()> {
        let positive = self.bytes_per_token > 0
            && self.instance_capacity_tokens > 0
            && self.dram_capacity_tokens > 0
            && self.ssd_capacity_tokens > 0
            && self.dram_bandwidth > 0.0
            && self.ssd_bandwidth > 0.0;
        if !positive {
            return Err(Error::Config("kv parameters must all be positive".into()));
        }
        if self.ssd_bandwidth > self.dram_bandwidth {
            return Err(Error::Config("ssd_bandwidth must not exceed dram_bandwidth".into()));
        }
        Ok(())
    }
}

/// (group position in the trace, request index within the group)
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestKey {
    pub group: u32,
    pub index: u32,
}

impl RequestKey {
    pub fn new(group: u32, index: u32) -> Self {
        RequestKey { group, index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "tier", content = "instance")]
pub enum Tier {
    Instance(u32),
    Dram,
    Ssd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    pub key: RequestKey,
    pub resident_tokens: u64,
    pub tier: Tier,
    pub last_touch: f64,
    /// Chunk tokens reserved on the instance but not yet generated.
    reserved: u64,
    /// Instance still holding the tokens while an offload is in flight.
    draining_from: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KvEventKind {
    Place,
    Offload,
    OffloadDone,
    Demote,
    Load,
    Release,
    Discard,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KvEvent {
    pub time: f64,
    pub kind: KvEventKind,
    pub key: RequestKey,
    pub tokens: u64,
    pub duration: f64,
    pub dram_used: u64,
    pub ssd_used: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PoolCounters {
    pub offloads: u64,
    pub loads: u64,
    pub demotions: u64,
    pub releases: u64,
    pub double_release_warnings: u64,
    pub discards: u64,
    pub recompute_tokens: u64,
}

#[derive(Debug, Clone)]
pub struct KvPool {
    params: KvParams,
    entries: BTreeMap<RequestKey, KvEntry>,
    resident: Vec<u64>,
    reserved: Vec<u64>,
    dram_used: u64,
    ssd_used: u64,
    released: BTreeSet<RequestKey>,
    released_tokens: u64,
    counters: PoolCounters,
    events: Vec<KvEvent>,
}

impl KvPool {
    pub fn new(params: KvParams, instances: usize) -> Result<Self> {
        params.validate()?;
        Ok(KvPool {
            params,
            entries: BTreeMap::new(),
            resident: vec![0; instances],
            reserved: vec![0; instances],
            dram_used: 0,
            ssd_used: 0,
            released: BTreeSet::new(),
            released_tokens: 0,
            counters: PoolCounters::default(),
            events: Vec::new(),
        })
    }

    pub fn params(&self) -> &KvParams {
        &self.params
    }

    pub fn counters(&self) -> PoolCounters {
        self.counters
    }

    pub fn entry(&self, key: RequestKey) -> Option<&KvEntry> {
        self.entries.get(&key)
    }

    pub fn instance_capacity(&self) -> u64 {
        self.params.instance_capacity_tokens
    }

    /// Tokens resident on an instance, including offloads still in flight.
    pub fn instance_resident(&self, instance: u32) -> u64 {
        self.resident[instance as usize]
    }

    /// Resident plus reserved tokens; the quantity admission is checked against.
    pub fn instance_committed(&self, instance: u32) -> u64 {
        self.resident[instance as usize] + self.reserved[instance as usize]
    }

    pub fn instance_headroom(&self, instance: u32) -> u64 {
        self.params.instance_capacity_tokens.saturating_sub(self.instance_committed(instance))
    }

    pub fn dram_used(&self) -> u64 {
        self.dram_used
    }

    pub fn ssd_used(&self) -> u64 {
        self.ssd_used
    }

    pub fn stored_tokens(&self) -> u64 {
        self.entries.values().map(|e| e.resident_tokens).sum()
    }

    pub fn released_tokens(&self) -> u64 {
        self.released_tokens
    }

    pub fn take_events(&mut self) -> Vec<KvEvent> {
        std::mem::take(&mut self.events)
    }

    fn log(&mut self, time: f64, kind: KvEventKind, key: RequestKey, tokens: u64, duration: f64) {
        self.events.push(KvEvent {
            time,
            kind,
            key,
            tokens,
            duration,
            dram_used: self.dram_used,
            ssd_used: self.ssd_used,
        });
    }

    /// Place a request's KV on an instance after a prefill (fresh admission or
    /// a baseline re-prefill). Returns false, changing nothing, when
    /// `tokens + reserve` does not fit.
    pub fn place(&mut self, key: RequestKey, instance: u32, tokens: u64, reserve: u64, now: f64) -> Result<bool> {
        if self.entries.contains_key(&key) {
            return Err(Error::Sim(format!("{key:?} already holds KV")));
        }
        if tokens + reserve > self.instance_headroom(instance) {
            return Ok(false);
        }
        self.resident[instance as usize] += tokens;
        self.reserved[instance as usize] += reserve;
        self.entries.insert(
            key,
            KvEntry { key, resident_tokens: tokens, tier: Tier::Instance(instance), last_touch: now, reserved: reserve, draining_from: None },
        );
        self.released.remove(&key);
        self.log(now, KvEventKind::Place, key, tokens, 0.0);
        Ok(true)
    }

    /// Account `n` newly generated tokens, consuming the reservation first.
    pub fn grow(&mut self, key: RequestKey, n: u64) -> Result<()> {
        let e = self.entries.get_mut(&key).ok_or_else(|| Error::Sim(format!("{key:?} has no KV")))?;
        let Tier::Instance(i) = e.tier else {
            return Err(Error::Sim(format!("{key:?} grows while not on an instance")));
        };
        let from_reserve = n.min(e.reserved);
        e.reserved -= from_reserve;
        e.resident_tokens += n;
        self.reserved[i as usize] -= from_reserve;
        self.resident[i as usize] += n;
        Ok(())
    }

    /// Add to a request's reservation on its current instance.
    pub fn reserve(&mut self, key: RequestKey, n: u64) -> Result<bool> {
        let e = self.entries.get(&key).ok_or_else(|| Error::Sim(format!("{key:?} has no KV")))?;
        let Tier::Instance(i) = e.tier else {
            return Err(Error::Sim(format!("{key:?} reserves while not on an instance")));
        };
        if n > self.instance_headroom(i) {
            return Ok(false);
        }
        self.entries.get_mut(&key).unwrap().reserved += n;
        self.reserved[i as usize] += n;
        Ok(true)
    }

    fn drop_reservation(&mut self, key: RequestKey) {
        if let Some(e) = self.entries.get_mut(&key) {
            if let Tier::Instance(i) = e.tier {
                self.reserved[i as usize] -= e.reserved;
            }
            e.reserved = 0;
        }
    }

    fn demote_lru(&mut self, needed: u64, now: f64) -> Result<()> {
        while self.dram_used + needed > self.params.dram_capacity_tokens {
            let victim = self
                .entries
                .values()
                .filter(|e| e.tier == Tier::Dram)
                .min_by(|a, b| a.last_touch.total_cmp(&b.last_touch).then(a.key.cmp(&b.key)))
                .map(|e| (e.key, e.resident_tokens));
            let Some((vk, vt)) = victim else {
                break;
            };
            if self.ssd_used + vt > self.params.ssd_capacity_tokens {
                return Err(self.exhausted(vt));
            }
            self.dram_used -= vt;
            self.ssd_used += vt;
            self.entries.get_mut(&vk).unwrap().tier = Tier::Ssd;
            self.counters.demotions += 1;
            self.log(now, KvEventKind::Demote, vk, vt, 0.0);
        }
        Ok(())
    }

    fn exhausted(&self, tokens: u64) -> Error {
        Error::Capacity(format!(
            "KV pool exhausted storing {tokens} tokens: dram {}/{} ssd {}/{}; raise dram/ssd capacity",
            self.dram_used, self.params.dram_capacity_tokens, self.ssd_used, self.params.ssd_capacity_tokens
        ))
    }

    /// Start moving an instance-resident entry into the pool. The instance
    /// keeps the tokens until [`KvPool::finish_offload`]. Returns the
    /// completion time.
    pub fn offload(&mut self, key: RequestKey, now: f64) -> Result<f64> {
        self.drop_reservation(key);
        let e = self.entries.get(&key).ok_or_else(|| Error::Sim(format!("{key:?} has no KV")))?;
        let Tier::Instance(from) = e.tier else {
            return Err(Error::Sim(format!("{key:?} offloaded while not on an instance")));
        };
        let tokens = e.resident_tokens;
        let tier = if tokens <= self.params.dram_capacity_tokens {
            self.demote_lru(tokens, now)?;
            if self.dram_used + tokens <= self.params.dram_capacity_tokens {
                Tier::Dram
            } else {
                Tier::Ssd
            }
        } else {
            Tier::Ssd
        };
        let bandwidth = match tier {
            Tier::Dram => {
                self.dram_used += tokens;
                self.params.dram_bandwidth
            }
            _ => {
                if self.ssd_used + tokens > self.params.ssd_capacity_tokens {
                    return Err(self.exhausted(tokens));
                }
                self.ssd_used += tokens;
                self.params.ssd_bandwidth
            }
        };
        let duration = tokens as f64 / bandwidth;
        let e = self.entries.get_mut(&key).unwrap();
        e.tier = tier;
        e.last_touch = now;
        e.draining_from = Some(from);
        self.counters.offloads += 1;
        self.log(now, KvEventKind::Offload, key, tokens, duration);
        Ok(now + duration)
    }

    /// Free the source instance once an offload transfer has completed.
    pub fn finish_offload(&mut self, key: RequestKey, now: f64) -> Result<()> {
        let e = self.entries.get_mut(&key).ok_or_else(|| Error::Sim(format!("{key:?} has no KV")))?;
        let from = e.draining_from.take().ok_or_else(|| Error::Sim(format!("{key:?} has no offload in flight")))?;
        let tokens = e.resident_tokens;
        self.resident[from as usize] -= tokens;
        self.log(now, KvEventKind::OffloadDone, key, tokens, 0.0);
        Ok(())
    }

    /// Bring a pooled entry onto an instance with `chunk` tokens reserved.
    /// `Ok(None)` is a refusal and changes nothing; otherwise the KV is
    /// usable at the returned time.
    pub fn load(&mut self, key: RequestKey, instance: u32, chunk: u64, now: f64) -> Result<Option<f64>> {
        let e = self.entries.get(&key).ok_or_else(|| Error::Sim(format!("{key:?} has no KV")))?;
        if e.draining_from.is_some() {
            return Err(Error::Sim(format!("{key:?} loaded before its offload finished")));
        }
        let tokens = e.resident_tokens;
        let bandwidth = match e.tier {
            Tier::Dram => self.params.dram_bandwidth,
            Tier::Ssd => self.params.ssd_bandwidth,
            Tier::Instance(_) => return Err(Error::Sim(format!("{key:?} is already on an instance"))),
        };
        if tokens + chunk > self.instance_headroom(instance) {
            return Ok(None);
        }
        match e.tier {
            Tier::Dram => self.dram_used -= tokens,
            _ => self.ssd_used -= tokens,
        }
        self.resident[instance as usize] += tokens;
        self.reserved[instance as usize] += chunk;
        let e = self.entries.get_mut(&key).unwrap();
        e.tier = Tier::Instance(instance);
        e.reserved = chunk;
        e.last_touch = now;
        let duration = tokens as f64 / bandwidth;
        self.counters.loads += 1;
        self.log(now, KvEventKind::Load, key, tokens, duration);
        Ok(Some(now + duration))
    }

    /// Release a finished request's KV. A second release is a no-op that
    /// bumps the warning counter.
    pub fn release(&mut self, key: RequestKey, now: f64) -> u64 {
        self.drop_reservation(key);
        let Some(e) = self.entries.remove(&key) else {
            if self.released.contains(&key) {
                self.counters.double_release_warnings += 1;
                log::warn!("double release of {key:?}");
            }
            return 0;
        };
        let tokens = e.resident_tokens;
        match e.tier {
            Tier::Instance(i) => self.resident[i as usize] -= tokens,
            Tier::Dram => self.dram_used -= tokens,
            Tier::Ssd => self.ssd_used -= tokens,
        }
        if let Some(from) = e.draining_from {
            self.resident[from as usize] -= tokens;
        }
        self.released.insert(key);
        self.released_tokens += tokens;
        self.counters.releases += 1;
        self.log(now, KvEventKind::Release, key, tokens, 0.0);
        tokens
    }

    /// Drop an instance-resident entry without saving it (baseline preemption).
    pub fn discard(&mut self, key: RequestKey, now: f64) -> Result<u64> {
        self.drop_reservation(key);
        let e = self.entries.get(&key).ok_or_else(|| Error::Sim(format!("{key:?} has no KV")))?;
        let Tier::Instance(i) = e.tier else {
            return Err(Error::Sim(format!("{key:?} discarded while not on an instance")));
        };
        let tokens = e.resident_tokens;
        self.entries.remove(&key);
        self.resident[i as usize] -= tokens;
        self.counters.discards += 1;
        self.log(now, KvEventKind::Discard, key, tokens, 0.0);
        Ok(tokens)
    }

    /// Record tokens whose KV must be rebuilt by a prefill after a discard.
    pub fn charge_recompute(&mut self, tokens: u64) {
        self.counters.recompute_tokens += tokens;
    }

    /// Check that every tier is within capacity.
    pub fn check_capacity(&self) -> Result<()> {
        for (i, (&r, &v)) in self.resident.iter().zip(&self.reserved).enumerate() {
            if r + v > self.params.instance_capacity_tokens {
                return Err(Error::Capacity(format!(
                    "instance {i} holds {} tokens over capacity {}",
                    r + v,
                    self.params.instance_capacity_tokens
                )));
            }
        }
        if self.dram_used > self.params.dram_capacity_tokens || self.ssd_used > self.params.ssd_capacity_tokens {
            return Err(Error::Capacity("pool tier over capacity".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> KvParams {
        KvParams {
            bytes_per_token: 1,
            instance_capacity_tokens: 100_000,
            dram_capacity_tokens: 20_000,
            ssd_capacity_tokens: 50_000,
            dram_bandwidth: 1.0e6,
            ssd_bandwidth: 2.0e5,
        }
    }

    const A: RequestKey = RequestKey { group: 0, index: 0 };
    const B: RequestKey = RequestKey { group: 0, index: 1 };
    const C: RequestKey = RequestKey { group: 1, index: 0 };

    #[test]
    fn offload_duration_and_deferred_free() {
        let mut p = KvPool::new(small(), 1).unwrap();
        assert!(p.place(A, 0, 8000, 100, 0.0).unwrap());
        assert_eq!(p.instance_committed(0), 8100);
        let done = p.offload(A, 1.0).unwrap();
        assert!((done - 1.008).abs() < 1e-12);
        assert_eq!(p.instance_committed(0), 8000);
        assert_eq!(p.dram_used(), 8000);
        p.finish_offload(A, done).unwrap();
        assert_eq!(p.instance_committed(0), 0);
        assert_eq!(p.entry(A).unwrap().tier, Tier::Dram);
    }

    #[test]
    fn lru_demotes_to_ssd() {
        let mut p = KvPool::new(small(), 1).unwrap();
        p.place(A, 0, 12_000, 0, 0.0).unwrap();
        p.place(B, 0, 12_000, 0, 0.0).unwrap();
        p.offload(A, 1.0).unwrap();
        p.offload(B, 2.0).unwrap();
        assert_eq!(p.entry(A).unwrap().tier, Tier::Ssd);
        assert_eq!(p.entry(B).unwrap().tier, Tier::Dram);
        assert_eq!(p.counters().demotions, 1);
    }

    #[test]
    fn load_from_ssd_and_roundtrip() {
        let mut p = KvPool::new(small(), 2).unwrap();
        p.place(A, 0, 20_000, 0, 0.0).unwrap();
        p.place(B, 0, 20_000, 0, 0.0).unwrap();
        let t = p.offload(A, 0.0).unwrap();
        p.finish_offload(A, t).unwrap();
        let t = p.offload(B, 0.0).unwrap();
        p.finish_offload(B, t).unwrap();
        assert_eq!(p.entry(A).unwrap().tier, Tier::Ssd);
        let ready = p.load(A, 1, 8192, 10.0).unwrap().unwrap();
        assert!((ready - 10.1).abs() < 1e-12);
        assert_eq!(p.entry(A).unwrap().resident_tokens, 20_000);
        assert_eq!(p.instance_committed(1), 28_192);
        assert_eq!(p.ssd_used(), 0);
    }

    #[test]
    fn load_refused_without_headroom() {
        let mut p = KvPool::new(small(), 2).unwrap();
        p.place(A, 0, 10_000, 0, 0.0).unwrap();
        let t = p.offload(A, 0.0).unwrap();
        p.finish_offload(A, t).unwrap();
        p.place(B, 1, 90_000, 0, 0.0).unwrap();
        let before = p.clone();
        assert_eq!(p.load(A, 1, 1, 1.0).unwrap(), None);
        assert_eq!(p.entries, before.entries);
        assert_eq!(p.instance_committed(1), 90_000);
    }

    #[test]
    fn admission_threshold() {
        let mut p = KvPool::new(small(), 1).unwrap();
        p.place(C, 0, 60_000, 0, 0.0).unwrap();
        assert!(p.place(A, 0, 30_000, 8_000, 0.0).unwrap());
        p.release(A, 0.0);
        p.grow(C, 10_000).unwrap();
        assert!(!p.place(A, 0, 30_000, 8_000, 0.0).unwrap());
    }

    #[test]
    fn release_is_idempotent() {
        let mut p = KvPool::new(small(), 1).unwrap();
        p.place(A, 0, 2_000, 10_000, 0.0).unwrap();
        p.grow(A, 10_000).unwrap();
        assert_eq!(p.release(A, 1.0), 12_000);
        assert_eq!(p.instance_committed(0), 0);
        assert_eq!(p.release(A, 2.0), 0);
        assert_eq!(p.counters().double_release_warnings, 1);
        assert_eq!(p.released_tokens(), 12_000);
    }

    #[test]
    fn exhausted_pool_is_an_error() {
        let mut params = small();
        params.ssd_capacity_tokens = 5_000;
        let mut p = KvPool::new(params, 1).unwrap();
        p.place(A, 0, 15_000, 0, 0.0).unwrap();
        p.place(B, 0, 15_000, 0, 0.0).unwrap();
        p.offload(A, 0.0).unwrap();
        assert!(matches!(p.offload(B, 0.0), Err(Error::Capacity(_))));
    }

    #[test]
    fn grow_consumes_reservation() {
        let mut p = KvPool::new(small(), 1).unwrap();
        p.place(A, 0, 100, 50, 0.0).unwrap();
        p.grow(A, 30).unwrap();
        assert_eq!((p.instance_resident(0), p.instance_committed(0)), (130, 150));
        p.grow(A, 40).unwrap();
        assert_eq!((p.instance_resident(0), p.instance_committed(0)), (170, 170));
    }

    #[test]
    fn ssd_faster_than_dram_rejected() {
        let mut params = small();
        params.ssd_bandwidth = 2.0e6;
        assert!(KvPool::new(params, 1).is_err());
    }
}
