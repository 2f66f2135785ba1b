//! Add-on weight storage: the catalog of known add-ons, a size-aware LRU
//! cache shared by ControlNets and LoRAs, and the loader-channel fetch model.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ControlNetId, LoraId, TierSpec};

/// Every ControlNet is about 3 GiB.
pub const CONTROLNET_SIZE_MIB: f64 = 3072.0;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AddonCatalog {
    pub controlnets: BTreeMap<ControlNetId, f64>,
    pub loras: BTreeMap<LoraId, f64>,
}

impl AddonCatalog {
    pub fn validate(&self) -> Result<()> {
        if let Some((id, s)) = self.controlnets.iter().find(|(_, s)| !(**s > 0.0)) {
            return Err(Error::config(
                "catalog.controlnets",
                format!("{id} size {s} must be > 0"),
            ));
        }
        if let Some((id, s)) = self.loras.iter().find(|(_, s)| !(**s > 0.0)) {
            return Err(Error::config(
                "catalog.loras",
                format!("{id} size {s} must be > 0"),
            ));
        }
        Ok(())
    }

    pub fn controlnet_size(&self, id: ControlNetId) -> Option<f64> {
        self.controlnets.get(&id).copied()
    }

    pub fn lora_size(&self, id: LoraId) -> Option<f64> {
        self.loras.get(&id).copied()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    /// Accesses to items larger than the whole cache.
    pub uncacheable: u64,
    /// MiB moved on misses, uncacheable ones included.
    pub bytes_fetched_mib: f64,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        if self.accesses == 0 {
            0.0
        } else {
            self.hits as f64 / self.accesses as f64
        }
    }

    pub fn merge(&mut self, other: &CacheStats) {
        self.accesses += other.accesses;
        self.hits += other.hits;
        self.misses += other.misses;
        self.evictions += other.evictions;
        self.uncacheable += other.uncacheable;
        self.bytes_fetched_mib += other.bytes_fetched_mib;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccessOutcome {
    pub hit: bool,
    pub fetch_ms: f64,
}

/// Size-aware LRU cache. Recency is a total order given by access sequence
/// numbers, so eviction never ties.
///
/// An item larger than the whole cache is fetched but never made resident,
/// and its access flushes the cache. With that rule the resident set is
/// always the longest recency-stack prefix that fits, so residency at a
/// smaller capacity is included in residency at any larger one.
#[derive(Debug, Clone)]
pub struct LruCache<K> {
    capacity_mib: f64,
    used_mib: f64,
    resident: HashMap<K, (f64, u64)>,
    order: BTreeMap<u64, K>,
    next_stamp: u64,
    stats: CacheStats,
}

impl<K: Eq + Hash + Clone> LruCache<K> {
    pub fn new(capacity_mib: f64) -> Self {
        Self {
            capacity_mib: capacity_mib.max(0.0),
            used_mib: 0.0,
            resident: HashMap::new(),
            order: BTreeMap::new(),
            next_stamp: 0,
            stats: CacheStats::default(),
        }
    }

    pub fn capacity_mib(&self) -> f64 {
        self.capacity_mib
    }

    pub fn used_mib(&self) -> f64 {
        self.used_mib
    }

    pub fn stats(&self) -> &CacheStats {
        &self.stats
    }

    pub fn contains(&self, id: &K) -> bool {
        self.resident.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.resident.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resident.is_empty()
    }

    /// Resident ids, most recently used first.
    pub fn resident_mru(&self) -> Vec<K> {
        self.order.values().rev().cloned().collect()
    }

    /// Records an access. Returns whether it hit.
    pub fn touch(&mut self, id: &K, size_mib: f64) -> bool {
        self.stats.accesses += 1;
        if let Some((_, stamp)) = self.resident.get(id).copied() {
            self.stats.hits += 1;
            self.order.remove(&stamp);
            let s = self.bump();
            self.order.insert(s, id.clone());
            self.resident.get_mut(id).expect("resident").1 = s;
            return true;
        }
        self.stats.misses += 1;
        self.stats.bytes_fetched_mib += size_mib;
        if size_mib > self.capacity_mib {
            self.stats.uncacheable += 1;
            while self.evict_lru() {}
            return false;
        }
        while self.used_mib + size_mib > self.capacity_mib {
            if !self.evict_lru() {
                break;
            }
        }
        self.insert_mru(id, size_mib);
        false
    }

    /// Access with the fetch cost of a miss from `tier`.
    pub fn access(&mut self, id: &K, size_mib: f64, tier: &TierSpec) -> AccessOutcome {
        let hit = self.touch(id, size_mib);
        AccessOutcome {
            hit,
            fetch_ms: if hit { 0.0 } else { tier.fetch_ms(size_mib) },
        }
    }

    /// Preloads an item without counting it in the statistics. Returns false
    /// if it does not fit alongside what is already resident.
    pub fn warm(&mut self, id: &K, size_mib: f64) -> bool {
        if self.resident.contains_key(id) {
            return true;
        }
        if self.used_mib + size_mib > self.capacity_mib {
            return false;
        }
        self.insert_mru(id, size_mib);
        true
    }

    fn bump(&mut self) -> u64 {
        let s = self.next_stamp;
        self.next_stamp += 1;
        s
    }

    fn insert_mru(&mut self, id: &K, size_mib: f64) {
        let s = self.bump();
        self.order.insert(s, id.clone());
        self.resident.insert(id.clone(), (size_mib, s));
        self.used_mib += size_mib;
    }

    fn evict_lru(&mut self) -> bool {
        let Some((_, victim)) = self.order.pop_first() else {
            return false;
        };
        let (size, _) = self
            .resident
            .remove(&victim)
            .expect("ordered entry resident");
        self.used_mib -= size;
        if self.resident.is_empty() {
            self.used_mib = 0.0;
        }
        self.stats.evictions += 1;
        true
    }
}

/// Per-capacity statistics from one full LRU replay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub capacity_mib: f64,
    pub stats: CacheStats,
}

/// Replays `trace` once per capacity. Capacities must be ascending.
pub fn cache_sweep<K: Eq + Hash + Clone>(
    trace: &[(K, f64)],
    capacities: &[f64],
) -> Result<Vec<SweepPoint>> {
    if capacities.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::validation("capacities must be sorted ascending"));
    }
    Ok(capacities
        .iter()
        .map(|&capacity_mib| {
            let mut cache = LruCache::new(capacity_mib);
            for (id, size) in trace {
                cache.touch(id, *size);
            }
            SweepPoint {
                capacity_mib,
                stats: *cache.stats(),
            }
        })
        .collect())
}

/// Exact hit rate per capacity. An empty trace yields an empty curve.
pub fn hit_rate_curve<K: Eq + Hash + Clone>(
    trace: &[(K, f64)],
    capacities: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if trace.is_empty() {
        return Ok(Vec::new());
    }
    Ok(cache_sweep(trace, capacities)?
        .into_iter()
        .map(|p| (p.capacity_mib, p.stats.hit_rate()))
        .collect())
}

/// Parallel loader channels of one worker. Each fetch takes the channel
/// that frees up first (lowest index on ties); beyond the channel count,
/// fetches queue FIFO.
#[derive(Debug, Clone)]
pub struct LoaderChannels {
    free_at: Vec<f64>,
}

impl LoaderChannels {
    pub fn new(channels: usize) -> Result<Self> {
        if channels < 1 {
            return Err(Error::validation("at least one loader channel"));
        }
        Ok(Self {
            free_at: vec![0.0; channels],
        })
    }

    /// Schedules a fetch that may start at `ready`; returns `(start, end)`.
    pub fn fetch(&mut self, size_mib: f64, tier: &TierSpec, ready: f64) -> (f64, f64) {
        let ch = earliest(&self.free_at);
        let start = ready.max(self.free_at[ch]);
        let end = start + tier.fetch_ms(size_mib);
        self.free_at[ch] = end;
        (start, end)
    }
}

/// Index of the smallest value, lowest index on ties.
pub(crate) fn earliest(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("non-empty")
}

/// Completion offsets of fetches issued together at t=0.
pub fn fetch_offsets(sizes_mib: &[f64], tier: &TierSpec, channels: usize) -> Result<Vec<f64>> {
    let mut ch = LoaderChannels::new(channels)?;
    Ok(sizes_mib
        .iter()
        .map(|s| ch.fetch(*s, tier, 0.0).1)
        .collect())
}
