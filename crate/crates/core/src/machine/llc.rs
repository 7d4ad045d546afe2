use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAGE_SIZE: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("{0} must be a non-zero power of two")]
    NotPowerOfTwo(&'static str),
    #[error("ways must be at least 1")]
    NoWays,
}

/// Shape of the last-level cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlcGeometry {
    pub sets: u64,
    pub ways: u32,
    pub line_bytes: u64,
    /// Latency of a hit, ns.
    #[serde(default = "default_hit_ns")]
    pub hit_ns: u64,
    /// Latency of a miss, ns.
    #[serde(default = "default_miss_ns")]
    pub miss_ns: u64,
}

fn default_hit_ns() -> u64 {
    13
}

fn default_miss_ns() -> u64 {
    100
}

impl Default for LlcGeometry {
    /// 2 MiB, 16 ways, 64-byte lines.
    fn default() -> Self {
        LlcGeometry { sets: 2048, ways: 16, line_bytes: 64, hit_ns: default_hit_ns(), miss_ns: default_miss_ns() }
    }
}

impl LlcGeometry {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.sets.is_power_of_two() {
            return Err(GeometryError::NotPowerOfTwo("sets"));
        }
        if !self.line_bytes.is_power_of_two() {
            return Err(GeometryError::NotPowerOfTwo("line_bytes"));
        }
        if self.ways == 0 {
            return Err(GeometryError::NoWays);
        }
        Ok(())
    }

    pub fn size_bytes(&self) -> u64 {
        self.sets * self.ways as u64 * self.line_bytes
    }

    pub fn line_of(&self, pa: u64) -> u64 {
        pa / self.line_bytes
    }

    pub fn set_of(&self, pa: u64) -> u64 {
        self.line_of(pa) & (self.sets - 1)
    }

    /// Number of page colors: how many distinct pages map onto disjoint
    /// groups of sets. At least one.
    pub fn colors(&self) -> u64 {
        (self.sets * self.line_bytes / PAGE_SIZE).max(1)
    }

    /// The set-index bits above the page offset.
    pub fn color_of(&self, pa: u64) -> u64 {
        (pa / PAGE_SIZE) % self.colors()
    }

    /// Bit range `[lo, hi)` of the physical address that forms the color.
    pub fn color_bits(&self) -> (u32, u32) {
        let lo = PAGE_SIZE.trailing_zeros();
        (lo, lo + self.colors().trailing_zeros())
    }
}

/// Why a miss happened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MissKind {
    /// The line was never cached before.
    Cold,
    /// Re-reference after eviction; the victim of this fill was ours or none.
    ConflictSelf,
    /// Re-reference after eviction; this fill evicted another VM's line.
    ConflictCross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LlcOutcome {
    Hit,
    Miss(MissKind),
}

impl LlcOutcome {
    pub fn is_hit(self) -> bool {
        matches!(self, LlcOutcome::Hit)
    }
}

/// Per-VM counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LlcStats {
    pub hits: u64,
    pub cold: u64,
    pub conflict_self: u64,
    pub conflict_cross: u64,
    /// Fills of any kind whose victim belonged to another VM.
    pub cross_evictions: u64,
}

#[derive(Debug, Clone, Copy)]
struct Way {
    line: u64,
    vm: u32,
    stamp: u64,
}

/// Set-associative cache with LRU replacement, tracking which VM filled
/// each line.
#[derive(Debug, Clone)]
pub struct LlcModel {
    geom: LlcGeometry,
    sets: Vec<Vec<Way>>,
    seen: HashSet<u64>,
    clock: u64,
    stats: BTreeMap<u32, LlcStats>,
}

impl LlcModel {
    pub fn new(geom: LlcGeometry) -> Result<Self, GeometryError> {
        geom.validate()?;
        Ok(LlcModel {
            geom,
            sets: vec![Vec::new(); geom.sets as usize],
            seen: HashSet::new(),
            clock: 0,
            stats: BTreeMap::new(),
        })
    }

    pub fn geometry(&self) -> &LlcGeometry {
        &self.geom
    }

    pub fn access(&mut self, vm: u32, pa: u64) -> LlcOutcome {
        self.clock += 1;
        let line = self.geom.line_of(pa);
        let set = &mut self.sets[self.geom.set_of(pa) as usize];
        let stats = self.stats.entry(vm).or_default();
        if let Some(w) = set.iter_mut().find(|w| w.line == line) {
            w.stamp = self.clock;
            w.vm = vm;
            stats.hits += 1;
            return LlcOutcome::Hit;
        }
        let victim = if set.len() < self.geom.ways as usize {
            set.push(Way { line, vm, stamp: self.clock });
            None
        } else {
            let (idx, _) = set.iter().enumerate().min_by_key(|(_, w)| w.stamp).expect("full set");
            let old = set[idx];
            set[idx] = Way { line, vm, stamp: self.clock };
            Some(old)
        };
        let foreign = victim.is_some_and(|v| v.vm != vm);
        if foreign {
            stats.cross_evictions += 1;
        }
        let kind = if self.seen.insert(line) {
            MissKind::Cold
        } else if foreign {
            MissKind::ConflictCross
        } else {
            MissKind::ConflictSelf
        };
        match kind {
            MissKind::Cold => stats.cold += 1,
            MissKind::ConflictSelf => stats.conflict_self += 1,
            MissKind::ConflictCross => stats.conflict_cross += 1,
        }
        LlcOutcome::Miss(kind)
    }

    pub fn stats(&self, vm: u32) -> LlcStats {
        self.stats.get(&vm).copied().unwrap_or_default()
    }

    pub fn all_stats(&self) -> &BTreeMap<u32, LlcStats> {
        &self.stats
    }

    pub fn total_conflict_cross(&self) -> u64 {
        self.stats.values().map(|s| s.conflict_cross).sum()
    }

    pub fn max_occupancy(&self) -> usize {
        self.sets.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Lines currently cached in `set`, as (vm, line) pairs.
    pub fn occupancy(&self, set: u64) -> Vec<(u32, u64)> {
        self.sets[set as usize].iter().map(|w| (w.vm, w.line)).collect()
    }
}
