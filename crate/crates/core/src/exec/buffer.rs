//! Preload buffer: a persistent set of encoded bottom-layer shards that
//! survives between executions and warms up the pipeline.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{ShardId, ShardVersion};
use crate::plan::PreloadEntry;
use crate::store::EncodedShard;

/// Takes candidates in ascending `(layer, slice)` order while they fit in
/// `budget`, stopping at the first one that does not. Callers pass at most one
/// version per shard id.
pub fn fill_bottom_first(
    candidates: impl IntoIterator<Item = (ShardVersion, u64)>,
    budget: u64,
) -> Vec<(ShardVersion, u64)> {
    let mut sorted: Vec<(ShardVersion, u64)> = candidates.into_iter().collect();
    sorted.sort_by_key(|(v, _)| v.id);
    let mut used = 0u64;
    let mut out = Vec::new();
    for (v, bytes) in sorted {
        if used + bytes > budget {
            break;
        }
        used += bytes;
        out.push((v, bytes));
    }
    out
}

#[derive(Clone, Debug)]
pub struct PreloadBuffer {
    budget: u64,
    resident: BTreeMap<ShardId, EncodedShard>,
    /// Keep a resident version over a newly executed lower-bitwidth one.
    pub keep_higher_fidelity: bool,
}

impl PreloadBuffer {
    pub fn new(budget: u64) -> Self {
        PreloadBuffer {
            budget,
            resident: BTreeMap::new(),
            keep_higher_fidelity: false,
        }
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn used_bytes(&self) -> u64 {
        self.resident.values().map(|s| s.bytes.len() as u64).sum()
    }

    pub fn len(&self) -> usize {
        self.resident.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resident.is_empty()
    }

    pub fn get(&self, id: ShardId) -> Option<&EncodedShard> {
        self.resident.get(&id)
    }

    /// The resident copy of exactly `v`, if any.
    pub fn get_version(&self, v: ShardVersion) -> Option<&EncodedShard> {
        self.resident.get(&v.id).filter(|s| s.version == v)
    }

    pub fn versions(&self) -> Vec<ShardVersion> {
        self.resident.values().map(|s| s.version).collect()
    }

    /// Resident set in the form the planner consumes.
    pub fn entries(&self) -> Vec<PreloadEntry> {
        self.resident
            .values()
            .map(|s| PreloadEntry {
                version: s.version,
                bytes: s.bytes.len() as u64,
            })
            .collect()
    }

    fn merged(&self, executed: impl IntoIterator<Item = (ShardVersion, u64)>) -> BTreeMap<ShardId, (ShardVersion, u64)> {
        let mut merged: BTreeMap<ShardId, (ShardVersion, u64)> = self
            .resident
            .values()
            .map(|s| (s.version.id, (s.version, s.bytes.len() as u64)))
            .collect();
        for (v, bytes) in executed {
            let keep_old = self.keep_higher_fidelity
                && merged.get(&v.id).is_some_and(|(old, _)| old.bitwidth > v.bitwidth);
            if !keep_old {
                merged.insert(v.id, (v, bytes));
            }
        }
        merged
    }

    /// Versions the buffer will hold after an execution that used `executed`.
    /// Lets the executor decide which shards to retain before it runs.
    pub fn retention(&self, executed: impl IntoIterator<Item = (ShardVersion, u64)>) -> BTreeSet<ShardVersion> {
        fill_bottom_first(self.merged(executed).into_values(), self.budget)
            .into_iter()
            .map(|(v, _)| v)
            .collect()
    }

    /// Refills the buffer bottom-first from the resident shards plus the
    /// shards just executed. An executed version replaces a stale resident one
    /// unless `keep_higher_fidelity` is set and the resident one is wider.
    pub fn update_preload_buffer(&mut self, executed: impl IntoIterator<Item = EncodedShard>) {
        let executed: Vec<EncodedShard> = executed.into_iter().collect();
        let keep = self.retention(executed.iter().map(|s| (s.version, s.bytes.len() as u64)));
        let mut pool: BTreeMap<ShardVersion, EncodedShard> = std::mem::take(&mut self.resident)
            .into_values()
            .map(|s| (s.version, s))
            .collect();
        for s in executed {
            pool.insert(s.version, s);
        }
        self.resident = pool
            .into_iter()
            .filter(|(v, _)| keep.contains(v))
            .map(|(v, s)| (v.id, s))
            .collect();
    }

    /// Changes the budget, evicting from the top layer down until the
    /// resident set fits.
    pub fn resize(&mut self, budget: u64) {
        self.budget = budget;
        let mut used = self.used_bytes();
        while used > budget {
            let Some((_, s)) = self.resident.pop_last() else { break };
            used -= s.bytes.len() as u64;
        }
    }

    pub fn clear(&mut self) {
        self.resident.clear();
    }
}
