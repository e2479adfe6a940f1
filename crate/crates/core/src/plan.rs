//! Two-stage planning.
//!
//! Compute planning picks the submodel shape with the most shards (deepest on
//! ties) whose layers fit the target latency. IO planning then assigns a
//! bitwidth to every position of that shape while keeping every accumulated
//! IO budget non-negative: budgets start at the compute time of all earlier
//! layers plus a bonus for preloaded shards, and each shard fetched from disk
//! is debited from its layer and every layer after it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AibLedger, Bitwidth, BitwidthGrid, ExecutionPlan, HardwareProfile, ImportanceMap, Provenance,
    ShardId, ShardVersion, SubmodelShape, DEFAULT_FREQ,
};
use crate::time::Micros;

pub const DEFAULT_INPUT_LEN: usize = 128;
pub const DEFAULT_M_MIN: usize = 3;
pub const DEFAULT_N_MIN: usize = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("profile incomplete: {0}")]
    ProfileIncomplete(String),
    #[error("invalid plan request: {0}")]
    InvalidRequest(String),
}

/// A shard version currently held by the preload buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PreloadEntry {
    #[serde(flatten)]
    pub version: ShardVersion,
    pub bytes: u64,
}

/// Which bitwidths the importance pass may upgrade a shard to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpgradePolicy {
    /// Try 32, then each lower stored width down to one above the current.
    #[default]
    HighestFeasible,
    /// Only ever try the full 32-bit version.
    FullOnly,
}

#[derive(Clone, Debug)]
pub struct PlanRequest<'a> {
    pub target_latency: Micros,
    pub input_len: usize,
    pub freq: String,
    pub preload: Vec<PreloadEntry>,
    pub preload_budget: u64,
    pub profile: &'a HardwareProfile,
    pub importance: &'a ImportanceMap,
    pub n_layers: usize,
    pub n_slices: usize,
    pub n_min: usize,
    pub m_min: usize,
    /// Stored bitwidths, ascending; defaults to the profile's IO table.
    pub bitwidths: Vec<Bitwidth>,
    pub upgrade: UpgradePolicy,
    /// Let the importance pass also upgrade preloaded shards, paying the full
    /// IO cost of the new version.
    pub upgrade_preloaded: bool,
    /// Headroom an upgrade must leave in every budget it touches. Zero packs
    /// the ledger exactly; a positive value absorbs wake-up jitter at run time.
    pub io_reserve: Micros,
}

impl<'a> PlanRequest<'a> {
    pub fn new(
        target_latency: Micros,
        profile: &'a HardwareProfile,
        importance: &'a ImportanceMap,
        n_layers: usize,
        n_slices: usize,
    ) -> Self {
        PlanRequest {
            target_latency,
            input_len: DEFAULT_INPUT_LEN,
            freq: DEFAULT_FREQ.to_string(),
            preload: Vec::new(),
            preload_budget: 0,
            profile,
            importance,
            n_layers,
            n_slices,
            n_min: DEFAULT_N_MIN.min(n_layers),
            m_min: DEFAULT_M_MIN.min(n_slices),
            bitwidths: profile.io_delay.keys().copied().collect(),
            upgrade: UpgradePolicy::default(),
            upgrade_preloaded: false,
            io_reserve: Micros::ZERO,
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: String| Err(PlanError::InvalidRequest(m));
        if self.target_latency.0 <= 0 {
            return bad("target latency must be positive".into());
        }
        if self.io_reserve.is_negative() {
            return bad("io reserve must not be negative".into());
        }
        if self.n_layers == 0 || self.n_slices == 0 {
            return bad("model has no layers or slices".into());
        }
        if self.n_min == 0 || self.n_min > self.n_layers || self.m_min == 0 || self.m_min > self.n_slices {
            return bad(format!(
                "bounds n_min={} m_min={} outside {}x{}",
                self.n_min, self.m_min, self.n_layers, self.n_slices
            ));
        }
        if self.bitwidths.windows(2).any(|w| w[0] >= w[1]) {
            return bad("bitwidths must be strictly ascending".into());
        }
        if !self.bitwidths.iter().any(|b| !b.is_full()) {
            return bad("no compressed bitwidth available".into());
        }
        let total: u64 = self.preload.iter().map(|e| e.bytes).sum();
        if total > self.preload_budget {
            return bad(format!(
                "preload holds {total} bytes but the budget is {}",
                self.preload_budget
            ));
        }
        let mut ids = BTreeSet::new();
        for e in &self.preload {
            if !ids.insert(e.version.id) {
                return bad(format!("{} preloaded twice", e.version.id));
            }
        }
        Ok(())
    }

    pub fn io(&self, k: Bitwidth) -> Result<Micros, PlanError> {
        self.profile
            .io(k)
            .ok_or_else(|| PlanError::ProfileIncomplete(format!("no io_delay for k={k}")))
    }

    pub fn compute(&self, width: usize) -> Result<Micros, PlanError> {
        self.profile
            .compute(self.input_len, width, &self.freq)
            .ok_or_else(|| {
                PlanError::ProfileIncomplete(format!(
                    "no compute_delay for l={} m={width} freq={}",
                    self.input_len, self.freq
                ))
            })
    }

    fn compressed(&self) -> Vec<Bitwidth> {
        self.bitwidths.iter().copied().filter(|b| !b.is_full()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputePlan {
    pub shape: SubmodelShape,
    /// No shape fit the target; the smallest legal shape was returned.
    pub degraded: bool,
}

/// Enumerates every `(n, m)` within bounds and keeps the feasible one that is
/// largest under the shape order (shard count, then depth).
pub fn plan_compute(req: &PlanRequest<'_>) -> Result<ComputePlan, PlanError> {
    req.validate()?;
    let mut best: Option<SubmodelShape> = None;
    for m in req.m_min..=req.n_slices {
        let per_layer = req.compute(m)?;
        for n in req.n_min..=req.n_layers {
            if per_layer * n as i64 <= req.target_latency {
                let s = SubmodelShape::new(n, m);
                if best.is_none_or(|b| s > b) {
                    best = Some(s);
                }
            }
        }
    }
    Ok(match best {
        Some(shape) => ComputePlan {
            shape,
            degraded: false,
        },
        None => ComputePlan {
            shape: SubmodelShape::new(req.n_min, req.m_min),
            degraded: true,
        },
    })
}

/// Budgets before any allocation: compute time of all earlier layers plus
/// the IO time of every in-shape preloaded shard at or below each layer.
pub fn init_ledger(shape: SubmodelShape, req: &PlanRequest<'_>) -> Result<AibLedger, PlanError> {
    let per_layer = req.compute(shape.width)?;
    let mut ledger = AibLedger {
        budgets: (0..shape.depth).map(|j| per_layer * j as i64).collect(),
    };
    for e in &req.preload {
        if shape.contains(e.version.id) {
            ledger.credit(e.version.id.layer, req.io(e.version.bitwidth)?);
        }
    }
    Ok(ledger)
}

/// Functional form of [`AibLedger::debit`].
pub fn debit(ledger: &AibLedger, layer: usize, cost: Micros) -> AibLedger {
    ledger.debited(layer, cost)
}

pub fn is_valid(ledger: &AibLedger) -> bool {
    ledger.is_valid()
}

/// Recomputes the ledger of an arbitrary plan from scratch: every position
/// not served by the buffer is debited at its layer.
pub fn ledger_for(plan: &ExecutionPlan, profile: &HardwareProfile) -> Result<AibLedger, PlanError> {
    let per_layer = profile
        .compute(plan.input_len, plan.shape.width, &plan.freq)
        .ok_or_else(|| PlanError::ProfileIncomplete("compute delay for plan width".into()))?;
    let io = |k: Bitwidth| {
        profile
            .io(k)
            .ok_or_else(|| PlanError::ProfileIncomplete(format!("no io_delay for k={k}")))
    };
    let mut ledger = AibLedger {
        budgets: (0..plan.shape.depth).map(|j| per_layer * j as i64).collect(),
    };
    for (id, k) in plan.assignment.iter() {
        if !plan.is_preloaded(id) {
            ledger.debit(id.layer, io(k)?);
        }
    }
    Ok(ledger)
}

/// Order in which the importance pass visits positions.
#[derive(Clone, Debug, Default)]
pub enum VisitOrder {
    /// Descending importance, ties by ascending `(layer, slice)`.
    #[default]
    Importance,
    /// Caller-supplied order; positions outside the shape are ignored.
    Explicit(Vec<ShardId>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpgradeAttempt {
    pub id: ShardId,
    pub from: Bitwidth,
    /// Targets tried, in order.
    pub tried: Vec<Bitwidth>,
    pub accepted: Option<Bitwidth>,
}

/// Record of what IO planning did, for replay checks and debugging.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoPlanLog {
    pub ledger_after_preload: Option<AibLedger>,
    pub uniform: Option<Bitwidth>,
    pub io_degraded: bool,
    pub attempts: Vec<UpgradeAttempt>,
}

pub fn plan_io(shape: SubmodelShape, req: &PlanRequest<'_>) -> Result<ExecutionPlan, PlanError> {
    plan_io_traced(shape, req, &VisitOrder::Importance).map(|(p, _)| p)
}

/// IO planning with an explicit visit order and a decision log.
pub fn plan_io_traced(
    shape: SubmodelShape,
    req: &PlanRequest<'_>,
    order: &VisitOrder,
) -> Result<(ExecutionPlan, IoPlanLog), PlanError> {
    req.validate()?;
    let compressed = req.compressed();
    let io: BTreeMap<Bitwidth, Micros> = req
        .bitwidths
        .iter()
        .map(|&k| req.io(k).map(|d| (k, d)))
        .collect::<Result<_, _>>()?;
    let mut log = IoPlanLog::default();
    let mut ledger = init_ledger(shape, req)?;
    let lowest = compressed[0];
    let mut assignment = BitwidthGrid::filled(shape, lowest);

    // step 1: the buffer's in-shape shards are taken as they are
    let mut preloaded = BTreeSet::new();
    for e in &req.preload {
        let v = e.version;
        if shape.contains(v.id) {
            if !io.contains_key(&v.bitwidth) {
                return Err(PlanError::ProfileIncomplete(format!(
                    "no io_delay for preloaded {v}"
                )));
            }
            assignment.set(v.id, v.bitwidth);
            ledger.debit(v.id.layer, io[&v.bitwidth]);
            preloaded.insert(v);
        }
    }
    log.ledger_after_preload = Some(ledger.clone());

    // step 2: largest uniform width for everything else
    let mut per_layer_free = vec![0i64; shape.depth];
    for id in shape.positions() {
        if !preloaded.iter().any(|v| v.id == id) {
            per_layer_free[id.layer] += 1;
        }
    }
    let uniform_ledger = |b: Bitwidth| {
        let mut l = ledger.clone();
        for (layer, &count) in per_layer_free.iter().enumerate() {
            if count > 0 {
                l.debit(layer, io[&b] * count);
            }
        }
        l
    };
    let chosen = compressed
        .iter()
        .rev()
        .map(|&b| (b, uniform_ledger(b)))
        .find(|(_, l)| l.is_valid());
    let (uniform, after_uniform, io_degraded) = match chosen {
        Some((b, l)) => (b, l, false),
        None => (lowest, uniform_ledger(lowest), true),
    };
    for id in shape.positions() {
        if !preloaded.iter().any(|v| v.id == id) {
            assignment.set(id, uniform);
        }
    }
    ledger = after_uniform;
    log.uniform = Some(uniform);
    log.io_degraded = io_degraded;

    // step 3: importance-ordered upgrades
    if !io_degraded {
        let visit: Vec<ShardId> = match order {
            VisitOrder::Importance => {
                let missing = req.importance.missing_in(shape);
                if !missing.is_empty() {
                    return Err(PlanError::InvalidRequest(format!(
                        "importance map lacks {} in-shape shards (first {})",
                        missing.len(),
                        missing[0]
                    )));
                }
                req.importance.ranking()
            }
            VisitOrder::Explicit(ids) => ids.clone(),
        };
        let mut seen = BTreeSet::new();
        for id in visit {
            if !shape.contains(id) || !seen.insert(id) {
                continue;
            }
            let current = assignment.get(id);
            let from_buffer = preloaded.contains(&ShardVersion {
                id,
                bitwidth: current,
            });
            if from_buffer && !req.upgrade_preloaded {
                continue;
            }
            let targets: Vec<Bitwidth> = match req.upgrade {
                UpgradePolicy::HighestFeasible => req
                    .bitwidths
                    .iter()
                    .rev()
                    .copied()
                    .filter(|&t| t > current)
                    .collect(),
                UpgradePolicy::FullOnly => req
                    .bitwidths
                    .iter()
                    .copied()
                    .filter(|&t| t.is_full() && t > current)
                    .collect(),
            };
            let mut attempt = UpgradeAttempt {
                id,
                from: current,
                tried: Vec::new(),
                accepted: None,
            };
            for t in targets {
                attempt.tried.push(t);
                // a buffered shard's bonus is already spent; reloading pays in full
                let cost = if from_buffer {
                    io[&t]
                } else {
                    io[&t] - io[&current]
                };
                let trial = ledger.debited(id.layer, cost);
                if trial.budgets[id.layer..].iter().all(|&b| b >= req.io_reserve) {
                    ledger = trial;
                    assignment.set(id, t);
                    if from_buffer {
                        preloaded.remove(&ShardVersion {
                            id,
                            bitwidth: current,
                        });
                    }
                    attempt.accepted = Some(t);
                    break;
                }
            }
            log.attempts.push(attempt);
        }
    }

    let plan = ExecutionPlan {
        shape,
        assignment,
        preloaded,
        ledger,
        target_latency: req.target_latency,
        input_len: req.input_len,
        freq: req.freq.clone(),
        preload_budget_bytes: req.preload_budget,
        degraded: io_degraded,
        provenance: Provenance::default(),
    };
    Ok((plan, log))
}

/// Full two-stage plan. The result is flagged degraded when either stage
/// could not meet the target.
pub fn plan(req: &PlanRequest<'_>) -> Result<ExecutionPlan, PlanError> {
    plan_traced(req, &VisitOrder::Importance).map(|(p, _, _)| p)
}

pub fn plan_traced(
    req: &PlanRequest<'_>,
    order: &VisitOrder,
) -> Result<(ExecutionPlan, ComputePlan, IoPlanLog), PlanError> {
    let compute = plan_compute(req)?;
    let (mut p, log) = plan_io_traced(compute.shape, req, order)?;
    p.degraded |= compute.degraded;
    Ok((p, compute, log))
}
