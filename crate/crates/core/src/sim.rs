//! Deterministic model of the two-stage pipeline.
//!
//! The IO stage loads layers back to back in layer order; layer `j` may start
//! computing once its IO is done and layer `j-1` has finished computing:
//!
//! ```text
//! io_end(j)        = io_end(j-1) + sum of T_io over layer j's non-preloaded shards
//! compute_start(j) = max(compute_end(j-1), io_end(j))
//! compute_end(j)   = compute_start(j) + T_comp(l, m, freq)
//! ```
//!
//! Baseline strategies (load-then-execute, uniform-width pipelining, fully
//! preloaded model) are simulated on the same cost model as the elastic plan.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::exec::buffer::fill_bottom_first;
use crate::model::{
    AibLedger, Bitwidth, BitwidthGrid, ExecutionPlan, HardwareProfile, ImportanceMap, Provenance,
    ShardVersion, SubmodelShape,
};
use crate::plan::{self, ledger_for, PlanError, PlanRequest, PreloadEntry, UpgradePolicy};
use crate::time::Micros;
use crate::trace::{LayerTiming, PipelineTrace};

fn io_of(profile: &HardwareProfile, k: Bitwidth) -> Result<Micros, PlanError> {
    profile
        .io(k)
        .ok_or_else(|| PlanError::ProfileIncomplete(format!("no io_delay for k={k}")))
}

fn comp_of(profile: &HardwareProfile, plan: &ExecutionPlan) -> Result<Micros, PlanError> {
    profile
        .compute(plan.input_len, plan.shape.width, &plan.freq)
        .ok_or_else(|| {
            PlanError::ProfileIncomplete(format!(
                "no compute_delay for l={} m={} freq={}",
                plan.input_len, plan.shape.width, plan.freq
            ))
        })
}

fn layer_io(plan: &ExecutionPlan, profile: &HardwareProfile, layer: usize) -> Result<Micros, PlanError> {
    plan.layer_loads(layer)
        .iter()
        .map(|v| io_of(profile, v.bitwidth))
        .sum()
}

/// Simulates a plan on the pipelined cost model.
pub fn simulate(plan: &ExecutionPlan, profile: &HardwareProfile) -> Result<PipelineTrace, PlanError> {
    let per_layer = comp_of(profile, plan)?;
    let mut layers = Vec::with_capacity(plan.shape.depth);
    let mut io_end = Micros::ZERO;
    let mut compute_end = Micros::ZERO;
    for j in 0..plan.shape.depth {
        let io_start = io_end;
        io_end = io_start + layer_io(plan, profile, j)?;
        let compute_start = compute_end.max(io_end);
        let stall = compute_start - compute_end;
        compute_end = compute_start + per_layer;
        layers.push(LayerTiming {
            io_start,
            io_end,
            decode_start: compute_start,
            decode_end: compute_start,
            compute_start,
            compute_end,
            stall,
            bytes_read: 0,
        });
    }
    Ok(PipelineTrace::from_layers(layers))
}

/// Simulates loading every shard before any compute starts.
pub fn simulate_load_then_execute(
    plan: &ExecutionPlan,
    profile: &HardwareProfile,
) -> Result<PipelineTrace, PlanError> {
    let per_layer = comp_of(profile, plan)?;
    let mut io = Vec::with_capacity(plan.shape.depth);
    let mut io_end = Micros::ZERO;
    for j in 0..plan.shape.depth {
        let start = io_end;
        io_end = start + layer_io(plan, profile, j)?;
        io.push((start, io_end));
    }
    let mut layers = Vec::with_capacity(plan.shape.depth);
    let mut compute_end = Micros::ZERO;
    for (j, &(io_start, io_end_j)) in io.iter().enumerate() {
        let compute_start = if j == 0 { io_end } else { compute_end };
        let stall = compute_start - compute_end;
        compute_end = compute_start + per_layer;
        layers.push(LayerTiming {
            io_start,
            io_end: io_end_j,
            decode_start: compute_start,
            decode_end: compute_start,
            compute_start,
            compute_end,
            stall,
            bytes_read: 0,
        });
    }
    Ok(PipelineTrace::from_layers(layers))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "bitwidth")]
pub enum Strategy {
    /// Load the whole submodel at full width, then execute.
    LoadThenExecute,
    /// Layerwise pipeline at one uniform width, no preload.
    StandardPipeline(Bitwidth),
    /// Every shard already in memory at one width; compute only.
    PreloadModel(Bitwidth),
    /// Two-stage planning with the preload buffer.
    Elastic,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::LoadThenExecute => write!(f, "Load&Exec"),
            Strategy::StandardPipeline(k) => write!(f, "StdPL-{k}"),
            Strategy::PreloadModel(k) => write!(f, "PreloadModel-{k}"),
            Strategy::Elastic => write!(f, "Elastic"),
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let lower = s.to_ascii_lowercase();
        let width = |rest: &str| -> Result<Bitwidth, String> {
            let k: u32 = match rest {
                "full" => 32,
                r => r.parse().map_err(|_| format!("bad bitwidth in {s:?}"))?,
            };
            Bitwidth::new(k).map_err(|e| e.to_string())
        };
        if lower == "load&exec" || lower == "load-then-execute" {
            Ok(Strategy::LoadThenExecute)
        } else if lower == "elastic" {
            Ok(Strategy::Elastic)
        } else if let Some(rest) = lower.strip_prefix("stdpl-") {
            Ok(Strategy::StandardPipeline(width(rest)?))
        } else if let Some(rest) = lower.strip_prefix("preloadmodel-") {
            Ok(Strategy::PreloadModel(width(rest)?))
        } else {
            Err(format!("unknown strategy {s:?}"))
        }
    }
}

/// Everything a strategy needs besides the target latency.
#[derive(Clone, Debug)]
pub struct StrategyContext<'a> {
    pub profile: &'a HardwareProfile,
    pub importance: &'a ImportanceMap,
    pub n_layers: usize,
    pub n_slices: usize,
    pub input_len: usize,
    pub freq: String,
    pub n_min: usize,
    pub m_min: usize,
    pub preload_budget: u64,
    pub upgrade: UpgradePolicy,
}

impl<'a> StrategyContext<'a> {
    pub fn new(
        profile: &'a HardwareProfile,
        importance: &'a ImportanceMap,
        n_layers: usize,
        n_slices: usize,
    ) -> Self {
        StrategyContext {
            profile,
            importance,
            n_layers,
            n_slices,
            input_len: plan::DEFAULT_INPUT_LEN,
            freq: crate::model::DEFAULT_FREQ.to_string(),
            n_min: plan::DEFAULT_N_MIN.min(n_layers),
            m_min: plan::DEFAULT_M_MIN.min(n_slices),
            preload_budget: 0,
            upgrade: UpgradePolicy::default(),
        }
    }

    fn request(&self, target: Micros, preload: Vec<PreloadEntry>) -> PlanRequest<'a> {
        let mut r = PlanRequest::new(target, self.profile, self.importance, self.n_layers, self.n_slices);
        r.input_len = self.input_len;
        r.freq = self.freq.clone();
        r.n_min = self.n_min;
        r.m_min = self.m_min;
        r.preload_budget = self.preload_budget;
        r.preload = preload;
        r.upgrade = self.upgrade;
        r
    }

    fn uniform_plan(
        &self,
        shape: SubmodelShape,
        k: Bitwidth,
        all_preloaded: bool,
        target: Micros,
    ) -> Result<ExecutionPlan, PlanError> {
        let assignment = BitwidthGrid::filled(shape, k);
        let preloaded = if all_preloaded {
            shape.positions().map(|id| ShardVersion { id, bitwidth: k }).collect()
        } else {
            BTreeSet::new()
        };
        let mut p = ExecutionPlan {
            shape,
            assignment,
            preloaded,
            ledger: AibLedger::zeroed(shape.depth),
            target_latency: target,
            input_len: self.input_len,
            freq: self.freq.clone(),
            preload_budget_bytes: 0,
            degraded: false,
            provenance: Provenance::default(),
        };
        p.ledger = ledger_for(&p, self.profile)?;
        Ok(p)
    }

    fn shard_bytes(&self, k: Bitwidth) -> Result<u64, PlanError> {
        self.profile
            .shard_bytes
            .get(&k)
            .copied()
            .ok_or_else(|| PlanError::ProfileIncomplete(format!("no shard_bytes for k={k}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub strategy: Strategy,
    pub shape: SubmodelShape,
    pub plan: ExecutionPlan,
    pub trace: PipelineTrace,
    pub makespan: Micros,
    pub degraded: bool,
}

/// Picks the strategy's largest feasible shape under its own rule and
/// simulates it.
pub fn simulate_strategy(
    strategy: Strategy,
    ctx: &StrategyContext<'_>,
    target: Micros,
) -> Result<StrategyOutcome, PlanError> {
    if strategy == Strategy::Elastic {
        return simulate_elastic(ctx, target);
    }
    let (k, preloaded) = match strategy {
        Strategy::LoadThenExecute => (Bitwidth::FULL, false),
        Strategy::StandardPipeline(k) => (k, false),
        Strategy::PreloadModel(k) => (k, true),
        Strategy::Elastic => unreachable!(),
    };
    let run = |shape: SubmodelShape| -> Result<(ExecutionPlan, PipelineTrace), PlanError> {
        let p = ctx.uniform_plan(shape, k, preloaded, target)?;
        let t = match strategy {
            Strategy::LoadThenExecute => simulate_load_then_execute(&p, ctx.profile)?,
            _ => simulate(&p, ctx.profile)?,
        };
        Ok((p, t))
    };
    let mut best: Option<(SubmodelShape, ExecutionPlan, PipelineTrace)> = None;
    for m in ctx.m_min..=ctx.n_slices {
        for n in ctx.n_min..=ctx.n_layers {
            let shape = SubmodelShape::new(n, m);
            if best.as_ref().is_some_and(|(b, _, _)| *b > shape) {
                continue;
            }
            let (p, t) = run(shape)?;
            if t.makespan <= target {
                best = Some((shape, p, t));
            }
        }
    }
    let (shape, mut plan, trace, degraded) = match best {
        Some((s, p, t)) => (s, p, t, false),
        None => {
            let s = SubmodelShape::new(ctx.n_min, ctx.m_min);
            let (p, t) = run(s)?;
            (s, p, t, true)
        }
    };
    plan.degraded = degraded;
    Ok(StrategyOutcome {
        strategy,
        shape,
        makespan: trace.makespan,
        plan,
        trace,
        degraded,
    })
}

/// Maximum number of plan/refill rounds when settling the preload buffer.
const STEADY_STATE_ROUNDS: usize = 8;

/// Repeated executions: plan with the current buffer, refill it bottom-first
/// from the executed plan, and re-plan until the buffer stops changing.
pub fn steady_state_plan(
    ctx: &StrategyContext<'_>,
    target: Micros,
) -> Result<(ExecutionPlan, Vec<PreloadEntry>), PlanError> {
    let mut resident: Vec<PreloadEntry> = Vec::new();
    let mut last = plan::plan(&ctx.request(target, resident.clone()))?;
    if ctx.preload_budget == 0 {
        return Ok((last, resident));
    }
    for _ in 0..STEADY_STATE_ROUNDS {
        let mut candidates = std::collections::BTreeMap::new();
        for e in &resident {
            candidates.insert(e.version.id, (e.version, e.bytes));
        }
        for (id, k) in last.assignment.iter() {
            candidates.insert(id, (ShardVersion { id, bitwidth: k }, ctx.shard_bytes(k)?));
        }
        let next: Vec<PreloadEntry> = fill_bottom_first(candidates.into_values(), ctx.preload_budget)
            .into_iter()
            .map(|(version, bytes)| PreloadEntry { version, bytes })
            .collect();
        if next == resident {
            break;
        }
        resident = next;
        last = plan::plan(&ctx.request(target, resident.clone()))?;
    }
    Ok((last, resident))
}

fn simulate_elastic(ctx: &StrategyContext<'_>, target: Micros) -> Result<StrategyOutcome, PlanError> {
    let (plan, _) = steady_state_plan(ctx, target)?;
    let trace = simulate(&plan, ctx.profile)?;
    Ok(StrategyOutcome {
        strategy: Strategy::Elastic,
        shape: plan.shape,
        makespan: trace.makespan,
        degraded: plan.degraded,
        plan,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ShardId, DEFAULT_FREQ};
    use crate::plan::DEFAULT_INPUT_LEN;

    fn bw(k: u32) -> Bitwidth {
        Bitwidth::new(k).unwrap()
    }

    fn profile(io: &[(u32, i64)], comp_us: impl Fn(usize) -> i64, max_m: usize) -> HardwareProfile {
        let mut p = HardwareProfile::default();
        for &(k, us) in io {
            p.io_delay.insert(bw(k), Micros(us));
            p.shard_bytes.insert(bw(k), 1000 * k as u64);
        }
        for m in 1..=max_m {
            p.set_compute(DEFAULT_INPUT_LEN, m, DEFAULT_FREQ, Micros(comp_us(m)));
        }
        p
    }

    #[test]
    fn fully_preloaded_is_compute_bound() {
        let p = profile(&[(2, 50), (32, 800)], |_| 1000, 4);
        let imp = ImportanceMap::uniform(4, 4);
        let ctx = StrategyContext::new(&p, &imp, 4, 4);
        let plan = ctx
            .uniform_plan(SubmodelShape::new(4, 4), bw(2), true, Micros(10_000))
            .unwrap();
        let t = simulate(&plan, &p).unwrap();
        assert_eq!(t.makespan, Micros(4000));
        assert!(t.is_stall_free());
        t.check().unwrap();
    }

    #[test]
    fn makespan_bounded_below_by_both_stages() {
        let p = profile(&[(2, 300), (32, 800)], |_| 1000, 4);
        let imp = ImportanceMap::uniform(4, 4);
        let ctx = StrategyContext::new(&p, &imp, 4, 4);
        let plan = ctx
            .uniform_plan(SubmodelShape::new(3, 4), bw(32), false, Micros(1))
            .unwrap();
        let t = simulate(&plan, &p).unwrap();
        // 12 shards x 800 us of IO dominate 3 x 1000 us of compute
        assert!(t.makespan >= Micros(9_600));
        assert!(t.makespan >= Micros(3_000));
        assert_eq!(t.makespan, Micros(4 * 800 * 3 + 1000));
        t.check().unwrap();
    }

    #[test]
    fn load_then_execute_waits_for_everything() {
        let p = profile(&[(2, 10), (32, 100)], |_| 1000, 3);
        let imp = ImportanceMap::uniform(2, 3);
        let ctx = StrategyContext::new(&p, &imp, 2, 3);
        let plan = ctx
            .uniform_plan(SubmodelShape::new(2, 3), Bitwidth::FULL, false, Micros(1))
            .unwrap();
        let t = simulate_load_then_execute(&plan, &p).unwrap();
        assert_eq!(t.layers[0].compute_start, Micros(600));
        assert_eq!(t.makespan, Micros(2600));
        t.check().unwrap();
    }

    #[test]
    fn preload_model_matches_compute_planning() {
        let p = profile(&[(2, 10), (6, 30), (32, 100)], |m| 100 * m as i64, 12);
        let imp = ImportanceMap::uniform(12, 12);
        let ctx = StrategyContext::new(&p, &imp, 12, 12);
        for t in [1_000, 3_000, 7_777, 20_000] {
            let target = Micros(t);
            let out = simulate_strategy(Strategy::PreloadModel(bw(6)), &ctx, target).unwrap();
            let req = ctx.request(target, Vec::new());
            assert_eq!(out.shape, plan::plan_compute(&req).unwrap().shape);
        }
    }

    #[test]
    fn strategy_names_parse() {
        for s in ["Load&Exec", "StdPL-6", "PreloadModel-32", "Elastic", "stdpl-full"] {
            let parsed: Strategy = s.parse().unwrap();
            assert_eq!(parsed.to_string().to_ascii_lowercase().replace("32", "full"), s.to_ascii_lowercase().replace("32", "full"));
        }
        assert!("bogus".parse::<Strategy>().is_err());
    }

    #[test]
    fn steady_state_buffer_fills_bottom_layers() {
        let p = profile(&[(2, 100), (6, 300), (32, 1600)], |_| 1000, 4);
        let imp = ImportanceMap::uniform(4, 4);
        let mut ctx = StrategyContext::new(&p, &imp, 4, 4);
        ctx.preload_budget = 4 * 2000;
        let (plan, resident) = steady_state_plan(&ctx, Micros(4000)).unwrap();
        assert!(!plan.degraded);
        assert!(resident.iter().all(|e| e.version.id.layer == 0));
        assert_eq!(resident.len(), 4);
        assert!(plan.preloaded.iter().all(|v| v.id.layer == 0));
        let t = simulate(&plan, &p).unwrap();
        assert!(t.is_stall_free());
        assert_eq!(plan.bitwidth(ShardId::new(0, 0)), bw(2));
    }
}
