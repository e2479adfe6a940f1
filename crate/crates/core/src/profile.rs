//! Offline measurement: per-bitwidth shard IO delay, per-width layer compute
//! delay, and per-shard importance by ablation.

use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{ComputeBackend, LayerWeights};
use crate::model::{Bitwidth, ExecutionPlan, HardwareProfile, ImportanceMap, ShardId, ShardVersion, SubmodelShape, DEFAULT_FREQ};
use crate::plan::DEFAULT_INPUT_LEN;
use crate::store::{measure_layer_io, CachePolicy, LayerLoadRequest, ShardStore, StoreError};
use crate::time::Micros;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("decode failed: {0}")]
    Decode(String),
    #[error("backend failed: {0}")]
    Backend(String),
    #[error("invalid profiling request: {0}")]
    InvalidRequest(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoProfileOptions {
    pub trials: usize,
    pub cache: CachePolicy,
    /// Shard whose versions stand in for every shard of the same bitwidth.
    pub representative: ShardId,
}

impl Default for IoProfileOptions {
    fn default() -> Self {
        IoProfileOptions {
            trials: 5,
            cache: CachePolicy::DropBeforeEachTrial,
            representative: ShardId::new(0, 0),
        }
    }
}

/// Fills `io_delay`, `io_samples` and `shard_bytes` for every stored
/// bitwidth. Returns warnings (non-monotone delays, warm cache).
pub fn profile_io(
    store: &ShardStore,
    options: &IoProfileOptions,
    profile: &mut HardwareProfile,
) -> Result<Vec<String>, ProfileError> {
    if options.trials == 0 {
        return Err(ProfileError::InvalidRequest("trials must be at least 1".into()));
    }
    let m = store.manifest();
    let rep = options.representative;
    if rep.layer >= m.n_layers || rep.slice >= m.n_slices {
        return Err(ProfileError::InvalidRequest(format!("representative {rep} outside the model")));
    }
    let mut warnings = Vec::new();
    let mut polluted = false;
    for &k in &m.bitwidths {
        let req = LayerLoadRequest::new(rep.layer, vec![(rep.slice, k)]);
        let meas = measure_layer_io(store, &req, options.trials, options.cache)?;
        info!("T_io({k}) = {:.3} ms over {} trials", meas.mean.as_ms_f64(), options.trials);
        polluted |= meas.cache_polluted;
        profile.io_delay.insert(k, meas.mean);
        profile.io_samples.insert(k, meas.samples);
        profile.shard_bytes.insert(k, meas.bytes_per_trial);
    }
    if polluted {
        warnings.push("page cache could not be dropped between trials; IO delays may be optimistic".into());
    }
    profile
        .metadata
        .insert("io_cache_dropped".into(), (!polluted && options.cache == CachePolicy::DropBeforeEachTrial).to_string());
    let delays: Vec<(Bitwidth, Micros)> = profile.io_delay.iter().map(|(k, d)| (*k, *d)).collect();
    for w in delays.windows(2) {
        if w[1].1 < w[0].1 {
            warnings.push(format!(
                "T_io is not monotone in bitwidth: T_io({})={} ms > T_io({})={} ms",
                w[0].0,
                w[0].1.as_ms_f64(),
                w[1].0,
                w[1].1.as_ms_f64()
            ));
        }
    }
    for w in &warnings {
        warn!("{w}");
    }
    Ok(warnings)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeProfileOptions {
    pub input_len: usize,
    pub widths: Vec<usize>,
    pub freq: String,
    pub trials: usize,
    /// Layer whose shards feed the dry run.
    pub layer: usize,
}

impl ComputeProfileOptions {
    pub fn all_widths(n_slices: usize) -> Self {
        ComputeProfileOptions {
            input_len: DEFAULT_INPUT_LEN,
            widths: (1..=n_slices).collect(),
            freq: DEFAULT_FREQ.to_string(),
            trials: 3,
            layer: 0,
        }
    }
}

/// Bitwidth used for compute dry runs: the widest stored compressed width not
/// above 6, so decode cost is representative of a typical plan.
pub fn dry_run_bitwidth(bitwidths: &[Bitwidth]) -> Bitwidth {
    let compressed: Vec<Bitwidth> = bitwidths.iter().copied().filter(|k| !k.is_full()).collect();
    compressed
        .iter()
        .copied()
        .filter(|k| k.bits() <= 6)
        .max()
        .or_else(|| compressed.iter().copied().min())
        .unwrap_or(Bitwidth::FULL)
}

/// Times decode plus one layer of `backend` for each width and records the
/// mean as `T_comp(input_len, m, freq)`.
pub fn profile_compute<B: ComputeBackend>(
    store: &ShardStore,
    backend: &mut B,
    options: &ComputeProfileOptions,
    profile: &mut HardwareProfile,
) -> Result<(), ProfileError> {
    let man = store.manifest();
    if options.trials == 0 || options.layer >= man.n_layers {
        return Err(ProfileError::InvalidRequest("need trials >= 1 and a stored layer".into()));
    }
    let k = dry_run_bitwidth(&man.bitwidths);
    let dims = man.dims();
    for &m in &options.widths {
        if m == 0 || m > man.n_slices {
            return Err(ProfileError::InvalidRequest(format!("width {m} outside 1..={}", man.n_slices)));
        }
        let shards = (0..m)
            .map(|s| store.read_encoded(ShardVersion::new(options.layer, s, k)))
            .collect::<Result<Vec<_>, _>>()?;
        let plan = ExecutionPlan::uniform(SubmodelShape::new(1, m), k, options.input_len, &options.freq);
        let mut total = Micros::ZERO;
        for _ in 0..options.trials {
            backend.start(&plan).map_err(ProfileError::Backend)?;
            let started = Instant::now();
            let mut slices = Vec::with_capacity(m);
            for s in &shards {
                let view = s.view().map_err(ProfileError::Decode)?;
                let mut out = vec![0f32; dims.weight_count()];
                view.decode_into(&mut out).map_err(|e| ProfileError::Decode(e.to_string()))?;
                slices.push((s.version.id.slice, out));
            }
            let weights = LayerWeights {
                layer: options.layer,
                slices,
            };
            backend.compute_layer(&weights, started).map_err(ProfileError::Backend)?;
            total += Micros::from_duration(started.elapsed());
        }
        let mean = Micros(total.0 / options.trials as i64);
        info!("T_comp(l={}, m={m}) = {:.3} ms", options.input_len, mean.as_ms_f64());
        profile.set_compute(options.input_len, m, &options.freq, mean);
    }
    if !profile.freq_tags.contains(&options.freq) {
        profile.freq_tags.push(options.freq.clone());
    }
    Ok(())
}

/// Task metric of a model with one shard removed.
pub trait Evaluator: Sync {
    fn metric_name(&self) -> String;

    /// Identifies the evaluator and its dataset for provenance.
    fn id(&self) -> String;

    fn seed(&self) -> Option<u64> {
        None
    }

    /// Metric with `ablated` zeroed out, or of the intact model for `None`.
    /// Higher is better.
    fn evaluate(&self, ablated: Option<ShardId>) -> Result<f64, String>;
}

#[derive(Debug, Error)]
#[error("{} of {} ablations failed; first: {}", .failures.len(), .attempted, .failures.first().map(|(id, e)| format!("{}: {e}", id.map_or("baseline".into(), |i| i.to_string()))).unwrap_or_default())]
pub struct ImportanceFailure {
    /// Scores of the ablations that succeeded.
    pub partial: ImportanceMap,
    pub failures: Vec<(Option<ShardId>, String)>,
    pub attempted: usize,
}

/// Scores every shard as `baseline - metric(without shard)`, using exactly
/// `N*M + 1` evaluator calls. Ablations run in parallel when `parallel`.
pub fn profile_importance<E: Evaluator>(
    evaluator: &E,
    n_layers: usize,
    n_slices: usize,
    parallel: bool,
) -> Result<ImportanceMap, ImportanceFailure> {
    let mut map = ImportanceMap {
        scores: Default::default(),
        baseline_metric: f64::NAN,
        metric_name: evaluator.metric_name(),
        evaluator_id: evaluator.id(),
        seed: evaluator.seed(),
    };
    let attempted = n_layers * n_slices + 1;
    let baseline = match evaluator.evaluate(None) {
        Ok(b) => b,
        Err(e) => {
            return Err(ImportanceFailure {
                partial: map,
                failures: vec![(None, e)],
                attempted,
            })
        }
    };
    map.baseline_metric = baseline;
    let ids: Vec<ShardId> = SubmodelShape::new(n_layers, n_slices).positions().collect();
    let results = Mutex::new(Vec::with_capacity(ids.len()));
    let run = |id: ShardId| {
        let r = evaluator.evaluate(Some(id));
        results.lock().expect("no panics while holding the lock").push((id, r));
    };
    if parallel {
        ids.par_iter().for_each(|&id| run(id));
    } else {
        ids.iter().for_each(|&id| run(id));
    }
    let mut failures = Vec::new();
    for (id, r) in results.into_inner().expect("lock not poisoned") {
        match r {
            Ok(metric) => {
                map.scores.insert(id, baseline - metric);
            }
            Err(e) => failures.push((Some(id), e)),
        }
    }
    if failures.is_empty() {
        Ok(map)
    } else {
        failures.sort_by_key(|(id, _)| *id);
        Err(ImportanceFailure {
            partial: map,
            failures,
            attempted,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        calls: AtomicUsize,
        fail_on: Option<ShardId>,
    }

    impl Evaluator for Counting {
        fn metric_name(&self) -> String {
            "toy".into()
        }

        fn id(&self) -> String {
            "counting".into()
        }

        fn evaluate(&self, ablated: Option<ShardId>) -> Result<f64, String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            match ablated {
                None => Ok(1.0),
                Some(id) if Some(id) == self.fail_on => Err("boom".into()),
                Some(id) => Ok(1.0 - 0.01 * (id.layer * 10 + id.slice) as f64),
            }
        }
    }

    #[test]
    fn exactly_nm_plus_one_calls() {
        for parallel in [false, true] {
            let e = Counting {
                calls: AtomicUsize::new(0),
                fail_on: None,
            };
            let map = profile_importance(&e, 3, 4, parallel).unwrap();
            assert_eq!(e.calls.load(Ordering::SeqCst), 13);
            assert_eq!(map.scores.len(), 12);
            assert!((map.score(ShardId::new(2, 3)).unwrap() - 0.23).abs() < 1e-12);
            assert_eq!(map.baseline_metric, 1.0);
        }
    }

    #[test]
    fn failures_keep_partial_scores() {
        let e = Counting {
            calls: AtomicUsize::new(0),
            fail_on: Some(ShardId::new(1, 1)),
        };
        let err = profile_importance(&e, 2, 2, true).unwrap_err();
        assert_eq!(err.partial.scores.len(), 3);
        assert_eq!(err.failures.len(), 1);
        assert_eq!(e.calls.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn dry_run_width_choice() {
        let b = |ks: &[u32]| ks.iter().map(|&k| Bitwidth::new(k).unwrap()).collect::<Vec<_>>();
        assert_eq!(dry_run_bitwidth(&b(&[2, 3, 4, 5, 6, 32])).bits(), 6);
        assert_eq!(dry_run_bitwidth(&b(&[2, 4, 32])).bits(), 4);
        assert_eq!(dry_run_bitwidth(&b(&[8, 32])).bits(), 8);
        assert_eq!(dry_run_bitwidth(&b(&[32])).bits(), 32);
    }
}
