//! Two-worker pipelined executor.
//!
//! An IO worker reads each layer's non-resident shards in layer order and
//! hands them to the compute stage, which runs on the calling thread. The
//! compute stage decodes a layer's shards into one FP32 working buffer,
//! runs the backend, and releases the buffer before the next layer.

pub mod backend;
pub mod buffer;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ExecutionPlan, ShardVersion};
use crate::store::{EncodedShard, ShardStore, StoreError};
use crate::time::Micros;
use crate::trace::{LayerTiming, PipelineTrace};

pub use backend::{ComputeBackend, LayerMisc, LayerWeights, ReferenceBackend, SyntheticBackend};
pub use buffer::{fill_bottom_first, PreloadBuffer};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("layer {layer}: {reason}")]
    Decode { layer: usize, reason: String },
    #[error("backend failed at layer {layer}: {reason}")]
    Backend { layer: usize, reason: String },
    #[error("plan rejected: {0}")]
    InvalidPlan(String),
    #[error("IO worker stopped before layer {0}")]
    Disconnected(usize),
}

/// An error together with the timings of the layers that completed.
#[derive(Debug, Error)]
#[error("{error} (after {} layers)", .partial.layers.len())]
pub struct ExecFailure {
    pub error: ExecError,
    pub partial: PipelineTrace,
}

impl ExecFailure {
    fn early(error: ExecError) -> Self {
        ExecFailure {
            error,
            partial: PipelineTrace::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecOptions {
    /// Loaded layers allowed to wait for the compute stage. `None` lets the
    /// IO worker run ahead freely, which is what the budget ledger assumes;
    /// `Some(1)` bounds transient memory to one layer in flight.
    pub max_in_flight: Option<usize>,
}

/// Running total and high-water mark of transient allocations.
#[derive(Debug, Default)]
struct Meter {
    current: AtomicU64,
    peak: AtomicU64,
}

impl Meter {
    fn alloc(&self, n: u64) {
        let now = self.current.fetch_add(n, Ordering::SeqCst) + n;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    fn free(&self, n: u64) {
        self.current.fetch_sub(n, Ordering::SeqCst);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecReport {
    pub trace: PipelineTrace,
    /// Peak of encoded-in-flight plus decoded bytes, excluding the preload
    /// buffer and the backend's activations.
    pub peak_working_bytes: u64,
    /// Largest single decoded layer.
    pub peak_decoded_bytes: u64,
    pub activation_bytes: u64,
    /// Shards served from the preload buffer.
    pub preload_hits: usize,
    /// Buffer contents after the run.
    pub resident_after: Vec<ShardVersion>,
}

struct Loaded {
    layer: usize,
    shards: Vec<EncodedShard>,
    io_start: Micros,
    io_end: Micros,
    bytes: u64,
}

enum Handoff {
    Bounded(mpsc::SyncSender<Result<Loaded, StoreError>>),
    Unbounded(mpsc::Sender<Result<Loaded, StoreError>>),
}

impl Handoff {
    fn send(&self, msg: Result<Loaded, StoreError>) -> bool {
        match self {
            Handoff::Bounded(s) => s.send(msg).is_ok(),
            Handoff::Unbounded(s) => s.send(msg).is_ok(),
        }
    }
}

fn decode_layer(
    layer: usize,
    plan: &ExecutionPlan,
    loaded: &[EncodedShard],
    resident: &PreloadBuffer,
    store: &ShardStore,
) -> Result<LayerWeights, ExecError> {
    let dims = store.manifest().dims();
    let n = dims.weight_count();
    let mut slices = Vec::with_capacity(plan.shape.width);
    for v in plan.layer_versions(layer) {
        let shard = loaded
            .iter()
            .find(|s| s.version == v)
            .or_else(|| resident.get_version(v))
            .ok_or_else(|| ExecError::Decode {
                layer,
                reason: format!("shard {v} neither loaded nor resident"),
            })?;
        let view = shard.view().map_err(|reason| ExecError::Decode { layer, reason })?;
        let mut out = vec![0f32; n];
        view.decode_into(&mut out).map_err(|e| ExecError::Decode {
            layer,
            reason: e.to_string(),
        })?;
        slices.push((v.id.slice, out));
        // let a waiting IO worker in between shards when cores are scarce
        std::thread::yield_now();
    }
    Ok(LayerWeights { layer, slices })
}

/// Executes `plan` against `store`, serving preloaded shards from `buffer` and
/// refilling it afterwards.
pub fn execute<B: ComputeBackend>(
    store: &ShardStore,
    plan: &ExecutionPlan,
    buffer: &mut PreloadBuffer,
    backend: &mut B,
    options: &ExecOptions,
) -> Result<ExecReport, ExecFailure> {
    let m = store.manifest();
    if plan.shape.depth > m.n_layers || plan.shape.width > m.n_slices {
        return Err(ExecFailure::early(ExecError::InvalidPlan(format!(
            "shape {} exceeds model {}x{}",
            plan.shape, m.n_layers, m.n_slices
        ))));
    }
    if options.max_in_flight == Some(0) {
        return Err(ExecFailure::early(ExecError::InvalidPlan(
            "max_in_flight must be at least 1".into(),
        )));
    }

    // Shards the plan counts as preloaded and the buffer actually holds.
    let mut hits: BTreeSet<ShardVersion> = BTreeSet::new();
    for &v in &plan.preloaded {
        if buffer.get_version(v).is_some() {
            hits.insert(v);
        } else {
            warn!("plan expects {v} to be resident but the buffer lacks it; loading it");
        }
    }
    let mut executed_sizes = Vec::new();
    for l in 0..plan.shape.depth {
        for v in plan.layer_versions(l) {
            let bytes = match buffer.get_version(v) {
                Some(s) if hits.contains(&v) => s.bytes.len() as u64,
                _ => store.file_len(v).map_err(|e| ExecFailure::early(e.into()))?,
            };
            executed_sizes.push((v, bytes));
        }
    }
    let retain = buffer.retention(executed_sizes);
    // fully buffered layers skip the IO worker so compute never waits on it
    let resident: Vec<bool> = (0..plan.shape.depth)
        .map(|l| plan.layer_versions(l).into_iter().all(|v| hits.contains(&v)))
        .collect();

    backend
        .start(plan)
        .map_err(|reason| ExecFailure::early(ExecError::Backend { layer: 0, reason }))?;

    let meter = Meter::default();
    let (tx, rx) = match options.max_in_flight {
        Some(d) => {
            let (tx, rx) = mpsc::sync_channel(d - 1);
            (Handoff::Bounded(tx), rx)
        }
        None => {
            let (tx, rx) = mpsc::channel();
            (Handoff::Unbounded(tx), rx)
        }
    };
    let t0 = Instant::now();
    let since = |t: Instant| Micros::from_duration(t.duration_since(t0));

    let mut layers: Vec<LayerTiming> = Vec::with_capacity(plan.shape.depth);
    let mut retained: Vec<EncodedShard> = Vec::new();
    let mut peak_decoded = 0u64;
    let mut failure: Option<ExecError> = None;

    std::thread::scope(|scope| {
        let hits = &hits;
        let meter = &meter;
        let resident = &resident;
        scope.spawn(move || {
            for layer in 0..plan.shape.depth {
                if resident[layer] {
                    continue;
                }
                let io_start = since(Instant::now());
                let mut shards = Vec::new();
                let mut bytes = 0u64;
                let mut err = None;
                for v in plan.layer_versions(layer) {
                    if hits.contains(&v) {
                        continue;
                    }
                    match store.read_encoded(v) {
                        Ok(s) => {
                            let n = s.bytes.len() as u64;
                            meter.alloc(n);
                            bytes += n;
                            shards.push(s);
                        }
                        Err(e) => {
                            err = Some(e);
                            break;
                        }
                    }
                }
                let io_end = since(Instant::now());
                let msg = match err {
                    Some(e) => Err(e),
                    None => Ok(Loaded {
                        layer,
                        shards,
                        io_start,
                        io_end,
                        bytes,
                    }),
                };
                let failed = msg.is_err();
                if !tx.send(msg) || failed {
                    return;
                }
            }
        });

        let mut prev_end = Micros::ZERO;
        for layer in 0..plan.shape.depth {
            let received = if resident[layer] {
                let now = since(Instant::now());
                Ok(Ok(Loaded {
                    layer,
                    shards: Vec::new(),
                    io_start: now,
                    io_end: now,
                    bytes: 0,
                }))
            } else {
                rx.recv()
            };
            let loaded = match received {
                Ok(Ok(l)) => l,
                Ok(Err(e)) => {
                    failure = Some(e.into());
                    break;
                }
                Err(_) => {
                    failure = Some(ExecError::Disconnected(layer));
                    break;
                }
            };
            debug_assert_eq!(loaded.layer, layer);
            let started = Instant::now();
            let compute_start = since(started);
            let weights = match decode_layer(layer, plan, &loaded.shards, buffer, store) {
                Ok(w) => w,
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            };
            let decoded = weights.bytes();
            meter.alloc(decoded);
            meter.free(loaded.bytes);
            for s in loaded.shards {
                if retain.contains(&s.version) {
                    retained.push(s);
                }
            }
            peak_decoded = peak_decoded.max(decoded);
            let decode_end = since(Instant::now());
            let result = backend.compute_layer(&weights, started);
            drop(weights);
            meter.free(decoded);
            if let Err(reason) = result {
                failure = Some(ExecError::Backend { layer, reason });
                break;
            }
            let compute_end = since(Instant::now());
            layers.push(LayerTiming {
                io_start: loaded.io_start,
                io_end: loaded.io_end,
                decode_start: compute_start,
                decode_end,
                compute_start,
                compute_end,
                stall: compute_start - prev_end,
                bytes_read: loaded.bytes,
            });
            prev_end = compute_end;
        }
        // Unblocks the IO worker if compute stopped early.
        drop(rx);
    });

    let trace = PipelineTrace::from_layers(layers);
    if let Some(error) = failure {
        return Err(ExecFailure { error, partial: trace });
    }
    // Resident shards the plan used at a different version are replaced by
    // the executed ones; served hits stay as they are.
    buffer.update_preload_buffer(retained);
    debug!(
        "executed {} in {} ms, {} bytes read",
        plan.shape,
        trace.makespan.as_ms_f64(),
        trace.bytes_read()
    );
    Ok(ExecReport {
        peak_working_bytes: meter.peak.load(Ordering::SeqCst),
        peak_decoded_bytes: peak_decoded,
        activation_bytes: backend.activation_bytes(),
        preload_hits: hits.len(),
        resident_after: buffer.versions(),
        trace,
    })
}

/// A store plus the preload buffer that persists across executions.
#[derive(Debug)]
pub struct Engine {
    pub store: ShardStore,
    pub buffer: PreloadBuffer,
    pub options: ExecOptions,
}

impl Engine {
    pub fn new(store: ShardStore, buffer_bytes: u64) -> Self {
        Engine {
            store,
            buffer: PreloadBuffer::new(buffer_bytes),
            options: ExecOptions::default(),
        }
    }

    pub fn run<B: ComputeBackend>(&mut self, plan: &ExecutionPlan, backend: &mut B) -> Result<ExecReport, ExecFailure> {
        execute(&self.store, plan, &mut self.buffer, backend, &self.options)
    }

    /// Loads the resident per-layer parameters once.
    pub fn layer_misc(&self) -> Result<Vec<LayerMisc>, ExecError> {
        let m = self.store.manifest();
        (0..m.n_layers)
            .map(|l| {
                let flat = self.store.read_layer_misc(l)?;
                LayerMisc::from_flat(&flat, m.hidden_dim, m.ffn_dim).map_err(|reason| ExecError::Decode { layer: l, reason })
            })
            .collect()
    }
}
