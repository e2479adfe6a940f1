use std::collections::BTreeMap;
use std::fs;
use std::time::Instant;

use shardpipe::exec::backend::layer_forward;
use shardpipe::exec::{
    execute, ComputeBackend, Engine, ExecError, ExecOptions, LayerMisc, LayerWeights, PreloadBuffer, ReferenceBackend,
    SyntheticBackend,
};
use shardpipe::model::{Bitwidth, ExecutionPlan, ShardId, ShardVersion, SubmodelShape};
use shardpipe::preprocess::{preprocess, PreprocessOptions, RawModel};
use shardpipe::quant::QuantConfig;
use shardpipe::store::{ShardStore, StoreError};
use shardpipe::synth::{generate, random_input, DecodedVersions, SyntheticSpec};
use shardpipe::Micros;
use tempfile::TempDir;

fn bw(k: u32) -> Bitwidth {
    Bitwidth::new(k).unwrap()
}

fn tree(spec: &SyntheticSpec) -> (TempDir, RawModel, ShardStore) {
    let dir = TempDir::new().unwrap();
    let model = generate(spec);
    let report = preprocess(&model, dir.path(), &PreprocessOptions::default()).unwrap();
    let store = ShardStore::new(report.manifest);
    (dir, model, store)
}

fn misc(model: &RawModel) -> Vec<LayerMisc> {
    model
        .misc
        .iter()
        .map(|m| LayerMisc::from_flat(m, model.hidden, model.ffn).unwrap())
        .collect()
}

#[test]
fn reference_backend_matches_direct_forward() {
    let (_dir, model, store) = tree(&SyntheticSpec::new(32, 64, 3, 4, 11));
    let x = random_input(6, 32, 5);
    let engine = Engine::new(store.clone(), 0);
    let mut backend = ReferenceBackend::new(model.dims(), engine.layer_misc().unwrap(), x.clone()).unwrap();
    let misc = misc(&model);
    let decoded = DecodedVersions::from_model(&model, &[bw(4), bw(32)], QuantConfig::default()).unwrap();

    for (shape, k) in [(SubmodelShape::new(3, 4), 32), (SubmodelShape::new(2, 3), 4)] {
        let plan = ExecutionPlan::uniform(shape, bw(k), 128, "peak");
        let mut buf = PreloadBuffer::new(0);
        execute(&store, &plan, &mut buf, &mut backend, &ExecOptions::default()).unwrap();

        let mut h = x.clone();
        for l in 0..shape.depth {
            let slices: Vec<(usize, &[f32])> = (0..shape.width)
                .map(|s| {
                    let w = if k == 32 {
                        model.shard(ShardId::new(l, s))
                    } else {
                        decoded.get(ShardVersion::new(l, s, bw(k))).unwrap()
                    };
                    (s, w)
                })
                .collect();
            h = layer_forward(&h, &slices, &misc[l], &model.dims());
        }
        assert_eq!(backend.output().unwrap(), &h, "{shape} at k={k}");
    }
}

#[test]
fn bounded_hand_off_caps_transient_memory() {
    let (_dir, _model, store) = tree(&SyntheticSpec::new(32, 128, 8, 4, 2));
    let plan = ExecutionPlan::uniform(SubmodelShape::new(8, 4), bw(32), 128, "peak");
    let enc_layer: u64 = (0..4).map(|s| store.file_len(ShardVersion::new(0, s, bw(32))).unwrap()).sum();
    let dec_layer = 4 * 4 * store.manifest().dims().weight_count() as u64;

    // compute much slower than IO, so an unbounded reader runs far ahead
    let mut slow = SyntheticBackend::uniform(Micros::from_ms(15));
    let bounded = ExecOptions { max_in_flight: Some(1) };
    let mut buf = PreloadBuffer::new(0);
    let r = execute(&store, &plan, &mut buf, &mut slow, &bounded).unwrap();
    assert!(
        r.peak_working_bytes <= 2 * enc_layer + dec_layer,
        "peak {} > {}",
        r.peak_working_bytes,
        2 * enc_layer + dec_layer
    );
    assert_eq!(r.peak_decoded_bytes, dec_layer);

    let r = execute(&store, &plan, &mut buf, &mut slow, &ExecOptions::default()).unwrap();
    assert!(r.peak_working_bytes > 3 * enc_layer, "unbounded peak {}", r.peak_working_bytes);
}

struct FailAt(usize);

impl ComputeBackend for FailAt {
    fn start(&mut self, _plan: &ExecutionPlan) -> Result<(), String> {
        Ok(())
    }

    fn compute_layer(&mut self, w: &LayerWeights, _started: Instant) -> Result<(), String> {
        if w.layer == self.0 {
            Err("injected".into())
        } else {
            Ok(())
        }
    }

    fn activation_bytes(&self) -> u64 {
        0
    }
}

#[test]
fn errors_carry_the_partial_trace() {
    let (_dir, _model, store) = tree(&SyntheticSpec::new(16, 32, 5, 2, 3));
    let plan = ExecutionPlan::uniform(SubmodelShape::new(5, 2), bw(3), 128, "peak");
    let mut buf = PreloadBuffer::new(1 << 20);

    let f = execute(&store, &plan, &mut buf, &mut FailAt(3), &ExecOptions::default()).unwrap_err();
    assert!(matches!(f.error, ExecError::Backend { layer: 3, .. }), "{}", f.error);
    assert_eq!(f.partial.layers.len(), 3);
    f.partial.check().unwrap();
    // a failed run leaves the buffer untouched
    assert!(buf.is_empty());

    // a damaged shard fails its checksum when the IO worker reaches it
    let path = store.path_of(ShardVersion::new(2, 1, bw(3)));
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    fs::write(&path, &bytes).unwrap();
    let f = execute(&store, &plan, &mut buf, &mut FailAt(usize::MAX), &ExecOptions::default()).unwrap_err();
    assert!(matches!(f.error, ExecError::Store(StoreError::CorruptShard { .. })), "{}", f.error);
    assert_eq!(f.partial.layers.len(), 2);

    // a missing one is caught before anything runs
    fs::remove_file(&path).unwrap();
    let f = execute(&store, &plan, &mut buf, &mut FailAt(usize::MAX), &ExecOptions::default()).unwrap_err();
    assert!(matches!(f.error, ExecError::Store(_)), "{}", f.error);
    assert!(f.partial.layers.is_empty());
}

#[test]
fn oversized_plan_is_rejected() {
    let (_dir, _model, store) = tree(&SyntheticSpec::new(16, 32, 2, 2, 3));
    let plan = ExecutionPlan::uniform(SubmodelShape::new(3, 2), bw(2), 128, "peak");
    let f = execute(&store, &plan, &mut PreloadBuffer::new(0), &mut FailAt(9), &ExecOptions::default()).unwrap_err();
    assert!(matches!(f.error, ExecError::InvalidPlan(_)));
    assert!(f.partial.layers.is_empty());
}

#[test]
fn buffer_warms_up_across_runs() {
    let (_dir, _model, store) = tree(&SyntheticSpec::new(16, 32, 4, 2, 8));
    let layer_bytes: u64 = (0..2).map(|s| store.file_len(ShardVersion::new(0, s, bw(4))).unwrap()).sum();
    let mut engine = Engine::new(store, layer_bytes);
    let mut backend = SyntheticBackend::per_width(BTreeMap::from([(1, Micros(200)), (2, Micros(400))]));
    let mut plan = ExecutionPlan::uniform(SubmodelShape::new(4, 2), bw(4), 128, "peak");

    let cold = engine.run(&plan, &mut backend).unwrap();
    assert_eq!(cold.preload_hits, 0);
    assert_eq!(cold.resident_after, vec![ShardVersion::new(0, 0, bw(4)), ShardVersion::new(0, 1, bw(4))]);

    plan.preloaded = cold.resident_after.iter().copied().collect();
    let warm = engine.run(&plan, &mut backend).unwrap();
    assert_eq!(warm.preload_hits, 2);
    assert_eq!(warm.trace.layers[0].bytes_read, 0);
    assert_eq!(warm.trace.bytes_read(), cold.trace.bytes_read() - layer_bytes);

    // a plan at another width replaces the resident versions
    let mut wider = ExecutionPlan::uniform(SubmodelShape::new(4, 2), bw(2), 128, "peak");
    wider.assignment.set(ShardId::new(0, 0), bw(2));
    let r = engine.run(&wider, &mut backend).unwrap();
    assert_eq!(r.preload_hits, 0);
    assert!(r.resident_after.iter().all(|v| v.bitwidth == bw(2)));
    assert!(engine.buffer.used_bytes() <= layer_bytes);
}
