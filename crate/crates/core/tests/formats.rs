//! JSON artifacts against hand-written golden documents.

use serde_json::{json, Value};

use shardpipe::model::{
    AibLedger, Bitwidth, ExecutionPlan, HardwareProfile, ImportanceMap, ModelManifest, ShardId, ShardVersion,
    SubmodelShape,
};
use shardpipe::plan::PreloadEntry;
use shardpipe::trace::{LayerTiming, PipelineTrace};
use shardpipe::Micros;

fn bw(k: u32) -> Bitwidth {
    Bitwidth::new(k).unwrap()
}

fn round_trip<T>(value: &T, golden: Value)
where
    T: serde::Serialize + serde::de::DeserializeOwned + PartialEq + std::fmt::Debug,
{
    assert_eq!(serde_json::to_value(value).unwrap(), golden);
    let back: T = serde_json::from_value(golden).unwrap();
    assert_eq!(&back, value);
}

#[test]
fn plan_document() {
    let mut p = ExecutionPlan::uniform(SubmodelShape::new(2, 2), bw(2), 128, "peak");
    p.assignment.set(ShardId::new(1, 0), bw(32));
    p.preloaded.insert(ShardVersion::new(0, 1, bw(2)));
    p.ledger = AibLedger {
        budgets: vec![Micros(-250), Micros(1_500)],
    };
    p.target_latency = Micros::from_ms(150);
    p.preload_budget_bytes = 4096;
    p.degraded = true;
    p.provenance.profile_sha256 = Some("ab".repeat(32));
    round_trip(
        &p,
        json!({
            "shape": {"depth": 2, "width": 2},
            "assignment": [[2, 2], [32, 2]],
            "preloaded": [{"layer": 0, "slice": 1, "bitwidth": 2}],
            "ledger": {"budgets": [-0.25, 1.5]},
            "target_latency_ms": 150.0,
            "input_len": 128,
            "freq": "peak",
            "preload_budget_bytes": 4096,
            "degraded": true,
            "provenance": {"profile_sha256": "ab".repeat(32)}
        }),
    );
}

#[test]
fn profile_document() {
    let mut p = HardwareProfile::default();
    p.io_delay.insert(bw(2), Micros(178));
    p.io_delay.insert(bw(32), Micros(1_849));
    p.shard_bytes.insert(bw(2), 2_468);
    p.set_compute(128, 3, "peak", Micros(2_400));
    p.freq_tags.push("peak".into());
    let v = serde_json::to_value(&p).unwrap();
    assert_eq!(v["io_delay"], json!({"2": 0.178, "32": 1.849}));
    assert_eq!(
        v["compute_delay"],
        json!([{"input_len": 128, "width": 3, "freq": "peak", "delay_ms": 2.4}])
    );
    assert_eq!(v["shard_bytes"], json!({"2": 2468}));
    let back: HardwareProfile = serde_json::from_value(v).unwrap();
    assert_eq!(back, p);
}

#[test]
fn importance_document() {
    let mut imp = ImportanceMap::uniform(1, 2);
    imp.scores.insert(ShardId::new(0, 1), 0.25);
    imp.baseline_metric = 1.0;
    imp.metric_name = "one_minus_nmse".into();
    imp.evaluator_id = "toy".into();
    imp.seed = Some(3);
    let v = serde_json::to_value(&imp).unwrap();
    assert_eq!(
        v["scores"],
        json!([{"layer": 0, "slice": 0, "score": 0.0}, {"layer": 0, "slice": 1, "score": 0.25}])
    );
    let back: ImportanceMap = serde_json::from_value(v).unwrap();
    assert_eq!(back, imp);
    assert_eq!(back.ranking()[0], ShardId::new(0, 1));
}

#[test]
fn manifest_document() {
    let golden = json!({
        "n_layers": 12,
        "n_slices": 12,
        "bitwidths": [2, 3, 4, 5, 6, 32],
        "hidden_dim": 96,
        "ffn_dim": 384,
        "task_id": "synthetic",
        "shard_dir": ".",
        "layer_misc_bytes": 4992
    });
    let m: ModelManifest = serde_json::from_value(golden.clone()).unwrap();
    assert!(m.geometry_violations().is_empty());
    assert_eq!(m.dims().head_dim(), 8);
    assert_eq!(serde_json::to_value(&m).unwrap(), golden);
    // an unsupported width is rejected at parse time
    let mut bad = golden;
    bad["bitwidths"] = json!([2, 20]);
    assert!(serde_json::from_value::<ModelManifest>(bad).is_err());
}

#[test]
fn preload_entry_is_flat() {
    let e = PreloadEntry {
        version: ShardVersion::new(3, 1, bw(6)),
        bytes: 77,
    };
    round_trip(&e, json!({"layer": 3, "slice": 1, "bitwidth": 6, "bytes": 77}));
}

#[test]
fn trace_document_round_trips() {
    let t = PipelineTrace::from_layers(vec![LayerTiming {
        io_start: Micros(0),
        io_end: Micros(300),
        decode_start: Micros(300),
        decode_end: Micros(350),
        compute_start: Micros(300),
        compute_end: Micros(1_300),
        stall: Micros(300),
        bytes_read: 1024,
    }]);
    let v = serde_json::to_value(&t).unwrap();
    let back: PipelineTrace = serde_json::from_value(v).unwrap();
    assert_eq!(back, t);
    assert!(t.check().is_ok());
}
