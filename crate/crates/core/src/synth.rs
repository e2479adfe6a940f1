//! Synthetic models and the synthetic evaluation task.
//!
//! Weights are Gaussian with a per-shard scale drawn log-normally and a
//! sparse heavier tail, which gives shards unequal importance and a realistic
//! share of outliers. The task compares a student's hidden states against
//! the full-precision teacher on seeded random inputs; the metric is
//! `1 - NMSE`.

use std::collections::HashMap;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::exec::backend::{layer_forward, LayerMisc};
use crate::model::{layer_misc_len, Bitwidth, ExecutionPlan, ShardDims, ShardId, ShardVersion, SubmodelShape};
use crate::preprocess::RawModel;
use crate::profile::Evaluator;
use crate::quant::{decode_shard, LayerQuantizer, QuantConfig, QuantError};
use crate::store::{ShardStore, StoreError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub hidden: usize,
    pub ffn: usize,
    pub n_layers: usize,
    pub n_slices: usize,
    pub seed: u64,
    pub weight_std: f64,
    /// Standard deviation of the log of each shard's scale.
    pub scale_spread: f64,
    /// Probability that a weight comes from the wide component.
    pub tail_prob: f64,
    /// Width of the wide component relative to the shard's scale.
    pub tail_scale: f64,
}

impl SyntheticSpec {
    pub fn new(hidden: usize, ffn: usize, n_layers: usize, n_slices: usize, seed: u64) -> Self {
        SyntheticSpec {
            hidden,
            ffn,
            n_layers,
            n_slices,
            seed,
            weight_std: 0.04,
            scale_spread: 0.3,
            tail_prob: 2e-4,
            tail_scale: 4.0,
        }
    }
}

/// Parses `hidden,ffn,layers,slices,seed`.
impl FromStr for SyntheticSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 5 {
            return Err(format!("expected hidden,ffn,layers,slices,seed; got {s:?}"));
        }
        let n = |i: usize| parts[i].parse::<u64>().map_err(|e| format!("{:?}: {e}", parts[i]));
        Ok(SyntheticSpec::new(n(0)? as usize, n(1)? as usize, n(2)? as usize, n(3)? as usize, n(4)?))
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic in `spec`; shards are generated in parallel from independent
/// streams.
pub fn generate(spec: &SyntheticSpec) -> RawModel {
    let dims = ShardDims::new(spec.hidden, spec.ffn, spec.n_slices);
    let count = dims.weight_count();
    let n = spec.n_layers * spec.n_slices;
    let shards: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(spec.seed, 1 + i as u64);
            let scale = spec.weight_std * Normal::new(0.0, spec.scale_spread).unwrap().sample(&mut rng).exp();
            let body = Normal::new(0.0, scale).unwrap();
            let tail = Normal::new(0.0, scale * spec.tail_scale).unwrap();
            (0..count)
                .map(|_| {
                    let w = if rng.random::<f64>() < spec.tail_prob {
                        tail.sample(&mut rng)
                    } else {
                        body.sample(&mut rng)
                    };
                    w as f32
                })
                .collect()
        })
        .collect();
    let misc = (0..spec.n_layers)
        .map(|l| {
            let mut rng = stream_rng(spec.seed, 1 + (n + l) as u64);
            let small = Normal::new(0.0, 0.02).unwrap();
            let d = spec.hidden;
            let biases = 4 * d + spec.ffn + d;
            let mut v: Vec<f32> = (0..biases).map(|_| small.sample(&mut rng) as f32).collect();
            for _ in 0..2 {
                v.extend((0..d).map(|_| 1.0 + small.sample(&mut rng) as f32));
                v.extend((0..d).map(|_| small.sample(&mut rng) as f32));
            }
            debug_assert_eq!(v.len(), layer_misc_len(spec.hidden, spec.ffn));
            v
        })
        .collect();
    RawModel {
        n_layers: spec.n_layers,
        n_slices: spec.n_slices,
        hidden: spec.hidden,
        ffn: spec.ffn,
        shards,
        misc,
    }
}

/// Embedding-side parameters that a full model file carries besides the
/// encoder layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub vocab: usize,
    pub positions: usize,
    pub type_vocab: usize,
}

/// FP32 bytes of a complete encoder model: layers, token/position/type
/// embeddings with their layernorm, and a `d x d` pooler.
pub fn full_model_fp32_bytes(hidden: usize, ffn: usize, n_layers: usize, emb: EmbeddingSpec) -> u64 {
    let d = hidden as u64;
    let f = ffn as u64;
    let per_layer = 4 * d * d + 2 * d * f + layer_misc_len(hidden, ffn) as u64;
    let embeddings = (emb.vocab + emb.positions + emb.type_vocab) as u64 * d + 2 * d;
    let pooler = d * d + d;
    4 * (n_layers as u64 * per_layer + embeddings + pooler)
}

/// Standard-normal hidden states of `tokens x hidden`, deterministic in `seed`.
pub fn random_input(tokens: usize, hidden: usize, seed: u64) -> Array2<f32> {
    let mut rng = stream_rng(seed, u64::MAX);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    Array2::from_shape_fn((tokens, hidden), |_| normal.sample(&mut rng))
}

/// Seeded inputs plus the teacher's outputs on them.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub dims: ShardDims,
    pub n_layers: usize,
    pub seed: u64,
    misc: Vec<LayerMisc>,
    inputs: Vec<Array2<f32>>,
    teacher: Vec<Array2<f32>>,
}

impl SyntheticTask {
    pub fn new(model: &RawModel, n_inputs: usize, input_len: usize, seed: u64) -> Self {
        let dims = model.dims();
        let misc: Vec<LayerMisc> = model
            .misc
            .iter()
            .map(|m| LayerMisc::from_flat(m, model.hidden, model.ffn).expect("generator emits full misc"))
            .collect();
        let mut rng = stream_rng(seed, 0);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let inputs: Vec<Array2<f32>> = (0..n_inputs)
            .map(|_| Array2::from_shape_fn((input_len, model.hidden), |_| normal.sample(&mut rng)))
            .collect();
        let mut task = SyntheticTask {
            dims,
            n_layers: model.n_layers,
            seed,
            misc,
            inputs,
            teacher: Vec::new(),
        };
        let full = SubmodelShape::new(model.n_layers, model.n_slices);
        task.teacher = task.forward(full, |id| Some(model.shard(id)));
        task
    }

    pub fn input_len(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.nrows())
    }

    /// Hidden states after `shape.depth` layers. Slices for which `weights`
    /// returns `None` are left out.
    pub fn forward<'w, F>(&self, shape: SubmodelShape, weights: F) -> Vec<Array2<f32>>
    where
        F: Fn(ShardId) -> Option<&'w [f32]> + Sync,
    {
        let layers: Vec<Vec<(usize, &[f32])>> = (0..shape.depth)
            .map(|l| {
                (0..shape.width)
                    .filter_map(|s| weights(ShardId::new(l, s)).map(|w| (s, w)))
                    .collect()
            })
            .collect();
        self.inputs
            .par_iter()
            .map(|x| {
                let mut h = x.clone();
                for (l, slices) in layers.iter().enumerate() {
                    h = layer_forward(&h, slices, &self.misc[l], &self.dims);
                }
                h
            })
            .collect()
    }

    /// `1 - sum (y - t)^2 / sum t^2` over all inputs.
    pub fn metric<'w, F>(&self, shape: SubmodelShape, weights: F) -> f64
    where
        F: Fn(ShardId) -> Option<&'w [f32]> + Sync,
    {
        let out = self.forward(shape, weights);
        let mut err = 0.0f64;
        let mut norm = 0.0f64;
        for (y, t) in out.iter().zip(&self.teacher) {
            for (a, b) in y.iter().zip(t.iter()) {
                err += ((a - b) as f64).powi(2);
                norm += (*b as f64).powi(2);
            }
        }
        1.0 - err / norm
    }
}

/// Ablates single FP32 shards of the full model.
pub struct AblationEvaluator<'a> {
    pub task: &'a SyntheticTask,
    pub model: &'a RawModel,
}

impl Evaluator for AblationEvaluator<'_> {
    fn metric_name(&self) -> String {
        "one_minus_nmse".into()
    }

    fn id(&self) -> String {
        format!(
            "synthetic-teacher:{}x{}:d{}:inputs{}x{}",
            self.model.n_layers,
            self.model.n_slices,
            self.model.hidden,
            self.task.inputs.len(),
            self.task.input_len()
        )
    }

    fn seed(&self) -> Option<u64> {
        Some(self.task.seed)
    }

    fn evaluate(&self, ablated: Option<ShardId>) -> Result<f64, String> {
        let full = SubmodelShape::new(self.model.n_layers, self.model.n_slices);
        let m = self.task.metric(full, |id| (Some(id) != ablated).then(|| self.model.shard(id)));
        if m.is_finite() {
            Ok(m)
        } else {
            Err(format!("non-finite metric with {ablated:?} ablated"))
        }
    }
}

/// Decoded weights of every stored version, for scoring plans.
#[derive(Clone, Debug, Default)]
pub struct DecodedVersions {
    weights: HashMap<ShardVersion, Vec<f32>>,
}

impl DecodedVersions {
    /// Quantizes `model` in memory at each width.
    pub fn from_model(model: &RawModel, widths: &[Bitwidth], config: QuantConfig) -> Result<Self, QuantError> {
        let layers: Vec<Vec<(ShardVersion, Vec<f32>)>> = (0..model.n_layers)
            .into_par_iter()
            .map(|l| -> Result<_, QuantError> {
                let raw = model.raw_shards(l)?;
                let q = LayerQuantizer::new(&raw, config)?;
                let mut out = Vec::new();
                for (k, shards) in widths.iter().zip(q.encode_all(widths)?) {
                    for s in shards {
                        out.push((ShardVersion { id: s.id, bitwidth: *k }, decode_shard(&s)?.weights));
                    }
                }
                Ok(out)
            })
            .collect::<Result<_, _>>()?;
        Ok(DecodedVersions {
            weights: layers.into_iter().flatten().collect(),
        })
    }

    /// Reads and decodes every version in a shard tree.
    pub fn from_store(store: &ShardStore) -> Result<Self, StoreError> {
        let m = store.manifest();
        let mut weights = HashMap::new();
        for id in m.shard_ids() {
            for &k in &m.bitwidths {
                let v = ShardVersion { id, bitwidth: k };
                let enc = store.read_encoded(v)?;
                let path = store.path_of(v);
                let view = enc.view().map_err(|r| StoreError::CorruptShard {
                    path: path.clone(),
                    reason: r,
                })?;
                let mut out = vec![0f32; m.dims().weight_count()];
                view.decode_into(&mut out).map_err(|e| StoreError::CorruptShard {
                    path,
                    reason: e.to_string(),
                })?;
                weights.insert(v, out);
            }
        }
        Ok(DecodedVersions { weights })
    }

    pub fn get(&self, v: ShardVersion) -> Option<&[f32]> {
        self.weights.get(&v).map(Vec::as_slice)
    }

    /// Task metric of the submodel a plan executes.
    pub fn plan_metric(&self, task: &SyntheticTask, plan: &ExecutionPlan) -> f64 {
        task.metric(plan.shape, |id| {
            self.get(ShardVersion {
                id,
                bitwidth: plan.bitwidth(id),
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parses() {
        let s: SyntheticSpec = "96, 384, 4, 6, 7".parse().unwrap();
        assert_eq!((s.hidden, s.ffn, s.n_layers, s.n_slices, s.seed), (96, 384, 4, 6, 7));
        assert!("1,2,3".parse::<SyntheticSpec>().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let s = SyntheticSpec::new(16, 32, 2, 4, 3);
        assert_eq!(generate(&s), generate(&s));
        let mut t = s.clone();
        t.seed = 4;
        assert_ne!(generate(&s).shards[0], generate(&t).shards[0]);
    }

    #[test]
    fn teacher_scores_one_and_ablation_hurts() {
        let model = generate(&SyntheticSpec::new(16, 64, 2, 4, 1));
        let task = SyntheticTask::new(&model, 4, 8, 9);
        let e = AblationEvaluator {
            task: &task,
            model: &model,
        };
        assert!((e.evaluate(None).unwrap() - 1.0).abs() < 1e-12);
        let drop = e.evaluate(Some(ShardId::new(0, 1))).unwrap();
        assert!(drop < 1.0);
    }

    #[test]
    fn full_model_bytes_bert_base() {
        let emb = EmbeddingSpec {
            vocab: 30522,
            positions: 512,
            type_vocab: 2,
        };
        // BERT-base has about 109.5M parameters (438 MB in FP32).
        let params = full_model_fp32_bytes(768, 3072, 12, emb) / 4;
        assert!((109_000_000..110_000_000).contains(&params), "{params}");
    }
}
