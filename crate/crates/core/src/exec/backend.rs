//! Compute backends for the executor.
//!
//! The reference backend runs a post-layernorm encoder layer restricted to
//! the selected slices. Each slice contributes one attention head and `1/M`
//! of the FFN neurons. Matrix conventions for one slice:
//!
//! - `W_Q`, `W_K`, `W_V`: `d x d/M`, applied as `x . W`
//! - `W_O`: `d x d/M`, applied as `head . W^T`
//! - `FFN1`: `d_ff/M x d`, applied as `x . W^T`
//! - `FFN2`: `d x d_ff/M`, applied as `h . W^T`

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::model::{layer_misc_len, ExecutionPlan, MatrixKind, ShardDims};
use crate::time::{sleep_until, Micros};

/// Decoded FP32 weights of one layer's selected slices, ascending by slice.
#[derive(Clone, Debug, Default)]
pub struct LayerWeights {
    pub layer: usize,
    pub slices: Vec<(usize, Vec<f32>)>,
}

impl LayerWeights {
    pub fn bytes(&self) -> u64 {
        self.slices.iter().map(|(_, w)| w.len() as u64 * 4).sum()
    }
}

pub trait ComputeBackend {
    /// Called once before the first layer.
    fn start(&mut self, plan: &ExecutionPlan) -> Result<(), String>;

    /// Runs one layer. `started` is when the compute stage picked the layer
    /// up, before decoding.
    fn compute_layer(&mut self, weights: &LayerWeights, started: Instant) -> Result<(), String>;

    /// Bytes of activations the backend keeps alive between layers.
    fn activation_bytes(&self) -> u64 {
        0
    }
}

/// Resident non-sharded parameters of one layer, in file order:
/// `b_q, b_k, b_v, b_o` (each `d`), `b_ffn1` (`d_ff`), `b_ffn2` (`d`),
/// then `gamma, beta` of the attention layernorm and of the FFN layernorm.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMisc {
    pub b_q: Array1<f32>,
    pub b_k: Array1<f32>,
    pub b_v: Array1<f32>,
    pub b_o: Array1<f32>,
    pub b_ffn1: Array1<f32>,
    pub b_ffn2: Array1<f32>,
    pub ln1_gamma: Array1<f32>,
    pub ln1_beta: Array1<f32>,
    pub ln2_gamma: Array1<f32>,
    pub ln2_beta: Array1<f32>,
}

impl LayerMisc {
    pub fn from_flat(values: &[f32], hidden: usize, ffn: usize) -> Result<Self, String> {
        if values.len() != layer_misc_len(hidden, ffn) {
            return Err(format!(
                "layer misc has {} values, expected {}",
                values.len(),
                layer_misc_len(hidden, ffn)
            ));
        }
        let mut at = 0;
        let mut take = |n: usize| {
            let a = Array1::from(values[at..at + n].to_vec());
            at += n;
            a
        };
        Ok(LayerMisc {
            b_q: take(hidden),
            b_k: take(hidden),
            b_v: take(hidden),
            b_o: take(hidden),
            b_ffn1: take(ffn),
            b_ffn2: take(hidden),
            ln1_gamma: take(hidden),
            ln1_beta: take(hidden),
            ln2_gamma: take(hidden),
            ln2_beta: take(hidden),
        })
    }

    pub fn to_flat(&self) -> Vec<f32> {
        [
            &self.b_q,
            &self.b_k,
            &self.b_v,
            &self.b_o,
            &self.b_ffn1,
            &self.b_ffn2,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
        .iter()
        .flat_map(|a| a.iter().copied())
        .collect()
    }
}

fn matrix<'a>(w: &'a [f32], dims: &ShardDims, kind: MatrixKind) -> ArrayView2<'a, f32> {
    let (r, c) = dims.matrices()[kind as usize];
    let off = dims.matrix_offset(kind);
    ArrayView2::from_shape((r, c), &w[off..off + r * c]).expect("shard length checked by decoder")
}

fn gelu(x: f32) -> f32 {
    // tanh approximation
    const C: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn layer_norm(x: &mut Array2<f32>, gamma: ArrayView1<f32>, beta: ArrayView1<f32>) {
    const EPS: f32 = 1e-12;
    for mut row in x.rows_mut() {
        let n = row.len() as f32;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + EPS).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma[i] + beta[i];
        }
    }
}

fn softmax_rows(x: &mut Array2<f32>) {
    for mut row in x.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multiply-accumulate count of [`layer_forward`] for `l` tokens over `m`
/// slices.
pub fn layer_macs(dims: &ShardDims, l: usize, m: usize) -> u64 {
    let (d, dh, fs) = (dims.hidden as u64, dims.head_dim() as u64, dims.ffn_slice() as u64);
    let l = l as u64;
    let per_slice = 3 * l * d * dh + 2 * l * l * dh + l * dh * d + 2 * l * d * fs;
    per_slice * m as u64
}

/// One encoder layer over the given slices. `x` is `l x d`.
pub fn layer_forward<W: AsRef<[f32]>>(
    x: &Array2<f32>,
    slices: &[(usize, W)],
    misc: &LayerMisc,
    dims: &ShardDims,
) -> Array2<f32> {
    let (l, d) = x.dim();
    let dh = dims.head_dim();
    let fs = dims.ffn_slice();
    let scale = 1.0 / (dh as f32).sqrt();

    let mut attn = Array2::<f32>::zeros((l, d));
    for (s, w) in slices {
        let w = w.as_ref();
        let heads = s * dh..(s + 1) * dh;
        let q = x.dot(&matrix(w, dims, MatrixKind::Query)) + &misc.b_q.slice(s![heads.clone()]);
        let k = x.dot(&matrix(w, dims, MatrixKind::Key)) + &misc.b_k.slice(s![heads.clone()]);
        let v = x.dot(&matrix(w, dims, MatrixKind::Value)) + &misc.b_v.slice(s![heads]);
        let mut scores = q.dot(&k.t()) * scale;
        softmax_rows(&mut scores);
        let head = scores.dot(&v);
        attn += &head.dot(&matrix(w, dims, MatrixKind::Output).t());
    }
    attn += &misc.b_o;
    let mut x1 = attn + x;
    layer_norm(&mut x1, misc.ln1_gamma.view(), misc.ln1_beta.view());

    let mut ffn = Array2::<f32>::zeros((l, d));
    for (s, w) in slices {
        let w = w.as_ref();
        let mut h = x1.dot(&matrix(w, dims, MatrixKind::Ffn1).t());
        h += &misc.b_ffn1.slice(s![s * fs..(s + 1) * fs]);
        h.mapv_inplace(gelu);
        ffn += &h.dot(&matrix(w, dims, MatrixKind::Ffn2).t());
    }
    ffn += &misc.b_ffn2;
    let mut out = ffn + &x1;
    layer_norm(&mut out, misc.ln2_gamma.view(), misc.ln2_beta.view());
    out
}

/// Mean-pools tokens into one `d`-vector.
pub fn pool(x: &Array2<f32>) -> Array1<f32> {
    x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()))
}

/// Runs real arithmetic on decoded weights.
#[derive(Clone, Debug)]
pub struct ReferenceBackend {
    dims: ShardDims,
    misc: Vec<LayerMisc>,
    input: Array2<f32>,
    state: Option<Array2<f32>>,
    /// Multiply-accumulates performed since the last `start`.
    pub macs: u64,
}

impl ReferenceBackend {
    pub fn new(dims: ShardDims, misc: Vec<LayerMisc>, input: Array2<f32>) -> Result<Self, String> {
        if input.ncols() != dims.hidden {
            return Err(format!("input width {} != hidden {}", input.ncols(), dims.hidden));
        }
        Ok(ReferenceBackend {
            dims,
            misc,
            input,
            state: None,
            macs: 0,
        })
    }

    pub fn set_input(&mut self, input: Array2<f32>) {
        self.input = input;
    }

    /// Hidden states after the last executed layer.
    pub fn output(&self) -> Option<&Array2<f32>> {
        self.state.as_ref()
    }
}

impl ComputeBackend for ReferenceBackend {
    fn start(&mut self, plan: &ExecutionPlan) -> Result<(), String> {
        if plan.shape.depth > self.misc.len() {
            return Err(format!(
                "plan needs {} layers, backend has parameters for {}",
                plan.shape.depth,
                self.misc.len()
            ));
        }
        self.state = Some(self.input.clone());
        self.macs = 0;
        Ok(())
    }

    fn compute_layer(&mut self, weights: &LayerWeights, _started: Instant) -> Result<(), String> {
        let x = self.state.as_ref().ok_or("compute_layer before start")?;
        let misc = self
            .misc
            .get(weights.layer)
            .ok_or_else(|| format!("no parameters for layer {}", weights.layer))?;
        let y = layer_forward(x, &weights.slices, misc, &self.dims);
        self.macs += layer_macs(&self.dims, x.nrows(), weights.slices.len());
        self.state = Some(y);
        Ok(())
    }

    fn activation_bytes(&self) -> u64 {
        self.input.len() as u64 * 4
    }
}

/// Stands in for a real accelerator: each layer occupies the compute stage
/// for exactly `T_comp(m)` measured from when the stage picked it up.
#[derive(Clone, Debug)]
pub struct SyntheticBackend {
    delays: BTreeMap<usize, Micros>,
    current: Micros,
}

impl SyntheticBackend {
    /// Same delay for every width.
    pub fn uniform(delay: Micros) -> Self {
        SyntheticBackend {
            delays: BTreeMap::from([(0, delay)]),
            current: delay,
        }
    }

    /// Delay per submodel width; widths without an entry use the nearest
    /// smaller one.
    pub fn per_width(delays: BTreeMap<usize, Micros>) -> Self {
        let current = delays.values().next().copied().unwrap_or_default();
        SyntheticBackend { delays, current }
    }

    pub fn delay_for(&self, width: usize) -> Micros {
        self.delays
            .range(..=width)
            .next_back()
            .or_else(|| self.delays.iter().next())
            .map(|(_, d)| *d)
            .unwrap_or_default()
    }
}

impl ComputeBackend for SyntheticBackend {
    fn start(&mut self, plan: &ExecutionPlan) -> Result<(), String> {
        self.current = self.delay_for(plan.shape.width);
        Ok(())
    }

    fn compute_layer(&mut self, _weights: &LayerWeights, started: Instant) -> Result<(), String> {
        let deadline = started + self.current.to_duration();
        sleep_until(deadline);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn misc_round_trip() {
        let (d, f) = (8, 32);
        let flat: Vec<f32> = (0..layer_misc_len(d, f)).map(|i| i as f32).collect();
        let m = LayerMisc::from_flat(&flat, d, f).unwrap();
        assert_eq!(m.b_ffn1[0], 32.0);
        assert_eq!(m.to_flat(), flat);
        assert!(LayerMisc::from_flat(&flat[1..], d, f).is_err());
    }

    #[test]
    fn zero_weights_give_normalized_input() {
        let dims = ShardDims::new(4, 8, 2);
        let misc = LayerMisc::from_flat(
            &[vec![0.0; 4 * 4 + 8 + 4], vec![1.0; 4], vec![0.0; 4], vec![1.0; 4], vec![0.0; 4]].concat(),
            4,
            8,
        )
        .unwrap();
        let x = Array2::from_shape_vec((2, 4), vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let slices = vec![(0, vec![0.0; dims.weight_count()]), (1, vec![0.0; dims.weight_count()])];
        let y = layer_forward(&x, &slices, &misc, &dims);
        // with zero weights both sublayers reduce to layernorm of the input
        let mut expect = x.clone();
        layer_norm(&mut expect, misc.ln1_gamma.view(), misc.ln1_beta.view());
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158_808).abs() < 1e-5);
    }

    #[test]
    fn synthetic_delay_lookup() {
        let b = SyntheticBackend::per_width(BTreeMap::from([(3, Micros(30)), (6, Micros(60))]));
        assert_eq!(b.delay_for(3), Micros(30));
        assert_eq!(b.delay_for(5), Micros(30));
        assert_eq!(b.delay_for(12), Micros(60));
        assert_eq!(b.delay_for(1), Micros(30));
    }
}
