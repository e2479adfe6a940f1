//! Gaussian outlier-aware codebook quantization.
//!
//! A layer's weights are fitted with a single Gaussian. Weights whose log
//! density falls below the threshold are outliers and are kept verbatim; the
//! remaining inliers are sorted and cut into `2^k` equal-population clusters
//! whose arithmetic means become the codebook. Every shard of the layer is
//! then indexed against that shared codebook.

use std::f64::consts::PI;

use thiserror::Error;

use crate::bitpack;
use crate::model::{Bitwidth, MatrixKind, ShardDims, ShardId};

pub const DEFAULT_LOG_DENSITY_THRESHOLD: f64 = -4.0;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("need at least two weights to fit a distribution, got {0}")]
    TooFewWeights(usize),
    #[error("weights contain a non-finite value at offset {0}")]
    NonFinite(usize),
    #[error("all weights are equal; the distribution is degenerate")]
    DegenerateDistribution,
    #[error("{inliers} inliers cannot fill {clusters} clusters")]
    InsufficientMass { inliers: usize, clusters: usize },
    #[error("shard dimensions mismatch: {0}")]
    ShapeMismatch(String),
    #[error("corrupt shard: {0}")]
    CorruptShard(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: f64,
    pub std: f64,
    pub log_density_threshold: f64,
}

impl GaussianFit {
    pub fn with_threshold(self, threshold: f64) -> Self {
        GaussianFit {
            log_density_threshold: threshold,
            ..self
        }
    }

    /// Natural log of the normal pdf at `w`.
    pub fn log_density(&self, w: f64) -> f64 {
        let z = (w - self.mean) / self.std;
        -0.5 * (2.0 * PI).ln() - self.std.ln() - 0.5 * z * z
    }

    pub fn is_outlier(&self, w: f32) -> bool {
        self.log_density(w as f64) < self.log_density_threshold
    }
}

/// Maximum-likelihood (population) mean and standard deviation.
pub fn fit_gaussian(weights: &[f32]) -> Result<GaussianFit, QuantError> {
    if weights.len() < 2 {
        return Err(QuantError::TooFewWeights(weights.len()));
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(QuantError::NonFinite(i));
    }
    let n = weights.len() as f64;
    let mean = weights.iter().map(|&w| w as f64).sum::<f64>() / n;
    let var = weights
        .iter()
        .map(|&w| {
            let d = w as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(QuantError::DegenerateDistribution);
    }
    Ok(GaussianFit {
        mean,
        std,
        log_density_threshold: DEFAULT_LOG_DENSITY_THRESHOLD,
    })
}

/// Partitions offsets into `(inliers, outliers)`, both ascending.
pub fn split_outliers(weights: &[f32], fit: &GaussianFit) -> (Vec<u32>, Vec<u32>) {
    let mut inliers = Vec::with_capacity(weights.len());
    let mut outliers = Vec::new();
    for (i, &w) in weights.iter().enumerate() {
        if fit.is_outlier(w) {
            outliers.push(i as u32);
        } else {
            inliers.push(i as u32);
        }
    }
    (inliers, outliers)
}

/// Cluster sizes for splitting `count` items into `clusters` groups whose
/// sizes differ by at most one; the first `count % clusters` get the extra.
pub fn equal_population_sizes(count: usize, clusters: usize) -> Vec<usize> {
    let base = count / clusters;
    let rem = count % clusters;
    (0..clusters).map(|i| base + usize::from(i < rem)).collect()
}

/// Codebook and indexes for a flat weight array at one bitwidth.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatEncoding {
    pub bitwidth: Bitwidth,
    pub centroids: Vec<f32>,
    pub cluster_sizes: Vec<usize>,
    /// One index per weight; outlier slots hold 0.
    pub indexes: Vec<u16>,
    pub outliers: Vec<u32>,
}

/// Fits once, sorts once, and encodes the same weights at any number of
/// bitwidths.
pub struct FlatQuantizer<'a> {
    values: &'a [f32],
    fit: GaussianFit,
    sorted_inliers: Vec<u32>,
    outliers: Vec<u32>,
}

impl<'a> FlatQuantizer<'a> {
    pub fn new(values: &'a [f32], fit: GaussianFit) -> Self {
        let (mut inliers, outliers) = split_outliers(values, &fit);
        // ties broken by original offset keeps encoding deterministic
        inliers.sort_by(|&a, &b| {
            values[a as usize]
                .total_cmp(&values[b as usize])
                .then(a.cmp(&b))
        });
        FlatQuantizer {
            values,
            fit,
            sorted_inliers: inliers,
            outliers,
        }
    }

    pub fn fit(&self) -> &GaussianFit {
        &self.fit
    }

    pub fn outliers(&self) -> &[u32] {
        &self.outliers
    }

    pub fn inlier_count(&self) -> usize {
        self.sorted_inliers.len()
    }

    /// Encodes at a compressed bitwidth (`1..=16`).
    pub fn encode(&self, k: Bitwidth) -> Result<FlatEncoding, QuantError> {
        assert!(!k.is_full(), "full-width shards are not codebook encoded");
        let clusters = k.centroid_count();
        let n = self.sorted_inliers.len();
        if n < clusters {
            return Err(QuantError::InsufficientMass {
                inliers: n,
                clusters,
            });
        }
        let sizes = equal_population_sizes(n, clusters);
        let mut centroids = Vec::with_capacity(clusters);
        let mut indexes = vec![0u16; self.values.len()];
        let mut start = 0;
        for (c, &size) in sizes.iter().enumerate() {
            let members = &self.sorted_inliers[start..start + size];
            let sum: f64 = members.iter().map(|&i| self.values[i as usize] as f64).sum();
            centroids.push((sum / size as f64) as f32);
            for &i in members {
                indexes[i as usize] = c as u16;
            }
            start += size;
        }
        Ok(FlatEncoding {
            bitwidth: k,
            centroids,
            cluster_sizes: sizes,
            indexes,
            outliers: self.outliers.clone(),
        })
    }
}

/// Uncompressed FP32 weights of one shard, matrices concatenated in
/// [`MatrixKind::ALL`] order, each row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RawShard {
    pub id: ShardId,
    pub dims: ShardDims,
    pub weights: Vec<f32>,
}

impl RawShard {
    pub fn new(id: ShardId, dims: ShardDims, weights: Vec<f32>) -> Result<Self, QuantError> {
        if weights.len() != dims.weight_count() {
            return Err(QuantError::ShapeMismatch(format!(
                "{} weights for dims needing {}",
                weights.len(),
                dims.weight_count()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(QuantError::NonFinite(i));
        }
        Ok(RawShard { id, dims, weights })
    }

    pub fn matrix(&self, kind: MatrixKind) -> &[f32] {
        let off = self.dims.matrix_offset(kind);
        &self.weights[off..off + self.dims.matrix_len(kind)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outlier {
    pub offset: u32,
    pub value: f32,
}

/// One stored version of a shard.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedShard {
    pub id: ShardId,
    pub bitwidth: Bitwidth,
    pub dims: ShardDims,
    /// Empty for the full width.
    pub centroids: Vec<f32>,
    /// Shard-flat offsets, strictly increasing.
    pub outliers: Vec<Outlier>,
    /// Packed k-bit indexes, or raw little-endian f32 bytes at full width.
    pub payload: Vec<u8>,
}

impl QuantizedShard {
    pub fn weight_count(&self) -> usize {
        self.dims.weight_count()
    }

    pub fn outlier_fraction(&self) -> f64 {
        self.outliers.len() as f64 / self.weight_count() as f64
    }

    pub fn expected_payload_len(bitwidth: Bitwidth, dims: &ShardDims) -> usize {
        if bitwidth.is_full() {
            dims.weight_count() * 4
        } else {
            bitpack::packed_len(dims.weight_count(), bitwidth.bits())
        }
    }

    /// Structural checks other than per-index range.
    pub fn check(&self) -> Result<(), QuantError> {
        let expect = Self::expected_payload_len(self.bitwidth, &self.dims);
        if self.payload.len() != expect {
            return Err(QuantError::CorruptShard(format!(
                "payload is {} bytes, expected {expect}",
                self.payload.len()
            )));
        }
        if self.centroids.len() != self.bitwidth.centroid_count() {
            return Err(QuantError::CorruptShard(format!(
                "{} centroids for k={}",
                self.centroids.len(),
                self.bitwidth
            )));
        }
        if self.bitwidth.is_full() && !self.outliers.is_empty() {
            return Err(QuantError::CorruptShard("outliers on a full-width shard".into()));
        }
        check_outliers(self.outliers.iter().map(|o| o.offset), self.weight_count())
    }
}

fn check_outliers(offsets: impl Iterator<Item = u32>, total: usize) -> Result<(), QuantError> {
    let mut prev: Option<u32> = None;
    for off in offsets {
        if off as usize >= total {
            return Err(QuantError::CorruptShard(format!(
                "outlier offset {off} >= {total}"
            )));
        }
        if prev.is_some_and(|p| p >= off) {
            return Err(QuantError::CorruptShard(
                "outlier offsets not strictly increasing".into(),
            ));
        }
        prev = Some(off);
    }
    Ok(())
}

/// Quantizer configuration.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantConfig {
    pub log_density_threshold: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            log_density_threshold: DEFAULT_LOG_DENSITY_THRESHOLD,
        }
    }
}

/// Quantizes all shards of one layer against one Gaussian fit and one
/// codebook per bitwidth.
pub struct LayerQuantizer<'a> {
    shards: &'a [RawShard],
    flat: Vec<f32>,
    fit: GaussianFit,
}

impl<'a> LayerQuantizer<'a> {
    pub fn new(shards: &'a [RawShard], config: QuantConfig) -> Result<Self, QuantError> {
        let Some(first) = shards.first() else {
            return Err(QuantError::TooFewWeights(0));
        };
        if shards
            .iter()
            .any(|s| s.dims != first.dims || s.id.layer != first.id.layer)
        {
            return Err(QuantError::ShapeMismatch(
                "shards of one layer must share layer index and dims".into(),
            ));
        }
        let flat: Vec<f32> = shards.iter().flat_map(|s| s.weights.iter().copied()).collect();
        let fit = fit_gaussian(&flat)?.with_threshold(config.log_density_threshold);
        Ok(LayerQuantizer { shards, flat, fit })
    }

    pub fn fit(&self) -> &GaussianFit {
        &self.fit
    }

    /// Quantizes every shard of the layer at each requested width. Sorting
    /// happens once regardless of how many widths are requested.
    pub fn encode_all(&self, widths: &[Bitwidth]) -> Result<Vec<Vec<QuantizedShard>>, QuantError> {
        let needs_codebook = widths.iter().any(|k| !k.is_full());
        let flat_q = needs_codebook.then(|| FlatQuantizer::new(&self.flat, self.fit));
        widths
            .iter()
            .map(|&k| match &flat_q {
                Some(q) if !k.is_full() => self.split_encoding(&q.encode(k)?),
                _ => Ok(self.shards.iter().map(passthrough).collect()),
            })
            .collect()
    }

    pub fn encode(&self, k: Bitwidth) -> Result<Vec<QuantizedShard>, QuantError> {
        Ok(self.encode_all(&[k])?.pop().unwrap_or_default())
    }

    fn split_encoding(&self, enc: &FlatEncoding) -> Result<Vec<QuantizedShard>, QuantError> {
        let per = self.shards[0].dims.weight_count();
        let mut outliers = enc.outliers.iter().peekable();
        let mut out = Vec::with_capacity(self.shards.len());
        for (i, shard) in self.shards.iter().enumerate() {
            let lo = (i * per) as u32;
            let hi = ((i + 1) * per) as u32;
            let mut local = Vec::new();
            while let Some(&&off) = outliers.peek() {
                if off >= hi {
                    break;
                }
                debug_assert!(off >= lo);
                local.push(Outlier {
                    offset: off - lo,
                    value: self.flat[off as usize],
                });
                outliers.next();
            }
            out.push(QuantizedShard {
                id: shard.id,
                bitwidth: enc.bitwidth,
                dims: shard.dims,
                centroids: enc.centroids.clone(),
                outliers: local,
                payload: bitpack::pack(&enc.indexes[i * per..(i + 1) * per], enc.bitwidth.bits()),
            });
        }
        Ok(out)
    }
}

fn passthrough(raw: &RawShard) -> QuantizedShard {
    let mut payload = Vec::with_capacity(raw.weights.len() * 4);
    for w in &raw.weights {
        payload.extend_from_slice(&w.to_le_bytes());
    }
    QuantizedShard {
        id: raw.id,
        bitwidth: Bitwidth::FULL,
        dims: raw.dims,
        centroids: Vec::new(),
        outliers: Vec::new(),
        payload,
    }
}

/// Quantizes a single shard, fitting the Gaussian over that shard alone.
/// Use [`LayerQuantizer`] to share one fit and codebook across a layer.
pub fn quantize_shard(
    raw: &RawShard,
    k: Bitwidth,
    config: QuantConfig,
) -> Result<QuantizedShard, QuantError> {
    if k.is_full() {
        return Ok(passthrough(raw));
    }
    let mut v = LayerQuantizer::new(std::slice::from_ref(raw), config)?.encode(k)?;
    Ok(v.remove(0))
}

/// Reconstructs weights into `out` from the stored parts of a shard.
///
/// Non-outlier weights become `centroids[index]`; outlier offsets get their
/// exact stored values.
pub fn decode_parts(
    k: Bitwidth,
    centroids: &[f32],
    outliers: impl Iterator<Item = Outlier>,
    payload: &[u8],
    out: &mut [f32],
) -> Result<(), QuantError> {
    let n = out.len();
    if k.is_full() {
        if payload.len() != n * 4 {
            return Err(QuantError::CorruptShard("raw payload length".into()));
        }
        for (dst, chunk) in out.iter_mut().zip(payload.chunks_exact(4)) {
            *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        return Ok(());
    }
    if payload.len() != bitpack::packed_len(n, k.bits()) {
        return Err(QuantError::CorruptShard("packed payload length".into()));
    }
    let bits = k.bits();
    if centroids.len() == 1 << bits {
        // every index is in range, so skip the per-weight check
        let mask = (1u64 << bits) - 1;
        let (mut acc, mut avail) = (0u64, 0u32);
        let mut src = payload.iter();
        for dst in out.iter_mut() {
            if avail < bits {
                // pull whole bytes until the next index is complete
                while avail <= 56 {
                    match src.next() {
                        Some(&b) => acc |= (b as u64) << avail,
                        None => break,
                    }
                    avail += 8;
                }
            }
            *dst = centroids[(acc & mask) as usize];
            acc >>= bits;
            avail -= bits;
        }
    } else {
        decode_checked(bits, centroids, payload, out)?;
    }
    let mut prev: Option<u32> = None;
    for o in outliers {
        if o.offset as usize >= n || prev.is_some_and(|p| p >= o.offset) {
            return Err(QuantError::CorruptShard(format!("bad outlier offset {}", o.offset)));
        }
        out[o.offset as usize] = o.value;
        prev = Some(o.offset);
    }
    Ok(())
}

fn decode_checked(bits: u32, centroids: &[f32], payload: &[u8], out: &mut [f32]) -> Result<(), QuantError> {
    let mut bad: Option<u16> = None;
    bitpack::for_each_unpacked(payload, bits, out.len(), |i, idx| match centroids.get(idx as usize) {
        Some(&c) => out[i] = c,
        None => {
            bad.get_or_insert(idx);
        }
    });
    if let Some(idx) = bad {
        return Err(QuantError::CorruptShard(format!(
            "index {idx} >= {} centroids",
            centroids.len()
        )));
    }
    Ok(())
}

pub fn decode_shard(q: &QuantizedShard) -> Result<RawShard, QuantError> {
    q.check()?;
    let mut weights = vec![0f32; q.weight_count()];
    decode_parts(
        q.bitwidth,
        &q.centroids,
        q.outliers.iter().copied(),
        &q.payload,
        &mut weights,
    )?;
    Ok(RawShard {
        id: q.id,
        dims: q.dims,
        weights,
    })
}

pub fn rmse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let se: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    (se / a.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn bw(k: u32) -> Bitwidth {
        Bitwidth::new(k).unwrap()
    }

    fn gaussian(n: usize, std: f64, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, std).unwrap();
        (0..n).map(|_| d.sample(&mut rng) as f32).collect()
    }

    fn small_dims() -> ShardDims {
        ShardDims::new(16, 32, 4)
    }

    fn raw(seed: u64) -> RawShard {
        let dims = small_dims();
        RawShard::new(ShardId::new(0, 0), dims, gaussian(dims.weight_count(), 0.05, seed)).unwrap()
    }

    #[test]
    fn fit_symmetric_pair() {
        let f = fit_gaussian(&[-1.0, 1.0]).unwrap();
        assert_eq!(f.mean, 0.0);
        assert_eq!(f.std, 1.0);
        assert_eq!(f.log_density_threshold, -4.0);
    }

    #[test]
    fn fit_rejects_degenerate_and_short() {
        assert_eq!(
            fit_gaussian(&[0.0; 4]),
            Err(QuantError::DegenerateDistribution)
        );
        assert_eq!(fit_gaussian(&[1.0]), Err(QuantError::TooFewWeights(1)));
        assert_eq!(
            fit_gaussian(&[1.0, f32::NAN]),
            Err(QuantError::NonFinite(1))
        );
    }

    #[test]
    fn fit_recovers_large_sample_moments() {
        let w = gaussian(1_000_000, 0.02, 7);
        let f = fit_gaussian(&w).unwrap();
        assert!(f.mean.abs() < 1e-4, "mean {}", f.mean);
        assert!((f.std / 0.02 - 1.0).abs() < 0.01, "std {}", f.std);
    }

    #[test]
    fn infinite_threshold_disables_outliers() {
        let w = gaussian(10_000, 1.0, 1);
        let f = fit_gaussian(&w).unwrap().with_threshold(f64::NEG_INFINITY);
        let (inl, out) = split_outliers(&w, &f);
        assert!(out.is_empty());
        assert_eq!(inl.len(), w.len());
    }

    #[test]
    fn lone_far_value_is_outlier() {
        // mean = 0.1, std = sqrt(9.99) ~ 3.1607; ln pdf(100) ~ -498, ln pdf(0) ~ -2.07
        let mut w = vec![0.0f32; 999];
        w.push(100.0);
        let f = fit_gaussian(&w).unwrap();
        assert!((f.mean - 0.1).abs() < 1e-9);
        assert!((f.std - 9.99f64.sqrt()).abs() < 1e-9);
        let (inl, out) = split_outliers(&w, &f);
        assert_eq!(out, vec![999]);
        assert_eq!(inl.len(), 999);
    }

    #[test]
    fn pure_gaussian_outlier_fraction_matches_tail_mass() {
        // sigma = 0.08: ln pdf < -4  <=>  |z| > sqrt(2 * (3.0811 - ln 0.08)) = 3.3493,
        // two-sided tail mass 2 * (1 - Phi(3.3493)) = 8.10e-4
        let w = gaussian(2_000_000, 0.08, 11);
        let f = fit_gaussian(&w).unwrap();
        let (_, out) = split_outliers(&w, &f);
        let frac = out.len() as f64 / w.len() as f64;
        assert!((0.0005..=0.005).contains(&frac), "fraction {frac}");
        assert!((frac - 8.10e-4).abs() < 1.0e-4, "fraction {frac}");
    }

    #[test]
    fn one_bit_hand_example() {
        let w: Vec<f32> = (1..=8).map(|v| v as f32).collect();
        let f = fit_gaussian(&w).unwrap();
        let enc = FlatQuantizer::new(&w, f).encode(bw(1)).unwrap();
        assert!(enc.outliers.is_empty());
        assert_eq!(enc.centroids, vec![2.5, 6.5]);
        assert_eq!(enc.indexes, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(enc.cluster_sizes, vec![4, 4]);
    }

    #[test]
    fn remainder_goes_to_first_clusters() {
        assert_eq!(equal_population_sizes(10, 4), vec![3, 3, 2, 2]);
        assert_eq!(equal_population_sizes(8, 8), vec![1; 8]);
    }

    #[test]
    fn ties_are_broken_by_offset() {
        // equal values straddle a cluster boundary; lower offsets go first
        let w = [1.0f32, 1.0, 1.0, 0.0, 2.0, 2.0];
        let f = fit_gaussian(&w).unwrap().with_threshold(f64::NEG_INFINITY);
        let enc = FlatQuantizer::new(&w, f).encode(bw(1)).unwrap();
        // sorted: 0.0@3, 1.0@0, 1.0@1 | 1.0@2, 2.0@4, 2.0@5
        assert_eq!(enc.indexes, vec![0, 0, 1, 0, 1, 1]);
        assert_eq!(enc.centroids, vec![2.0 / 3.0, 5.0 / 3.0]);
    }

    #[test]
    fn insufficient_mass() {
        let w = [1.0f32, 2.0, 3.0];
        let f = fit_gaussian(&w).unwrap();
        assert_eq!(
            FlatQuantizer::new(&w, f).encode(bw(2)),
            Err(QuantError::InsufficientMass {
                inliers: 3,
                clusters: 4
            })
        );
    }

    #[test]
    fn full_width_is_bit_identical() {
        let r = raw(3);
        let q = quantize_shard(&r, Bitwidth::FULL, QuantConfig::default()).unwrap();
        assert!(q.centroids.is_empty() && q.outliers.is_empty());
        let back = decode_shard(&q).unwrap();
        let a: Vec<u32> = r.weights.iter().map(|w| w.to_bits()).collect();
        let b: Vec<u32> = back.weights.iter().map(|w| w.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn outliers_survive_exactly() {
        let mut r = raw(4);
        r.weights[5] = 3.0;
        r.weights[100] = -2.5;
        for k in 2..=6 {
            let q = quantize_shard(&r, bw(k), QuantConfig::default()).unwrap();
            let offs: Vec<u32> = q.outliers.iter().map(|o| o.offset).collect();
            assert!(offs.contains(&5) && offs.contains(&100));
            let back = decode_shard(&q).unwrap();
            for o in &q.outliers {
                assert_eq!(back.weights[o.offset as usize], r.weights[o.offset as usize]);
            }
        }
    }

    #[test]
    fn reconstructed_inliers_stay_inside_their_cluster() {
        let r = raw(5);
        let f = fit_gaussian(&r.weights).unwrap();
        for k in 1..=6 {
            let enc = FlatQuantizer::new(&r.weights, f).encode(bw(k)).unwrap();
            // oracle: recompute bounds from the index assignment
            let mut lo = vec![f32::INFINITY; enc.centroids.len()];
            let mut hi = vec![f32::NEG_INFINITY; enc.centroids.len()];
            let outl: std::collections::HashSet<u32> = enc.outliers.iter().copied().collect();
            for (i, &w) in r.weights.iter().enumerate() {
                if outl.contains(&(i as u32)) {
                    continue;
                }
                let c = enc.indexes[i] as usize;
                lo[c] = lo[c].min(w);
                hi[c] = hi[c].max(w);
            }
            for (c, &cent) in enc.centroids.iter().enumerate() {
                assert!(lo[c] <= cent && cent <= hi[c], "k={k} cluster {c}");
            }
        }
    }

    #[test]
    fn rmse_strictly_decreases_from_two_to_six_bits() {
        let r = raw(6);
        let mut prev = f64::INFINITY;
        for k in 2..=6 {
            let q = quantize_shard(&r, bw(k), QuantConfig::default()).unwrap();
            let e = rmse(&r.weights, &decode_shard(&q).unwrap().weights);
            assert!(e < prev, "k={k}: {e} !< {prev}");
            prev = e;
        }
    }

    #[test]
    fn corrupt_index_detected() {
        let r = raw(8);
        let mut q = quantize_shard(&r, bw(2), QuantConfig::default()).unwrap();
        q.centroids.truncate(3);
        q.payload[0] = 0xff;
        assert!(matches!(decode_shard(&q), Err(QuantError::CorruptShard(_))));
        let mut out = vec![0f32; q.weight_count()];
        let err = decode_parts(q.bitwidth, &q.centroids, std::iter::empty(), &q.payload, &mut out);
        assert!(matches!(err, Err(QuantError::CorruptShard(_))));
    }

    #[test]
    fn layer_shards_share_codebook_and_fit() {
        let dims = small_dims();
        let shards: Vec<RawShard> = (0..4)
            .map(|s| {
                RawShard::new(
                    ShardId::new(2, s),
                    dims,
                    gaussian(dims.weight_count(), 0.05 * (s + 1) as f64, 20 + s as u64),
                )
                .unwrap()
            })
            .collect();
        let lq = LayerQuantizer::new(&shards, QuantConfig::default()).unwrap();
        let all = lq.encode_all(&[bw(2), bw(4), Bitwidth::FULL]).unwrap();
        assert_eq!(all.len(), 3);
        for versions in &all[..2] {
            assert!(versions.windows(2).all(|w| w[0].centroids == w[1].centroids));
        }
        let again = LayerQuantizer::new(&shards, QuantConfig::default()).unwrap();
        assert_eq!(again.fit(), lq.fit());
        assert_eq!(again.encode(bw(4)).unwrap(), all[1]);
    }

    #[test]
    fn two_bit_payload_is_a_sixteenth() {
        let dims = ShardDims::new(768, 3072, 12);
        let r = RawShard::new(ShardId::new(0, 0), dims, gaussian(dims.weight_count(), 0.04, 9)).unwrap();
        let q = quantize_shard(&r, bw(2), QuantConfig::default()).unwrap();
        assert_eq!(q.payload.len() as u64 * 16, dims.raw_bytes());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn clusters_have_equal_population(n in 300usize..3000, k in 1u32..=8, seed in any::<u64>()) {
            let w = gaussian(n, 1.0, seed);
            let f = fit_gaussian(&w).unwrap();
            let q = FlatQuantizer::new(&w, f);
            prop_assume!(q.inlier_count() >= 1 << k);
            let enc = q.encode(bw(k)).unwrap();
            let max = *enc.cluster_sizes.iter().max().unwrap();
            let min = *enc.cluster_sizes.iter().min().unwrap();
            prop_assert!(max - min <= 1);
            prop_assert_eq!(enc.cluster_sizes.iter().sum::<usize>(), q.inlier_count());
            prop_assert!(enc.centroids.windows(2).all(|c| c[0] <= c[1]));
        }

        #[test]
        fn encoding_is_deterministic(seed in any::<u64>(), k in 2u32..=6) {
            let r = raw(seed);
            let a = quantize_shard(&r, bw(k), QuantConfig::default()).unwrap();
            let b = quantize_shard(&r, bw(k), QuantConfig::default()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
