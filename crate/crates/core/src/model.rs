//! Domain types shared by every stage: shard identity, model geometry,
//! hardware profiles, importance maps, plans and the IO budget ledger.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::time::Micros;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid bitwidth {0}: must be 1..=16 or 32")]
    InvalidBitwidth(u32),
    #[error("invalid submodel shape {depth}x{width}")]
    InvalidShape { depth: usize, width: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Index width of a quantization codebook. `32` is uncompressed FP32 and
/// lives in the same value space as the compressed widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Bitwidth(u8);

impl Bitwidth {
    pub const FULL: Bitwidth = Bitwidth(32);

    pub fn new(k: u32) -> Result<Self, ModelError> {
        match k {
            1..=16 | 32 => Ok(Bitwidth(k as u8)),
            _ => Err(ModelError::InvalidBitwidth(k)),
        }
    }

    pub fn bits(self) -> u32 {
        self.0 as u32
    }

    pub fn is_full(self) -> bool {
        self.0 == 32
    }

    /// Number of codebook entries, 0 for the uncompressed width.
    pub fn centroid_count(self) -> usize {
        if self.is_full() {
            0
        } else {
            1usize << self.0
        }
    }
}

impl fmt::Display for Bitwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Serialize for Bitwidth {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.0)
    }
}

impl<'de> Deserialize<'de> for Bitwidth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let k = u32::deserialize(d)?;
        Bitwidth::new(k).map_err(serde::de::Error::custom)
    }
}

/// One vertical slice of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ShardId {
    pub layer: usize,
    pub slice: usize,
}

impl ShardId {
    pub fn new(layer: usize, slice: usize) -> Self {
        ShardId { layer, slice }
    }
}

impl fmt::Display for ShardId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}S{}", self.layer, self.slice)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ShardVersion {
    #[serde(flatten)]
    pub id: ShardId,
    pub bitwidth: Bitwidth,
}

impl ShardVersion {
    pub fn new(layer: usize, slice: usize, bitwidth: Bitwidth) -> Self {
        ShardVersion {
            id: ShardId::new(layer, slice),
            bitwidth,
        }
    }
}

impl fmt::Display for ShardVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.id, self.bitwidth)
    }
}

/// An `depth x width` submodel: the bottom `depth` layers, each restricted to
/// its first `width` slices.
///
/// Ordered by shard count first, then by depth, which is the preference order
/// used by compute planning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubmodelShape {
    pub depth: usize,
    pub width: usize,
}

impl SubmodelShape {
    pub fn new(depth: usize, width: usize) -> Self {
        SubmodelShape { depth, width }
    }

    pub fn shards(&self) -> usize {
        self.depth * self.width
    }

    pub fn contains(&self, id: ShardId) -> bool {
        id.layer < self.depth && id.slice < self.width
    }

    pub fn positions(&self) -> impl Iterator<Item = ShardId> {
        let (depth, width) = (self.depth, self.width);
        (0..depth).flat_map(move |l| (0..width).map(move |s| ShardId::new(l, s)))
    }
}

impl Ord for SubmodelShape {
    fn cmp(&self, other: &Self) -> Ordering {
        self.shards()
            .cmp(&other.shards())
            .then(self.depth.cmp(&other.depth))
    }
}

impl PartialOrd for SubmodelShape {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for SubmodelShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.depth, self.width)
    }
}

/// The six weight matrices of a shard, in on-disk order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixKind {
    Query,
    Key,
    Value,
    Output,
    Ffn1,
    Ffn2,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 6] = [
        MatrixKind::Query,
        MatrixKind::Key,
        MatrixKind::Value,
        MatrixKind::Output,
        MatrixKind::Ffn1,
        MatrixKind::Ffn2,
    ];
}

/// Matrix dimensions of one shard for a layer of hidden size `hidden`, FFN
/// size `ffn`, split into `slices` vertical slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardDims {
    pub hidden: usize,
    pub ffn: usize,
    pub slices: usize,
}

impl ShardDims {
    pub fn new(hidden: usize, ffn: usize, slices: usize) -> Self {
        ShardDims {
            hidden,
            ffn,
            slices,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.slices
    }

    pub fn ffn_slice(&self) -> usize {
        self.ffn / self.slices
    }

    /// `(rows, cols)` of each matrix in [`MatrixKind::ALL`] order.
    pub fn matrices(&self) -> [(usize, usize); 6] {
        let d = self.hidden;
        let dh = self.head_dim();
        let fs = self.ffn_slice();
        [(d, dh), (d, dh), (d, dh), (d, dh), (fs, d), (d, fs)]
    }

    pub fn matrix_len(&self, kind: MatrixKind) -> usize {
        let (r, c) = self.matrices()[kind as usize];
        r * c
    }

    /// Flat offset of the first element of `kind` inside a shard.
    pub fn matrix_offset(&self, kind: MatrixKind) -> usize {
        self.matrices()[..kind as usize]
            .iter()
            .map(|(r, c)| r * c)
            .sum()
    }

    pub fn weight_count(&self) -> usize {
        self.matrices().iter().map(|(r, c)| r * c).sum()
    }

    pub fn raw_bytes(&self) -> u64 {
        self.weight_count() as u64 * 4
    }
}

/// Per-layer parameters that are not sharded (layernorm, biases). Counted in
/// f32 elements.
pub fn layer_misc_len(hidden: usize, ffn: usize) -> usize {
    // q/k/v/o biases, ffn1 bias, ffn2 bias, two layernorms (gamma+beta)
    4 * hidden + ffn + hidden + 4 * hidden
}

/// The `N x M x K` shard universe stored under `shard_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub n_layers: usize,
    pub n_slices: usize,
    pub bitwidths: Vec<Bitwidth>,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub task_id: String,
    /// Relative paths resolve against the directory holding the manifest.
    pub shard_dir: PathBuf,
    pub layer_misc_bytes: u64,
}

impl ModelManifest {
    pub fn dims(&self) -> ShardDims {
        ShardDims::new(self.hidden_dim, self.ffn_dim, self.n_slices)
    }

    pub fn compressed_bitwidths(&self) -> Vec<Bitwidth> {
        self.bitwidths.iter().copied().filter(|b| !b.is_full()).collect()
    }

    pub fn layer_dir(&self, layer: usize) -> PathBuf {
        self.shard_dir.join(layer_dir_name(layer))
    }

    pub fn shard_path(&self, v: ShardVersion) -> PathBuf {
        self.shard_dir.join(shard_relative_path(v))
    }

    pub fn misc_path(&self, layer: usize) -> PathBuf {
        self.layer_dir(layer).join("misc.bin")
    }

    pub fn shard_ids(&self) -> impl Iterator<Item = ShardId> + '_ {
        SubmodelShape::new(self.n_layers, self.n_slices).positions()
    }

    pub fn full_shape(&self) -> SubmodelShape {
        SubmodelShape::new(self.n_layers, self.n_slices)
    }

    /// Loads `manifest.json` from a file or a shard directory, resolving a
    /// relative `shard_dir` against the manifest's location.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let bytes = fs::read(&file).map_err(|source| ModelError::Io {
            path: file.clone(),
            source,
        })?;
        let mut m: ModelManifest =
            serde_json::from_slice(&bytes).map_err(|source| ModelError::Json {
                path: file.clone(),
                source,
            })?;
        if m.shard_dir.is_relative() {
            let base = file.parent().unwrap_or_else(|| Path::new("."));
            m.shard_dir = base.join(&m.shard_dir);
        }
        Ok(m)
    }

    /// Geometry checks that need no filesystem access.
    pub fn geometry_violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.n_layers == 0 || self.n_slices == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 {
            out.push(Violation::ZeroDimension);
            return out;
        }
        if self.hidden_dim % self.n_slices != 0 {
            out.push(Violation::NonIntegralHeadSize {
                hidden_dim: self.hidden_dim,
                n_slices: self.n_slices,
            });
        }
        if self.ffn_dim % self.n_slices != 0 {
            out.push(Violation::NonIntegralFfnSlice {
                ffn_dim: self.ffn_dim,
                n_slices: self.n_slices,
            });
        }
        if self.bitwidths.is_empty() {
            out.push(Violation::NoBitwidths);
        }
        if self.bitwidths.windows(2).any(|w| w[0] >= w[1]) {
            out.push(Violation::UnsortedBitwidths);
        }
        if self.layers_exceed_header() {
            out.push(Violation::TooManyShards);
        }
        out
    }

    fn layers_exceed_header(&self) -> bool {
        self.n_layers > u16::MAX as usize || self.n_slices > u16::MAX as usize
    }
}

pub fn layer_dir_name(layer: usize) -> String {
    format!("layer{layer:02}")
}

/// `layer{L:02}/s{S:02}_k{K:02}.shard`
pub fn shard_relative_path(v: ShardVersion) -> PathBuf {
    PathBuf::from(layer_dir_name(v.id.layer)).join(format!(
        "s{:02}_k{:02}.shard",
        v.id.slice,
        v.bitwidth.bits()
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    ZeroDimension,
    NonIntegralHeadSize { hidden_dim: usize, n_slices: usize },
    NonIntegralFfnSlice { ffn_dim: usize, n_slices: usize },
    NoBitwidths,
    UnsortedBitwidths,
    TooManyShards,
    MissingShard(usize, usize, u32),
    MalformedShard { path: PathBuf, reason: String },
    MissingLayerMisc(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroDimension => write!(f, "a model dimension is zero"),
            Violation::NonIntegralHeadSize {
                hidden_dim,
                n_slices,
            } => write!(f, "hidden_dim {hidden_dim} is not divisible by n_slices {n_slices}"),
            Violation::NonIntegralFfnSlice { ffn_dim, n_slices } => {
                write!(f, "ffn_dim {ffn_dim} is not divisible by n_slices {n_slices}")
            }
            Violation::NoBitwidths => write!(f, "bitwidth set is empty"),
            Violation::UnsortedBitwidths => write!(f, "bitwidths are not strictly ascending"),
            Violation::TooManyShards => write!(f, "layer or slice count exceeds header range"),
            Violation::MissingShard(l, s, k) => {
                write!(f, "missing shard layer {l} slice {s} k={k}")
            }
            Violation::MalformedShard { path, reason } => {
                write!(f, "{}: {reason}", path.display())
            }
            Violation::MissingLayerMisc(l) => write!(f, "missing misc parameters for layer {l}"),
        }
    }
}

/// Validates geometry and checks that every `(layer, slice, k)` resolves to a
/// shard file whose header agrees with the manifest.
///
/// An unreadable `shard_dir` is an IO error, not a violation.
pub fn validate_manifest(manifest: &ModelManifest) -> io::Result<Vec<Violation>> {
    let mut out = manifest.geometry_violations();
    // surfaces permission / missing-root problems as IO errors
    fs::read_dir(&manifest.shard_dir)?;
    if !out.is_empty() {
        return Ok(out);
    }
    let dims = manifest.dims();
    for id in manifest.shard_ids() {
        for &k in &manifest.bitwidths {
            let v = ShardVersion { id, bitwidth: k };
            let path = manifest.shard_path(v);
            match crate::store::read_header_file(&path) {
                Ok(h) => {
                    if let Err(reason) = h.check_against(v, &dims) {
                        out.push(Violation::MalformedShard { path, reason });
                    }
                }
                Err(crate::store::StoreError::Io { source, .. })
                    if source.kind() == io::ErrorKind::NotFound =>
                {
                    out.push(Violation::MissingShard(id.layer, id.slice, k.bits()));
                }
                Err(e) => out.push(Violation::MalformedShard {
                    path,
                    reason: e.to_string(),
                }),
            }
        }
    }
    for layer in 0..manifest.n_layers {
        if manifest.layer_misc_bytes > 0 && !manifest.misc_path(layer).is_file() {
            out.push(Violation::MissingLayerMisc(layer));
        }
    }
    Ok(out)
}

/// Key of a compute-delay measurement.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ComputeKey {
    pub input_len: usize,
    pub width: usize,
    pub freq: String,
}

pub const DEFAULT_FREQ: &str = "peak";

/// Measured `T_io(k)` and `T_comp(l, m, freq)` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    /// Mean time to load one shard at each bitwidth.
    pub io_delay: BTreeMap<Bitwidth, Micros>,
    /// Mean time to decompress and compute one layer.
    #[serde(with = "compute_table")]
    pub compute_delay: BTreeMap<ComputeKey, Micros>,
    pub freq_tags: Vec<String>,
    /// On-disk bytes of one shard at each bitwidth.
    #[serde(default)]
    pub shard_bytes: BTreeMap<Bitwidth, u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub io_samples: BTreeMap<Bitwidth, Vec<Micros>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl HardwareProfile {
    pub fn io(&self, k: Bitwidth) -> Option<Micros> {
        self.io_delay.get(&k).copied()
    }

    pub fn compute(&self, input_len: usize, width: usize, freq: &str) -> Option<Micros> {
        self.compute_delay
            .get(&ComputeKey {
                input_len,
                width,
                freq: freq.to_string(),
            })
            .copied()
    }

    pub fn set_compute(&mut self, input_len: usize, width: usize, freq: &str, d: Micros) {
        if !self.freq_tags.iter().any(|f| f == freq) {
            self.freq_tags.push(freq.to_string());
        }
        self.compute_delay.insert(
            ComputeKey {
                input_len,
                width,
                freq: freq.to_string(),
            },
            d,
        );
    }

    /// Non-fatal invariant checks; noisy disks can produce non-monotone IO.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let compressed: Vec<_> = self.io_delay.iter().filter(|(k, _)| !k.is_full()).collect();
        for w in compressed.windows(2) {
            if w[0].1 >= w[1].1 {
                out.push(format!(
                    "io_delay not increasing: k={} {} >= k={} {}",
                    w[0].0, w[0].1, w[1].0, w[1].1
                ));
            }
        }
        if let (Some(full), Some((k, top))) = (self.io(Bitwidth::FULL), compressed.last()) {
            if full <= **top {
                out.push(format!("io_delay(32) {full} <= io_delay({k}) {top}"));
            }
        }
        let mut prev: Option<(&ComputeKey, Micros)> = None;
        for (key, &d) in &self.compute_delay {
            if let Some((pk, pd)) = prev {
                if pk.input_len == key.input_len && pk.freq == key.freq && d < pd {
                    out.push(format!(
                        "compute_delay decreases from m={} to m={} (l={}, {})",
                        pk.width, key.width, key.input_len, key.freq
                    ));
                }
            }
            prev = Some((key, d));
        }
        out
    }
}

mod compute_table {
    use super::{ComputeKey, Micros};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        input_len: usize,
        width: usize,
        freq: String,
        delay_ms: Micros,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<ComputeKey, Micros>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|(k, &d)| Entry {
                input_len: k.input_len,
                width: k.width,
                freq: k.freq.clone(),
                delay_ms: d,
            })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<ComputeKey, Micros>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        let mut map = BTreeMap::new();
        for e in entries {
            let key = ComputeKey {
                input_len: e.input_len,
                width: e.width,
                freq: e.freq,
            };
            if map.insert(key, e.delay_ms).is_some() {
                return Err(serde::de::Error::custom("duplicate compute_delay entry"));
            }
        }
        Ok(map)
    }
}

/// Per-shard importance scores from the ablation study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    #[serde(with = "score_list")]
    pub scores: BTreeMap<ShardId, f64>,
    pub baseline_metric: f64,
    pub metric_name: String,
    #[serde(default)]
    pub evaluator_id: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ImportanceMap {
    pub fn uniform(n_layers: usize, n_slices: usize) -> Self {
        ImportanceMap {
            scores: SubmodelShape::new(n_layers, n_slices)
                .positions()
                .map(|id| (id, 0.0))
                .collect(),
            baseline_metric: 0.0,
            metric_name: "none".into(),
            evaluator_id: "uniform".into(),
            seed: None,
        }
    }

    pub fn score(&self, id: ShardId) -> Option<f64> {
        self.scores.get(&id).copied()
    }

    /// Shards by descending score; ties by ascending `(layer, slice)`.
    pub fn ranking(&self) -> Vec<ShardId> {
        let mut ids: Vec<(ShardId, f64)> = self.scores.iter().map(|(&i, &s)| (i, s)).collect();
        ids.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ids.into_iter().map(|(i, _)| i).collect()
    }

    /// Returns the shards of `shape` that have no score.
    pub fn missing_in(&self, shape: SubmodelShape) -> Vec<ShardId> {
        shape
            .positions()
            .filter(|id| !self.scores.contains_key(id))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.scores.values().all(|s| s.is_finite()) && self.baseline_metric.is_finite()
    }
}

mod score_list {
    use super::ShardId;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        layer: usize,
        slice: usize,
        score: f64,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<ShardId, f64>, s: S) -> Result<S::Ok, S::Error> {
        map.iter()
            .map(|(id, &score)| Entry {
                layer: id.layer,
                slice: id.slice,
                score,
            })
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<ShardId, f64>, D::Error> {
        let mut map = BTreeMap::new();
        for e in Vec::<Entry>::deserialize(d)? {
            if map.insert(ShardId::new(e.layer, e.slice), e.score).is_some() {
                return Err(serde::de::Error::custom("duplicate shard score"));
            }
        }
        Ok(map)
    }
}

/// A dense `depth x width` grid of bitwidths, row-major by layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitwidthGrid {
    depth: usize,
    width: usize,
    cells: Vec<Bitwidth>,
}

impl BitwidthGrid {
    pub fn filled(shape: SubmodelShape, k: Bitwidth) -> Self {
        BitwidthGrid {
            depth: shape.depth,
            width: shape.width,
            cells: vec![k; shape.shards()],
        }
    }

    pub fn shape(&self) -> SubmodelShape {
        SubmodelShape::new(self.depth, self.width)
    }

    pub fn get(&self, id: ShardId) -> Bitwidth {
        assert!(id.layer < self.depth && id.slice < self.width, "{id} outside grid");
        self.cells[id.layer * self.width + id.slice]
    }

    pub fn try_get(&self, id: ShardId) -> Option<Bitwidth> {
        (id.layer < self.depth && id.slice < self.width)
            .then(|| self.cells[id.layer * self.width + id.slice])
    }

    pub fn set(&mut self, id: ShardId, k: Bitwidth) {
        assert!(id.layer < self.depth && id.slice < self.width, "{id} outside grid");
        self.cells[id.layer * self.width + id.slice] = k;
    }

    pub fn row(&self, layer: usize) -> &[Bitwidth] {
        &self.cells[layer * self.width..(layer + 1) * self.width]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ShardId, Bitwidth)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .map(move |(i, &k)| (ShardId::new(i / self.width, i % self.width), k))
    }
}

impl Serialize for BitwidthGrid {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[Bitwidth]> = (0..self.depth).map(|l| self.row(l)).collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for BitwidthGrid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<Bitwidth>>::deserialize(d)?;
        let depth = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(serde::de::Error::custom("ragged bitwidth grid"));
        }
        Ok(BitwidthGrid {
            depth,
            width,
            cells: rows.into_iter().flatten().collect(),
        })
    }
}

/// Accumulated IO budgets, one per submodel layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AibLedger {
    pub budgets: Vec<Micros>,
}

impl AibLedger {
    pub fn zeroed(depth: usize) -> Self {
        AibLedger {
            budgets: vec![Micros::ZERO; depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.budgets.len()
    }

    /// Adds `amount` to `layer` and every later layer.
    pub fn credit(&mut self, layer: usize, amount: Micros) {
        for b in &mut self.budgets[layer..] {
            *b += amount;
        }
    }

    /// Charges `cost` to `layer` and every later layer. Earlier layers have
    /// already executed and are untouched.
    pub fn debit(&mut self, layer: usize, cost: Micros) {
        assert!(layer < self.budgets.len(), "debit past ledger depth");
        for b in &mut self.budgets[layer..] {
            *b -= cost;
        }
    }

    pub fn debited(&self, layer: usize, cost: Micros) -> AibLedger {
        let mut next = self.clone();
        next.debit(layer, cost);
        next
    }

    pub fn is_valid(&self) -> bool {
        self.budgets.iter().all(|b| b.0 >= 0)
    }

    pub fn first_violation(&self) -> Option<(usize, Micros)> {
        self.budgets
            .iter()
            .enumerate()
            .find(|(_, b)| b.is_negative())
            .map(|(i, &b)| (i, b))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance_sha256: Option<String>,
}

/// Submodel shape, per-position bitwidths, preload hits and the final budget
/// ledger for one target latency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub shape: SubmodelShape,
    pub assignment: BitwidthGrid,
    pub preloaded: BTreeSet<ShardVersion>,
    pub ledger: AibLedger,
    #[serde(rename = "target_latency_ms")]
    pub target_latency: Micros,
    pub input_len: usize,
    pub freq: String,
    pub preload_budget_bytes: u64,
    pub degraded: bool,
    #[serde(default)]
    pub provenance: Provenance,
}

impl ExecutionPlan {
    pub fn bitwidth(&self, id: ShardId) -> Bitwidth {
        self.assignment.get(id)
    }

    pub fn is_preloaded(&self, id: ShardId) -> bool {
        self.preloaded.contains(&ShardVersion {
            id,
            bitwidth: self.assignment.get(id),
        })
    }

    /// Every position at `k`, nothing preloaded, ledger left zeroed.
    pub fn uniform(shape: SubmodelShape, k: Bitwidth, input_len: usize, freq: &str) -> Self {
        ExecutionPlan {
            shape,
            assignment: BitwidthGrid::filled(shape, k),
            preloaded: BTreeSet::new(),
            ledger: AibLedger::zeroed(shape.depth),
            target_latency: Micros::ZERO,
            input_len,
            freq: freq.to_string(),
            preload_budget_bytes: 0,
            degraded: false,
            provenance: Provenance::default(),
        }
    }

    /// Every version `layer` executes, ascending by slice.
    pub fn layer_versions(&self, layer: usize) -> Vec<ShardVersion> {
        (0..self.shape.width)
            .map(|s| {
                let id = ShardId::new(layer, s);
                ShardVersion {
                    id,
                    bitwidth: self.assignment.get(id),
                }
            })
            .collect()
    }

    /// Versions of `layer` that must be fetched from disk.
    pub fn layer_loads(&self, layer: usize) -> Vec<ShardVersion> {
        (0..self.shape.width)
            .map(|s| ShardId::new(layer, s))
            .filter(|&id| !self.is_preloaded(id))
            .map(|id| ShardVersion {
                id,
                bitwidth: self.assignment.get(id),
            })
            .collect()
    }

    /// Checks the structural invariants tying shape, assignment, preload set
    /// and ledger together.
    pub fn check(&self) -> Result<(), String> {
        if self.assignment.shape() != self.shape {
            return Err(format!(
                "assignment is {} but shape is {}",
                self.assignment.shape(),
                self.shape
            ));
        }
        if self.ledger.depth() != self.shape.depth {
            return Err("ledger depth differs from shape depth".into());
        }
        for v in &self.preloaded {
            if !self.shape.contains(v.id) {
                return Err(format!("preloaded {v} lies outside {}", self.shape));
            }
            if self.assignment.get(v.id) != v.bitwidth {
                return Err(format!("preloaded {v} disagrees with assignment"));
            }
        }
        if !self.degraded && !self.ledger.is_valid() {
            return Err("ledger has a negative budget on a non-degraded plan".into());
        }
        Ok(())
    }
}

/// Writes pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ModelError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| ModelError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|source| ModelError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
    }
    fs::write(path, bytes).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| ModelError::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(hidden: usize, slices: usize) -> ModelManifest {
        ModelManifest {
            n_layers: 12,
            n_slices: slices,
            bitwidths: [2, 3, 4, 5, 6, 32]
                .iter()
                .map(|&k| Bitwidth::new(k).unwrap())
                .collect(),
            hidden_dim: hidden,
            ffn_dim: 4 * hidden,
            task_id: "t".into(),
            shard_dir: PathBuf::from("."),
            layer_misc_bytes: 0,
        }
    }

    #[test]
    fn bitwidth_range() {
        assert!(Bitwidth::new(0).is_err());
        assert!(Bitwidth::new(1).is_ok());
        assert!(Bitwidth::new(16).is_ok());
        assert!(Bitwidth::new(17).is_err());
        assert!(Bitwidth::new(32).unwrap().is_full());
        assert_eq!(Bitwidth::new(2).unwrap().centroid_count(), 4);
        assert_eq!(Bitwidth::FULL.centroid_count(), 0);
    }

    #[test]
    fn head_size_must_be_integral() {
        let v = manifest(768, 7).geometry_violations();
        assert!(v.contains(&Violation::NonIntegralHeadSize {
            hidden_dim: 768,
            n_slices: 7
        }));
        assert!(manifest(768, 12).geometry_violations().is_empty());
    }

    #[test]
    fn unsorted_bitwidths_flagged() {
        let mut m = manifest(768, 12);
        m.bitwidths.swap(0, 1);
        assert!(m.geometry_violations().contains(&Violation::UnsortedBitwidths));
    }

    #[test]
    fn shard_dims_follow_layer_composition() {
        let d = ShardDims::new(768, 3072, 12);
        assert_eq!(
            d.matrices(),
            [(768, 64), (768, 64), (768, 64), (768, 64), (256, 768), (768, 256)]
        );
        assert_eq!(d.weight_count(), 4 * 768 * 64 + 2 * 256 * 768);
        assert_eq!(d.matrix_offset(MatrixKind::Ffn1), 4 * 768 * 64);
    }

    #[test]
    fn shard_path_layout() {
        let v = ShardVersion::new(3, 7, Bitwidth::new(4).unwrap());
        assert_eq!(shard_relative_path(v), PathBuf::from("layer03/s07_k04.shard"));
    }

    #[test]
    fn shape_order_is_total_over_small_grid() {
        let shapes: Vec<SubmodelShape> = (1..=12)
            .flat_map(|n| (1..=12).map(move |m| SubmodelShape::new(n, m)))
            .collect();
        for a in &shapes {
            for b in &shapes {
                // antisymmetry
                if a <= b && b <= a {
                    assert_eq!(a, b);
                }
                for c in &shapes {
                    if a <= b && b <= c {
                        assert!(a <= c);
                    }
                }
            }
        }
        assert!(SubmodelShape::new(12, 5) > SubmodelShape::new(10, 6));
        assert!(SubmodelShape::new(6, 10) > SubmodelShape::new(5, 12));
    }

    #[test]
    fn ledger_debit_touches_later_layers_only() {
        let mut l = AibLedger {
            budgets: vec![Micros::from_ms(600), Micros::from_ms(1600)],
        };
        l.debit(0, Micros::from_ms(600));
        assert_eq!(l.budgets, vec![Micros::ZERO, Micros::from_ms(1000)]);
        l.debit(1, Micros::from_ms(1100));
        assert_eq!(l.budgets[0], Micros::ZERO);
        assert_eq!(l.budgets[1], Micros::from_ms(-100));
        assert!(!l.is_valid());
        assert_eq!(l.first_violation(), Some((1, Micros::from_ms(-100))));
        assert!(AibLedger::zeroed(2).is_valid());
    }

    #[test]
    fn ranking_breaks_ties_by_position() {
        let mut imp = ImportanceMap::uniform(2, 2);
        imp.scores.insert(ShardId::new(1, 1), 0.5);
        assert_eq!(
            imp.ranking(),
            vec![
                ShardId::new(1, 1),
                ShardId::new(0, 0),
                ShardId::new(0, 1),
                ShardId::new(1, 0)
            ]
        );
    }

    #[test]
    fn grid_json_is_nested_rows() {
        let mut g = BitwidthGrid::filled(SubmodelShape::new(2, 3), Bitwidth::new(2).unwrap());
        g.set(ShardId::new(1, 2), Bitwidth::FULL);
        let s = serde_json::to_string(&g).unwrap();
        assert_eq!(s, "[[2,2,2],[2,2,32]]");
        assert_eq!(serde_json::from_str::<BitwidthGrid>(&s).unwrap(), g);
    }
}
