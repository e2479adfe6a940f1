//! On-disk shard format and the per-layer loader.
//!
//! One file per shard version at `layer{L:02}/s{S:02}_k{K:02}.shard`, so a
//! layer's files share a directory. All integers are little-endian.
//!
//! ```text
//! offset size field
//!      0    4 magic "STI1"
//!      4    2 format version (1)
//!      6    2 layer
//!      8    2 slice
//!     10    2 bitwidth
//!     12   48 six (rows u32, cols u32) pairs: Q, K, V, O, FFN1, FFN2
//!     60    4 centroid_count (2^k, or 0 at k=32)
//!     64    4 outlier_count
//!     68    8 payload_len (ceil(weights*k/8), or weights*4 at k=32)
//!     76    8 weight_count
//!     84    8 FNV-1a 64 checksum of everything after the header
//!     92      centroids   f32 x centroid_count
//!             outliers    (u32 offset, f32 value) x outlier_count
//!             payload
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{shard_relative_path, Bitwidth, ModelManifest, ShardDims, ShardVersion};
use crate::quant::{decode_parts, Outlier, QuantError, QuantizedShard};
use crate::time::Micros;

pub const MAGIC: [u8; 4] = *b"STI1";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 92;
/// Fixed-width scalar fields of the header, excluding the dimension table.
pub const HEADER_SCALARS_LEN: usize = 44;
pub const DIMS_TABLE_LEN: usize = 48;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("missing shard {version} at {path}")]
    MissingShard { version: ShardVersion, path: PathBuf },
    #[error("corrupt shard {path}: {reason}")]
    CorruptShard { path: PathBuf, reason: String },
    #[error("invalid load request: {0}")]
    InvalidRequest(String),
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn corrupt(path: &Path, reason: impl Into<String>) -> Self {
        StoreError::CorruptShard {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardFileHeader {
    pub version: u16,
    pub layer: u16,
    pub slice: u16,
    pub bitwidth: u16,
    pub dims: [(u32, u32); 6],
    pub centroid_count: u32,
    pub outlier_count: u32,
    pub payload_len: u64,
    pub weight_count: u64,
    pub checksum: u64,
}

impl ShardFileHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..8].copy_from_slice(&self.layer.to_le_bytes());
        b[8..10].copy_from_slice(&self.slice.to_le_bytes());
        b[10..12].copy_from_slice(&self.bitwidth.to_le_bytes());
        for (i, (r, c)) in self.dims.iter().enumerate() {
            let at = 12 + i * 8;
            b[at..at + 4].copy_from_slice(&r.to_le_bytes());
            b[at + 4..at + 8].copy_from_slice(&c.to_le_bytes());
        }
        b[60..64].copy_from_slice(&self.centroid_count.to_le_bytes());
        b[64..68].copy_from_slice(&self.outlier_count.to_le_bytes());
        b[68..76].copy_from_slice(&self.payload_len.to_le_bytes());
        b[76..84].copy_from_slice(&self.weight_count.to_le_bytes());
        b[84..92].copy_from_slice(&self.checksum.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self, String> {
        if b.len() < HEADER_LEN {
            return Err(format!("header truncated at {} bytes", b.len()));
        }
        if b[0..4] != MAGIC {
            return Err("bad magic".into());
        }
        let u16_at = |at: usize| u16::from_le_bytes([b[at], b[at + 1]]);
        let u32_at = |at: usize| u32::from_le_bytes(b[at..at + 4].try_into().unwrap());
        let u64_at = |at: usize| u64::from_le_bytes(b[at..at + 8].try_into().unwrap());
        let version = u16_at(4);
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let mut dims = [(0u32, 0u32); 6];
        for (i, d) in dims.iter_mut().enumerate() {
            *d = (u32_at(12 + i * 8), u32_at(16 + i * 8));
        }
        let h = ShardFileHeader {
            version,
            layer: u16_at(6),
            slice: u16_at(8),
            bitwidth: u16_at(10),
            dims,
            centroid_count: u32_at(60),
            outlier_count: u32_at(64),
            payload_len: u64_at(68),
            weight_count: u64_at(76),
            checksum: u64_at(84),
        };
        h.self_consistent()?;
        Ok(h)
    }

    fn self_consistent(&self) -> Result<(), String> {
        let k = Bitwidth::new(self.bitwidth as u32).map_err(|e| e.to_string())?;
        let weights: u64 = self.dims.iter().map(|&(r, c)| r as u64 * c as u64).sum();
        if weights != self.weight_count {
            return Err(format!(
                "weight_count {} disagrees with dims ({weights})",
                self.weight_count
            ));
        }
        if self.centroid_count as usize != k.centroid_count() {
            return Err(format!(
                "centroid_count {} invalid for k={k}",
                self.centroid_count
            ));
        }
        let expect = payload_len(k, weights as usize) as u64;
        if self.payload_len != expect {
            return Err(format!(
                "payload_len {} expected {expect}",
                self.payload_len
            ));
        }
        if k.is_full() && self.outlier_count != 0 {
            return Err("full-width shard with outliers".into());
        }
        if self.outlier_count as u64 > weights {
            return Err("more outliers than weights".into());
        }
        Ok(())
    }

    pub fn bitwidth(&self) -> Bitwidth {
        // validated in decode
        Bitwidth::new(self.bitwidth as u32).expect("validated bitwidth")
    }

    pub fn shard_version(&self) -> ShardVersion {
        ShardVersion::new(self.layer as usize, self.slice as usize, self.bitwidth())
    }

    pub fn shard_dims(&self) -> Option<ShardDims> {
        dims_from_table(&self.dims)
    }

    pub fn body_len(&self) -> u64 {
        4 * self.centroid_count as u64 + 8 * self.outlier_count as u64 + self.payload_len
    }

    pub fn file_len(&self) -> u64 {
        HEADER_LEN as u64 + self.body_len()
    }

    /// Checks identity and geometry against what the manifest expects.
    pub fn check_against(&self, v: ShardVersion, dims: &ShardDims) -> Result<(), String> {
        if self.shard_version() != v {
            return Err(format!("header says {}, expected {v}", self.shard_version()));
        }
        if self.shard_dims().as_ref() != Some(dims) {
            return Err("dimension table disagrees with manifest".into());
        }
        Ok(())
    }
}

fn dims_table(d: &ShardDims) -> [(u32, u32); 6] {
    d.matrices().map(|(r, c)| (r as u32, c as u32))
}

fn dims_from_table(t: &[(u32, u32); 6]) -> Option<ShardDims> {
    let hidden = t[0].0 as usize;
    let head = t[0].1 as usize;
    let ffn_slice = t[4].0 as usize;
    if head == 0 || hidden % head != 0 {
        return None;
    }
    let slices = hidden / head;
    let d = ShardDims::new(hidden, ffn_slice * slices, slices);
    (dims_table(&d) == *t).then_some(d)
}

fn payload_len(k: Bitwidth, weights: usize) -> usize {
    if k.is_full() {
        weights * 4
    } else {
        crate::bitpack::packed_len(weights, k.bits())
    }
}

/// Closed-form file size of a shard version.
pub fn shard_file_len(k: Bitwidth, dims: &ShardDims, outliers: usize) -> u64 {
    (HEADER_SCALARS_LEN + DIMS_TABLE_LEN) as u64
        + 4 * k.centroid_count() as u64
        + 8 * outliers as u64
        + payload_len(k, dims.weight_count()) as u64
}

fn fnv1a(chunks: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for c in chunks {
        for &b in *c {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Serializes a shard into its file bytes.
pub fn encode_shard(q: &QuantizedShard) -> Result<Vec<u8>, QuantError> {
    q.check()?;
    if q.id.layer > u16::MAX as usize || q.id.slice > u16::MAX as usize {
        return Err(QuantError::ShapeMismatch("layer/slice exceed u16".into()));
    }
    let mut body = Vec::with_capacity(4 * q.centroids.len() + 8 * q.outliers.len() + q.payload.len());
    for c in &q.centroids {
        body.extend_from_slice(&c.to_le_bytes());
    }
    for o in &q.outliers {
        body.extend_from_slice(&o.offset.to_le_bytes());
        body.extend_from_slice(&o.value.to_le_bytes());
    }
    body.extend_from_slice(&q.payload);
    let header = ShardFileHeader {
        version: FORMAT_VERSION,
        layer: q.id.layer as u16,
        slice: q.id.slice as u16,
        bitwidth: q.bitwidth.bits() as u16,
        dims: dims_table(&q.dims),
        centroid_count: q.centroids.len() as u32,
        outlier_count: q.outliers.len() as u32,
        payload_len: q.payload.len() as u64,
        weight_count: q.weight_count() as u64,
        checksum: fnv1a(&[&body]),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Borrowed, validated view over shard file bytes.
#[derive(Clone, Debug)]
pub struct ShardView<'a> {
    pub header: ShardFileHeader,
    pub dims: ShardDims,
    centroids: &'a [u8],
    outliers: &'a [u8],
    payload: &'a [u8],
}

impl<'a> ShardView<'a> {
    pub fn parse(bytes: &'a [u8]) -> Result<Self, String> {
        let view = Self::parse_unverified(bytes)?;
        if fnv1a(&[&bytes[HEADER_LEN..]]) != view.header.checksum {
            return Err("checksum mismatch".into());
        }
        Ok(view)
    }

    /// Like `parse` but skips the checksum. Layout and lengths are still
    /// checked, and decoding rejects out-of-range indices.
    pub fn parse_unverified(bytes: &'a [u8]) -> Result<Self, String> {
        let header = ShardFileHeader::decode(bytes)?;
        let dims = header
            .shard_dims()
            .ok_or_else(|| "dimension table is not a valid shard geometry".to_string())?;
        if bytes.len() as u64 != header.file_len() {
            return Err(format!(
                "file is {} bytes, header implies {}",
                bytes.len(),
                header.file_len()
            ));
        }
        let body = &bytes[HEADER_LEN..];
        let c_end = 4 * header.centroid_count as usize;
        let o_end = c_end + 8 * header.outlier_count as usize;
        Ok(ShardView {
            dims,
            centroids: &body[..c_end],
            outliers: &body[c_end..o_end],
            payload: &body[o_end..],
            header,
        })
    }

    pub fn version(&self) -> ShardVersion {
        self.header.shard_version()
    }

    pub fn centroids(&self) -> Vec<f32> {
        self.centroids
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    pub fn outliers(&self) -> impl Iterator<Item = Outlier> + 'a {
        self.outliers.chunks_exact(8).map(|c| Outlier {
            offset: u32::from_le_bytes(c[0..4].try_into().unwrap()),
            value: f32::from_le_bytes(c[4..8].try_into().unwrap()),
        })
    }

    pub fn payload(&self) -> &'a [u8] {
        self.payload
    }

    /// Decompresses into `out`, which must hold exactly one shard.
    pub fn decode_into(&self, out: &mut [f32]) -> Result<(), QuantError> {
        if out.len() != self.dims.weight_count() {
            return Err(QuantError::ShapeMismatch(format!(
                "output holds {} weights, shard has {}",
                out.len(),
                self.dims.weight_count()
            )));
        }
        decode_parts(
            self.header.bitwidth(),
            &self.centroids(),
            self.outliers(),
            self.payload,
            out,
        )
    }

    pub fn to_quantized(&self) -> QuantizedShard {
        let v = self.version();
        QuantizedShard {
            id: v.id,
            bitwidth: v.bitwidth,
            dims: self.dims,
            centroids: self.centroids(),
            outliers: self.outliers().collect(),
            payload: self.payload.to_vec(),
        }
    }
}

pub fn parse_shard(bytes: &[u8]) -> Result<QuantizedShard, String> {
    ShardView::parse(bytes).map(|v| v.to_quantized())
}

/// Writes `q` under `dir` at its canonical relative path and returns that
/// path. The write goes through a temporary file and a rename.
pub fn write_shard(q: &QuantizedShard, dir: &Path) -> Result<PathBuf, StoreError> {
    let path = dir.join(shard_relative_path(ShardVersion {
        id: q.id,
        bitwidth: q.bitwidth,
    }));
    let bytes = encode_shard(q).map_err(|e| StoreError::corrupt(&path, e.to_string()))?;
    let parent = path.parent().expect("shard path has a layer directory");
    fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
    let tmp = path.with_extension("shard.tmp");
    let mut f = File::create(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| StoreError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, &path).map_err(|e| StoreError::io(&path, e))?;
    Ok(path)
}

pub fn read_shard(path: &Path) -> Result<QuantizedShard, StoreError> {
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    parse_shard(&bytes).map_err(|r| StoreError::corrupt(path, r))
}

/// Reads and validates only the fixed header.
pub fn read_header_file(path: &Path) -> Result<ShardFileHeader, StoreError> {
    let mut f = File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut buf = [0u8; HEADER_LEN];
    f.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => StoreError::corrupt(path, "truncated header"),
        _ => StoreError::io(path, e),
    })?;
    let h = ShardFileHeader::decode(&buf).map_err(|r| StoreError::corrupt(path, r))?;
    let len = f.metadata().map_err(|e| StoreError::io(path, e))?.len();
    if len != h.file_len() {
        return Err(StoreError::corrupt(
            path,
            format!("file is {len} bytes, header implies {}", h.file_len()),
        ));
    }
    Ok(h)
}

/// Shard versions of one layer to fetch as a single IO job.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLoadRequest {
    pub layer: usize,
    pub entries: Vec<(usize, Bitwidth)>,
    /// Slices already resident; never read.
    #[serde(default)]
    pub skip: BTreeSet<usize>,
}

impl LayerLoadRequest {
    pub fn new(layer: usize, entries: Vec<(usize, Bitwidth)>) -> Self {
        LayerLoadRequest {
            layer,
            entries,
            skip: BTreeSet::new(),
        }
    }

    pub fn uniform(layer: usize, slices: impl IntoIterator<Item = usize>, k: Bitwidth) -> Self {
        Self::new(layer, slices.into_iter().map(|s| (s, k)).collect())
    }

    pub fn skipping(mut self, skip: impl IntoIterator<Item = usize>) -> Self {
        self.skip.extend(skip);
        self
    }

    /// Versions that will actually be read, ascending by slice.
    pub fn to_read(&self) -> Vec<ShardVersion> {
        let mut v: Vec<ShardVersion> = self
            .entries
            .iter()
            .filter(|(s, _)| !self.skip.contains(s))
            .map(|&(s, k)| ShardVersion::new(self.layer, s, k))
            .collect();
        v.sort();
        v
    }
}

/// Encoded bytes of one shard version as read from disk.
#[derive(Clone, Debug)]
pub struct EncodedShard {
    pub version: ShardVersion,
    pub bytes: Arc<Vec<u8>>,
}

impl EncodedShard {
    /// The checksum was verified when the shard was read, so it is not
    /// recomputed here.
    pub fn view(&self) -> Result<ShardView<'_>, String> {
        ShardView::parse_unverified(&self.bytes)
    }
}

#[derive(Clone, Debug, Default)]
pub struct LayerLoad {
    /// Ascending slice order.
    pub shards: Vec<EncodedShard>,
    pub bytes_read: u64,
}

/// Read access to a manifest's shard tree.
#[derive(Clone, Debug)]
pub struct ShardStore {
    manifest: ModelManifest,
    throttle: Option<BTreeMap<Bitwidth, Micros>>,
}

impl ShardStore {
    pub fn new(manifest: ModelManifest) -> Self {
        ShardStore {
            manifest,
            throttle: None,
        }
    }

    /// Emulates a slower device: every shard read of bitwidth `k` takes at
    /// least `delays[k]`.
    pub fn with_throttle(mut self, delays: BTreeMap<Bitwidth, Micros>) -> Self {
        self.throttle = Some(delays);
        self
    }

    pub fn throttle(&self) -> Option<&BTreeMap<Bitwidth, Micros>> {
        self.throttle.as_ref()
    }

    pub fn open(path: &Path) -> Result<Self, crate::model::ModelError> {
        ModelManifest::load(path).map(Self::new)
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    pub fn path_of(&self, v: ShardVersion) -> PathBuf {
        self.manifest.shard_path(v)
    }

    fn check_request(&self, req: &LayerLoadRequest) -> Result<(), StoreError> {
        if req.layer >= self.manifest.n_layers {
            return Err(StoreError::InvalidRequest(format!(
                "layer {} outside model of {} layers",
                req.layer, self.manifest.n_layers
            )));
        }
        let mut seen = BTreeSet::new();
        for &(s, k) in &req.entries {
            if s >= self.manifest.n_slices {
                return Err(StoreError::InvalidRequest(format!("slice {s} out of range")));
            }
            if !self.manifest.bitwidths.contains(&k) {
                return Err(StoreError::InvalidRequest(format!("bitwidth {k} not stored")));
            }
            if !seen.insert(s) {
                return Err(StoreError::InvalidRequest(format!("slice {s} requested twice")));
            }
        }
        Ok(())
    }

    /// Reads one shard version, validating its header against the manifest.
    pub fn read_encoded(&self, v: ShardVersion) -> Result<EncodedShard, StoreError> {
        let started = std::time::Instant::now();
        let path = self.path_of(v);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::MissingShard {
                version: v,
                path: path.clone(),
            },
            _ => StoreError::io(&path, e),
        })?;
        let view = ShardView::parse(&bytes).map_err(|r| StoreError::corrupt(&path, r))?;
        view.header
            .check_against(v, &self.manifest.dims())
            .map_err(|r| StoreError::corrupt(&path, r))?;
        if let Some(d) = self.throttle.as_ref().and_then(|t| t.get(&v.bitwidth)) {
            crate::time::sleep_until(started + d.to_duration());
        }
        Ok(EncodedShard {
            version: v,
            bytes: Arc::new(bytes),
        })
    }

    /// One sequential pass over the layer's requested files in ascending path
    /// order, skipping resident slices.
    pub fn read_layer_encoded(&self, req: &LayerLoadRequest) -> Result<LayerLoad, StoreError> {
        self.check_request(req)?;
        let mut load = LayerLoad::default();
        for v in req.to_read() {
            let shard = self.read_encoded(v)?;
            load.bytes_read += shard.bytes.len() as u64;
            load.shards.push(shard);
        }
        Ok(load)
    }

    pub fn read_layer(&self, req: &LayerLoadRequest) -> Result<Vec<QuantizedShard>, StoreError> {
        let load = self.read_layer_encoded(req)?;
        load.shards
            .iter()
            .map(|s| {
                s.view()
                    .map(|v| v.to_quantized())
                    .map_err(|r| StoreError::corrupt(&self.path_of(s.version), r))
            })
            .collect()
    }

    pub fn file_len(&self, v: ShardVersion) -> Result<u64, StoreError> {
        let path = self.path_of(v);
        fs::metadata(&path)
            .map(|m| m.len())
            .map_err(|e| StoreError::io(&path, e))
    }

    /// Loads the resident per-layer parameters (layernorm, biases).
    pub fn read_layer_misc(&self, layer: usize) -> Result<Vec<f32>, StoreError> {
        let path = self.manifest.misc_path(layer);
        let bytes = fs::read(&path).map_err(|e| StoreError::io(&path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(StoreError::corrupt(&path, "misc length not a multiple of 4"));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn write_layer_misc(dir: &Path, layer: usize, values: &[f32]) -> Result<PathBuf, StoreError> {
    let ldir = dir.join(crate::model::layer_dir_name(layer));
    fs::create_dir_all(&ldir).map_err(|e| StoreError::io(&ldir, e))?;
    let path = ldir.join("misc.bin");
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&path, bytes).map_err(|e| StoreError::io(&path, e))?;
    Ok(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CachePolicy {
    /// Evict the files from the page cache before every trial.
    DropBeforeEachTrial,
    /// Leave the page cache alone; later trials may be served from memory.
    Keep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoMeasurement {
    pub samples: Vec<Micros>,
    pub mean: Micros,
    pub min: Micros,
    pub max: Micros,
    pub bytes_per_trial: u64,
    /// True when eviction was requested and the platform honoured the call.
    pub cache_dropped: bool,
    /// True when trials after the first may have hit the page cache.
    pub cache_polluted: bool,
}

/// Asks the kernel to drop cached pages of `path`. Returns false where the
/// platform has no such call or it failed.
#[cfg(target_os = "linux")]
pub fn drop_file_cache(path: &Path) -> bool {
    use std::os::unix::io::AsRawFd;
    let Ok(f) = File::open(path) else {
        return false;
    };
    // SAFETY: fd is valid for the lifetime of `f`.
    let rc = unsafe { libc::posix_fadvise(f.as_raw_fd(), 0, 0, libc::POSIX_FADV_DONTNEED) };
    rc == 0
}

#[cfg(not(target_os = "linux"))]
pub fn drop_file_cache(_path: &Path) -> bool {
    false
}

/// Times `trials` reads of one layer request.
///
/// With [`CachePolicy::DropBeforeEachTrial`] the files are evicted from the
/// page cache via `posix_fadvise(DONTNEED)` before each trial. Where that is
/// unavailable the result is flagged as cache-polluted, meaning the numbers
/// include page cache effects.
pub fn measure_layer_io(
    store: &ShardStore,
    req: &LayerLoadRequest,
    trials: usize,
    policy: CachePolicy,
) -> Result<IoMeasurement, StoreError> {
    assert!(trials >= 1, "at least one trial");
    store.check_request(req)?;
    let paths: Vec<PathBuf> = req.to_read().into_iter().map(|v| store.path_of(v)).collect();
    let mut samples = Vec::with_capacity(trials);
    let mut dropped_all = policy == CachePolicy::DropBeforeEachTrial;
    let mut bytes_per_trial = 0;
    for _ in 0..trials {
        if policy == CachePolicy::DropBeforeEachTrial {
            for p in &paths {
                dropped_all &= drop_file_cache(p);
            }
        }
        let start = Instant::now();
        let mut bytes = 0u64;
        // Same path as the executor's IO worker, including validation and
        // any device throttle.
        for v in req.to_read() {
            bytes += store.read_encoded(v)?.bytes.len() as u64;
        }
        samples.push(Micros::from_duration(start.elapsed()));
        bytes_per_trial = bytes;
    }
    let sum: i64 = samples.iter().map(|s| s.0).sum();
    let cache_polluted = trials > 1 && !paths.is_empty() && !dropped_all;
    Ok(IoMeasurement {
        mean: Micros(sum / trials as i64),
        min: *samples.iter().min().unwrap(),
        max: *samples.iter().max().unwrap(),
        samples,
        bytes_per_trial,
        cache_dropped: dropped_all && !paths.is_empty(),
        cache_polluted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ShardId;
    use crate::quant::{quantize_shard, QuantConfig, RawShard};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn bw(k: u32) -> Bitwidth {
        Bitwidth::new(k).unwrap()
    }

    fn raw(id: ShardId, dims: ShardDims, seed: u64) -> RawShard {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 0.05).unwrap();
        let w = (0..dims.weight_count()).map(|_| n.sample(&mut rng) as f32).collect();
        RawShard::new(id, dims, w).unwrap()
    }

    #[test]
    fn header_is_ninety_two_bytes() {
        assert_eq!(HEADER_SCALARS_LEN + DIMS_TABLE_LEN, HEADER_LEN);
        let dims = ShardDims::new(32, 64, 4);
        let q = quantize_shard(&raw(ShardId::new(1, 2), dims, 1), bw(3), QuantConfig::default()).unwrap();
        let bytes = encode_shard(&q).unwrap();
        assert_eq!(&bytes[0..4], b"STI1");
        assert_eq!(
            bytes.len() as u64,
            shard_file_len(bw(3), &dims, q.outliers.len())
        );
    }

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let dims = ShardDims::new(32, 64, 4);
        for k in [2, 5, 32] {
            let q = quantize_shard(&raw(ShardId::new(0, 3), dims, 2), bw(k), QuantConfig::default()).unwrap();
            let p = write_shard(&q, dir.path()).unwrap();
            assert!(p.ends_with(format!("layer00/s03_k{k:02}.shard")));
            assert_eq!(read_shard(&p).unwrap(), q);
        }
    }

    #[test]
    fn flipped_byte_is_corrupt() {
        let dims = ShardDims::new(32, 64, 4);
        let q = quantize_shard(&raw(ShardId::new(0, 0), dims, 3), bw(2), QuantConfig::default()).unwrap();
        let mut bytes = encode_shard(&q).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(parse_shard(&bytes).unwrap_err().contains("checksum"));
        bytes[0] = b'X';
        assert!(parse_shard(&bytes).unwrap_err().contains("magic"));
    }

    #[test]
    fn header_rejects_wrong_centroid_count() {
        let dims = ShardDims::new(32, 64, 4);
        let q = quantize_shard(&raw(ShardId::new(0, 0), dims, 3), bw(2), QuantConfig::default()).unwrap();
        let bytes = encode_shard(&q).unwrap();
        let mut h = ShardFileHeader::decode(&bytes).unwrap();
        h.centroid_count = 5;
        assert!(ShardFileHeader::decode(&h.encode()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn round_trip_any_width_and_dims(
            k in prop_oneof![1u32..=8, Just(32u32)],
            slices in 1usize..4,
            head in 1usize..6,
            ffn_mult in 1usize..4,
            seed in any::<u64>(),
        ) {
            let dims = ShardDims::new(slices * head, slices * head * ffn_mult, slices);
            let r = raw(ShardId::new(seed as usize % 7, 0), dims, seed);
            match quantize_shard(&r, bw(k), QuantConfig::default()) {
                Ok(q) => {
                    let bytes = encode_shard(&q).unwrap();
                    prop_assert_eq!(bytes.len() as u64, shard_file_len(q.bitwidth, &dims, q.outliers.len()));
                    prop_assert_eq!(parse_shard(&bytes).unwrap(), q);
                }
                Err(QuantError::InsufficientMass { .. }) => {}
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
