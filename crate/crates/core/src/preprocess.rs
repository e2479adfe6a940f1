//! Raw FP32 weight files and the offline pass that turns them into a shard
//! tree plus manifest.
//!
//! Raw weight file layout, all little-endian:
//!
//! ```text
//! 0   magic "SPRW"
//! 4   u32 version (1)
//! 8   u32 n_layers
//! 12  u32 n_slices
//! 16  u32 hidden
//! 20  u32 ffn
//! 24  per layer: n_slices shards of weight_count f32 (Q, K, V, O, FFN1, FFN2
//!     row-major), then 9*hidden + ffn f32 of layer parameters
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    layer_misc_len, write_json, Bitwidth, ModelError, ModelManifest, ShardDims, ShardId, Violation, MANIFEST_FILE,
};
use crate::quant::{LayerQuantizer, QuantConfig, QuantError, RawShard};
use crate::store::{write_layer_misc, write_shard, StoreError};

pub const RAW_MAGIC: &[u8; 4] = b"SPRW";
pub const RAW_VERSION: u32 = 1;
const RAW_HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    BadRawFile { path: PathBuf, reason: String },
    #[error("invalid model geometry: {0:?}")]
    Geometry(Vec<Violation>),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PreprocessError + '_ {
    move |source| PreprocessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Unsharded FP32 weights of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RawModel {
    pub n_layers: usize,
    pub n_slices: usize,
    pub hidden: usize,
    pub ffn: usize,
    /// Layer-major: index `layer * n_slices + slice`.
    pub shards: Vec<Vec<f32>>,
    pub misc: Vec<Vec<f32>>,
}

impl RawModel {
    pub fn dims(&self) -> ShardDims {
        ShardDims::new(self.hidden, self.ffn, self.n_slices)
    }

    pub fn shard(&self, id: ShardId) -> &[f32] {
        &self.shards[id.layer * self.n_slices + id.slice]
    }

    pub fn shard_mut(&mut self, id: ShardId) -> &mut Vec<f32> {
        &mut self.shards[id.layer * self.n_slices + id.slice]
    }

    pub fn raw_shards(&self, layer: usize) -> Result<Vec<RawShard>, QuantError> {
        (0..self.n_slices)
            .map(|s| {
                let id = ShardId::new(layer, s);
                RawShard::new(id, self.dims(), self.shard(id).to_vec())
            })
            .collect()
    }

    /// Shape checks shared by the reader and the preprocessor.
    pub fn violations(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        if self.n_layers == 0 || self.n_slices == 0 || self.hidden == 0 || self.ffn == 0 {
            v.push(Violation::ZeroDimension);
            return v;
        }
        if self.hidden % self.n_slices != 0 {
            v.push(Violation::NonIntegralHeadSize {
                hidden_dim: self.hidden,
                n_slices: self.n_slices,
            });
        }
        if self.ffn % self.n_slices != 0 {
            v.push(Violation::NonIntegralFfnSlice {
                ffn_dim: self.ffn,
                n_slices: self.n_slices,
            });
        }
        v
    }
}

pub fn write_raw_model(model: &RawModel, path: &Path) -> Result<(), PreprocessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    let mut header = Vec::with_capacity(RAW_HEADER_LEN);
    header.extend_from_slice(RAW_MAGIC);
    for v in [RAW_VERSION, model.n_layers as u32, model.n_slices as u32, model.hidden as u32, model.ffn as u32] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&header).map_err(io_err(path))?;
    for l in 0..model.n_layers {
        for s in 0..model.n_slices {
            for x in model.shard(ShardId::new(l, s)) {
                w.write_all(&x.to_le_bytes()).map_err(io_err(path))?;
            }
        }
        for x in &model.misc[l] {
            w.write_all(&x.to_le_bytes()).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

fn read_f32s(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f32>, PreprocessError> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|e| PreprocessError::BadRawFile {
        path: path.to_path_buf(),
        reason: format!("truncated: {e}"),
    })?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn read_raw_model(path: &Path) -> Result<RawModel, PreprocessError> {
    let bad = |reason: String| PreprocessError::BadRawFile {
        path: path.to_path_buf(),
        reason,
    };
    let f = File::open(path).map_err(io_err(path))?;
    let expected_len = f.metadata().map_err(io_err(path))?.len();
    let mut r = BufReader::new(f);
    let mut header = [0u8; RAW_HEADER_LEN];
    r.read_exact(&mut header).map_err(|e| bad(format!("short header: {e}")))?;
    if &header[..4] != RAW_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if u(0) != RAW_VERSION as usize {
        return Err(bad(format!("unsupported version {}", u(0))));
    }
    let mut model = RawModel {
        n_layers: u(1),
        n_slices: u(2),
        hidden: u(3),
        ffn: u(4),
        shards: Vec::new(),
        misc: Vec::new(),
    };
    let violations = model.violations();
    if !violations.is_empty() {
        return Err(PreprocessError::Geometry(violations));
    }
    let per_shard = model.dims().weight_count();
    let misc_len = layer_misc_len(model.hidden, model.ffn);
    let body = (model.n_layers * (model.n_slices * per_shard + misc_len) * 4) as u64;
    if expected_len != RAW_HEADER_LEN as u64 + body {
        return Err(bad(format!(
            "file is {expected_len} bytes, header implies {}",
            RAW_HEADER_LEN as u64 + body
        )));
    }
    for _ in 0..model.n_layers {
        for _ in 0..model.n_slices {
            model.shards.push(read_f32s(&mut r, per_shard, path)?);
        }
        model.misc.push(read_f32s(&mut r, misc_len, path)?);
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub bitwidths: Vec<Bitwidth>,
    pub quant: QuantConfig,
    pub task_id: String,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            bitwidths: [2, 3, 4, 5, 6, 32].iter().map(|&k| Bitwidth::new(k).unwrap()).collect(),
            quant: QuantConfig::default(),
            task_id: "synthetic".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub mean: f64,
    pub std: f64,
    pub outliers: usize,
    pub outlier_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub manifest: ModelManifest,
    pub layers: Vec<LayerStats>,
    /// Total shard-file bytes per bitwidth.
    pub bytes_per_bitwidth: Vec<(Bitwidth, u64)>,
}

impl PreprocessReport {
    pub fn outlier_fraction(&self) -> f64 {
        let n: usize = self.layers.iter().map(|l| l.outliers).sum();
        let total = self.manifest.n_layers * self.manifest.dims().weight_count() * self.manifest.n_slices;
        n as f64 / total as f64
    }
}

/// Quantizes every layer at every bitwidth and writes the shard tree, layer
/// parameter files and manifest to `out`. The tree is built in a staging
/// directory next to `out` and swapped in at the end, so a rerun replaces a
/// previous output atomically and an interrupted run leaves `out` untouched.
pub fn preprocess(model: &RawModel, out: &Path, options: &PreprocessOptions) -> Result<PreprocessReport, PreprocessError> {
    let violations = model.violations();
    if !violations.is_empty() {
        return Err(PreprocessError::Geometry(violations));
    }
    let mut widths = options.bitwidths.clone();
    widths.sort();
    widths.dedup();
    if widths.is_empty() {
        return Err(PreprocessError::Geometry(vec![Violation::NoBitwidths]));
    }
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let staging = parent.join(format!(".{name}.staging-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    fs::create_dir_all(&staging).map_err(io_err(&staging))?;

    let result = (|| {
        let layers: Vec<(LayerStats, Vec<(Bitwidth, u64)>)> = (0..model.n_layers)
            .into_par_iter()
            .map(|l| -> Result<_, PreprocessError> {
                let raw = model.raw_shards(l)?;
                let q = LayerQuantizer::new(&raw, options.quant)?;
                let encoded = q.encode_all(&widths)?;
                let mut sizes = Vec::new();
                for (k, shards) in widths.iter().zip(&encoded) {
                    let mut bytes = 0;
                    for s in shards {
                        let p = write_shard(s, &staging)?;
                        bytes += fs::metadata(&p).map_err(io_err(&p))?.len();
                    }
                    sizes.push((*k, bytes));
                }
                // Outliers depend only on the layer fit, so count them once.
                let outliers = widths
                    .iter()
                    .position(|k| !k.is_full())
                    .map_or(0, |i| encoded[i].iter().map(|s| s.outliers.len()).sum());
                write_layer_misc(&staging, l, &model.misc[l])?;
                let fit = q.fit();
                let per_layer = model.n_slices * model.dims().weight_count();
                Ok((
                    LayerStats {
                        layer: l,
                        mean: fit.mean,
                        std: fit.std,
                        outliers,
                        outlier_fraction: outliers as f64 / per_layer as f64,
                    },
                    sizes,
                ))
            })
            .collect::<Result<_, _>>()?;

        let manifest = ModelManifest {
            n_layers: model.n_layers,
            n_slices: model.n_slices,
            bitwidths: widths.clone(),
            hidden_dim: model.hidden,
            ffn_dim: model.ffn,
            task_id: options.task_id.clone(),
            shard_dir: PathBuf::from("."),
            layer_misc_bytes: (layer_misc_len(model.hidden, model.ffn) * 4) as u64,
        };
        write_json(&staging.join(MANIFEST_FILE), &manifest)?;
        let mut bytes_per_bitwidth: Vec<(Bitwidth, u64)> = widths.iter().map(|&k| (k, 0)).collect();
        let mut stats = Vec::with_capacity(layers.len());
        for (s, sizes) in layers {
            for (i, (_, b)) in sizes.into_iter().enumerate() {
                bytes_per_bitwidth[i].1 += b;
            }
            stats.push(s);
        }
        Ok(PreprocessReport {
            manifest,
            layers: stats,
            bytes_per_bitwidth,
        })
    })();

    let mut report = match result {
        Ok(r) => r,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    let old = parent.join(format!(".{name}.old-{}", std::process::id()));
    if out.exists() {
        fs::rename(out, &old).map_err(io_err(out))?;
    }
    fs::rename(&staging, out).map_err(io_err(out))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(io_err(&old))?;
    }
    report.manifest.shard_dir = out.to_path_buf();
    info!(
        "preprocessed {}x{} model into {} (outlier fraction {:.4}%)",
        model.n_layers,
        model.n_slices,
        out.display(),
        100.0 * report.outlier_fraction()
    );
    Ok(report)
}

/// Rebuilds the FP32 model from a tree's 32-bit shards and layer files.
pub fn raw_model_from_store(store: &crate::store::ShardStore) -> Result<RawModel, PreprocessError> {
    let m = store.manifest();
    if !m.bitwidths.contains(&Bitwidth::FULL) {
        return Err(PreprocessError::BadRawFile {
            path: m.shard_dir.clone(),
            reason: "tree has no 32-bit shards to rebuild FP32 weights from".into(),
        });
    }
    let mut shards = Vec::with_capacity(m.n_layers * m.n_slices);
    let mut misc = Vec::with_capacity(m.n_layers);
    for l in 0..m.n_layers {
        for s in 0..m.n_slices {
            let v = crate::model::ShardVersion::new(l, s, Bitwidth::FULL);
            let q = crate::store::read_shard(&store.path_of(v))?;
            shards.push(crate::quant::decode_shard(&q)?.weights);
        }
        misc.push(store.read_layer_misc(l)?);
    }
    Ok(RawModel {
        n_layers: m.n_layers,
        n_slices: m.n_slices,
        hidden: m.hidden_dim,
        ffn: m.ffn_dim,
        shards,
        misc,
    })
}
