//! `shardpipe`: preprocess -> profile -> importance -> plan -> run/simulate -> report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use shardpipe::exec::{Engine, ExecOptions, ReferenceBackend, SyntheticBackend};
use shardpipe::model::{
    read_json, validate_manifest, write_json, Bitwidth, ExecutionPlan, HardwareProfile, ImportanceMap, ModelError,
    ModelManifest,
};
use shardpipe::plan::{self, PlanError, PlanRequest, PreloadEntry};
use shardpipe::preprocess::{
    preprocess, raw_model_from_store, read_raw_model, write_raw_model, PreprocessError, PreprocessOptions,
};
use shardpipe::profile::{profile_compute, profile_importance, profile_io, ComputeProfileOptions, IoProfileOptions};
use shardpipe::report::shape_grid;
use shardpipe::sim::{simulate, simulate_strategy, Strategy, StrategyContext};
use shardpipe::store::{CachePolicy, ShardStore, StoreError};
use shardpipe::synth::{generate, random_input, AblationEvaluator, SyntheticSpec, SyntheticTask};
use shardpipe::{Micros, ShardVersion};

const EXIT_VALIDATION: u8 = 2;
const EXIT_DEGRADED: u8 = 3;
const EXIT_IO: u8 = 4;

/// Default target latencies, in ms.
const DEFAULT_TARGETS_MS: [f64; 3] = [150.0, 200.0, 400.0];

/// Bad flags, config or inputs; exits with the validation code.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Invalid(msg.into()))
}

#[derive(Parser, Debug)]
#[command(name = "shardpipe", version, about = "Latency-bounded pipelined execution of sharded, quantized models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by all subcommands. Each falls back to the JSON config file,
/// then to a built-in default.
#[derive(Args, Debug, Default)]
struct Common {
    /// JSON config file supplying defaults for these flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    profile: Option<PathBuf>,
    #[arg(long, global = true)]
    importance: Option<PathBuf>,
    #[arg(long, global = true)]
    plan: Option<PathBuf>,
    /// Target latency in ms; a comma list where a grid is accepted.
    #[arg(long = "T", global = true, value_delimiter = ',')]
    targets: Vec<f64>,
    /// Preload buffer size in bytes.
    #[arg(long, global = true)]
    buffer_bytes: Option<u64>,
    /// Headroom in ms that importance upgrades leave in each layer's budget.
    #[arg(long, global = true)]
    io_reserve_ms: Option<f64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<Backend>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Backend {
    Reference,
    Synthetic,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    manifest: Option<PathBuf>,
    profile: Option<PathBuf>,
    importance: Option<PathBuf>,
    plan: Option<PathBuf>,
    #[serde(rename = "T")]
    targets: Option<Vec<f64>>,
    buffer_bytes: Option<u64>,
    io_reserve_ms: Option<f64>,
    backend: Option<Backend>,
    seed: Option<u64>,
}

/// Flags merged over the config file over defaults.
#[derive(Debug)]
struct Settings {
    manifest: Option<PathBuf>,
    profile: Option<PathBuf>,
    importance: Option<PathBuf>,
    plan: Option<PathBuf>,
    targets: Vec<Micros>,
    buffer_bytes: u64,
    io_reserve: Micros,
    backend: Backend,
    seed: u64,
}

impl Settings {
    fn resolve(c: &Common) -> Result<Self> {
        let file: ConfigFile = match &c.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", p.display())))?
            }
            None => ConfigFile::default(),
        };
        let targets_ms = if !c.targets.is_empty() {
            c.targets.clone()
        } else {
            file.targets.unwrap_or_else(|| DEFAULT_TARGETS_MS.to_vec())
        };
        if targets_ms.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(invalid("target latencies must be positive"));
        }
        let reserve_ms = c.io_reserve_ms.or(file.io_reserve_ms).unwrap_or(0.0);
        if !(reserve_ms.is_finite() && reserve_ms >= 0.0) {
            return Err(invalid("io reserve must not be negative"));
        }
        Ok(Settings {
            manifest: c.manifest.clone().or(file.manifest),
            profile: c.profile.clone().or(file.profile),
            importance: c.importance.clone().or(file.importance),
            plan: c.plan.clone().or(file.plan),
            targets: targets_ms.into_iter().map(Micros::from_ms_f64).collect(),
            buffer_bytes: c.buffer_bytes.or(file.buffer_bytes).unwrap_or(0),
            io_reserve: Micros::from_ms_f64(reserve_ms),
            backend: c.backend.or(file.backend).unwrap_or(Backend::Synthetic),
            seed: c.seed.or(file.seed).unwrap_or(0),
        })
    }

    fn need<'a>(&self, v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        v.as_deref().ok_or_else(|| invalid(format!("--{flag} is required")))
    }

    fn target(&self) -> Micros {
        self.targets[0]
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Quantize a model into a shard tree and manifest.
    Preprocess(PreprocessArgs),
    /// Check a manifest and its shard tree.
    Validate,
    /// Measure shard IO and per-width compute delay.
    Profile(ProfileArgs),
    /// Score every shard by ablation on the synthetic task.
    Importance(ImportanceArgs),
    /// Plan one target latency.
    Plan(PlanArgs),
    /// Execute a plan on the pipelined engine.
    Run(RunArgs),
    /// Simulate a plan or a strategy on the profile's cost model.
    Simulate(SimulateArgs),
    /// Shapes each strategy picks over the target grid.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Generate weights: hidden,ffn,layers,slices,seed.
    #[arg(long, conflicts_with = "raw")]
    synthetic: Option<String>,
    /// Raw FP32 weight file.
    #[arg(long)]
    raw: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,32")]
    bitwidths: Vec<u32>,
    #[arg(long, default_value = "synthetic")]
    task_id: String,
    /// Also save the generated FP32 weights in raw format.
    #[arg(long)]
    save_raw: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    io_trials: usize,
    #[arg(long, default_value_t = 3)]
    compute_trials: usize,
    #[arg(long, default_value_t = 128)]
    input_len: usize,
    /// Per-slice layer delay of the synthetic backend, in ms.
    #[arg(long, default_value_t = 1.0)]
    synthetic_ms_per_slice: f64,
    /// Emulate a storage device of this read bandwidth (MB/s).
    #[arg(long)]
    device_mbps: Option<f64>,
    /// Measure IO with a warm page cache.
    #[arg(long)]
    warm_cache: bool,
}

#[derive(Args, Debug)]
struct ImportanceArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    inputs: usize,
    #[arg(long, default_value_t = 16)]
    input_len: usize,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    out: PathBuf,
    /// Resident shards (JSON list of {layer, slice, bitwidth, bytes}).
    #[arg(long)]
    preload: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    input_len: usize,
    /// Plan cache directory; defaults to `.plan-cache` next to `--out`.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    no_cache: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    /// Write the last run's trace here.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    input_len: usize,
    /// Fallback per-slice layer delay when the profile lacks a width (ms).
    #[arg(long, default_value_t = 1.0)]
    synthetic_ms_per_slice: f64,
    #[arg(long)]
    device_mbps: Option<f64>,
    /// Bound on loaded layers waiting for compute (default: unbounded).
    #[arg(long)]
    max_in_flight: Option<usize>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Load&Exec, StdPL-<k>, PreloadModel-<k> or Elastic; default simulates `--plan`.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Md,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, value_enum, default_value = "md")]
    format: Format,
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn load_manifest(s: &Settings) -> Result<ModelManifest> {
    Ok(ModelManifest::load(s.need(&s.manifest, "manifest")?)?)
}

fn load_profile(s: &Settings) -> Result<HardwareProfile> {
    Ok(read_json(s.need(&s.profile, "profile")?)?)
}

fn load_importance_or_uniform(s: &Settings, n: usize, m: usize) -> Result<ImportanceMap> {
    match &s.importance {
        Some(p) => Ok(read_json(p)?),
        None => {
            warn!("no --importance given; using uniform scores");
            Ok(ImportanceMap::uniform(n, m))
        }
    }
}

/// Model shape from the manifest, else from the importance map.
fn model_shape(s: &Settings) -> Result<(usize, usize)> {
    if s.manifest.is_some() {
        let m = load_manifest(s)?;
        return Ok((m.n_layers, m.n_slices));
    }
    if let Some(p) = &s.importance {
        let imp: ImportanceMap = read_json(p)?;
        let n = imp.scores.keys().map(|id| id.layer + 1).max().unwrap_or(0);
        let m = imp.scores.keys().map(|id| id.slice + 1).max().unwrap_or(0);
        if n > 0 && m > 0 {
            return Ok((n, m));
        }
    }
    Err(invalid("--manifest (or a non-empty --importance) is required"))
}

fn throttled_store(manifest: ModelManifest, device_mbps: Option<f64>) -> Result<ShardStore> {
    let store = ShardStore::new(manifest);
    let Some(mbps) = device_mbps else { return Ok(store) };
    if !(mbps.is_finite() && mbps > 0.0) {
        return Err(invalid("--device-mbps must be positive"));
    }
    let m = store.manifest().clone();
    let mut delays = BTreeMap::new();
    for &k in &m.bitwidths {
        let bytes = store.file_len(ShardVersion::new(0, 0, k))?;
        delays.insert(k, Micros::from_ms_f64(bytes as f64 / (mbps * 1e3)));
    }
    Ok(store.with_throttle(delays))
}

fn cmd_preprocess(a: &PreprocessArgs) -> Result<u8> {
    let model = match (&a.synthetic, &a.raw) {
        (Some(spec), None) => {
            let spec: SyntheticSpec = spec.parse().map_err(invalid)?;
            generate(&spec)
        }
        (None, Some(path)) => read_raw_model(path)?,
        _ => return Err(invalid("give exactly one of --synthetic or --raw")),
    };
    if let Some(p) = &a.save_raw {
        write_raw_model(&model, p)?;
    }
    let bitwidths = a
        .bitwidths
        .iter()
        .map(|&k| Bitwidth::new(k).map_err(|e| invalid(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let opts = PreprocessOptions {
        bitwidths,
        task_id: a.task_id.clone(),
        ..PreprocessOptions::default()
    };
    let started = std::time::Instant::now();
    let report = preprocess(&model, &a.out, &opts)?;
    let shards = report.manifest.n_layers * report.manifest.n_slices * report.manifest.bitwidths.len();
    println!(
        "wrote {shards} shards to {} in {:.1} s (outliers {:.3}%)",
        a.out.display(),
        started.elapsed().as_secs_f64(),
        100.0 * report.outlier_fraction()
    );
    for (k, bytes) in &report.bytes_per_bitwidth {
        println!("  k={k:>2}: {bytes} bytes");
    }
    Ok(0)
}

fn cmd_validate(s: &Settings) -> Result<u8> {
    let m = load_manifest(s)?;
    let violations = validate_manifest(&m).with_context(|| format!("scanning {}", m.shard_dir.display()))?;
    if violations.is_empty() {
        println!(
            "ok: {}x{} model, bitwidths {:?}",
            m.n_layers,
            m.n_slices,
            m.bitwidths.iter().map(|k| k.bits()).collect::<Vec<_>>()
        );
        return Ok(0);
    }
    for v in &violations {
        println!("violation: {v}");
    }
    Ok(EXIT_VALIDATION)
}

fn cmd_profile(s: &Settings, a: &ProfileArgs) -> Result<u8> {
    let manifest = load_manifest(s)?;
    let store = throttled_store(manifest, a.device_mbps)?;
    let mut profile = match &s.profile {
        Some(p) if p.exists() => read_json(p)?,
        _ => HardwareProfile::default(),
    };
    let io = IoProfileOptions {
        trials: a.io_trials,
        cache: if a.warm_cache {
            CachePolicy::Keep
        } else {
            CachePolicy::DropBeforeEachTrial
        },
        ..IoProfileOptions::default()
    };
    for w in profile_io(&store, &io, &mut profile)? {
        println!("warning: {w}");
    }
    let n_slices = store.manifest().n_slices;
    let mut comp = ComputeProfileOptions::all_widths(n_slices);
    comp.input_len = a.input_len;
    comp.trials = a.compute_trials;
    match s.backend {
        Backend::Synthetic => {
            let delays = (1..=n_slices)
                .map(|m| (m, Micros::from_ms_f64(a.synthetic_ms_per_slice * m as f64)))
                .collect();
            profile_compute(&store, &mut SyntheticBackend::per_width(delays), &comp, &mut profile)?;
        }
        Backend::Reference => {
            let mut backend = reference_backend(&store, a.input_len, s.seed)?;
            profile_compute(&store, &mut backend, &comp, &mut profile)?;
        }
    }
    profile.metadata.insert("backend".into(), format!("{:?}", s.backend).to_lowercase());
    if let Some(mbps) = a.device_mbps {
        profile.metadata.insert("device_mbps".into(), mbps.to_string());
    }
    write_json(&a.out, &profile)?;
    for w in profile.warnings() {
        println!("warning: {w}");
    }
    println!("profile written to {}", a.out.display());
    Ok(0)
}

fn reference_backend(store: &ShardStore, input_len: usize, seed: u64) -> Result<ReferenceBackend> {
    let engine = Engine::new(store.clone(), 0);
    let misc = engine.layer_misc()?;
    let d = store.manifest().hidden_dim;
    let input = random_input(input_len, d, seed);
    ReferenceBackend::new(store.manifest().dims(), misc, input).map_err(invalid)
}

fn cmd_importance(s: &Settings, a: &ImportanceArgs) -> Result<u8> {
    let manifest = load_manifest(s)?;
    let store = ShardStore::new(manifest);
    let model = raw_model_from_store(&store)?;
    let task = SyntheticTask::new(&model, a.inputs, a.input_len, s.seed);
    let eval = AblationEvaluator { task: &task, model: &model };
    let map = match profile_importance(&eval, model.n_layers, model.n_slices, true) {
        Ok(m) => m,
        Err(f) => {
            write_json(&a.out, &f.partial)?;
            bail!("{f}; partial scores written to {}", a.out.display());
        }
    };
    write_json(&a.out, &map)?;
    let top: Vec<String> = map.ranking().iter().take(5).map(|id| id.to_string()).collect();
    println!("importance written to {} (most important: {})", a.out.display(), top.join(", "));
    Ok(0)
}

#[derive(Serialize)]
struct CacheKey<'a> {
    format: u32,
    profile_sha256: &'a str,
    importance_sha256: &'a str,
    target_us: i64,
    buffer_bytes: u64,
    io_reserve_us: i64,
    preload: &'a [PreloadEntry],
    n_layers: usize,
    n_slices: usize,
    input_len: usize,
}

fn cmd_plan(s: &Settings, a: &PlanArgs) -> Result<u8> {
    let (n, m) = model_shape(s)?;
    let profile_path = s.need(&s.profile, "profile")?;
    let profile: HardwareProfile = read_json(profile_path)?;
    let importance = load_importance_or_uniform(s, n, m)?;
    let preload: Vec<PreloadEntry> = match &a.preload {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };
    let profile_sha = sha256_file(profile_path)?;
    let importance_sha = match &s.importance {
        Some(p) => sha256_file(p)?,
        None => hex::encode(Sha256::digest(serde_json::to_vec(&importance)?)),
    };
    let key = CacheKey {
        format: 1,
        profile_sha256: &profile_sha,
        importance_sha256: &importance_sha,
        target_us: s.target().as_us(),
        buffer_bytes: s.buffer_bytes,
        io_reserve_us: s.io_reserve.as_us(),
        preload: &preload,
        n_layers: n,
        n_slices: m,
        input_len: a.input_len,
    };
    let key = hex::encode(Sha256::digest(serde_json::to_vec(&key)?));
    let cache_dir = a.cache_dir.clone().unwrap_or_else(|| {
        a.out
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .join(".plan-cache")
    });
    let cached = cache_dir.join(format!("{key}.json"));
    let plan: ExecutionPlan = if !a.no_cache && cached.exists() {
        println!("plan cache hit ({key})");
        read_json(&cached)?
    } else {
        let mut req = PlanRequest::new(s.target(), &profile, &importance, n, m);
        req.input_len = a.input_len;
        req.preload = preload.clone();
        req.preload_budget = s.buffer_bytes;
        req.io_reserve = s.io_reserve;
        let mut p = plan::plan(&req)?;
        p.provenance.profile_sha256 = Some(profile_sha.clone());
        p.provenance.importance_sha256 = Some(importance_sha.clone());
        if !a.no_cache {
            write_json(&cached, &p)?;
        }
        p
    };
    write_json(&a.out, &plan)?;
    let first_neg = plan.ledger.first_violation();
    println!(
        "plan {} for T={} ms: {} preloaded, ledger {}{}",
        plan.shape,
        s.target().as_ms_f64(),
        plan.preloaded.len(),
        if first_neg.is_none() { "valid" } else { "INVALID" },
        if plan.degraded { " (degraded)" } else { "" }
    );
    Ok(if plan.degraded { EXIT_DEGRADED } else { 0 })
}

fn cmd_run(s: &Settings, a: &RunArgs) -> Result<u8> {
    if a.repeat == 0 {
        return Err(invalid("--repeat must be at least 1"));
    }
    let manifest = load_manifest(s)?;
    let (n, m) = (manifest.n_layers, manifest.n_slices);
    let store = throttled_store(manifest, a.device_mbps)?;
    let profile = match &s.profile {
        Some(p) => Some(read_json::<HardwareProfile>(p)?),
        None => None,
    };
    let fixed_plan = match &s.plan {
        Some(p) => Some(read_json::<ExecutionPlan>(p)?),
        None => None,
    };
    let importance = load_importance_or_uniform(s, n, m)?;
    if fixed_plan.is_none() && profile.is_none() {
        return Err(invalid("run needs --plan or --profile"));
    }

    let mut engine = Engine::new(store, s.buffer_bytes);
    engine.options = ExecOptions {
        max_in_flight: a.max_in_flight,
    };
    let mut reference = match s.backend {
        Backend::Reference => Some(reference_backend(&engine.store, a.input_len, s.seed)?),
        Backend::Synthetic => None,
    };
    let mut any_degraded = false;
    let mut last_trace = None;
    for i in 0..a.repeat {
        let plan = match &fixed_plan {
            Some(p) => p.clone(),
            None => {
                let profile = profile.as_ref().expect("checked above");
                let mut req = PlanRequest::new(s.target(), profile, &importance, n, m);
                req.input_len = a.input_len;
                req.preload = engine.buffer.entries();
                req.preload_budget = s.buffer_bytes;
        req.io_reserve = s.io_reserve;
                plan::plan(&req)?
            }
        };
        any_degraded |= plan.degraded;
        let report = match &mut reference {
            Some(b) => engine.run(&plan, b),
            None => {
                let delays = (1..=m)
                    .map(|w| {
                        let d = profile
                            .as_ref()
                            .and_then(|p| p.compute(plan.input_len, w, &plan.freq))
                            .unwrap_or_else(|| Micros::from_ms_f64(a.synthetic_ms_per_slice * w as f64));
                        (w, d)
                    })
                    .collect();
                engine.run(&plan, &mut SyntheticBackend::per_width(delays))
            }
        };
        let report = match report {
            Ok(r) => r,
            Err(f) => {
                if let Some(p) = &a.trace_out {
                    write_json(p, &f.partial)?;
                }
                return Err(anyhow!(f.error).context(format!("run {i} failed after {} layers", f.partial.layers.len())));
            }
        };
        let summary = report.trace.summary(Micros::from_ms(1));
        println!(
            "run {i}: shape {} makespan {:.2} ms, stall {:.2} ms ({} layers > 1 ms), {} bytes read, {} preload hits{}",
            plan.shape,
            report.trace.makespan.as_ms_f64(),
            summary.total_stall.as_ms_f64(),
            summary.stalled_layers.len(),
            report.trace.bytes_read(),
            report.preload_hits,
            if plan.degraded { ", degraded plan" } else { "" }
        );
        last_trace = Some(report.trace);
    }
    if let (Some(p), Some(t)) = (&a.trace_out, &last_trace) {
        write_json(p, t)?;
    }
    Ok(if any_degraded { EXIT_DEGRADED } else { 0 })
}

fn cmd_simulate(s: &Settings, a: &SimulateArgs) -> Result<u8> {
    let profile = load_profile(s)?;
    match &a.strategy {
        None => {
            let plan: ExecutionPlan = read_json(s.need(&s.plan, "plan")?)?;
            let trace = simulate(&plan, &profile)?;
            let summary = trace.summary(Micros::ZERO);
            println!(
                "{}: makespan {:.3} ms, total stall {:.3} ms, idle {:.1}%",
                plan.shape,
                trace.makespan.as_ms_f64(),
                summary.total_stall.as_ms_f64(),
                100.0 * summary.idle_fraction
            );
            if let Some(out) = &a.out {
                write_json(out, &trace)?;
            }
            Ok(if plan.degraded { EXIT_DEGRADED } else { 0 })
        }
        Some(name) => {
            let strategy: Strategy = name.parse().map_err(invalid)?;
            let (n, m) = model_shape(s)?;
            let importance = load_importance_or_uniform(s, n, m)?;
            let mut ctx = StrategyContext::new(&profile, &importance, n, m);
            ctx.preload_budget = s.buffer_bytes;
            let out = simulate_strategy(strategy, &ctx, s.target())?;
            println!(
                "{strategy}: shape {} makespan {:.3} ms{}",
                out.shape,
                out.makespan.as_ms_f64(),
                if out.degraded { " (degraded)" } else { "" }
            );
            if let Some(p) = &a.out {
                write_json(p, &out)?;
            }
            Ok(if out.degraded { EXIT_DEGRADED } else { 0 })
        }
    }
}

fn default_strategies(profile: &HardwareProfile) -> Vec<Strategy> {
    let mut v = vec![Strategy::LoadThenExecute];
    let ks: Vec<Bitwidth> = profile.io_delay.keys().copied().collect();
    for &k in &ks {
        v.push(Strategy::StandardPipeline(k));
    }
    for &k in &ks {
        v.push(Strategy::PreloadModel(k));
    }
    v.push(Strategy::Elastic);
    v
}

fn cmd_report(s: &Settings, a: &ReportArgs) -> Result<u8> {
    let profile = load_profile(s)?;
    let (n, m) = model_shape(s)?;
    let importance = load_importance_or_uniform(s, n, m)?;
    let strategies = if a.strategies.is_empty() {
        default_strategies(&profile)
    } else {
        a.strategies
            .iter()
            .map(|x| x.parse().map_err(invalid))
            .collect::<Result<Vec<_>>>()?
    };
    let mut ctx = StrategyContext::new(&profile, &importance, n, m);
    ctx.preload_budget = s.buffer_bytes;
    let grid = shape_grid(&ctx, &strategies, &s.targets)?;
    let text = match a.format {
        Format::Csv => grid.to_csv(),
        Format::Md => grid.to_markdown(),
    };
    match &a.out {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(0)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() || cause.is::<PlanError>() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return match e {
                ModelError::Io { .. } => EXIT_IO,
                _ => EXIT_VALIDATION,
            };
        }
        if let Some(e) = cause.downcast_ref::<StoreError>() {
            return match e {
                StoreError::Io { .. } | StoreError::MissingShard { .. } => EXIT_IO,
                _ => EXIT_VALIDATION,
            };
        }
        if let Some(e) = cause.downcast_ref::<PreprocessError>() {
            return match e {
                PreprocessError::Io { .. } => EXIT_IO,
                PreprocessError::Store(StoreError::Io { .. }) => EXIT_IO,
                _ => EXIT_VALIDATION,
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    1
}

/// The error chain, skipping causes whose text the previous message already
/// ends with.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if out.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn run(cli: &Cli) -> Result<u8> {
    let settings = Settings::resolve(&cli.common)?;
    info!("settings: {settings:?}");
    match &cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Validate => cmd_validate(&settings),
        Command::Profile(a) => cmd_profile(&settings, a),
        Command::Importance(a) => cmd_importance(&settings, a),
        Command::Plan(a) => cmd_plan(&settings, a),
        Command::Run(a) => cmd_run(&settings, a),
        Command::Simulate(a) => cmd_simulate(&settings, a),
        Command::Report(a) => cmd_report(&settings, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
