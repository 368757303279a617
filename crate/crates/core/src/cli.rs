//! The `grainfield` command line.
//!
//! Every subcommand's arguments double as a JSON object: `--config FILE`
//! replaces the named fields after flag parsing, and unknown keys are
//! rejected. Results go to stdout as one JSON document; failures go to
//! stderr as `{"error": {...}}` with exit code 2 (input), 3 (runtime) or
//! 4 (non-convergence).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{ArgAction, Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::diffusion::{
    sample, Denoiser, DenoiserSpec, InpaintCond, LgdOptions, Mask, OrthoOptions, OrthoStatsCond, Renoise,
    SamplerConfig, DEFAULT_INPAINT_FRACTION,
};
use crate::error::{invalid, Error, Result};
use crate::field::{Axis, Dims, Field3};
use crate::mogrf::{MogrfSampler, MogrfSpec};
use crate::mosm::{kernel_to_grid, MosmParams, ParamBounds, DEFAULT_PERIODICITY_TOL};
use crate::pipeline::{
    self, gen_kernels, read_kernels, write_kernels, DatagenConfig, DatasetManifest, EntryStatus, GenKernelsConfig,
    NamedDenoiser, NamedKernel, StatsVector,
};
use crate::pmf::{read_field, write_atomic, write_field, Dtype};
use crate::stats::{ortho_stats, ortho_stats_from_images, two_point_stats, LossReduction, PairSelector};

pub const STATS_SIDECAR_SCHEMA: &str = "grainfield.stats_map.v1";

#[derive(Debug, Parser)]
#[command(name = "grainfield", version, about = "Synthesis and analysis of multi-channel 3D orientation fields")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Master seed; every seeded command is a pure function of it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Emit JSON-lines progress events on stderr.
    #[arg(long, global = true)]
    pub progress: bool,
    /// Validate and print the execution plan without computing.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON object overriding subcommand flags (and `seed`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Design MOSM kernels by Latin hypercube sampling with rejection.
    GenKernels(GenKernelsArgs),
    /// Draw one MOGRF sample from a kernel parameter file.
    SampleGrf(SampleGrfArgs),
    /// Generate a dataset over denoisers x kernels x replicates.
    Datagen(DatagenArgs),
    /// Two-point statistics of a field.
    Stats(StatsArgs),
    /// PCA of statistics vectors, fields or dataset manifests.
    Pca(PcaArgs),
    /// Fill in missing slices of a volume by inpainting-conditioned sampling.
    Superres(SuperresArgs),
    /// Propose volumes whose orthogonal-plane statistics match three images.
    Expand(ExpandArgs),
    /// Render one slice of a 3-channel field as an RGB PNG.
    RenderSlice(RenderSliceArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenKernelsArgs {
    /// Output directory for parameter files and kernels.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Grid as N or NXxNYxNZ.
    #[arg(long, default_value = "32")]
    pub dims: String,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 4)]
    pub mixtures: usize,
    /// Parameter bounds JSON (defaults to the built-in box).
    #[arg(long)]
    pub bounds: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PERIODICITY_TOL)]
    pub periodicity_tol: f64,
    /// Also reject kernels whose probe sample leaves [-1, 1].
    #[arg(long)]
    pub probe: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleGrfArgs {
    /// Kernel parameter JSON.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long, default_value = "32")]
    pub dims: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "f32")]
    pub dtype: Dtype,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenArgs {
    /// Directory written by gen-kernels.
    #[arg(long)]
    pub kernels: PathBuf,
    /// JSON list of {"id", "spec"} denoisers, inline or as a file path.
    #[arg(long)]
    pub denoisers: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub replicates: usize,
    #[arg(long, default_value = "32")]
    pub dims: String,
    #[arg(long, default_value_t = 24)]
    pub steps: usize,
    #[arg(long, default_value_t = 12)]
    pub skip: usize,
    #[arg(long, default_value_t = 0.0)]
    pub s_churn: f64,
    /// How the MOGRF sample is brought to the first executed noise level.
    #[arg(long, default_value = "sdedit")]
    pub renoise: String,
    #[arg(long, default_value = "f32")]
    pub dtype: Dtype,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Statistics field (one channel per pair); a JSON sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// all, reference-row, auto, or a list like 0:0,0:1.
    #[arg(long, default_value = "all")]
    pub pairs: String,
    /// Also write the flattened statistics vector used by pca.
    #[arg(long)]
    pub vector: Option<PathBuf>,
    #[arg(long, default_value = "f64")]
    pub dtype: Dtype,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaArgs {
    /// Stats vector JSON, PMF fields or dataset manifests.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub components: Option<usize>,
    /// Write the result here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperresArgs {
    /// Low-resolution volume: the measured slices only.
    #[arg(long)]
    pub input: PathBuf,
    /// Axis along which slices are missing.
    #[arg(long)]
    pub axis: Axis,
    /// Slice spacing of the measurement; the output is `factor` times longer along `axis`.
    #[arg(long)]
    pub factor: usize,
    /// Fraction of sampler steps that enforce the known slices.
    #[arg(long, default_value_t = DEFAULT_INPAINT_FRACTION)]
    pub theta: f64,
    /// Denoiser spec JSON, inline or as a file path.
    #[arg(long)]
    pub denoiser: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.0)]
    pub s_churn: f64,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Full-resolution ground truth for the error report.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "f32")]
    pub dtype: Dtype,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpandArgs {
    /// `axis=path` of a PMF image with extent 1 along `axis`; give all three axes.
    #[arg(long = "image", required_unless_present = "target_volume")]
    pub images: Vec<String>,
    /// Take the targets from the three offset planes of a volume instead.
    #[arg(long, conflicts_with = "images")]
    pub target_volume: Option<PathBuf>,
    /// Mismatch reduction: sum (squared error summed per element) or mean.
    #[arg(long, default_value = "sum")]
    pub reduction: String,
    /// Denoiser spec JSON, inline or as a file path.
    #[arg(long)]
    pub denoiser: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.0)]
    pub s_churn: f64,
    #[arg(long, default_value = "all")]
    pub pairs: String,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub threshold_slope: f64,
    #[arg(long, default_value_t = 1e-7)]
    pub threshold_floor: f64,
    #[arg(long, default_value_t = 5000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "f32")]
    pub dtype: Dtype,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSliceArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub axis: Axis,
    #[arg(long)]
    pub index: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings shared by every command after config merging.
#[derive(Debug, Clone)]
pub struct Context {
    pub seed: u64,
    pub progress: bool,
    pub dry_run: bool,
}

impl Context {
    fn report(&self, stage: &str, done: usize, total: usize) {
        if self.progress {
            let line = json!({"event": "progress", "stage": stage, "done": done, "total": total});
            eprintln!("{line}");
        } else {
            eprintln!("{stage}: {done}/{total}");
        }
    }
}

pub fn parse_dims(s: &str) -> Result<Dims> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| invalid(format!("bad dims {s:?}, expected N or NXxNYxNZ")))?;
    let d = match nums[..] {
        [n] => Dims::cube(n)?,
        [x, y, z] => Dims::new(x, y, z)?,
        _ => return Err(invalid(format!("bad dims {s:?}, expected N or NXxNYxNZ"))),
    };
    Ok(d)
}

pub fn parse_pairs(s: &str, channels: usize) -> Result<PairSelector> {
    let sel = match s.trim() {
        "all" => PairSelector::All,
        "reference-row" | "reference_row" => PairSelector::ReferenceRow,
        "auto" => PairSelector::Pairs((0..channels).map(|c| (c, c)).collect()),
        list => {
            let pairs = list
                .split(',')
                .map(|p| {
                    let (b, g) = p
                        .split_once(':')
                        .ok_or_else(|| invalid(format!("bad pair {p:?}, expected B:G")))?;
                    let parse = |t: &str| {
                        t.trim()
                            .parse::<usize>()
                            .map_err(|_| invalid(format!("bad channel index in {p:?}")))
                    };
                    Ok((parse(b)?, parse(g)?))
                })
                .collect::<Result<Vec<_>>>()?;
            PairSelector::Pairs(pairs)
        }
    };
    sel.resolve(channels)?;
    Ok(sel)
}

fn parse_renoise(s: &str) -> Result<Renoise> {
    match s {
        "sdedit" => Ok(Renoise::Sdedit),
        "none" => Ok(Renoise::None),
        other => Err(invalid(format!("unknown renoise mode {other:?}, expected sdedit or none"))),
    }
}

/// Parses `text` as JSON, or reads it as a file when it is not inline JSON.
fn inline_or_file<T: DeserializeOwned>(text: &str) -> Result<T> {
    let t = text.trim_start();
    if t.starts_with('{') || t.starts_with('[') {
        Ok(serde_json::from_str(t)?)
    } else {
        let body = std::fs::read_to_string(text).map_err(|e| io_context(e, Path::new(text)))?;
        Ok(serde_json::from_str(&body)?)
    }
}

fn io_context(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_input(path: &Path) -> Result<Field3> {
    read_field(path).map_err(|e| match e {
        Error::Io(io) => io_context(io, path),
        other => other,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

/// Overlays the config object on the flag values; `seed` may be overridden too.
fn merge_config<T: Serialize + DeserializeOwned>(args: &T, seed: u64, config: Option<&Value>) -> Result<(T, u64)> {
    let Some(config) = config else {
        return Ok((serde_json::from_value(serde_json::to_value(args)?)?, seed));
    };
    let obj = config
        .as_object()
        .ok_or_else(|| invalid("config file must hold a JSON object"))?;
    let mut base = serde_json::to_value(args)?;
    let fields = base.as_object_mut().expect("arguments serialize to an object");
    let mut seed = seed;
    for (k, v) in obj {
        if k == "seed" {
            seed = v
                .as_u64()
                .ok_or_else(|| invalid("config seed must be a non-negative integer"))?;
        } else if let Some(slot) = fields.get_mut(k) {
            *slot = v.clone();
        } else if fields.contains_key(k) || optional_key::<T>(k) {
            fields.insert(k.clone(), v.clone());
        } else {
            return Err(invalid(format!("unknown config key {k:?}")));
        }
    }
    let merged = serde_json::from_value(base).map_err(|e| invalid(format!("config: {e}")))?;
    Ok((merged, seed))
}

/// Whether `key` names a field of `T` that serialized as absent.
fn optional_key<T: DeserializeOwned>(key: &str) -> bool {
    // deny_unknown_fields makes an object holding only `key` fail with
    // "unknown field" exactly when the key is foreign
    let probe = json!({ key: null });
    match serde_json::from_value::<T>(probe) {
        Ok(_) => true,
        Err(e) => !e.to_string().contains("unknown field"),
    }
}

fn seeded(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(pipeline::stream_seed(seed, label, index))
}

fn build_denoiser(spec: Option<&str>, dims: Dims, channels: usize, sigma_data: f64) -> Result<(DenoiserSpec, Box<dyn Denoiser>)> {
    let text = spec.ok_or_else(|| invalid("a denoiser is required (--denoiser)"))?;
    let spec: DenoiserSpec = inline_or_file(text)?;
    let den = spec.build(dims, channels, sigma_data)?;
    if den.dims() != dims || den.channels() != channels {
        return Err(Error::DimMismatch(format!(
            "denoiser works on {} x {} channels, run needs {dims} x {channels}",
            den.dims(),
            den.channels()
        )));
    }
    Ok((spec, den))
}

/// Running per-voxel mean and variance (Welford).
struct Moments {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Moments {
            n: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    fn variance(&self) -> Vec<f64> {
        let denom = self.n.saturating_sub(1).max(1) as f64;
        self.m2.iter().map(|s| s / denom).collect()
    }
}

/// Mean absolute percentage error over voxels where the reference is nonzero.
pub fn mape(got: &[f64], reference: &[f64]) -> f64 {
    let (sum, n) = got
        .iter()
        .zip(reference)
        .filter(|(_, r)| r.abs() > 1e-12)
        .fold((0.0, 0usize), |(s, n), (g, r)| (s + ((g - r) / r).abs(), n + 1));
    if n == 0 {
        0.0
    } else {
        100.0 * sum / n as f64
    }
}

fn cmd_gen_kernels(ctx: &Context, a: &GenKernelsArgs) -> Result<Value> {
    let bounds = match &a.bounds {
        Some(p) => inline_or_file::<ParamBounds>(&p.to_string_lossy())?,
        None => ParamBounds::default(),
    };
    let cfg = GenKernelsConfig {
        bounds,
        count: a.count,
        dims: parse_dims(&a.dims)?,
        channels: a.channels,
        mixtures: a.mixtures,
        seed: ctx.seed,
        periodicity_tol: a.periodicity_tol,
        probe: a.probe,
    };
    cfg.validate()?;
    if ctx.dry_run {
        return Ok(json!({"plan": "gen-kernels", "config": cfg, "batch_size": cfg.batch_size(), "out": a.out}));
    }
    let res = gen_kernels(&cfg, |d, t| ctx.report("gen-kernels", d, t))?;
    let index = write_kernels(&a.out, &cfg, &res)?;
    Ok(json!({
        "out": a.out,
        "accepted": index.kernels.len(),
        "batches": index.batches.len(),
        "rejection_fraction": index.rejection_fraction,
    }))
}

fn cmd_sample_grf(ctx: &Context, a: &SampleGrfArgs) -> Result<Value> {
    let dims = parse_dims(&a.dims)?;
    let params: MosmParams = inline_or_file(&a.params.to_string_lossy())?;
    params.validate()?;
    if ctx.dry_run {
        return Ok(json!({"plan": "sample-grf", "dims": dims, "channels": params.channels(), "out": a.out}));
    }
    let cov = kernel_to_grid(&params, dims)?;
    let sampler = MogrfSampler::new(&MogrfSpec::zero_mean(cov))?;
    let x = sampler.sample(&mut seeded(ctx.seed, "sample-grf", 0))?;
    write_field(&a.out, &x, a.dtype)?;
    Ok(json!({
        "out": a.out,
        "dims": dims,
        "channels": x.channels(),
        "clamped_fraction": sampler.clamped_fraction(),
        "max_abs": x.max_abs(),
    }))
}

fn cmd_datagen(ctx: &Context, a: &DatagenArgs) -> Result<Value> {
    let kernels: Vec<NamedKernel> = read_kernels(&a.kernels)?
        .into_iter()
        .map(|(id, params)| NamedKernel { id, params })
        .collect();
    let denoisers: Vec<NamedDenoiser> = inline_or_file(&a.denoisers)?;
    let cfg = DatagenConfig {
        dims: parse_dims(&a.dims)?,
        replicates: a.replicates,
        seed: ctx.seed,
        sampler: SamplerConfig {
            steps: a.steps,
            skip: a.skip,
            s_churn: a.s_churn,
            ..Default::default()
        },
        lgd: LgdOptions {
            renoise: parse_renoise(&a.renoise)?,
            mean_correction: None,
        },
        dtype: a.dtype,
    };
    let plan = pipeline::plan(&cfg, &kernels, &denoisers)?;
    if ctx.dry_run {
        return Ok(json!({"plan": "datagen", "config": cfg, "entries": plan, "out": a.out}));
    }
    let m = pipeline::datagen(&cfg, &kernels, &denoisers, &a.out, |d, t| ctx.report("datagen", d, t))?;
    Ok(json!({
        "manifest": a.out.join(pipeline::MANIFEST_FILE),
        "entries": m.entries.len(),
        "failures": m.failures(),
    }))
}

fn cmd_stats(ctx: &Context, a: &StatsArgs) -> Result<Value> {
    let field = read_input(&a.input)?;
    let pairs = parse_pairs(&a.pairs, field.channels())?;
    if ctx.dry_run {
        return Ok(json!({
            "plan": "stats",
            "dims": field.dims(),
            "pairs": pairs.resolve(field.channels())?,
            "out": a.out,
        }));
    }
    let stats = two_point_stats(&field, &pairs)?;
    write_field(&a.out, &stats.to_field()?, a.dtype)?;
    let sidecar = json!({
        "schema": STATS_SIDECAR_SCHEMA,
        "source": a.input,
        "dims": stats.dims,
        "pairs": stats.pairs,
        "means": stats.means,
        "dtype": a.dtype,
    });
    let sidecar_path = sidecar_of(&a.out);
    write_json(&sidecar_path, &sidecar)?;
    if let Some(v) = &a.vector {
        write_json(v, &StatsVector::from_field(&field)?)?;
    }
    Ok(json!({"out": a.out, "sidecar": sidecar_path, "pairs": stats.pairs, "means": stats.means}))
}

/// `stats.pmf` -> `stats.pmf.json`.
pub fn sidecar_of(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Loads every vector named by `path`, labelled for the report.
fn load_vectors(path: &Path) -> Result<Vec<(String, StatsVector)>> {
    let label = path.display().to_string();
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if !is_json {
        return Ok(vec![(label, StatsVector::from_field(&read_input(path)?)?)]);
    }
    let text = std::fs::read_to_string(path).map_err(|e| io_context(e, path))?;
    let value: Value = serde_json::from_str(&text)?;
    match value.get("schema").and_then(Value::as_str) {
        Some(pipeline::MANIFEST_SCHEMA) => {
            let m = DatasetManifest::read(path)?;
            let dir = path.parent().unwrap_or(Path::new("."));
            m.entries
                .iter()
                .filter(|e| e.status == EntryStatus::Ok)
                .map(|e| {
                    let f = read_input(&dir.join(&e.path))?;
                    Ok((dir.join(&e.path).display().to_string(), StatsVector::from_field(&f)?))
                })
                .collect()
        }
        Some(pipeline::pca::STATS_VECTOR_SCHEMA) => Ok(vec![(label, StatsVector::from_json(&text)?)]),
        other => Err(Error::Format(format!("{label}: unrecognized JSON schema {other:?}"))),
    }
}

fn cmd_pca(ctx: &Context, a: &PcaArgs) -> Result<Value> {
    if ctx.dry_run {
        return Ok(json!({"plan": "pca", "inputs": a.inputs, "components": a.components}));
    }
    let mut items = Vec::new();
    for p in &a.inputs {
        items.extend(load_vectors(p)?);
    }
    if let Some((first, rest)) = items.split_first() {
        if let Some((bad, _)) = rest.iter().find(|(_, v)| v.selection != first.1.selection) {
            return Err(Error::DimMismatch(format!(
                "{bad} uses a different statistics selection than {}",
                first.0
            )));
        }
    }
    let rows: Vec<Vec<f64>> = items.iter().map(|(_, v)| v.values.clone()).collect();
    let res = pipeline::pca(&rows, a.components)?;
    let out = json!({
        "items": items.iter().map(|(l, _)| l).collect::<Vec<_>>(),
        "ratios": res.ratios,
        "components": res.components,
        "scores": res.scores,
    });
    if let Some(p) = &a.out {
        write_json(p, &out)?;
    }
    Ok(out)
}

/// Places a low-resolution volume at every `factor`-th slice of the full grid.
pub fn upsampled_mask(low: &Field3, axis: Axis, factor: usize) -> Result<Mask> {
    if factor < 2 {
        return Err(invalid(format!("factor must be >= 2, got {factor}")));
    }
    let ld = low.dims();
    let full = ld.with_extent(axis, ld.extent(axis) * factor);
    full.validate()?;
    let mut placed = Field3::zeros(full, low.channels())?;
    for c in 0..low.channels() {
        for z in 0..ld.nz {
            for y in 0..ld.ny {
                for x in 0..ld.nx {
                    let mut p = [x, y, z];
                    p[axis.index()] *= factor;
                    placed.set(c, p[0], p[1], p[2], low.get(c, x, y, z));
                }
            }
        }
    }
    Mask::slices(&placed, axis, factor, 0)
}

fn cmd_superres(ctx: &Context, a: &SuperresArgs) -> Result<Value> {
    let low = read_input(&a.input)?;
    low.check_finite()?;
    let mask = upsampled_mask(&low, a.axis, a.factor)?;
    let dims = mask.dims();
    let reference = match &a.reference {
        Some(p) => {
            let r = read_input(p)?;
            if r.dims() != dims || r.channels() != low.channels() {
                return Err(Error::DimMismatch(format!(
                    "reference is {} x {} channels, output is {dims} x {}",
                    r.dims(),
                    r.channels(),
                    low.channels()
                )));
            }
            Some(r)
        }
        None => None,
    };
    let cfg = SamplerConfig {
        steps: a.steps,
        s_churn: a.s_churn,
        ..Default::default()
    };
    cfg.validate()?;
    if a.samples == 0 {
        return Err(invalid("samples must be >= 1"));
    }
    InpaintCond::new(mask.clone(), a.theta)?;
    let (spec, den) = build_denoiser(a.denoiser.as_deref(), dims, low.channels(), cfg.sigma_data)?;
    if ctx.dry_run {
        return Ok(json!({
            "plan": "superres",
            "output_dims": dims,
            "known_fraction": mask.known_count() as f64 / (dims.voxels() * low.channels()) as f64,
            "denoiser": spec,
            "sampler": cfg,
            "samples": a.samples,
            "out_dir": a.out_dir,
        }));
    }
    std::fs::create_dir_all(&a.out_dir)?;
    let mut moments = Moments::new(dims.voxels() * low.channels());
    let mut per_sample = Vec::new();
    for i in 0..a.samples {
        let mut cond = InpaintCond::new(mask.clone(), a.theta)?;
        let mut rng = seeded(ctx.seed, "superres", i as u64);
        let x = sample(None, den.as_ref(), &cfg, Some(&mut cond), &mut rng)?;
        let path = a.out_dir.join(format!("sample_{i:04}.pmf"));
        write_field(&path, &x, a.dtype)?;
        moments.push(x.data());
        let known_err = x
            .data()
            .iter()
            .enumerate()
            .filter(|(j, _)| mask.is_known(*j))
            .map(|(j, v)| (v - placed_value(&mask, &low, a.axis, a.factor, j)).abs())
            .fold(0.0_f64, f64::max);
        let mut entry = json!({"path": path, "known_max_abs_err": known_err});
        if let Some(r) = &reference {
            entry["mape_percent"] = json!(mape(x.data(), r.data()));
        }
        per_sample.push(entry);
        ctx.report("superres", i + 1, a.samples);
    }
    let mean = Field3::from_vec(dims, low.channels(), moments.mean.clone())?;
    let var = Field3::from_vec(dims, low.channels(), moments.variance())?;
    write_field(a.out_dir.join("mean.pmf"), &mean, a.dtype)?;
    write_field(a.out_dir.join("variance.pmf"), &var, a.dtype)?;
    let mut report = json!({
        "output_dims": dims,
        "axis": a.axis,
        "factor": a.factor,
        "theta": a.theta,
        "denoiser": spec,
        "sampler": cfg,
        "seed": ctx.seed,
        "samples": per_sample,
    });
    if let Some(r) = &reference {
        report["mean_mape_percent"] = json!(mape(mean.data(), r.data()));
    }
    write_json(&a.out_dir.join("report.json"), &report)?;
    Ok(report)
}

fn placed_value(mask: &Mask, low: &Field3, axis: Axis, factor: usize, flat: usize) -> f64 {
    let d = mask.dims();
    let s = d.voxels();
    let (c, (x, y, z)) = (flat / s, d.coords(flat % s));
    let mut p = [x, y, z];
    p[axis.index()] /= factor;
    low.get(c, p[0], p[1], p[2])
}

fn parse_image_arg(s: &str) -> Result<(Axis, PathBuf)> {
    let (axis, path) = s
        .split_once('=')
        .ok_or_else(|| invalid(format!("bad image {s:?}, expected AXIS=PATH")))?;
    let axis = Axis::from_str(axis).map_err(Error::Invalid)?;
    Ok((axis, PathBuf::from(path)))
}

fn cmd_expand(ctx: &Context, a: &ExpandArgs) -> Result<Value> {
    let target = match (&a.target_volume, a.images.is_empty()) {
        (Some(p), true) => {
            let vol = read_input(p)?;
            ortho_stats(&vol, &parse_pairs(&a.pairs, vol.channels())?)?
        }
        (None, false) => {
            let parsed = a
                .images
                .iter()
                .map(|s| parse_image_arg(s))
                .collect::<Result<Vec<_>>>()?;
            let images = parsed
                .iter()
                .map(|(axis, p)| Ok((*axis, read_input(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let channels = images.first().map_or(0, |(_, f)| f.channels());
            ortho_stats_from_images(&images, &parse_pairs(&a.pairs, channels)?)?
        }
        _ => return Err(invalid("give either three --image arguments or --target-volume")),
    };
    let channels = target.channels;
    let dims = target.volume_dims()?;
    let reduction = match a.reduction.as_str() {
        "sum" => LossReduction::Sum,
        "mean" => LossReduction::Mean,
        other => return Err(invalid(format!("unknown reduction {other:?}, expected sum or mean"))),
    };
    let opts = OrthoOptions {
        reduction,
        lr: a.lr,
        threshold_slope: a.threshold_slope,
        threshold_floor: a.threshold_floor,
        max_iters: a.max_iters,
        ..Default::default()
    };
    opts.validate()?;
    let cfg = SamplerConfig {
        steps: a.steps,
        s_churn: a.s_churn,
        ..Default::default()
    };
    cfg.validate()?;
    if a.samples == 0 {
        return Err(invalid("samples must be >= 1"));
    }
    let (spec, den) = build_denoiser(a.denoiser.as_deref(), dims, channels, cfg.sigma_data)?;
    if ctx.dry_run {
        return Ok(json!({
            "plan": "expand",
            "output_dims": dims,
            "pairs": target.pairs,
            "denoiser": spec,
            "sampler": cfg,
            "ortho": opts,
            "samples": a.samples,
            "out_dir": a.out_dir,
        }));
    }
    std::fs::create_dir_all(&a.out_dir)?;
    let mut per_sample = Vec::new();
    let mut failure = None;
    for i in 0..a.samples {
        let mut cond = OrthoStatsCond::new(target.clone(), opts.clone())?;
        let mut rng = seeded(ctx.seed, "expand", i as u64);
        match sample(None, den.as_ref(), &cfg, Some(&mut cond), &mut rng) {
            Ok(x) => {
                let path = a.out_dir.join(format!("sample_{i:04}.pmf"));
                write_field(&path, &x, a.dtype)?;
                let got = ortho_stats(&x, &PairSelector::Pairs(target.pairs.clone()))?;
                let planes = got.plane_sq_errors(&target);
                per_sample.push(json!({
                    "path": path,
                    "plane_sq_errors": {"x": planes[0], "y": planes[1], "z": planes[2]},
                    "max_plane_sq_error": planes.iter().copied().fold(0.0, f64::max),
                    "max_abs_error": got.max_abs_diff(&target),
                    "descent_iterations": cond.reports().iter().map(|r| r.iterations).sum::<usize>(),
                }));
            }
            Err(e) => {
                per_sample.push(json!({
                    "status": "failed",
                    "error": e.to_string(),
                    "steps": cond.reports(),
                }));
                failure = Some(e);
                break;
            }
        }
        ctx.report("expand", i + 1, a.samples);
    }
    let report = json!({
        "output_dims": dims,
        "pairs": target.pairs,
        "denoiser": spec,
        "sampler": cfg,
        "ortho": opts,
        "seed": ctx.seed,
        "samples": per_sample,
    });
    write_json(&a.out_dir.join("report.json"), &report)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Byte for a value in `[-1, 1]`; values outside saturate.
pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// RGB bytes of slice `index` normal to `axis`, rows along the slower in-plane axis.
pub fn render_slice(field: &Field3, axis: Axis, index: usize) -> Result<image::RgbImage> {
    if field.channels() != 3 {
        return Err(invalid(format!(
            "rendering needs exactly 3 channels, field has {}",
            field.channels()
        )));
    }
    let n = field.dims().extent(axis);
    if index >= n {
        return Err(invalid(format!("slice index {index} out of range 0..{n} along {axis}")));
    }
    let slice = field.slice(axis, index)?;
    let sd = slice.dims();
    let (w, h) = match axis {
        Axis::X => (sd.ny, sd.nz),
        Axis::Y => (sd.nx, sd.nz),
        Axis::Z => (sd.nx, sd.ny),
    };
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        px.0 = [0, 1, 2].map(|c| to_byte(slice.channel(c)[i]));
    }
    Ok(img)
}

fn cmd_render_slice(ctx: &Context, a: &RenderSliceArgs) -> Result<Value> {
    let field = read_input(&a.input)?;
    if ctx.dry_run {
        render_slice(&Field3::zeros(field.dims().with_extent(a.axis, 1), field.channels())?, a.axis, 0)?;
        if a.index >= field.dims().extent(a.axis) {
            return Err(invalid(format!("slice index {} out of range along {}", a.index, a.axis)));
        }
        return Ok(json!({"plan": "render-slice", "axis": a.axis, "index": a.index, "out": a.out}));
    }
    let img = render_slice(&field, a.axis, a.index)?;
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(&a.out, &bytes)?;
    Ok(json!({"out": a.out, "width": img.width(), "height": img.height()}))
}

fn dispatch(global: &GlobalArgs, command: Command) -> Result<Value> {
    let config: Option<Value> = match &global.config {
        Some(p) => Some(serde_json::from_str(
            &std::fs::read_to_string(p).map_err(|e| io_context(e, p))?,
        )?),
        None => None,
    };
    let config = config.as_ref();
    let ctx = |seed| Context {
        seed,
        progress: global.progress,
        dry_run: global.dry_run,
    };
    macro_rules! run {
        ($args:expr, $f:ident) => {{
            let (args, seed) = merge_config(&$args, global.seed, config)?;
            $f(&ctx(seed), &args)
        }};
    }
    match command {
        Command::GenKernels(a) => run!(a, cmd_gen_kernels),
        Command::SampleGrf(a) => run!(a, cmd_sample_grf),
        Command::Datagen(a) => run!(a, cmd_datagen),
        Command::Stats(a) => run!(a, cmd_stats),
        Command::Pca(a) => run!(a, cmd_pca),
        Command::Superres(a) => run!(a, cmd_superres),
        Command::Expand(a) => run!(a, cmd_expand),
        Command::RenderSlice(a) => run!(a, cmd_render_slice),
    }
}

/// Runs a parsed command line, honouring `--threads`.
pub fn run(cli: Cli) -> Result<Value> {
    let Cli { global, command } = cli;
    match global.threads {
        Some(0) => Err(invalid("--threads must be >= 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?
            .install(|| dispatch(&global, command)),
        None => dispatch(&global, command),
    }
}

/// JSON error object written to stderr on failure.
pub fn error_object(e: &Error) -> Value {
    json!({"error": {"kind": e.kind(), "message": e.to_string(), "exit_code": e.exit_code()}})
}

/// Parses `args`, runs, prints the outcome and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let obj = json!({"error": {"kind": "usage", "message": e.to_string().trim_end(), "exit_code": 2}});
            eprintln!("{obj}");
            return 2;
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match run(cli) {
        Ok(v) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            0
        }
        Err(e) => {
            eprintln!("{}", error_object(&e));
            e.exit_code()
        }
    }
}
