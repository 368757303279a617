//! The combinatorial generation loop: every denoiser, kernel and replicate
//! yields one MOGRF sample refined by the truncated sampler.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{lgd_refine, Denoiser, DenoiserSpec, LgdOptions, SamplerConfig};
use crate::error::{invalid, Error, Result};
use crate::field::{Dims, Field3};
use crate::mogrf::{MogrfSampler, MogrfSpec};
use crate::mosm::{kernel_to_grid, validate_kernel, MosmParams, Validation, DEFAULT_PERIODICITY_TOL};
use crate::pmf::{write_atomic, write_field, Dtype};

use super::seeds::entry_seed;

pub const MANIFEST_SCHEMA: &str = "grainfield.manifest.v1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedDenoiser {
    pub id: String,
    pub spec: DenoiserSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedKernel {
    pub id: String,
    pub params: MosmParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenConfig {
    pub dims: Dims,
    pub replicates: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub lgd: LgdOptions,
    pub dtype: Dtype,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            dims: Dims { nx: 32, ny: 32, nz: 32 },
            replicates: 3,
            seed: 0,
            sampler: SamplerConfig {
                steps: 24,
                skip: 12,
                ..Default::default()
            },
            lgd: LgdOptions::default(),
            dtype: Dtype::F32,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.replicates == 0 {
            return Err(invalid("replicates must be >= 1"));
        }
        if self.sampler.skip == 0 || self.sampler.skip > self.sampler.steps {
            return Err(invalid(format!(
                "datagen needs 1 <= skip <= steps, got skip {} of {}",
                self.sampler.skip, self.sampler.steps
            )));
        }
        let mut probe = self.sampler.clone();
        probe.skip = 0;
        probe.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EntryStatus {
    Ok,
    Failed { kind: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Field file, relative to the manifest.
    pub path: String,
    pub kernel_id: String,
    pub denoiser_id: String,
    pub replicate: usize,
    pub seed: u64,
    /// The kernel's periodicity verdict on the generation grid.
    pub acceptance: Validation,
    /// Share of the reference spectrum clamped to zero by the MOGRF sampler.
    pub clamped_fraction: f64,
    pub status: EntryStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema: String,
    pub config: DatagenConfig,
    pub kernels: Vec<NamedKernel>,
    pub denoisers: Vec<NamedDenoiser>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn failures(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.status != EntryStatus::Ok)
            .count()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(Error::Format(format!("unknown manifest schema {:?}", m.schema)));
        }
        Ok(m)
    }
}

/// What datagen would do, without doing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatagenPlan {
    pub entries: usize,
    pub denoisers: Vec<String>,
    pub kernels: Vec<String>,
    pub replicates: usize,
    pub executed_steps: usize,
}

fn check_ids<'a>(ids: impl Iterator<Item = &'a str>, what: &str) -> Result<Vec<String>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for id in ids {
        let safe = !id.is_empty()
            && id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.');
        if !safe || id.starts_with('.') {
            return Err(invalid(format!("{what} id {id:?} must be a plain file-name token")));
        }
        if !seen.insert(id) {
            return Err(invalid(format!("duplicate {what} id {id:?}")));
        }
        out.push(id.to_string());
    }
    Ok(out)
}

pub fn plan(cfg: &DatagenConfig, kernels: &[NamedKernel], denoisers: &[NamedDenoiser]) -> Result<DatagenPlan> {
    cfg.validate()?;
    let k = check_ids(kernels.iter().map(|k| k.id.as_str()), "kernel")?;
    let d = check_ids(denoisers.iter().map(|d| d.id.as_str()), "denoiser")?;
    if k.is_empty() || d.is_empty() {
        return Err(invalid("datagen needs at least one kernel and one denoiser"));
    }
    for kernel in kernels {
        kernel.params.validate()?;
    }
    Ok(DatagenPlan {
        entries: k.len() * d.len() * cfg.replicates,
        denoisers: d,
        kernels: k,
        replicates: cfg.replicates,
        executed_steps: cfg.sampler.steps - cfg.sampler.skip,
    })
}

pub fn entry_path(denoiser_id: &str, kernel_id: &str, replicate: usize) -> String {
    format!("fields/{denoiser_id}__{kernel_id}__r{replicate}.pmf")
}

/// One field: MOGRF sample from `sampler` refined by `denoiser`, all driven by `seed`.
pub fn generate_entry(
    cfg: &DatagenConfig,
    sampler: &MogrfSampler,
    denoiser: &dyn Denoiser,
    seed: u64,
) -> Result<Field3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = sampler.sample(&mut rng)?;
    lgd_refine(&x, denoiser, &cfg.sampler, &cfg.lgd, &mut rng)
}

/// Regenerates the field of a manifest entry from its recorded seed.
pub fn regenerate(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<Field3> {
    let cfg = &manifest.config;
    let kernel = manifest
        .kernels
        .iter()
        .find(|k| k.id == entry.kernel_id)
        .ok_or_else(|| invalid(format!("manifest lacks kernel {}", entry.kernel_id)))?;
    let den = manifest
        .denoisers
        .iter()
        .find(|d| d.id == entry.denoiser_id)
        .ok_or_else(|| invalid(format!("manifest lacks denoiser {}", entry.denoiser_id)))?;
    let cov = kernel_to_grid(&kernel.params, cfg.dims)?;
    let sampler = MogrfSampler::new(&MogrfSpec::zero_mean(cov))?;
    let denoiser = den.spec.build(cfg.dims, kernel.params.channels(), cfg.sampler.sigma_data)?;
    let x = generate_entry(cfg, &sampler, denoiser.as_ref(), entry.seed)?;
    // Round through the stored precision so regenerated fields compare to files bit for bit.
    Ok(match cfg.dtype {
        Dtype::F32 => x.map(|v| v as f32 as f64),
        Dtype::F64 => x,
    })
}

/// Runs every `(denoiser, kernel, replicate)` combination and writes the
/// fields and `manifest.json` under `out_dir`. Entry failures are recorded,
/// not raised.
pub fn datagen(
    cfg: &DatagenConfig,
    kernels: &[NamedKernel],
    denoisers: &[NamedDenoiser],
    out_dir: &Path,
    progress: impl Fn(usize, usize) + Sync,
) -> Result<DatasetManifest> {
    let p = plan(cfg, kernels, denoisers)?;
    let channels = kernels[0].params.channels();
    if kernels.iter().any(|k| k.params.channels() != channels) {
        return Err(invalid("all kernels must have the same channel count"));
    }
    std::fs::create_dir_all(out_dir.join("fields"))?;

    struct Prepared {
        sampler: Result<MogrfSampler>,
        acceptance: Validation,
    }
    let prepared: Vec<Prepared> = kernels
        .iter()
        .map(|k| match kernel_to_grid(&k.params, cfg.dims) {
            Ok(cov) => Prepared {
                acceptance: validate_kernel(&cov, DEFAULT_PERIODICITY_TOL, None),
                sampler: MogrfSampler::new(&MogrfSpec::zero_mean(cov)),
            },
            Err(e) => Prepared {
                acceptance: Validation::Reject(crate::mosm::RejectReason::Degenerate),
                sampler: Err(e),
            },
        })
        .collect();
    let built: Vec<Result<Box<dyn Denoiser>>> = denoisers
        .iter()
        .map(|d| d.spec.build(cfg.dims, channels, cfg.sampler.sigma_data))
        .collect();

    let jobs: Vec<(usize, usize, usize)> = (0..denoisers.len())
        .flat_map(|d| (0..kernels.len()).flat_map(move |k| (0..cfg.replicates).map(move |r| (d, k, r))))
        .collect();
    let done = AtomicUsize::new(0);
    let entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .map(|&(d, k, r)| {
            let (kid, did) = (&kernels[k].id, &denoisers[d].id);
            let seed = entry_seed(cfg.seed, kid, did, r);
            let path = entry_path(did, kid, r);
            let outcome = (|| -> Result<f64> {
                let sampler = prepared[k].sampler.as_ref().map_err(clone_error)?;
                let den = built[d].as_ref().map_err(clone_error)?;
                let x = generate_entry(cfg, sampler, den.as_ref(), seed)?;
                write_field(out_dir.join(&path), &x, cfg.dtype)?;
                Ok(sampler.clamped_fraction())
            })();
            let n = done.fetch_add(1, Ordering::Relaxed) + 1;
            progress(n, jobs.len());
            let (status, clamped_fraction) = match outcome {
                Ok(c) => (EntryStatus::Ok, c),
                Err(e) => {
                    log::warn!("entry {path} failed: {e}");
                    (
                        EntryStatus::Failed {
                            kind: e.kind().into(),
                            message: e.to_string(),
                        },
                        0.0,
                    )
                }
            };
            ManifestEntry {
                path,
                kernel_id: kid.clone(),
                denoiser_id: did.clone(),
                replicate: r,
                seed,
                acceptance: prepared[k].acceptance.clone(),
                clamped_fraction,
                status,
            }
        })
        .collect();
    debug_assert_eq!(entries.len(), p.entries);
    let manifest = DatasetManifest {
        schema: MANIFEST_SCHEMA.into(),
        config: cfg.clone(),
        kernels: kernels.to_vec(),
        denoisers: denoisers.to_vec(),
        entries,
    };
    write_atomic(
        &out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

/// Errors are not `Clone`; shared setup failures are re-reported per entry.
fn clone_error(e: &Error) -> Error {
    match e {
        Error::Invalid(m) => Error::Invalid(m.clone()),
        Error::DimMismatch(m) => Error::DimMismatch(m.clone()),
        Error::Degenerate(m) => Error::Degenerate(m.clone()),
        Error::Denoiser(m) => Error::Denoiser(m.clone()),
        Error::Format(m) => Error::Format(m.clone()),
        Error::NotConverged(m) => Error::NotConverged(m.clone()),
        other => Error::Denoiser(format!("setup failed: {other}")),
    }
}

/// Absolute path of an entry's field file.
pub fn entry_file(manifest_dir: &Path, entry: &ManifestEntry) -> PathBuf {
    manifest_dir.join(&entry.path)
}
