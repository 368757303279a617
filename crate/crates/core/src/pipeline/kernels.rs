//! Design-of-experiments kernel generation with rejection.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::Dims;
use crate::mogrf::{MogrfSampler, MogrfSpec};
use crate::mosm::{
    kernel_to_grid, sample_params_lhs, validate_kernel, MosmParams, ParamBounds, RejectReason, Validation,
    DEFAULT_PERIODICITY_TOL,
};
use crate::pmf::write_atomic;
use crate::stats::CovarianceGrid;

use super::seeds::stream_seed;

pub const KERNEL_INDEX_SCHEMA: &str = "grainfield.kernels.v1";

/// Batches after which a vanishing acceptance rate aborts generation.
pub const ABORT_AFTER_BATCHES: usize = 10;
/// Acceptance rate below which generation aborts.
pub const MIN_ACCEPTANCE_RATE: f64 = 1e-3;
/// Smallest LHS batch.
pub const MIN_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenKernelsConfig {
    pub bounds: ParamBounds,
    pub count: usize,
    pub dims: Dims,
    pub channels: usize,
    pub mixtures: usize,
    pub seed: u64,
    pub periodicity_tol: f64,
    /// Also reject kernels whose MOGRF probe sample leaves `[-1, 1]`.
    pub probe: bool,
}

impl Default for GenKernelsConfig {
    fn default() -> Self {
        GenKernelsConfig {
            bounds: ParamBounds::default(),
            count: 10,
            dims: Dims { nx: 32, ny: 32, nz: 32 },
            channels: 3,
            mixtures: 4,
            seed: 0,
            periodicity_tol: DEFAULT_PERIODICITY_TOL,
            probe: false,
        }
    }
}

impl GenKernelsConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        self.dims.validate()?;
        if self.count == 0 || self.channels == 0 || self.mixtures == 0 {
            return Err(invalid("count, channels and mixtures must be >= 1"));
        }
        if !(self.periodicity_tol > 0.0) {
            return Err(invalid("periodicity tolerance must be positive"));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.count.max(MIN_BATCH)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: usize,
    pub proposed: usize,
    pub accepted: usize,
    pub rejection_fraction: f64,
    pub rejections: Vec<RejectReason>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcceptedKernel {
    pub id: String,
    pub params: MosmParams,
    pub cov: CovarianceGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenKernelsResult {
    pub kernels: Vec<AcceptedKernel>,
    pub batches: Vec<BatchRecord>,
}

impl GenKernelsResult {
    pub fn rejection_fraction(&self) -> f64 {
        let proposed: usize = self.batches.iter().map(|b| b.proposed).sum();
        let accepted: usize = self.batches.iter().map(|b| b.accepted).sum();
        if proposed == 0 {
            0.0
        } else {
            1.0 - accepted as f64 / proposed as f64
        }
    }
}

pub fn kernel_id(i: usize) -> String {
    format!("k{i:05}")
}

fn classify(cfg: &GenKernelsConfig, params: &MosmParams, probe_seed: u64) -> Result<(Validation, CovarianceGrid)> {
    let cov = kernel_to_grid(params, cfg.dims)?;
    let mut verdict = validate_kernel(&cov, cfg.periodicity_tol, None);
    if cfg.probe && verdict.is_accept() {
        let spec = MogrfSpec::zero_mean(cov.clone());
        verdict = match MogrfSampler::new(&spec) {
            Ok(s) => {
                let x = s.sample(&mut ChaCha8Rng::seed_from_u64(probe_seed))?;
                validate_kernel(&cov, cfg.periodicity_tol, Some(&x))
            }
            Err(Error::Degenerate(_)) => Validation::Reject(RejectReason::Degenerate),
            Err(e) => return Err(e),
        };
    }
    Ok((verdict, cov))
}

/// Draws LHS batches of `max(count, 8)` parameter sets until `count` pass
/// validation. Aborts when fewer than 0.1% have been accepted after 10 batches.
pub fn gen_kernels(cfg: &GenKernelsConfig, mut progress: impl FnMut(usize, usize)) -> Result<GenKernelsResult> {
    cfg.validate()?;
    let mut kernels = Vec::with_capacity(cfg.count);
    let mut batches = Vec::new();
    let (mut proposed, mut accepted) = (0usize, 0usize);
    while kernels.len() < cfg.count {
        let b = batches.len();
        let n = cfg.batch_size();
        let params = sample_params_lhs(
            &cfg.bounds,
            n,
            cfg.mixtures,
            cfg.channels,
            stream_seed(cfg.seed, "lhs", b as u64),
        )?;
        let verdicts: Vec<Result<(Validation, CovarianceGrid)>> = params
            .par_iter()
            .enumerate()
            .map(|(i, p)| classify(cfg, p, stream_seed(cfg.seed, "probe", (b * n + i) as u64)))
            .collect();
        let mut record = BatchRecord {
            batch: b,
            proposed: n,
            accepted: 0,
            rejection_fraction: 0.0,
            rejections: Vec::new(),
        };
        for (p, v) in params.into_iter().zip(verdicts) {
            let (verdict, cov) = v?;
            match verdict {
                Validation::Accept => {
                    record.accepted += 1;
                    if kernels.len() < cfg.count {
                        kernels.push(AcceptedKernel {
                            id: kernel_id(kernels.len()),
                            params: p,
                            cov,
                        });
                    }
                }
                Validation::Reject(r) => record.rejections.push(r),
            }
        }
        record.rejection_fraction = 1.0 - record.accepted as f64 / n as f64;
        proposed += n;
        accepted += record.accepted;
        log::info!(
            "kernel batch {b}: {} of {n} accepted ({:.1}% rejected)",
            record.accepted,
            100.0 * record.rejection_fraction
        );
        batches.push(record);
        progress(kernels.len(), cfg.count);
        if batches.len() >= ABORT_AFTER_BATCHES
            && kernels.len() < cfg.count
            && (accepted as f64) < MIN_ACCEPTANCE_RATE * proposed as f64
        {
            return Err(Error::NotConverged(format!(
                "only {accepted} of {proposed} kernels accepted after {} batches; check the bounds",
                batches.len()
            )));
        }
    }
    Ok(GenKernelsResult { kernels, batches })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelIndexEntry {
    pub id: String,
    /// Parameter file, relative to the index.
    pub params: String,
}

/// The on-disk listing written by [`write_kernels`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelIndex {
    pub schema: String,
    pub config: GenKernelsConfig,
    pub kernels: Vec<KernelIndexEntry>,
    pub batches: Vec<BatchRecord>,
    pub rejection_fraction: f64,
}

pub const KERNEL_INDEX_FILE: &str = "kernels.json";

/// Writes one parameter file per kernel plus `kernels.json` into `dir`.
pub fn write_kernels(dir: &Path, cfg: &GenKernelsConfig, result: &GenKernelsResult) -> Result<KernelIndex> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for k in &result.kernels {
        let name = format!("{}.json", k.id);
        write_atomic(&dir.join(&name), k.params.to_json()?.as_bytes())?;
        entries.push(KernelIndexEntry {
            id: k.id.clone(),
            params: name,
        });
    }
    let index = KernelIndex {
        schema: KERNEL_INDEX_SCHEMA.into(),
        config: cfg.clone(),
        kernels: entries,
        batches: result.batches.clone(),
        rejection_fraction: result.rejection_fraction(),
    };
    write_atomic(&dir.join(KERNEL_INDEX_FILE), serde_json::to_string_pretty(&index)?.as_bytes())?;
    Ok(index)
}

/// Loads `(id, params)` pairs from a directory written by [`write_kernels`].
pub fn read_kernels(dir: &Path) -> Result<Vec<(String, MosmParams)>> {
    let text = std::fs::read_to_string(dir.join(KERNEL_INDEX_FILE))?;
    let index: KernelIndex = serde_json::from_str(&text)?;
    if index.schema != KERNEL_INDEX_SCHEMA {
        return Err(Error::Format(format!("unknown kernel index schema {:?}", index.schema)));
    }
    index
        .kernels
        .iter()
        .map(|e| {
            let text = std::fs::read_to_string(dir.join(&e.params))?;
            Ok((e.id.clone(), MosmParams::from_json(&text)?))
        })
        .collect()
}
