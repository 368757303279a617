//! Second-order stochastic diffusion sampling with post-step conditioning.

pub mod cond;
pub mod edm;
pub mod external;
pub mod gaussian;

use std::path::PathBuf;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{Dims, Field3};
use crate::mosm::MosmParams;

pub use cond::{
    Chain, Conditioner, Identity, InpaintCond, Mask, MeanCorrection, OrthoOptions, OrthoStatsCond,
    OrthoStepReport, DEFAULT_INPAINT_FRACTION,
};
pub use edm::{EdmCoefficients, EdmPreconditioned, RawModel, DEFAULT_SIGMA_DATA};
pub use external::ExternalDenoiser;
pub use gaussian::GaussianDenoiser;

/// `D(x; sigma)`: an estimate of the clean field given a noisy one.
pub trait Denoiser: Send + Sync {
    fn dims(&self) -> Dims;
    fn channels(&self) -> usize;
    fn denoise(&self, x: &Field3, sigma: f64) -> Result<Field3>;
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn dims(&self) -> Dims {
        (**self).dims()
    }
    fn channels(&self) -> usize {
        (**self).channels()
    }
    fn denoise(&self, x: &Field3, sigma: f64) -> Result<Field3> {
        (**self).denoise(x, sigma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub s_churn: f64,
    pub s_noise: f64,
    pub s_tmin: f64,
    /// Upper end of the churn window; `None` is unbounded.
    pub s_tmax: Option<f64>,
    /// Data scale used when wrapping raw models.
    pub sigma_data: f64,
    /// First step executed; later starts need an initial state.
    pub skip: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 64,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            s_churn: 0.0,
            s_noise: 1.0,
            s_tmin: 0.0,
            s_tmax: None,
            sigma_data: DEFAULT_SIGMA_DATA,
            skip: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_pos = |v: f64| v > 0.0 && v.is_finite();
        if self.steps == 0 {
            return Err(invalid("sampler needs at least one step"));
        }
        if !(finite_pos(self.sigma_min) && finite_pos(self.sigma_max) && self.sigma_min < self.sigma_max) {
            return Err(invalid(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !finite_pos(self.rho) || !finite_pos(self.sigma_data) {
            return Err(invalid("rho and sigma_data must be positive"));
        }
        if !(self.s_churn >= 0.0 && self.s_churn.is_finite())
            || !(self.s_noise >= 0.0 && self.s_noise.is_finite())
            || !(self.s_tmin >= 0.0)
            || self.s_tmax.is_some_and(|t| !(t >= self.s_tmin))
        {
            return Err(invalid("churn parameters must be non-negative with s_tmin <= s_tmax"));
        }
        if self.skip >= self.steps {
            return Err(invalid(format!(
                "skip {} must be below the step count {}",
                self.skip, self.steps
            )));
        }
        Ok(())
    }

    /// Churn factor for a step starting at noise level `t`.
    pub fn gamma(&self, t: f64) -> f64 {
        let inside = t >= self.s_tmin && self.s_tmax.is_none_or(|m| t <= m);
        if inside {
            (self.s_churn / self.steps as f64).min(std::f64::consts::SQRT_2 - 1.0)
        } else {
            0.0
        }
    }
}

/// `t_0 .. t_N`: the rho-warped ramp from `sigma_max` to `sigma_min`, then 0.
pub fn noise_schedule(cfg: &SamplerConfig) -> Result<Vec<f64>> {
    let mut c = cfg.clone();
    c.skip = 0;
    c.validate()?;
    let n = cfg.steps;
    let inv = 1.0 / cfg.rho;
    let (hi, lo) = (cfg.sigma_max.powf(inv), cfg.sigma_min.powf(inv));
    let mut t: Vec<f64> = (0..n)
        .map(|i| {
            if i == 0 {
                cfg.sigma_max
            } else if i == n - 1 {
                cfg.sigma_min
            } else {
                (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(cfg.rho)
            }
        })
        .collect();
    t.push(0.0);
    Ok(t)
}

/// One recorded action of the sampler, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Churn { step: usize, gamma: f64, t_hat: f64 },
    Denoise { step: usize, sigma: f64 },
    Euler { step: usize },
    Correction { step: usize },
    Condition { step: usize },
}

fn standard_field<R: Rng + ?Sized>(dims: Dims, channels: usize, scale: f64, rng: &mut R) -> Result<Field3> {
    let n = dims.checked_voxels(channels)?;
    let data = (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Field3::from_vec(dims, channels, data)?)
}

fn call_denoiser(den: &dyn Denoiser, x: &Field3, sigma: f64) -> Result<Field3> {
    let out = den.denoise(x, sigma)?;
    if !out.same_shape(x) {
        return Err(Error::Denoiser(format!(
            "denoiser returned {} channels on {}, expected {} on {}",
            out.channels(),
            out.dims(),
            x.channels(),
            x.dims()
        )));
    }
    Ok(out)
}

/// Runs the sampler from `cfg.skip`; see [`sample_traced`].
pub fn sample<R: Rng + ?Sized>(
    x_init: Option<Field3>,
    denoiser: &dyn Denoiser,
    cfg: &SamplerConfig,
    cond: Option<&mut dyn Conditioner>,
    rng: &mut R,
) -> Result<Field3> {
    run(x_init, denoiser, cfg, cond, rng, None)
}

/// Runs the sampler and records every action in `trace`.
///
/// Each step injects churn noise, takes an Euler step, corrects it with a
/// second denoiser evaluation unless the next level is 0, and only then
/// applies the conditioner.
pub fn sample_traced<R: Rng + ?Sized>(
    x_init: Option<Field3>,
    denoiser: &dyn Denoiser,
    cfg: &SamplerConfig,
    cond: Option<&mut dyn Conditioner>,
    rng: &mut R,
    trace: &mut Vec<TraceEvent>,
) -> Result<Field3> {
    run(x_init, denoiser, cfg, cond, rng, Some(trace))
}

fn run<R: Rng + ?Sized>(
    x_init: Option<Field3>,
    den: &dyn Denoiser,
    cfg: &SamplerConfig,
    mut cond: Option<&mut dyn Conditioner>,
    rng: &mut R,
    mut trace: Option<&mut Vec<TraceEvent>>,
) -> Result<Field3> {
    cfg.validate()?;
    let t = noise_schedule(cfg)?;
    let n = cfg.steps;
    let (dims, h) = (den.dims(), den.channels());
    let mut x = match (cfg.skip, x_init) {
        (0, None) => standard_field(dims, h, t[0], rng)?,
        (0, Some(_)) => return Err(invalid("an initial state is only used when skip > 0")),
        (_, None) => return Err(invalid("skip > 0 needs an initial state")),
        (_, Some(x)) => {
            if x.dims() != dims || x.channels() != h {
                return Err(Error::DimMismatch(format!(
                    "initial state is {} channels on {}, denoiser serves {h} on {dims}",
                    x.channels(),
                    x.dims()
                )));
            }
            x
        }
    };
    let mut log = |e: TraceEvent| {
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(e);
        }
    };
    for i in cfg.skip..n {
        let eps = standard_field(dims, h, cfg.s_noise, rng)?;
        let gamma = cfg.gamma(t[i]);
        let t_hat = t[i] + gamma * t[i];
        log(TraceEvent::Churn { step: i, gamma, t_hat });
        let mut x_hat = x;
        x_hat.axpy((t_hat * t_hat - t[i] * t[i]).sqrt(), &eps);

        log(TraceEvent::Denoise { step: i, sigma: t_hat });
        let d0 = call_denoiser(den, &x_hat, t_hat)?;
        // d_i = (x_hat - D) / t_hat
        let d: Vec<f64> = x_hat
            .data()
            .iter()
            .zip(d0.data())
            .map(|(a, b)| (a - b) / t_hat)
            .collect();
        let dt = t[i + 1] - t_hat;
        let mut next = x_hat.clone();
        next.data_mut().iter_mut().zip(&d).for_each(|(v, di)| *v += dt * di);
        log(TraceEvent::Euler { step: i });

        if t[i + 1] != 0.0 {
            log(TraceEvent::Denoise { step: i, sigma: t[i + 1] });
            let d1 = call_denoiser(den, &next, t[i + 1])?;
            let tn = t[i + 1];
            for (((v, xh), di), dn) in next
                .data_mut()
                .iter_mut()
                .zip(x_hat.data())
                .zip(&d)
                .zip(d1.data())
            {
                let dp = (*v - dn) / tn;
                *v = xh + dt * (0.5 * di + 0.5 * dp);
            }
            log(TraceEvent::Correction { step: i });
        }

        if let Some(c) = cond.as_deref_mut() {
            c.condition(&mut next, i, n)?;
            log(TraceEvent::Condition { step: i });
        }
        if next.check_finite().is_err() {
            return Err(Error::NonFinite {
                step: i,
                sigma: t_hat,
            });
        }
        x = next;
    }
    Ok(x)
}

/// How the field is brought to the noise level of the first executed step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Renoise {
    /// Add white noise at level `t_skip` before refining.
    #[default]
    Sdedit,
    /// Start from the field unchanged.
    None,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LgdOptions {
    pub renoise: Renoise,
    /// Target per-channel means re-imposed after every step.
    pub mean_correction: Option<Vec<f64>>,
}

/// Refines a global field with the truncated sampler starting at `cfg.skip`.
/// `skip == steps` returns the field unchanged.
pub fn lgd_refine<R: Rng + ?Sized>(
    x_grf: &Field3,
    denoiser: &dyn Denoiser,
    cfg: &SamplerConfig,
    opts: &LgdOptions,
    rng: &mut R,
) -> Result<Field3> {
    if x_grf.dims() != denoiser.dims() || x_grf.channels() != denoiser.channels() {
        return Err(Error::DimMismatch(format!(
            "field is {} channels on {}, denoiser serves {} on {}",
            x_grf.channels(),
            x_grf.dims(),
            denoiser.channels(),
            denoiser.dims()
        )));
    }
    if cfg.skip == cfg.steps {
        return Ok(x_grf.clone());
    }
    if cfg.skip == 0 {
        return Err(invalid("refinement needs skip >= 1"));
    }
    let t = noise_schedule(cfg)?;
    let mut x = x_grf.clone();
    if opts.renoise == Renoise::Sdedit {
        let eps = standard_field(x.dims(), x.channels(), 1.0, rng)?;
        x.axpy(t[cfg.skip], &eps);
    }
    let mut mc = opts
        .mean_correction
        .clone()
        .map(|means| MeanCorrection { means });
    let cond = mc.as_mut().map(|c| c as &mut dyn Conditioner);
    sample(Some(x), denoiser, cfg, cond, rng)
}

/// A denoiser named by kind, as stored in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DenoiserSpec {
    /// Exact Gaussian denoiser: MOSM prior from `params` when given, else a
    /// white prior with per-voxel `variance`.
    Gaussian {
        #[serde(default)]
        params: Option<PathBuf>,
        #[serde(default = "one")]
        variance: f64,
        #[serde(default)]
        means: Option<Vec<f64>>,
    },
    /// A child process speaking the request protocol of [`external`].
    External {
        command: String,
        #[serde(default)]
        args: Vec<String>,
        /// Wrap the child as a raw model under EDM preconditioning.
        #[serde(default)]
        raw: bool,
    },
}

fn one() -> f64 {
    1.0
}

impl DenoiserSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            DenoiserSpec::Gaussian { .. } => "gaussian",
            DenoiserSpec::External { .. } => "external",
        }
    }

    /// Instantiates the denoiser on `dims` with `channels` channels.
    pub fn build(&self, dims: Dims, channels: usize, sigma_data: f64) -> Result<Box<dyn Denoiser>> {
        match self {
            DenoiserSpec::Gaussian {
                params,
                variance,
                means,
            } => {
                let mut den = match params {
                    Some(path) => {
                        let text = std::fs::read_to_string(path).map_err(|e| {
                            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
                        })?;
                        let p = MosmParams::from_json(&text)?;
                        if p.channels() != channels {
                            return Err(Error::DimMismatch(format!(
                                "prior {} has {} channels, expected {channels}",
                                path.display(),
                                p.channels()
                            )));
                        }
                        GaussianDenoiser::from_mosm(&p, dims)?
                    }
                    None => GaussianDenoiser::white(dims, channels, *variance)?,
                };
                if let Some(m) = means {
                    den = den.with_prior_means(m.clone())?;
                }
                Ok(Box::new(den))
            }
            DenoiserSpec::External { command, args, raw } => {
                let ext = ExternalDenoiser::spawn(command, args, dims, channels)?;
                if *raw {
                    Ok(Box::new(EdmPreconditioned::new(ext, sigma_data)?))
                } else {
                    Ok(Box::new(ext))
                }
            }
        }
    }
}
