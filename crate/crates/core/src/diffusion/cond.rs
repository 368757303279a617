//! Conditioning functions applied after each sampler step.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{Axis, Dims, Field3};
use crate::stats::{stats_loss_and_grad, LossReduction, OrthoStats};

/// Called with the state after step `step` of `n_steps` has been taken.
pub trait Conditioner {
    fn condition(&mut self, x: &mut Field3, step: usize, n_steps: usize) -> Result<()>;
}

impl<F> Conditioner for F
where
    F: FnMut(&mut Field3, usize, usize) -> Result<()>,
{
    fn condition(&mut self, x: &mut Field3, step: usize, n_steps: usize) -> Result<()> {
        self(x, step, n_steps)
    }
}

/// Leaves the state untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Conditioner for Identity {
    fn condition(&mut self, _: &mut Field3, _: usize, _: usize) -> Result<()> {
        Ok(())
    }
}

/// Applies each conditioner in order.
#[derive(Default)]
pub struct Chain<'a>(pub Vec<Box<dyn Conditioner + 'a>>);

impl Conditioner for Chain<'_> {
    fn condition(&mut self, x: &mut Field3, step: usize, n_steps: usize) -> Result<()> {
        self.0.iter_mut().try_for_each(|c| c.condition(x, step, n_steps))
    }
}

/// Known values on a subset of voxels and channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    dims: Dims,
    channels: usize,
    known: Vec<bool>,
    values: Vec<f64>,
}

impl Mask {
    /// A mask with nothing known.
    pub fn empty(dims: Dims, channels: usize) -> Result<Self> {
        let n = dims.checked_voxels(channels)?;
        Ok(Mask {
            dims,
            channels,
            known: vec![false; n],
            values: vec![0.0; n],
        })
    }

    /// Known wherever `known` is set, with values taken from `field`.
    pub fn from_field(field: &Field3, known: Vec<bool>) -> Result<Self> {
        if known.len() != field.data().len() {
            return Err(Error::DimMismatch(format!(
                "mask flags have {} entries, field has {}",
                known.len(),
                field.data().len()
            )));
        }
        let mask = Mask {
            dims: field.dims(),
            channels: field.channels(),
            values: field
                .data()
                .iter()
                .zip(&known)
                .map(|(&v, &k)| if k { v } else { 0.0 })
                .collect(),
            known,
        };
        mask.validate()?;
        Ok(mask)
    }

    /// Every `stride`-th slice normal to `axis` (starting at `offset`) known
    /// from `field`, in all channels.
    pub fn slices(field: &Field3, axis: Axis, stride: usize, offset: usize) -> Result<Self> {
        if stride == 0 {
            return Err(invalid("slice stride must be >= 1"));
        }
        let d = field.dims();
        let s = d.voxels();
        let known = (0..field.data().len())
            .map(|i| {
                let (x, y, z) = d.coords(i % s);
                let c = [x, y, z][axis.index()];
                c >= offset && (c - offset).is_multiple_of(stride)
            })
            .collect();
        Self::from_field(field, known)
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: f64) -> Result<()> {
        if !v.is_finite() {
            return Err(invalid(format!("known value {v} is not finite")));
        }
        let i = c * self.dims.voxels() + self.dims.index(x, y, z);
        self.known[i] = true;
        self.values[i] = v;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .known
            .iter()
            .zip(&self.values)
            .any(|(&k, v)| k && !v.is_finite())
        {
            return Err(invalid("mask holds a non-finite known value"));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_known(&self, flat: usize) -> bool {
        self.known[flat]
    }

    pub fn known_count(&self) -> usize {
        self.known.iter().filter(|&&k| k).count()
    }

    /// Overwrites the known entries of `x`.
    pub fn apply(&self, x: &mut Field3) -> Result<()> {
        if x.dims() != self.dims || x.channels() != self.channels {
            return Err(Error::DimMismatch(format!(
                "mask is {} channels on {}, field is {} on {}",
                self.channels,
                self.dims,
                x.channels(),
                x.dims()
            )));
        }
        for ((v, &k), &m) in x.data_mut().iter_mut().zip(&self.known).zip(&self.values) {
            if k {
                *v = m;
            }
        }
        Ok(())
    }
}

/// Replaces known values while `step < theta * n_steps`.
#[derive(Debug, Clone)]
pub struct InpaintCond {
    mask: Mask,
    theta: f64,
}

/// Fraction of steps that enforce the mask by default.
pub const DEFAULT_INPAINT_FRACTION: f64 = 0.75;

impl InpaintCond {
    pub fn new(mask: Mask, theta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(invalid(format!("inpainting fraction must lie in [0, 1], got {theta}")));
        }
        mask.validate()?;
        Ok(InpaintCond { mask, theta })
    }

    pub fn fires(&self, step: usize, n_steps: usize) -> bool {
        (step as f64) < self.theta * n_steps as f64
    }
}

impl Conditioner for InpaintCond {
    fn condition(&mut self, x: &mut Field3, step: usize, n_steps: usize) -> Result<()> {
        if self.fires(step, n_steps) {
            self.mask.apply(x)?;
        }
        Ok(())
    }
}

/// Per-channel re-centering onto target spatial means.
#[derive(Debug, Clone)]
pub struct MeanCorrection {
    pub means: Vec<f64>,
}

impl Conditioner for MeanCorrection {
    fn condition(&mut self, x: &mut Field3, _: usize, _: usize) -> Result<()> {
        if self.means.len() != x.channels() {
            return Err(Error::DimMismatch(format!(
                "{} target means for {} channels",
                self.means.len(),
                x.channels()
            )));
        }
        let current = x.channel_means();
        for (c, (&m, &t)) in current.iter().zip(&self.means).enumerate() {
            x.channel_mut(c).iter_mut().for_each(|v| *v += t - m);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrthoOptions {
    /// Initial learning rate; it persists and adapts across steps.
    pub lr: f64,
    /// Learning-rate factor after an accepted descent step.
    pub grow: f64,
    /// Learning-rate factor after a rejected (error-increasing) step.
    pub shrink: f64,
    /// Trial descent steps allowed per sampler step.
    pub max_iters: usize,
    /// Threshold at step `i` of `N` is `(N - i) * slope + floor`.
    pub threshold_slope: f64,
    pub threshold_floor: f64,
    /// Consecutive error increases that abort the run.
    pub max_rejections: usize,
    pub reduction: LossReduction,
}

impl Default for OrthoOptions {
    fn default() -> Self {
        OrthoOptions {
            lr: 1e-2,
            grow: 1.2,
            shrink: 0.5,
            max_iters: 5000,
            threshold_slope: 1e-5,
            threshold_floor: 1e-7,
            max_rejections: 10,
            reduction: LossReduction::Sum,
        }
    }
}

impl OrthoOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.grow >= 1.0
            && self.grow.is_finite()
            && self.shrink > 0.0
            && self.shrink < 1.0
            && self.max_iters >= 1
            && self.threshold_slope >= 0.0
            && self.threshold_floor >= 0.0
            && self.max_rejections >= 1;
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid ortho conditioning options {self:?}")))
        }
    }

    pub fn threshold(&self, step: usize, n_steps: usize) -> f64 {
        n_steps.saturating_sub(step) as f64 * self.threshold_slope + self.threshold_floor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthoStepReport {
    pub step: usize,
    pub threshold: f64,
    pub initial_err: f64,
    pub err: f64,
    /// Trial descent steps, accepted or not.
    pub iterations: usize,
    pub converged: bool,
    /// Learning rate at the end of the step.
    pub lr: f64,
}

/// Gradient descent on the orthogonal-plane statistics mismatch until the
/// error drops below the step's threshold.
///
/// Each trial step `x - lr * grad` is kept only if it does not increase the
/// error; accepted steps grow the rate and rejected ones shrink it.
#[derive(Debug, Clone)]
pub struct OrthoStatsCond {
    target: OrthoStats,
    opts: OrthoOptions,
    lr: f64,
    reports: Vec<OrthoStepReport>,
}

impl OrthoStatsCond {
    pub fn new(target: OrthoStats, opts: OrthoOptions) -> Result<Self> {
        opts.validate()?;
        target.volume_dims()?;
        Ok(OrthoStatsCond {
            lr: opts.lr,
            target,
            opts,
            reports: Vec::new(),
        })
    }

    pub fn reports(&self) -> &[OrthoStepReport] {
        &self.reports
    }

    pub fn target(&self) -> &OrthoStats {
        &self.target
    }

    /// Runs the descent at `step`, returning its report.
    pub fn descend(&mut self, x: &mut Field3, step: usize, n_steps: usize) -> Result<OrthoStepReport> {
        let threshold = self.opts.threshold(step, n_steps);
        let (mut err, mut grad) = stats_loss_and_grad(x, &self.target, self.opts.reduction)?;
        let initial_err = err;
        let mut iterations = 0;
        let mut rejections = 0;
        while err > threshold && iterations < self.opts.max_iters {
            let mut trial = x.clone();
            trial.axpy(-self.lr, &grad);
            let (e, g) = stats_loss_and_grad(&trial, &self.target, self.opts.reduction)?;
            iterations += 1;
            if !(e <= err) {
                self.lr *= self.opts.shrink;
                rejections += 1;
                if rejections >= self.opts.max_rejections {
                    return Err(Error::Diverged {
                        step,
                        err,
                        iterations,
                    });
                }
                continue;
            }
            rejections = 0;
            *x = trial;
            err = e;
            grad = g;
            self.lr *= self.opts.grow;
        }
        let report = OrthoStepReport {
            step,
            threshold,
            initial_err,
            err,
            iterations,
            converged: err <= threshold,
            lr: self.lr,
        };
        if !report.converged {
            log::warn!(
                "ortho conditioning at step {step} stopped at err {err:.3e} > {threshold:.3e} after {iterations} iterations"
            );
        }
        self.reports.push(report.clone());
        Ok(report)
    }
}

impl Conditioner for OrthoStatsCond {
    fn condition(&mut self, x: &mut Field3, step: usize, n_steps: usize) -> Result<()> {
        self.descend(x, step, n_steps).map(|_| ())
    }
}
