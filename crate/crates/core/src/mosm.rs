//! Multi-output spectral mixture (MOSM) covariance kernels.
//!
//! Each channel `b` and mixture component `q` carries a weight `w`, a 3x3
//! SPD precision `A`, a spectral mean `m`, a delay `theta` and a phase `phi`.
//! Cross-channel parameters are derived so that the implied cross-spectral
//! density is a sum of rank-one Hermitian terms, which makes every kernel
//! produced here a valid multi-output covariance.
//!
//! Offsets live on the `[-pi, pi)^3` domain: lattice index `i` along an axis
//! of `D` voxels maps to `r = 2 pi i' / D` with `i'` the wrapped offset.

use std::f64::consts::TAU;
use std::sync::atomic::{AtomicUsize, Ordering};

use argmin::core::{CostFunction, Executor, State, TerminationReason, TerminationStatus};
use argmin::solver::neldermead::NelderMead;
use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::storage::Owned;
use nalgebra::{Complex, DMatrix, DVector, Dyn, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{wrapped_offset, Dims, Field3};
use crate::stats::CovarianceGrid;

pub const PARAMS_SCHEMA: &str = "grainfield.mosm_params.v1";
pub const BOUNDS_SCHEMA: &str = "grainfield.mosm_bounds.v1";

/// Sampled scalars per channel and mixture component: weight, three precision
/// magnitudes, three mean components, three delay components, phase.
pub const LHS_SCALARS_PER_COMPONENT: usize = 11;

/// One mixture component of one channel.
///
/// `precision` has units of inverse squared offset on the `[-pi, pi)` domain,
/// `mean` is a spatial frequency in the same units, `delay` an offset and
/// `phase` radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub precision: [[f64; 3]; 3],
    pub mean: [f64; 3],
    pub delay: [f64; 3],
    pub phase: f64,
}

impl Component {
    pub fn precision_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.precision[i][j])
    }

    fn zero_weight(like: &Component) -> Component {
        Component {
            weight: 0.0,
            ..*like
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosmParams {
    pub schema: String,
    /// `components[channel][q]`.
    pub components: Vec<Vec<Component>>,
}

impl MosmParams {
    pub fn new(components: Vec<Vec<Component>>) -> Result<Self> {
        let p = MosmParams {
            schema: PARAMS_SCHEMA.to_string(),
            components,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.components.len()
    }

    pub fn mixtures(&self) -> usize {
        self.components.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != PARAMS_SCHEMA {
            return Err(invalid(format!("unknown MOSM schema {:?}", self.schema)));
        }
        let q = self.mixtures();
        if self.channels() == 0 || q == 0 {
            return Err(invalid("MOSM parameters need at least one channel and one mixture"));
        }
        for (b, comps) in self.components.iter().enumerate() {
            if comps.len() != q {
                return Err(invalid(format!(
                    "channel {b} has {} mixtures, expected {q}",
                    comps.len()
                )));
            }
            for c in comps {
                let finite = c.weight.is_finite()
                    && c.phase.is_finite()
                    && c.precision.iter().flatten().all(|v| v.is_finite())
                    && c.mean.iter().chain(&c.delay).all(|v| v.is_finite());
                if !finite {
                    return Err(invalid(format!("non-finite MOSM parameter in channel {b}")));
                }
                let a = c.precision_matrix();
                if (a - a.transpose()).abs().max() > 1e-12 * a.abs().max().max(1.0)
                    || a.cholesky().is_none()
                {
                    return Err(invalid(format!(
                        "precision of channel {b} is not symmetric positive definite"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: MosmParams = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }
}

/// Derived parameters of the `(b, g)` cross term of one mixture component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossParams {
    pub precision: Matrix3<f64>,
    pub mean: Vector3<f64>,
    pub weight: f64,
    pub delay: Vector3<f64>,
    pub phase: f64,
    pub alpha: f64,
}

pub fn derive_cross_params(
    params: &MosmParams,
    beta: usize,
    gamma: usize,
    q: usize,
) -> Result<CrossParams> {
    let h = params.channels();
    if beta >= h || gamma >= h || q >= params.mixtures() {
        return Err(invalid(format!(
            "cross term ({beta}, {gamma}, q={q}) out of range for {h} channels, {} mixtures",
            params.mixtures()
        )));
    }
    let cb = &params.components[beta][q];
    let cg = &params.components[gamma][q];
    cross_from_components(cb, cg)
}

fn cross_from_components(cb: &Component, cg: &Component) -> Result<CrossParams> {
    let ab = cb.precision_matrix();
    let ag = cg.precision_matrix();
    let sum_inv = (ab + ag)
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("A_b + A_g is singular".into()))?;
    let mb = Vector3::from(cb.mean);
    let mg = Vector3::from(cg.mean);
    let precision = 2.0 * ab * sum_inv * ag;
    let precision = 0.5 * (precision + precision.transpose());
    // Mean of the product of the two spectral Gaussians: each channel's mean
    // is weighted by the other channel's precision.
    let mean = ag * sum_inv * mb + ab * sum_inv * mg;
    let dm = mb - mg;
    let weight = cb.weight * cg.weight * (-0.25 * dm.dot(&(sum_inv * dm))).exp();
    let det = precision.determinant();
    if det <= 0.0 {
        return Err(Error::Degenerate("derived cross precision is not positive definite".into()));
    }
    Ok(CrossParams {
        precision,
        mean,
        weight,
        delay: Vector3::from(cb.delay) - Vector3::from(cg.delay),
        phase: cb.phase - cg.phase,
        alpha: weight * (TAU).powf(1.5) * det.sqrt(),
    })
}

/// Kernel with every cross term precomputed.
#[derive(Debug, Clone)]
pub struct MosmKernel {
    channels: usize,
    /// `cross[b * H + g]` holds the `Q` derived components of `k_{bg}`.
    cross: Vec<Vec<CrossParams>>,
}

impl MosmKernel {
    pub fn new(params: &MosmParams) -> Result<Self> {
        params.validate()?;
        let h = params.channels();
        let mut cross = Vec::with_capacity(h * h);
        for b in 0..h {
            for g in 0..h {
                cross.push(
                    (0..params.mixtures())
                        .map(|q| derive_cross_params(params, b, g, q))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
        }
        Ok(MosmKernel { channels: h, cross })
    }

    /// Reference-row-only kernel; cheaper when only `k_{0g}` is needed.
    fn reference_row(params: &MosmParams) -> Result<Vec<Vec<CrossParams>>> {
        (0..params.channels())
            .map(|g| {
                (0..params.mixtures())
                    .map(|q| cross_from_components(&params.components[0][q], &params.components[g][q]))
                    .collect()
            })
            .collect()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn eval_pair(&self, beta: usize, gamma: usize, r: [f64; 3]) -> f64 {
        eval_terms(&self.cross[beta * self.channels + gamma], r)
    }

    /// Full `H x H` matrix `k_{bg}(r)`, row-major.
    pub fn eval(&self, r: [f64; 3]) -> Vec<f64> {
        self.cross.iter().map(|t| eval_terms(t, r)).collect()
    }

    /// Hermitian cross-spectral density matrix at angular frequency `omega`.
    pub fn cross_spectrum(&self, omega: [f64; 3]) -> DMatrix<Complex<f64>> {
        let h = self.channels;
        let w = Vector3::from(omega);
        DMatrix::from_fn(h, h, |b, g| {
            self.cross[b * h + g]
                .iter()
                .map(|c| {
                    let inv = c.precision.try_inverse().unwrap_or_else(Matrix3::zeros);
                    let dp = w - c.mean;
                    let dn = w + c.mean;
                    let gp = (-0.5 * dp.dot(&(inv * dp))).exp();
                    let gn = (-0.5 * dn.dot(&(inv * dn))).exp();
                    let amp = c.weight * TAU.powi(3) / 2.0;
                    let shift = Complex::from_polar(1.0, w.dot(&c.delay));
                    shift
                        * (Complex::from_polar(gp, c.phase) + Complex::from_polar(gn, -c.phase))
                        * amp
                })
                .sum()
        })
    }
}

#[inline]
fn eval_terms(terms: &[CrossParams], r: [f64; 3]) -> f64 {
    let mut acc = 0.0;
    for c in terms {
        let u = Vector3::new(r[0] + c.delay[0], r[1] + c.delay[1], r[2] + c.delay[2]);
        let quad = u.dot(&(c.precision * u));
        acc += c.alpha * (-0.5 * quad).exp() * (u.dot(&c.mean) + c.phase).cos();
    }
    acc
}

pub fn eval_kernel(params: &MosmParams, r: [f64; 3]) -> Result<Vec<f64>> {
    Ok(MosmKernel::new(params)?.eval(r))
}

/// Offset vector of flat lattice index `i` on the `[-pi, pi)^3` domain.
pub fn lattice_offset(dims: Dims, i: usize) -> [f64; 3] {
    let (x, y, z) = dims.coords(i);
    [
        TAU * wrapped_offset(x, dims.nx) as f64 / dims.nx as f64,
        TAU * wrapped_offset(y, dims.ny) as f64 / dims.ny as f64,
        TAU * wrapped_offset(z, dims.nz) as f64 / dims.nz as f64,
    ]
}

fn row_on_offsets(row: &[Vec<CrossParams>], offsets: &[[f64; 3]]) -> Vec<Vec<f64>> {
    row.iter()
        .map(|terms| offsets.iter().map(|&r| eval_terms(terms, r)).collect())
        .collect()
}

/// The reference row `k_{0g}` evaluated on the offset lattice of `dims`.
pub fn kernel_to_grid(params: &MosmParams, dims: Dims) -> Result<CovarianceGrid> {
    dims.validate()?;
    params.validate()?;
    let row = MosmKernel::reference_row(params)?;
    let s = dims.checked_voxels(params.channels())? / params.channels();
    let rows: Vec<Vec<f64>> = row
        .iter()
        .map(|terms| {
            (0..s)
                .into_par_iter()
                .with_min_len(4096)
                .map(|i| eval_terms(terms, lattice_offset(dims, i)))
                .collect()
        })
        .collect();
    CovarianceGrid::reference_row(dims, rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }

    fn at(&self, u: f64) -> f64 {
        self.min + u * (self.max - self.min)
    }
}

/// Box bounds for Latin hypercube sampling of kernel parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub schema: String,
    /// Magnitude `a` of each diagonal precision entry; the entry is `a^2`.
    pub precision_scale: Range,
    pub mean: Range,
    pub weight: Range,
    pub delay: Range,
    pub phase: Range,
}

impl Default for ParamBounds {
    fn default() -> Self {
        ParamBounds {
            schema: BOUNDS_SCHEMA.to_string(),
            precision_scale: Range::new(1.5, 5.0),
            mean: Range::new(-5.0, 5.0),
            weight: Range::new(-0.02, 0.02),
            delay: Range::new(-0.5, 0.5),
            phase: Range::new(0.0, TAU),
        }
    }
}

impl ParamBounds {
    pub fn validate(&self) -> Result<()> {
        if self.schema != BOUNDS_SCHEMA {
            return Err(invalid(format!("unknown bounds schema {:?}", self.schema)));
        }
        for (name, r) in [
            ("precision_scale", self.precision_scale),
            ("mean", self.mean),
            ("weight", self.weight),
            ("delay", self.delay),
            ("phase", self.phase),
        ] {
            if !(r.min.is_finite() && r.max.is_finite() && r.min <= r.max) {
                return Err(invalid(format!("bad bounds for {name}: [{}, {}]", r.min, r.max)));
            }
        }
        if self.precision_scale.min <= 0.0 && self.precision_scale.max >= 0.0 {
            return Err(invalid("precision magnitudes must exclude zero"));
        }
        Ok(())
    }
}

/// `n` points in `[0, 1)^d` with exactly one point per bin `[k/n, (k+1)/n)`
/// along every dimension.
pub fn latin_hypercube(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; d]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..d {
        perm.shuffle(rng);
        for (i, &bin) in perm.iter().enumerate() {
            out[i][j] = (bin as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    out
}

fn component_from_unit(bounds: &ParamBounds, u: &[f64]) -> Component {
    let mut precision = [[0.0; 3]; 3];
    for k in 0..3 {
        let a = bounds.precision_scale.at(u[1 + k]);
        precision[k][k] = a * a;
    }
    Component {
        weight: bounds.weight.at(u[0]),
        precision,
        mean: [4, 5, 6].map(|k| bounds.mean.at(u[k])),
        delay: [7, 8, 9].map(|k| bounds.delay.at(u[k])),
        phase: bounds.phase.at(u[10]),
    }
}

/// `n` parameter sets with diagonal precisions drawn by Latin hypercube
/// sampling over `11 * channels * mixtures` scalars.
pub fn sample_params_lhs(
    bounds: &ParamBounds,
    n: usize,
    mixtures: usize,
    channels: usize,
    seed: u64,
) -> Result<Vec<MosmParams>> {
    bounds.validate()?;
    if n == 0 || mixtures == 0 || channels == 0 {
        return Err(invalid("LHS sampling needs n, mixtures and channels >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = LHS_SCALARS_PER_COMPONENT * mixtures * channels;
    latin_hypercube(n, dim, &mut rng)
        .into_iter()
        .map(|u| {
            let components = (0..channels)
                .map(|b| {
                    (0..mixtures)
                        .map(|q| {
                            let o = (b * mixtures + q) * LHS_SCALARS_PER_COMPONENT;
                            component_from_unit(bounds, &u[o..o + LHS_SCALARS_PER_COMPONENT])
                        })
                        .collect()
                })
                .collect();
            MosmParams::new(components)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RejectReason {
    /// The covariance has not decayed at the edge of the domain.
    BoundaryNotDecayed { ratio: f64 },
    /// A probe sample left the admissible `[-1, 1]` range.
    ProbeOutOfRange { value: f64 },
    /// The covariance vanishes at zero offset.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Validation {
    Accept,
    Reject(RejectReason),
}

impl Validation {
    pub fn is_accept(&self) -> bool {
        matches!(self, Validation::Accept)
    }
}

pub const DEFAULT_PERIODICITY_TOL: f64 = 1e-3;

/// Classifies a covariance row by boundary decay and, optionally, by the
/// value range of a sample drawn from it.
pub fn validate_kernel(
    cov: &CovarianceGrid,
    periodicity_tol: f64,
    probe: Option<&Field3>,
) -> Validation {
    let d = cov.dims;
    let n = d.as_array();
    let peak = cov.values.iter().map(|v| v[0].abs()).fold(0.0_f64, f64::max);
    if !(peak > 0.0) {
        return Validation::Reject(RejectReason::Degenerate);
    }
    let edge: Vec<Option<usize>> = n
        .iter()
        .map(|&len| (len > 1).then_some(len / 2))
        .collect();
    let on_shell = |i: usize| {
        let c = d.coords(i);
        let c = [c.0, c.1, c.2];
        (0..3).any(|a| match edge[a] {
            Some(e) => wrapped_offset(c[a], n[a]).unsigned_abs() == wrapped_offset(e, n[a]).unsigned_abs(),
            None => false,
        })
    };
    let mut shell_max = 0.0_f64;
    for v in &cov.values {
        for (i, k) in v.iter().enumerate() {
            if on_shell(i) {
                shell_max = shell_max.max(k.abs());
            }
        }
    }
    if shell_max > periodicity_tol * peak {
        return Validation::Reject(RejectReason::BoundaryNotDecayed {
            ratio: shell_max / peak,
        });
    }
    if let Some(f) = probe {
        if let Some(v) = f.data().iter().copied().find(|v| v.abs() > 1.0 || !v.is_finite()) {
            return Validation::Reject(RejectReason::ProbeOutOfRange { value: v });
        }
    }
    Validation::Accept
}

/// Parameters per component in the fitting vector: weight, six log-Cholesky
/// entries, mean, delay, phase.
const FIT_PER_COMPONENT: usize = 14;

/// The fitted weight coordinate is `weight / WEIGHT_UNIT`, keeping all
/// coordinates of comparable size.
const WEIGHT_UNIT: f64 = 0.01;

fn unpack(x: &[f64], channels: usize, mixtures: usize) -> Vec<Vec<Component>> {
    (0..channels)
        .map(|b| {
            (0..mixtures)
                .map(|q| {
                    let p = &x[(b * mixtures + q) * FIT_PER_COMPONENT..][..FIT_PER_COMPONENT];
                    let l = Matrix3::new(
                        p[1].exp(), 0.0, 0.0,
                        p[4], p[2].exp(), 0.0,
                        p[5], p[6], p[3].exp(),
                    );
                    let a = l * l.transpose();
                    Component {
                        weight: p[0] * WEIGHT_UNIT,
                        precision: [0, 1, 2].map(|i| [0, 1, 2].map(|j| a[(i, j)])),
                        mean: [p[7], p[8], p[9]],
                        delay: [p[10], p[11], p[12]],
                        phase: p[13],
                    }
                })
                .collect()
        })
        .collect()
}

fn pack(components: &[Vec<Component>]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for comps in components {
        for c in comps {
            let l = c
                .precision_matrix()
                .cholesky()
                .ok_or_else(|| invalid("precision is not positive definite"))?
                .l();
            out.push(c.weight / WEIGHT_UNIT);
            out.extend([l[(0, 0)].ln(), l[(1, 1)].ln(), l[(2, 2)].ln()]);
            out.extend([l[(1, 0)], l[(2, 0)], l[(2, 1)]]);
            out.extend(c.mean);
            out.extend(c.delay);
            out.push(c.phase);
        }
    }
    Ok(out)
}

fn initial_scales(len: usize) -> Vec<f64> {
    const S: [f64; FIT_PER_COMPONENT] = [
        0.5, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.5, 0.5, 0.5, 0.1, 0.1, 0.1, 0.5,
    ];
    (0..len).map(|i| S[i % FIT_PER_COMPONENT]).collect()
}

struct FitProblem<'a> {
    target: &'a [Vec<f64>],
    offsets: Vec<[f64; 3]>,
    channels: usize,
    mixtures: usize,
    scale: f64,
    evals: AtomicUsize,
}

impl FitProblem<'_> {
    /// Grid differences scaled so that their squared norm is `mse / scale`.
    fn residuals(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        let params = MosmParams {
            schema: PARAMS_SCHEMA.into(),
            components: unpack(x, self.channels, self.mixtures),
        };
        let row = MosmKernel::reference_row(&params).ok()?;
        let grid = row_on_offsets(&row, &self.offsets);
        let n = (self.channels * self.offsets.len()) as f64;
        let norm = 1.0 / (n * self.scale).sqrt();
        let r: Vec<f64> = grid
            .iter()
            .zip(self.target)
            .flat_map(|(g, t)| g.iter().zip(t).map(|(a, b)| (a - b) * norm))
            .collect();
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    /// Mean squared grid difference divided by `scale`.
    fn cost(&self, x: &[f64]) -> f64 {
        self.residuals(x)
            .map_or(f64::INFINITY, |r| r.iter().map(|v| v * v).sum())
    }
}

/// Borrowing handle so several solver runs can share one problem.
struct Objective<'a, 'b>(&'a FitProblem<'b>);

impl CostFunction for Objective<'_, '_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.0.cost(x))
    }
}

/// Least-squares view of the fit for the Levenberg-Marquardt polish.
struct LeastSquares<'a, 'b> {
    problem: &'a FitProblem<'b>,
    x: DVector<f64>,
}

impl LeastSquaresProblem<f64, Dyn, Dyn> for LeastSquares<'_, '_> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, Dyn>;
    type ParameterStorage = Owned<f64, Dyn>;

    fn set_params(&mut self, x: &DVector<f64>) {
        self.x.copy_from(x);
    }

    fn params(&self) -> DVector<f64> {
        self.x.clone()
    }

    fn residuals(&self) -> Option<DVector<f64>> {
        self.problem
            .residuals(self.x.as_slice())
            .map(DVector::from_vec)
    }

    fn jacobian(&self) -> Option<DMatrix<f64>> {
        let n = self.x.len();
        let mut xp = self.x.as_slice().to_vec();
        let mut cols = Vec::with_capacity(n);
        for i in 0..n {
            let h = 1e-6 * xp[i].abs().max(1e-2);
            let orig = xp[i];
            xp[i] = orig + h;
            let rp = self.problem.residuals(&xp)?;
            xp[i] = orig - h;
            let rm = self.problem.residuals(&xp)?;
            xp[i] = orig;
            cols.push(DVector::from_iterator(
                rp.len(),
                rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)),
            ));
        }
        Some(DMatrix::from_columns(&cols))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub restarts: usize,
    /// Total objective evaluations available to the simplex stage.
    pub max_evals: usize,
    /// Number of best simplex results refined by Levenberg-Marquardt.
    pub polish_starts: usize,
    /// Evaluation budget of each refinement, in units of `(params + 1)`.
    pub polish_patience: usize,
    pub seed: u64,
    /// Bounds used to draw starting points.
    pub bounds: ParamBounds,
    /// A previous fit with at most as many mixtures; padded with zero-weight
    /// components and always included as a start.
    pub warm_start: Option<MosmParams>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            restarts: 32,
            max_evals: 20_000,
            polish_starts: 3,
            polish_patience: 200,
            seed: 0,
            bounds: ParamBounds::default(),
            warm_start: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: MosmParams,
    /// Mean squared difference between fitted and target grids.
    pub residual: f64,
    pub converged: bool,
    pub evaluations: usize,
}

/// Fits a `mixtures`-component MOSM kernel to a reference covariance row.
pub fn fit_mosm(target: &CovarianceGrid, mixtures: usize, opts: &FitOptions) -> Result<FitResult> {
    if !(1..=16).contains(&mixtures) {
        return Err(invalid(format!("mixture count must be in 1..=16, got {mixtures}")));
    }
    opts.bounds.validate()?;
    let rows = target.row()?;
    let target_rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
    let channels = target_rows.len();
    let s = target.dims.voxels();
    let energy = target_rows.iter().flatten().map(|v| v * v).sum::<f64>() / (channels * s) as f64;
    let problem = FitProblem {
        target: &target_rows,
        offsets: (0..s).map(|i| lattice_offset(target.dims, i)).collect(),
        channels,
        mixtures,
        scale: if energy > 0.0 { energy } else { 1.0 },
        evals: AtomicUsize::new(0),
    };

    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(warm) = &opts.warm_start {
        warm.validate()?;
        if warm.channels() != channels || warm.mixtures() > mixtures {
            return Err(invalid("warm start does not fit the requested model"));
        }
        let padded: Vec<Vec<Component>> = warm
            .components
            .iter()
            .map(|comps| {
                let mut c = comps.clone();
                while c.len() < mixtures {
                    c.push(Component::zero_weight(&comps[c.len() % comps.len()]));
                }
                c
            })
            .collect();
        starts.push(pack(&padded)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let unit = latin_hypercube(
        opts.restarts.max(1),
        LHS_SCALARS_PER_COMPONENT * channels * mixtures,
        &mut rng,
    );
    for u in unit {
        let comps: Vec<Vec<Component>> = (0..channels)
            .map(|b| {
                (0..mixtures)
                    .map(|q| {
                        let o = (b * mixtures + q) * LHS_SCALARS_PER_COMPONENT;
                        component_from_unit(&opts.bounds, &u[o..o + LHS_SCALARS_PER_COMPONENT])
                    })
                    .collect()
            })
            .collect();
        starts.push(pack(&comps)?);
    }

    let per_start = (opts.max_evals / starts.len()).max(1) as u64;
    let scales = initial_scales(starts[0].len());
    let mut results: Vec<(f64, Vec<f64>, bool)> = starts
        .par_iter()
        .map(|x0| {
            let start_cost = problem.cost(x0);
            let mut simplex = vec![x0.clone()];
            for (i, s) in scales.iter().enumerate() {
                let mut v = x0.clone();
                v[i] += s;
                simplex.push(v);
            }
            let solver = NelderMead::new(simplex)
                .with_sd_tolerance(1e-14)
                .expect("valid tolerance");
            match Executor::new(Objective(&problem), solver)
                .configure(|st| st.max_iters(per_start))
                .run()
            {
                Ok(res) => {
                    let st = res.state();
                    let conv = matches!(
                        st.get_termination_status(),
                        TerminationStatus::Terminated(TerminationReason::SolverConverged)
                    );
                    match st.get_best_param() {
                        Some(p) if st.get_best_cost() <= start_cost => {
                            (st.get_best_cost(), p.clone(), conv)
                        }
                        _ => (start_cost, x0.clone(), false),
                    }
                }
                Err(_) => (start_cost, x0.clone(), false),
            }
        })
        .collect();
    results.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Levenberg-Marquardt polish of the most promising simplex results.
    let polished: Vec<(f64, Vec<f64>, bool)> = results
        .iter()
        .take(opts.polish_starts)
        .cloned()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(c0, x0, conv0)| {
            if c0 == 0.0 || opts.polish_patience == 0 {
                return (c0, x0, conv0);
            }
            let lm = LevenbergMarquardt::new()
                .with_tol(1e-15)
                .with_patience(opts.polish_patience);
            let (out, report) = lm.minimize(LeastSquares {
                problem: &problem,
                x: DVector::from_vec(x0.clone()),
            });
            let x = out.x.as_slice().to_vec();
            let c = problem.cost(&x);
            if c < c0 {
                let conv = report.termination.was_successful();
                (c, x, conv || conv0)
            } else {
                (c0, x0, conv0)
            }
        })
        .collect();
    let best = polished
        .into_iter()
        .chain(results.into_iter().take(1))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("at least one start");

    let params = MosmParams::new(unpack(&best.1, channels, mixtures))?;
    let residual = problem.cost(&best.1) * problem.scale;
    Ok(FitResult {
        params,
        residual,
        converged: best.2 || residual == 0.0,
        evaluations: problem.evals.load(Ordering::Relaxed),
    })
}

/// Smallest and largest eigenvalue of the cross-spectral matrix over an
/// `n^3` frequency grid spanning `[-extent, extent]^3`.
pub fn cross_spectrum_extremes(kernel: &MosmKernel, n: usize, extent: f64) -> (f64, f64) {
    let step = if n > 1 { 2.0 * extent / (n - 1) as f64 } else { 0.0 };
    let freq = |i: usize| -extent + step * i as f64;
    (0..n * n * n)
        .into_par_iter()
        .map(|i| {
            let w = [freq(i % n), freq(i / n % n), freq(i / (n * n))];
            let m = kernel.cross_spectrum(w);
            let eig = m.symmetric_eigenvalues();
            let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        })
        .reduce(
            || (f64::INFINITY, f64::NEG_INFINITY),
            |a, b| (a.0.min(b.0), a.1.max(b.1)),
        )
}

/// Default frequency extent for [`cross_spectrum_extremes`]: covers the mean
/// bound plus several spectral standard deviations.
pub const SPECTRUM_EXTENT: f64 = 5.0 + 3.0 * 5.0;

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn random_component(rng: &mut impl Rng, full: bool) -> Component {
        let mut l = Matrix3::zeros();
        for i in 0..3 {
            l[(i, i)] = rng.random_range(1.0..4.0);
            if full {
                for j in 0..i {
                    l[(i, j)] = rng.random_range(-1.0..1.0);
                }
            }
        }
        let a = l * l.transpose();
        Component {
            weight: rng.random_range(-0.02..0.02),
            precision: [0, 1, 2].map(|i| [0, 1, 2].map(|j| a[(i, j)])),
            mean: [0; 3].map(|_| rng.random_range(-5.0..5.0)),
            delay: [0; 3].map(|_| rng.random_range(-0.5..0.5)),
            phase: rng.random_range(0.0..TAU),
        }
    }

    /// Smallest eigenvalue of the 2x2 cross-spectrum along the x axis.
    fn min_spectral_eig(k: &MosmKernel) -> f64 {
        (-400..=400)
            .map(|i| {
                let s = k.cross_spectrum([i as f64 * 0.05, 0.0, 0.0]);
                let (a, d, b) = (s[(0, 0)].re, s[(1, 1)].re, s[(0, 1)].norm());
                0.5 * (a + d) - (0.25 * (a - d).powi(2) + b * b).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn precision_weighted_cross_mean_breaks_psd() {
        let comp = |a: f64, m: f64| Component {
            weight: 1.0,
            precision: [[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]],
            mean: [m, 0.0, 0.0],
            delay: [0.0; 3],
            phase: 0.0,
        };
        let p = MosmParams::new(vec![vec![comp(1.0, 3.0)], vec![comp(16.0, -2.0)]]).unwrap();
        let mut k = MosmKernel::new(&p).unwrap();
        let peak = k.cross_spectrum([3.0, 0.0, 0.0])[(0, 0)].re;
        assert!(min_spectral_eig(&k) >= -1e-12 * peak);

        // same mean as the auto terms would use, each channel weighted by its own precision
        let (cb, cg) = (&p.components[0][0], &p.components[1][0]);
        let (ab, ag) = (cb.precision_matrix(), cg.precision_matrix());
        let own = (ab + ag).try_inverse().unwrap() * (ab * Vector3::from(cb.mean) + ag * Vector3::from(cg.mean));
        k.cross[1][0].mean = own;
        k.cross[2][0].mean = own;
        assert!(min_spectral_eig(&k) < -1e-3 * peak, "{}", min_spectral_eig(&k));
    }

    fn random_params(rng: &mut impl Rng, h: usize, q: usize, full: bool) -> MosmParams {
        MosmParams::new(
            (0..h)
                .map(|_| (0..q).map(|_| random_component(rng, full)).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn diagonal_reductions_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng, 2, 3, true);
        for b in 0..2 {
            for q in 0..3 {
                let c = derive_cross_params(&p, b, b, q).unwrap();
                let comp = &p.components[b][q];
                assert_eq!(c.delay, Vector3::zeros());
                assert_eq!(c.phase, 0.0);
                assert_eq!(c.weight, comp.weight * comp.weight);
                let a = comp.precision_matrix();
                assert!((c.precision - a).abs().max() < 1e-12 * a.abs().max());
                assert!((c.mean - Vector3::from(comp.mean)).abs().max() < 1e-12);
            }
        }
        // identical channels behave like the diagonal case
        let same = MosmParams::new(vec![p.components[0].clone(), p.components[0].clone()]).unwrap();
        let c = derive_cross_params(&same, 0, 1, 1).unwrap();
        assert_eq!(c.phase, 0.0);
        assert!((c.weight - same.components[0][1].weight.powi(2)).abs() < 1e-18);
    }

    #[test]
    fn cross_weight_is_damped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let p = random_params(&mut rng, 2, 1, true);
            let c = derive_cross_params(&p, 0, 1, 0).unwrap();
            let bound = (p.components[0][0].weight * p.components[1][0].weight).abs();
            assert!(c.weight.abs() <= bound * (1.0 + 1e-15));
        }
    }

    #[test]
    fn gaussian_bump_peaks_at_alpha() {
        let comp = Component {
            weight: 0.01,
            precision: [[4.0, 0.0, 0.0], [0.0, 9.0, 0.0], [0.0, 0.0, 2.25]],
            mean: [0.0; 3],
            delay: [0.0; 3],
            phase: 0.0,
        };
        let p = MosmParams::new(vec![vec![comp]]).unwrap();
        let k0 = eval_kernel(&p, [0.0; 3]).unwrap()[0];
        let alpha = 0.0001 * TAU.powf(1.5) * (4.0f64 * 9.0 * 2.25).sqrt();
        assert!((k0 - alpha).abs() < 1e-15);
        let k1 = eval_kernel(&p, [0.5, 0.0, 0.0]).unwrap()[0];
        assert!((k1 - alpha * (-0.5f64 * 4.0 * 0.25).exp()).abs() < 1e-15);
    }

    #[test]
    fn swapping_channels_negates_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng, 3, 2, true);
        let k = MosmKernel::new(&p).unwrap();
        for _ in 0..1000 {
            let r = [0; 3].map(|_| rng.random_range(-PI..PI));
            let m = k.eval(r);
            let n = k.eval(r.map(|v| -v));
            for b in 0..3 {
                for g in 0..3 {
                    assert!((m[b * 3 + g] - n[g * 3 + b]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn grid_matches_pointwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&mut rng, 2, 2, false);
        let d = Dims::new(8, 6, 5).unwrap();
        let grid = kernel_to_grid(&p, d).unwrap();
        for i in 0..d.voxels() {
            let (x, y, z) = d.coords(i);
            let r = [
                TAU * wrapped_offset(x, 8) as f64 / 8.0,
                TAU * wrapped_offset(y, 6) as f64 / 6.0,
                TAU * wrapped_offset(z, 5) as f64 / 5.0,
            ];
            let k = eval_kernel(&p, r).unwrap();
            assert_eq!(grid.values[0][i], k[0]);
            assert_eq!(grid.values[1][i], k[1]);
        }
        assert_eq!(grid.values[0][0], eval_kernel(&p, [0.0; 3]).unwrap()[0]);
    }

    #[test]
    fn spectrum_is_psd_and_matches_kernel_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = random_params(&mut rng, 3, 2, true);
            let k = MosmKernel::new(&p).unwrap();
            let (lo, hi) = cross_spectrum_extremes(&k, 9, 15.0);
            assert!(lo >= -1e-10 * hi, "lo {lo} hi {hi}");
        }
        // numeric Fourier transform of k_01 along a line agrees with the closed form
        let comp = |m: f64, t: f64, ph: f64| Component {
            weight: 0.015,
            precision: [[3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0]],
            mean: [m, 0.0, 0.0],
            delay: [t, 0.0, 0.0],
            phase: ph,
        };
        let p = MosmParams::new(vec![vec![comp(1.0, 0.2, 0.3)], vec![comp(1.5, -0.1, 1.0)]]).unwrap();
        let k = MosmKernel::new(&p).unwrap();
        let w = [0.7, -0.4, 0.2];
        let (n, ext) = (48usize, 6.0);
        let h = 2.0 * ext / n as f64;
        let mut acc = Complex::new(0.0, 0.0);
        for i in 0..n * n * n {
            let r = [i % n, i / n % n, i / (n * n)].map(|j| -ext + h * j as f64);
            let phase = -(w[0] * r[0] + w[1] * r[1] + w[2] * r[2]);
            acc += Complex::from_polar(k.eval_pair(0, 1, r), phase);
        }
        acc *= h * h * h;
        let s = k.cross_spectrum(w)[(0, 1)];
        assert!((acc - s).norm() < 1e-6 * s.norm().max(1e-6), "{acc} vs {s}");
    }

    #[test]
    fn autocovariance_bounded_by_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_params(&mut rng, 2, 3, false);
        let g = kernel_to_grid(&p, Dims::cube(8).unwrap()).unwrap();
        let k0 = g.values[0][0];
        assert!(g.values[0].iter().all(|v| v.abs() <= k0 * (1.0 + 1e-12)));
    }

    #[test]
    fn lhs_is_stratified_and_sized() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts = latin_hypercube(100, 5, &mut rng);
        for j in 0..5 {
            let mut bins: Vec<usize> = pts.iter().map(|p| (p[j] * 100.0) as usize).collect();
            bins.sort();
            assert_eq!(bins, (0..100).collect::<Vec<_>>());
        }
        assert_eq!(LHS_SCALARS_PER_COMPONENT * 3 * 4, 132);
        let sets = sample_params_lhs(&ParamBounds::default(), 1, 4, 3, 0).unwrap();
        let b = ParamBounds::default();
        let c = &sets[0].components[2][3];
        assert!(c.weight.abs() <= 0.02);
        assert!((2.25..=25.0).contains(&c.precision[1][1]));
        assert_eq!(c.precision[0][1], 0.0);
        assert!((b.phase.min..=b.phase.max).contains(&c.phase));
        let bad = ParamBounds {
            mean: Range::new(1.0, -1.0),
            ..ParamBounds::default()
        };
        assert!(sample_params_lhs(&bad, 3, 1, 1, 0).is_err());
    }

    #[test]
    fn validation_rules() {
        let narrow = Component {
            weight: 0.02,
            precision: [[9.0, 0.0, 0.0], [0.0, 9.0, 0.0], [0.0, 0.0, 9.0]],
            mean: [0.0; 3],
            delay: [0.0; 3],
            phase: 0.0,
        };
        let wide = Component {
            precision: [[0.01, 0.0, 0.0], [0.0, 0.01, 0.0], [0.0, 0.0, 0.01]],
            ..narrow
        };
        let d = Dims::cube(16).unwrap();
        let ok = kernel_to_grid(&MosmParams::new(vec![vec![narrow]]).unwrap(), d).unwrap();
        assert_eq!(validate_kernel(&ok, DEFAULT_PERIODICITY_TOL, None), Validation::Accept);
        let bad = kernel_to_grid(&MosmParams::new(vec![vec![wide]]).unwrap(), d).unwrap();
        assert!(matches!(
            validate_kernel(&bad, DEFAULT_PERIODICITY_TOL, None),
            Validation::Reject(RejectReason::BoundaryNotDecayed { .. })
        ));
        let mut probe = Field3::zeros(Dims::cube(2).unwrap(), 3).unwrap();
        probe.set(1, 1, 0, 1, 1.2);
        assert_eq!(
            validate_kernel(&ok, DEFAULT_PERIODICITY_TOL, Some(&probe)),
            Validation::Reject(RejectReason::ProbeOutOfRange { value: 1.2 })
        );
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_params(&mut rng, 2, 2, true);
        let back = MosmParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
        assert!(MosmParams::from_json(&p.to_json().unwrap().replace(PARAMS_SCHEMA, "nope")).is_err());
    }

    #[test]
    fn pack_unpack_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(&mut rng, 2, 2, true);
        let back = unpack(&pack(&p.components).unwrap(), 2, 2);
        for (a, b) in p.components.iter().flatten().zip(back.iter().flatten()) {
            for i in 0..3 {
                for j in 0..3 {
                    assert!((a.precision[i][j] - b.precision[i][j]).abs() < 1e-12);
                }
            }
            assert_eq!(a.mean, b.mean);
        }
    }
}
