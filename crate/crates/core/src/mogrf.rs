//! FFT sampling of stationary periodic multi-output Gaussian random fields.
//!
//! The reference channel is drawn from the spectrum of its autocovariance
//! with the zero frequency removed; every other channel is a linear filter of
//! the reference channel whose transfer function reproduces the requested
//! cross-covariance with it.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::GridFft;
use crate::field::{Dims, Field3};
use crate::stats::CovarianceGrid;

/// Regularizer added to the reference spectrum in the transfer functions.
pub const TRANSFER_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MogrfSpec {
    /// Per-channel means; channels other than the reference are shifted by
    /// their mean after filtering.
    pub means: Vec<f64>,
    /// Reference-row covariance `k_{0g}`.
    pub cov: CovarianceGrid,
}

impl MogrfSpec {
    pub fn zero_mean(cov: CovarianceGrid) -> Self {
        MogrfSpec {
            means: vec![0.0; cov.channels],
            cov,
        }
    }

    pub fn dims(&self) -> Dims {
        self.cov.dims
    }

    pub fn channels(&self) -> usize {
        self.cov.channels
    }
}

/// Precomputed spectra for repeated sampling from one spec.
#[derive(Debug, Clone)]
pub struct MogrfSampler {
    dims: Dims,
    fft: GridFft,
    means: Vec<f64>,
    /// `sqrt(max(P, 0) / S)` with the zero frequency set to 0.
    amplitude: Vec<f64>,
    /// Transfer functions for channels `1..H`.
    transfer: Vec<Vec<Complex64>>,
    clamped_fraction: f64,
}

impl MogrfSampler {
    pub fn new(spec: &MogrfSpec) -> Result<Self> {
        let d = spec.dims();
        d.validate()?;
        let h = spec.channels();
        if spec.means.len() != h {
            return Err(Error::DimMismatch(format!(
                "{} means for {h} channels",
                spec.means.len()
            )));
        }
        let row = spec.cov.row()?;
        let s = d.voxels();
        let fft = GridFft::new(d);
        let p: Vec<f64> = fft.forward_real(row[0]).iter().map(|c| c.re).collect();
        let neg = p.iter().filter(|v| **v < 0.0).fold(0.0, |a, v| a - v);
        let total: f64 = p.iter().map(|v| v.abs()).sum();
        let clamped_fraction = if total > 0.0 { neg / total } else { 0.0 };
        let mut amplitude: Vec<f64> = p.iter().map(|&v| (v.max(0.0) / s as f64).sqrt()).collect();
        amplitude[0] = 0.0;
        if amplitude.iter().all(|&a| a == 0.0) {
            return Err(Error::Degenerate(
                "reference channel spectrum vanishes away from zero frequency".into(),
            ));
        }
        let transfer = row[1..]
            .iter()
            .map(|r| {
                fft.forward_real(r)
                    .iter()
                    .zip(&p)
                    .map(|(f, &p00)| f / (p00.max(0.0) + TRANSFER_EPS))
                    .collect()
            })
            .collect();
        Ok(MogrfSampler {
            dims: d,
            fft,
            means: spec.means.clone(),
            amplitude,
            transfer,
            clamped_fraction,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.means.len()
    }

    /// Share of the reference spectrum's absolute mass that was negative and
    /// clamped to zero.
    pub fn clamped_fraction(&self) -> f64 {
        self.clamped_fraction
    }

    fn complex_noise(&self, rng: &mut impl Rng) -> Vec<Complex64> {
        let mut z: Vec<Complex64> = self
            .amplitude
            .iter()
            .map(|&a| {
                let e1: f64 = rng.sample(StandardNormal);
                let e2: f64 = rng.sample(StandardNormal);
                Complex64::new(a * e1, a * e2)
            })
            .collect();
        self.fft.inverse(&mut z);
        z
    }

    /// Builds all channels from a realized zero-mean reference channel.
    pub fn channels_from_reference(&self, x0: &[f64]) -> Result<Field3> {
        let s = self.dims.voxels();
        if x0.len() != s {
            return Err(Error::DimMismatch(format!(
                "reference channel has {} voxels, expected {s}",
                x0.len()
            )));
        }
        let h = self.channels();
        let mut data = vec![0.0; h * s];
        for (d, v) in data[..s].iter_mut().zip(x0) {
            *d = v + self.means[0];
        }
        if h > 1 {
            let spec = self.fft.forward_real(x0);
            // Two real channels per complex inverse transform: both filtered
            // spectra are Hermitian, so they separate into real and imaginary parts.
            for pair in (1..h).collect::<Vec<_>>().chunks(2) {
                let mut buf: Vec<Complex64> = (0..s)
                    .map(|k| {
                        let a = self.transfer[pair[0] - 1][k] * spec[k];
                        match pair.get(1) {
                            Some(&g) => a + Complex64::i() * self.transfer[g - 1][k] * spec[k],
                            None => a,
                        }
                    })
                    .collect();
                self.fft.inverse(&mut buf);
                let inv = 1.0 / s as f64;
                for (i, &g) in pair.iter().enumerate() {
                    let mu = self.means[g];
                    for (d, c) in data[g * s..(g + 1) * s].iter_mut().zip(&buf) {
                        *d = if i == 0 { c.re } else { c.im } * inv + mu;
                    }
                }
            }
        }
        Ok(Field3::from_vec(self.dims, h, data)?)
    }

    /// One sample (the real part of the complex draw).
    pub fn sample(&self, rng: &mut impl Rng) -> Result<Field3> {
        let z = self.complex_noise(rng);
        let x0: Vec<f64> = z.iter().map(|c| c.re).collect();
        self.channels_from_reference(&x0)
    }

    /// Two independent samples from the real and imaginary parts of one draw.
    pub fn sample_pair(&self, rng: &mut impl Rng) -> Result<(Field3, Field3)> {
        let z = self.complex_noise(rng);
        let re: Vec<f64> = z.iter().map(|c| c.re).collect();
        let im: Vec<f64> = z.iter().map(|c| c.im).collect();
        Ok((
            self.channels_from_reference(&re)?,
            self.channels_from_reference(&im)?,
        ))
    }
}

pub fn sample(spec: &MogrfSpec, rng: &mut impl Rng) -> Result<Field3> {
    MogrfSampler::new(spec)?.sample(rng)
}

/// Seed of sample `i` in Monte Carlo checks.
fn sample_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Mean reference-row covariance of `n` samples, each centered by its own
/// spatial means.
pub fn empirical_covariance(spec: &MogrfSpec, n: usize, seed: u64) -> Result<CovarianceGrid> {
    let sampler = MogrfSampler::new(spec)?;
    let d = sampler.dims();
    let s = d.voxels();
    let h = sampler.channels();
    const CHUNK: usize = 32;
    let chunks: Vec<Result<Vec<Complex64>>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![Complex64::new(0.0, 0.0); h * s];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, i));
                let f = sampler.sample(&mut rng)?;
                let means = f.channel_means();
                let spectra: Vec<Vec<Complex64>> = (0..h)
                    .map(|g| {
                        let centered: Vec<f64> = f.channel(g).iter().map(|v| v - means[g]).collect();
                        sampler.fft.forward_real(&centered)
                    })
                    .collect();
                for g in 0..h {
                    for k in 0..s {
                        acc[g * s + k] += spectra[0][k].conj() * spectra[g][k];
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![Complex64::new(0.0, 0.0); h * s];
    for c in chunks {
        for (t, v) in total.iter_mut().zip(c?) {
            *t += v;
        }
    }
    let scale = 1.0 / (s as f64 * n as f64);
    let rows = (0..h)
        .map(|g| {
            sampler
                .fft
                .inverse_real(total[g * s..(g + 1) * s].to_vec())
                .into_iter()
                .map(|v| v * scale)
                .collect()
        })
        .collect();
    CovarianceGrid::reference_row(d, rows)
}

/// `max |a - b| / max |b|` over all channels and offsets.
pub fn relative_sup_error(a: &CovarianceGrid, b: &CovarianceGrid) -> f64 {
    let diff = a
        .values
        .iter()
        .flatten()
        .zip(b.values.iter().flatten())
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    diff / b.max_abs()
}

/// Relative sup-norm error between the empirical covariance of `n` samples
/// and the target row.
pub fn empirical_cov_check(spec: &MogrfSpec, n: usize, seed: u64) -> Result<f64> {
    if n < 2 {
        return Err(crate::error::invalid("covariance check needs at least two samples"));
    }
    let emp = empirical_covariance(spec, n, seed)?;
    Ok(relative_sup_error(&emp, &spec.cov))
}

/// The covariance row the sampler reproduces exactly: the target with its
/// spatial average removed, since the zero frequency is never excited.
pub fn achievable_covariance(spec: &MogrfSpec) -> Result<CovarianceGrid> {
    let rows = spec
        .cov
        .row()?
        .iter()
        .map(|r| {
            let m = r.iter().sum::<f64>() / r.len() as f64;
            r.iter().map(|v| v - m).collect()
        })
        .collect();
    CovarianceGrid::reference_row(spec.dims(), rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta_row(d: Dims, var: f64) -> Vec<f64> {
        let mut v = vec![0.0; d.voxels()];
        v[0] = var;
        v
    }

    #[test]
    fn white_noise_variance() {
        let d = Dims::cube(16).unwrap();
        let spec = MogrfSpec {
            means: vec![0.3],
            cov: CovarianceGrid::reference_row(d, vec![delta_row(d, 2.0)]).unwrap(),
        };
        let sampler = MogrfSampler::new(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sum2 = 0.0;
        let mut n = 0usize;
        while n < 1_000_000 {
            let f = sampler.sample(&mut rng).unwrap();
            // each sample's spatial mean is exactly the target mean
            assert!((f.channel_means()[0] - 0.3).abs() < 1e-12);
            sum2 += f.data().iter().map(|v| (v - 0.3) * (v - 0.3)).sum::<f64>();
            n += f.voxels();
        }
        let var = sum2 / n as f64;
        let s = d.voxels() as f64;
        let want = 2.0 * (s - 1.0) / s;
        // standard error of a variance estimate from n Gaussian values
        let se = want * (2.0 / n as f64).sqrt();
        assert!((var - want).abs() < 3.0 * se, "{var} vs {want}");
    }

    #[test]
    fn zero_cross_row_gives_constant_channel() {
        let d = Dims::cube(8).unwrap();
        let spec = MogrfSpec {
            means: vec![0.0, -0.25],
            cov: CovarianceGrid::reference_row(d, vec![delta_row(d, 1.0), vec![0.0; d.voxels()]])
                .unwrap(),
        };
        let f = sample(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(f.channel(1).iter().all(|&v| v == -0.25));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let d = Dims::new(6, 5, 4).unwrap();
        let spec = MogrfSpec::zero_mean(
            CovarianceGrid::reference_row(d, vec![delta_row(d, 1.0), delta_row(d, 0.5), delta_row(d, -0.2)])
                .unwrap(),
        );
        let a = sample(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        // non-reference channels are a deterministic function of the reference
        let sampler = MogrfSampler::new(&spec).unwrap();
        let again = sampler.channels_from_reference(a.channel(0)).unwrap();
        assert_eq!(again, a);
    }

    #[test]
    fn degenerate_reference_rejected() {
        let d = Dims::cube(4).unwrap();
        let spec = MogrfSpec::zero_mean(
            CovarianceGrid::reference_row(d, vec![vec![0.0; d.voxels()]]).unwrap(),
        );
        assert!(matches!(MogrfSampler::new(&spec), Err(Error::Degenerate(_))));
    }

    #[test]
    fn small_sample_check_is_finite() {
        let d = Dims::cube(4).unwrap();
        let spec = MogrfSpec::zero_mean(
            CovarianceGrid::reference_row(d, vec![delta_row(d, 1.0)]).unwrap(),
        );
        assert!(empirical_cov_check(&spec, 2, 0).unwrap().is_finite());
        assert!(empirical_cov_check(&spec, 1, 0).is_err());
    }
}
