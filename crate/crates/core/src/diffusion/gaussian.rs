//! Exact posterior-mean denoiser for a stationary periodic Gaussian prior.
//!
//! With `Kc(k)` the `H x H` spectral covariance of the prior at frequency `k`
//! (`E[X(k) X(k)^H] = S Kc(k)` for unnormalized transforms `X`), a noisy
//! observation `x = x0 + sigma n` has posterior mean
//! `mu + F^-1[Kc (Kc + sigma^2 I)^-1 F[x - mu]]`. Each `Kc(k)` is stored
//! eigendecomposed so every noise level costs one filter pass.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::fft::GridFft;
use crate::field::{Dims, Field3};
use crate::mogrf::{MogrfSpec, TRANSFER_EPS};
use crate::mosm::{lattice_offset, MosmKernel, MosmParams};
use crate::stats::{cov_from_stats, negated_offset, CovarianceGrid, StatsMap};

use super::Denoiser;

#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    dims: Dims,
    channels: usize,
    means: Vec<f64>,
    fft: GridFft,
    /// Clamped eigenvalues, `channels` per frequency.
    eigvals: Vec<f64>,
    /// Column-major eigenvectors, `channels^2` per frequency. Empty when `channels == 1`.
    eigvecs: Vec<Complex64>,
    clamped_fraction: f64,
}

impl GaussianDenoiser {
    /// Builds the prior from per-frequency spectral covariance matrices
    /// (`kc[k]` row-major, `h * h` entries).
    fn from_spectral(dims: Dims, means: Vec<f64>, kc: Vec<Complex64>) -> Result<Self> {
        let h = means.len();
        let s = dims.voxels();
        debug_assert_eq!(kc.len(), s * h * h);
        let mut eigvals = Vec::with_capacity(s * h);
        let mut eigvecs = Vec::with_capacity(if h == 1 { 0 } else { s * h * h });
        let (mut negative, mut total) = (0.0, 0.0);
        for block in kc.chunks_exact(h * h) {
            if h == 1 {
                let l = block[0].re;
                total += l.abs();
                if l < 0.0 {
                    negative -= l;
                }
                eigvals.push(l.max(0.0));
                continue;
            }
            let m = DMatrix::from_fn(h, h, |i, j| {
                0.5 * (block[i * h + j] + block[j * h + i].conj())
            });
            let eig = SymmetricEigen::new(m);
            for &l in eig.eigenvalues.iter() {
                total += l.abs();
                if l < 0.0 {
                    negative -= l;
                }
                eigvals.push(l.max(0.0));
            }
            eigvecs.extend(eig.eigenvectors.iter().copied());
        }
        if eigvals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("prior spectrum is not finite".into()));
        }
        Ok(GaussianDenoiser {
            dims,
            channels: h,
            means,
            fft: GridFft::new(dims),
            eigvals,
            eigvecs,
            clamped_fraction: if total > 0.0 { negative / total } else { 0.0 },
        })
    }

    /// Prior from a full covariance grid. Pairs `(b, g)` missing from `cov`
    /// are filled from `(g, b)` at the negated offset; a pair and its mirror
    /// must not both be absent.
    pub fn from_covariance(cov: &CovarianceGrid, means: Vec<f64>) -> Result<Self> {
        let d = cov.dims;
        d.validate()?;
        let h = cov.channels;
        if means.len() != h {
            return Err(Error::DimMismatch(format!("{} means for {h} channels", means.len())));
        }
        let s = d.voxels();
        let fft = GridFft::new(d);
        let mut spectra: Vec<Option<Vec<Complex64>>> = vec![None; h * h];
        for b in 0..h {
            for g in 0..h {
                let grid: Vec<f64> = match (cov.get(b, g), cov.get(g, b)) {
                    (Some(v), _) => v.to_vec(),
                    (None, Some(v)) => (0..s).map(|r| v[negated_offset(d, r)]).collect(),
                    (None, None) => {
                        return Err(invalid(format!(
                            "covariance grid lacks both ({b}, {g}) and ({g}, {b})"
                        )))
                    }
                };
                if grid.len() != s {
                    return Err(Error::DimMismatch(format!(
                        "covariance pair ({b}, {g}) has {} values, expected {s}",
                        grid.len()
                    )));
                }
                spectra[b * h + g] = Some(fft.forward_real(&grid));
            }
        }
        let mut kc = vec![Complex64::new(0.0, 0.0); s * h * h];
        for (p, spec) in spectra.into_iter().enumerate() {
            for (k, v) in spec.expect("filled above").into_iter().enumerate() {
                kc[k * h * h + p] = v.conj();
            }
        }
        Self::from_spectral(d, means, kc)
    }

    /// The prior realized by the MOGRF sampler for `spec`: the reference
    /// spectrum clamped and stripped of its zero frequency, and every other
    /// channel its filtered copy.
    pub fn from_mogrf(spec: &MogrfSpec) -> Result<Self> {
        let d = spec.dims();
        let h = spec.channels();
        let s = d.voxels();
        let row = spec.cov.row()?;
        let fft = GridFft::new(d);
        let p: Vec<f64> = fft.forward_real(row[0]).iter().map(|c| c.re).collect();
        let transfer: Vec<Vec<Complex64>> = row
            .iter()
            .enumerate()
            .map(|(g, r)| {
                if g == 0 {
                    vec![Complex64::new(1.0, 0.0); s]
                } else {
                    fft.forward_real(r)
                        .iter()
                        .zip(&p)
                        .map(|(f, &p00)| f / (p00.max(0.0) + TRANSFER_EPS))
                        .collect()
                }
            })
            .collect();
        let mut kc = vec![Complex64::new(0.0, 0.0); s * h * h];
        for k in 1..s {
            let power = p[k].max(0.0);
            for b in 0..h {
                for g in 0..h {
                    kc[k * h * h + b * h + g] = transfer[b][k] * transfer[g][k].conj() * power;
                }
            }
        }
        Self::from_spectral(d, spec.means.clone(), kc)
    }

    /// Prior whose covariance is the centered statistics and whose mean is
    /// the statistics' channel means. Needs every pair or its mirror.
    pub fn from_stats(stats: &StatsMap) -> Result<Self> {
        Self::from_covariance(&cov_from_stats(stats), stats.means.clone())
    }

    /// Zero-mean prior with the full MOSM covariance on the lattice of `dims`.
    pub fn from_mosm(params: &MosmParams, dims: Dims) -> Result<Self> {
        dims.validate()?;
        let kernel = MosmKernel::new(params)?;
        let h = params.channels();
        let s = dims.voxels();
        let mut values = vec![vec![0.0; s]; h * h];
        for r in 0..s {
            for (p, v) in kernel.eval(lattice_offset(dims, r)).into_iter().enumerate() {
                values[p][r] = v;
            }
        }
        let cov = CovarianceGrid {
            dims,
            channels: h,
            pairs: (0..h).flat_map(|b| (0..h).map(move |g| (b, g))).collect(),
            values,
        };
        Self::from_covariance(&cov, vec![0.0; h])
    }

    /// White-noise prior with per-voxel variance `variance` in every channel.
    pub fn white(dims: Dims, channels: usize, variance: f64) -> Result<Self> {
        dims.validate()?;
        if channels == 0 || !(variance >= 0.0 && variance.is_finite()) {
            return Err(invalid("white prior needs channels >= 1 and a finite variance >= 0"));
        }
        let s = dims.voxels();
        let h = channels;
        let mut kc = vec![Complex64::new(0.0, 0.0); s * h * h];
        for k in 0..s {
            for c in 0..h {
                kc[k * h * h + c * h + c] = Complex64::new(variance, 0.0);
            }
        }
        Self::from_spectral(dims, vec![0.0; h], kc)
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    /// The same covariance around different channel means.
    pub fn with_prior_means(mut self, means: Vec<f64>) -> Result<Self> {
        if means.len() != self.channels {
            return Err(Error::DimMismatch(format!(
                "{} means for {} channels",
                means.len(),
                self.channels
            )));
        }
        self.means = means;
        Ok(self)
    }

    /// Share of the spectral eigenvalue mass that was negative and clamped.
    pub fn clamped_fraction(&self) -> f64 {
        self.clamped_fraction
    }

    /// Applies `U f(Lambda) U^H` at every frequency to the spectra in `buf`.
    fn apply_spectral(&self, buf: &mut [Complex64], f: impl Fn(f64) -> f64) {
        let h = self.channels;
        let s = self.dims.voxels();
        if h == 1 {
            for (v, &l) in buf.iter_mut().zip(&self.eigvals) {
                *v *= f(l);
            }
            return;
        }
        let mut xin = vec![Complex64::new(0.0, 0.0); h];
        let mut proj = vec![Complex64::new(0.0, 0.0); h];
        for k in 0..s {
            let u = &self.eigvecs[k * h * h..(k + 1) * h * h];
            let l = &self.eigvals[k * h..(k + 1) * h];
            for c in 0..h {
                xin[c] = buf[c * s + k];
            }
            // column j of U is u[j * h..(j + 1) * h]
            for j in 0..h {
                let col = &u[j * h..(j + 1) * h];
                let dot: Complex64 = col.iter().zip(&xin).map(|(a, b)| a.conj() * b).sum();
                proj[j] = dot * f(l[j]);
            }
            for c in 0..h {
                buf[c * s + k] = (0..h).map(|j| u[j * h + c] * proj[j]).sum();
            }
        }
    }

    fn filter(&self, centered: Vec<Complex64>, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let mut buf = centered;
        self.fft.forward(&mut buf);
        self.apply_spectral(&mut buf, f);
        self.fft.inverse(&mut buf);
        let inv = 1.0 / self.dims.voxels() as f64;
        buf.into_iter().map(|c| c.re * inv).collect()
    }

    fn with_means(&self, mut data: Vec<f64>) -> Result<Field3> {
        let s = self.dims.voxels();
        for (c, chunk) in data.chunks_exact_mut(s).enumerate() {
            let mu = self.means[c];
            chunk.iter_mut().for_each(|v| *v += mu);
        }
        Ok(Field3::from_vec(self.dims, self.channels, data)?)
    }

    /// One draw from the prior.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Field3> {
        let n = self.channels * self.dims.voxels();
        let noise: Vec<Complex64> = (0..n)
            .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
            .collect();
        self.with_means(self.filter(noise, f64::sqrt))
    }

    /// The covariance the prior actually carries after clamping, as a full grid.
    pub fn covariance(&self) -> Result<CovarianceGrid> {
        let h = self.channels;
        let s = self.dims.voxels();
        let mut values = Vec::with_capacity(h * h);
        for b in 0..h {
            // Column b of Kc per frequency, as H spectra.
            let mut buf = vec![Complex64::new(0.0, 0.0); h * s];
            for k in 0..s {
                buf[b * s + k] = Complex64::new(1.0, 0.0);
            }
            self.apply_spectral(&mut buf, |l| l);
            // buf[g][k] = Kc_{g b}(k) = conj(Kc_{b g}(k)) = FFT(C^{b g})(k)
            for g in 0..h {
                values.push(self.fft.inverse_real(buf[g * s..(g + 1) * s].to_vec()));
            }
        }
        Ok(CovarianceGrid {
            dims: self.dims,
            channels: h,
            pairs: (0..h).flat_map(|b| (0..h).map(move |g| (b, g))).collect(),
            values,
        })
    }
}

impl Denoiser for GaussianDenoiser {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn denoise(&self, x: &Field3, sigma: f64) -> Result<Field3> {
        if x.dims() != self.dims || x.channels() != self.channels {
            return Err(Error::DimMismatch(format!(
                "denoiser expects {} channels on {}, got {} on {}",
                self.channels,
                self.dims,
                x.channels(),
                x.dims()
            )));
        }
        if !(sigma >= 0.0) {
            return Err(invalid(format!("noise level must be >= 0, got {sigma}")));
        }
        if sigma == 0.0 {
            return Ok(x.clone());
        }
        let s = self.dims.voxels();
        let centered: Vec<Complex64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| Complex64::new(v - self.means[i / s], 0.0))
            .collect();
        let var = sigma * sigma;
        self.with_means(self.filter(centered, |l| l / (l + var)))
    }
}
