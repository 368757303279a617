//! Two-point spatial statistics of periodic fields.
//!
//! `f_r^{bg} = (1/S) sum_s m_s^b m_{s+r}^g`, with offsets stored unshifted
//! (offset `r` at array index `r mod D`, so `r = 0` is index 0).

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fft::GridFft;
use crate::field::{negated_index, Axis, Dims, Field3};

/// Largest voxel count accepted by [`two_point_stats_bruteforce`].
pub const BRUTEFORCE_MAX_VOXELS: usize = 4096;

/// Which `(beta, gamma)` channel pairs to compute.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSelector {
    #[default]
    All,
    /// `(0, gamma)` for every channel.
    ReferenceRow,
    Pairs(Vec<(usize, usize)>),
}

impl PairSelector {
    pub fn resolve(&self, channels: usize) -> Result<Vec<(usize, usize)>> {
        let pairs: Vec<(usize, usize)> = match self {
            PairSelector::All => (0..channels)
                .flat_map(|b| (0..channels).map(move |g| (b, g)))
                .collect(),
            PairSelector::ReferenceRow => (0..channels).map(|g| (0, g)).collect(),
            PairSelector::Pairs(p) => p.clone(),
        };
        if pairs.is_empty() {
            return Err(invalid("empty channel pair selection"));
        }
        for &(b, g) in &pairs {
            if b >= channels || g >= channels {
                return Err(invalid(format!(
                    "channel pair ({b}, {g}) out of range for {channels} channels"
                )));
            }
        }
        Ok(pairs)
    }
}

/// Two-point statistics over the full offset lattice, plus channel means.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsMap {
    pub dims: Dims,
    pub pairs: Vec<(usize, usize)>,
    /// One grid of `dims.voxels()` offsets per entry of `pairs`.
    pub values: Vec<Vec<f64>>,
    pub means: Vec<f64>,
}

impl StatsMap {
    pub fn get(&self, beta: usize, gamma: usize) -> Option<&[f64]> {
        self.pairs
            .iter()
            .position(|&p| p == (beta, gamma))
            .map(|i| self.values[i].as_slice())
    }

    /// Statistics grids as channels of a field over offsets.
    pub fn to_field(&self) -> Result<Field3> {
        let data: Vec<f64> = self.values.iter().flatten().copied().collect();
        Ok(Field3::from_vec(self.dims, self.pairs.len(), data)?)
    }

    /// Plane of offsets with `r_axis = 0`, laid out on `dims.with_extent(axis, 1)`.
    pub fn plane(&self, axis: Axis) -> Vec<Vec<f64>> {
        let pd = self.dims.with_extent(axis, 1);
        self.values
            .iter()
            .map(|v| {
                (0..pd.voxels())
                    .map(|q| {
                        let (x, y, z) = pd.coords(q);
                        v[self.dims.index(x, y, z)]
                    })
                    .collect()
            })
            .collect()
    }
}

/// Covariance grids `Sigma^{bg}_r = f^{bg}_r - mu^b mu^g`.
///
/// A covariance row for field synthesis uses pairs `(0, gamma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceGrid {
    pub dims: Dims,
    pub channels: usize,
    pub pairs: Vec<(usize, usize)>,
    pub values: Vec<Vec<f64>>,
}

impl CovarianceGrid {
    /// A reference-channel row `k_{0 gamma}` for `gamma = 0..rows.len()`.
    pub fn reference_row(dims: Dims, rows: Vec<Vec<f64>>) -> Result<Self> {
        dims.validate()?;
        if rows.is_empty() {
            return Err(invalid("covariance row needs at least one channel"));
        }
        for r in &rows {
            if r.len() != dims.voxels() {
                return Err(Error::DimMismatch(format!(
                    "covariance grid has {} values, dims {dims} need {}",
                    r.len(),
                    dims.voxels()
                )));
            }
        }
        Ok(CovarianceGrid {
            dims,
            channels: rows.len(),
            pairs: (0..rows.len()).map(|g| (0, g)).collect(),
            values: rows,
        })
    }

    pub fn get(&self, beta: usize, gamma: usize) -> Option<&[f64]> {
        self.pairs
            .iter()
            .position(|&p| p == (beta, gamma))
            .map(|i| self.values[i].as_slice())
    }

    /// The row `k_{0 gamma}` for every channel, if present.
    pub fn row(&self) -> Result<Vec<&[f64]>> {
        (0..self.channels)
            .map(|g| {
                self.get(0, g)
                    .ok_or_else(|| invalid(format!("covariance grid lacks pair (0, {g})")))
            })
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

pub fn cov_from_stats(stats: &StatsMap) -> CovarianceGrid {
    let mu = &stats.means;
    CovarianceGrid {
        dims: stats.dims,
        channels: mu.len(),
        pairs: stats.pairs.clone(),
        values: stats
            .pairs
            .iter()
            .zip(&stats.values)
            .map(|(&(b, g), v)| v.iter().map(|f| f - mu[b] * mu[g]).collect())
            .collect(),
    }
}

pub fn stats_from_cov(cov: &CovarianceGrid, means: &[f64]) -> Result<StatsMap> {
    if means.len() != cov.channels {
        return Err(Error::DimMismatch(format!(
            "{} means for {} channels",
            means.len(),
            cov.channels
        )));
    }
    Ok(StatsMap {
        dims: cov.dims,
        pairs: cov.pairs.clone(),
        values: cov
            .pairs
            .iter()
            .zip(&cov.values)
            .map(|(&(b, g), v)| v.iter().map(|s| s + means[b] * means[g]).collect())
            .collect(),
        means: means.to_vec(),
    })
}

fn complex_channels(field: &Field3) -> Vec<Complex64> {
    field
        .data()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect()
}

pub fn two_point_stats(field: &Field3, pairs: &PairSelector) -> Result<StatsMap> {
    let pairs = pairs.resolve(field.channels())?;
    let d = field.dims();
    let s = d.voxels();
    let fft = GridFft::new(d);
    let mut spec = complex_channels(field);
    fft.forward(&mut spec);
    let scale = 1.0 / (s as f64 * s as f64);
    let values = pairs
        .iter()
        .map(|&(b, g)| {
            let mb = &spec[b * s..(b + 1) * s];
            let mg = &spec[g * s..(g + 1) * s];
            let mut buf: Vec<Complex64> = mb.iter().zip(mg).map(|(a, c)| a.conj() * c).collect();
            fft.inverse(&mut buf);
            buf.iter().map(|c| c.re * scale).collect()
        })
        .collect();
    Ok(StatsMap {
        dims: d,
        pairs,
        values,
        means: field.channel_means(),
    })
}

/// Literal double sum over voxels and offsets. Used as a reference.
pub fn two_point_stats_bruteforce(field: &Field3, pairs: &PairSelector) -> Result<StatsMap> {
    let d = field.dims();
    let s = d.voxels();
    if s > BRUTEFORCE_MAX_VOXELS {
        return Err(invalid(format!(
            "brute-force statistics limited to {BRUTEFORCE_MAX_VOXELS} voxels, got {s}"
        )));
    }
    let pairs = pairs.resolve(field.channels())?;
    let values = pairs
        .iter()
        .map(|&(b, g)| {
            let mb = field.channel(b);
            let mg = field.channel(g);
            (0..s)
                .map(|r| {
                    // Terms are summed in an order that depends only on the
                    // unordered voxel pair, so f_{-r}^{bg} and f_r^{gb} agree bitwise.
                    let mut terms: Vec<((usize, usize), f64)> = (0..s)
                        .map(|p| {
                            let q = shifted(d, p, r);
                            let key = match b.cmp(&g) {
                                std::cmp::Ordering::Less => (p, 0),
                                std::cmp::Ordering::Greater => (q, 0),
                                std::cmp::Ordering::Equal => (p.min(q), p.max(q)),
                            };
                            (key, mb[p] * mg[q])
                        })
                        .collect();
                    terms.sort_by_key(|t| t.0);
                    terms.iter().map(|t| t.1).sum::<f64>() / s as f64
                })
                .collect()
        })
        .collect();
    Ok(StatsMap {
        dims: d,
        pairs,
        values,
        means: field.channel_means(),
    })
}

fn shifted(d: Dims, p: usize, r: usize) -> usize {
    let (x, y, z) = d.coords(p);
    let (rx, ry, rz) = d.coords(r);
    d.index((x + rx) % d.nx, (y + ry) % d.ny, (z + rz) % d.nz)
}

/// Moves offset 0 to the grid centre for display.
pub fn fftshift(field: &Field3) -> Field3 {
    let d = field.dims();
    field.circular_shift([
        (d.nx / 2) as isize,
        (d.ny / 2) as isize,
        (d.nz / 2) as isize,
    ])
}

/// Statistics on one plane of offsets through `r = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneStats {
    /// Offset lattice of the plane: the volume dims with extent 1 along the normal.
    pub dims: Dims,
    pub values: Vec<Vec<f64>>,
}

/// Two-point statistics on the three axis-aligned offset planes.
///
/// `planes[a]` holds offsets with `r_a = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthoStats {
    pub channels: usize,
    pub pairs: Vec<(usize, usize)>,
    pub planes: [PlaneStats; 3],
}

impl OrthoStats {
    /// The volume dims implied by the three planes.
    pub fn volume_dims(&self) -> Result<Dims> {
        let [px, py, pz] = &self.planes;
        let d = Dims {
            nx: py.dims.nx,
            ny: px.dims.ny,
            nz: px.dims.nz,
        };
        let consistent = px.dims == d.with_extent(Axis::X, 1)
            && py.dims == d.with_extent(Axis::Y, 1)
            && pz.dims == d.with_extent(Axis::Z, 1);
        if !consistent {
            return Err(Error::DimMismatch(format!(
                "plane extents {} / {} / {} do not share a volume",
                px.dims, py.dims, pz.dims
            )));
        }
        Ok(d)
    }

    /// Largest absolute element difference over all planes and pairs.
    pub fn max_abs_diff(&self, other: &OrthoStats) -> f64 {
        self.planes
            .iter()
            .zip(&other.planes)
            .flat_map(|(a, b)| a.values.iter().zip(&b.values))
            .flat_map(|(u, v)| u.iter().zip(v))
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Per-plane sum of squared differences, indexed by normal axis.
    pub fn plane_sq_errors(&self, other: &OrthoStats) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (a, (p, q)) in self.planes.iter().zip(&other.planes).enumerate() {
            out[a] = p
                .values
                .iter()
                .zip(&q.values)
                .flat_map(|(u, v)| u.iter().zip(v))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
        }
        out
    }

    pub fn element_count(&self) -> usize {
        self.planes
            .iter()
            .map(|p| p.values.iter().map(Vec::len).sum::<usize>())
            .sum()
    }
}

fn other_axes(axis: Axis) -> [Axis; 2] {
    match axis {
        Axis::X => [Axis::Y, Axis::Z],
        Axis::Y => [Axis::X, Axis::Z],
        Axis::Z => [Axis::X, Axis::Y],
    }
}

/// Flat plane index for each voxel of `d`, dropping the coordinate along `axis`.
fn plane_map(d: Dims, axis: Axis) -> Vec<usize> {
    let pd = d.with_extent(axis, 1);
    (0..d.voxels())
        .map(|p| {
            let (x, y, z) = d.coords(p);
            let mut c = [x, y, z];
            c[axis.index()] = 0;
            pd.index(c[0], c[1], c[2])
        })
        .collect()
}

/// Per-slice 2D spectra of all channels, transformed along the plane axes.
struct SliceSpectra {
    data: Vec<Complex64>,
    plane_of: Vec<usize>,
    plane_fft: GridFft,
    full_fft: GridFft,
    axes: [Axis; 2],
}

impl SliceSpectra {
    fn new(field: &Field3, axis: Axis) -> Self {
        let d = field.dims();
        let full_fft = GridFft::new(d);
        let axes = other_axes(axis);
        let mut data = complex_channels(field);
        full_fft.transform(&mut data, &axes, false);
        SliceSpectra {
            data,
            plane_of: plane_map(d, axis),
            plane_fft: GridFft::new(d.with_extent(axis, 1)),
            full_fft,
            axes,
        }
    }

    fn plane_stats(&self, s: usize, pairs: &[(usize, usize)]) -> Vec<Vec<f64>> {
        let np = self.plane_fft.dims().voxels();
        let scale = 1.0 / (s as f64 * np as f64);
        pairs
            .iter()
            .map(|&(b, g)| {
                let mut acc = vec![Complex64::new(0.0, 0.0); np];
                let mb = &self.data[b * s..(b + 1) * s];
                let mg = &self.data[g * s..(g + 1) * s];
                for p in 0..s {
                    acc[self.plane_of[p]] += mb[p].conj() * mg[p];
                }
                self.plane_fft.inverse(&mut acc);
                acc.iter().map(|c| c.re * scale).collect()
            })
            .collect()
    }
}

fn ortho_from_field_impl(field: &Field3, pairs: &[(usize, usize)]) -> OrthoStats {
    let d = field.dims();
    let planes = Axis::ALL.map(|axis| {
        let spectra = SliceSpectra::new(field, axis);
        PlaneStats {
            dims: d.with_extent(axis, 1),
            values: spectra.plane_stats(d.voxels(), pairs),
        }
    });
    OrthoStats {
        channels: field.channels(),
        pairs: pairs.to_vec(),
        planes,
    }
}

/// Statistics of a volume restricted to the three offset planes.
pub fn ortho_stats(field: &Field3, pairs: &PairSelector) -> Result<OrthoStats> {
    let pairs = pairs.resolve(field.channels())?;
    Ok(ortho_from_field_impl(field, &pairs))
}

/// Statistics of three 2D images, each declared by its normal axis.
///
/// An image is a field with extent 1 along its normal axis; its plane
/// statistics are its own periodic 2D statistics.
pub fn ortho_stats_from_images(
    images: &[(Axis, Field3)],
    pairs: &PairSelector,
) -> Result<OrthoStats> {
    if images.len() != 3 {
        return Err(invalid(format!(
            "expected three images (one per axis), got {}",
            images.len()
        )));
    }
    let mut slots: [Option<&Field3>; 3] = [None, None, None];
    for (axis, img) in images {
        if img.dims().extent(*axis) != 1 {
            return Err(Error::DimMismatch(format!(
                "image declared normal to {axis} has extent {} along it",
                img.dims().extent(*axis)
            )));
        }
        if slots[axis.index()].replace(img).is_some() {
            return Err(invalid(format!("axis {axis} declared twice")));
        }
    }
    let channels = images[0].1.channels();
    if images.iter().any(|(_, f)| f.channels() != channels) {
        return Err(Error::DimMismatch("images differ in channel count".into()));
    }
    let pairs = pairs.resolve(channels)?;
    let planes = Axis::ALL.map(|axis| {
        let img = slots[axis.index()].expect("every axis filled");
        let spectra = SliceSpectra::new(img, axis);
        PlaneStats {
            dims: img.dims(),
            values: spectra.plane_stats(img.voxels(), &pairs),
        }
    });
    let out = OrthoStats {
        channels,
        pairs,
        planes,
    };
    out.volume_dims()?;
    Ok(out)
}

/// How the statistics mismatch is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Sum of squared differences over every plane, pair and offset.
    #[default]
    Sum,
    /// The same sum divided by the number of compared elements.
    Mean,
}

/// `err = sum ||f_plane(field) - target||^2` and its gradient with respect to the field.
pub fn stats_loss_and_grad(
    field: &Field3,
    target: &OrthoStats,
    reduction: LossReduction,
) -> Result<(f64, Field3)> {
    let d = field.dims();
    if target.channels != field.channels() {
        return Err(Error::DimMismatch(format!(
            "target has {} channels, field has {}",
            target.channels,
            field.channels()
        )));
    }
    if target.volume_dims()? != d {
        return Err(Error::DimMismatch(format!(
            "target planes describe a {} volume, field is {d}",
            target.volume_dims()?
        )));
    }
    let s = d.voxels();
    let h = field.channels();
    let norm = match reduction {
        LossReduction::Sum => 1.0,
        LossReduction::Mean => 1.0 / target.element_count() as f64,
    };
    let mut err = 0.0;
    let mut grad_spec = vec![Complex64::new(0.0, 0.0); h * s];
    let mut grad = vec![0.0; h * s];
    for axis in Axis::ALL {
        let spectra = SliceSpectra::new(field, axis);
        let np = spectra.plane_fft.dims().voxels();
        let current = spectra.plane_stats(s, &target.pairs);
        grad_spec.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        let scale = 1.0 / (s as f64 * np as f64);
        for ((&(b, g), cur), tgt) in target
            .pairs
            .iter()
            .zip(&current)
            .zip(&target.planes[axis.index()].values)
        {
            let mut w: Vec<Complex64> = cur
                .iter()
                .zip(tgt)
                .map(|(c, t)| {
                    err += (c - t) * (c - t) * norm;
                    Complex64::new(2.0 * (c - t) * norm, 0.0)
                })
                .collect();
            spectra.plane_fft.forward(&mut w);
            let mb = &spectra.data[b * s..(b + 1) * s];
            let mg = &spectra.data[g * s..(g + 1) * s];
            for p in 0..s {
                let wk = w[spectra.plane_of[p]];
                grad_spec[b * s + p] += wk.conj() * mg[p] * scale;
                grad_spec[g * s + p] += wk * mb[p] * scale;
            }
        }
        spectra
            .full_fft
            .transform(&mut grad_spec, &spectra.axes, true);
        for (gv, c) in grad.iter_mut().zip(&grad_spec) {
            *gv += c.re;
        }
    }
    Ok((err, Field3::from_vec(d, h, grad)?))
}

/// Offset of `-r` in flat lattice indexing.
pub fn negated_offset(d: Dims, r: usize) -> usize {
    let (x, y, z) = d.coords(r);
    d.index(
        negated_index(x, d.nx),
        negated_index(y, d.ny),
        negated_index(z, d.nz),
    )
}
