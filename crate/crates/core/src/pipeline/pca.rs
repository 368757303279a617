//! Flattened statistics vectors and their principal component analysis.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{Dims, Field3};
use crate::stats::{two_point_stats, PairSelector};

pub const STATS_VECTOR_SCHEMA: &str = "grainfield.stats_vector.v1";

/// Largest number of offsets kept per axis.
pub const MAX_OFFSETS_PER_AXIS: usize = 32;

/// Which statistics a [`StatsVector`] holds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSelection {
    /// Dims of the source field.
    pub dims: Dims,
    pub pairs: Vec<(usize, usize)>,
    /// Offsets kept are the multiples of `stride` along each axis.
    pub stride: [usize; 3],
}

impl StatsSelection {
    /// Reference-row pairs with `stride = ceil(D / 32)` per axis.
    pub fn reference_row(dims: Dims, channels: usize) -> Self {
        let stride = dims.as_array().map(|n| n.div_ceil(MAX_OFFSETS_PER_AXIS));
        StatsSelection {
            dims,
            pairs: (0..channels).map(|g| (0, g)).collect(),
            stride,
        }
    }

    fn offsets(&self) -> Vec<usize> {
        let d = self.dims;
        let [sx, sy, sz] = self.stride;
        let mut out = Vec::new();
        for z in (0..d.nz).step_by(sz) {
            for y in (0..d.ny).step_by(sy) {
                for x in (0..d.nx).step_by(sx) {
                    out.push(d.index(x, y, z));
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.pairs.len() * self.offsets().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsVector {
    pub schema: String,
    pub selection: StatsSelection,
    pub values: Vec<f64>,
}

impl StatsVector {
    pub fn from_field(field: &Field3) -> Result<Self> {
        Self::with_selection(field, StatsSelection::reference_row(field.dims(), field.channels()))
    }

    pub fn with_selection(field: &Field3, selection: StatsSelection) -> Result<Self> {
        if selection.dims != field.dims() || selection.stride.contains(&0) {
            return Err(invalid("selection does not match the field"));
        }
        let stats = two_point_stats(field, &PairSelector::Pairs(selection.pairs.clone()))?;
        let offsets = selection.offsets();
        let values: Vec<f64> = stats
            .values
            .iter()
            .flat_map(|v| offsets.iter().map(move |&r| v[r]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("statistics are not finite".into()));
        }
        Ok(StatsVector {
            schema: STATS_VECTOR_SCHEMA.into(),
            selection,
            values,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: StatsVector = serde_json::from_str(text)?;
        if v.schema != STATS_VECTOR_SCHEMA {
            return Err(Error::Format(format!("unknown stats vector schema {:?}", v.schema)));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// Explained-variance ratio of every component, largest first.
    pub ratios: Vec<f64>,
    /// Per-item coordinates on the first `components` principal axes.
    pub scores: Vec<Vec<f64>>,
    pub components: usize,
}

/// PCA of the rows of `data` via SVD of the centered matrix.
///
/// Ratios cover all `min(n, L)` components and sum to 1 unless every row
/// is identical, in which case they are all 0. `components` is truncated to
/// `min(n, L)` with a warning.
pub fn pca(data: &[Vec<f64>], components: Option<usize>) -> Result<PcaResult> {
    let n = data.len();
    if n < 2 {
        return Err(invalid("PCA needs at least two vectors"));
    }
    let l = data[0].len();
    if l == 0 || data.iter().any(|r| r.len() != l) {
        return Err(Error::DimMismatch("PCA vectors must share a non-zero length".into()));
    }
    let rank_bound = n.min(l);
    let k = match components {
        Some(c) if c > rank_bound => {
            log::warn!("requested {c} components but only {rank_bound} exist; truncating");
            rank_bound
        }
        Some(c) => c,
        None => rank_bound,
    };
    let mean: Vec<f64> = (0..l)
        .map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let x = DMatrix::from_fn(n, l, |i, j| data[i][j] - mean[j]);
    let svd = x.svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let var: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].powi(2)).collect();
    let total: f64 = var.iter().sum();
    let ratios = if total > 0.0 {
        var.iter().map(|v| v / total).collect()
    } else {
        vec![0.0; var.len()]
    };
    let v_t = svd.v_t.as_ref().expect("requested V");
    let mut scores = vec![vec![0.0; k]; n];
    for (c, &i) in order.iter().take(k).enumerate() {
        // fix the sign so the largest loading is positive
        let row = v_t.row(i);
        let pivot = row.iter().fold(0.0_f64, |m, &v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (r, s) in scores.iter_mut().enumerate() {
            s[c] = sign * u[(r, i)] * svd.singular_values[i];
        }
    }
    Ok(PcaResult {
        ratios,
        scores,
        components: k,
    })
}
