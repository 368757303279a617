//! Multi-dimensional complex FFTs over [`Dims`] grids built from 1D rustfft plans.
//!
//! Both directions are unnormalized: `forward` computes `sum_s x_s e^{-i w.s}`
//! and `inverse` computes `sum_k X_k e^{+i w.k}`. Callers divide by the voxel
//! count where a normalized inverse is needed.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::field::{Axis, Dims};

#[derive(Clone)]
struct AxisPlans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

/// Cached plans for one grid shape. Cheap to clone; scratch is per call.
#[derive(Clone)]
pub struct GridFft {
    dims: Dims,
    plans: [AxisPlans; 3],
}

impl std::fmt::Debug for GridFft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GridFft").field("dims", &self.dims).finish()
    }
}

impl GridFft {
    pub fn new(dims: Dims) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        let mut plan = |n: usize| AxisPlans {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        };
        let plans = [plan(dims.nx), plan(dims.ny), plan(dims.nz)];
        GridFft { dims, plans }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        self.transform(buf, &Axis::ALL, false);
    }

    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.transform(buf, &Axis::ALL, true);
    }

    /// Transforms along `axes` only, batched over the remaining axes.
    /// `buf` may hold several consecutive grids (one per channel).
    pub fn transform(&self, buf: &mut [Complex64], axes: &[Axis], inverse: bool) {
        let s = self.dims.voxels();
        assert!(
            s > 0 && buf.len().is_multiple_of(s),
            "buffer length {} is not a multiple of the grid size {}",
            buf.len(),
            s
        );
        for grid in buf.chunks_exact_mut(s) {
            for &axis in axes {
                self.transform_axis(grid, axis, inverse);
            }
        }
    }

    fn transform_axis(&self, grid: &mut [Complex64], axis: Axis, inverse: bool) {
        let d = self.dims;
        let n = d.extent(axis);
        if n == 1 {
            return;
        }
        let p = &self.plans[axis.index()];
        let fft = if inverse { &p.inverse } else { &p.forward };
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        match axis {
            Axis::X => fft.process_with_scratch(grid, &mut scratch),
            Axis::Y => {
                // gather whole x-rows of a z-slab so the inner copies stay contiguous
                let mut lines = vec![Complex64::new(0.0, 0.0); d.nx * d.ny];
                for z in 0..d.nz {
                    let slab = &mut grid[z * d.nx * d.ny..(z + 1) * d.nx * d.ny];
                    for y in 0..d.ny {
                        for x in 0..d.nx {
                            lines[x * d.ny + y] = slab[y * d.nx + x];
                        }
                    }
                    fft.process_with_scratch(&mut lines, &mut scratch);
                    for y in 0..d.ny {
                        for x in 0..d.nx {
                            slab[y * d.nx + x] = lines[x * d.ny + y];
                        }
                    }
                }
            }
            Axis::Z => {
                let plane = d.nx * d.ny;
                let mut lines = vec![Complex64::new(0.0, 0.0); plane * d.nz];
                for z in 0..d.nz {
                    for xy in 0..plane {
                        lines[xy * d.nz + z] = grid[z * plane + xy];
                    }
                }
                fft.process_with_scratch(&mut lines, &mut scratch);
                for z in 0..d.nz {
                    for xy in 0..plane {
                        grid[z * plane + xy] = lines[xy * d.nz + z];
                    }
                }
            }
        }
    }

    /// Forward transform of a real grid.
    pub fn forward_real(&self, data: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Normalized inverse transform, keeping the real part.
    pub fn inverse_real(&self, mut spectrum: Vec<Complex64>) -> Vec<f64> {
        let s = spectrum.len();
        self.inverse(&mut spectrum);
        let inv = 1.0 / s as f64;
        spectrum.into_iter().map(|c| c.re * inv).collect()
    }

    /// Flat index of the frequency `-k` for flat frequency index `k`.
    pub fn negated(&self, k: usize) -> usize {
        let d = self.dims;
        let (x, y, z) = d.coords(k);
        d.index(
            crate::field::negated_index(x, d.nx),
            crate::field::negated_index(y, d.ny),
            crate::field::negated_index(z, d.nz),
        )
    }
}
