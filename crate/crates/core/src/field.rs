//! Periodic multi-channel voxel grids.
//!
//! Storage is channel-major with x fastest: the value of channel `c` at
//! voxel `(x, y, z)` lives at `((c * nz + z) * ny + y) * nx + x`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("grid dimensions must be positive, got {0:?}")]
    EmptyDims([usize; 3]),
    #[error("grid size overflows usize: dims {dims:?} x {channels} channels")]
    Overflow { dims: [usize; 3], channels: usize },
    #[error("field must have at least one channel")]
    NoChannels,
    #[error("data length {got} does not match {expected} = channels x voxels")]
    Length { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
}

/// Grid axis. `X` is the fastest-varying axis in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Axis> {
        match i {
            0 => Some(Axis::X),
            1 => Some(Axis::Y),
            2 => Some(Axis::Z),
            _ => None,
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(format!("unknown axis '{other}', expected x, y or z")),
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        };
        f.write_str(s)
    }
}

/// Extents of a voxel grid along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self, FieldError> {
        let dims = Dims { nx, ny, nz };
        dims.validate()?;
        Ok(dims)
    }

    pub fn cube(n: usize) -> Result<Self, FieldError> {
        Self::new(n, n, n)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(FieldError::EmptyDims(self.as_array()));
        }
        self.checked_voxels(1).map(|_| ())
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn extent(&self, axis: Axis) -> usize {
        self.as_array()[axis.index()]
    }

    /// Number of voxels times `channels`, or an error on overflow.
    pub fn checked_voxels(&self, channels: usize) -> Result<usize, FieldError> {
        self.nx
            .checked_mul(self.ny)
            .and_then(|v| v.checked_mul(self.nz))
            .and_then(|v| v.checked_mul(channels))
            .ok_or(FieldError::Overflow {
                dims: self.as_array(),
                channels,
            })
    }

    /// Voxel count. Callers are expected to have validated the dims.
    pub fn voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    #[inline]
    pub fn coords(&self, flat: usize) -> (usize, usize, usize) {
        let x = flat % self.nx;
        let y = (flat / self.nx) % self.ny;
        let z = flat / (self.nx * self.ny);
        (x, y, z)
    }

    /// Dims with `axis` collapsed to a single voxel.
    pub fn with_extent(&self, axis: Axis, n: usize) -> Dims {
        let mut a = self.as_array();
        a[axis.index()] = n;
        Dims {
            nx: a[0],
            ny: a[1],
            nz: a[2],
        }
    }

    pub fn min_extent(&self) -> usize {
        self.nx.min(self.ny).min(self.nz)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Signed lattice offset for index `i` on an axis of `n` voxels, in `[-n/2, n/2)`.
#[inline]
pub fn wrapped_offset(i: usize, n: usize) -> isize {
    if 2 * i >= n {
        i as isize - n as isize
    } else {
        i as isize
    }
}

/// Index of the negated offset `-i mod n`.
#[inline]
pub fn negated_index(i: usize, n: usize) -> usize {
    if i == 0 {
        0
    } else {
        n - i
    }
}

/// A periodic voxel grid of `channels` real values per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Field3 {
    dims: Dims,
    channels: usize,
    data: Vec<f64>,
}

impl Field3 {
    pub fn zeros(dims: Dims, channels: usize) -> Result<Self, FieldError> {
        Self::filled(dims, channels, 0.0)
    }

    pub fn filled(dims: Dims, channels: usize, value: f64) -> Result<Self, FieldError> {
        dims.validate()?;
        if channels == 0 {
            return Err(FieldError::NoChannels);
        }
        let len = dims.checked_voxels(channels)?;
        Ok(Field3 {
            dims,
            channels,
            data: vec![value; len],
        })
    }

    pub fn from_vec(dims: Dims, channels: usize, data: Vec<f64>) -> Result<Self, FieldError> {
        dims.validate()?;
        if channels == 0 {
            return Err(FieldError::NoChannels);
        }
        let expected = dims.checked_voxels(channels)?;
        if data.len() != expected {
            return Err(FieldError::Length {
                expected,
                got: data.len(),
            });
        }
        Ok(Field3 {
            dims,
            channels,
            data,
        })
    }

    /// Builds a field by evaluating `f(channel, x, y, z)` at every voxel.
    pub fn from_fn(
        dims: Dims,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self, FieldError> {
        let mut field = Self::zeros(dims, channels)?;
        let s = dims.voxels();
        for c in 0..channels {
            for flat in 0..s {
                let (x, y, z) = dims.coords(flat);
                field.data[c * s + flat] = f(c, x, y, z);
            }
        }
        Ok(field)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxels(&self) -> usize {
        self.dims.voxels()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let s = self.voxels();
        &self.data[c * s..(c + 1) * s]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let s = self.voxels();
        &mut self.data[c * s..(c + 1) * s]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.data[c * self.voxels() + self.dims.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: f64) {
        let s = self.voxels();
        let i = self.dims.index(x, y, z);
        self.data[c * s + i] = v;
    }

    pub fn same_shape(&self, other: &Field3) -> bool {
        self.dims == other.dims && self.channels == other.channels
    }

    pub fn ensure_same_shape(&self, other: &Field3) -> Result<(), FieldError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(FieldError::Shape(format!(
                "{} x {} channels vs {} x {} channels",
                self.dims, self.channels, other.dims, other.channels
            )))
        }
    }

    pub fn check_finite(&self) -> Result<(), FieldError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(FieldError::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn channel_means(&self) -> Vec<f64> {
        let s = self.voxels() as f64;
        (0..self.channels)
            .map(|c| self.channel(c).iter().sum::<f64>() / s)
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Circular shift: the output at `p` equals the input at `p - shift`.
    pub fn circular_shift(&self, shift: [isize; 3]) -> Field3 {
        let d = self.dims;
        let n = d.as_array();
        let sh: Vec<usize> = (0..3)
            .map(|a| shift[a].rem_euclid(n[a] as isize) as usize)
            .collect();
        let mut out = self.clone();
        let s = d.voxels();
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = &mut out.data[c * s..(c + 1) * s];
            for z in 0..d.nz {
                let zt = (z + sh[2]) % d.nz;
                for y in 0..d.ny {
                    let yt = (y + sh[1]) % d.ny;
                    for x in 0..d.nx {
                        let xt = (x + sh[0]) % d.nx;
                        dst[d.index(xt, yt, zt)] = src[d.index(x, y, z)];
                    }
                }
            }
        }
        out
    }

    /// The 2D slice `index` normal to `axis`, kept as a field whose extent
    /// along `axis` is one voxel.
    pub fn slice(&self, axis: Axis, index: usize) -> Result<Field3, FieldError> {
        let extent = self.dims.extent(axis);
        if index >= extent {
            return Err(FieldError::Shape(format!(
                "slice index {index} out of range for axis {axis} of extent {extent}"
            )));
        }
        let out_dims = self.dims.with_extent(axis, 1);
        Field3::from_fn(out_dims, self.channels, |c, x, y, z| {
            let mut p = [x, y, z];
            p[axis.index()] = index;
            self.get(c, p[0], p[1], p[2])
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field3 {
        Field3 {
            dims: self.dims,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Field3) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }
}
