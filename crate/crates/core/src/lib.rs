//! Generation and analysis of multi-channel 3D polycrystalline microstructure fields.

pub mod cli;
pub mod diffusion;
pub mod error;
pub mod fft;
pub mod field;
pub mod mogrf;
pub mod mosm;
pub mod pipeline;
pub mod pmf;
pub mod rogsh;
pub mod stats;

pub use error::{Error, Result};
pub use field::{Axis, Dims, Field3, FieldError};
