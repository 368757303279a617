//! Draws multi-output spectral mixture kernels by Latin hypercube sampling,
//! screens them and evaluates one on a periodic grid.

use grainfield::mosm::{
    cross_spectrum_extremes, kernel_to_grid, sample_params_lhs, validate_kernel, MosmKernel, ParamBounds,
    DEFAULT_PERIODICITY_TOL,
};
use grainfield::Dims;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let d = Dims::cube(16)?;
    let candidates = sample_params_lhs(&ParamBounds::default(), 8, 2, 3, 42)?;
    for (i, p) in candidates.iter().enumerate() {
        let grid = kernel_to_grid(p, d)?;
        let verdict = validate_kernel(&grid, DEFAULT_PERIODICITY_TOL, None);
        let (lo, hi) = cross_spectrum_extremes(&MosmKernel::new(p)?, 9, 16.0);
        println!("candidate {i}: {verdict:?}, spectral eigenvalues in [{lo:.3e}, {hi:.3e}]");
    }
    let k = MosmKernel::new(&candidates[0])?;
    println!("k(0) = {:?}", k.eval([0.0; 3]));
    println!("k_01 at (1, 2, 0) = {:.5}", k.eval_pair(0, 1, [1.0, 2.0, 0.0]));
    println!("parameter file is {} bytes of JSON", candidates[0].to_json()?.len());
    Ok(())
}
