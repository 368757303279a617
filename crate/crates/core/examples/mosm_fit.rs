//! Recovers a kernel from its own covariance grid.

use grainfield::mosm::{fit_mosm, kernel_to_grid, sample_params_lhs, FitOptions, ParamBounds};
use grainfield::Dims;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let d = Dims::cube(12)?;
    let truth = sample_params_lhs(&ParamBounds::default(), 1, 1, 2, 7)?.remove(0);
    let target = kernel_to_grid(&truth, d)?;
    let energy = target.values.iter().flatten().map(|v| v * v).sum::<f64>() / target.values.iter().flatten().count() as f64;
    for q in 1..=2 {
        let fit = fit_mosm(&target, q, &FitOptions { seed: 1, ..Default::default() })?;
        println!(
            "Q = {q}: residual / energy = {:.3e} after {} evaluations (converged: {})",
            fit.residual / energy,
            fit.evaluations,
            fit.converged
        );
    }
    Ok(())
}
