//! Unconditional generation with the second-order stochastic sampler and an
//! exact Gaussian denoiser, followed by local refinement of a global field.

use grainfield::diffusion::{lgd_refine, sample_traced, GaussianDenoiser, LgdOptions, SamplerConfig, TraceEvent};
use grainfield::mogrf::{MogrfSampler, MogrfSpec};
use grainfield::mosm::{kernel_to_grid, sample_params_lhs, ParamBounds};
use grainfield::Dims;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let d = Dims::cube(16)?;
    let params = sample_params_lhs(&ParamBounds::default(), 1, 2, 3, 9)?.remove(0);
    let spec = MogrfSpec::zero_mean(kernel_to_grid(&params, d)?);
    let den = GaussianDenoiser::from_mogrf(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let cfg = SamplerConfig { steps: 32, s_churn: 10.0, ..Default::default() };
    let mut trace = Vec::new();
    let x = sample_traced(None, &den, &cfg, None, &mut rng, &mut trace)?;
    let churned = trace.iter().filter(|e| matches!(e, TraceEvent::Churn { gamma, .. } if *gamma > 0.0)).count();
    println!("sampled {} values, {churned} steps with churn, max |x| {:.3}", x.data().len(), x.max_abs());

    let global = MogrfSampler::new(&spec)?.sample(&mut rng)?;
    let refine = SamplerConfig { steps: 24, skip: 12, ..Default::default() };
    let local = lgd_refine(&global, &den, &refine, &LgdOptions::default(), &mut rng)?;
    let moved = global.data().iter().zip(local.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("refinement moved values by at most {moved:.3}");
    Ok(())
}
