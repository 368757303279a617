//! 2D-to-3D expansion: the sampler is steered toward the statistics of three
//! orthogonal planes by gradient descent after every step.

use grainfield::diffusion::{sample, GaussianDenoiser, OrthoOptions, OrthoStatsCond, SamplerConfig};
use grainfield::mogrf::{MogrfSampler, MogrfSpec};
use grainfield::mosm::{kernel_to_grid, sample_params_lhs, ParamBounds};
use grainfield::stats::{ortho_stats, stats_loss_and_grad, LossReduction, PairSelector};
use grainfield::Dims;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let d = Dims::cube(12)?;
    let params = sample_params_lhs(&ParamBounds::default(), 1, 2, 1, 4)?.remove(0);
    let spec = MogrfSpec::zero_mean(kernel_to_grid(&params, d)?);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let reference = MogrfSampler::new(&spec)?.sample(&mut rng)?;
    let target = ortho_stats(&reference, &PairSelector::All)?;

    let den = GaussianDenoiser::white(d, 1, 1.0)?;
    let cfg = SamplerConfig { steps: 16, ..Default::default() };
    let free = sample(None, &den, &cfg, None, &mut ChaCha8Rng::seed_from_u64(2))?;
    let mut cond = OrthoStatsCond::new(target.clone(), OrthoOptions::default())?;
    let steered = sample(None, &den, &cfg, Some(&mut cond), &mut ChaCha8Rng::seed_from_u64(2))?;

    let loss = |f| stats_loss_and_grad(f, &target, LossReduction::Sum).map(|(l, _)| l);
    println!("plane statistics error: unconditioned {:.3e}, steered {:.3e}", loss(&free)?, loss(&steered)?);
    let iters: usize = cond.reports().iter().map(|r| r.iterations).sum();
    println!("{} descent iterations over {} steps", iters, cond.reports().len());
    Ok(())
}
