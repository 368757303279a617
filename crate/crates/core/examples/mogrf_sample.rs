//! Samples a correlated multi-channel Gaussian random field and checks its
//! covariance against the kernel.

use grainfield::mogrf::{empirical_cov_check, MogrfSampler, MogrfSpec};
use grainfield::mosm::{kernel_to_grid, sample_params_lhs, ParamBounds};
use grainfield::pmf::{write_field, Dtype};
use grainfield::Dims;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let d = Dims::cube(16)?;
    let params = sample_params_lhs(&ParamBounds::default(), 1, 2, 3, 5)?.remove(0);
    let spec = MogrfSpec {
        means: vec![0.0, 0.1, -0.1],
        ..MogrfSpec::zero_mean(kernel_to_grid(&params, d)?)
    };
    let sampler = MogrfSampler::new(&spec)?;
    let field = sampler.sample(&mut ChaCha8Rng::seed_from_u64(0))?;
    println!("channel means {:?}, max |value| {:.3}", field.channel_means(), field.max_abs());

    let err = empirical_cov_check(&spec, 512, 1)?;
    println!("covariance sup relative error over 512 samples: {err:.4}");

    let out = std::env::temp_dir().join("grainfield_mogrf.pmf");
    write_field(&out, &field, Dtype::F32)?;
    println!("wrote {}", out.display());
    Ok(())
}
