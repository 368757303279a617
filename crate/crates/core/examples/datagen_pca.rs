//! End-to-end dataset generation: screened kernels, global samples refined by
//! a denoiser, then PCA of the resulting statistics.

use grainfield::diffusion::DenoiserSpec;
use grainfield::pipeline::{
    datagen, gen_kernels, pca, regenerate, DatagenConfig, GenKernelsConfig, NamedDenoiser, NamedKernel, StatsVector,
};
use grainfield::pmf::read_field;
use grainfield::Dims;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dims = Dims::cube(12)?;
    let kernels = gen_kernels(&GenKernelsConfig { count: 4, dims, seed: 1, ..Default::default() }, |_, _| {})?;
    let named: Vec<NamedKernel> =
        kernels.kernels.iter().map(|k| NamedKernel { id: k.id.clone(), params: k.params.clone() }).collect();
    println!("accepted {} kernels, rejection fraction {:.2}", named.len(), kernels.rejection_fraction());

    let denoisers = vec![NamedDenoiser {
        id: "white".into(),
        spec: DenoiserSpec::Gaussian { params: None, variance: 0.1, means: None },
    }];
    let out = tempfile::tempdir()?;
    let mut cfg = DatagenConfig { dims, replicates: 2, seed: 8, ..Default::default() };
    cfg.sampler.steps = 12;
    cfg.sampler.skip = 6;
    let manifest = datagen(&cfg, &named, &denoisers, out.path(), |done, total| eprint!("\r{done}/{total}"))?;
    eprintln!();

    let mut vectors = Vec::new();
    for e in &manifest.entries {
        let field = read_field(out.path().join(&e.path))?;
        assert_eq!(regenerate(&manifest, e)?, field);
        vectors.push(StatsVector::from_field(&field)?.values);
    }
    let r = pca(&vectors, Some(3))?;
    println!("{} fields, explained variance of the first components: {:?}", vectors.len(), &r.ratios[..3]);
    Ok(())
}
