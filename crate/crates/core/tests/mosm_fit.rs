use grainfield::mosm::{fit_mosm, kernel_to_grid, Component, FitOptions, MosmParams};
use grainfield::stats::CovarianceGrid;
use grainfield::Dims;

fn energy(g: &CovarianceGrid) -> f64 {
    let n: usize = g.values.iter().map(Vec::len).sum();
    g.values.iter().flatten().map(|v| v * v).sum::<f64>() / n as f64
}

fn known() -> MosmParams {
    let c = |w: f64, a: [f64; 3], m: [f64; 3], t: f64, ph: f64| Component {
        weight: w,
        precision: [[a[0], 0.0, 0.0], [0.0, a[1], 0.0], [0.0, 0.0, a[2]]],
        mean: m,
        delay: [t, 0.0, -t],
        phase: ph,
    };
    MosmParams::new(vec![
        vec![c(0.015, [4.0, 6.0, 9.0], [1.0, 0.5, 0.0], 0.0, 0.0)],
        vec![c(-0.01, [5.0, 4.0, 7.0], [0.5, 1.0, -0.5], 0.1, 0.4)],
    ])
    .unwrap()
}

#[test]
fn recovers_a_known_kernel() {
    let d = Dims::cube(8).unwrap();
    let target = kernel_to_grid(&known(), d).unwrap();
    let fit = fit_mosm(&target, 1, &FitOptions::default()).unwrap();
    println!("residual {:e} energy {:e} evals {}", fit.residual, energy(&target), fit.evaluations);
    assert!(fit.residual < 1e-6 * energy(&target));
}

#[test]
fn zero_grid_fits_with_vanishing_weights() {
    let d = Dims::cube(6).unwrap();
    let target = CovarianceGrid::reference_row(d, vec![vec![0.0; d.voxels()]]).unwrap();
    let opts = FitOptions {
        restarts: 4,
        max_evals: 4000,
        polish_patience: 30,
        ..FitOptions::default()
    };
    let fit = fit_mosm(&target, 1, &opts).unwrap();
    assert!(fit.residual < 1e-12, "{}", fit.residual);
    assert!(fit.params.components[0][0].weight.abs() < 1e-4);
}

#[test]
fn residual_does_not_increase_with_mixtures() {
    let d = Dims::cube(8).unwrap();
    let mut p = known();
    p.components = vec![p.components[0].clone()];
    let mut second = p.components[0][0];
    second.weight = 0.01;
    second.mean = [-2.0, 1.5, 0.5];
    p.components[0].push(second);
    let target = kernel_to_grid(&MosmParams::new(p.components).unwrap(), d).unwrap();
    let opts = FitOptions {
        restarts: 6,
        max_evals: 3000,
        polish_starts: 2,
        polish_patience: 30,
        ..FitOptions::default()
    };
    let mut prev: Option<grainfield::mosm::FitResult> = None;
    for q in 1..=3 {
        let o = FitOptions {
            warm_start: prev.as_ref().map(|f| f.params.clone()),
            seed: q as u64,
            ..opts.clone()
        };
        let fit = fit_mosm(&target, q, &o).unwrap();
        if let Some(p) = &prev {
            assert!(fit.residual <= p.residual, "q={q}: {} > {}", fit.residual, p.residual);
        }
        prev = Some(fit);
    }
    assert!(prev.unwrap().residual < 1e-3 * energy(&target));
}
