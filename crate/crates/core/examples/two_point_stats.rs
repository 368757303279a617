//! Two-point statistics of a periodic two-phase structure.

use grainfield::stats::{cov_from_stats, fftshift, ortho_stats, two_point_stats, PairSelector};
use grainfield::{Axis, Dims, Field3};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let d = Dims::cube(16)?;
    // spherical inclusion in channel 0, its complement in channel 1
    let field = Field3::from_fn(d, 2, |c, x, y, z| {
        let r2 = [x, y, z].iter().map(|&u| (u as f64 - 7.5).powi(2)).sum::<f64>();
        let inside = r2 < 25.0;
        if (c == 0) == inside { 1.0 } else { 0.0 }
    })?;
    let stats = two_point_stats(&field, &PairSelector::All)?;
    let auto = stats.get(0, 0).unwrap();
    println!("volume fractions: {:?}", stats.means);
    println!("f00 at r = 0: {:.4} (equals the fraction)", auto[0]);
    println!("f00 at r = (8,0,0): {:.4}", auto[d.index(8, 0, 0)]);

    let cov = cov_from_stats(&stats);
    println!("cross covariance at r = 0: {:.4}", cov.values[1][0]);

    let centered = fftshift(&stats.to_field()?);
    println!("centered map peak: {:.4}", centered.get(0, 8, 8, 8));

    let ortho = ortho_stats(&field, &PairSelector::ReferenceRow)?;
    println!("z-normal plane has dims {}", ortho.planes[Axis::Z.index()].dims);
    Ok(())
}
