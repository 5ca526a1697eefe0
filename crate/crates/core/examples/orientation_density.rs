//! Build an orientation density from random coefficients, check its
//! normalization and draw samples by rejection.

use covmol::agent::{DensityGrids, DensityVariant, SphericalDensity};
use covmol::so3::{build_quadrature, num_coeffs, random_rotation};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> covmol::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let l_max = 4;
    let grids = DensityGrids::new(l_max, 41, 4096, 1.2)?;
    let coeffs: Vec<Complex64> = (0..num_coeffs(l_max))
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let frame = random_rotation(&mut rng);
    let fine = build_quadrature(120);
    for (beta, variant) in [(-10.0, DensityVariant::Eq5), (100.0, DensityVariant::Eq5), (1.0, DensityVariant::Eq7)] {
        let d = SphericalDensity::new(grids.clone(), &coeffs, &frame, beta, variant)?;
        let total = fine.integrate(|c| d.density(&c.to_unit()));
        let samples = d.sample_n(5, &mut rng)?;
        let (mode, lp) = d.estimate_mode(1024, &mut rng)?;
        println!("{variant:?} β = {beta}: ∫p = {total:.6}, acceptance ≈ {:.3}", d.acceptance_rate());
        for (x, lp) in samples {
            println!("  sample ({:+.3}, {:+.3}, {:+.3})  log p = {lp:.3}", x.x, x.y, x.z);
        }
        println!("  mode   ({:+.3}, {:+.3}, {:+.3})  log p = {lp:.3}", mode.x, mode.y, mode.z);
    }
    Ok(())
}
