//! Spherical harmonics, Wigner D-matrices and Clebsch-Gordan coefficients.

use covmol::so3::{
    build_quadrature, cg_coeff, num_coeffs, random_rotation, random_unit, sph_harm_all, SphCoord,
    WignerSolver,
};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> covmol::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let v = random_unit(&mut rng);
    let c = SphCoord::from_vector(&v);
    println!("direction θ = {:.4}, φ = {:.4}", c.theta, c.phi);
    let y = sph_harm_all(2, &v);
    for (i, z) in y.iter().enumerate() {
        println!("  Y[{i}] = {:+.6} {:+.6}i", z.re, z.im);
    }

    // Rotating the argument mixes harmonics of one degree through D(R).
    let l_max = 4;
    let solver = WignerSolver::new(l_max);
    let (r1, r2) = (random_rotation(&mut rng), random_rotation(&mut rng));
    let (d1, d2, d12) = (solver.solve(&r1)?, solver.solve(&r2)?, solver.solve(&(r1 * r2))?);
    for l in 0..=l_max {
        let n = 2 * l + 1;
        let hom = (&d12[l] - &d1[l] * &d2[l]).norm();
        let unit = (&d1[l] * d1[l].adjoint() - DMatrix::<Complex64>::identity(n, n)).norm();
        println!("l = {l}: |D(R1R2) - D(R1)D(R2)| = {hom:.1e}, |DD^H - I| = {unit:.1e}");
    }

    println!("<1 0; 1 0 | 2 0> = {:.6}", cg_coeff(1, 1, 2, 0, 0, 0));
    println!("<1 1; 1 -1 | 0 0> = {:.6}", cg_coeff(1, 1, 0, 1, -1, 0));

    let grid = build_quadrature(8);
    let table = grid.harmonics_table(4);
    let nc = num_coeffs(4);
    let mut worst: f64 = 0.0;
    for a in 0..nc {
        for b in 0..nc {
            let s: Complex64 = table.chunks(nc).zip(&grid.weights).map(|(r, w)| r[a] * r[b].conj() * *w).sum();
            worst = worst.max((s - if a == b { 1.0 } else { 0.0 }).norm());
        }
    }
    println!("{} quadrature nodes, orthonormality error {worst:.1e}", grid.len());
    Ok(())
}
