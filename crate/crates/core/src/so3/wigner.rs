use nalgebra::{DMatrix, Matrix3};
use num_complex::Complex64;

use super::grid::build_quadrature;
use super::{lm_index, num_coeffs, sph_harm_all_into};
use crate::error::{Error, Result};
use crate::Vec3;

/// `true` if `r` is orthogonal with determinant +1 within `tol`.
pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    ortho <= tol && (r.determinant() - 1.0).abs() <= tol && r.iter().all(|v| v.is_finite())
}

/// Solves `Y_l(R u) = D^l(R) Y_l(u)` for `D^l` by weighted least squares over
/// a fixed set of sample directions. The sample set is an exact product
/// quadrature holding at least `(2 l_max + 1)²` directions, so the normal
/// matrix is the identity up to rounding.
#[derive(Debug, Clone)]
pub struct WignerSolver {
    l_max: usize,
    directions: Vec<Vec3>,
    weights: Vec<f64>,
    /// `[direction][lm]`
    harmonics: Vec<Complex64>,
}

impl WignerSolver {
    pub fn new(l_max: usize) -> Self {
        let need = (2 * l_max + 1) * (2 * l_max + 1);
        let mut order = l_max.max(1);
        while (order + 1) * (2 * order + 2) < need {
            order += 1;
        }
        let grid = build_quadrature(order);
        let directions = grid.unit_vectors();
        let harmonics = grid.harmonics_table(l_max);
        WignerSolver {
            l_max,
            directions,
            weights: grid.weights,
            harmonics,
        }
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    /// `D^l(R)` for every `l <= l_max`, rows and columns ordered `m = -l..=l`.
    pub fn solve(&self, rotation: &Matrix3<f64>) -> Result<Vec<DMatrix<Complex64>>> {
        if !is_rotation(rotation, 1e-8) {
            return Err(Error::InvalidArgument(
                "matrix is not a proper rotation".into(),
            ));
        }
        let nc = num_coeffs(self.l_max);
        let mut rotated = vec![Complex64::new(0.0, 0.0); nc * self.directions.len()];
        for (row, u) in rotated.chunks_mut(nc).zip(&self.directions) {
            sph_harm_all_into(self.l_max, &(rotation * u), row);
        }
        let mut out = Vec::with_capacity(self.l_max + 1);
        for l in 0..=self.l_max {
            let dim = 2 * l + 1;
            let base = lm_index(l, -(l as i64));
            // gram = Σ w a a^H, cross = Σ w b a^H
            let mut gram = DMatrix::<Complex64>::zeros(dim, dim);
            let mut cross = DMatrix::<Complex64>::zeros(dim, dim);
            for ((a_row, b_row), w) in self
                .harmonics
                .chunks(nc)
                .zip(rotated.chunks(nc))
                .zip(&self.weights)
            {
                let a = &a_row[base..base + dim];
                let b = &b_row[base..base + dim];
                for i in 0..dim {
                    for j in 0..dim {
                        let ac = a[j].conj() * *w;
                        gram[(i, j)] += a[i] * ac;
                        cross[(i, j)] += b[i] * ac;
                    }
                }
            }
            // D gram = cross  <=>  gram^H D^H = cross^H, gram Hermitian
            let lu = gram.lu();
            let dh = lu
                .solve(&cross.adjoint())
                .ok_or_else(|| Error::Numeric("singular Wigner normal matrix".into()))?;
            out.push(dh.adjoint());
        }
        Ok(out)
    }
}

/// Wigner matrix `D^l(R)` defined by `Y_l(R u) = D^l(R) Y_l(u)` for all unit
/// `u`, with `Y_l = (Y_l^{-l}, ..., Y_l^l)`.
pub fn wigner_d(l: usize, rotation: &Matrix3<f64>) -> Result<DMatrix<Complex64>> {
    let mut all = WignerSolver::new(l).solve(rotation)?;
    Ok(all.pop().expect("l_max + 1 matrices"))
}
