//! Special functions and grids on the unit sphere.
//!
//! Spherical harmonics follow the Condon-Shortley convention:
//!
//! ```text
//! Y_l^m(θ, φ) = (-1)^m sqrt((2l+1)/(4π) (l-m)!/(l+m)!) P_l^m(cos θ) e^{imφ},   m ≥ 0
//! Y_l^{-m}    = (-1)^m conj(Y_l^m)
//! ```
//!
//! Flattened coefficient vectors are ordered by `l` and then `m = -l..=l`, see
//! [`lm_index`].

mod clebsch;
mod grid;
mod wigner;

pub use clebsch::{cg_coeff, CgTable, CgTerm};
pub use grid::{
    build_quadrature, build_sunflower, gauss_legendre, parse_lebedev, QuadratureGrid,
    SunflowerGrid, DEFAULT_QUADRATURE_ORDER,
};
pub use wigner::{is_rotation, wigner_d, WignerSolver};

use std::f64::consts::PI;

use nalgebra::{Matrix3, UnitQuaternion};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::Vec3;

/// Point on the unit sphere in polar/azimuthal angles (radians).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphCoord {
    /// Polar angle in `[0, π]`.
    pub theta: f64,
    /// Azimuthal angle in `[0, 2π)`.
    pub phi: f64,
}

impl SphCoord {
    pub fn new(theta: f64, phi: f64) -> Result<Self> {
        if !(0.0..=PI).contains(&theta) || !theta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "polar angle {theta} outside [0, π]"
            )));
        }
        if !phi.is_finite() {
            return Err(Error::InvalidArgument(format!("azimuth {phi} not finite")));
        }
        Ok(SphCoord {
            theta,
            phi: phi.rem_euclid(2.0 * PI),
        })
    }

    /// Direction of a non-zero vector. At the poles the azimuth is 0.
    pub fn from_vector(v: &Vec3) -> Self {
        let r = v.norm();
        let rho = (v.x * v.x + v.y * v.y).sqrt();
        let theta = rho.atan2(v.z);
        let phi = if rho == 0.0 {
            0.0
        } else {
            v.y.atan2(v.x).rem_euclid(2.0 * PI)
        };
        debug_assert!(r > 0.0);
        SphCoord { theta, phi }
    }

    pub fn to_unit(&self) -> Vec3 {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        Vec3::new(st * cp, st * sp, ct)
    }
}

/// Position of `(l, m)` in a flattened coefficient vector.
#[inline]
pub fn lm_index(l: usize, m: i64) -> usize {
    ((l * l + l) as i64 + m) as usize
}

/// Number of `(l, m)` pairs with `l <= l_max`.
#[inline]
pub fn num_coeffs(l_max: usize) -> usize {
    (l_max + 1) * (l_max + 1)
}

/// Table of normalized Legendre functions `P̃_l^m` for `0 <= m <= l <= l_max`,
/// indexed by `l (l + 1) / 2 + m`. Takes `x = cos θ` and `s = sin θ >= 0`
/// separately so callers working from Cartesian input avoid `sqrt(1 - x²)`.
fn legendre_table(l_max: usize, x: f64, s: f64) -> Vec<f64> {
    let tri = |l: usize, m: usize| l * (l + 1) / 2 + m;
    let mut p = vec![0.0; (l_max + 1) * (l_max + 2) / 2];
    let mut pmm = (1.0 / (4.0 * PI)).sqrt();
    for m in 0..=l_max {
        if m > 0 {
            let k = m as f64;
            pmm *= -((2.0 * k + 1.0) / (2.0 * k)).sqrt() * s;
        }
        p[tri(m, m)] = pmm;
        if m + 1 <= l_max {
            p[tri(m + 1, m)] = x * (2.0 * m as f64 + 3.0).sqrt() * pmm;
        }
        for l in (m + 2)..=l_max {
            let lf = l as f64;
            let mf = m as f64;
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0))
                .sqrt();
            p[tri(l, m)] = a * (x * p[tri(l - 1, m)] - b * p[tri(l - 2, m)]);
        }
    }
    p
}

/// Normalized associated Legendre function `P̃_l^m(x)`, phase included, such
/// that `Y_l^m(θ, φ) = P̃_l^m(cos θ) e^{imφ}`.
pub fn assoc_legendre_norm(l: usize, m: i64, x: f64) -> Result<f64> {
    if m.unsigned_abs() as usize > l {
        return Err(Error::InvalidArgument(format!("|m| = {} > l = {l}", m.abs())));
    }
    if !(x.abs() <= 1.0) {
        return Err(Error::InvalidArgument(format!("x = {x} outside [-1, 1]")));
    }
    let s = (1.0 - x * x).max(0.0).sqrt();
    let table = legendre_table(l, x, s);
    let ma = m.unsigned_abs() as usize;
    let v = table[l * (l + 1) / 2 + ma];
    Ok(if m < 0 && ma % 2 == 1 { -v } else { v })
}

/// Complex spherical harmonic `Y_l^m` at `coord`.
pub fn sph_harm(l: usize, m: i64, coord: SphCoord) -> Result<Complex64> {
    let p = assoc_legendre_norm(l, m, coord.theta.cos())?;
    Ok(Complex64::from_polar(p, m as f64 * coord.phi))
}

/// All harmonics `Y_l^m(v̂)` with `l <= l_max`, in [`lm_index`] order.
/// `v` need not be normalized but must be non-zero.
pub fn sph_harm_all(l_max: usize, v: &Vec3) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); num_coeffs(l_max)];
    sph_harm_all_into(l_max, v, &mut out);
    out
}

/// Like [`sph_harm_all`], writing into a caller-provided buffer.
pub fn sph_harm_all_into(l_max: usize, v: &Vec3, out: &mut [Complex64]) {
    let r = v.norm();
    let rho = (v.x * v.x + v.y * v.y).sqrt();
    let x = v.z / r;
    let s = rho / r;
    let eiphi = if rho > 0.0 {
        Complex64::new(v.x / rho, v.y / rho)
    } else {
        Complex64::new(1.0, 0.0)
    };
    let p = legendre_table(l_max, x, s);
    let mut phase = Complex64::new(1.0, 0.0);
    for m in 0..=l_max {
        for l in m..=l_max {
            let val = phase * p[l * (l + 1) / 2 + m];
            out[lm_index(l, m as i64)] = val;
            if m > 0 {
                let c = val.conj();
                out[lm_index(l, -(m as i64))] = if m % 2 == 1 { -c } else { c };
            }
        }
        phase *= eiphi;
    }
}

/// Direction drawn uniformly from the unit sphere.
pub fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Rotation drawn from the Haar measure on SO(3).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    let q = nalgebra::Quaternion::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    *UnitQuaternion::from_quaternion(q).to_rotation_matrix().matrix()
}
