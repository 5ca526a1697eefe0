//! Structure alignment.

use nalgebra::{Matrix3, SVD};

use crate::env::Canvas;
use crate::error::{Error, Result};
use crate::oracle::{relax, EnergyOracle, RelaxConfig};
use crate::Vec3;

/// Proper rotation `R` minimizing `Σ |R a_i - b_i|²` for centered point sets.
pub fn kabsch(a: &[Vec3], b: &[Vec3]) -> Matrix3<f64> {
    let h: Matrix3<f64> = a.iter().zip(b).map(|(p, q)| p * q.transpose()).sum();
    let svd = SVD::new(h, true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose()
}

fn centered(c: &Canvas) -> Vec<Vec3> {
    let p = c.positions();
    let mean = p.iter().sum::<Vec3>() / p.len() as f64;
    p.iter().map(|x| x - mean).collect()
}

/// RMSD after optimal rigid superposition, atoms matched by index.
pub fn rmsd(a: &Canvas, b: &Canvas) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument(format!("cannot align {} with {} atoms", a.len(), b.len())));
    }
    if a.atoms().iter().zip(b.atoms()).any(|(x, y)| x.element != y.element) {
        return Err(Error::InvalidArgument("element order differs".into()));
    }
    let (pa, pb) = (centered(a), centered(b));
    let r = kabsch(&pa, &pb);
    let sum: f64 = pa.iter().zip(&pb).map(|(p, q)| (r * p - q).norm_squared()).sum();
    Ok((sum / pa.len() as f64).sqrt())
}

/// RMSD between a structure and its relaxation.
pub fn stability_metric<O: EnergyOracle + ?Sized>(canvas: &Canvas, oracle: &O, config: &RelaxConfig) -> Result<f64> {
    let all: Vec<usize> = (0..canvas.len()).collect();
    let relaxed = relax(oracle, canvas, &all, config)?;
    rmsd(canvas, &relaxed.canvas)
}
