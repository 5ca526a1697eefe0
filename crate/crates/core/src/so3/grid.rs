use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;

use super::{num_coeffs, sph_harm_all_into, SphCoord};
use crate::error::{Error, Result};
use crate::Vec3;

/// Default exactness order of [`build_quadrature`] (42 × 84 = 3528 nodes).
pub const DEFAULT_QUADRATURE_ORDER: usize = 41;

/// Weighted integration rule on the unit sphere.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    pub nodes: Vec<SphCoord>,
    pub weights: Vec<f64>,
    /// Products `Y_l^m conj(Y_l'^m')` with `l, l' <= order` integrate exactly.
    /// `None` for externally loaded grids.
    pub order: Option<usize>,
}

impl QuadratureGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn unit_vectors(&self) -> Vec<Vec3> {
        self.nodes.iter().map(SphCoord::to_unit).collect()
    }

    /// `∫ f dΩ` approximated by the weighted node sum.
    pub fn integrate<F: FnMut(&SphCoord) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(n, w)| w * f(n))
            .sum()
    }

    /// Harmonics at every node, row-major `[node][lm]`.
    pub fn harmonics_table(&self, l_max: usize) -> Vec<Complex64> {
        let nc = num_coeffs(l_max);
        let mut out = vec![Complex64::new(0.0, 0.0); nc * self.len()];
        for (row, node) in out.chunks_mut(nc).zip(&self.nodes) {
            sph_harm_all_into(l_max, &node.to_unit(), row);
        }
        out
    }

    /// Load a grid stored as `theta phi weight` lines (radians, weights summing
    /// to 4π).
    pub fn from_lebedev_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_lebedev(&text, &path.display().to_string())
    }
}

/// Parse the `theta phi weight` grid format.
pub fn parse_lebedev(text: &str, source_name: &str) -> Result<QuadratureGrid> {
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                source_name,
                i + 1,
                format!("expected 3 fields, found {}", fields.len()),
            ));
        }
        let mut vals = [0.0; 3];
        for (v, f) in vals.iter_mut().zip(&fields) {
            *v = f
                .parse()
                .map_err(|_| Error::parse(source_name, i + 1, format!("bad number `{f}`")))?;
        }
        if !(vals[2] > 0.0) {
            return Err(Error::parse(source_name, i + 1, "weights must be positive"));
        }
        let node =
            SphCoord::new(vals[0], vals[1]).map_err(|e| Error::parse(source_name, i + 1, e.to_string()))?;
        nodes.push(node);
        weights.push(vals[2]);
    }
    let total: f64 = weights.iter().sum();
    if (total - 4.0 * PI).abs() > 1e-10 {
        return Err(Error::parse(
            source_name,
            0,
            format!("weights sum to {total}, expected 4π"),
        ));
    }
    Ok(QuadratureGrid {
        nodes,
        weights,
        order: None,
    })
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`, nodes descending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    if n <= 1 {
        return (vec![0.0], vec![2.0]);
    }
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Gauss-Legendre in `cos θ` crossed with uniform azimuths: `order + 1` polar
/// by `2 order + 2` azimuthal nodes.
pub fn build_quadrature(order: usize) -> QuadratureGrid {
    let order = order.max(1);
    let (xs, ws) = gauss_legendre(order + 1);
    let n_phi = 2 * order + 2;
    let dphi = 2.0 * PI / n_phi as f64;
    let mut nodes = Vec::with_capacity(xs.len() * n_phi);
    let mut weights = Vec::with_capacity(xs.len() * n_phi);
    for (x, w) in xs.iter().zip(&ws) {
        let theta = x.clamp(-1.0, 1.0).acos();
        for j in 0..n_phi {
            nodes.push(SphCoord {
                theta,
                phi: j as f64 * dphi,
            });
            weights.push(w * dphi);
        }
    }
    QuadratureGrid {
        nodes,
        weights,
        order: Some(order),
    }
}

/// Golden-angle spiral point set.
#[derive(Debug, Clone)]
pub struct SunflowerGrid {
    pub points: Vec<Vec3>,
}

pub fn build_sunflower(n: usize) -> SunflowerGrid {
    let n = n.max(1);
    let golden = PI * (3.0 - 5f64.sqrt());
    let points = (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let (s, c) = (golden * i as f64).sin_cos();
            Vec3::new(r * c, r * s, z).normalize()
        })
        .collect();
    SunflowerGrid { points }
}

#[cfg(test)]
mod tests {
    use super::super::sph_harm;
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn weights_sum_to_sphere_area() {
        for order in [1, 4, 31] {
            let g = build_quadrature(order);
            let total: f64 = g.weights.iter().sum();
            assert_abs_diff_eq!(total, 4.0 * PI, epsilon = 1e-12);
            assert!(g.weights.iter().all(|&w| w > 0.0));
        }
        assert_eq!(build_quadrature(31).len(), 2048);
    }

    #[test]
    fn integrates_harmonics() {
        let g = build_quadrature(DEFAULT_QUADRATURE_ORDER);
        let norm = g.integrate(|c| sph_harm(3, 2, *c).unwrap().norm_sqr());
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-10);
        let re = g.integrate(|c| sph_harm(2, 1, *c).unwrap().re);
        let im = g.integrate(|c| sph_harm(2, 1, *c).unwrap().im);
        assert_abs_diff_eq!(re, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(im, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn orthonormal_up_to_degree_eight() {
        let l_max = 8;
        let g = build_quadrature(l_max);
        let table = g.harmonics_table(l_max);
        let nc = num_coeffs(l_max);
        for a in 0..nc {
            for b in 0..nc {
                let s: Complex64 = table
                    .chunks(nc)
                    .zip(&g.weights)
                    .map(|(row, w)| row[a] * row[b].conj() * *w)
                    .sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((s - expect).norm() < 1e-10, "a={a} b={b} s={s}");
            }
        }
    }

    #[test]
    fn gauss_legendre_small() {
        let (x, w) = gauss_legendre(1);
        assert_eq!(x, vec![0.0]);
        assert_abs_diff_eq!(w[0], 2.0, epsilon = 1e-15);
        let (x, w) = gauss_legendre(2);
        assert_abs_diff_eq!(x[0], 1.0 / 3f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(w[0] + w[1], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn sunflower_points_are_unit() {
        let one = build_sunflower(1);
        assert_eq!(one.points.len(), 1);
        assert_abs_diff_eq!(one.points[0].norm(), 1.0, epsilon = 1e-12);
        let g = build_sunflower(1000);
        assert!(g.points.iter().all(|p| (p.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn sunflower_is_quasi_uniform() {
        let g = build_sunflower(1000);
        let nn: Vec<f64> = g
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                g.points
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, q)| p.dot(q).clamp(-1.0, 1.0).acos())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let mean = nn.iter().sum::<f64>() / nn.len() as f64;
        let max = nn.iter().cloned().fold(0.0, f64::max);
        assert!(max <= 2.0 * mean, "max {max} mean {mean}");
    }

    #[test]
    fn lebedev_format() {
        let g = build_quadrature(3);
        let text: String = g
            .nodes
            .iter()
            .zip(&g.weights)
            .map(|(n, w)| format!("{} {} {}\n", n.theta, n.phi, w))
            .collect();
        let loaded = parse_lebedev(&format!("# test grid\n{text}"), "mem").unwrap();
        assert_eq!(loaded.len(), g.len());
        assert!(loaded.order.is_none());
        assert!(parse_lebedev("0.1 0.2\n", "mem").is_err());
        assert!(parse_lebedev("0.1 0.2 1.0\n", "mem").is_err());
    }
}
