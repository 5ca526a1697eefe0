use super::EnergyOracle;
use crate::env::Canvas;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxConfig {
    /// Convergence threshold on the largest per-atom force.
    pub tol: f64,
    pub max_iter: usize,
    /// First trial step, Å per unit force.
    pub initial_step: f64,
}

impl Default for RelaxConfig {
    fn default() -> Self {
        RelaxConfig {
            tol: 1e-6,
            max_iter: 10_000,
            initial_step: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RelaxResult {
    pub canvas: Canvas,
    pub energy: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The line search shrank the step below machine resolution before
    /// reaching `tol`; `canvas` is the best point found.
    pub step_underflow: bool,
}

/// Steepest descent with Armijo backtracking over the `movable` atoms.
/// Energy never increases between accepted iterates.
pub fn relax<O: EnergyOracle + ?Sized>(
    oracle: &O,
    canvas: &Canvas,
    movable: &[usize],
    config: &RelaxConfig,
) -> Result<RelaxResult> {
    if !(config.tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {} must be > 0", config.tol)));
    }
    if let Some(&bad) = movable.iter().find(|&&i| i >= canvas.len()) {
        return Err(Error::InvalidArgument(format!("atom {bad} not on the canvas")));
    }
    let mut current = canvas.clone();
    let mut energy = oracle.energy(&current);
    let mut step = config.initial_step;
    let mut underflow = false;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_iter {
        let forces = oracle.forces(&current);
        let fmax = movable.iter().map(|&i| forces[i].norm()).fold(0.0, f64::max);
        if fmax < config.tol {
            converged = true;
            break;
        }
        let f2: f64 = movable.iter().map(|&i| forces[i].norm_squared()).sum();
        iterations += 1;
        loop {
            let mut trial = current.clone();
            for &i in movable {
                trial.atoms_mut()[i].position += forces[i] * step;
            }
            let e = oracle.energy(&trial);
            if e <= energy - 1e-4 * step * f2 {
                current = trial;
                energy = e;
                step *= 1.5;
                break;
            }
            step *= 0.5;
            if step * fmax < 1e-15 {
                underflow = true;
                break;
            }
        }
        if underflow {
            break;
        }
    }
    Ok(RelaxResult {
        canvas: current,
        energy,
        iterations,
        converged,
        step_underflow: underflow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Atom;
    use crate::oracle::{ElementTable, MorsePotential};
    use crate::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn x_canvas(points: &[Vec3]) -> Canvas {
        let x = ElementTable::builtin().lookup("X").unwrap();
        Canvas::from_atoms(points.iter().map(|&p| Atom::new(x, p)).collect())
    }

    /// Minimum of the 3-atom Morse energy over a grid of side lengths,
    /// refined twice around the best cell.
    fn grid_triangle_sides() -> (f64, f64, f64) {
        let m = MorsePotential::builtin();
        let energy = |a: f64, b: f64, c: f64| {
            // place from side lengths when the triangle inequality holds
            if a + b <= c || a + c <= b || b + c <= a {
                return f64::INFINITY;
            }
            let px = (a * a + b * b - c * c) / (2.0 * a);
            let py = (b * b - px * px).max(0.0).sqrt();
            m.energy(&x_canvas(&[Vec3::zeros(), Vec3::new(a, 0.0, 0.0), Vec3::new(px, py, 0.0)]))
        };
        let (mut center, mut width) = ((1.2, 1.2, 1.2), 0.6);
        for _ in 0..4 {
            let mut best = (f64::INFINITY, center);
            let n = 20;
            for i in 0..=n {
                for j in 0..=n {
                    for k in 0..=n {
                        let s = |c: f64, t: usize| c - width + 2.0 * width * t as f64 / n as f64;
                        let (a, b, c) = (s(center.0, i), s(center.1, j), s(center.2, k));
                        let e = energy(a, b, c);
                        if e < best.0 {
                            best = (e, (a, b, c));
                        }
                    }
                }
            }
            center = best.1;
            width /= 8.0;
        }
        center
    }

    #[test]
    fn triangle_relaxes_to_equilateral() {
        let (a, b, c) = grid_triangle_sides();
        for s in [a, b, c] {
            assert!((s - 1.0).abs() < 1e-3, "grid oracle side {s}");
        }
        let m = MorsePotential::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let pts: Vec<Vec3> = [Vec3::zeros(), Vec3::new(1.1, 0.0, 0.0), Vec3::new(0.4, 0.9, 0.0)]
                .iter()
                .map(|p| p + Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)))
                .collect();
            let res = relax(&m, &x_canvas(&pts), &[0, 1, 2], &RelaxConfig::default()).unwrap();
            assert!(res.converged);
            let p: Vec<Vec3> = res.canvas.atoms().iter().map(|a| a.position).collect();
            for (i, j) in [(0, 1), (0, 2), (1, 2)] {
                let side = (p[i] - p[j]).norm();
                assert!((side - a).abs() < 1e-3, "side {side}");
            }
        }
    }

    #[test]
    fn dimer_and_minimum() {
        let m = MorsePotential::builtin();
        let res = relax(&m, &x_canvas(&[Vec3::zeros(), Vec3::new(1.3, 0.0, 0.0)]), &[0, 1], &RelaxConfig::default()).unwrap();
        let r = (res.canvas.atoms()[0].position - res.canvas.atoms()[1].position).norm();
        assert!((r - 1.0).abs() < 1e-4);
        let at_min = x_canvas(&[Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)]);
        let res = relax(&m, &at_min, &[0, 1], &RelaxConfig::default()).unwrap();
        assert_eq!(res.iterations, 0);
        assert_eq!(res.canvas.atoms()[1].position, at_min.atoms()[1].position);
    }

    #[test]
    fn energy_is_monotone_and_fixed_atoms_stay() {
        let m = MorsePotential::builtin();
        let start = x_canvas(&[Vec3::zeros(), Vec3::new(1.5, 0.0, 0.0), Vec3::new(0.0, 1.7, 0.3)]);
        let mut prev = m.energy(&start);
        let mut c = start.clone();
        for _ in 0..20 {
            let cfg = RelaxConfig { max_iter: 1, ..RelaxConfig::default() };
            let res = relax(&m, &c, &[2], &cfg).unwrap();
            assert!(res.energy <= prev);
            prev = res.energy;
            c = res.canvas;
        }
        assert_eq!(c.atoms()[0].position, start.atoms()[0].position);
        assert_eq!(c.atoms()[1].position, start.atoms()[1].position);
        assert!(relax(&m, &c, &[5], &RelaxConfig::default()).is_err());
        let bad = RelaxConfig { tol: 0.0, ..RelaxConfig::default() };
        assert!(relax(&m, &c, &[0], &bad).is_err());
    }
}
