//! Orientation distributions on the unit sphere built from a spherical
//! harmonic series.
//!
//! Coefficients pair with conjugated harmonics, `f(x) = Σ r_ℓ^m conj(Y_ℓ^m(x))`,
//! so that `f` is unchanged when the coefficients rotate by `D(R)` and `x` by
//! `R`. Every density carries a frame: coefficients are stored in the local
//! frame and the normalizer is computed on a fixed grid there, which keeps it
//! exactly invariant when the state and the frame rotate together.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::Matrix3;
use num_complex::Complex64;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::covariant::{complex_from_interleaved, CovLayout};
use crate::error::{Error, Result};
use crate::so3::{
    build_quadrature, build_sunflower, num_coeffs, random_unit, sph_harm_all, QuadratureGrid,
    WignerSolver,
};
use crate::Vec3;

/// Draws rejected in a row before sampling is declared failed.
pub const MAX_REJECTIONS: usize = 1_000_000;

/// Functional form of the orientation density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityVariant {
    /// `exp(-β |f|²/k) / Z`.
    Eq5,
    /// `|f|²/k`, normalized by orthonormality of the harmonics.
    Eq7,
}

/// Grids and harmonic tables shared by all densities of one degree.
#[derive(Debug)]
pub struct DensityGrids {
    l_max: usize,
    nc: usize,
    quad: QuadratureGrid,
    /// `nodes × nc` harmonics at the quadrature nodes.
    quad_y: Vec<Complex64>,
    /// `points × nc` harmonics at the sunflower points.
    sun_y: Vec<Complex64>,
    wigner: WignerSolver,
    /// Envelope safety factor of the rejection sampler.
    envelope_factor: f64,
}

impl DensityGrids {
    pub fn new(l_max: usize, quadrature_order: usize, sunflower_points: usize, envelope_factor: f64) -> Result<Arc<Self>> {
        if !(envelope_factor >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "envelope factor {envelope_factor} must be >= 1"
            )));
        }
        let quad = build_quadrature(quadrature_order);
        let quad_y = quad.harmonics_table(l_max);
        let sun_y = build_sunflower(sunflower_points)
            .points
            .iter().flat_map(|p| sph_harm_all(l_max, p)).collect();
        Ok(Arc::new(DensityGrids {
            l_max,
            nc: num_coeffs(l_max),
            quad,
            quad_y,
            sun_y,
            wigner: WignerSolver::new(l_max),
            envelope_factor,
        }))
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn quadrature(&self) -> &QuadratureGrid {
        &self.quad
    }

    pub fn wigner(&self) -> &WignerSolver {
        &self.wigner
    }

    /// `D(F)^H r` degree by degree, `r` in `lm` order.
    pub fn to_local(&self, r: &[Complex64], frame: &Matrix3<f64>) -> Result<Vec<Complex64>> {
        let d = self.wigner.solve(frame)?;
        let mut out = vec![Complex64::new(0.0, 0.0); r.len()];
        for (l, dl) in d.iter().enumerate() {
            let off = l * l;
            let dim = 2 * l + 1;
            for i in 0..dim {
                out[off + i] = (0..dim).map(|j| dl[(j, i)].conj() * r[off + j]).sum();
            }
        }
        Ok(out)
    }
}

/// `Σ_j c_j conj(y_j)`.
fn series(c: &[Complex64], y: &[Complex64]) -> Complex64 {
    c.iter().zip(y).map(|(a, b)| a * b.conj()).sum()
}

fn log_sum_exp_weighted(a: &[f64], w: &[f64]) -> f64 {
    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + a.iter().zip(w).map(|(x, w)| w * (x - max).exp()).sum::<f64>().ln()
}

/// Normalized density on S² with coefficients held in a local frame.
#[derive(Debug, Clone)]
pub struct SphericalDensity {
    grids: Arc<DensityGrids>,
    local: Vec<Complex64>,
    frame: Matrix3<f64>,
    beta: f64,
    variant: DensityVariant,
    k: f64,
    log_z: f64,
}

impl SphericalDensity {
    /// Density from global coefficients `r` (length `(L+1)²`, `lm` order)
    /// and a proper rotation `frame` whose columns are the local axes.
    pub fn new(
        grids: Arc<DensityGrids>,
        r: &[Complex64],
        frame: &Matrix3<f64>,
        beta: f64,
        variant: DensityVariant,
    ) -> Result<Self> {
        let local = grids.to_local(r, frame)?;
        SphericalDensity::from_local(grids, local, frame, beta, variant)
    }

    pub fn from_local(
        grids: Arc<DensityGrids>,
        local: Vec<Complex64>,
        frame: &Matrix3<f64>,
        beta: f64,
        variant: DensityVariant,
    ) -> Result<Self> {
        if local.len() != grids.nc {
            return Err(Error::InvalidArgument(format!(
                "{} coefficients for degree {}",
                local.len(),
                grids.l_max
            )));
        }
        let k: f64 = local.iter().map(Complex64::norm_sqr).sum();
        if !(k > 0.0) || !k.is_finite() {
            return Err(Error::Numeric(format!("coefficient norm {k} must be positive and finite")));
        }
        if !beta.is_finite() {
            return Err(Error::InvalidArgument(format!("beta {beta} must be finite")));
        }
        let log_z = match variant {
            DensityVariant::Eq7 => 0.0,
            DensityVariant::Eq5 => {
                let a: Vec<f64> = grids
                    .quad_y
                    .chunks_exact(grids.nc)
                    .map(|y| -beta * series(&local, y).norm_sqr() / k)
                    .collect();
                log_sum_exp_weighted(&a, &grids.quad.weights)
            }
        };
        if !log_z.is_finite() {
            return Err(Error::Numeric(format!("log normalizer {log_z} is not finite")));
        }
        Ok(SphericalDensity {
            grids,
            local,
            frame: *frame,
            beta,
            variant,
            k,
            log_z,
        })
    }

    pub fn frame(&self) -> &Matrix3<f64> {
        &self.frame
    }

    pub fn local_coeffs(&self) -> &[Complex64] {
        &self.local
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    fn log_density_from_harmonics(&self, y: &[Complex64]) -> f64 {
        let g = series(&self.local, y).norm_sqr() / self.k;
        match self.variant {
            DensityVariant::Eq5 => -self.beta * g - self.log_z,
            DensityVariant::Eq7 => g.ln(),
        }
    }

    /// Log-density at a local-frame unit vector.
    pub fn log_density_local(&self, y: &Vec3) -> f64 {
        self.log_density_from_harmonics(&sph_harm_all(self.grids.l_max, y))
    }

    /// Log-density at a global unit vector.
    pub fn log_density(&self, x: &Vec3) -> f64 {
        self.log_density_local(&(self.frame.transpose() * x))
    }

    pub fn density(&self, x: &Vec3) -> f64 {
        self.log_density(x).exp()
    }

    /// Largest log-density over the sunflower grid.
    fn log_envelope(&self) -> f64 {
        self.grids
            .sun_y
            .chunks_exact(self.grids.nc)
            .map(|y| self.log_density_from_harmonics(y))
            .fold(f64::NEG_INFINITY, f64::max)
            + self.grids.envelope_factor.ln()
    }

    /// `n` independent draws with their log-densities, by rejection from the
    /// uniform proposal. Directions are global unit vectors.
    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<(Vec3, f64)>> {
        // log of M_env q, where the proposal density q is 1/(4π)
        let mut log_bound = self.log_envelope();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let mut rejections = 0usize;
            loop {
                let y = random_unit(rng);
                let lp = self.log_density_local(&y);
                if lp > log_bound {
                    log_bound += 2f64.ln();
                    rejections = 0;
                    continue;
                }
                let u: f64 = rng.random();
                if u.ln() <= lp - log_bound {
                    out.push(((self.frame * y).normalize(), lp));
                    break;
                }
                rejections += 1;
                if rejections > MAX_REJECTIONS {
                    return Err(Error::SamplingFailure(format!(
                        "more than {MAX_REJECTIONS} rejections in a row"
                    )));
                }
            }
        }
        Ok(out)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec3, f64)> {
        Ok(self.sample_n(1, rng)?[0])
    }

    /// Highest-density direction among `samples` draws.
    pub fn estimate_mode<R: Rng + ?Sized>(&self, samples: usize, rng: &mut R) -> Result<(Vec3, f64)> {
        if samples == 0 {
            return Err(Error::InvalidArgument("mode estimation needs at least one sample".into()));
        }
        let draws = self.sample_n(samples, rng)?;
        Ok(draws
            .into_iter()
            .fold((Vec3::zeros(), f64::NEG_INFINITY), |best, d| if d.1 > best.1 { d } else { best }))
    }

    /// Acceptance probability of one proposal under the current envelope.
    pub fn acceptance_rate(&self) -> f64 {
        (-self.log_envelope()).exp() / (4.0 * PI)
    }
}

/// Log-density at local direction `y` as a function of local coefficients
/// `r_local` (`1 × 2(L+1)²` interleaved), recorded on the tape.
pub fn log_density_op(
    tape: &Tape,
    r_local: Var,
    layout: &CovLayout,
    grids: &Arc<DensityGrids>,
    y: &Vec3,
    beta: f64,
    variant: DensityVariant,
) -> Result<Var> {
    let nc = grids.nc;
    if layout.channel_counts().iter().any(|&c| c != 1) || layout.size() != nc {
        return Err(Error::InvalidArgument("orientation coefficients need one channel per degree".into()));
    }
    let r = tape.with_value(r_local, complex_from_interleaved);
    let k: f64 = r.iter().map(Complex64::norm_sqr).sum();
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::Numeric(format!("coefficient norm {k} must be positive and finite")));
    }
    let yq = sph_harm_all(grids.l_max, y);
    let fq = series(&r, &yq);
    let gq = fq.norm_sqr() / k;
    let (value, softmax) = match variant {
        DensityVariant::Eq5 => {
            let mut a = Vec::with_capacity(grids.quad.weights.len());
            for yn in grids.quad_y.chunks_exact(nc) {
                a.push(-beta * series(&r, yn).norm_sqr() / k);
            }
            let log_z = log_sum_exp_weighted(&a, &grids.quad.weights);
            let sm: Vec<f64> = a
                .iter()
                .zip(&grids.quad.weights)
                .map(|(x, w)| w * (x - log_z).exp())
                .collect();
            (-beta * gq - log_z, sm)
        }
        DensityVariant::Eq7 => (gq.ln(), Vec::new()),
    };
    if !value.is_finite() {
        return Err(Error::Numeric(format!("log-density {value} is not finite")));
    }
    let grids = Arc::clone(grids);
    Ok(tape.push(
        vec![value],
        1,
        1,
        &[r_local],
        Box::new(move |g, p, _, pg| {
            let Some(gx) = pg.get(0) else { return };
            let r = complex_from_interleaved(p[0]);
            let mut acc = vec![Complex64::new(0.0, 0.0); nc];
            // dg/dr_j scaled, with G = ∂/∂re + i ∂/∂im
            let add =|f: Complex64, gval: f64, y: &[Complex64], acc: &mut [Complex64], scale: f64| {
                for j in 0..nc {
                    acc[j] += (f * y[j] * (2.0 / k) - r[j] * (2.0 * gval / k)) * scale;
                }
            };
            match variant {
                DensityVariant::Eq5 => {
                    add(fq, gq, &yq, &mut acc, -beta);
                    for (yn, &s) in grids.quad_y.chunks_exact(nc).zip(&softmax) {
                        let f = series(&r, yn);
                        add(f, f.norm_sqr() / k, yn, &mut acc, beta * s);
                    }
                }
                DensityVariant::Eq7 => add(fq, gq, &yq, &mut acc, 1.0 / gq),
            }
            for (d, a) in gx.chunks_exact_mut(2).zip(&acc) {
                d[0] += g[0] * a.re;
                d[1] += g[0] * a.im;
            }
        }),
    ))
}

/// Proper rotation whose columns are local axes derived from the canvas
/// around `focal`: the third axis points at the first other atom, the first
/// axis towards the next atom off that line. Collinear and single-atom
/// canvases fall back to a fixed perpendicular or the identity; the density
/// is axially symmetric in those cases.
pub fn focal_frame(positions: &[Vec3], focal: usize) -> Matrix3<f64> {
    const EPS: f64 = 1e-8;
    let origin = positions[focal];
    let mut others = positions
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != focal)
        .map(|(_, p)| p - origin);
    let Some(e3) = others.by_ref().find(|v| v.norm() > EPS).map(|v| v.normalize()) else {
        return Matrix3::identity();
    };
    let e1 = others
        .map(|v| v - e3 * v.dot(&e3))
        .find(|w| w.norm() > EPS)
        .map(|w| w.normalize())
        .unwrap_or_else(|| {
            let helper = if e3.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            (helper - e3 * helper.dot(&e3)).normalize()
        });
    let e2 = e3.cross(&e1);
    Matrix3::from_columns(&[e1, e2, e3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, relative_error};
    use crate::so3::{random_rotation, is_rotation, WignerSolver};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grids() -> Arc<DensityGrids> {
        DensityGrids::new(4, 31, 4096, 1.2).unwrap()
    }

    fn random_coeffs(rng: &mut ChaCha8Rng, nc: usize) -> Vec<Complex64> {
        (0..nc)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn rotate_coeffs(r: &[Complex64], d: &[nalgebra::DMatrix<Complex64>]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); r.len()];
        for (l, dl) in d.iter().enumerate() {
            let off = l * l;
            for i in 0..2 * l + 1 {
                out[off + i] = (0..2 * l + 1).map(|j| dl[(i, j)] * r[off + j]).sum();
            }
        }
        out
    }

    #[test]
    fn degree_zero_is_uniform() {
        let g = grids();
        let mut r = vec![Complex64::new(0.0, 0.0); 25];
        r[0] = Complex64::new(0.7, -0.2);
        for beta in [-10.0, 1.0, 100.0] {
            for variant in [DensityVariant::Eq5, DensityVariant::Eq7] {
                let d = SphericalDensity::new(g.clone(), &r, &Matrix3::identity(), beta, variant).unwrap();
                for v in [Vec3::x(), Vec3::new(0.3, -0.5, 0.8).normalize()] {
                    assert!((d.density(&v) - 1.0 / (4.0 * PI)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn normalizes_against_finer_grid() {
        let g = grids();
        let fine = build_quadrature(120);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let r = random_coeffs(&mut rng, 25);
            for beta in [-10.0, 1.0, 100.0] {
                for variant in [DensityVariant::Eq5, DensityVariant::Eq7] {
                    let d = SphericalDensity::new(g.clone(), &r, &Matrix3::identity(), beta, variant).unwrap();
                    let total = fine.integrate(|c| d.density(&c.to_unit()));
                    assert!((total - 1.0).abs() < 1e-3, "beta {beta} {variant:?}: {total}");
                }
            }
        }
    }

    #[test]
    fn covariant_under_rotation() {
        let g = grids();
        let solver = WignerSolver::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let r = random_coeffs(&mut rng, 25);
            let frame = random_rotation(&mut rng);
            let rot = random_rotation(&mut rng);
            let rr = rotate_coeffs(&r, &solver.solve(&rot).unwrap());
            let a = SphericalDensity::new(g.clone(), &r, &frame, 100.0, DensityVariant::Eq5).unwrap();
            let b = SphericalDensity::new(g.clone(), &rr, &(rot * frame), 100.0, DensityVariant::Eq5).unwrap();
            for _ in 0..20 {
                let x = random_unit(&mut rng);
                assert!((a.density(&x) - b.density(&(rot * x))).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn samples_are_unit_and_uniform_case_accepts_often() {
        let g = grids();
        let mut r = vec![Complex64::new(0.0, 0.0); 25];
        r[0] = Complex64::new(1.0, 0.0);
        let d = SphericalDensity::new(g, &r, &Matrix3::identity(), 100.0, DensityVariant::Eq5).unwrap();
        assert!(d.acceptance_rate() >= 1.0 / 1.2 - 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for (x, lp) in d.sample_n(1000, &mut rng).unwrap() {
            assert!((x.norm() - 1.0).abs() < 1e-12);
            assert!((lp + (4.0 * PI).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn mode_is_deterministic_and_near_grid_argmax() {
        let g = grids();
        let mut r = vec![Complex64::new(0.0, 0.0); 25];
        // f = Y_0^0 + 0.8 Y_1^0 style series: single peak under beta < 0
        r[0] = Complex64::new(0.5, 0.0);
        r[2] = Complex64::new(0.8, 0.0);
        let frame = random_rotation(&mut ChaCha8Rng::seed_from_u64(3));
        let d = SphericalDensity::new(g, &r, &frame, -10.0, DensityVariant::Eq5).unwrap();
        let a = d.estimate_mode(1024, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = d.estimate_mode(1024, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let best = build_sunflower(200_000)
            .points
            .into_iter()
            .max_by(|p, q| d.log_density(p).total_cmp(&d.log_density(q)))
            .unwrap();
        let angle = a.0.dot(&best).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 5.0, "mode off by {angle} degrees");
    }

    #[test]
    fn tape_log_density_matches_and_differentiates() {
        let g = grids();
        let layout = CovLayout::uniform(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for variant in [DensityVariant::Eq5, DensityVariant::Eq7] {
            for beta in [-10.0, 1.0, 100.0] {
                let r = random_coeffs(&mut rng, 25);
                let y = random_unit(&mut rng);
                let flat: Vec<f64> = r.iter().flat_map(|z| [z.re, z.im]).collect();
                let eval = |x: &[f64]| {
                    let tape = Tape::new();
                    let v = tape.leaf(x.to_vec(), 1, 50);
                    let out = log_density_op(&tape, v, &layout, &g, &y, beta, variant).unwrap();
                    (tape.scalar(out), tape, v, out)
                };
                let (val, tape, v, out) = eval(&flat);
                let plain = SphericalDensity::from_local(g.clone(), r.clone(), &Matrix3::identity(), beta, variant).unwrap();
                assert!((val - plain.log_density_local(&y)).abs() < 1e-12);
                let grad = tape.backward(out).unwrap().get(v).unwrap().to_vec();
                let fd = finite_difference(&flat, 1e-5, |x| eval(x).0);
                for (a, b) in grad.iter().zip(&fd) {
                    assert!(relative_error(*a, *b, 1e-3) < 1e-4, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn frames_rotate_with_the_canvas() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let pts: Vec<Vec3> = (0..4).map(|_| random_unit(&mut rng) * 1.3).collect();
        let rot = random_rotation(&mut rng);
        let moved: Vec<Vec3> = pts.iter().map(|p| rot * p + Vec3::new(1.0, 2.0, 3.0)).collect();
        let a = focal_frame(&pts, 1);
        let b = focal_frame(&moved, 1);
        assert!(is_rotation(&a, 1e-12));
        assert!((rot * a - b).norm() < 1e-12);
        assert_eq!(focal_frame(&pts[..1], 0), Matrix3::identity());
        let line = [Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 2.0)];
        assert!(is_rotation(&focal_frame(&line, 0), 1e-12));
    }
}
