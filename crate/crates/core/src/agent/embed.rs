//! Covariant per-atom state embedding.
//!
//! Each atom starts from a spherical expansion of its neighborhood, radial
//! Gaussians times harmonics of the bond direction with one channel per
//! (neighbor element, radial function), plus its own element and the bag
//! counts as scalars. Mixing rounds of linear maps and channel-wise
//! Clebsch-Gordan products follow.

use rand::Rng;

use crate::autodiff::{semi_orthogonal, ParamId, ParamStore, ParamVars, Tape, Var};
use crate::covariant::{tape as cov, CovLayout};
use crate::error::Result;
use crate::so3::{num_coeffs, sph_harm_all};
use crate::Vec3;

/// Gaussian radial functions with a cosine switch to zero at the cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialBasis {
    centers: Vec<f64>,
    width: f64,
    cutoff: f64,
}

impl RadialBasis {
    /// `count` centers evenly spaced on `[lo, hi]`, width equal to the spacing.
    pub fn new(count: usize, lo: f64, hi: f64, cutoff: f64) -> Self {
        let step = if count > 1 { (hi - lo) / (count - 1) as f64 } else { hi - lo };
        RadialBasis {
            centers: (0..count).map(|k| lo + step * k as f64).collect(),
            width: step,
            cutoff,
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// All basis values at distance `r`; zero at and beyond the cutoff.
    pub fn eval(&self, r: f64) -> Vec<f64> {
        if r >= self.cutoff {
            return vec![0.0; self.centers.len()];
        }
        let switch = 0.5 * ((std::f64::consts::PI * r / self.cutoff).cos() + 1.0);
        self.centers
            .iter()
            .map(|c| {
                let z = (r - c) / self.width;
                (-0.5 * z * z).exp() * switch
            })
            .collect()
    }
}

/// Layout of the raw features: `n_el · n_rbf` neighbor channels per degree,
/// plus `2 n_el` scalar channels at degree zero.
pub fn input_layout(l_max: usize, n_el: usize, n_rbf: usize) -> CovLayout {
    let mut ch = vec![n_el * n_rbf; l_max + 1];
    ch[0] += 2 * n_el;
    CovLayout::new(ch).expect("positive channel counts")
}

/// Raw features for every atom, interleaved rows. `slots[i]` is the element
/// slot of atom `i`, `bag` the bag counts by slot.
pub fn raw_features(
    positions: &[Vec3],
    slots: &[usize],
    bag: &[f64],
    l_max: usize,
    rbf: &RadialBasis,
) -> (Vec<f64>, CovLayout) {
    let n_el = bag.len();
    let k = rbf.len();
    let layout = input_layout(l_max, n_el, k);
    let size = layout.size();
    let nc = num_coeffs(l_max);
    let mut out = vec![0.0; positions.len() * 2 * size];
    for (i, xi) in positions.iter().enumerate() {
        let row = &mut out[i * 2 * size..(i + 1) * 2 * size];
        for (j, xj) in positions.iter().enumerate() {
            let d = xj - xi;
            let r = d.norm();
            if j == i || r >= rbf.cutoff() || r == 0.0 {
                continue;
            }
            let y = sph_harm_all(l_max, &(d / r));
            debug_assert_eq!(y.len(), nc);
            let radial = rbf.eval(r);
            for l in 0..=l_max {
                let dim = 2 * l + 1;
                let off = layout.offset(l);
                for (kk, w) in radial.iter().enumerate() {
                    let base = off + (slots[j] * k + kk) * dim;
                    for m in 0..dim {
                        let v = y[l * l + m] * *w;
                        row[2 * (base + m)] += v.re;
                        row[2 * (base + m) + 1] += v.im;
                    }
                }
            }
        }
        let scalar = n_el * k;
        row[2 * scalar + 2 * slots[i]] = 1.0;
        for (e, count) in bag.iter().enumerate() {
            row[2 * (scalar + n_el + e)] = *count;
        }
    }
    (out, layout)
}

/// Complex `out × in` weights, real and imaginary parts semi-orthogonal
/// scaled by `1/√2`, stored `[out, in, 2]`.
pub fn complex_weight<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    out: usize,
    inp: usize,
    rng: &mut R,
) -> ParamId {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let re = semi_orthogonal(out, inp, s, rng);
    let im = semi_orthogonal(out, inp, s, rng);
    let data = re.iter().zip(&im).flat_map(|(a, b)| [*a, *b]).collect();
    store.add(name, vec![out, inp, 2], data)
}

/// Per-degree complex weights mapping `input` to `out` channels.
pub fn covariant_weights<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    input: &CovLayout,
    out: usize,
    rng: &mut R,
) -> Vec<ParamId> {
    (0..=input.l_max())
        .map(|l| complex_weight(store, format!("{prefix}.l{l}"), out, input.channels(l), rng))
        .collect()
}

#[derive(Debug, Clone)]
struct Round {
    mix: Vec<ParamId>,
    out: Vec<ParamId>,
}

/// Mixing network from raw features to `τ` channels per degree.
#[derive(Debug, Clone)]
pub struct Embedding {
    l_max: usize,
    tau: usize,
    rounds: Vec<Round>,
    input: CovLayout,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        input: CovLayout,
        tau: usize,
        rounds: usize,
        rng: &mut R,
    ) -> Self {
        let l_max = input.l_max();
        let hidden = CovLayout::uniform(l_max, tau);
        let cat = CovLayout::uniform(l_max, 2 * tau);
        let rounds = (0..rounds)
            .map(|r| {
                let src = if r == 0 { &input } else { &hidden };
                Round {
                    mix: covariant_weights(store, &format!("embed.{r}.mix"), src, tau, rng),
                    out: covariant_weights(store, &format!("embed.{r}.out"), &cat, tau, rng),
                }
            })
            .collect();
        Embedding {
            l_max,
            tau,
            rounds,
            input,
        }
    }

    pub fn output_layout(&self) -> CovLayout {
        CovLayout::uniform(self.l_max, self.tau)
    }

    pub fn input_layout(&self) -> &CovLayout {
        &self.input
    }

    /// `features` is `n × 2·input.size()`; returns `n × 2·output.size()`.
    pub fn forward(&self, tape: &Tape, vars: &ParamVars, features: Var) -> Result<Var> {
        let mut x = features;
        let mut layout = self.input.clone();
        for round in &self.rounds {
            let w: Vec<Var> = round.mix.iter().map(|&id| vars[id]).collect();
            let (h, hl) = cov::linear(tape, x, &layout, &w)?;
            let (c, cl) = cov::cg_channelwise(tape, h, h, &hl, self.l_max)?;
            let (cat, catl) = cov::concat(tape, &[(h, &hl), (c, &cl)])?;
            let w: Vec<Var> = round.out.iter().map(|&id| vars[id]).collect();
            let (y, yl) = cov::linear(tape, cat, &catl, &w)?;
            x = cov::squash(tape, y, &yl)?;
            layout = yl;
        }
        Ok(x)
    }
}
