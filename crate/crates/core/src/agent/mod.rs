//! Covariant actor-critic.
//!
//! The policy factors a placement into focal atom, element, distance and
//! orientation. Focal and element heads are masked categoricals on invariant
//! features, the distance is a Gaussian mixture, and the orientation density
//! comes from covariant coefficients conditioned on the distance. The critic
//! is a sum over per-atom invariant encodings.

mod checkpoint;
pub mod density;
pub mod embed;

use std::sync::Arc;

use nalgebra::{DMatrix, Matrix3};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use density::{focal_frame, log_density_op, DensityGrids, DensityVariant, SphericalDensity};
pub use embed::{Embedding, RadialBasis};

use crate::autodiff::{
    gmm_log_density, masked_softmax, Activation, Mlp, MlpSpec, ParamId, ParamStore, ParamVars,
    Tape, Var,
};
use crate::covariant::{complex_from_interleaved, tape as cov, CovLayout, CovariantTensor, InvariantVector};
use crate::env::{Canvas, EnvAction, EnvState};
use crate::error::{Error, Result};
use crate::oracle::{Element, ElementTable};
use crate::Vec3;

/// Network sizes and distribution settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Element symbols the agent can place, in slot order.
    pub elements: Vec<String>,
    pub l_max: usize,
    pub channels_per_element: usize,
    /// Gaussian components of the distance head.
    pub mixtures: usize,
    pub d_min: f64,
    pub d_max: f64,
    /// Orientation sharpness; unset means 100, or -10 when the experiment
    /// driver builds the agent for a single-bag task.
    pub beta: Option<f64>,
    /// Draws used for greedy distance and orientation choices.
    pub mode_samples: usize,
    pub variant: DensityVariant,
    pub quadrature_order: usize,
    pub envelope_factor: f64,
    pub sunflower_points: usize,
    pub hidden: usize,
    pub cg_layers: usize,
    pub rbf_count: usize,
    pub rbf_min: f64,
    pub cutoff: f64,
    /// Starting standard deviation of every mixture component, Å.
    pub initial_sigma: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            elements: Vec::new(),
            l_max: 4,
            channels_per_element: 4,
            mixtures: 3,
            d_min: 0.95,
            d_max: 1.80,
            beta: None,
            mode_samples: 1024,
            variant: DensityVariant::Eq5,
            quadrature_order: 41,
            envelope_factor: 1.2,
            sunflower_points: 4096,
            hidden: 128,
            cg_layers: 3,
            rbf_count: 8,
            rbf_min: 0.6,
            cutoff: 3.0,
            initial_sigma: 0.1,
        }
    }
}

impl AgentConfig {
    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(100.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: format!("agent.{key}"), message: msg });
        if self.elements.is_empty() {
            return bad("elements", "at least one element is required".into());
        }
        if self.l_max < 1 || self.l_max > crate::covariant::MAX_DEGREE / 2 {
            return bad("l_max", format!("{} outside 1..={}", self.l_max, crate::covariant::MAX_DEGREE / 2));
        }
        if !(self.d_min < self.d_max) || !(self.d_min > 0.0) {
            return bad("d_min", format!("need 0 < d_min < d_max, got [{}, {}]", self.d_min, self.d_max));
        }
        if self.mode_samples == 0 {
            return bad("mode_samples", "must be at least 1".into());
        }
        for (key, v) in [
            ("channels_per_element", self.channels_per_element),
            ("mixtures", self.mixtures),
            ("hidden", self.hidden),
            ("cg_layers", self.cg_layers),
            ("rbf_count", self.rbf_count),
            ("quadrature_order", self.quadrature_order),
            ("sunflower_points", self.sunflower_points),
        ] {
            if v == 0 {
                return bad(key, "must be positive".into());
            }
        }
        if !(self.envelope_factor >= 1.0) {
            return bad("envelope_factor", format!("{} must be >= 1", self.envelope_factor));
        }
        if !(self.initial_sigma > 0.0) || !(self.cutoff > self.rbf_min) || !self.beta().is_finite() {
            return bad("initial_sigma", "sigma, cutoff and beta must be valid".into());
        }
        Ok(())
    }
}

/// How sub-actions are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    /// Argmax for the categoricals, best of `mode_samples` draws for the
    /// distance and orientation.
    Greedy,
}

/// Log-probabilities of the four sub-actions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HeadLogProbs {
    pub focal: f64,
    pub element: f64,
    pub distance: f64,
    pub orientation: f64,
}

impl HeadLogProbs {
    pub fn total(&self) -> f64 {
        self.focal + self.element + self.distance + self.orientation
    }
}

/// One composite action with its log-probabilities and the critic value of
/// the state it was drawn in. The first atom has no focal atom and sits at
/// the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub focal: Option<usize>,
    pub element: Element,
    /// Å; zero for the first atom.
    pub distance: f64,
    /// Global unit vector; zero for the first atom.
    pub orientation: Vec3,
    pub position: Vec3,
    pub log_probs: HeadLogProbs,
    pub value: f64,
}

impl PolicySample {
    pub fn action(&self) -> EnvAction {
        EnvAction {
            element: self.element,
            position: self.position,
        }
    }
}

/// Head outputs re-evaluated for given sub-actions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub log_probs: HeadLogProbs,
    /// Entropy of the focal and element categoricals.
    pub entropy: f64,
    pub value: f64,
}

/// Tape handles of an evaluation, for losses.
#[derive(Debug, Clone, Copy)]
pub struct TapeEvaluation {
    pub log_prob: Var,
    pub entropy: Var,
    pub value: Var,
}

/// Mixture parameters of the distance head.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl DistanceMixture {
    pub fn log_density(&self, d: f64) -> f64 {
        gmm_log_density(d, &self.weights, &self.means, &self.stds)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let m = sample_categorical(&self.weights, rng);
        let z: f64 = rng.sample(StandardNormal);
        clip_distance(self.means[m] + self.stds[m] * z)
    }
}

/// Negative distances become `0.001`.
pub fn clip_distance(d: f64) -> f64 {
    if d < 0.0 {
        0.001
    } else {
        d
    }
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
struct Heads {
    initial: Mlp,
    focal: Mlp,
    element: Mlp,
    mdn: Mlp,
    log_sigma: ParamId,
    tcov: Vec<ParamId>,
    phi: Mlp,
    rho: Mlp,
}

/// Embedding of a non-empty canvas on a tape.
struct Trunk {
    s_cov: Var,
    s_inv: Var,
    n: usize,
}

enum Pick<'a, R: ?Sized> {
    Draw { greedy: bool, rng: &'a mut R },
    Given(&'a PolicySample),
}

/// The actor-critic with its parameters.
#[derive(Debug, Clone)]
pub struct Agent {
    config: AgentConfig,
    elements: Vec<Element>,
    /// Slot of each table element, `None` outside the vocabulary.
    slot_of: Vec<Option<usize>>,
    pub params: ParamStore,
    embedding: Embedding,
    heads: Heads,
    rbf: RadialBasis,
    grids: Arc<DensityGrids>,
    cov_layout: CovLayout,
    elem_layout: CovLayout,
    tcov_layout: CovLayout,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(config: AgentConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let table = ElementTable::builtin();
        let elements = config
            .elements
            .iter()
            .map(|s| table.lookup(s))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Config { key: "agent.elements".into(), message: e.to_string() })?;
        let mut slot_of = vec![None; table.len()];
        for (i, e) in elements.iter().enumerate() {
            if slot_of[e.index()].replace(i).is_some() {
                return Err(Error::Config {
                    key: "agent.elements".into(),
                    message: format!("duplicate element `{}`", table.symbol(*e)),
                });
            }
        }
        let n_el = elements.len();
        let l = config.l_max;
        let tau_e = config.channels_per_element;
        let tau = tau_e * n_el;
        let rbf = RadialBasis::new(config.rbf_count, config.rbf_min, config.cutoff, config.cutoff);
        let mut params = ParamStore::new();
        let input = embed::input_layout(l, n_el, config.rbf_count);
        let embedding = Embedding::new(&mut params, input, tau, config.cg_layers, rng);
        let cov_layout = CovLayout::uniform(l, tau);
        let elem_layout = CovLayout::uniform(l, tau_e);
        let pairs = elem_layout.pair_layout(l)?;
        let tcov_layout = CovLayout::new(
            (0..=l)
                .map(|k| 2 * elem_layout.channels(k) + pairs.channels(k))
                .collect(),
        )?;
        let h = config.hidden;
        let d_inv = cov_layout.invariant_size();
        let d_fe = elem_layout.invariant_size();
        let m = config.mixtures;
        let spec = |w: Vec<usize>| MlpSpec::new(w, Activation::Linear);
        let heads = Heads {
            initial: Mlp::new(&mut params, "initial", &spec(vec![n_el, h, n_el])?, rng),
            focal: Mlp::new(&mut params, "focal", &spec(vec![d_inv, h, 1])?, rng),
            element: Mlp::new(&mut params, "element", &spec(vec![d_inv, h, n_el])?, rng),
            mdn: Mlp::new(&mut params, "mdn", &spec(vec![d_fe, h, 2 * m])?, rng),
            log_sigma: params.add("mdn.log_sigma", vec![m], vec![config.initial_sigma.ln(); m]),
            tcov: embed::covariant_weights(&mut params, "tcov", &tcov_layout, 1, rng),
            phi: Mlp::new(&mut params, "critic.phi", &spec(vec![d_inv, h, h])?, rng),
            rho: Mlp::new(&mut params, "critic.rho", &spec(vec![h, h, 1])?, rng),
        };
        let grids = DensityGrids::new(l, config.quadrature_order, config.sunflower_points, config.envelope_factor)?;
        Ok(Agent {
            config,
            elements,
            slot_of,
            params,
            embedding,
            heads,
            rbf,
            grids,
            cov_layout,
            elem_layout,
            tcov_layout,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn grids(&self) -> &Arc<DensityGrids> {
        &self.grids
    }

    /// Layout of the per-atom covariant embedding.
    pub fn embedding_layout(&self) -> &CovLayout {
        &self.cov_layout
    }

    fn slot(&self, e: Element) -> Result<usize> {
        self.slot_of
            .get(e.index())
            .copied()
            .flatten()
            .ok_or_else(|| Error::InvalidState(format!("element {} is outside the agent's vocabulary", e.0)))
    }

    fn bag_vector(&self, state: &EnvState) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.elements.len()];
        for (e, n) in state.bag.iter() {
            v[self.slot(e)?] = n as f64;
        }
        Ok(v)
    }

    fn trunk(&self, tape: &Tape, vars: &ParamVars, canvas: &Canvas, bag: &[f64]) -> Result<Trunk> {
        if canvas.is_empty() {
            return Err(Error::InvalidState("cannot embed an empty canvas".into()));
        }
        let slots = canvas
            .atoms()
            .iter()
            .map(|a| self.slot(a.element))
            .collect::<Result<Vec<_>>>()?;
        let (raw, layout) = embed::raw_features(&canvas.positions(), &slots, bag, self.config.l_max, &self.rbf);
        let n = canvas.len();
        let x = tape.constant(raw, n, 2 * layout.size());
        let s_cov = self.embedding.forward(tape, vars, x)?;
        let s_inv = cov::t_inv(tape, s_cov, &self.cov_layout)?;
        Ok(Trunk { s_cov, s_inv, n })
    }

    fn critic(&self, tape: &Tape, vars: &ParamVars, trunk: Option<&Trunk>) -> Var {
        let pooled = match trunk {
            Some(t) => {
                let enc = self.heads.phi.forward(tape, vars, t.s_inv);
                tape.sum_rows(enc)
            }
            None => tape.constant(vec![0.0; self.config.hidden], 1, self.config.hidden),
        };
        self.heads.rho.forward(tape, vars, pooled)
    }

    fn focal_logits(&self, tape: &Tape, vars: &ParamVars, t: &Trunk) -> Var {
        let logits = self.heads.focal.forward(tape, vars, t.s_inv);
        tape.reshape(logits, 1, t.n)
    }

    fn element_logits(&self, tape: &Tape, vars: &ParamVars, t: &Trunk, f: usize) -> Var {
        let row = tape.row(t.s_inv, f);
        self.heads.element.forward(tape, vars, row)
    }

    /// Channels of element slot `slot` at atom `f`, all degrees.
    fn element_channels(&self, tape: &Tape, t: &Trunk, f: usize, slot: usize) -> Var {
        let row = tape.row(t.s_cov, f);
        let tau_e = self.config.channels_per_element;
        let parts: Vec<Var> = (0..=self.config.l_max)
            .map(|l| {
                let dim = 2 * l + 1;
                let start = self.cov_layout.offset(l) + slot * tau_e * dim;
                tape.slice_cols(row, 2 * start, 2 * (start + tau_e * dim))
            })
            .collect();
        tape.concat_cols(&parts)
    }

    /// `(logits, means, log_sigma)` of the distance mixture.
    fn mixture_vars(&self, tape: &Tape, vars: &ParamVars, s_fe: Var) -> Result<(Var, Var, Var)> {
        let inv = cov::t_inv(tape, s_fe, &self.elem_layout)?;
        let out = self.heads.mdn.forward(tape, vars, inv);
        let m = self.config.mixtures;
        let logits = tape.slice_cols(out, 0, m);
        let raw = tape.tanh(tape.slice_cols(out, m, 2 * m));
        let half = 0.5 * (self.config.d_max - self.config.d_min);
        let means = tape.add_scalar(tape.scale(raw, half), self.config.d_min + half);
        Ok((logits, means, vars[self.heads.log_sigma]))
    }

    fn mixture_from_vars(&self, tape: &Tape, (logits, means, log_sigma): (Var, Var, Var)) -> Result<DistanceMixture> {
        let m = self.config.mixtures;
        Ok(DistanceMixture {
            weights: tape.with_value(logits, |l| masked_softmax(l, &vec![true; m]))?,
            means: tape.value(means),
            stds: tape.value(log_sigma).iter().map(|s| s.exp()).collect(),
        })
    }

    /// Orientation coefficients in the local frame, `1 × 2(L+1)²`.
    fn local_coeffs(&self, tape: &Tape, vars: &ParamVars, s_fe: Var, d: f64, frame: &Matrix3<f64>) -> Result<Var> {
        let el = &self.elem_layout;
        let ds = tape.scale(s_fe, d);
        let (cg, cgl) = cov::cg_pairs(tape, ds, ds, el, self.config.l_max)?;
        let (cat, catl) = cov::concat(tape, &[(s_fe, el), (ds, el), (cg, &cgl)])?;
        debug_assert_eq!(catl, self.tcov_layout);
        let w: Vec<Var> = self.heads.tcov.iter().map(|&id| vars[id]).collect();
        let (r, rl) = cov::linear(tape, cat, &catl, &w)?;
        let adj: Vec<DMatrix<Complex64>> = self
            .grids
            .wigner()
            .solve(frame)?
            .iter()
            .map(|d| d.adjoint())
            .collect();
        cov::apply_m_matrices(tape, r, &rl, &adj)
    }

    fn forward<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        vars: &ParamVars,
        state: &EnvState,
        pick: Pick<'_, R>,
    ) -> Result<(PolicySample, TapeEvaluation)> {
        let bag = self.bag_vector(state)?;
        let emask: Vec<bool> = bag.iter().map(|&c| c > 0.0).collect();
        if !emask.iter().any(|&m| m) {
            return Err(Error::InvalidState("the bag is empty".into()));
        }
        let zero = || tape.scalar_constant(0.0);
        let choose_cat = |lp: &[f64], given: Option<usize>, pick: &mut Pick<'_, R>| -> Result<usize> {
            match pick {
                Pick::Given(_) => {
                    let i = given.expect("given index");
                    if i >= lp.len() || lp[i] == f64::NEG_INFINITY {
                        return Err(Error::InvalidAction(format!("sub-action {i} has zero probability")));
                    }
                    Ok(i)
                }
                Pick::Draw { greedy: true, .. } => Ok(argmax(lp)),
                Pick::Draw { greedy: false, rng } => {
                    let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
                    Ok(sample_categorical(&p, &mut **rng))
                }
            }
        };
        let mut pick = pick;
        let given = match &pick {
            Pick::Given(s) => Some((*s).clone()),
            Pick::Draw { .. } => None,
        };

        if state.canvas.is_empty() {
            let b = tape.constant(bag.clone(), 1, bag.len());
            let logits = self.heads.initial.forward(tape, vars, b);
            let lp = tape.masked_log_softmax(logits, &emask);
            let given_slot = match &given {
                Some(g) => Some(self.slot(g.element)?),
                None => None,
            };
            let slot = tape.with_value(lp, |v| choose_cat(v, given_slot, &mut pick))?;
            let lp_e = tape.pick(lp, slot);
            let entropy = tape.masked_entropy(logits, &emask);
            let value = self.critic(tape, vars, None);
            let log_prob = tape.add(lp_e, zero());
            let sample = PolicySample {
                focal: None,
                element: self.elements[slot],
                distance: 0.0,
                orientation: Vec3::zeros(),
                position: Vec3::zeros(),
                log_probs: HeadLogProbs { element: tape.scalar(lp_e), ..HeadLogProbs::default() },
                value: tape.scalar(value),
            };
            return Ok((sample, TapeEvaluation { log_prob, entropy, value }));
        }

        let trunk = self.trunk(tape, vars, &state.canvas, &bag)?;
        let f_logits = self.focal_logits(tape, vars, &trunk);
        let fmask = vec![true; trunk.n];
        let lp_f_all = tape.masked_log_softmax(f_logits, &fmask);
        let given_f = match &given {
            Some(g) => Some(g.focal.ok_or_else(|| Error::InvalidAction("missing focal atom".into()))?),
            None => None,
        };
        let f = tape.with_value(lp_f_all, |v| choose_cat(v, given_f, &mut pick))?;
        let lp_f = tape.pick(lp_f_all, f);

        let e_logits = self.element_logits(tape, vars, &trunk, f);
        let lp_e_all = tape.masked_log_softmax(e_logits, &emask);
        let given_e = match &given {
            Some(g) => Some(self.slot(g.element)?),
            None => None,
        };
        let slot = tape.with_value(lp_e_all, |v| choose_cat(v, given_e, &mut pick))?;
        let lp_e = tape.pick(lp_e_all, slot);

        let s_fe = self.element_channels(tape, &trunk, f, slot);
        let mix_vars = self.mixture_vars(tape, vars, s_fe)?;
        let d = match &mut pick {
            Pick::Given(g) => g.distance,
            Pick::Draw { greedy, rng } => {
                let mix = self.mixture_from_vars(tape, mix_vars)?;
                if *greedy {
                    (0..self.config.mode_samples)
                        .map(|_| mix.sample(&mut **rng))
                        .map(|d| (d, mix.log_density(d)))
                        .fold((0.0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b })
                        .0
                } else {
                    mix.sample(&mut **rng)
                }
            }
        };
        if !(d >= 0.0) || !d.is_finite() {
            return Err(Error::InvalidAction(format!("distance {d} must be finite and >= 0")));
        }
        let d_var = tape.scalar_constant(d);
        let lp_d = tape.gmm_log_density(mix_vars.0, mix_vars.1, mix_vars.2, d_var);

        let positions = state.canvas.positions();
        let frame = focal_frame(&positions, f);
        let r_loc = self.local_coeffs(tape, vars, s_fe, d, &frame)?;
        let orientation = match &mut pick {
            Pick::Given(g) => g.orientation,
            Pick::Draw { greedy, rng } => {
                let coeffs = tape.with_value(r_loc, complex_from_interleaved);
                let dens = SphericalDensity::from_local(self.grids.clone(), coeffs, &frame, self.config.beta(), self.config.variant)?;
                if *greedy {
                    dens.estimate_mode(self.config.mode_samples, &mut **rng)?.0
                } else {
                    dens.sample(&mut **rng)?.0
                }
            }
        };
        let y = (frame.transpose() * orientation).normalize();
        let lp_o = log_density_op(
            tape,
            r_loc,
            &CovLayout::uniform(self.config.l_max, 1),
            &self.grids,
            &y,
            self.config.beta(),
            self.config.variant,
        )?;

        let entropy = tape.add(
            tape.masked_entropy(f_logits, &fmask),
            tape.masked_entropy(e_logits, &emask),
        );
        let value = self.critic(tape, vars, Some(&trunk));
        let log_prob = tape.add(tape.add(lp_f, lp_e), tape.add(lp_d, lp_o));
        let log_probs = HeadLogProbs {
            focal: tape.scalar(lp_f),
            element: tape.scalar(lp_e),
            distance: tape.scalar(lp_d),
            orientation: tape.scalar(lp_o),
        };
        if !log_probs.total().is_finite() {
            return Err(Error::Numeric(format!("non-finite log-probabilities {log_probs:?}")));
        }
        let sample = PolicySample {
            focal: Some(f),
            element: self.elements[slot],
            distance: d,
            orientation,
            position: positions[f] + orientation * d,
            log_probs,
            value: tape.scalar(value),
        };
        Ok((sample, TapeEvaluation { log_prob, entropy, value }))
    }

    /// Draw an action for `state`.
    pub fn act<R: Rng + ?Sized>(&self, state: &EnvState, mode: ActMode, rng: &mut R) -> Result<PolicySample> {
        let tape = Tape::new();
        let vars = self.params.register(&tape);
        let pick = Pick::Draw { greedy: mode == ActMode::Greedy, rng };
        Ok(self.forward(&tape, &vars, state, pick)?.0)
    }

    /// Re-evaluate the heads for the sub-actions in `action`.
    pub fn evaluate(&self, state: &EnvState, action: &PolicySample) -> Result<Evaluation> {
        let tape = Tape::new();
        let vars = self.params.register(&tape);
        let (s, ev) = self.forward::<rand_chacha::ChaCha8Rng>(&tape, &vars, state, Pick::Given(action))?;
        Ok(Evaluation {
            log_probs: s.log_probs,
            entropy: tape.scalar(ev.entropy),
            value: s.value,
        })
    }

    /// Record the evaluation of `action` on `tape` with registered `vars`.
    pub fn evaluate_on_tape(
        &self,
        tape: &Tape,
        vars: &ParamVars,
        state: &EnvState,
        action: &PolicySample,
    ) -> Result<TapeEvaluation> {
        Ok(self.forward::<rand_chacha::ChaCha8Rng>(tape, vars, state, Pick::Given(action))?.1)
    }

    /// Critic value; the empty canvas maps to the encoding of an empty set.
    pub fn value(&self, state: &EnvState) -> Result<f64> {
        let tape = Tape::new();
        let vars = self.params.register(&tape);
        let trunk = if state.canvas.is_empty() {
            None
        } else {
            Some(self.trunk(&tape, &vars, &state.canvas, &self.bag_vector(state)?)?)
        };
        let v = self.critic(&tape, &vars, trunk.as_ref());
        Ok(tape.scalar(v))
    }

    /// Per-atom covariant embeddings and their invariants.
    pub fn embed(&self, state: &EnvState) -> Result<(Vec<CovariantTensor>, Vec<InvariantVector>)> {
        let tape = Tape::new();
        let vars = self.params.register(&tape);
        let t = self.trunk(&tape, &vars, &state.canvas, &self.bag_vector(state)?)?;
        let size = 2 * self.cov_layout.size();
        let width = self.cov_layout.invariant_size();
        let cov_rows = tape.value(t.s_cov);
        let inv_rows = tape.value(t.s_inv);
        let covs = cov_rows
            .chunks_exact(size)
            .map(|r| CovariantTensor::from_interleaved(self.cov_layout.clone(), r))
            .collect::<Result<Vec<_>>>()?;
        let invs = inv_rows.chunks_exact(width).map(|r| InvariantVector(r.to_vec())).collect();
        Ok((covs, invs))
    }

    /// Focal-atom probabilities.
    pub fn focal_probs(&self, state: &EnvState) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let vars = self.params.register(&tape);
        let t = self.trunk(&tape, &vars, &state.canvas, &self.bag_vector(state)?)?;
        let logits = self.focal_logits(&tape, &vars, &t);
        tape.with_value(logits, |l| masked_softmax(l, &vec![true; t.n]))
    }

    /// Element probabilities by slot, given focal atom `f`.
    pub fn element_probs(&self, state: &EnvState, f: usize) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let vars = self.params.register(&tape);
        let bag = self.bag_vector(state)?;
        let t = self.trunk(&tape, &vars, &state.canvas, &bag)?;
        self.check_focal(f, t.n)?;
        let logits = self.element_logits(&tape, &vars, &t, f);
        let mask: Vec<bool> = bag.iter().map(|&c| c > 0.0).collect();
        tape.with_value(logits, |l| masked_softmax(l, &mask))
    }

    fn check_focal(&self, f: usize, n: usize) -> Result<()> {
        if f >= n {
            return Err(Error::InvalidAction(format!("focal atom {f} not on a canvas of {n}")));
        }
        Ok(())
    }

    /// Distance mixture given focal atom and element.
    pub fn distance_mixture(&self, state: &EnvState, f: usize, element: Element) -> Result<DistanceMixture> {
        let tape = Tape::new();
        let vars = self.params.register(&tape);
        let t = self.trunk(&tape, &vars, &state.canvas, &self.bag_vector(state)?)?;
        self.check_focal(f, t.n)?;
        let s_fe = self.element_channels(&tape, &t, f, self.slot(element)?);
        let mv = self.mixture_vars(&tape, &vars, s_fe)?;
        self.mixture_from_vars(&tape, mv)
    }

    /// Orientation density given focal atom, element and distance.
    pub fn orientation_density(&self, state: &EnvState, f: usize, element: Element, d: f64) -> Result<SphericalDensity> {
        let tape = Tape::new();
        let vars = self.params.register(&tape);
        let t = self.trunk(&tape, &vars, &state.canvas, &self.bag_vector(state)?)?;
        self.check_focal(f, t.n)?;
        let s_fe = self.element_channels(&tape, &t, f, self.slot(element)?);
        let frame = focal_frame(&state.canvas.positions(), f);
        let r = self.local_coeffs(&tape, &vars, s_fe, d, &frame)?;
        let coeffs = tape.with_value(r, complex_from_interleaved);
        SphericalDensity::from_local(self.grids.clone(), coeffs, &frame, self.config.beta(), self.config.variant)
    }
}

#[cfg(test)]
mod tests;
