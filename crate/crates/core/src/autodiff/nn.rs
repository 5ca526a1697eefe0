use std::ops::Index;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    /// Shape used on the tape. Trailing axes are folded into columns, so a
    /// complex `[rows, cols, 2]` tensor becomes `rows × 2 cols`.
    pub fn tape_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, rest @ ..] => (*r, rest.iter().product()),
        }
    }
}

/// Ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter `{name}` shape mismatch"
        );
        assert!(self.find(&name).is_none(), "duplicate parameter `{name}`");
        self.params.push(Param { name, shape, data });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Register every parameter as a differentiable leaf.
    pub fn register(&self, tape: &Tape) -> ParamVars {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let (r, c) = p.tape_shape();
                tape.leaf(p.data.clone(), r, c)
            })
            .collect();
        ParamVars { vars }
    }

    /// Per-parameter gradients, zero for parameters off the root's path.
    pub fn collect_grads(&self, grads: &Gradients, vars: &ParamVars) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .zip(&vars.vars)
            .map(|(p, &v)| {
                grads
                    .get(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.data.len()])
            })
            .collect()
    }

    /// Copy values from `other`, which must hold the same names and shapes.
    pub fn assign(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
            a.data.clone_from(&b.data);
        }
        Ok(())
    }
}

/// Tape handles of a registered [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl Index<ParamId> for ParamVars {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Euclidean norm over all gradient entries.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescale `grads` so the global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// `rows × cols` matrix with orthonormal rows or columns (whichever is the
/// shorter side), scaled by `gain`, row-major.
pub fn semi_orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let m = if rows >= cols { q } else { q.transpose() };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(gain * m[(i, j)]);
        }
    }
    out
}

/// Output nonlinearity of an [`Mlp`]. Hidden layers always use ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    /// Input width followed by every layer's output width.
    pub widths: Vec<usize>,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, output: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "an MLP needs at least one layer and positive widths, got {widths:?}"
            )));
        }
        Ok(MlpSpec { widths, output })
    }
}

/// Dense network with ReLU hidden layers, weights in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    output: Activation,
}

impl Mlp {
    /// Registers `{prefix}.{i}.w` (`out × in`, semi-orthogonal) and
    /// `{prefix}.{i}.b` (zero) for every layer.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, spec: &MlpSpec, rng: &mut R) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let wid = store.add(
                    format!("{prefix}.{i}.w"),
                    vec![w[1], w[0]],
                    semi_orthogonal(w[1], w[0], 1.0, rng),
                );
                let bid = store.add(format!("{prefix}.{i}.b"), vec![w[1]], vec![0.0; w[1]]);
                (wid, bid)
            })
            .collect();
        Mlp {
            layers,
            output: spec.output,
        }
    }

    /// Apply row-wise to `x: n × in`.
    pub fn forward(&self, tape: &Tape, vars: &ParamVars, x: Var) -> Var {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.linear(h, vars[w], Some(vars[b]));
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        match self.output {
            Activation::Linear => h,
            Activation::Tanh => tape.tanh(h),
        }
    }

    /// Weight of the final layer, for callers that rescale it after init.
    pub fn last_weight(&self) -> ParamId {
        self.layers.last().expect("at least one layer").0
    }
}

/// Probabilities of a categorical restricted to `mask`.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::InvalidArgument("mask length mismatch".into()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidState("mask excludes every entry".into()));
    }
    Ok(super::ops::masked_log_softmax(logits, mask)
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// `log Σ_m weights_m N(x; means_m, stds_m²)`.
pub fn gmm_log_density(x: f64, weights: &[f64], means: &[f64], stds: &[f64]) -> f64 {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let comp: Vec<f64> = weights
        .iter()
        .zip(means)
        .zip(stds)
        .map(|((w, m), s)| {
            let z = (x - m) / s;
            w.ln() - s.ln() - half_log_2pi - 0.5 * z * z
        })
        .collect();
    let max = comp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + comp.iter().map(|c| (c - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if g.len() != p.data.len() {
                return Err(Error::InvalidArgument(format!(
                    "gradient for `{}` has {} entries, expected {}",
                    p.name,
                    g.len(),
                    p.data.len()
                )));
            }
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
