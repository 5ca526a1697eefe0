//! Proximal policy optimization for the covariant agent.
//!
//! Each iteration runs `workers` independent rollout streams for `T` steps,
//! computes generalized advantages, takes `epochs` passes of clipped
//! surrogate updates, then runs one greedy episode per evaluation bag.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{ActMode, Agent, PolicySample};
use crate::autodiff::{clip_global_norm, Adam, AdamConfig, ParamVars, Tape, Var};
use crate::env::{Canvas, EnvState, Environment, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::oracle::EnergyOracle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    /// Global gradient norm cap.
    pub max_grad_norm: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub workers: usize,
    /// Rollout length per worker as a multiple of the bag size.
    pub horizon_factor: usize,
    /// Transitions per gradient step; 0 uses the whole batch.
    pub minibatch_size: usize,
    /// Transitions per gradient tape. Fixed chunking keeps the summation
    /// order, and so the result, independent of the thread count.
    pub grad_chunk: usize,
    /// Training stops once this many environment steps were collected.
    pub max_env_steps: u64,
    /// Offline evaluation every this many iterations; the last iteration is
    /// always evaluated.
    pub eval_interval: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            max_grad_norm: 0.5,
            gae_lambda: 0.95,
            gamma: 0.99,
            value_coef: 1.0,
            entropy_coef: 0.01,
            epochs: 7,
            learning_rate: 3e-4,
            workers: 10,
            horizon_factor: 20,
            minibatch_size: 0,
            grad_chunk: 8,
            max_env_steps: 20_000,
            eval_interval: 1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Err(Error::Config { key: format!("ppo.{key}"), message });
        if !(self.clip > 0.0) {
            return bad("clip", format!("{} must be > 0", self.clip));
        }
        if !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return bad("gae_lambda", format!("{} outside (0, 1]", self.gae_lambda));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", format!("{} outside (0, 1]", self.gamma));
        }
        if !(self.max_grad_norm > 0.0) || !(self.learning_rate > 0.0) {
            return bad("learning_rate", "step size and gradient cap must be > 0".into());
        }
        if !(self.value_coef >= 0.0) || !(self.entropy_coef >= 0.0) {
            return bad("value_coef", "loss coefficients must be >= 0".into());
        }
        if self.workers == 0 || self.horizon_factor == 0 || self.grad_chunk == 0 || self.eval_interval == 0 {
            return bad("workers", "workers, horizon_factor, grad_chunk and eval_interval must be positive".into());
        }
        Ok(())
    }
}

/// One environment step as seen by the learner.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: EnvState,
    pub action: PolicySample,
    pub reward: f64,
    /// The episode ended with this step.
    pub done: bool,
}

impl Transition {
    pub fn log_prob(&self) -> f64 {
        self.action.log_probs.total()
    }

    pub fn value(&self) -> f64 {
        self.action.value
    }
}

/// Generalized advantages and value targets for one contiguous stream.
/// `last_value` bootstraps the state after the final transition and is
/// ignored when that transition ends an episode.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shift to zero mean and scale to unit variance; fewer than two entries, or
/// zero spread, only subtract the mean.
pub fn normalize(values: &mut [f64]) {
    let n = values.len() as f64;
    if values.is_empty() {
        return;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v -= mean;
        if std > 1e-12 {
            *v /= std + 1e-8;
        }
    }
}

/// Per-sample learning target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub old_log_prob: f64,
    pub advantage: f64,
    pub value_target: f64,
}

/// Loss components averaged over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Plain per-sample loss `(total, policy, value, entropy)`.
pub fn ppo_loss(new_log_prob: f64, new_value: f64, entropy: f64, target: &Target, config: &PpoConfig) -> LossTerms {
    let ratio = (new_log_prob - target.old_log_prob).exp();
    let clipped = ratio.clamp(1.0 - config.clip, 1.0 + config.clip);
    let policy = -(ratio * target.advantage).min(clipped * target.advantage);
    let value = (new_value - target.value_target).powi(2);
    LossTerms {
        policy,
        value,
        entropy,
        total: policy + config.value_coef * value - config.entropy_coef * entropy,
    }
}

/// Tape form of [`ppo_loss`]; returns `(total, policy, value)` scalars.
pub fn ppo_loss_on_tape(
    tape: &Tape,
    new_log_prob: Var,
    new_value: Var,
    entropy: Var,
    target: &Target,
    config: &PpoConfig,
) -> (Var, Var, Var) {
    let ratio = tape.exp(tape.add_scalar(new_log_prob, -target.old_log_prob));
    let clipped = tape.clamp(ratio, 1.0 - config.clip, 1.0 + config.clip);
    let a = target.advantage;
    let policy = tape.neg(tape.minimum(tape.scale(ratio, a), tape.scale(clipped, a)));
    let value = tape.square(tape.add_scalar(new_value, -target.value_target));
    let total = tape.add(
        tape.add(policy, tape.scale(value, config.value_coef)),
        tape.scale(entropy, -config.entropy_coef),
    );
    (total, policy, value)
}

/// Gradients of the mean loss over `batch`, plus the mean loss terms.
pub fn batch_gradients(
    agent: &Agent,
    batch: &[(&Transition, Target)],
    config: &PpoConfig,
) -> Result<(Vec<Vec<f64>>, LossTerms)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<Result<(Vec<Vec<f64>>, LossTerms)>> = batch
        .par_chunks(config.grad_chunk)
        .map(|chunk| {
            let tape = Tape::new();
            let vars: ParamVars = agent.params.register(&tape);
            let mut terms = LossTerms::default();
            let mut acc: Option<Var> = None;
            for (tr, target) in chunk {
                let ev = agent.evaluate_on_tape(&tape, &vars, &tr.state, &tr.action)?;
                let (total, policy, value) = ppo_loss_on_tape(&tape, ev.log_prob, ev.value, ev.entropy, target, config);
                terms.policy += tape.scalar(policy) * scale;
                terms.value += tape.scalar(value) * scale;
                terms.entropy += tape.scalar(ev.entropy) * scale;
                terms.total += tape.scalar(total) * scale;
                acc = Some(match acc {
                    Some(a) => tape.add(a, total),
                    None => total,
                });
            }
            let root = tape.scale(acc.expect("chunks are non-empty"), scale);
            let grads = tape.backward(root)?;
            Ok((agent.params.collect_grads(&grads, &vars), terms))
        })
        .collect();
    let mut total: Option<Vec<Vec<f64>>> = None;
    let mut terms = LossTerms::default();
    for part in parts {
        let (g, t) = part?;
        terms.policy += t.policy;
        terms.value += t.value;
        terms.entropy += t.entropy;
        terms.total += t.total;
        match &mut total {
            None => total = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                }
            }
        }
    }
    let grads = total.expect("batch is non-empty");
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((grads, terms))
}

/// Greedy rollout from `state` until the episode ends.
#[derive(Debug, Clone)]
pub struct Episode {
    pub canvas: Canvas,
    pub total_return: f64,
    pub energy: f64,
    pub steps: usize,
    /// Ended on a distance violation.
    pub violated: bool,
}

pub fn run_episode<O: EnergyOracle, R: rand::Rng + ?Sized>(
    agent: &Agent,
    env: &Environment<O>,
    mut state: EnvState,
    rho: f64,
    mode: ActMode,
    rng: &mut R,
) -> Result<Episode> {
    let mut total = 0.0;
    let mut steps = 0;
    loop {
        let sample = agent.act(&state, mode, rng)?;
        let out = env.step(&state, &sample.action(), rho)?;
        total += out.reward;
        steps += 1;
        state = out.state;
        if out.done {
            return Ok(Episode {
                energy: state.energy,
                canvas: state.canvas,
                total_return: total,
                steps,
                violated: out.violation.is_some(),
            });
        }
    }
}

/// Offline evaluation: one greedy episode per evaluation bag.
pub fn evaluate_greedy<O: EnergyOracle, R: rand::Rng + ?Sized>(
    agent: &Agent,
    env: &Environment<O>,
    task: &TaskSpec,
    rng: &mut R,
) -> Result<Vec<Episode>> {
    task.evaluation_bags()
        .into_iter()
        .map(|bag| {
            let s = env.state_for(task.initial.clone(), bag);
            run_episode(agent, env, s, task.rho, ActMode::Greedy, rng)
        })
        .collect()
}

/// Deterministic per-iteration record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub env_steps: u64,
    /// `None` when no episode finished during collection.
    pub mean_online_return: Option<f64>,
    pub mean_offline_return: Option<f64>,
    pub episodes: usize,
    pub loss: LossTerms,
    /// Mean global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Wall-clock record, kept apart from [`IterationRecord`] so that metric
/// logs stay bitwise reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub iteration: usize,
    pub wall_time_s: f64,
}

/// Everything produced by one iteration.
#[derive(Debug, Clone)]
pub struct IterationReport {
    pub record: IterationRecord,
    pub timing: TimingRecord,
    /// Empty when the iteration was not evaluated.
    pub offline: Vec<Episode>,
}

struct Worker {
    rng: ChaCha8Rng,
    state: Option<EnvState>,
    episode_return: f64,
}

struct Rollout {
    transitions: Vec<Transition>,
    last_value: f64,
    finished: Vec<f64>,
}

fn collect<O: EnergyOracle>(
    worker: &mut Worker,
    agent: &Agent,
    env: &Environment<O>,
    task: &TaskSpec,
    steps: usize,
) -> Result<Rollout> {
    let mut transitions = Vec::with_capacity(steps);
    let mut finished = Vec::new();
    for _ in 0..steps {
        let state = match worker.state.take() {
            Some(s) => s,
            None => env.reset(task, &mut worker.rng)?,
        };
        let action = agent.act(&state, ActMode::Sample, &mut worker.rng)?;
        let out = env.step(&state, &action.action(), task.rho)?;
        worker.episode_return += out.reward;
        if out.done {
            finished.push(worker.episode_return);
            worker.episode_return = 0.0;
        } else {
            worker.state = Some(out.state);
        }
        transitions.push(Transition {
            state,
            action,
            reward: out.reward,
            done: out.done,
        });
    }
    let last_value = match &worker.state {
        Some(s) => agent.value(s)?,
        None => 0.0,
    };
    Ok(Rollout {
        transitions,
        last_value,
        finished,
    })
}

/// Rollout length per worker: `horizon_factor · |B|` with `|B|` the largest
/// bag the task can produce.
pub fn rollout_length(task: &TaskSpec, config: &PpoConfig) -> usize {
    let size = match &task.kind {
        TaskKind::StochasticBag { zeta_max, .. } => *zeta_max as usize,
        _ => task.evaluation_bags().iter().map(|b| b.total() as usize).max().unwrap_or(1),
    };
    config.horizon_factor * size.max(1)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Train `agent` in place. `observer` sees every iteration as it finishes.
pub fn train<O: EnergyOracle>(
    agent: &mut Agent,
    env: &Environment<O>,
    task: &TaskSpec,
    config: &PpoConfig,
    seed: u64,
    observer: &mut dyn FnMut(&IterationReport) -> Result<()>,
) -> Result<Vec<IterationRecord>> {
    config.validate()?;
    task.validate()?;
    let mut workers: Vec<Worker> = (0..config.workers)
        .map(|w| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(w as u64 + 1);
            Worker {
                rng,
                state: None,
                episode_return: 0.0,
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(
        &agent.params,
        AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let t_len = rollout_length(task, config);
    let mut env_steps = 0u64;
    let mut records = Vec::new();
    let mut iteration = 0;
    loop {
        let remaining = config.max_env_steps.saturating_sub(env_steps);
        let per_worker = t_len.min((remaining / config.workers as u64) as usize);
        if per_worker == 0 {
            break;
        }
        let start = Instant::now();
        let frozen: &Agent = agent;
        let rollouts: Vec<Result<Rollout>> = workers
            .par_iter_mut()
            .map(|w| collect(w, frozen, env, task, per_worker))
            .collect();
        let mut batch: Vec<(&Transition, Target)> = Vec::new();
        let mut finished = Vec::new();
        let rollouts = rollouts.into_iter().collect::<Result<Vec<_>>>()?;
        let mut advantages = Vec::new();
        let mut targets = Vec::new();
        for r in &rollouts {
            let rewards: Vec<f64> = r.transitions.iter().map(|t| t.reward).collect();
            let values: Vec<f64> = r.transitions.iter().map(Transition::value).collect();
            let dones: Vec<bool> = r.transitions.iter().map(|t| t.done).collect();
            let (adv, ret) = compute_gae(&rewards, &values, &dones, r.last_value, config.gamma, config.gae_lambda);
            advantages.extend(adv);
            targets.extend(ret);
            finished.extend_from_slice(&r.finished);
        }
        normalize(&mut advantages);
        for (i, tr) in rollouts.iter().flat_map(|r| &r.transitions).enumerate() {
            batch.push((
                tr,
                Target {
                    old_log_prob: tr.log_prob(),
                    advantage: advantages[i],
                    value_target: targets[i],
                },
            ));
        }
        env_steps += batch.len() as u64;

        let mb = if config.minibatch_size == 0 { batch.len() } else { config.minibatch_size.min(batch.len()) };
        let mut norms = Vec::new();
        let mut loss_sum = LossTerms::default();
        let mut updates = 0usize;
        for _ in 0..config.epochs {
            let mut order: Vec<usize> = (0..batch.len()).collect();
            if mb < batch.len() {
                order.shuffle(&mut rng);
            }
            for idx in order.chunks(mb) {
                let part: Vec<(&Transition, Target)> = idx.iter().map(|&i| batch[i]).collect();
                let (mut grads, terms) = batch_gradients(agent, &part, config)?;
                norms.push(clip_global_norm(&mut grads, config.max_grad_norm));
                adam.step(&mut agent.params, &grads)?;
                loss_sum.policy += terms.policy;
                loss_sum.value += terms.value;
                loss_sum.entropy += terms.entropy;
                loss_sum.total += terms.total;
                updates += 1;
            }
        }
        if agent.params.iter().flat_map(|p| &p.data).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite parameters after iteration {iteration}")));
        }
        let n = updates.max(1) as f64;
        let loss = LossTerms {
            policy: loss_sum.policy / n,
            value: loss_sum.value / n,
            entropy: loss_sum.entropy / n,
            total: loss_sum.total / n,
        };

        let last = config.max_env_steps.saturating_sub(env_steps) / (config.workers as u64) == 0;
        let offline = if (iteration + 1) % config.eval_interval == 0 || last {
            evaluate_greedy(agent, env, task, &mut rng)?
        } else {
            Vec::new()
        };
        let offline_returns: Vec<f64> = offline.iter().map(|e| e.total_return).collect();
        let record = IterationRecord {
            iteration,
            env_steps,
            mean_online_return: mean(&finished),
            mean_offline_return: mean(&offline_returns),
            episodes: finished.len(),
            loss,
            grad_norm: mean(&norms).unwrap_or(0.0),
        };
        let report = IterationReport {
            record: record.clone(),
            timing: TimingRecord {
                iteration,
                wall_time_s: start.elapsed().as_secs_f64(),
            },
            offline,
        };
        observer(&report)?;
        records.push(record);
        iteration += 1;
    }
    Ok(records)
}
