//! Experiment driver and structure metrics.
//!
//! An experiment reads a TOML file, runs one of the agents for every seed and
//! writes per-seed metric logs and XYZ structures. The summary (validity,
//! diversity, median RMSD) is always recomputed from the stored structures.

pub mod graph;
pub mod rmsd;
pub mod xyz;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use graph::{canonical_hash, perceive_graph, MolecularGraph};
pub use rmsd::{kabsch, rmsd, stability_metric};
pub use xyz::{parse_xyz, read_xyz, write_xyz, XyzRecord};

use crate::agent::{Agent, AgentConfig};
use crate::env::{Atom, Bag, Canvas, EnvConfig, Environment, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::oracle::{CountingOracle, ElementTable, EnergyOracle, MorsePotential, RelaxConfig};
use crate::opt::{run_opt_agent, OptConfig};
use crate::ppo::{evaluate_greedy, train, Episode, IterationRecord, PpoConfig};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// PPO training with offline evaluation.
    Train,
    /// Greedy episodes of a saved checkpoint.
    Evaluate,
    /// The build-and-relax baseline.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub mode: Mode,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            mode: Mode::Train,
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKindName {
    SingleBag,
    MultiBag,
    StochasticBag,
    Solvation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKindName,
    /// Formula of the single-bag and solvation tasks.
    pub bag: String,
    pub bags: Vec<String>,
    /// Reference formula of the stochastic-bag task.
    pub reference: String,
    pub zeta_min: u32,
    pub zeta_max: u32,
    pub rho: Option<f64>,
    /// Starting structure; solvation defaults to formaldehyde.
    pub initial_xyz: Option<PathBuf>,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            kind: TaskKindName::SingleBag,
            bag: "X3".into(),
            bags: Vec::new(),
            reference: String::new(),
            zeta_min: 1,
            zeta_max: 1,
            rho: None,
            initial_xyz: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Morse,
    Counting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub kind: OracleKind,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection { kind: OracleKind::Morse }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub reward_floor: f64,
    pub min_distance: f64,
    pub max_distance: f64,
    pub horizon_factor: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        let d = EnvConfig::default();
        EnvSection {
            reward_floor: d.reward_floor,
            min_distance: d.min_distance,
            max_distance: d.max_distance,
            horizon_factor: d.horizon_factor,
        }
    }
}

impl EnvSection {
    fn to_config(&self) -> EnvConfig {
        EnvConfig {
            reward_floor: self.reward_floor,
            min_distance: self.min_distance,
            max_distance: self.max_distance,
            horizon_factor: self.horizon_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Bond threshold as a multiple of the covalent radius sum.
    pub bond_factor: f64,
    pub relax_tolerance: f64,
    pub relax_max_iter: usize,
    /// Checkpoint for `evaluate` runs.
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            bond_factor: 1.2,
            relax_tolerance: 1e-6,
            relax_max_iter: 10_000,
            checkpoint: None,
        }
    }
}

impl EvalSection {
    fn relax_config(&self) -> RelaxConfig {
        RelaxConfig {
            tol: self.relax_tolerance,
            max_iter: self.relax_max_iter,
            ..RelaxConfig::default()
        }
    }
}

/// Parsed experiment file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub task: TaskSection,
    pub agent: AgentConfig,
    pub oracle: OracleSection,
    pub env: EnvSection,
    pub ppo: PpoConfig,
    pub opt: OptConfig,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Parse TOML; errors name the offending key path.
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
            key: String::from("<document>"),
            message: e.message().to_string(),
        })?;
        serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            key: e.path().to_string(),
            message: e.inner().message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn task_spec(&self, table: &ElementTable) -> Result<TaskSpec> {
        let t = &self.task;
        let cfg = |key: &str, e: Error| Error::Config {
            key: format!("task.{key}"),
            message: e.to_string(),
        };
        let initial = match &t.initial_xyz {
            Some(p) => read_xyz(p, table)?.canvas,
            None if t.kind == TaskKindName::Solvation => formaldehyde(table)?,
            None => Canvas::new(),
        };
        let kind = match t.kind {
            TaskKindName::SingleBag => TaskKind::SingleBag(Bag::parse(&t.bag, table).map_err(|e| cfg("bag", e))?),
            TaskKindName::Solvation => TaskKind::Solvation(Bag::parse(&t.bag, table).map_err(|e| cfg("bag", e))?),
            TaskKindName::MultiBag => TaskKind::MultiBag(
                t.bags
                    .iter()
                    .map(|b| Bag::parse(b, table))
                    .collect::<Result<_>>()
                    .map_err(|e| cfg("bags", e))?,
            ),
            TaskKindName::StochasticBag => TaskKind::StochasticBag {
                reference: Bag::parse(&t.reference, table).map_err(|e| cfg("reference", e))?,
                zeta_min: t.zeta_min,
                zeta_max: t.zeta_max,
            },
        };
        let default_rho = if t.kind == TaskKindName::Solvation { 0.01 } else { 0.0 };
        let spec = TaskSpec {
            kind,
            initial,
            rho: t.rho.unwrap_or(default_rho),
        };
        spec.validate().map_err(|e| cfg("kind", e))?;
        Ok(spec)
    }

    /// Agent settings with the vocabulary filled from the task when empty.
    pub fn agent_config(&self, task: &TaskSpec, table: &ElementTable) -> AgentConfig {
        let mut cfg = self.agent.clone();
        if cfg.elements.is_empty() {
            let mut set = BTreeSet::new();
            for a in task.initial.atoms() {
                set.insert(a.element);
            }
            match &task.kind {
                TaskKind::StochasticBag { reference, .. } => set.extend(reference.iter().map(|(e, _)| e)),
                TaskKind::MultiBag(bags) => set.extend(bags.iter().flat_map(|b| b.iter().map(|(e, _)| e))),
                TaskKind::SingleBag(b) | TaskKind::Solvation(b) => set.extend(b.iter().map(|(e, _)| e)),
            }
            cfg.elements = set.into_iter().map(|e| table.symbol(e).to_string()).collect();
        }
        if cfg.beta.is_none() && matches!(task.kind, TaskKind::SingleBag(_)) {
            cfg.beta = Some(-10.0);
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let table = ElementTable::builtin();
        let task = self.task_spec(table)?;
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config {
                key: "experiment.seeds".into(),
                message: "at least one seed is required".into(),
            });
        }
        self.ppo.validate()?;
        self.opt.validate()?;
        if self.experiment.mode != Mode::Baseline {
            self.agent_config(&task, table).validate()?;
        }
        if self.experiment.mode == Mode::Evaluate && self.eval.checkpoint.is_none() {
            return Err(Error::Config {
                key: "eval.checkpoint".into(),
                message: "evaluate mode needs a checkpoint".into(),
            });
        }
        if !(self.eval.bond_factor > 0.0) || !(self.eval.relax_tolerance > 0.0) {
            return Err(Error::Config {
                key: "eval.bond_factor".into(),
                message: "bond factor and relax tolerance must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Formaldehyde in the xy-plane with C at the origin.
pub fn formaldehyde(table: &ElementTable) -> Result<Canvas> {
    let (c, o, h) = (table.lookup("C")?, table.lookup("O")?, table.lookup("H")?);
    let a = 121.8f64.to_radians();
    Ok(Canvas::from_atoms(vec![
        Atom::new(c, Vec3::zeros()),
        Atom::new(o, Vec3::new(1.21, 0.0, 0.0)),
        Atom::new(h, Vec3::new(1.1 * a.cos(), 1.1 * a.sin(), 0.0)),
        Atom::new(h, Vec3::new(1.1 * a.cos(), -1.1 * a.sin(), 0.0)),
    ]))
}

/// Per-seed record; the summary is derived from the XYZ files only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub task: String,
    pub agent: Mode,
    /// Mean greedy return of every evaluation round.
    pub evaluation_returns: Vec<f64>,
    /// Structure files relative to the seed directory.
    pub structures: Vec<String>,
    pub oracle_calls: Option<u64>,
}

/// Metrics recomputed from stored structures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: usize,
    /// Structures of the last evaluation round of every seed.
    pub final_structures: usize,
    pub validity: f64,
    /// Distinct valid graphs over all evaluation rounds.
    pub diversity: usize,
    /// Distinct valid graphs in the last round only.
    pub diversity_final: usize,
    /// Median RMSD to the relaxed geometry over valid final structures.
    pub median_rmsd: Option<f64>,
    pub mean_final_return: Option<f64>,
}

impl Summary {
    pub fn table(&self) -> String {
        let rmsd = self.median_rmsd.map_or("-".into(), |v| format!("{v:.4}"));
        let ret = self.mean_final_return.map_or("-".into(), |v| format!("{v:.4}"));
        format!(
            "seeds  structures  validity  diversity  diversity(final)  median RMSD (Å)  mean return\n\
             {:<5}  {:<10}  {:<8.3}  {:<9}  {:<16}  {:<15}  {}\n",
            self.seeds, self.final_structures, self.validity, self.diversity, self.diversity_final, rmsd, ret
        )
    }
}

fn structure_name(round: usize, bag: usize) -> String {
    format!("round_{round:05}_bag_{bag:02}.xyz")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn json_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("records serialize");
    s.push('\n');
    s
}

fn write_round<O: EnergyOracle>(
    dir: &Path,
    round: usize,
    episodes: &[(Canvas, f64, f64)],
    env: &Environment<O>,
    record: &mut RunRecord,
) -> Result<()> {
    for (b, (canvas, energy, ret)) in episodes.iter().enumerate() {
        let name = structure_name(round, b);
        write_file(&dir.join("structures").join(&name), &write_xyz(canvas, *energy, *ret, env.table))?;
        record.structures.push(format!("structures/{name}"));
    }
    let mean = episodes.iter().map(|e| e.2).sum::<f64>() / episodes.len().max(1) as f64;
    record.evaluation_returns.push(mean);
    Ok(())
}

fn episode_tuple(e: &Episode) -> (Canvas, f64, f64) {
    (e.canvas.clone(), e.energy, e.total_return)
}

fn run_seed<O: EnergyOracle>(
    config: &ExperimentConfig,
    env: &Environment<O>,
    task: &TaskSpec,
    seed: u64,
    dir: &Path,
) -> Result<RunRecord> {
    create_dir(&dir.join("structures"))?;
    let mut record = RunRecord {
        seed,
        task: format!("{:?}", config.task.kind).to_lowercase(),
        agent: config.experiment.mode,
        evaluation_returns: Vec::new(),
        structures: Vec::new(),
        oracle_calls: None,
    };
    match config.experiment.mode {
        Mode::Train => {
            let mut agent = Agent::new(config.agent_config(task, env.table), &mut ChaCha8Rng::seed_from_u64(seed))?;
            let mut metrics = String::new();
            let mut timings = String::new();
            let mut round = 0;
            train(&mut agent, env, task, &config.ppo, seed, &mut |report| {
                metrics.push_str(&json_line(&report.record));
                timings.push_str(&json_line(&report.timing));
                if !report.offline.is_empty() {
                    let eps: Vec<_> = report.offline.iter().map(episode_tuple).collect();
                    write_round(dir, round, &eps, env, &mut record)?;
                    round += 1;
                }
                Ok(())
            })?;
            write_file(&dir.join("metrics.jsonl"), &metrics)?;
            write_file(&dir.join("timings.jsonl"), &timings)?;
            agent.save(&dir.join("checkpoint.txt"))?;
        }
        Mode::Evaluate => {
            let path = config.eval.checkpoint.as_ref().expect("validated");
            let agent = Agent::load(path)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eps = evaluate_greedy(&agent, env, task, &mut rng)?;
            let tuples: Vec<_> = eps.iter().map(episode_tuple).collect();
            write_round(dir, 0, &tuples, env, &mut record)?;
            let rec = EvalRecord::new(&eps, None);
            write_file(&dir.join("metrics.jsonl"), &json_line(&rec))?;
        }
        Mode::Baseline => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tuples = Vec::new();
            let mut calls = 0;
            let mut lines = String::new();
            for bag in task.evaluation_bags() {
                let r = run_opt_agent(&task.initial, &bag, &env.oracle, env.table, &config.opt, &mut rng)?;
                calls += r.oracle_calls();
                lines.push_str(&json_line(&BaselineRecord {
                    bag: bag.display(env.table).to_string(),
                    total_return: r.total_return,
                    energy: r.energy,
                    oracle_calls: r.oracle_calls(),
                    rejections: r.rejections,
                    status: r.status,
                }));
                tuples.push((r.canvas, r.energy, r.total_return));
            }
            write_round(dir, 0, &tuples, env, &mut record)?;
            write_file(&dir.join("metrics.jsonl"), &lines)?;
            record.oracle_calls = Some(calls);
        }
    }
    write_file(&dir.join("record.json"), &json_line(&record))?;
    Ok(record)
}

#[derive(Debug, Clone, Serialize)]
struct EvalRecord {
    mean_offline_return: f64,
    returns: Vec<f64>,
    violations: usize,
    oracle_calls: Option<u64>,
}

impl EvalRecord {
    fn new(eps: &[Episode], oracle_calls: Option<u64>) -> Self {
        let returns: Vec<f64> = eps.iter().map(|e| e.total_return).collect();
        EvalRecord {
            mean_offline_return: returns.iter().sum::<f64>() / returns.len().max(1) as f64,
            violations: eps.iter().filter(|e| e.violated).count(),
            returns,
            oracle_calls,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct BaselineRecord {
    bag: String,
    total_return: f64,
    energy: f64,
    oracle_calls: u64,
    rejections: usize,
    status: crate::opt::OptStatus,
}

fn with_oracle<T>(kind: OracleKind, env: EnvConfig, f: &mut dyn FnMut(&dyn DynEnv) -> Result<T>) -> Result<T> {
    match kind {
        OracleKind::Morse => f(&Environment::new(MorsePotential::builtin(), env)),
        OracleKind::Counting => f(&Environment::new(CountingOracle, env)),
    }
}

/// Object-safe view of an environment with some oracle.
trait DynEnv {
    fn run_seed(&self, config: &ExperimentConfig, task: &TaskSpec, seed: u64, dir: &Path) -> Result<RunRecord>;
    fn summarize(&self, dir: &Path, eval: &EvalSection) -> Result<Summary>;
}

impl<O: EnergyOracle> DynEnv for Environment<O> {
    fn run_seed(&self, config: &ExperimentConfig, task: &TaskSpec, seed: u64, dir: &Path) -> Result<RunRecord> {
        run_seed(config, self, task, seed, dir)
    }

    fn summarize(&self, dir: &Path, eval: &EvalSection) -> Result<Summary> {
        summarize_dir(dir, &self.oracle, self.table, eval)
    }
}

/// Run every seed of `config` into `out_dir/seed_<n>` and write the summary.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<Summary> {
    config.validate()?;
    let table = ElementTable::builtin();
    let task = config.task_spec(table)?;
    create_dir(out_dir)?;
    write_file(
        &out_dir.join("config.toml"),
        &toml::to_string(config).map_err(|e| Error::InvalidState(e.to_string()))?,
    )?;
    with_oracle(config.oracle.kind, config.env.to_config(), &mut |env| {
        for &seed in &config.experiment.seeds {
            env.run_seed(config, &task, seed, &out_dir.join(format!("seed_{seed}")))?;
        }
        let summary = env.summarize(out_dir, &config.eval)?;
        write_file(&out_dir.join("summary.json"), &json_line(&summary))?;
        write_file(&out_dir.join("summary.txt"), &summary.table())?;
        Ok(summary)
    })
}

/// Summary of an output directory, using the oracle named in its config.
pub fn summarize(out_dir: &Path) -> Result<Summary> {
    let config = ExperimentConfig::load(&out_dir.join("config.toml"))?;
    with_oracle(config.oracle.kind, config.env.to_config(), &mut |env| env.summarize(out_dir, &config.eval))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Recompute validity, diversity and stability from every
/// `seed_*/structures/*.xyz` below `out_dir`.
pub fn summarize_dir<O: EnergyOracle + ?Sized>(
    out_dir: &Path,
    oracle: &O,
    table: &ElementTable,
    eval: &EvalSection,
) -> Result<Summary> {
    let mut seeds = 0;
    let mut all_hashes = BTreeSet::new();
    let mut final_hashes = BTreeSet::new();
    let mut final_count = 0;
    let mut valid_final = 0;
    let mut rmsds = Vec::new();
    let mut returns = Vec::new();
    for seed_dir in sorted_entries(out_dir)? {
        let is_seed = seed_dir.is_dir()
            && seed_dir
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("seed_"));
        if !is_seed {
            continue;
        }
        seeds += 1;
        let files: Vec<PathBuf> = sorted_entries(&seed_dir.join("structures"))?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "xyz"))
            .collect();
        let round_of = |p: &Path| -> String {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            name.split("_bag_").next().unwrap_or_default().to_string()
        };
        let last_round = files.iter().map(|p| round_of(p)).max();
        for path in &files {
            let rec = read_xyz(path, table)?;
            let graph = perceive_graph(&rec.canvas, table, eval.bond_factor);
            let valid = graph.is_valid(table);
            let hash = valid.then(|| canonical_hash(&graph, table));
            if let Some(h) = &hash {
                all_hashes.insert(h.clone());
            }
            if Some(round_of(path)) == last_round {
                final_count += 1;
                if let Some(r) = rec.total_return {
                    returns.push(r);
                }
                if let Some(h) = hash {
                    valid_final += 1;
                    final_hashes.insert(h);
                    rmsds.push(stability_metric(&rec.canvas, oracle, &eval.relax_config())?);
                }
            }
        }
    }
    rmsds.sort_by(f64::total_cmp);
    let median_rmsd = match rmsds.len() {
        0 => None,
        n if n % 2 == 1 => Some(rmsds[n / 2]),
        n => Some(0.5 * (rmsds[n / 2 - 1] + rmsds[n / 2])),
    };
    Ok(Summary {
        seeds,
        final_structures: final_count,
        validity: if final_count == 0 { 0.0 } else { valid_final as f64 / final_count as f64 },
        diversity: all_hashes.len(),
        diversity_final: final_hashes.len(),
        median_rmsd,
        mean_final_return: (!returns.is_empty()).then(|| returns.iter().sum::<f64>() / returns.len() as f64),
    })
}

/// Parse the metric log of a training run.
pub fn read_metrics(path: &Path) -> Result<Vec<IterationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(&path.display().to_string(), i + 1, e.to_string())))
        .collect()
}
