//! Sequential molecule-building decision process.
//!
//! A state is a canvas of placed atoms plus a bag of atoms still to place.
//! Each action removes one atom from the bag and puts it on the canvas. The
//! reward is the negative energy change, floored, and a placement that is
//! too close to or too far from the existing atoms ends the episode.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::Matrix3;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::oracle::{Element, ElementTable, EnergyOracle};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub element: Element,
    /// Position in Å.
    pub position: Vec3,
}

impl Atom {
    pub fn new(element: Element, position: Vec3) -> Self {
        Atom { element, position }
    }
}

/// Ordered list of placed atoms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Canvas {
    atoms: Vec<Atom>,
}

impl Canvas {
    pub fn new() -> Self {
        Canvas::default()
    }

    pub fn from_atoms(atoms: Vec<Atom>) -> Self {
        Canvas { atoms }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn atoms_mut(&mut self) -> &mut [Atom] {
        &mut self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn push(&mut self, atom: Atom) {
        self.atoms.push(atom);
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.atoms.iter().map(|a| a.position).collect()
    }

    /// Smallest distance from `p` to any atom, `None` on an empty canvas.
    pub fn min_distance_to(&self, p: &Vec3) -> Option<f64> {
        self.atoms
            .iter()
            .map(|a| (a.position - p).norm())
            .reduce(f64::min)
    }

    /// `x ↦ R x + t` applied to every atom.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vec3) -> Canvas {
        Canvas {
            atoms: self
                .atoms
                .iter()
                .map(|a| Atom::new(a.element, rotation * a.position + translation))
                .collect(),
        }
    }

    /// Element multiset of the canvas.
    pub fn formula(&self) -> Bag {
        let mut bag = Bag::new();
        for a in &self.atoms {
            bag.add(a.element, 1);
        }
        bag
    }
}

/// Multiset of elements.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Bag {
    counts: BTreeMap<Element, u32>,
}

impl Bag {
    pub fn new() -> Self {
        Bag::default()
    }

    pub fn from_counts(counts: impl IntoIterator<Item = (Element, u32)>) -> Self {
        let mut bag = Bag::new();
        for (e, n) in counts {
            bag.add(e, n);
        }
        bag
    }

    /// Parse a formula such as `SOF4` or `H2O`.
    pub fn parse(formula: &str, table: &ElementTable) -> Result<Self> {
        let mut bag = Bag::new();
        let chars: Vec<char> = formula.trim().chars().collect();
        let mut i = 0;
        if chars.is_empty() {
            return Err(Error::InvalidArgument("empty formula".into()));
        }
        while i < chars.len() {
            if !chars[i].is_ascii_uppercase() {
                return Err(Error::InvalidArgument(format!(
                    "formula `{formula}`: expected an element symbol at position {i}"
                )));
            }
            let mut sym = chars[i].to_string();
            i += 1;
            while i < chars.len() && chars[i].is_ascii_lowercase() {
                sym.push(chars[i]);
                i += 1;
            }
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let n: u32 = if start == i {
                1
            } else {
                chars[start..i].iter().collect::<String>().parse().map_err(|_| {
                    Error::InvalidArgument(format!("formula `{formula}`: bad count"))
                })?
            };
            bag.add(table.lookup(&sym)?, n);
        }
        Ok(bag)
    }

    pub fn add(&mut self, e: Element, n: u32) {
        if n > 0 {
            *self.counts.entry(e).or_insert(0) += n;
        }
    }

    pub fn count(&self, e: Element) -> u32 {
        self.counts.get(&e).copied().unwrap_or(0)
    }

    /// Remove one `e`; errors if none is left.
    pub fn take(&mut self, e: Element) -> Result<()> {
        match self.counts.get_mut(&e) {
            Some(n) if *n > 0 => {
                *n -= 1;
                if *n == 0 {
                    self.counts.remove(&e);
                }
                Ok(())
            }
            _ => Err(Error::InvalidAction(format!("element {} not in bag", e.0))),
        }
    }

    pub fn total(&self) -> u32 {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Present elements with their multiplicities, ascending by element.
    pub fn iter(&self) -> impl Iterator<Item = (Element, u32)> + '_ {
        self.counts.iter().map(|(e, n)| (*e, *n))
    }

    /// Σ multiplicity × valence electrons.
    pub fn electrons(&self, table: &ElementTable) -> u32 {
        self.iter().map(|(e, n)| n * table.info(e).electrons).sum()
    }

    /// Counts indexed by element, length `n_elements`.
    pub fn to_vector(&self, n_elements: usize) -> Vec<f64> {
        let mut v = vec![0.0; n_elements];
        for (e, n) in self.iter() {
            v[e.index()] = n as f64;
        }
        v
    }

    /// Formula string in ascending element order.
    pub fn display<'a>(&'a self, table: &'a ElementTable) -> impl fmt::Display + 'a {
        struct D<'a>(&'a Bag, &'a ElementTable);
        impl fmt::Display for D<'_> {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                for (e, n) in self.0.iter() {
                    write!(f, "{}", self.1.symbol(e))?;
                    if n != 1 {
                        write!(f, "{n}")?;
                    }
                }
                Ok(())
            }
        }
        D(self, table)
    }
}

/// Canvas, bag and step counter. `energy` caches `E(canvas)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub canvas: Canvas,
    pub bag: Bag,
    pub step_index: usize,
    pub energy: f64,
    /// Hard cap on the number of steps in this episode.
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvAction {
    pub element: Element,
    pub position: Vec3,
}

/// Safety rule that ended an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    TooClose,
    TooFar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
    pub violation: Option<Violation>,
    /// Ended by the horizon cap rather than an empty bag or a violation.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    SingleBag(Bag),
    /// Uniform choice among the listed bags.
    MultiBag(Vec<Bag>),
    /// Multinomial bags around a reference composition.
    StochasticBag {
        reference: Bag,
        zeta_min: u32,
        zeta_max: u32,
    },
    /// Fixed bag placed around the task's seed canvas.
    Solvation(Bag),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub initial: Canvas,
    /// Distance penalty per Å from the origin; used by solvation tasks.
    pub rho: f64,
}

impl TaskSpec {
    pub fn single_bag(bag: Bag) -> Self {
        TaskSpec {
            kind: TaskKind::SingleBag(bag),
            initial: Canvas::new(),
            rho: 0.0,
        }
    }

    /// Five water molecules around `seed`, `ρ = 0.01`.
    pub fn solvation(seed: Canvas, table: &ElementTable) -> Result<Self> {
        Ok(TaskSpec {
            kind: TaskKind::Solvation(Bag::parse("H10O5", table)?),
            initial: seed,
            rho: 0.01,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) {
            return Err(Error::InvalidArgument(format!("rho {} must be >= 0", self.rho)));
        }
        match &self.kind {
            TaskKind::SingleBag(b) | TaskKind::Solvation(b) if b.is_empty() => {
                Err(Error::InvalidArgument("bag is empty".into()))
            }
            TaskKind::MultiBag(bags) if bags.is_empty() || bags.iter().any(Bag::is_empty) => {
                Err(Error::InvalidArgument("multi-bag task needs non-empty bags".into()))
            }
            TaskKind::StochasticBag { reference, zeta_min, zeta_max } => {
                if reference.is_empty() {
                    Err(Error::InvalidArgument("reference bag is empty".into()))
                } else if zeta_min > zeta_max || *zeta_min == 0 {
                    Err(Error::InvalidArgument(format!(
                        "need 0 < zeta_min <= zeta_max, got {zeta_min}..{zeta_max}"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Bags used for offline evaluation: the fixed bag(s) of the task, or the
    /// reference composition for stochastic tasks.
    pub fn evaluation_bags(&self) -> Vec<Bag> {
        match &self.kind {
            TaskKind::SingleBag(b) | TaskKind::Solvation(b) => vec![b.clone()],
            TaskKind::MultiBag(bags) => bags.clone(),
            TaskKind::StochasticBag { reference, .. } => vec![reference.clone()],
        }
    }
}

/// Limits of the decision process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvConfig {
    /// Lowest possible step reward.
    pub reward_floor: f64,
    pub min_distance: f64,
    pub max_distance: f64,
    /// Episode cap as a multiple of the initial bag size.
    pub horizon_factor: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            reward_floor: -0.6,
            min_distance: 0.6,
            max_distance: 2.0,
            horizon_factor: 20,
        }
    }
}

/// `base - ρ‖x‖`.
pub fn solvation_reward(base: f64, position: &Vec3, rho: f64) -> f64 {
    base - rho * position.norm()
}

/// Return of an episode ending in `canvas`: `Σ E_atom - E(canvas)`.
pub fn optimal_return<O: EnergyOracle + ?Sized>(oracle: &O, canvas: &Canvas) -> f64 {
    let refs: f64 = canvas.atoms().iter().map(|a| oracle.atom_energy(a.element)).sum();
    refs - oracle.energy(canvas)
}

/// Multinomial bag of size `ζ ~ U{ζ_min..=ζ_max}` with probabilities
/// proportional to `reference`, redrawn until the valence electron count is
/// even.
pub fn sample_bag<R: Rng + ?Sized>(
    reference: &Bag,
    zeta_min: u32,
    zeta_max: u32,
    table: &ElementTable,
    rng: &mut R,
) -> Result<Bag> {
    if reference.is_empty() || zeta_min > zeta_max {
        return Err(Error::InvalidArgument("bad stochastic-bag parameters".into()));
    }
    let (elements, weights): (Vec<Element>, Vec<u32>) = reference.iter().unzip();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidArgument(format!("bag weights: {e}")))?;
    for _ in 0..10_000 {
        let zeta = rng.random_range(zeta_min..=zeta_max);
        let mut bag = Bag::new();
        for _ in 0..zeta {
            bag.add(elements[dist.sample(rng)], 1);
        }
        if bag.electrons(table) % 2 == 0 {
            return Ok(bag);
        }
    }
    Err(Error::SamplingFailure(
        "no bag with an even electron count after 10000 draws".into(),
    ))
}

/// The decision process bound to an oracle.
pub struct Environment<O> {
    pub oracle: O,
    pub config: EnvConfig,
    pub table: &'static ElementTable,
}

impl<O: EnergyOracle> Environment<O> {
    pub fn new(oracle: O, config: EnvConfig) -> Self {
        Environment {
            oracle,
            config,
            table: ElementTable::builtin(),
        }
    }

    /// Draw an initial state for `task`.
    pub fn reset<R: Rng + ?Sized>(&self, task: &TaskSpec, rng: &mut R) -> Result<EnvState> {
        task.validate()?;
        let bag = match &task.kind {
            TaskKind::SingleBag(b) | TaskKind::Solvation(b) => b.clone(),
            TaskKind::MultiBag(bags) => bags[rng.random_range(0..bags.len())].clone(),
            TaskKind::StochasticBag { reference, zeta_min, zeta_max } => {
                sample_bag(reference, *zeta_min, *zeta_max, self.table, rng)?
            }
        };
        Ok(self.state_for(task.initial.clone(), bag))
    }

    /// Fresh state with the given canvas and bag.
    pub fn state_for(&self, canvas: Canvas, bag: Bag) -> EnvState {
        let energy = if canvas.is_empty() { 0.0 } else { self.oracle.energy(&canvas) };
        let horizon = self.config.horizon_factor * bag.total() as usize;
        EnvState {
            canvas,
            bag,
            step_index: 0,
            energy,
            horizon,
        }
    }

    /// Apply `action`. `rho` is the task's distance penalty.
    pub fn step(&self, state: &EnvState, action: &EnvAction, rho: f64) -> Result<StepOutcome> {
        if state.bag.count(action.element) == 0 {
            return Err(Error::InvalidAction(format!(
                "element {} is not in the bag",
                self.table.symbol(action.element)
            )));
        }
        let position = if state.canvas.is_empty() {
            Vec3::zeros()
        } else {
            action.position
        };
        let floor = self.config.reward_floor;
        if let Some(d) = state.canvas.min_distance_to(&position) {
            let violation = if d < self.config.min_distance {
                Some(Violation::TooClose)
            } else if d > self.config.max_distance {
                Some(Violation::TooFar)
            } else {
                None
            };
            if violation.is_some() {
                return Ok(StepOutcome {
                    state: state.clone(),
                    reward: floor,
                    done: true,
                    violation,
                    truncated: false,
                });
            }
        }
        let mut next = state.clone();
        next.bag.take(action.element)?;
        next.canvas.push(Atom::new(action.element, position));
        next.step_index += 1;
        next.energy = self.oracle.energy(&next.canvas);
        let delta = next.energy - state.energy - self.oracle.atom_energy(action.element);
        let reward = solvation_reward(-delta, &position, rho).max(floor);
        let emptied = next.bag.is_empty();
        let truncated = !emptied && next.step_index >= next.horizon;
        Ok(StepOutcome {
            state: next,
            reward,
            done: emptied || truncated,
            violation: None,
            truncated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{CountingOracle, MorsePotential};
    use crate::so3::random_rotation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table() -> &'static ElementTable {
        ElementTable::builtin()
    }

    fn x() -> Element {
        table().lookup("X").unwrap()
    }

    fn act(e: Element, p: Vec3) -> EnvAction {
        EnvAction { element: e, position: p }
    }

    #[test]
    fn single_bag_reset() {
        let env = Environment::new(MorsePotential::builtin(), EnvConfig::default());
        let bag = Bag::parse("SOF4", table()).unwrap();
        let task = TaskSpec::single_bag(bag.clone());
        let s = env.reset(&task, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(s.canvas.is_empty());
        assert_eq!(s.bag.count(table().lookup("S").unwrap()), 1);
        assert_eq!(s.bag.count(table().lookup("O").unwrap()), 1);
        assert_eq!(s.bag.count(table().lookup("F").unwrap()), 4);
        assert_eq!(s.horizon, 120);
        assert_eq!(bag.display(table()).to_string(), "OF4S");
    }

    #[test]
    fn solvation_reset_uses_seed() {
        let env = Environment::new(MorsePotential::builtin(), EnvConfig::default());
        let o = table().lookup("O").unwrap();
        let seed = Canvas::from_atoms(vec![Atom::new(o, Vec3::zeros())]);
        let task = TaskSpec::solvation(seed.clone(), table()).unwrap();
        let s = env.reset(&task, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.canvas, seed);
        assert_eq!(s.bag.count(table().lookup("H").unwrap()), 10);
        assert_eq!(s.bag.count(o), 5);
    }

    #[test]
    fn counting_rewards_and_rules() {
        let env = Environment::new(CountingOracle, EnvConfig::default());
        let s0 = env.state_for(Canvas::new(), Bag::from_counts([(x(), 3)]));
        let first = env.step(&s0, &act(x(), Vec3::new(5.0, 5.0, 5.0)), 0.0).unwrap();
        assert_eq!(first.state.canvas.atoms()[0].position, Vec3::zeros());
        assert_eq!(first.reward, 0.0);
        let second = env.step(&first.state, &act(x(), Vec3::new(1.0, 0.0, 0.0)), 0.0).unwrap();
        assert_eq!(second.reward, 1.0);
        assert!(!second.done);
        let close = env.step(&first.state, &act(x(), Vec3::new(0.5, 0.0, 0.0)), 0.0).unwrap();
        assert_eq!((close.reward, close.done, close.violation), (-0.6, true, Some(Violation::TooClose)));
        assert_eq!(close.state.canvas.len(), 1);
    }

    #[test]
    fn boundaries_are_inclusive() {
        let env = Environment::new(CountingOracle, EnvConfig::default());
        let s = env.state_for(Canvas::from_atoms(vec![Atom::new(x(), Vec3::zeros())]), Bag::from_counts([(x(), 2)]));
        let at = |d: f64| env.step(&s, &act(x(), Vec3::new(d, 0.0, 0.0)), 0.0).unwrap().violation;
        assert_eq!(at(0.6), None);
        assert_eq!(at(0.6 - 1e-12), Some(Violation::TooClose));
        assert_eq!(at(2.0), None);
        assert_eq!(at(2.0 + 1e-12), Some(Violation::TooFar));
    }

    #[test]
    fn missing_element_is_invalid_action() {
        let env = Environment::new(CountingOracle, EnvConfig::default());
        let s = env.state_for(Canvas::new(), Bag::from_counts([(x(), 1)]));
        let h = table().lookup("H").unwrap();
        assert!(matches!(env.step(&s, &act(h, Vec3::zeros()), 0.0), Err(Error::InvalidAction(_))));
    }

    #[test]
    fn rewards_telescope_and_are_rotation_invariant() {
        let env = Environment::new(MorsePotential::builtin(), EnvConfig { reward_floor: f64::NEG_INFINITY, ..EnvConfig::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let positions = [
            Vec3::zeros(),
            Vec3::new(1.1, 0.0, 0.0),
            Vec3::new(0.4, 0.95, 0.1),
            Vec3::new(0.5, 0.3, 0.9),
        ];
        for _ in 0..10 {
            let r = random_rotation(&mut rng);
            let run = |rot: &Matrix3<f64>| {
                let mut s = env.state_for(Canvas::new(), Bag::from_counts([(x(), 4)]));
                let mut rewards = Vec::new();
                for p in &positions {
                    let out = env.step(&s, &act(x(), rot * p), 0.0).unwrap();
                    rewards.push(out.reward);
                    s = out.state;
                }
                (rewards, s)
            };
            let (a, s) = run(&Matrix3::identity());
            let (b, _) = run(&r);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-10);
            }
            let total: f64 = a.iter().sum();
            assert!((total - optimal_return(&env.oracle, &s.canvas)).abs() < 1e-10);
            assert_eq!(s.canvas.len() + s.bag.total() as usize, 4);
        }
    }

    #[test]
    fn stochastic_bags() {
        let h = table().lookup("H").unwrap();
        let o = table().lookup("O").unwrap();
        let reference = Bag::from_counts([(h, 2), (o, 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let b = sample_bag(&reference, 3, 3, table(), &mut rng).unwrap();
            assert_eq!(b.total(), 3);
            assert_eq!(b.electrons(table()) % 2, 0);
        }
        let single = Bag::from_counts([(h, 1)]);
        assert!(sample_bag(&single, 3, 3, table(), &mut rng).is_err());
    }

    #[test]
    fn solvation_penalty() {
        let p = Vec3::new(2.0, 0.0, 0.0);
        assert_eq!(solvation_reward(0.3, &p, 0.0), 0.3);
        assert!((solvation_reward(0.3, &p, 0.01) - 0.28).abs() < 1e-15);
        assert_eq!(solvation_reward(0.3, &Vec3::zeros(), 0.01), 0.3);
    }

    #[test]
    fn optimal_return_values() {
        let m = MorsePotential::builtin();
        assert_eq!(optimal_return(&m, &Canvas::from_atoms(vec![Atom::new(x(), Vec3::zeros())])), 0.0);
        let dimer = Canvas::from_atoms(vec![Atom::new(x(), Vec3::zeros()), Atom::new(x(), Vec3::new(1.0, 0.0, 0.0))]);
        assert!((optimal_return(&m, &dimer) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn formula_parsing() {
        let b = Bag::parse("C2H6O", table()).unwrap();
        assert_eq!(b.total(), 9);
        assert!(Bag::parse("c2", table()).is_err());
        assert!(Bag::parse("Qq", table()).is_err());
    }
}
