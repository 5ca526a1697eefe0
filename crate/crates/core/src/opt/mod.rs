//! Classical build-and-relax baseline.
//!
//! Atoms are placed one at a time next to a random available atom, relaxed
//! alone, kept only if the energy drops, and then the whole structure is
//! relaxed. Every oracle call is counted against a budget.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Atom, Bag, Canvas};
use crate::error::{Error, Result};
use crate::oracle::{relax, CallCounter, Element, ElementTable, EnergyOracle, RelaxConfig};
use crate::so3::random_unit;
use crate::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptConfig {
    /// Distance of a new atom from its focal atom, Å.
    pub placement_radius: f64,
    /// Atoms closer than this are neighbors, Å.
    pub neighbor_cutoff: f64,
    /// Largest force accepted as converged during relaxation.
    pub relax_tolerance: f64,
    pub relax_max_iter: usize,
    /// Consecutive rejected placements before the run gives up.
    pub max_rejections: usize,
    /// Oracle calls (energies plus forces) allowed per run.
    pub budget: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            placement_radius: 1.1,
            neighbor_cutoff: 1.5,
            relax_tolerance: 1e-6,
            relax_max_iter: 10_000,
            max_rejections: 50,
            budget: 1_000_000,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("placement_radius", self.placement_radius > 0.0),
            ("neighbor_cutoff", self.neighbor_cutoff > 0.0),
            ("relax_tolerance", self.relax_tolerance > 0.0),
            ("relax_max_iter", self.relax_max_iter > 0),
            ("max_rejections", self.max_rejections > 0),
            ("budget", self.budget > 0),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((key, _)) => Err(Error::Config {
                key: format!("opt.{key}"),
                message: "must be positive".into(),
            }),
            None => Ok(()),
        }
    }

    fn relax_config(&self) -> RelaxConfig {
        RelaxConfig {
            tol: self.relax_tolerance,
            max_iter: self.relax_max_iter,
            ..RelaxConfig::default()
        }
    }
}

/// How a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptStatus {
    Complete,
    BudgetExhausted,
    TooManyRejections,
}

#[derive(Debug, Clone)]
pub struct OptResult {
    pub canvas: Canvas,
    /// Path-independent return of the final canvas.
    pub total_return: f64,
    pub energy: f64,
    pub energy_calls: u64,
    pub force_calls: u64,
    pub rejections: usize,
    pub status: OptStatus,
}

impl OptResult {
    pub fn oracle_calls(&self) -> u64 {
        self.energy_calls + self.force_calls
    }
}

/// Atoms with fewer neighbors than their element's largest valence, or all
/// atoms when none qualifies.
pub fn available_atoms(canvas: &Canvas, table: &ElementTable, config: &OptConfig) -> Vec<usize> {
    let atoms = canvas.atoms();
    let open: Vec<usize> = (0..atoms.len())
        .filter(|&i| {
            let neighbors = atoms
                .iter()
                .enumerate()
                .filter(|&(j, a)| j != i && (a.position - atoms[i].position).norm() < config.neighbor_cutoff)
                .count();
            (neighbors as u32) < table.info(atoms[i].element).max_valence()
        })
        .collect();
    if open.is_empty() {
        (0..atoms.len()).collect()
    } else {
        open
    }
}

fn random_element<R: Rng + ?Sized>(bag: &Bag, rng: &mut R) -> Element {
    // uniform over the atoms left in the bag
    let mut k = rng.random_range(0..bag.total());
    for (e, n) in bag.iter() {
        if k < n {
            return e;
        }
        k -= n;
    }
    unreachable!("bag is non-empty")
}

/// Build a structure from `bag` on top of `initial`.
pub fn run_opt_agent<O: EnergyOracle, R: Rng + ?Sized>(
    initial: &Canvas,
    bag: &Bag,
    oracle: &O,
    table: &ElementTable,
    config: &OptConfig,
    rng: &mut R,
) -> Result<OptResult> {
    config.validate()?;
    let counter = CallCounter::new(oracle);
    let relax_cfg = config.relax_config();
    let mut canvas = initial.clone();
    let mut bag = bag.clone();
    let mut energy = if canvas.is_empty() { 0.0 } else { counter.energy(&canvas) };
    let mut rejections = 0;
    let mut streak = 0;
    let mut status = OptStatus::Complete;
    while !bag.is_empty() {
        if counter.total_calls() >= config.budget {
            status = OptStatus::BudgetExhausted;
            break;
        }
        let element = random_element(&bag, rng);
        let (trial, trial_energy) = if canvas.is_empty() {
            let mut c = canvas.clone();
            c.push(Atom::new(element, Vec3::zeros()));
            let e = counter.energy(&c);
            (c, e)
        } else {
            let open = available_atoms(&canvas, table, config);
            let f = *open.choose(rng).expect("canvas is non-empty");
            let mut c = canvas.clone();
            c.push(Atom::new(element, canvas.atoms()[f].position + random_unit(rng) * config.placement_radius));
            let r = relax(&counter, &c, &[c.len() - 1], &relax_cfg)?;
            (r.canvas, r.energy)
        };
        let delta = trial_energy - (energy + counter.atom_energy(element));
        if delta > 0.0 {
            rejections += 1;
            streak += 1;
            if streak >= config.max_rejections {
                status = OptStatus::TooManyRejections;
                break;
            }
            continue;
        }
        streak = 0;
        bag.take(element)?;
        let all: Vec<usize> = (0..trial.len()).collect();
        let full = relax(&counter, &trial, &all, &relax_cfg)?;
        canvas = full.canvas;
        energy = full.energy;
    }
    let refs: f64 = canvas.atoms().iter().map(|a| oracle.atom_energy(a.element)).sum();
    let total_return = refs - energy;
    Ok(OptResult {
        energy,
        total_return,
        canvas,
        energy_calls: counter.energy_calls(),
        force_calls: counter.force_calls(),
        rejections,
        status,
    })
}
