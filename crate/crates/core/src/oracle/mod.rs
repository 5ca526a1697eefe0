//! Energy and force backends.
//!
//! [`MorsePotential`] is a smooth pair potential with analytic forces,
//! [`CountingOracle`] a piecewise-constant bond counter for hand-checkable
//! tests. Both use zero isolated-atom energies, so the return of a finished
//! episode is `-E(final canvas)`.

mod elements;
mod relax;

pub use elements::{Element, ElementInfo, ElementTable, PairParams};
pub use relax::{relax, RelaxConfig, RelaxResult};

use std::sync::atomic::{AtomicU64, Ordering};

use crate::env::Canvas;
use crate::error::Result;
use crate::Vec3;

/// Energy backend.
pub trait EnergyOracle: Send + Sync {
    /// Total energy of the canvas.
    fn energy(&self, canvas: &Canvas) -> f64;
    /// `-∇E` for every atom.
    fn forces(&self, canvas: &Canvas) -> Vec<Vec3>;
    /// Reference energy of an isolated atom.
    fn atom_energy(&self, _element: Element) -> f64 {
        0.0
    }
}

/// `E = Σ_{i<j} D_e [(1 - e^{-a (r - r0)})² - 1]`.
#[derive(Debug, Clone)]
pub struct MorsePotential {
    n: usize,
    pairs: Vec<PairParams>,
}

impl MorsePotential {
    /// Fails if any element pair lacks parameters.
    pub fn new(table: &ElementTable) -> Result<Self> {
        let mut pairs = Vec::with_capacity(table.len() * table.len());
        for a in table.elements() {
            for b in table.elements() {
                pairs.push(table.pair(a, b)?);
            }
        }
        Ok(MorsePotential {
            n: table.len(),
            pairs,
        })
    }

    /// Morse potential over the built-in element table.
    pub fn builtin() -> Self {
        MorsePotential::new(ElementTable::builtin()).expect("builtin table is complete")
    }

    fn params(&self, a: Element, b: Element) -> &PairParams {
        &self.pairs[a.index() * self.n + b.index()]
    }

    /// Pair energy and its radial derivative.
    fn pair_terms(p: &PairParams, r: f64) -> (f64, f64) {
        let e = (-p.a * (r - p.r0)).exp();
        let one_minus = 1.0 - e;
        (
            p.de * (one_minus * one_minus - 1.0),
            2.0 * p.de * p.a * one_minus * e,
        )
    }
}

impl EnergyOracle for MorsePotential {
    fn energy(&self, canvas: &Canvas) -> f64 {
        let atoms = canvas.atoms();
        let mut total = 0.0;
        for i in 0..atoms.len() {
            for j in (i + 1)..atoms.len() {
                let r = (atoms[i].position - atoms[j].position).norm();
                total += Self::pair_terms(self.params(atoms[i].element, atoms[j].element), r).0;
            }
        }
        total
    }

    fn forces(&self, canvas: &Canvas) -> Vec<Vec3> {
        let atoms = canvas.atoms();
        let mut f = vec![Vec3::zeros(); atoms.len()];
        for i in 0..atoms.len() {
            for j in (i + 1)..atoms.len() {
                let d = atoms[i].position - atoms[j].position;
                let r = d.norm();
                let (_, de_dr) = Self::pair_terms(self.params(atoms[i].element, atoms[j].element), r);
                let fij = d * (-de_dr / r);
                f[i] += fij;
                f[j] -= fij;
            }
        }
        f
    }
}

/// `E = -#{pairs with 0.8 Å <= r <= 1.6 Å}`; forces are zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct CountingOracle;

impl CountingOracle {
    pub const LOWER: f64 = 0.8;
    pub const UPPER: f64 = 1.6;
}

impl EnergyOracle for CountingOracle {
    fn energy(&self, canvas: &Canvas) -> f64 {
        let atoms = canvas.atoms();
        let mut count = 0usize;
        for i in 0..atoms.len() {
            for j in (i + 1)..atoms.len() {
                let r = (atoms[i].position - atoms[j].position).norm();
                if (Self::LOWER..=Self::UPPER).contains(&r) {
                    count += 1;
                }
            }
        }
        -(count as f64)
    }

    fn forces(&self, canvas: &Canvas) -> Vec<Vec3> {
        vec![Vec3::zeros(); canvas.len()]
    }
}

/// Wraps an oracle and counts every energy and force evaluation.
#[derive(Debug)]
pub struct CallCounter<O> {
    inner: O,
    energy_calls: AtomicU64,
    force_calls: AtomicU64,
}

impl<O: EnergyOracle> CallCounter<O> {
    pub fn new(inner: O) -> Self {
        CallCounter {
            inner,
            energy_calls: AtomicU64::new(0),
            force_calls: AtomicU64::new(0),
        }
    }

    pub fn energy_calls(&self) -> u64 {
        self.energy_calls.load(Ordering::Relaxed)
    }

    pub fn force_calls(&self) -> u64 {
        self.force_calls.load(Ordering::Relaxed)
    }

    pub fn total_calls(&self) -> u64 {
        self.energy_calls() + self.force_calls()
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }
}

impl<O: EnergyOracle> EnergyOracle for CallCounter<O> {
    fn energy(&self, canvas: &Canvas) -> f64 {
        self.energy_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.energy(canvas)
    }

    fn forces(&self, canvas: &Canvas) -> Vec<Vec3> {
        self.force_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.forces(canvas)
    }

    fn atom_energy(&self, element: Element) -> f64 {
        self.inner.atom_energy(element)
    }
}

impl<O: EnergyOracle + ?Sized> EnergyOracle for &O {
    fn energy(&self, canvas: &Canvas) -> f64 {
        (**self).energy(canvas)
    }
    fn forces(&self, canvas: &Canvas) -> Vec<Vec3> {
        (**self).forces(canvas)
    }
    fn atom_energy(&self, element: Element) -> f64 {
        (**self).atom_energy(element)
    }
}

impl<O: EnergyOracle + ?Sized> EnergyOracle for Box<O> {
    fn energy(&self, canvas: &Canvas) -> f64 {
        (**self).energy(canvas)
    }
    fn forces(&self, canvas: &Canvas) -> Vec<Vec3> {
        (**self).forces(canvas)
    }
    fn atom_energy(&self, element: Element) -> f64 {
        (**self).atom_energy(element)
    }
}
