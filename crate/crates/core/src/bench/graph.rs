//! Bond perception, valence checks and graph hashing.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::env::Canvas;
use crate::oracle::{Element, ElementTable};

/// Undirected simple graph over the atoms of a canvas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MolecularGraph {
    pub elements: Vec<Element>,
    /// Sorted neighbor lists.
    pub adjacency: Vec<Vec<usize>>,
}

impl MolecularGraph {
    /// Graph from an edge list; duplicate edges and self-loops are dropped.
    pub fn from_edges(elements: Vec<Element>, edges: &[(usize, usize)]) -> Self {
        let mut adjacency = vec![Vec::new(); elements.len()];
        for &(a, b) in edges {
            if a != b && !adjacency[a].contains(&b) {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
        for n in &mut adjacency {
            n.sort_unstable();
        }
        MolecularGraph { elements, adjacency }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, ns) in self.adjacency.iter().enumerate() {
            out.extend(ns.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        if self.elements.is_empty() {
            return false;
        }
        let mut seen = vec![false; self.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &self.adjacency[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Connected, and every degree is an allowed valence of its element.
    pub fn is_valid(&self, table: &ElementTable) -> bool {
        self.is_connected()
            && (0..self.len()).all(|i| table.info(self.elements[i]).valences.contains(&(self.degree(i) as u32)))
    }
}

/// Bond every pair closer than `factor` times the sum of covalent radii.
pub fn perceive_graph(canvas: &Canvas, table: &ElementTable, factor: f64) -> MolecularGraph {
    let atoms = canvas.atoms();
    let mut edges = Vec::new();
    for i in 0..atoms.len() {
        for j in (i + 1)..atoms.len() {
            let limit = factor * (table.info(atoms[i].element).radius + table.info(atoms[j].element).radius);
            if (atoms[i].position - atoms[j].position).norm() <= limit {
                edges.push((i, j));
            }
        }
    }
    MolecularGraph::from_edges(atoms.iter().map(|a| a.element).collect(), &edges)
}

fn digest(s: &str) -> String {
    let h = Sha256::digest(s.as_bytes());
    h.iter().map(|b| format!("{b:02x}")).collect()
}

/// Weisfeiler-Lehman hash: node labels are refined from element symbols by
/// their sorted neighbor labels until the partition stops splitting; the
/// sorted label histogram of every round is hashed.
pub fn canonical_hash(graph: &MolecularGraph, table: &ElementTable) -> String {
    let mut labels: Vec<String> = graph.elements.iter().map(|&e| table.symbol(e).to_string()).collect();
    let mut history = Vec::new();
    let classes = |l: &[String]| l.iter().collect::<std::collections::BTreeSet<_>>().len();
    for round in 0..=graph.len() {
        let mut hist: BTreeMap<&str, usize> = BTreeMap::new();
        for l in &labels {
            *hist.entry(l.as_str()).or_default() += 1;
        }
        history.push(format!("{round}:{hist:?}"));
        let next: Vec<String> = (0..graph.len())
            .map(|i| {
                let mut ns: Vec<&str> = graph.adjacency[i].iter().map(|&j| labels[j].as_str()).collect();
                ns.sort_unstable();
                digest(&format!("{}|{}", labels[i], ns.join(",")))
            })
            .collect();
        let done = classes(&next) == classes(&labels) && round > 0;
        labels = next;
        if done {
            break;
        }
    }
    digest(&format!("n={} m={} {}", graph.len(), graph.edges().len(), history.join(";")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Atom;
    use crate::Vec3;

    fn t() -> &'static ElementTable {
        ElementTable::builtin()
    }

    fn el(s: &str) -> Element {
        t().lookup(s).unwrap()
    }

    #[test]
    fn dimer_and_fragments() {
        let x = el("X");
        let dimer = Canvas::from_atoms(vec![Atom::new(x, Vec3::zeros()), Atom::new(x, Vec3::new(1.0, 0.0, 0.0))]);
        let g = perceive_graph(&dimer, t(), 1.2);
        assert_eq!(g.edges(), vec![(0, 1)]);
        assert!(g.is_valid(t()));
        let apart = Canvas::from_atoms(vec![
            Atom::new(x, Vec3::zeros()),
            Atom::new(x, Vec3::new(1.0, 0.0, 0.0)),
            Atom::new(x, Vec3::new(5.0, 0.0, 0.0)),
            Atom::new(x, Vec3::new(6.0, 0.0, 0.0)),
        ]);
        assert!(!perceive_graph(&apart, t(), 1.2).is_valid(t()));
    }

    #[test]
    fn water_is_valid() {
        let a = 104.5f64.to_radians();
        let water = Canvas::from_atoms(vec![
            Atom::new(el("O"), Vec3::zeros()),
            Atom::new(el("H"), Vec3::new(0.96, 0.0, 0.0)),
            Atom::new(el("H"), Vec3::new(0.96 * a.cos(), 0.96 * a.sin(), 0.0)),
        ]);
        let g = perceive_graph(&water, t(), 1.2);
        // O-H limit 1.2 (0.66 + 0.31) = 1.164; H-H at 1.52 exceeds 0.744
        assert_eq!(g.edges(), vec![(0, 1), (0, 2)]);
        assert_eq!((g.degree(0), g.degree(1), g.degree(2)), (2, 1, 1));
        assert!(g.is_valid(t()));
    }

    fn ethanol_and_ether() -> (MolecularGraph, MolecularGraph) {
        let (c, h, o) = (el("C"), el("H"), el("O"));
        // C0 C1 O2, hydrogens 3..8
        let elems = vec![c, c, o, h, h, h, h, h, h];
        let ethanol = MolecularGraph::from_edges(
            elems.clone(),
            &[(0, 1), (1, 2), (0, 3), (0, 4), (0, 5), (1, 6), (1, 7), (2, 8)],
        );
        let ether = MolecularGraph::from_edges(
            elems,
            &[(0, 2), (1, 2), (0, 3), (0, 4), (0, 5), (1, 6), (1, 7), (1, 8)],
        );
        (ethanol, ether)
    }

    #[test]
    fn isomers_hash_apart() {
        let (a, b) = ethanol_and_ether();
        assert!(a.is_valid(t()) && b.is_valid(t()));
        assert_ne!(canonical_hash(&a, t()), canonical_hash(&b, t()));
        let x = el("X");
        let x2 = MolecularGraph::from_edges(vec![x, x], &[(0, 1)]);
        let x3 = MolecularGraph::from_edges(vec![x, x, x], &[(0, 1), (1, 2)]);
        assert_ne!(canonical_hash(&x2, t()), canonical_hash(&x3, t()));
    }

    #[test]
    fn hash_ignores_atom_order() {
        let (a, _) = ethanol_and_ether();
        let perm = [4, 7, 0, 2, 8, 1, 3, 6, 5];
        let mut elems = vec![a.elements[0]; a.len()];
        for (i, &p) in perm.iter().enumerate() {
            elems[p] = a.elements[i];
        }
        let edges: Vec<(usize, usize)> = a.edges().iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        let b = MolecularGraph::from_edges(elems, &edges);
        assert_eq!(canonical_hash(&a, t()), canonical_hash(&b, t()));
    }
}
