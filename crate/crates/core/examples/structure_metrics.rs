//! Graph perception, canonical hashing and the relaxation RMSD.

use covmol::bench::{canonical_hash, perceive_graph, rmsd, stability_metric};
use covmol::env::{Atom, Canvas};
use covmol::oracle::{ElementTable, MorsePotential, RelaxConfig};
use covmol::so3::random_rotation;
use covmol::Vec3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> covmol::Result<()> {
    let table = ElementTable::builtin();
    let (o, h) = (table.lookup("O")?, table.lookup("H")?);
    let a = 104.5f64.to_radians();
    let water = Canvas::from_atoms(vec![
        Atom::new(o, Vec3::zeros()),
        Atom::new(h, Vec3::new(0.96, 0.0, 0.0)),
        Atom::new(h, Vec3::new(0.96 * a.cos(), 0.96 * a.sin(), 0.0)),
    ]);
    let g = perceive_graph(&water, table, 1.2);
    println!("water bonds {:?}, valid {}", g.edges(), g.is_valid(table));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let moved = water.transformed(&random_rotation(&mut rng), &Vec3::new(3.0, -1.0, 2.0));
    let same = canonical_hash(&g, table) == canonical_hash(&perceive_graph(&moved, table, 1.2), table);
    println!("rigidly moved copy: RMSD {:.1e}, same hash {same}", rmsd(&water, &moved)?);

    let oracle = MorsePotential::builtin();
    let shift = stability_metric(&water, &oracle, &RelaxConfig::default())?;
    println!("RMSD to the relaxed geometry under the Morse surrogate: {shift:.4} Å");
    Ok(())
}
