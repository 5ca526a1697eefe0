//! The build-and-relax baseline on a few bags.

use covmol::bench::write_xyz;
use covmol::env::{Bag, Canvas};
use covmol::opt::{run_opt_agent, OptConfig};
use covmol::oracle::{ElementTable, MorsePotential};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> covmol::Result<()> {
    let table = ElementTable::builtin();
    let oracle = MorsePotential::builtin();
    for formula in ["X2", "X3", "X4", "CH4"] {
        let bag = Bag::parse(formula, table)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = run_opt_agent(&Canvas::new(), &bag, &oracle, table, &OptConfig::default(), &mut rng)?;
        println!(
            "{formula}: E = {:.6}, return {:.6}, {} oracle calls, {} rejections, {:?}",
            r.energy,
            r.total_return,
            r.oracle_calls(),
            r.rejections,
            r.status
        );
        if formula == "X4" {
            print!("{}", write_xyz(&r.canvas, r.energy, r.total_return, table));
        }
    }
    Ok(())
}
