//! Place three atoms by hand and watch the rewards telescope to the
//! negative final energy; then trip the distance rule.

use covmol::env::{optimal_return, Bag, Canvas, EnvAction, EnvConfig, Environment};
use covmol::oracle::{ElementTable, MorsePotential};
use covmol::Vec3;

fn main() -> covmol::Result<()> {
    let table = ElementTable::builtin();
    let x = table.lookup("X")?;
    let env = Environment::new(MorsePotential::builtin(), EnvConfig::default());
    let mut state = env.state_for(Canvas::new(), Bag::parse("X3", table)?);
    let mut total = 0.0;
    for p in [Vec3::zeros(), Vec3::new(1.05, 0.0, 0.0), Vec3::new(0.5, 0.9, 0.0)] {
        let out = env.step(&state, &EnvAction { element: x, position: p }, 0.0)?;
        total += out.reward;
        println!("placed X at {p:?}: reward {:.6}, done {}", out.reward, out.done);
        state = out.state;
    }
    println!("return {total:.6}, -E(final) {:.6}", optimal_return(&env.oracle, &state.canvas));

    let crowded = env.state_for(state.canvas.clone(), Bag::parse("X", table)?);
    let out = env.step(&crowded, &EnvAction { element: x, position: Vec3::new(0.3, 0.0, 0.0) }, 0.0)?;
    println!("too close: reward {}, violation {:?}, canvas kept at {} atoms", out.reward, out.violation, out.state.canvas.len());
    Ok(())
}
