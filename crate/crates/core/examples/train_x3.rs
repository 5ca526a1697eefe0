//! Train the agent on a small Morse cluster and print the greedy return
//! after every iteration.
//!
//! `cargo run --release --example train_x3 -- [seed] [formula] [env steps]`

use covmol::agent::{Agent, AgentConfig};
use covmol::env::{optimal_return, Bag, EnvConfig, Environment, TaskSpec};
use covmol::oracle::{ElementTable, MorsePotential};
use covmol::ppo::{evaluate_greedy, train, PpoConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> covmol::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let formula = args.get(2).map_or("X3", String::as_str);
    let steps: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20_000);

    let config = AgentConfig { elements: vec!["X".into()], beta: Some(-10.0), ..AgentConfig::default() };
    let mut agent = Agent::new(config, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let env = Environment::new(MorsePotential::builtin(), EnvConfig::default());
    let task = TaskSpec::single_bag(Bag::parse(formula, ElementTable::builtin())?);
    let ppo = PpoConfig { max_env_steps: steps, ..PpoConfig::default() };
    train(&mut agent, &env, &task, &ppo, seed, &mut |r| {
        println!(
            "iteration {:3}  steps {:6}  online {:>8.4}  greedy {:>8.4}  entropy {:.3}  {:.1}s",
            r.record.iteration,
            r.record.env_steps,
            r.record.mean_online_return.unwrap_or(f64::NAN),
            r.record.mean_offline_return.unwrap_or(f64::NAN),
            r.record.loss.entropy,
            r.timing.wall_time_s
        );
        Ok(())
    })?;
    let episode = &evaluate_greedy(&agent, &env, &task, &mut ChaCha8Rng::seed_from_u64(seed))?[0];
    println!(
        "final greedy return {:.4} (= -E {:.4}) after {} steps",
        episode.total_return,
        optimal_return(&env.oracle, &episode.canvas),
        episode.steps
    );
    Ok(())
}
