use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use covmol::bench::{self, ExperimentConfig, Mode, OracleKind};
use covmol::oracle::{relax, CountingOracle, ElementTable, EnergyOracle, MorsePotential};
use covmol::{Error, Result};

#[derive(Parser)]
#[command(name = "covmol", version, about = "Covariant actor-critic for 3D molecular design")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this seed only, overriding `experiment.seeds`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train with PPO and evaluate greedily after every iteration.
    Train(Common),
    /// Greedy episodes of a saved checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Overrides `eval.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the build-and-relax baseline.
    Baseline(Common),
    /// Recompute validity, diversity and stability of an output directory.
    Metrics {
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
    /// Relax an XYZ structure and report the energy and displacement.
    Relax {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
}

fn load(common: &Common, mode: Mode) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    config.experiment.mode = mode;
    if let Some(s) = common.seed {
        config.experiment.seeds = vec![s];
    }
    Ok(config)
}

fn experiment(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let summary = bench::run_experiment(config, out)?;
    print!("{}", summary.table());
    Ok(())
}

fn relax_file(input: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let config = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let oracle: Box<dyn EnergyOracle> = match config.oracle.kind {
        OracleKind::Morse => Box::new(MorsePotential::builtin()),
        OracleKind::Counting => Box::new(CountingOracle),
    };
    let table = ElementTable::builtin();
    let rec = bench::read_xyz(input, table)?;
    let all: Vec<usize> = (0..rec.canvas.len()).collect();
    let tol = covmol::oracle::RelaxConfig {
        tol: config.eval.relax_tolerance,
        max_iter: config.eval.relax_max_iter,
        ..Default::default()
    };
    let before = oracle.energy(&rec.canvas);
    let res = relax(oracle.as_ref(), &rec.canvas, &all, &tol)?;
    let shift = bench::rmsd(&rec.canvas, &res.canvas)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
    let path = out.join("relaxed.xyz");
    let refs: f64 = res.canvas.atoms().iter().map(|a| oracle.atom_energy(a.element)).sum();
    std::fs::write(&path, bench::write_xyz(&res.canvas, res.energy, refs - res.energy, table))
        .map_err(|e| Error::Io { path: path.clone(), source: e })?;
    println!(
        "energy {before} -> {} after {} iterations (converged: {}), RMSD {shift:.6} Å, written to {}",
        res.energy,
        res.iterations,
        res.converged,
        path.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => experiment(&load(&c, Mode::Train)?, &c.out_dir),
        Command::Baseline(c) => experiment(&load(&c, Mode::Baseline)?, &c.out_dir),
        Command::Evaluate { common, checkpoint } => {
            let mut config = load(&common, Mode::Evaluate)?;
            if checkpoint.is_some() {
                config.eval.checkpoint = checkpoint;
            }
            experiment(&config, &common.out_dir)
        }
        Command::Metrics { out_dir } => {
            let summary = bench::summarize(&out_dir)?;
            print!("{}", summary.table());
            Ok(())
        }
        Command::Relax { input, config, out_dir } => relax_file(&input, config.as_deref(), &out_dir),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config { .. } | Error::Parse { .. } => 2,
                Error::Numeric(_) | Error::SamplingFailure(_) => 3,
                _ => 1,
            })
        }
    }
}
