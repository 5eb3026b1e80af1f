// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vitprobe::fixture::{make_fixture, FixtureKind};
use vitprobe::pipeline::{self, ExperimentConfig};
use vitprobe::report::write_report;

#[derive(Parser)]
#[command(name = "vitprobe", version, about = "Layer-wise probes and interventions on ViT patch states")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override any config field, e.g. `--set grid.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed; required by ablate, dose and patch unless set in the config.
    #[arg(long)]
    master_seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn load(&self) -> vitprobe::Result<ExperimentConfig> {
        let mut sets = self.set.clone();
        if let Some(s) = self.master_seed {
            sets.push(format!("master_seed={s}"));
        }
        if let Some(w) = self.workers {
            sets.push(format!("workers={w}"));
        }
        ExperimentConfig::load(&self.config, &sets)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compute per-patch boundary and depth targets.
    Labels(Common),
    /// Cache hidden-state stacks for every image under both encoders.
    Extract(Common),
    /// Train and evaluate the probe grid.
    TrainGrid(Common),
    /// Ablate probe directions against random controls.
    Ablate(Common),
    /// Graded ablation of the probe direction.
    Dose(Common),
    /// Targeted activation patching between contrast pairs.
    Patch(Common),
    /// Write tables, figure data and a summary from the results directory.
    Report(Common),
    /// Run every stage in order.
    Run(Common),
    /// Write a synthetic fixture with known ground truth.
    Fixture {
        /// planted-regression, identity-carry or tiny-encoder.
        kind: FixtureKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> vitprobe::Result<()> {
    match cli.command {
        Command::Labels(c) => {
            for cache in pipeline::cmd_labels(&c.load()?)? {
                println!("{}: {} images", cache.task, cache.sets.len());
            }
        }
        Command::Extract(c) => {
            for s in pipeline::cmd_extract(&c.load()?)? {
                println!("{} {}: {} computed, {} cached", s.task, s.init, s.computed, s.skipped);
            }
        }
        Command::TrainGrid(c) => {
            for (task, rows) in pipeline::cmd_train_grid(&c.load()?)? {
                println!("{task}: {} runs", rows.len());
            }
        }
        Command::Ablate(c) => {
            for r in pipeline::cmd_ablate(&c.load()?)? {
                println!(
                    "L{:>2}  probe gap {:>7.2}%  random MAE {:.4} ± {:.4}",
                    r.layer, r.gap_percent, r.random_mae_mean, r.random_mae_std
                );
            }
        }
        Command::Dose(c) => {
            for curve in pipeline::cmd_dose(&c.load()?)? {
                println!("L{}: {:?}", curve.layer, curve.mae_at_alpha);
            }
        }
        Command::Patch(c) => {
            let m = pipeline::cmd_patch(&c.load()?)?;
            println!("{} cells over {} pairs", m.cells.len(), m.pairs.len());
        }
        Command::Report(c) => {
            let s = write_report(&c.load()?.results_dir)?;
            println!("wrote {} files", s.written.len());
        }
        Command::Run(c) => {
            let s = pipeline::run_all(&c.load()?)?;
            println!("wrote {} report files", s.written.len());
        }
        Command::Fixture { kind, out, seed } => {
            let f = make_fixture(kind, seed, &out)?;
            println!("{kind}: {} files in {}", f.files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
