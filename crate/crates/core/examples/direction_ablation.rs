// SPDX-License-Identifier: MIT OR Apache-2.0

//! Removes a trained probe's direction from held-out features and compares
//! the damage with random directions, then sweeps the ablation strength.

use vitprobe::fixture::{planted_regression, PlantedSpec};
use vitprobe::interventions::{ablation_experiment, default_alphas, dose_response, DEFAULT_RANDOM_DIRECTIONS};
use vitprobe::labels::Task;
use vitprobe::probe::{train_probe, ProbeConfig, ProbeKind};

fn main() -> vitprobe::Result<()> {
    let master_seed = 1;
    let spec = PlantedSpec::default();
    let data = planted_regression(master_seed, &spec)?;
    let cfg = ProbeConfig::new(ProbeKind::Linear, Task::Depth, 0, spec.width, master_seed);
    let probe = train_probe(&data.train, &data.val, &cfg)?;

    let r = ablation_experiment(&probe, &data.test, master_seed, DEFAULT_RANDOM_DIRECTIONS)?;
    println!("MAE {:.4} → {:.4} ({:+.1}%)", r.orig_mae, r.ablated_mae, r.gap_percent);
    println!("random directions: MAE {:.4} ± {:.4}", r.random_mae_mean, r.random_mae_std);
    for (i, g) in r.random_gap_percents.iter().enumerate() {
        println!("  random {i}: {g:+.2}%");
    }

    let curve = dose_response(&probe, &data.test, &default_alphas())?;
    println!("dose-response:");
    for (a, m) in curve.alphas.iter().zip(&curve.mae_at_alpha) {
        println!("  α = {a:.1}  MAE {m:.4}");
    }
    Ok(())
}
