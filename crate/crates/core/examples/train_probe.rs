// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear and MLP probes on features with one planted direction.

use vitprobe::fixture::{planted_regression, PlantedSpec};
use vitprobe::labels::Task;
use vitprobe::metrics::regression_stats;
use vitprobe::probe::{train_probe, ProbeCheckpoint, ProbeConfig, ProbeKind};

fn main() -> vitprobe::Result<()> {
    let spec = PlantedSpec { width: 32, n_train: 3000, ..PlantedSpec::default() };
    let data = planted_regression(5, &spec)?;
    let targets: Vec<f64> = data.test.targets.iter().map(|&t| t as f64).collect();

    for kind in [ProbeKind::Linear, ProbeKind::Mlp] {
        let mut cfg = ProbeConfig::new(kind, Task::Depth, 0, spec.width, 5);
        cfg.hidden_width = 64;
        cfg.max_epochs = 300;
        let probe = train_probe(&data.train, &data.val, &cfg)?;
        let stats = regression_stats(&probe.predict_rows(&data.test.features)?, &targets)?;
        print!(
            "{kind:>6}: {:>6} params, best epoch {:>3}, test MAE {:.4}, RMSE {:.4}",
            probe.param_count(),
            probe.best_epoch,
            stats.mae,
            stats.rmse
        );
        if let Some(w) = probe.direction() {
            let norm = w.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let cos: f64 = w.iter().zip(&data.w_star).map(|(&a, b)| a as f64 * b).sum::<f64>() / norm;
            print!(", cos(w, w*) {cos:.4}");
        }
        println!();

        let path = std::env::temp_dir().join(format!("vitprobe_example_{kind}.ckpt"));
        probe.save(&path)?;
        assert_eq!(ProbeCheckpoint::load(&path)?.params, probe.params);
        std::fs::remove_file(&path).ok();
    }
    Ok(())
}
