// SPDX-License-Identifier: MIT OR Apache-2.0

//! Every stage, end to end, on the tiny synthetic fixture: labels, feature
//! extraction, the probe grid, ablation, dose-response, patching, report.
//!
//! ```text
//! cargo run --release --example fixture_pipeline [out_dir]
//! ```

use std::path::PathBuf;

use vitprobe::fixture::{make_fixture, FixtureKind};
use vitprobe::pipeline::{run_all, ExperimentConfig};

fn main() -> vitprobe::Result<()> {
    env_logger::init();
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("vitprobe_fixture"));
    let fixture = make_fixture(FixtureKind::TinyEncoder, 7, &dir)?;
    println!("fixture: {} files in {}", fixture.files.len(), dir.display());

    let cfg = ExperimentConfig::load(&dir.join("config.toml"), &[])?;
    let summary = run_all(&cfg)?;
    for p in &summary.written {
        println!("wrote {}", p.display());
    }
    print!("{}", std::fs::read_to_string(cfg.results_dir.join("report/summary.md")).unwrap_or_default());
    Ok(())
}
