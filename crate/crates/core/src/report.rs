// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tables, figure data and a markdown summary from finished stage outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::encoder::InitKind;
use crate::error::{Error, Result};
use crate::interventions::{AblationResult, DoseResponseCurve, InfluenceMatrix};
use crate::metrics::MetricRow;
use crate::pipeline::read_json;
use crate::probe::ProbeKind;

/// Peak layers found in the grid results.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReportSummary {
    /// Pretrained linear probe: layer of maximal AP and that AP.
    pub boundary_peak: Option<(usize, f64)>,
    /// Pretrained linear probe: layer of minimal MAE and that MAE.
    pub depth_peak: Option<(usize, f64)>,
    /// Depth peak layer minus boundary peak layer.
    pub peak_offset: Option<i64>,
    pub written: Vec<PathBuf>,
    pub absent: Vec<String>,
}

impl ReportSummary {
    pub fn is_empty(&self) -> bool {
        self.written.iter().all(|p| p.file_name().is_some_and(|n| n == "summary.md"))
    }
}

fn load<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if path.is_file() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Grid rows indexed by (pretrained?, kind, layer).
struct Grid<'a> {
    rows: BTreeMap<(bool, ProbeKind, usize), &'a MetricRow>,
    layers: BTreeSet<usize>,
}

impl<'a> Grid<'a> {
    fn new(rows: &'a [MetricRow]) -> Self {
        let mut g = Grid {
            rows: BTreeMap::new(),
            layers: BTreeSet::new(),
        };
        for r in rows {
            g.rows.insert((r.init == InitKind::Pretrained, r.kind, r.layer), r);
            g.layers.insert(r.layer);
        }
        g
    }

    fn get(&self, pretrained: bool, kind: ProbeKind, layer: usize) -> Option<&'a MetricRow> {
        self.rows.get(&(pretrained, kind, layer)).copied()
    }

    fn series(&self, pretrained: bool, kind: ProbeKind, f: fn(&MetricRow) -> Option<f64>) -> Vec<Option<f64>> {
        self.layers
            .iter()
            .map(|&l| self.get(pretrained, kind, l).and_then(f))
            .collect()
    }

    /// Best pretrained linear layer under `better`; ties go to the lower layer.
    fn peak(&self, f: fn(&MetricRow) -> Option<f64>, higher_is_better: bool) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for &l in &self.layers {
            if let Some(v) = self.get(true, ProbeKind::Linear, l).and_then(f) {
                let improves = match best {
                    None => true,
                    Some((_, b)) => {
                        if higher_is_better {
                            v > b
                        } else {
                            v < b
                        }
                    }
                };
                if improves {
                    best = Some((l, v));
                }
            }
        }
        best
    }
}

fn long_form(rows: &[MetricRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.task.to_string(),
                r.init.key(),
                r.kind.to_string(),
                r.layer.to_string(),
                cell(r.ap),
                cell(r.f1),
                cell(r.accuracy),
                cell(r.precision),
                cell(r.recall),
                cell(r.mae),
                cell(r.rmse),
            ]
        })
        .collect()
}

const LONG_HEADER: [&str; 11] = [
    "task", "init", "kind", "layer", "ap", "f1", "accuracy", "precision", "recall", "mae", "rmse",
];

/// Reads every stage output under `results_dir` and writes the report
/// bundle to `results_dir/report`.
pub fn write_report(results_dir: &Path) -> Result<ReportSummary> {
    let out = results_dir.join("report");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let boundary: Option<Vec<MetricRow>> = load(&results_dir.join("grid_boundary.json"))?;
    let depth: Option<Vec<MetricRow>> = load(&results_dir.join("grid_depth.json"))?;
    let ablation: Option<Vec<AblationResult>> = load(&results_dir.join("ablation.json"))?;
    let dose: Option<Vec<DoseResponseCurve>> = load(&results_dir.join("dose.json"))?;
    let influence: Option<InfluenceMatrix> = load(&results_dir.join("influence.json"))?;
    let mut s = ReportSummary::default();
    let mut written = Vec::new();
    let mut emit = |name: &str| {
        let p = out.join(name);
        written.push(p.clone());
        p
    };

    let bgrid = boundary.as_deref().map(Grid::new);
    let dgrid = depth.as_deref().map(Grid::new);

    if let (Some(rows), Some(g)) = (&boundary, &bgrid) {
        write_csv(&emit("grid_boundary.csv"), &LONG_HEADER, &long_form(rows))?;
        let table: Vec<Vec<String>> = g
            .layers
            .iter()
            .map(|&l| {
                let p = g.get(true, ProbeKind::Linear, l);
                let r = g.get(false, ProbeKind::Linear, l);
                vec![
                    l.to_string(),
                    cell(p.and_then(|r| r.ap)),
                    cell(p.and_then(|r| r.f1)),
                    cell(p.and_then(|r| r.accuracy)),
                    cell(p.and_then(|r| r.precision)),
                    cell(p.and_then(|r| r.recall)),
                    cell(r.and_then(|r| r.ap)),
                    cell(r.and_then(|r| r.f1)),
                ]
            })
            .collect();
        write_csv(
            &emit("table3_boundary.csv"),
            &["layer", "ap", "f1", "accuracy", "precision", "recall", "random_ap", "random_f1"],
            &table,
        )?;
        let layers: Vec<usize> = g.layers.iter().copied().collect();
        write_json(
            &emit("fig1_boundary_ap.json"),
            &json!({
                "layers": layers,
                "pretrained_linear": g.series(true, ProbeKind::Linear, |r| r.ap),
                "pretrained_mlp": g.series(true, ProbeKind::Mlp, |r| r.ap),
                "random_linear": g.series(false, ProbeKind::Linear, |r| r.ap),
                "random_mlp": g.series(false, ProbeKind::Mlp, |r| r.ap),
            }),
        )?;
        s.boundary_peak = g.peak(|r| r.ap, true);
    } else {
        s.absent.push("boundary grid".into());
    }

    if let (Some(rows), Some(g)) = (&depth, &dgrid) {
        write_csv(&emit("grid_depth.csv"), &LONG_HEADER, &long_form(rows))?;
        let table: Vec<Vec<String>> = g
            .layers
            .iter()
            .map(|&l| {
                let mut row = vec![l.to_string()];
                for pre in [true, false] {
                    for kind in [ProbeKind::Linear, ProbeKind::Mlp] {
                        let r = g.get(pre, kind, l);
                        row.push(cell(r.and_then(|r| r.mae)));
                        row.push(cell(r.and_then(|r| r.rmse)));
                    }
                }
                row
            })
            .collect();
        write_csv(
            &emit("table4_depth.csv"),
            &[
                "layer",
                "pretrained_linear_mae",
                "pretrained_linear_rmse",
                "pretrained_mlp_mae",
                "pretrained_mlp_rmse",
                "random_linear_mae",
                "random_linear_rmse",
                "random_mlp_mae",
                "random_mlp_rmse",
            ],
            &table,
        )?;
        let layers: Vec<usize> = g.layers.iter().copied().collect();
        write_json(
            &emit("fig2_depth_mae.json"),
            &json!({
                "layers": layers,
                "pretrained_linear": g.series(true, ProbeKind::Linear, |r| r.mae),
                "pretrained_mlp": g.series(true, ProbeKind::Mlp, |r| r.mae),
                "random_linear": g.series(false, ProbeKind::Linear, |r| r.mae),
                "random_mlp": g.series(false, ProbeKind::Mlp, |r| r.mae),
            }),
        )?;
        s.depth_peak = g.peak(|r| r.mae, false);
    } else {
        s.absent.push("depth grid".into());
    }

    if let (Some(b), Some(d)) = (&bgrid, &dgrid) {
        let layers: Vec<usize> = b.layers.union(&d.layers).copied().collect();
        let table: Vec<Vec<String>> = layers
            .iter()
            .map(|&l| {
                let br = b.get(true, ProbeKind::Linear, l);
                let dr = d.get(true, ProbeKind::Linear, l);
                vec![
                    l.to_string(),
                    cell(br.and_then(|r| r.f1)),
                    cell(br.and_then(|r| r.ap)),
                    cell(dr.and_then(|r| r.mae)),
                    cell(dr.and_then(|r| r.rmse)),
                ]
            })
            .collect();
        write_csv(
            &emit("table5_cross_task.csv"),
            &["layer", "boundary_f1", "boundary_ap", "depth_mae", "depth_rmse"],
            &table,
        )?;
        let pick = |g: &Grid, f: fn(&MetricRow) -> Option<f64>| -> Vec<Option<f64>> {
            layers.iter().map(|&l| g.get(true, ProbeKind::Linear, l).and_then(f)).collect()
        };
        write_json(
            &emit("fig3_cross_task.json"),
            &json!({
                "layers": layers,
                "boundary_ap": pick(b, |r| r.ap),
                "depth_mae": pick(d, |r| r.mae),
            }),
        )?;
    }
    if let (Some((bl, _)), Some((dl, _))) = (s.boundary_peak, s.depth_peak) {
        s.peak_offset = Some(dl as i64 - bl as i64);
    }

    match &ablation {
        Some(rows) => {
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.layer.to_string(),
                        r.orig_mae.to_string(),
                        r.ablated_mae.to_string(),
                        r.gap_percent.to_string(),
                        r.random_mae_mean.to_string(),
                        r.random_mae_std.to_string(),
                    ]
                })
                .collect();
            write_csv(
                &emit("table6_ablation.csv"),
                &["layer", "orig_mae", "ablated_mae", "gap_percent", "random_mae_mean", "random_mae_std"],
                &table,
            )?;
            write_json(
                &emit("fig4_ablation_gap.json"),
                &json!({
                    "layers": rows.iter().map(|r| r.layer).collect::<Vec<_>>(),
                    "probe_gap_percent": rows.iter().map(|r| r.gap_percent).collect::<Vec<_>>(),
                    "random_gap_percent": rows.iter().map(|r| r.random_gap_percents.clone()).collect::<Vec<_>>(),
                }),
            )?;
        }
        None => s.absent.push("ablation".into()),
    }

    match &dose {
        Some(curves) => write_json(&emit("fig5_dose_response.json"), curves)?,
        None => s.absent.push("dose-response".into()),
    }

    match &influence {
        Some(m) => {
            let long: Vec<Vec<String>> = m
                .cells
                .iter()
                .map(|c| {
                    vec![
                        c.layer.to_string(),
                        c.target.to_string(),
                        c.effect.to_string(),
                        c.pairs_used.to_string(),
                        c.patches_used.to_string(),
                    ]
                })
                .collect();
            write_csv(
                &emit("influence_matrix.csv"),
                &["layer", "target", "effect", "pairs_used", "patches_used"],
                &long,
            )?;
            let last = m.cells.iter().map(|c| c.target).max().unwrap_or(0);
            let layers: BTreeSet<usize> = m.cells.iter().map(|c| c.layer).collect();
            let at = |l: usize, t: usize| -> String {
                if t > last {
                    "n/a".into()
                } else {
                    m.effect(l, t).map(|e| e.to_string()).unwrap_or_else(|| "n/a".into())
                }
            };
            let table: Vec<Vec<String>> = layers
                .iter()
                .map(|&l| vec![l.to_string(), at(l, l), at(l, l + 1), at(l, l + 2), at(l, l + 4), at(l, last)])
                .collect();
            write_csv(
                &emit("table7_influence.csv"),
                &["layer", "t_eq_l", "t_l_plus_1", "t_l_plus_2", "t_l_plus_4", "t_last"],
                &table,
            )?;
            let targets: Vec<usize> = (0..=last).collect();
            let matrix: Vec<Vec<Option<f64>>> = layers
                .iter()
                .map(|&l| targets.iter().map(|&t| m.effect(l, t)).collect())
                .collect();
            write_json(
                &emit("fig6_influence.json"),
                &json!({
                    "layers": layers,
                    "targets": targets,
                    "effects": matrix,
                    "pairs": m.pairs,
                    "guard_epsilon": m.guard_epsilon,
                }),
            )?;
        }
        None => s.absent.push("activation patching".into()),
    }

    let md = summary_markdown(&s, &ablation, &influence);
    let path = emit("summary.md");
    std::fs::write(&path, md).map_err(|e| Error::io(&path, e))?;
    s.written = written;
    Ok(s)
}

fn summary_markdown(
    s: &ReportSummary,
    ablation: &Option<Vec<AblationResult>>,
    influence: &Option<InfluenceMatrix>,
) -> String {
    let mut md = String::from("# Probe report\n\n");
    let nothing = s.boundary_peak.is_none() && s.depth_peak.is_none() && ablation.is_none() && influence.is_none();
    if nothing && s.absent.len() == 5 {
        md.push_str("Nothing to report: no stage outputs were found.\n");
        return md;
    }
    if let Some((l, ap)) = s.boundary_peak {
        let _ = writeln!(md, "- Boundary peak (pretrained linear AP): layer {l}, AP = {ap:.4}");
    }
    if let Some((l, mae)) = s.depth_peak {
        let _ = writeln!(md, "- Depth peak (pretrained linear MAE): layer {l}, MAE = {mae:.4}");
    }
    if let Some(o) = s.peak_offset {
        let _ = writeln!(md, "- Depth peak minus boundary peak: {o} layer(s)");
    }
    if let Some(rows) = ablation {
        for r in rows {
            let worst = r.random_gap_percents.iter().fold(0.0f64, |a, &g| a.max(g.abs()));
            let _ = writeln!(
                md,
                "- Ablation at layer {}: {:+.1}% MAE (random directions: max |gap| {:.2}%)",
                r.layer, r.gap_percent, worst
            );
        }
    }
    if let Some(m) = influence {
        let diag: Vec<f64> = m.cells.iter().filter(|c| c.layer == c.target).map(|c| c.effect).collect();
        let worst = diag.iter().fold(0.0f64, |a, &e| a.max((e - 1.0).abs()));
        let _ = writeln!(
            md,
            "- Influence matrix over {} pair(s); max |diagonal − 1| = {worst:.2e}",
            m.pairs.len()
        );
    }
    if !s.absent.is_empty() {
        let _ = writeln!(md, "\nAbsent: {}.", s.absent.join(", "));
    }
    md
}
