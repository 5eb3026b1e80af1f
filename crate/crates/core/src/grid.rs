// SPDX-License-Identifier: MIT OR Apache-2.0

//! The layer × probe kind × init grid of probe runs for one task.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::cache::FeatureCache;
use crate::encoder::InitKind;
use crate::error::{Error, Result};
use crate::labels::{LabelCache, Split, Task};
use crate::metrics::{self, MetricRow, Pooling};
use crate::probe::{sigmoid, train_probe, ProbeCheckpoint, ProbeConfig, ProbeKind, Samples};
use crate::seed::{derive_seed, fnv1a};

/// What to train. Optimizer settings come from `template`; its kind, task,
/// layer, width and seed are overwritten per run.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub task: Task,
    pub layers: Vec<usize>,
    pub kinds: Vec<ProbeKind>,
    pub inits: Vec<InitKind>,
    pub template: ProbeConfig,
    pub master_seed: u64,
    pub pooling: Pooling,
    /// Checkpoints go to `<dir>/<task>/<init>/<kind>_L<layer>.ckpt`. A
    /// checkpoint whose config matches the requested run is reused.
    pub checkpoint_dir: Option<PathBuf>,
}

/// One finished run.
#[derive(Debug, Clone)]
pub struct GridRun {
    pub checkpoint: ProbeCheckpoint,
    pub row: MetricRow,
}

/// Seed of a single probe run, derived from the master seed.
pub fn run_seed(master: u64, task: Task, init: InitKind, layer: usize, kind: ProbeKind) -> u64 {
    derive_seed(
        master,
        &[
            fnv1a(task.as_str().as_bytes()),
            fnv1a(init.key().as_bytes()),
            layer as u64,
            fnv1a(kind.as_str().as_bytes()),
        ],
    )
}

/// Concatenated per-patch features and targets for every image of `split`,
/// in image-id order. Also returns the per-image patch count.
pub fn gather_split(
    cache: &FeatureCache,
    labels: &LabelCache,
    init: InitKind,
    layer: usize,
    split: Split,
) -> Result<(Samples, Vec<String>)> {
    let sets: Vec<_> = labels.split(split).collect();
    let rows = sets
        .par_iter()
        .map(|s| cache.layer(init, &s.image_id, layer))
        .collect::<Result<Vec<_>>>()?;
    let width = match rows.first() {
        Some(r) => r.len() / labels.num_patches,
        None => {
            return Err(Error::Data(format!("{} has no {} images", labels.task, split.as_str())));
        }
    };
    let mut features = Vec::with_capacity(rows.len() * rows[0].len());
    let mut targets = Vec::new();
    for (s, r) in sets.iter().zip(rows) {
        if r.len() != labels.num_patches * width {
            return Err(Error::Data(format!(
                "{}: cached stack has {} values per layer, labels expect {} patches of width {width}",
                s.image_id,
                r.len(),
                labels.num_patches
            )));
        }
        features.extend(r);
        targets.extend_from_slice(&s.labels);
    }
    let ids = sets.iter().map(|s| s.image_id.clone()).collect();
    Ok((Samples::new(width, features, targets)?, ids))
}

/// Test-set metrics for a trained probe. `per_image` is the number of
/// patches per image, used for per-image pooling.
pub fn evaluate(
    ckpt: &ProbeCheckpoint,
    init: InitKind,
    test: &Samples,
    per_image: usize,
    pooling: Pooling,
) -> Result<MetricRow> {
    let preds = ckpt.predict_rows(&test.features)?;
    let c = &ckpt.config;
    let mut row = MetricRow {
        task: c.task,
        layer: c.layer,
        kind: c.kind,
        init,
        ap: None,
        f1: None,
        accuracy: None,
        precision: None,
        recall: None,
        mae: None,
        rmse: None,
    };
    match c.task {
        Task::Boundary => {
            let groups: Vec<(Vec<f64>, Vec<bool>)> = preds
                .chunks(per_image)
                .zip(test.targets.chunks(per_image))
                .map(|(p, t)| (p.iter().map(|&z| sigmoid(z)).collect(), t.iter().map(|&v| v >= 0.5).collect()))
                .collect();
            let (ap, stats) = metrics::classification_grouped(&groups, 0.5, pooling)?;
            row.ap = Some(ap);
            row.f1 = Some(stats.f1);
            row.accuracy = Some(stats.accuracy);
            row.precision = Some(stats.precision);
            row.recall = Some(stats.recall);
        }
        Task::Depth => {
            let groups: Vec<(Vec<f64>, Vec<f64>)> = preds
                .chunks(per_image)
                .zip(test.targets.chunks(per_image))
                .map(|(p, t)| (p.to_vec(), t.iter().map(|&v| v as f64).collect()))
                .collect();
            let stats = metrics::regression_stats_grouped(&groups, pooling)?;
            row.mae = Some(stats.mae);
            row.rmse = Some(stats.rmse);
        }
    }
    Ok(row)
}

pub fn checkpoint_path(dir: &Path, task: Task, init: InitKind, kind: ProbeKind, layer: usize) -> PathBuf {
    dir.join(task.as_str()).join(init.key()).join(format!("{kind}_L{layer}.ckpt"))
}

/// Trains and evaluates every (init, layer, kind) combination. Rows come
/// back sorted by init key, layer, then kind.
pub fn run_grid(cache: &FeatureCache, labels: &LabelCache, spec: &GridSpec) -> Result<Vec<GridRun>> {
    if labels.task != spec.task {
        return Err(Error::Config(format!(
            "grid for {} given {} labels",
            spec.task, labels.task
        )));
    }
    let mut inits = spec.inits.clone();
    inits.sort_by_key(|i| i.key());
    let mut out = Vec::new();
    for &init in &inits {
        for &layer in &spec.layers {
            let (train, _) = gather_split(cache, labels, init, layer, Split::Train)?;
            let (val, _) = gather_split(cache, labels, init, layer, Split::Val)?;
            let (test, _) = gather_split(cache, labels, init, layer, Split::Test)?;
            let runs = spec
                .kinds
                .par_iter()
                .map(|&kind| {
                    let mut cfg = spec.template.clone();
                    cfg.kind = kind;
                    cfg.task = spec.task;
                    cfg.layer = layer;
                    cfg.input_width = train.width;
                    cfg.seed = run_seed(spec.master_seed, spec.task, init, layer, kind);
                    let path = spec
                        .checkpoint_dir
                        .as_ref()
                        .map(|d| checkpoint_path(d, spec.task, init, kind, layer));
                    let reusable = path
                        .as_ref()
                        .filter(|p| p.is_file())
                        .and_then(|p| ProbeCheckpoint::load(p).ok())
                        .filter(|c| c.config == cfg);
                    let checkpoint = match reusable {
                        Some(c) => c,
                        None => {
                            log::info!("training {} {kind} probe at layer {layer} ({init})", spec.task);
                            let mut c = train_probe(&train, &val, &cfg)?;
                            c.metadata.insert("init".into(), init.key());
                            if let Some(p) = &path {
                                let parent = p.parent().expect("checkpoint path has a parent");
                                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                                c.save(p)?;
                            }
                            c
                        }
                    };
                    let row = evaluate(&checkpoint, init, &test, labels.num_patches, spec.pooling)?;
                    Ok(GridRun { checkpoint, row })
                })
                .collect::<Result<Vec<_>>>()?;
            out.extend(runs);
        }
    }
    out.sort_by(|a, b| {
        (a.row.init.key(), a.row.layer, a.row.kind).cmp(&(b.row.init.key(), b.row.layer, b.row.kind))
    });
    Ok(out)
}
