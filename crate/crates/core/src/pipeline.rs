// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration and the stages that run it end to end.
//!
//! Stages read and write fixed locations under `cache_dir` and
//! `results_dir`, so each can be rerun or resumed on its own:
//!
//! ```text
//! <cache_dir>/labels/<task>.{bin,json}          labels
//! <cache_dir>/features/<task>/...               extract
//! <cache_dir>/probes/<task>/<init>/*.ckpt       train-grid
//! <results_dir>/grid_<task>.json                train-grid
//! <results_dir>/ablation.json                   ablate
//! <results_dir>/dose.json                       dose
//! <results_dir>/influence.json                  patch
//! <results_dir>/report/                         report
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::cache::{extract, FeatureCache};
use crate::encoder::{load_weights, preprocess_image, random_init, read_image, Encoder, InitKind};
use crate::error::{Error, Result};
use crate::grid::{self, GridSpec};
use crate::interventions::{
    self, AblationResult, DoseResponseCurve, InfluenceMatrix, PatchMode, PatchingSpec,
};
use crate::labels::{self, LabelCache, LabelConfig, PatchGrid, Split, Task};
use crate::metrics::{MetricRow, Pooling};
use crate::probe::{ProbeCheckpoint, ProbeConfig, ProbeKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    /// Safetensors file of the trained encoder. Its architecture also
    /// defines the randomly initialized control.
    pub pretrained: PathBuf,
    #[serde(default)]
    pub random_seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub boundary_root: Option<PathBuf>,
    pub depth_root: Option<PathBuf>,
    /// Training images moved to validation when a dataset has no val split.
    pub boundary_carve_val: Option<usize>,
    pub depth_carve_val: Option<usize>,
}

/// Which encoder a probe reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitChoice {
    Pretrained,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub tasks: Vec<Task>,
    /// Empty means every recorded layer.
    pub layers: Vec<usize>,
    pub kinds: Vec<ProbeKind>,
    pub inits: Vec<InitChoice>,
    pub hidden_width: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub standardize: bool,
    pub pooling: Pooling,
}

impl Default for GridConfig {
    fn default() -> Self {
        let p = ProbeConfig::new(ProbeKind::Linear, Task::Depth, 0, 0, 0);
        Self {
            tasks: vec![Task::Boundary, Task::Depth],
            layers: Vec::new(),
            kinds: vec![ProbeKind::Linear, ProbeKind::Mlp],
            inits: vec![InitChoice::Pretrained, InitChoice::Random],
            hidden_width: p.hidden_width,
            lr: p.lr,
            weight_decay: p.weight_decay,
            batch_size: p.batch_size,
            max_epochs: p.max_epochs,
            patience: p.patience,
            standardize: p.standardize,
            pooling: Pooling::Pooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionConfig {
    /// Encoder whose depth probes are intervened on.
    pub init: InitChoice,
    /// Empty means every layer.
    pub ablation_layers: Vec<usize>,
    pub random_directions: usize,
    /// Empty means the layer with the lowest linear-probe depth MAE.
    pub dose_layers: Vec<usize>,
    pub alphas: Vec<f64>,
    pub pairs: usize,
    /// Empty means every layer.
    pub patch_layers: Vec<usize>,
    pub guard_epsilon: f64,
    pub patch_mode: PatchMode,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            init: InitChoice::Pretrained,
            ablation_layers: Vec::new(),
            random_directions: interventions::DEFAULT_RANDOM_DIRECTIONS,
            dose_layers: Vec::new(),
            alphas: interventions::default_alphas(),
            pairs: interventions::DEFAULT_PAIRS,
            patch_layers: Vec::new(),
            guard_epsilon: interventions::DEFAULT_GUARD_EPSILON,
            patch_mode: PatchMode::AllPositions,
        }
    }
}

/// Everything one experiment needs. Relative paths are resolved against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Fixes every derived seed. Required by the intervention stages.
    pub master_seed: Option<u64>,
    /// Worker threads; 0 uses all available cores, 1 runs single-threaded.
    #[serde(default)]
    pub workers: usize,
    pub cache_dir: PathBuf,
    pub results_dir: PathBuf,
    pub weights: WeightsConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub labels: LabelConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub interventions: InterventionConfig,
}

/// Parses `key.path=value`; the value is read as a TOML literal, falling
/// back to a bare string.
fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{raw}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{raw}` has an empty key segment")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn set_path(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty override path");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` is not a table")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn deserialize<T: DeserializeOwned>(table: toml::Table) -> Result<T> {
    T::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(e.to_string()))
}

impl ExperimentConfig {
    /// Parses TOML text, applies `key=value` overrides, and resolves
    /// relative paths against `base`.
    pub fn from_toml_str(text: &str, overrides: &[String], base: &Path) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for raw in overrides {
            let (path, value) = parse_override(raw)?;
            set_path(&mut table, &path, value)?;
        }
        let mut cfg: Self = deserialize(table)?;
        resolve(base, &mut cfg.cache_dir);
        resolve(base, &mut cfg.results_dir);
        resolve(base, &mut cfg.weights.pretrained);
        for p in [&mut cfg.data.boundary_root, &mut cfg.data.depth_root].into_iter().flatten() {
            resolve(base, p);
        }
        Ok(cfg)
    }

    /// Reads a config file; relative paths are taken from its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_toml_str(&text, overrides, base)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn require_master_seed(&self, stage: &str) -> Result<u64> {
        self.master_seed
            .ok_or_else(|| Error::Config(format!("`{stage}` needs a master seed (--master-seed or master_seed)")))
    }

    pub fn root(&self, task: Task) -> Result<&Path> {
        match task {
            Task::Boundary => self.data.boundary_root.as_deref(),
            Task::Depth => self.data.depth_root.as_deref(),
        }
        .ok_or_else(|| Error::Config(format!("no dataset root configured for {task}")))
    }

    fn carve_val(&self, task: Task) -> Option<usize> {
        match task {
            Task::Boundary => self.data.boundary_carve_val,
            Task::Depth => self.data.depth_carve_val,
        }
    }

    pub fn init_kind(&self, choice: InitChoice) -> InitKind {
        match choice {
            InitChoice::Pretrained => InitKind::Pretrained,
            InitChoice::Random => InitKind::Random {
                seed: self.weights.random_seed,
            },
        }
    }

    pub fn labels_dir(&self) -> PathBuf {
        self.cache_dir.join("labels")
    }

    pub fn features_dir(&self, task: Task) -> PathBuf {
        self.cache_dir.join("features").join(task.as_str())
    }

    pub fn probes_dir(&self) -> PathBuf {
        self.cache_dir.join("probes")
    }

    /// Tasks that have a dataset root.
    pub fn configured_tasks(&self) -> Vec<Task> {
        [Task::Boundary, Task::Depth]
            .into_iter()
            .filter(|&t| self.root(t).is_ok())
            .collect()
    }

    /// Runs `f` on a pool with the configured worker count.
    pub fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(pool.install(f))
    }
}

/// Loads the encoder for `choice`.
pub fn load_encoder(cfg: &ExperimentConfig, choice: InitChoice) -> Result<Encoder> {
    let pretrained = load_weights(&cfg.weights.pretrained)?;
    match choice {
        InitChoice::Pretrained => Encoder::from_store(&pretrained, InitKind::Pretrained),
        InitChoice::Random => {
            let arch = crate::encoder::infer_config(&pretrained)?;
            let seed = cfg.weights.random_seed;
            let mut store = random_init(&arch, seed)?;
            // Keep the trained model's preprocessing.
            for (k, v) in &pretrained.metadata {
                if k.starts_with("image_") {
                    store.metadata.insert(k.clone(), v.clone());
                }
            }
            Encoder::from_store(&store, InitKind::Random { seed })
        }
    }
}

fn patch_grid(cfg: &ExperimentConfig) -> Result<PatchGrid> {
    let enc = load_encoder(cfg, InitChoice::Pretrained)?;
    let c = enc.config();
    Ok(PatchGrid {
        image_size: c.image_size,
        patch_size: c.patch_size,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Computes and caches per-patch targets for every configured dataset.
pub fn cmd_labels(cfg: &ExperimentConfig) -> Result<Vec<LabelCache>> {
    let grid = patch_grid(cfg)?;
    let mut out = Vec::new();
    for task in cfg.configured_tasks() {
        let index = labels::assign_splits(task, cfg.root(task)?, cfg.carve_val(task))?;
        let sets = cfg.in_pool(|| {
            index
                .entries
                .par_iter()
                .map(|e| labels::label_entry(task, e, &grid, &cfg.labels))
                .collect::<Result<Vec<_>>>()
        })??;
        let cache = LabelCache::new(task, grid.num_patches(), sets)?;
        cache.write(&cfg.labels_dir())?;
        let s = index.summary();
        log::info!("{task}: labelled {} images ({}/{}/{})", s.total(), s.train, s.val, s.test);
        out.push(cache);
    }
    Ok(out)
}

/// Per-(task, init) extraction counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExtractSummary {
    pub task: Task,
    pub init: String,
    pub computed: usize,
    pub skipped: usize,
}

/// Caches hidden-state stacks for every dataset image under both encoders.
/// Failing images are reported after all others have been cached.
pub fn cmd_extract(cfg: &ExperimentConfig) -> Result<Vec<ExtractSummary>> {
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    let encoders = [InitChoice::Pretrained, InitChoice::Random]
        .into_iter()
        .filter(|c| cfg.grid.inits.contains(c) || cfg.interventions.init == *c)
        .map(|c| load_encoder(cfg, c))
        .collect::<Result<Vec<_>>>()?;
    for task in cfg.configured_tasks() {
        let index = labels::assign_splits(task, cfg.root(task)?, cfg.carve_val(task))?;
        let images: Vec<(String, PathBuf)> = index
            .entries
            .iter()
            .map(|e| (e.image_id.clone(), e.image_path.clone()))
            .collect();
        let mut cache = FeatureCache::open(&cfg.features_dir(task))?;
        for enc in &encoders {
            let report = cfg.in_pool(|| extract(enc, &images, &mut cache))??;
            summaries.push(ExtractSummary {
                task,
                init: enc.init_kind().key(),
                computed: report.computed,
                skipped: report.skipped,
            });
            failures.extend(report.failures);
        }
    }
    if !failures.is_empty() {
        let list: Vec<String> = failures.iter().map(|(p, e)| format!("{}: {e}", p.display())).collect();
        return Err(Error::Data(format!(
            "{} image(s) failed to extract: {}",
            failures.len(),
            list.join("; ")
        )));
    }
    Ok(summaries)
}

fn all_layers(cache: &FeatureCache) -> Result<Vec<usize>> {
    let states = cache
        .entries()
        .next()
        .map(|e| e.shape[0])
        .ok_or_else(|| Error::Data(format!("feature cache {} is empty", cache.dir().display())))?;
    Ok((0..states).collect())
}

fn grid_path(cfg: &ExperimentConfig, task: Task) -> PathBuf {
    cfg.results_dir.join(format!("grid_{task}.json"))
}

/// Trains the probe grid for every configured task.
pub fn cmd_train_grid(cfg: &ExperimentConfig) -> Result<BTreeMap<Task, Vec<MetricRow>>> {
    let master_seed = cfg.master_seed.unwrap_or_else(|| {
        log::warn!("no master seed given; deriving probe seeds from 0");
        0
    });
    let mut out = BTreeMap::new();
    for &task in &cfg.grid.tasks {
        if cfg.root(task).is_err() {
            log::warn!("skipping {task}: no dataset root");
            continue;
        }
        let labels = LabelCache::read(&cfg.labels_dir(), task)?;
        let cache = FeatureCache::open(&cfg.features_dir(task))?;
        let layers = if cfg.grid.layers.is_empty() {
            all_layers(&cache)?
        } else {
            cfg.grid.layers.clone()
        };
        let g = &cfg.grid;
        let mut template = ProbeConfig::new(ProbeKind::Linear, task, 0, 0, 0);
        template.hidden_width = g.hidden_width;
        template.lr = g.lr;
        template.weight_decay = g.weight_decay;
        template.batch_size = g.batch_size;
        template.max_epochs = g.max_epochs;
        template.patience = g.patience;
        template.standardize = g.standardize;
        let spec = GridSpec {
            task,
            layers,
            kinds: g.kinds.clone(),
            inits: g.inits.iter().map(|&c| cfg.init_kind(c)).collect(),
            template,
            master_seed,
            pooling: g.pooling,
            checkpoint_dir: Some(cfg.probes_dir()),
        };
        let runs = cfg.in_pool(|| grid::run_grid(&cache, &labels, &spec))??;
        let rows: Vec<MetricRow> = runs.into_iter().map(|r| r.row).collect();
        write_json(&grid_path(cfg, task), &rows)?;
        out.insert(task, rows);
    }
    Ok(out)
}

fn intervention_probe(cfg: &ExperimentConfig, layer: usize) -> Result<ProbeCheckpoint> {
    let init = cfg.init_kind(cfg.interventions.init);
    let path = grid::checkpoint_path(&cfg.probes_dir(), Task::Depth, init, ProbeKind::Linear, layer);
    if !path.is_file() {
        return Err(Error::Data(format!(
            "no linear depth probe at layer {layer} ({init}); run train-grid first ({})",
            path.display()
        )));
    }
    ProbeCheckpoint::load(&path)
}

fn depth_layers(requested: &[usize], cache: &FeatureCache) -> Result<Vec<usize>> {
    if requested.is_empty() {
        all_layers(cache)
    } else {
        Ok(requested.to_vec())
    }
}

/// Probe-direction ablation with random controls at each requested layer.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationResult>> {
    let seed = cfg.require_master_seed("ablate")?;
    let labels = LabelCache::read(&cfg.labels_dir(), Task::Depth)?;
    let cache = FeatureCache::open(&cfg.features_dir(Task::Depth))?;
    let init = cfg.init_kind(cfg.interventions.init);
    let layers = depth_layers(&cfg.interventions.ablation_layers, &cache)?;
    let results = cfg.in_pool(|| {
        layers
            .iter()
            .map(|&l| {
                let probe = intervention_probe(cfg, l)?;
                let (test, _) = grid::gather_split(&cache, &labels, init, l, Split::Test)?;
                interventions::ablation_experiment(&probe, &test, seed, cfg.interventions.random_directions)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    write_json(&cfg.results_dir.join("ablation.json"), &results)?;
    Ok(results)
}

/// The layer with the lowest linear-probe test MAE in the depth grid.
fn best_depth_layer(cfg: &ExperimentConfig) -> Result<usize> {
    let rows: Vec<MetricRow> = read_json(&grid_path(cfg, Task::Depth))?;
    let init = cfg.init_kind(cfg.interventions.init);
    rows.iter()
        .filter(|r| r.kind == ProbeKind::Linear && r.init == init)
        .filter_map(|r| r.mae.map(|m| (m, r.layer)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, l)| l)
        .ok_or_else(|| Error::Data("depth grid has no linear rows to pick a dose layer from".into()))
}

/// Graded ablation of the probe direction at each requested layer.
pub fn cmd_dose(cfg: &ExperimentConfig) -> Result<Vec<DoseResponseCurve>> {
    cfg.require_master_seed("dose")?;
    let labels = LabelCache::read(&cfg.labels_dir(), Task::Depth)?;
    let cache = FeatureCache::open(&cfg.features_dir(Task::Depth))?;
    let init = cfg.init_kind(cfg.interventions.init);
    let layers = if cfg.interventions.dose_layers.is_empty() {
        vec![best_depth_layer(cfg)?]
    } else {
        cfg.interventions.dose_layers.clone()
    };
    let curves = cfg.in_pool(|| {
        layers
            .iter()
            .map(|&l| {
                let probe = intervention_probe(cfg, l)?;
                let (test, _) = grid::gather_split(&cache, &labels, init, l, Split::Test)?;
                interventions::dose_response(&probe, &test, &cfg.interventions.alphas)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    write_json(&cfg.results_dir.join("dose.json"), &curves)?;
    Ok(curves)
}

/// Targeted patching between maximal-contrast test pairs, measured with
/// the depth probes of every downstream layer.
pub fn cmd_patch(cfg: &ExperimentConfig) -> Result<InfluenceMatrix> {
    cfg.require_master_seed("patch")?;
    let labels = LabelCache::read(&cfg.labels_dir(), Task::Depth)?;
    let encoder = load_encoder(cfg, cfg.interventions.init)?;
    let test: Vec<_> = labels.split(Split::Test).collect();
    let pairs = interventions::select_contrast_pairs(&test, cfg.interventions.pairs)?;
    let layers_all: Vec<usize> = (0..encoder.config().num_states()).collect();
    let probes: BTreeMap<usize, ProbeCheckpoint> = layers_all
        .iter()
        .map(|&l| Ok((l, intervention_probe(cfg, l)?)))
        .collect::<Result<_>>()?;
    let index = labels::assign_splits(Task::Depth, cfg.root(Task::Depth)?, cfg.carve_val(Task::Depth))?;
    let wanted: std::collections::BTreeSet<&str> = pairs
        .iter()
        .flat_map(|p| [p.src_image_id.as_str(), p.dst_image_id.as_str()])
        .collect();
    let images: BTreeMap<String, Tensor> = index
        .entries
        .iter()
        .filter(|e| wanted.contains(e.image_id.as_str()))
        .map(|e| {
            let img = read_image(&e.image_path)?;
            let x = preprocess_image(&img, encoder.config().image_size, encoder.normalization())?;
            Ok((e.image_id.clone(), x))
        })
        .collect::<Result<_>>()?;
    let spec = PatchingSpec {
        layers: if cfg.interventions.patch_layers.is_empty() {
            layers_all
        } else {
            cfg.interventions.patch_layers.clone()
        },
        guard_epsilon: cfg.interventions.guard_epsilon,
        mode: cfg.interventions.patch_mode,
    };
    let matrix = cfg.in_pool(|| interventions::influence_matrix(&encoder, &images, &pairs, &probes, &spec))??;
    write_json(&cfg.results_dir.join("influence.json"), &matrix)?;
    Ok(matrix)
}

/// Every stage in order: labels, extract, train-grid, ablate, dose, patch,
/// report.
pub fn run_all(cfg: &ExperimentConfig) -> Result<crate::report::ReportSummary> {
    cmd_labels(cfg)?;
    cmd_extract(cfg)?;
    cmd_train_grid(cfg)?;
    if cfg.configured_tasks().contains(&Task::Depth) {
        cmd_ablate(cfg)?;
        cmd_dose(cfg)?;
        cmd_patch(cfg)?;
    }
    crate::report::write_report(&cfg.results_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        master_seed = 3
        cache_dir = "cache"
        results_dir = "out"
        [weights]
        pretrained = "w.safetensors"
        [data]
        depth_root = "/abs/nyu"
    "#;

    #[test]
    fn defaults_and_path_resolution() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, &[], Path::new("/base")).unwrap();
        assert_eq!(cfg.cache_dir, PathBuf::from("/base/cache"));
        assert_eq!(cfg.weights.pretrained, PathBuf::from("/base/w.safetensors"));
        assert_eq!(cfg.data.depth_root, Some(PathBuf::from("/abs/nyu")));
        assert_eq!(cfg.grid.batch_size, 512);
        assert_eq!(cfg.grid.max_epochs, 100);
        assert_eq!(cfg.interventions.alphas.len(), 11);
        assert_eq!(cfg.configured_tasks(), vec![Task::Depth]);
    }

    #[test]
    fn overrides_reach_every_level() {
        let sets = [
            "grid.lr=0.01".to_string(),
            "grid.kinds=[\"linear\"]".into(),
            "interventions.patch_mode=per-position".into(),
            "master_seed=9".into(),
            "labels.tie_rule=at-least-half".into(),
            "data.boundary_root=bsds".into(),
        ];
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, &sets, Path::new("/b")).unwrap();
        assert_eq!(cfg.grid.lr, 0.01);
        assert_eq!(cfg.grid.kinds, vec![ProbeKind::Linear]);
        assert_eq!(cfg.interventions.patch_mode, PatchMode::PerPosition);
        assert_eq!(cfg.master_seed, Some(9));
        assert_eq!(cfg.labels.tie_rule, labels::TieRule::AtLeastHalf);
        assert_eq!(cfg.data.boundary_root, Some(PathBuf::from("/b/bsds")));
        assert!(matches!(
            ExperimentConfig::from_toml_str(MINIMAL, &["grid.nope=1".into()], Path::new("/b")),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml_str(MINIMAL, &["grid.lr".into()], Path::new("/b")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn intervention_stages_need_a_master_seed() {
        let text = MINIMAL.replace("master_seed = 3", "");
        let cfg = ExperimentConfig::from_toml_str(&text, &[], Path::new("/b")).unwrap();
        for r in [cmd_ablate(&cfg).map(|_| ()), cmd_dose(&cfg).map(|_| ()), cmd_patch(&cfg).map(|_| ())] {
            assert!(matches!(r, Err(Error::Config(m)) if m.contains("master seed")));
        }
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, &[], Path::new("/b")).unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text, &[], Path::new("/elsewhere")).unwrap(), cfg);
    }
}
