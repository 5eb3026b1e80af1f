// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear and MLP probes on frozen patch activations.
//!
//! Training uses Adam with decoupled weight decay, mini-batches drawn from a
//! seed-derived shuffle, and early stopping on the task's validation metric
//! (F1 at 0.5 for boundaries, MAE for depth). Parameters from the best
//! validation epoch are returned.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::Task;
use crate::metrics;
use crate::seed::fnv1a;
use crate::tensor::{dot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Linear,
    Mlp,
}

impl ProbeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Probe architecture and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub task: Task,
    pub layer: usize,
    pub input_width: usize,
    pub hidden_width: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Train on per-feature standardized inputs, then fold the scaling back
    /// into the returned weights so the checkpoint reads raw activations.
    #[serde(default)]
    pub standardize: bool,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl ProbeConfig {
    pub fn new(kind: ProbeKind, task: Task, layer: usize, input_width: usize, seed: u64) -> Self {
        Self {
            kind,
            task,
            layer,
            input_width,
            hidden_width: 256,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 512,
            max_epochs: 100,
            patience: 10,
            seed,
            standardize: false,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ProbeKind::Linear => self.input_width + 1,
            ProbeKind::Mlp => self.input_width * self.hidden_width + 2 * self.hidden_width + 1,
        }
    }
}

/// Probe parameters as stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeParams {
    Linear { w: Vec<f32>, b: f32 },
    /// `w1` is `hidden × input`, row-major.
    Mlp { w1: Vec<f32>, b1: Vec<f32>, w2: Vec<f32>, b2: f32 },
}

impl ProbeParams {
    pub fn predict(&self, h: &[f32]) -> f64 {
        match self {
            ProbeParams::Linear { w, b } => dot(w, h) + *b as f64,
            ProbeParams::Mlp { w1, b1, w2, b2 } => {
                let d = h.len();
                let mut out = *b2 as f64;
                for (j, row) in w1.chunks(d).enumerate() {
                    let a = dot(row, h) + b1[j] as f64;
                    if a > 0.0 {
                        out += w2[j] as f64 * a;
                    }
                }
                out
            }
        }
    }

    fn flatten(&self) -> Vec<f32> {
        match self {
            ProbeParams::Linear { w, b } => w.iter().copied().chain([*b]).collect(),
            ProbeParams::Mlp { w1, b1, w2, b2 } => w1
                .iter()
                .chain(b1)
                .chain(w2)
                .copied()
                .chain([*b2])
                .collect(),
        }
    }

    fn unflatten(cfg: &ProbeConfig, flat: &[f32]) -> Result<Self> {
        if flat.len() != cfg.param_count() {
            return Err(Error::Data(format!(
                "checkpoint holds {} parameters, config needs {}",
                flat.len(),
                cfg.param_count()
            )));
        }
        let d = cfg.input_width;
        Ok(match cfg.kind {
            ProbeKind::Linear => ProbeParams::Linear {
                w: flat[..d].to_vec(),
                b: flat[d],
            },
            ProbeKind::Mlp => {
                let h = cfg.hidden_width;
                ProbeParams::Mlp {
                    w1: flat[..h * d].to_vec(),
                    b1: flat[h * d..h * d + h].to_vec(),
                    w2: flat[h * d + h..h * d + 2 * h].to_vec(),
                    b2: flat[h * d + 2 * h],
                }
            }
        })
    }
}

/// A trained probe with its training record.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCheckpoint {
    pub config: ProbeConfig,
    pub params: ProbeParams,
    /// Index into `val_history` of the epoch whose parameters were kept.
    pub best_epoch: usize,
    pub val_history: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub metadata: BTreeMap<String, String>,
}

fn default_metadata(cfg: &ProbeConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("optimizer".into(), "adam".into());
    m.insert("weight_decay_mode".into(), "decoupled".into());
    m.insert("adam_betas".into(), format!("{ADAM_BETA1},{ADAM_BETA2}"));
    m.insert("adam_eps".into(), format!("{ADAM_EPS:e}"));
    m.insert("standardize".into(), cfg.standardize.to_string());
    if cfg.kind == ProbeKind::Mlp {
        m.insert("hidden_activation".into(), "relu".into());
    }
    m
}

impl ProbeCheckpoint {
    /// A linear probe with fixed weights, e.g. a planted direction.
    pub fn linear(config: ProbeConfig, w: Vec<f32>, b: f32) -> Result<Self> {
        if config.kind != ProbeKind::Linear || w.len() != config.input_width {
            return Err(Error::Contract(format!(
                "linear probe needs {} weights, got {} for a {} config",
                config.input_width,
                w.len(),
                config.kind
            )));
        }
        let metadata = default_metadata(&config);
        Ok(Self {
            config,
            params: ProbeParams::Linear { w, b },
            best_epoch: 0,
            val_history: Vec::new(),
            train_loss: Vec::new(),
            metadata,
        })
    }

    /// The weight vector a linear probe reads; `None` for MLPs.
    pub fn direction(&self) -> Option<&[f32]> {
        match &self.params {
            ProbeParams::Linear { w, .. } => Some(w),
            ProbeParams::Mlp { .. } => None,
        }
    }

    pub fn bias(&self) -> f32 {
        match &self.params {
            ProbeParams::Linear { b, .. } => *b,
            ProbeParams::Mlp { b2, .. } => *b2,
        }
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    /// Raw output for one activation vector: a logit for boundaries, a
    /// normalized depth for depth.
    pub fn predict(&self, h: &[f32]) -> Result<f64> {
        if h.len() != self.config.input_width {
            return Err(Error::Dimension(format!(
                "probe expects width {}, got {}",
                self.config.input_width,
                h.len()
            )));
        }
        Ok(self.params.predict(h))
    }

    /// Predictions for every row of a flat `[n × width]` buffer.
    pub fn predict_rows(&self, rows: &[f32]) -> Result<Vec<f64>> {
        let d = self.config.input_width;
        if rows.len() % d != 0 {
            return Err(Error::Dimension(format!(
                "{} values is not a multiple of probe width {d}",
                rows.len()
            )));
        }
        Ok(rows.par_chunks(d).map(|r| self.params.predict(r)).collect())
    }

    /// Writes the checkpoint: little-endian `u64` header length, the JSON
    /// header, then the parameters as little-endian `f32`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            best_epoch: self.best_epoch,
            val_history: self.val_history.clone(),
            train_loss: self.train_loss.clone(),
            metadata: self.metadata.clone(),
            layout: self.layout(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + 4 * self.param_count());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |why: &str| Error::Format(format!("{}: {why}", path.display()));
        if bytes.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(8..8 + n).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let blob = &bytes[8 + n..];
        if blob.len() % 4 != 0 {
            return Err(bad("parameter blob is not a whole number of f32"));
        }
        let flat: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let params = ProbeParams::unflatten(&header.config, &flat)?;
        Ok(Self {
            config: header.config,
            params,
            best_epoch: header.best_epoch,
            val_history: header.val_history,
            train_loss: header.train_loss,
            metadata: header.metadata,
        })
    }

    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.config;
        match c.kind {
            ProbeKind::Linear => vec![("weight".into(), vec![c.input_width]), ("bias".into(), vec![1])],
            ProbeKind::Mlp => vec![
                ("fc1.weight".into(), vec![c.hidden_width, c.input_width]),
                ("fc1.bias".into(), vec![c.hidden_width]),
                ("fc2.weight".into(), vec![c.hidden_width]),
                ("fc2.bias".into(), vec![1]),
            ],
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ProbeConfig,
    best_epoch: usize,
    val_history: Vec<f64>,
    train_loss: Vec<f64>,
    metadata: BTreeMap<String, String>,
    layout: Vec<(String, Vec<usize>)>,
}

/// Forward pass of a probe on one activation vector.
pub fn probe_forward(ckpt: &ProbeCheckpoint, h: &Tensor) -> Result<f64> {
    ckpt.predict(h.data())
}

/// Per-patch feature rows and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub width: usize,
    /// `[n × width]`, row-major.
    pub features: Vec<f32>,
    pub targets: Vec<f32>,
}

impl Samples {
    pub fn new(width: usize, features: Vec<f32>, targets: Vec<f32>) -> Result<Self> {
        if width == 0 || features.len() != width * targets.len() {
            return Err(Error::Dimension(format!(
                "{} feature values for {} targets of width {width}",
                features.len(),
                targets.len()
            )));
        }
        if features.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                location: "probe samples".into(),
            });
        }
        Ok(Self { width, features, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.width..(i + 1) * self.width]
    }

    /// Sample indices sorted by a content hash, so that training does not
    /// depend on the order samples were supplied in.
    fn canonical_order(&self) -> Vec<usize> {
        let mut keyed: Vec<(u64, usize)> = (0..self.len())
            .map(|i| {
                let mut bytes: Vec<u8> = self.row(i).iter().flat_map(|v| v.to_le_bytes()).collect();
                bytes.extend_from_slice(&self.targets[i].to_le_bytes());
                (fnv1a(&bytes), i)
            })
            .collect();
        // Equal hashes are (almost surely) identical rows, so the index
        // tie-break cannot change what is trained on.
        keyed.sort_unstable();
        keyed.into_iter().map(|(_, i)| i).collect()
    }
}

/// Flat `f64` parameter vector used during optimization.
///
/// Linear layout: `[w (d), b]`. MLP layout: `[W1 (h×d), b1 (h), w2 (h), b2]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Shape {
    kind: ProbeKind,
    d: usize,
    h: usize,
}

impl Shape {
    fn of(cfg: &ProbeConfig) -> Self {
        Self {
            kind: cfg.kind,
            d: cfg.input_width,
            h: cfg.hidden_width,
        }
    }

    fn len(&self) -> usize {
        match self.kind {
            ProbeKind::Linear => self.d + 1,
            ProbeKind::Mlp => self.d * self.h + 2 * self.h + 1,
        }
    }

    fn forward(&self, theta: &[f64], x: &[f32]) -> f64 {
        let d = self.d;
        match self.kind {
            ProbeKind::Linear => {
                theta[..d].iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>() + theta[d]
            }
            ProbeKind::Mlp => {
                let h = self.h;
                let (w1, rest) = theta.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(h);
                let mut out = b2[0];
                for j in 0..h {
                    let a: f64 = w1[j * d..(j + 1) * d].iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>() + b1[j];
                    if a > 0.0 {
                        out += w2[j] * a;
                    }
                }
                out
            }
        }
    }

    /// Adds `scale · ∂output/∂θ` at input `x` into `grad`.
    fn accumulate_grad(&self, theta: &[f64], x: &[f32], scale: f64, grad: &mut [f64]) {
        let d = self.d;
        match self.kind {
            ProbeKind::Linear => {
                for (g, &v) in grad[..d].iter_mut().zip(x) {
                    *g += scale * v as f64;
                }
                grad[d] += scale;
            }
            ProbeKind::Mlp => {
                let h = self.h;
                let w1 = &theta[..h * d];
                let b1 = &theta[h * d..h * d + h];
                let w2 = &theta[h * d + h..h * d + 2 * h];
                for j in 0..h {
                    let a: f64 = w1[j * d..(j + 1) * d].iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>() + b1[j];
                    if a > 0.0 {
                        grad[h * d + h + j] += scale * a;
                        let back = scale * w2[j];
                        for (g, &v) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                            *g += back * v as f64;
                        }
                        grad[h * d + j] += back;
                    }
                }
                grad[h * d + 2 * h] += scale;
            }
        }
    }
}

/// Loss value and `∂loss/∂output` for one prediction.
fn loss_and_slope(task: Task, out: f64, target: f64) -> (f64, f64) {
    match task {
        // Stable BCE with logits: max(z, 0) − z·y + ln(1 + e^−|z|).
        Task::Boundary => {
            let loss = out.max(0.0) - out * target + (-out.abs()).exp().ln_1p();
            (loss, sigmoid(out) - target)
        }
        Task::Depth => {
            let e = out - target;
            (e * e, 2.0 * e)
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

const GRAD_CHUNK: usize = 64;

/// Mean loss and gradient over the samples at `idx`. Rows are processed in
/// fixed chunks whose partial sums are combined in chunk order, so the
/// result does not depend on the number of worker threads.
pub(crate) fn batch_loss_and_grad(
    shape: Shape,
    task: Task,
    theta: &[f64],
    samples: &Samples,
    idx: &[usize],
) -> (f64, Vec<f64>) {
    let partials: Vec<(f64, Vec<f64>)> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; shape.len()];
            let mut loss = 0.0;
            for &i in chunk {
                let x = samples.row(i);
                let (l, slope) = loss_and_slope(task, shape.forward(theta, x), samples.targets[i] as f64);
                loss += l;
                shape.accumulate_grad(theta, x, slope, &mut grad);
            }
            (loss, grad)
        })
        .collect();
    let n = idx.len() as f64;
    let mut grad = vec![0.0; shape.len()];
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// Mean training loss and its gradient at the flat parameters `theta`,
/// over every sample. The layout is `[w, b]` for linear probes and
/// `[W1 (hidden × input, row-major), b1, w2, b2]` for MLPs.
pub fn loss_and_gradient(cfg: &ProbeConfig, theta: &[f64], samples: &Samples) -> Result<(f64, Vec<f64>)> {
    let shape = Shape::of(cfg);
    if theta.len() != shape.len() || samples.width != cfg.input_width {
        return Err(Error::Dimension(format!(
            "{} parameters and width {} for a probe expecting {} and {}",
            theta.len(),
            samples.width,
            shape.len(),
            cfg.input_width
        )));
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    Ok(batch_loss_and_grad(shape, cfg.task, theta, samples, &idx))
}

/// Validation metric for early stopping: F1 at 0.5 (maximize) for
/// boundaries, MAE (minimize) for depth.
pub fn validation_metric(task: Task, preds: &[f64], targets: &[f32]) -> Result<f64> {
    match task {
        Task::Boundary => {
            let scores: Vec<f64> = preds.iter().map(|&z| sigmoid(z)).collect();
            let labels: Vec<bool> = targets.iter().map(|&t| t >= 0.5).collect();
            Ok(metrics::thresholded_stats(&scores, &labels, 0.5).f1)
        }
        Task::Depth => {
            let t: Vec<f64> = targets.iter().map(|&v| v as f64).collect();
            Ok(metrics::regression_stats(preds, &t)?.mae)
        }
    }
}

fn improves(task: Task, candidate: f64, best: Option<f64>) -> bool {
    match best {
        None => true,
        Some(b) => match task {
            Task::Boundary => candidate > b,
            Task::Depth => candidate < b,
        },
    }
}

/// Per-feature mean and standard deviation (unit std for constant features).
fn feature_stats(samples: &Samples) -> (Vec<f64>, Vec<f64>) {
    let d = samples.width;
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for i in 0..samples.len() {
        for (m, &v) in mean.iter_mut().zip(samples.row(i)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for i in 0..samples.len() {
        for ((s, &v), m) in var.iter_mut().zip(samples.row(i)).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let std = var.iter().map(|s| (s / n).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
    (mean, std)
}

/// Converts optimizer state to stored parameters, folding standardization
/// `(x − μ)/σ` back into the input weights.
fn snapshot(shape: Shape, theta: &[f64], stats: Option<&(Vec<f64>, Vec<f64>)>) -> ProbeParams {
    let d = shape.d;
    let fold = |w: &[f64], b: f64| -> (Vec<f32>, f32) {
        match stats {
            None => (w.iter().map(|&v| v as f32).collect(), b as f32),
            Some((mean, std)) => {
                let raw: Vec<f64> = w.iter().zip(std).map(|(w, s)| w / s).collect();
                let shift: f64 = raw.iter().zip(mean).map(|(w, m)| w * m).sum();
                (raw.iter().map(|&v| v as f32).collect(), (b - shift) as f32)
            }
        }
    };
    match shape.kind {
        ProbeKind::Linear => {
            let (w, b) = fold(&theta[..d], theta[d]);
            ProbeParams::Linear { w, b }
        }
        ProbeKind::Mlp => {
            let h = shape.h;
            let mut w1 = Vec::with_capacity(h * d);
            let mut b1 = Vec::with_capacity(h);
            for j in 0..h {
                let (w, b) = fold(&theta[j * d..(j + 1) * d], theta[h * d + j]);
                w1.extend(w);
                b1.push(b);
            }
            ProbeParams::Mlp {
                w1,
                b1,
                w2: theta[h * d + h..h * d + 2 * h].iter().map(|&v| v as f32).collect(),
                b2: theta[h * d + 2 * h] as f32,
            }
        }
    }
}

fn init_theta(shape: Shape, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut theta = vec![0.0; shape.len()];
    let d = shape.d;
    match shape.kind {
        ProbeKind::Linear => {
            let a = 1.0 / (d as f64).sqrt();
            theta[..d].iter_mut().for_each(|w| *w = rng.gen_range(-a..a));
        }
        ProbeKind::Mlp => {
            let h = shape.h;
            let a1 = 1.0 / (d as f64).sqrt();
            theta[..h * d].iter_mut().for_each(|w| *w = rng.gen_range(-a1..a1));
            let a2 = 1.0 / (h as f64).sqrt();
            theta[h * d + h..h * d + 2 * h].iter_mut().for_each(|w| *w = rng.gen_range(-a2..a2));
        }
    }
    theta
}

/// Adam with decoupled weight decay.
struct AdamW {
    lr: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (((p, g), m), v) in theta.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p *= 1.0 - self.lr * self.weight_decay;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Trains a probe on `train`, early-stopping on `val`.
pub fn train_probe(train: &Samples, val: &Samples, cfg: &ProbeConfig) -> Result<ProbeCheckpoint> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "probe (layer {}) needs non-empty train and val splits ({} / {})",
            cfg.layer,
            train.len(),
            val.len()
        )));
    }
    if train.width != cfg.input_width || val.width != cfg.input_width {
        return Err(Error::Dimension(format!(
            "probe width {} but samples have width {} / {}",
            cfg.input_width, train.width, val.width
        )));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config("batch_size and max_epochs must be positive".into()));
    }
    let shape = Shape::of(cfg);
    let stats = cfg.standardize.then(|| feature_stats(train));
    let standardized;
    let train = match &stats {
        Some((mean, std)) => {
            let features = train
                .features
                .chunks(train.width)
                .flat_map(|r| r.iter().zip(mean).zip(std).map(|((&v, m), s)| ((v as f64 - m) / s) as f32))
                .collect();
            standardized = Samples::new(train.width, features, train.targets.clone())?;
            &standardized
        }
        None => train,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = init_theta(shape, &mut rng);
    let mut opt = AdamW::new(shape.len(), cfg.lr, cfg.weight_decay);
    let mut order = train.canonical_order();
    let val_order = val.canonical_order();
    let val_rows: Vec<f32> = val_order.iter().flat_map(|&i| val.row(i).iter().copied()).collect();
    let val_targets: Vec<f32> = val_order.iter().map(|&i| val.targets[i]).collect();

    let mut val_history = Vec::new();
    let mut train_loss = Vec::new();
    let mut best: Option<(f64, usize, ProbeParams)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = batch_loss_and_grad(shape, cfg.task, &theta, train, batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric {
                    location: format!("probe training loss, layer {} epoch {epoch}", cfg.layer),
                });
            }
            epoch_loss += loss * batch.len() as f64;
            opt.step(&mut theta, &grad);
        }
        train_loss.push(epoch_loss / train.len() as f64);

        let params = snapshot(shape, &theta, stats.as_ref());
        let preds: Vec<f64> = val_rows.par_chunks(cfg.input_width).map(|r| params.predict(r)).collect();
        let metric = validation_metric(cfg.task, &preds, &val_targets)?;
        if !metric.is_finite() {
            return Err(Error::Numeric {
                location: format!("validation metric, layer {} epoch {epoch}", cfg.layer),
            });
        }
        val_history.push(metric);
        if improves(cfg.task, metric, best.as_ref().map(|b| b.0)) {
            best = Some((metric, epoch, params));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(ProbeCheckpoint {
        config: cfg.clone(),
        params,
        best_epoch,
        val_history,
        train_loss,
        metadata: default_metadata(cfg),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn planted(seed: u64, n: usize, d: usize, noise: f64) -> (Samples, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f32> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = w.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() as f32;
        let w: Vec<f32> = w.iter().map(|v| v / norm).collect();
        let mut feats = Vec::with_capacity(n * d);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f32> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let e: f64 = StandardNormal.sample(&mut rng);
            targets.push((dot(&w, &x) + noise * e) as f32);
            feats.extend(x);
        }
        (Samples::new(d, feats, targets).unwrap(), w)
    }

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    }

    #[test]
    fn parameter_counts() {
        let lin = ProbeConfig::new(ProbeKind::Linear, Task::Depth, 0, 768, 0);
        let mlp = ProbeConfig::new(ProbeKind::Mlp, Task::Depth, 0, 768, 0);
        assert_eq!(lin.param_count(), 769);
        assert_eq!(mlp.param_count(), 768 * 256 + 256 + 256 + 1);
        assert_eq!(mlp.param_count(), 197_121);
        assert_eq!(Shape::of(&mlp).len(), 197_121);
    }

    #[test]
    fn linear_forward_cases() {
        let cfg = ProbeConfig::new(ProbeKind::Linear, Task::Depth, 0, 4, 0);
        let zero = ProbeCheckpoint::linear(cfg.clone(), vec![0.0; 4], 0.7).unwrap();
        assert!((zero.predict(&[1.0, -2.0, 3.0, 4.0]).unwrap() - 0.7f32 as f64).abs() < 1e-12);
        let ortho = ProbeCheckpoint::linear(cfg.clone(), vec![1.0, 1.0, 0.0, 0.0], 0.25).unwrap();
        assert_eq!(ortho.predict(&[1.0, -1.0, 5.0, 6.0]).unwrap(), 0.25);
        let w = [0.3f32, -1.2, 0.05, 2.0];
        let h = [1.5f32, 0.25, -3.0, 0.125];
        let p = ProbeCheckpoint::linear(cfg, w.to_vec(), -0.4).unwrap();
        let mut expect = -0.4f32 as f64;
        for i in 0..4 {
            expect += w[i] as f64 * h[i] as f64;
        }
        assert!((p.predict(&h).unwrap() - expect).abs() < 1e-7);
        assert!(matches!(p.predict(&[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn mlp_forward_matches_manual() {
        let mut cfg = ProbeConfig::new(ProbeKind::Mlp, Task::Depth, 0, 2, 0);
        cfg.hidden_width = 2;
        let flat = [1.0, 0.0, 0.0, -1.0, 0.5, 0.0, 2.0, 3.0, 0.1];
        let params = ProbeParams::unflatten(&cfg, &flat).unwrap();
        // hidden = relu([x0 + 0.5, -x1]) → [1.5, 0] at x = (1, 2)
        assert!((params.predict(&[1.0, 2.0]) - (2.0 * 1.5 + 0.1f32 as f64)).abs() < 1e-7);
    }

    fn finite_difference_check(kind: ProbeKind, task: Task, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(2..6);
        let mut cfg = ProbeConfig::new(kind, task, 0, d, seed);
        cfg.hidden_width = 3;
        let shape = Shape::of(&cfg);
        let theta: Vec<f64> = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = 5;
        let feats: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let targets: Vec<f32> = (0..n)
            .map(|_| if task == Task::Boundary { rng.gen_range(0..2) as f32 } else { rng.gen() })
            .collect();
        let s = Samples::new(d, feats, targets).unwrap();
        let idx: Vec<usize> = (0..n).collect();
        let (_, grad) = batch_loss_and_grad(shape, task, &theta, &s, &idx);
        let h = 1e-6;
        for k in 0..shape.len() {
            let mut plus = theta.clone();
            plus[k] += h;
            let mut minus = theta.clone();
            minus[k] -= h;
            let fd = (batch_loss_and_grad(shape, task, &plus, &s, &idx).0
                - batch_loss_and_grad(shape, task, &minus, &s, &idx).0)
                / (2.0 * h);
            let denom = fd.abs().max(grad[k].abs()).max(1e-8);
            assert!((fd - grad[k]).abs() / denom < 1e-4 || (fd - grad[k]).abs() < 1e-8, "{kind} {task} k={k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            finite_difference_check(ProbeKind::Linear, Task::Depth, seed);
            finite_difference_check(ProbeKind::Linear, Task::Boundary, seed);
            finite_difference_check(ProbeKind::Mlp, Task::Depth, seed);
            finite_difference_check(ProbeKind::Mlp, Task::Boundary, seed);
        }
    }

    #[test]
    fn recovers_planted_regression() {
        let (train, w) = planted(1, 4000, 16, 0.0);
        let (val, _) = {
            let (mut v, _) = planted(2, 500, 16, 0.0);
            // Same planted direction, fresh inputs.
            v.targets = (0..v.len()).map(|i| dot(&w, v.row(i)) as f32).collect();
            (v, ())
        };
        let mut cfg = ProbeConfig::new(ProbeKind::Linear, Task::Depth, 0, 16, 3);
        cfg.batch_size = 32;
        let ckpt = train_probe(&train, &val, &cfg).unwrap();
        assert!(cosine(ckpt.direction().unwrap(), &w) > 0.99);
        let preds = ckpt.predict_rows(&val.features).unwrap();
        let t: Vec<f64> = val.targets.iter().map(|&v| v as f64).collect();
        let mae = metrics::regression_stats(&preds, &t).unwrap().mae;
        assert!(mae < 1e-3, "{mae} {:?}", ckpt.val_history);
        assert!(ckpt.train_loss[1] < ckpt.train_loss[0]);
    }

    #[test]
    fn separable_boundary_task_reaches_perfect_f1() {
        let (mut train, w) = planted(4, 2000, 8, 0.0);
        let (mut val, _) = planted(5, 400, 8, 0.0);
        for s in [&mut train, &mut val] {
            // Push every point at least 0.5 away from the separating plane.
            for i in 0..s.len() {
                let m = dot(&w, s.row(i)) as f32;
                let shift = if m >= 0.0 { 0.5 } else { -0.5 };
                for (v, wk) in s.features[i * 8..(i + 1) * 8].iter_mut().zip(&w) {
                    *v += shift * wk;
                }
            }
            s.targets = (0..s.len()).map(|i| if dot(&w, s.row(i)) > 0.0 { 1.0 } else { 0.0 }).collect();
        }
        let mut cfg = ProbeConfig::new(ProbeKind::Linear, Task::Boundary, 0, 8, 6);
        cfg.batch_size = 32;
        let ckpt = train_probe(&train, &val, &cfg).unwrap();
        let first_perfect = ckpt.val_history.iter().position(|&f| f == 1.0);
        assert!(matches!(first_perfect, Some(e) if e < 100), "{:?}", ckpt.val_history);
    }

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let (train, _) = planted(7, 600, 6, 0.5);
        let (val, _) = planted(8, 200, 6, 0.5);
        let mut cfg = ProbeConfig::new(ProbeKind::Linear, Task::Depth, 0, 6, 9);
        cfg.patience = 3;
        let ckpt = train_probe(&train, &val, &cfg).unwrap();
        let best = ckpt.val_history[ckpt.best_epoch];
        assert!(ckpt.val_history.iter().all(|&m| m >= best));
        assert_eq!(ckpt.val_history.iter().position(|&m| m == best), Some(ckpt.best_epoch));
        if ckpt.val_history.len() < cfg.max_epochs {
            assert_eq!(ckpt.val_history.len(), ckpt.best_epoch + cfg.patience + 1);
        }
        // The kept parameters reproduce the best validation metric.
        let preds = ckpt.predict_rows(&val.features).unwrap();
        let again = validation_metric(Task::Depth, &preds, &val.targets).unwrap();
        assert!((again - best).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_and_order_invariant() {
        let (train, _) = planted(10, 700, 5, 0.3);
        let (val, _) = planted(11, 100, 5, 0.3);
        let cfg = ProbeConfig::new(ProbeKind::Mlp, Task::Depth, 0, 5, 12);
        let mut cfg = cfg;
        cfg.hidden_width = 8;
        cfg.max_epochs = 5;
        let a = train_probe(&train, &val, &cfg).unwrap();
        let b = train_probe(&train, &val, &cfg).unwrap();
        assert_eq!(a, b);
        let mut perm: Vec<usize> = (0..train.len()).collect();
        perm.reverse();
        let shuffled = Samples::new(
            5,
            perm.iter().flat_map(|&i| train.row(i).to_vec()).collect(),
            perm.iter().map(|&i| train.targets[i]).collect(),
        )
        .unwrap();
        let c = train_probe(&shuffled, &val, &cfg).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn standardization_folds_back_to_raw_space() {
        let (mut train, w) = planted(13, 3000, 6, 0.0);
        let (mut val, _) = planted(14, 300, 6, 0.0);
        for s in [&mut train, &mut val] {
            for (k, v) in s.features.iter_mut().enumerate() {
                *v = *v * (1 + k % 6) as f32 + 3.0;
            }
            s.targets = (0..s.len()).map(|i| (dot(&w, s.row(i)) * 0.1) as f32).collect();
        }
        let mut cfg = ProbeConfig::new(ProbeKind::Linear, Task::Depth, 0, 6, 15);
        cfg.standardize = true;
        cfg.batch_size = 32;
        let ckpt = train_probe(&train, &val, &cfg).unwrap();
        let preds = ckpt.predict_rows(&val.features).unwrap();
        let again = validation_metric(Task::Depth, &preds, &val.targets).unwrap();
        assert!((again - ckpt.val_history[ckpt.best_epoch]).abs() < 1e-9);
        assert!(again < 0.02, "{again}");
    }

    #[test]
    fn empty_split_is_data_error() {
        let (train, _) = planted(16, 10, 3, 0.0);
        let empty = Samples::new(3, vec![], vec![]).unwrap();
        let cfg = ProbeConfig::new(ProbeKind::Linear, Task::Depth, 0, 3, 0);
        assert!(matches!(train_probe(&train, &empty, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn divergence_is_numeric_error() {
        let (train, _) = planted(17, 50, 3, 0.0);
        let mut cfg = ProbeConfig::new(ProbeKind::Linear, Task::Depth, 0, 3, 0);
        cfg.lr = 1e300;
        let huge = Samples::new(3, vec![1e30; 150], vec![1e30; 50]).unwrap();
        assert!(matches!(train_probe(&huge, &train, &cfg), Err(Error::Numeric { .. })));
    }

    #[test]
    fn checkpoint_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = planted(18, 300, 4, 0.1);
        let (val, _) = planted(19, 60, 4, 0.1);
        let mut cfg = ProbeConfig::new(ProbeKind::Mlp, Task::Boundary, 3, 4, 20);
        cfg.hidden_width = 5;
        cfg.max_epochs = 3;
        let mut train_b = train.clone();
        train_b.targets = train.targets.iter().map(|&t| if t > 0.0 { 1.0 } else { 0.0 }).collect();
        let mut val_b = val.clone();
        val_b.targets = val.targets.iter().map(|&t| if t > 0.0 { 1.0 } else { 0.0 }).collect();
        let ckpt = train_probe(&train_b, &val_b, &cfg).unwrap();
        let path = dir.path().join("p.ckpt");
        ckpt.save(&path).unwrap();
        assert_eq!(ProbeCheckpoint::load(&path).unwrap(), ckpt);
        assert_eq!(ckpt.metadata["hidden_activation"], "relu");
    }
}
