// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic fixtures with known ground truth.
//!
//! * `planted-regression`: features with one planted unit direction `w*`
//!   that carries the target.
//! * `identity-carry`: a tiny encoder whose blocks are identity maps, with
//!   the same planted probe at every layer. Anything patched in at layer L
//!   must arrive unchanged at every later layer.
//! * `tiny-encoder`: a tiny random encoder, two small synthetic datasets in
//!   the expected on-disk layout, and a ready-to-run `config.toml`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{random_init, EncoderConfig, NamedTensorStore};
use crate::error::{Error, Result};
use crate::interventions::ContrastPair;
use crate::labels::Task;
use crate::pipeline::{DataConfig, ExperimentConfig, GridConfig, InterventionConfig, WeightsConfig};
use crate::probe::{ProbeCheckpoint, ProbeConfig, ProbeKind, Samples};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixtureKind {
    PlantedRegression,
    IdentityCarry,
    TinyEncoder,
}

impl fmt::Display for FixtureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FixtureKind::PlantedRegression => "planted-regression",
            FixtureKind::IdentityCarry => "identity-carry",
            FixtureKind::TinyEncoder => "tiny-encoder",
        })
    }
}

impl std::str::FromStr for FixtureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planted-regression" => Ok(FixtureKind::PlantedRegression),
            "identity-carry" => Ok(FixtureKind::IdentityCarry),
            "tiny-encoder" => Ok(FixtureKind::TinyEncoder),
            other => Err(Error::Config(format!("unknown fixture `{other}`"))),
        }
    }
}

/// Description of a generated fixture, written as `fixture.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFixture {
    pub kind: FixtureKind,
    pub seed: u64,
    pub encoder: Option<EncoderConfig>,
    /// Planted unit direction per layer.
    pub planted: BTreeMap<usize, Vec<f64>>,
    pub label_rule: String,
    /// Files written, relative to the fixture directory.
    pub files: Vec<String>,
}

/// Shape of a planted-regression dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub width: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Variance of the planted signal over the variance of the target noise.
    pub snr: f64,
    /// Per-coordinate standard deviation of the features off `w*`.
    pub off_axis_std: f64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            width: 64,
            n_train: 5000,
            n_val: 1000,
            n_test: 1000,
            snr: 10.0,
            off_axis_std: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedData {
    pub w_star: Vec<f64>,
    pub train: Samples,
    pub val: Samples,
    pub test: Samples,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

/// `h = s·w* + ν` with `s ~ N(0, 1)` and `ν` Gaussian in the orthogonal
/// complement of `w*`; the target is `y = s + ε` with `Var ε = 1/snr`.
pub fn planted_regression(seed: u64, spec: &PlantedSpec) -> Result<PlantedData> {
    if spec.width < 2 || spec.snr <= 0.0 {
        return Err(Error::Config("planted regression needs width ≥ 2 and snr > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_star = unit_gaussian(&mut rng, spec.width);
    let noise = Normal::new(0.0, (1.0 / spec.snr).sqrt()).expect("positive std");
    let mut split = |n: usize| -> Result<Samples> {
        let mut feats = Vec::with_capacity(n * spec.width);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let s: f64 = StandardNormal.sample(&mut rng);
            let g: Vec<f64> = (0..spec.width).map(|_| StandardNormal.sample(&mut rng)).collect();
            let along: f64 = g.iter().zip(&w_star).map(|(a, b)| a * b).sum();
            feats.extend(
                g.iter()
                    .zip(&w_star)
                    .map(|(gi, wi)| (s * wi + spec.off_axis_std * (gi - along * wi)) as f32),
            );
            targets.push((s + noise.sample(&mut rng)) as f32);
        }
        Samples::new(spec.width, feats, targets)
    };
    let train = split(spec.n_train)?;
    let val = split(spec.n_val)?;
    let test = split(spec.n_test)?;
    Ok(PlantedData {
        w_star,
        train,
        val,
        test,
    })
}

/// Tiny encoder whose attention and MLP output projections are zero, so
/// every block returns its input unchanged.
pub fn identity_carry_store(seed: u64) -> Result<NamedTensorStore> {
    let cfg = EncoderConfig::tiny();
    let mut store = random_init(&cfg, seed)?;
    for l in 0..cfg.layers {
        for name in ["attention.output.dense", "output.dense"] {
            for part in ["weight", "bias"] {
                let key = format!("encoder.layer.{l}.{name}.{part}");
                let shape = store.get(&key)?.shape().to_vec();
                store.insert(key, Tensor::zeros(&shape)?);
            }
        }
    }
    store.metadata.insert("fixture".into(), "identity-carry".into());
    Ok(store)
}

/// Linear depth probes sharing one planted unit direction, zero bias, at
/// layers `0..=layers`.
pub fn planted_probes(width: usize, layers: usize, seed: u64) -> Result<(Vec<f64>, BTreeMap<usize, ProbeCheckpoint>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let w = unit_gaussian(&mut rng, width);
    let w32: Vec<f32> = w.iter().map(|&v| v as f32).collect();
    let probes = (0..=layers)
        .map(|l| {
            let cfg = ProbeConfig::new(ProbeKind::Linear, Task::Depth, l, width, seed);
            Ok((l, ProbeCheckpoint::linear(cfg, w32.clone(), 0.0)?))
        })
        .collect::<Result<_>>()?;
    Ok((w, probes))
}

/// In-memory identity-carry setup.
pub struct IdentityCarry {
    pub store: NamedTensorStore,
    pub w_star: Vec<f64>,
    pub probes: BTreeMap<usize, ProbeCheckpoint>,
    pub images: BTreeMap<String, Tensor>,
    pub pairs: Vec<ContrastPair>,
}

pub fn identity_carry(seed: u64, n_pairs: usize) -> Result<IdentityCarry> {
    let cfg = EncoderConfig::tiny();
    let store = identity_carry_store(seed)?;
    let (w_star, probes) = planted_probes(cfg.width, cfg.layers, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    let s = cfg.image_size;
    let images: BTreeMap<String, Tensor> = (0..2 * n_pairs)
        .map(|i| {
            let px = (0..3 * s * s).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            Ok((format!("img{i:03}"), Tensor::new(vec![3, s, s], px)?))
        })
        .collect::<Result<_>>()?;
    let pairs = (0..n_pairs)
        .map(|i| ContrastPair {
            src_image_id: format!("img{:03}", 2 * i),
            dst_image_id: format!("img{:03}", 2 * i + 1),
            mean_depth_gap: 0.0,
        })
        .collect();
    Ok(IdentityCarry {
        store,
        w_star,
        probes,
        images,
        pairs,
    })
}

fn write_samples(dir: &Path, name: &str, s: &Samples, files: &mut Vec<String>) -> Result<()> {
    let f = format!("{name}_features.f32");
    let t = format!("{name}_targets.f32");
    let bytes: Vec<u8> = s.features.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(dir.join(&f), bytes).map_err(|e| Error::io(dir.join(&f), e))?;
    let bytes: Vec<u8> = s.targets.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(dir.join(&t), bytes).map_err(|e| Error::io(dir.join(&t), e))?;
    files.push(f);
    files.push(t);
    Ok(())
}

fn save_png<P: image::Pixel<Subpixel = S> + image::PixelWithColorType, S: image::Primitive>(
    img: &ImageBuffer<P, Vec<S>>,
    path: &Path,
) -> Result<()>
where
    [S]: image::EncodableLayout,
{
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

const SCENE: u32 = 16;

/// A two-region scene split at column `edge`, with per-image colors.
fn scene_image(rng: &mut ChaCha8Rng, edge: u32, near: f32) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let left: [f32; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    let right: [f32; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    let noise: Vec<f32> = (0..SCENE * SCENE * 3).map(|_| rng.gen_range(-0.05..0.05)).collect();
    ImageBuffer::from_fn(SCENE, SCENE, |x, y| {
        let base = if x < edge { left } else { right };
        // Brightness falls with depth, which grows towards the top rows.
        let shade = 0.4 + 0.6 * near * (y as f32 + 1.0) / SCENE as f32;
        let i = ((y * SCENE + x) * 3) as usize;
        Rgb([0, 1, 2].map(|c| ((base[c] * shade + noise[i + c]).clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

fn write_tiny_encoder(dir: &Path, seed: u64, files: &mut Vec<String>) -> Result<EncoderConfig> {
    let cfg = EncoderConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3]));
    let weights = dir.join("weights");
    std::fs::create_dir_all(&weights).map_err(|e| Error::io(&weights, e))?;
    let mut store = random_init(&cfg, derive_seed(seed, &[4]))?;
    store.metadata.remove("init");
    store.metadata.remove("seed");
    store.save(&weights.join("tiny.safetensors"))?;
    let sidecar: BTreeMap<String, serde_json::Value> = cfg
        .to_metadata()
        .into_iter()
        .map(|(k, v)| {
            let val = match (v.parse::<u64>(), v.parse::<f64>()) {
                (Ok(i), _) => serde_json::Value::from(i),
                (_, Ok(f)) => serde_json::Value::from(f),
                _ => serde_json::Value::String(v),
            };
            (k, val)
        })
        .collect();
    let text = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(weights.join("tiny.json"), text + "\n").map_err(|e| Error::io(weights.join("tiny.json"), e))?;
    files.push("weights/tiny.safetensors".into());
    files.push("weights/tiny.json".into());

    // Boundary dataset: three annotators trace the region edge with jitter.
    let bsds = dir.join("data/bsds");
    for (split, n) in [("train", 12), ("val", 4), ("test", 8)] {
        for i in 0..n {
            let id = format!("{split}{i:02}");
            let edge = rng.gen_range(3..SCENE - 3);
            let img = scene_image(&mut rng, edge, 1.0);
            let rel = format!("data/bsds/images/{split}/{id}.png");
            save_png(&img, &dir.join(&rel))?;
            files.push(rel);
            for a in 0..3 {
                let col = (edge as i32 + rng.gen_range(-1..=1)).clamp(0, SCENE as i32 - 1) as u32;
                let gt: ImageBuffer<Luma<u8>, Vec<u8>> =
                    ImageBuffer::from_fn(SCENE, SCENE, |x, _| Luma([if x == col { 255 } else { 0 }]));
                let rel = format!("data/bsds/groundTruth/{split}/{id}/annotator{a}.png");
                save_png(&gt, &dir.join(&rel))?;
                files.push(rel);
            }
        }
    }
    debug_assert!(bsds.is_dir());

    // Depth dataset: no val split (it is carved from train), depth grows
    // upwards with a per-image scale, and a few pixels are invalid.
    for (split, n) in [("train", 16), ("test", 8)] {
        for i in 0..n {
            let id = format!("{split}{i:02}");
            let near = rng.gen_range(0.3f32..1.0);
            let edge = rng.gen_range(3..SCENE - 3);
            let img = scene_image(&mut rng, edge, near);
            let rel = format!("data/nyu/images/{split}/{id}.png");
            save_png(&img, &dir.join(&rel))?;
            files.push(rel);
            let holes: Vec<bool> = (0..SCENE * SCENE).map(|_| rng.gen_bool(0.05)).collect();
            let depth: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(SCENE, SCENE, |x, y| {
                if holes[(y * SCENE + x) as usize] {
                    return Luma([0]);
                }
                let metres = 1.0 + 8.0 * (1.0 - near) * (SCENE - y) as f32 / SCENE as f32;
                Luma([(metres * 1000.0).round() as u16])
            });
            let rel = format!("data/nyu/depth/{split}/{id}.png");
            save_png(&depth, &dir.join(&rel))?;
            files.push(rel);
        }
    }
    Ok(cfg)
}

/// Pipeline config for the tiny-encoder fixture, with paths relative to
/// the fixture directory.
pub fn tiny_pipeline_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        master_seed: Some(seed),
        workers: 0,
        cache_dir: "cache".into(),
        results_dir: "results".into(),
        weights: WeightsConfig {
            pretrained: "weights/tiny.safetensors".into(),
            random_seed: derive_seed(seed, &[5]) & 0xffff_ffff,
        },
        data: DataConfig {
            boundary_root: Some("data/bsds".into()),
            depth_root: Some("data/nyu".into()),
            boundary_carve_val: None,
            depth_carve_val: Some(4),
        },
        labels: Default::default(),
        grid: GridConfig {
            hidden_width: 8,
            batch_size: 16,
            max_epochs: 30,
            patience: 5,
            ..GridConfig::default()
        },
        interventions: InterventionConfig {
            pairs: 4,
            ..InterventionConfig::default()
        },
    }
}

/// Writes fixture `kind` into `dir` and returns its description.
pub fn make_fixture(kind: FixtureKind, seed: u64, dir: &Path) -> Result<SyntheticFixture> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let fixture = match kind {
        FixtureKind::PlantedRegression => {
            let spec = PlantedSpec::default();
            let data = planted_regression(seed, &spec)?;
            for (name, s) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
                write_samples(dir, name, s, &mut files)?;
            }
            SyntheticFixture {
                kind,
                seed,
                encoder: None,
                planted: BTreeMap::from([(0, data.w_star)]),
                label_rule: format!(
                    "h = s*w + nu (nu off-axis, std {}), y = s + eps, snr {}; width {}, {}/{}/{} samples",
                    spec.off_axis_std, spec.snr, spec.width, spec.n_train, spec.n_val, spec.n_test
                ),
                files,
            }
        }
        FixtureKind::IdentityCarry => {
            let ic = identity_carry(seed, 4)?;
            ic.store.save(&dir.join("identity.safetensors"))?;
            files.push("identity.safetensors".into());
            for (l, p) in &ic.probes {
                let rel = format!("probes/L{l}.ckpt");
                std::fs::create_dir_all(dir.join("probes")).map_err(|e| Error::io(dir.join("probes"), e))?;
                p.save(&dir.join(&rel))?;
                files.push(rel);
            }
            for (id, t) in &ic.images {
                let rel = format!("inputs/{id}.f32");
                std::fs::create_dir_all(dir.join("inputs")).map_err(|e| Error::io(dir.join("inputs"), e))?;
                let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                std::fs::write(dir.join(&rel), bytes).map_err(|e| Error::io(dir.join(&rel), e))?;
                files.push(rel);
            }
            let cfg = EncoderConfig::tiny();
            SyntheticFixture {
                kind,
                seed,
                planted: (0..=cfg.layers).map(|l| (l, ic.w_star.clone())).collect(),
                encoder: Some(cfg),
                label_rule: "identity blocks; one planted probe direction shared by every layer".into(),
                files,
            }
        }
        FixtureKind::TinyEncoder => {
            let cfg = write_tiny_encoder(dir, seed, &mut files)?;
            let text = tiny_pipeline_config(seed).to_toml_string()?;
            std::fs::write(dir.join("config.toml"), text).map_err(|e| Error::io(dir.join("config.toml"), e))?;
            files.push("config.toml".into());
            SyntheticFixture {
                kind,
                seed,
                encoder: Some(cfg),
                planted: BTreeMap::new(),
                label_rule: "two-region scenes; annotators trace the region edge; depth grows upwards".into(),
                files,
            }
        }
    };
    let path = dir.join("fixture.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&fixture)?).map_err(|e| Error::io(&path, e))?;
    Ok(fixture)
}

/// Path of the pipeline config written by the tiny-encoder fixture.
pub fn tiny_config_path(dir: &Path) -> PathBuf {
    dir.join("config.toml")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{load_weights, Encoder, InitKind};
    use crate::interventions::{influence_matrix, PatchMode, PatchingSpec, DEFAULT_GUARD_EPSILON};

    #[test]
    fn planted_regression_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let fa = make_fixture(FixtureKind::PlantedRegression, 1, a.path()).unwrap();
        let fb = make_fixture(FixtureKind::PlantedRegression, 1, b.path()).unwrap();
        assert_eq!(fa, fb);
        for f in fa.files.iter().chain(["fixture.json".to_string()].iter()) {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
        let w = &fa.planted[&0];
        assert!((w.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn planted_features_have_the_stated_structure() {
        let spec = PlantedSpec {
            n_train: 4000,
            n_val: 10,
            n_test: 10,
            ..PlantedSpec::default()
        };
        let d = planted_regression(2, &spec).unwrap();
        let n = d.train.len() as f64;
        let (mut err2, mut sig2) = (0.0, 0.0);
        for i in 0..d.train.len() {
            let s: f64 = d.train.row(i).iter().zip(&d.w_star).map(|(&h, w)| h as f64 * w).sum();
            sig2 += s * s;
            err2 += (d.train.targets[i] as f64 - s).powi(2);
        }
        assert!((sig2 / n - 1.0).abs() < 0.1);
        assert!((err2 / n - 0.1).abs() < 0.02);
    }

    #[test]
    fn identity_carry_preserves_patches_downstream() {
        let ic = identity_carry(5, 3).unwrap();
        let enc = Encoder::from_store(&ic.store, InitKind::Pretrained).unwrap();
        let spec = PatchingSpec {
            layers: vec![0, 1, 2],
            guard_epsilon: DEFAULT_GUARD_EPSILON,
            mode: PatchMode::AllPositions,
        };
        let m = influence_matrix(&enc, &ic.images, &ic.pairs, &ic.probes, &spec).unwrap();
        for c in &m.cells {
            assert!((c.effect - 1.0).abs() < 1e-4, "({}, {}): {}", c.layer, c.target, c.effect);
        }
    }

    #[test]
    fn tiny_encoder_fixture_loads_like_any_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let f = make_fixture(FixtureKind::TinyEncoder, 3, dir.path()).unwrap();
        let store = load_weights(&dir.path().join("weights/tiny.safetensors")).unwrap();
        let enc = Encoder::from_store(&store, InitKind::Pretrained).unwrap();
        assert_eq!(Some(enc.config()), f.encoder.as_ref());
        let cfg = ExperimentConfig::load(&tiny_config_path(dir.path()), &[]).unwrap();
        assert_eq!(cfg.master_seed, Some(3));
        assert!(cfg.data.boundary_root.unwrap().join("images/train/train00.png").is_file());
    }
}
