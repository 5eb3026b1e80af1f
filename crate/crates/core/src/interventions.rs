// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal tests of probe directions: projecting a direction out of hidden
//! states, graded ablation, and swapping one direction's component between
//! images inside the encoder.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, HiddenStateStack, InterventionHook};
use crate::error::{Error, Result};
use crate::labels::{PatchLabelSet, Task};
use crate::metrics;
use crate::probe::{ProbeCheckpoint, Samples};
use crate::seed::derive_seed;
use crate::tensor::{dot_mixed, Tensor};

/// Tolerance on `‖ŵ‖ = 1` for directions supplied from outside.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DirectionSource {
    Probe,
    Random { seed: u64 },
}

/// A unit direction in a layer's hidden space, held in `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSpec {
    pub layer: usize,
    pub unit_vector: Vec<f64>,
    pub source: DirectionSource,
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::Contract("cannot normalize a zero or non-finite direction".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

impl DirectionSpec {
    /// Wraps an already-unit vector; anything further than
    /// [`UNIT_TOLERANCE`] from unit norm is rejected.
    pub fn new(layer: usize, unit_vector: Vec<f64>, source: DirectionSource) -> Result<Self> {
        let n = unit_vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::Contract(format!("direction norm {n}, expected 1")));
        }
        Ok(Self {
            layer,
            unit_vector,
            source,
        })
    }

    /// `ŵ = w/‖w‖` for a linear probe.
    pub fn from_probe(probe: &ProbeCheckpoint) -> Result<Self> {
        let w = probe
            .direction()
            .ok_or_else(|| Error::Contract("direction ablation needs a linear probe".into()))?;
        let w: Vec<f64> = w.iter().map(|&v| v as f64).collect();
        Ok(Self {
            layer: probe.config.layer,
            unit_vector: normalized(&w)?,
            source: DirectionSource::Probe,
        })
    }

    /// Standard normal sample, normalized: uniform on the sphere.
    pub fn random(layer: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..width).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self {
            layer,
            unit_vector: normalized(&v).expect("a gaussian sample is nonzero"),
            source: DirectionSource::Random { seed },
        }
    }

    pub fn width(&self) -> usize {
        self.unit_vector.len()
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.width() {
            return Err(Error::Dimension(format!(
                "direction has width {}, activations have width {width}",
                self.width()
            )));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Contract(format!("ablation strength {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// `h − α(h·ŵ)ŵ` for every row of a flat `[n × width]` buffer.
pub fn ablate_rows(rows: &[f32], d: &DirectionSpec, alpha: f64) -> Result<Vec<f32>> {
    check_alpha(alpha)?;
    let w = &d.unit_vector;
    if rows.len() % w.len() != 0 {
        return Err(Error::Dimension(format!(
            "{} values is not a multiple of direction width {}",
            rows.len(),
            w.len()
        )));
    }
    Ok(rows
        .par_chunks(w.len())
        .flat_map_iter(|h| {
            let c = alpha * dot_mixed(h, w);
            h.iter().zip(w).map(move |(&x, &u)| (x as f64 - c * u) as f32)
        })
        .collect())
}

/// Removes `α` of the component along `d` from every vector in the last
/// axis of `h`. At `α = 1` the component is projected out entirely.
pub fn ablate_direction(h: &Tensor, d: &DirectionSpec, alpha: f64) -> Result<Tensor> {
    d.check_width(h.last_dim())?;
    Tensor::new(h.shape().to_vec(), ablate_rows(h.data(), d, alpha)?)
}

/// `h_src − (h_src·ŵ)ŵ + (h_dst·ŵ)ŵ` row by row: the source activations with
/// their component along `d` replaced by the destination's.
pub fn patch_rows(src: &[f32], dst: &[f32], d: &DirectionSpec) -> Result<Vec<f32>> {
    let w = &d.unit_vector;
    if src.len() != dst.len() || src.len() % w.len() != 0 {
        return Err(Error::Dimension(format!(
            "patching {} source values with {} destination values at width {}",
            src.len(),
            dst.len(),
            w.len()
        )));
    }
    Ok(src
        .par_chunks(w.len())
        .zip(dst.par_chunks(w.len()))
        .flat_map_iter(|(s, t)| {
            let shift = dot_mixed(t, w) - dot_mixed(s, w);
            s.iter().zip(w).map(move |(&x, &u)| (x as f64 + shift * u) as f32)
        })
        .collect())
}

pub fn targeted_patch(h_src: &Tensor, h_dst: &Tensor, d: &DirectionSpec) -> Result<Tensor> {
    if h_src.shape() != h_dst.shape() {
        return Err(Error::Dimension(format!(
            "source shape {:?} vs destination shape {:?}",
            h_src.shape(),
            h_dst.shape()
        )));
    }
    d.check_width(h_src.last_dim())?;
    Tensor::new(h_src.shape().to_vec(), patch_rows(h_src.data(), h_dst.data(), d)?)
}

fn depth_probe(probe: &ProbeCheckpoint) -> Result<()> {
    if probe.config.task != Task::Depth || probe.direction().is_none() {
        return Err(Error::Contract(format!(
            "ablation experiments need a linear depth probe, got a {} {} probe",
            probe.config.kind, probe.config.task
        )));
    }
    Ok(())
}

fn mae(probe: &ProbeCheckpoint, rows: &[f32], targets: &[f32]) -> Result<f64> {
    let preds = probe.predict_rows(rows)?;
    let t: Vec<f64> = targets.iter().map(|&v| v as f64).collect();
    Ok(metrics::regression_stats(&preds, &t)?.mae)
}

/// Probe-direction ablation against random-direction controls at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub layer: usize,
    pub orig_mae: f64,
    pub ablated_mae: f64,
    pub gap_percent: f64,
    pub random_mae_mean: f64,
    /// Population standard deviation over the random directions.
    pub random_mae_std: f64,
    pub random_maes: Vec<f64>,
    pub random_gap_percents: Vec<f64>,
}

pub const DEFAULT_RANDOM_DIRECTIONS: usize = 10;

/// Seed of random control direction `index` at `layer`.
pub fn random_direction_seed(master: u64, layer: usize, index: usize) -> u64 {
    derive_seed(master, &[0x7261_6e64, layer as u64, index as u64])
}

/// Ablates the probe's own direction from the test features and
/// re-evaluates the probe, then repeats with `n_random` random directions.
pub fn ablation_experiment(
    probe: &ProbeCheckpoint,
    test: &Samples,
    master_seed: u64,
    n_random: usize,
) -> Result<AblationResult> {
    depth_probe(probe)?;
    let layer = probe.config.layer;
    let orig = mae(probe, &test.features, &test.targets)?;
    let d = DirectionSpec::from_probe(probe)?;
    let ablated = mae(probe, &ablate_rows(&test.features, &d, 1.0)?, &test.targets)?;
    let gap = |m: f64| 100.0 * (m - orig) / orig;
    let random_maes = (0..n_random)
        .into_par_iter()
        .map(|i| {
            let r = DirectionSpec::random(layer, test.width, random_direction_seed(master_seed, layer, i));
            mae(probe, &ablate_rows(&test.features, &r, 1.0)?, &test.targets)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = random_maes.len().max(1) as f64;
    let mean = random_maes.iter().sum::<f64>() / n;
    let std = (random_maes.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(AblationResult {
        layer,
        orig_mae: orig,
        ablated_mae: ablated,
        gap_percent: gap(ablated),
        random_mae_mean: mean,
        random_mae_std: std,
        random_gap_percents: random_maes.iter().map(|&m| gap(m)).collect(),
        random_maes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseResponseCurve {
    pub layer: usize,
    pub alphas: Vec<f64>,
    pub mae_at_alpha: Vec<f64>,
}

/// `0.0, 0.1, …, 1.0`.
pub fn default_alphas() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Per-patch probe predictions at each `α`, indexed `[alpha][patch]`.
pub fn dose_predictions(probe: &ProbeCheckpoint, rows: &[f32], alphas: &[f64]) -> Result<Vec<Vec<f64>>> {
    let d = DirectionSpec::from_probe(probe)?;
    alphas
        .iter()
        .map(|&a| probe.predict_rows(&ablate_rows(rows, &d, a)?))
        .collect()
}

pub fn dose_response(probe: &ProbeCheckpoint, test: &Samples, alphas: &[f64]) -> Result<DoseResponseCurve> {
    depth_probe(probe)?;
    let t: Vec<f64> = test.targets.iter().map(|&v| v as f64).collect();
    let mae_at_alpha = dose_predictions(probe, &test.features, alphas)?
        .iter()
        .map(|p| Ok(metrics::regression_stats(p, &t)?.mae))
        .collect::<Result<Vec<_>>>()?;
    Ok(DoseResponseCurve {
        layer: probe.config.layer,
        alphas: alphas.to_vec(),
        mae_at_alpha,
    })
}

/// Two test images to swap a direction between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastPair {
    pub src_image_id: String,
    pub dst_image_id: String,
    /// `|mean depth(src) − mean depth(dst)|` in normalized units.
    pub mean_depth_gap: f64,
}

pub const DEFAULT_PAIRS: usize = 20;

/// Picks `n` disjoint pairs with the largest mean-depth gaps, greedily.
/// Equal gaps are broken by image-id order, and each pair's source is its
/// lexicographically smaller id.
pub fn select_contrast_pairs(sets: &[&PatchLabelSet], n: usize) -> Result<Vec<ContrastPair>> {
    if sets.len() < 2 * n {
        return Err(Error::Data(format!(
            "{n} contrast pairs need {} images, have {}",
            2 * n,
            sets.len()
        )));
    }
    let mut images: Vec<(&str, f64)> = sets
        .iter()
        .map(|s| {
            let m = s.labels.iter().map(|&v| v as f64).sum::<f64>() / s.labels.len().max(1) as f64;
            (s.image_id.as_str(), m)
        })
        .collect();
    images.sort_by(|a, b| a.0.cmp(b.0));
    let mut candidates = Vec::with_capacity(images.len() * (images.len() - 1) / 2);
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            candidates.push((i, j, (images[i].1 - images[j].1).abs()));
        }
    }
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut used = vec![false; images.len()];
    let mut pairs = Vec::with_capacity(n);
    for (i, j, gap) in candidates {
        if pairs.len() == n {
            break;
        }
        if used[i] || used[j] {
            continue;
        }
        used[i] = true;
        used[j] = true;
        pairs.push(ContrastPair {
            src_image_id: images[i].0.to_string(),
            dst_image_id: images[j].0.to_string(),
            mean_depth_gap: gap,
        });
    }
    Ok(pairs)
}

/// Which patch positions a patching run replaces at once.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchMode {
    /// Every patch position in one forward pass.
    #[default]
    AllPositions,
    /// One forward pass per position; the effect is read at that position.
    PerPosition,
}

pub const DEFAULT_GUARD_EPSILON: f64 = 1e-3;

/// Mean normalized downstream effect of patching at layer `layer`,
/// measured at layer `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceCell {
    pub layer: usize,
    pub target: usize,
    pub effect: f64,
    /// Pairs with at least one patch past the guard.
    pub pairs_used: usize,
    pub patches_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceMatrix {
    pub cells: Vec<InfluenceCell>,
    pub pairs: Vec<ContrastPair>,
    pub guard_epsilon: f64,
}

impl InfluenceMatrix {
    pub fn effect(&self, layer: usize, target: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.layer == layer && c.target == target)
            .map(|c| c.effect)
    }
}

#[derive(Debug, Clone)]
pub struct PatchingSpec {
    /// Intervention layers `L`; every `T ≥ L` with a probe is measured.
    pub layers: Vec<usize>,
    pub guard_epsilon: f64,
    pub mode: PatchMode,
}

/// Effects of one (pair, L) run: per target layer, the per-patch effects
/// that passed the guard.
fn pair_effects(
    encoder: &Encoder,
    src_img: &Tensor,
    src_clean: &HiddenStateStack,
    dst_clean: &HiddenStateStack,
    probes: &BTreeMap<usize, ProbeCheckpoint>,
    layer: usize,
    spec: &PatchingSpec,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let d = DirectionSpec::from_probe(&probes[&layer])?;
    let width = src_clean.width();
    let patches = src_clean.num_patches();
    let targets: Vec<usize> = probes.keys().copied().filter(|&t| t >= layer).collect();
    let dst_rows: Arc<Vec<f32>> = Arc::new(dst_clean.layer(layer).to_vec());

    let run = |positions: Option<usize>| -> Result<HiddenStateStack> {
        let d = d.clone();
        let dst_rows = Arc::clone(&dst_rows);
        let hook = InterventionHook::new(layer, move |h: &Tensor| {
            let mut data = h.data().to_vec();
            match positions {
                None => data = patch_rows(&data, &dst_rows, &d)?,
                Some(p) => {
                    let r = p * width..(p + 1) * width;
                    let patched = patch_rows(&data[r.clone()], &dst_rows[r.clone()], &d)?;
                    data[r].copy_from_slice(&patched);
                }
            }
            Tensor::new(h.shape().to_vec(), data)
        });
        encoder.forward_with_taps(src_img, &src_clean.image_id, &[hook])
    };

    let mut out: BTreeMap<usize, Vec<f64>> = targets.iter().map(|&t| (t, Vec::new())).collect();
    let measure = |patched: &HiddenStateStack, t: usize, p: usize| -> Result<Option<f64>> {
        let probe = &probes[&t];
        let ps = probe.predict(src_clean.patch(t, p))?;
        let pd = probe.predict(dst_clean.patch(t, p))?;
        let den = pd - ps;
        if den.abs() < spec.guard_epsilon {
            return Ok(None);
        }
        Ok(Some((probe.predict(patched.patch(t, p))? - ps) / den))
    };
    match spec.mode {
        PatchMode::AllPositions => {
            let patched = run(None)?;
            for &t in &targets {
                for p in 0..patches {
                    if let Some(e) = measure(&patched, t, p)? {
                        out.get_mut(&t).expect("target present").push(e);
                    }
                }
            }
        }
        PatchMode::PerPosition => {
            for p in 0..patches {
                let patched = run(Some(p))?;
                for &t in &targets {
                    if let Some(e) = measure(&patched, t, p)? {
                        out.get_mut(&t).expect("target present").push(e);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Builds the (L, T ≥ L) matrix of normalized effects. `images` maps image
/// ids to preprocessed inputs; `probes` maps layers to linear depth probes.
///
/// Per patch the effect is `(p_patched − p_src) / (p_dst − p_src)` with layer-T
/// probe predictions; patches whose denominator is below the guard are
/// skipped. Each pair contributes the mean over its surviving patches, and a
/// cell is the mean over pairs.
pub fn influence_matrix(
    encoder: &Encoder,
    images: &BTreeMap<String, Tensor>,
    pairs: &[ContrastPair],
    probes: &BTreeMap<usize, ProbeCheckpoint>,
    spec: &PatchingSpec,
) -> Result<InfluenceMatrix> {
    for &l in &spec.layers {
        if !probes.contains_key(&l) {
            return Err(Error::Data(format!("no probe for intervention layer {l}")));
        }
    }
    for p in probes.values() {
        p.direction()
            .ok_or_else(|| Error::Contract("patching needs linear probes".into()))?;
    }
    let image = |id: &str| {
        images
            .get(id)
            .ok_or_else(|| Error::Data(format!("no input image for {id}")))
    };
    let clean: BTreeMap<String, HiddenStateStack> = pairs
        .iter()
        .flat_map(|p| [p.src_image_id.as_str(), p.dst_image_id.as_str()])
        .collect::<std::collections::BTreeSet<_>>()
        .into_par_iter()
        .map(|id| Ok((id.to_string(), encoder.forward_with_taps(image(id)?, id, &[])?)))
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..pairs.len())
        .flat_map(|i| spec.layers.iter().map(move |&l| (i, l)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(i, l)| {
            let p = &pairs[i];
            pair_effects(
                encoder,
                image(&p.src_image_id)?,
                &clean[&p.src_image_id],
                &clean[&p.dst_image_id],
                probes,
                l,
                spec,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for &l in &spec.layers {
        for t in probes.keys().copied().filter(|&t| t >= l) {
            let mut pair_means = Vec::new();
            let mut patches_used = 0;
            for (job, effects) in jobs.iter().zip(&results) {
                if job.1 != l {
                    continue;
                }
                let e = &effects[&t];
                if !e.is_empty() {
                    patches_used += e.len();
                    pair_means.push(e.iter().sum::<f64>() / e.len() as f64);
                }
            }
            if pair_means.is_empty() {
                return Err(Error::DegeneratePair { layer: l, target: t });
            }
            cells.push(InfluenceCell {
                layer: l,
                target: t,
                effect: pair_means.iter().sum::<f64>() / pair_means.len() as f64,
                pairs_used: pair_means.len(),
                patches_used,
            });
        }
    }
    Ok(InfluenceMatrix {
        cells,
        pairs: pairs.to_vec(),
        guard_epsilon: spec.guard_epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{random_init, EncoderConfig, InitKind};
    use crate::labels::Split;
    use crate::probe::{ProbeConfig, ProbeKind};
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    fn depth_probe_with(w: Vec<f32>, b: f32, layer: usize) -> ProbeCheckpoint {
        let cfg = ProbeConfig::new(ProbeKind::Linear, Task::Depth, layer, w.len(), 0);
        ProbeCheckpoint::linear(cfg, w, b).unwrap()
    }

    #[test]
    fn direction_contracts() {
        assert!(DirectionSpec::new(0, vec![0.6, 0.8], DirectionSource::Probe).is_ok());
        assert!(matches!(
            DirectionSpec::new(0, vec![1.0, 1.0], DirectionSource::Probe),
            Err(Error::Contract(_))
        ));
        let r = DirectionSpec::random(3, 768, 11);
        let n: f64 = r.unit_vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-7);
        assert_eq!(r, DirectionSpec::random(3, 768, 11));
        let h = Tensor::zeros(&[2, 3]).unwrap();
        let d = DirectionSpec::random(0, 3, 1);
        assert!(matches!(ablate_direction(&h, &d, 1.5), Err(Error::Contract(_))));
    }

    #[test]
    fn ablation_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = DirectionSpec::random(0, 8, 2);
        let h = Tensor::new(vec![5, 8], rand_vec(&mut rng, 40)).unwrap();
        assert_eq!(ablate_direction(&h, &d, 0.0).unwrap(), h);
        let unit = Tensor::new(vec![1, 8], d.unit_vector.iter().map(|&v| v as f32).collect()).unwrap();
        assert!(ablate_direction(&unit, &d, 1.0).unwrap().data().iter().all(|v| v.abs() < 1e-6));
        let once = ablate_direction(&h, &d, 1.0).unwrap();
        for row in once.data().chunks(8) {
            assert!(dot_mixed(row, &d.unit_vector).abs() < 1e-6);
        }
        let twice = ablate_direction(&once, &d, 1.0).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn patch_decomposes_exactly(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = DirectionSpec::random(0, 6, seed + 1);
            let src = Tensor::new(vec![3, 6], rand_vec(&mut rng, 18)).unwrap();
            let dst = Tensor::new(vec![3, 6], rand_vec(&mut rng, 18)).unwrap();
            prop_assert_eq!(targeted_patch(&src, &src, &d).unwrap().data().iter()
                .zip(src.data()).all(|(a, b)| (a - b).abs() < 1e-6), true);
            let out = targeted_patch(&src, &dst, &d).unwrap();
            for r in 0..3 {
                let (o, s, t) = (out.row(r), src.row(r), dst.row(r));
                prop_assert!((dot_mixed(o, &d.unit_vector) - dot_mixed(t, &d.unit_vector)).abs() < 1e-6);
                let so = dot_mixed(o, &d.unit_vector);
                let ss = dot_mixed(s, &d.unit_vector);
                for k in 0..6 {
                    let perp_o = o[k] as f64 - so * d.unit_vector[k];
                    let perp_s = s[k] as f64 - ss * d.unit_vector[k];
                    prop_assert!((perp_o - perp_s).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn self_ablation_leaves_only_the_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probe = depth_probe_with(rand_vec(&mut rng, 12), 0.37, 4);
        let rows = rand_vec(&mut rng, 12 * 50);
        let d = DirectionSpec::from_probe(&probe).unwrap();
        for p in probe.predict_rows(&ablate_rows(&rows, &d, 1.0).unwrap()).unwrap() {
            assert!((p - 0.37f32 as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn dose_predictions_are_affine_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = rand_vec(&mut rng, 10);
        let probe = depth_probe_with(w.clone(), -0.2, 0);
        let rows = rand_vec(&mut rng, 10 * 20);
        let alphas = default_alphas();
        let preds = dose_predictions(&probe, &rows, &alphas).unwrap();
        let wn = dot_mixed(&w, &w.iter().map(|&v| v as f64).collect::<Vec<_>>()).sqrt();
        let d = DirectionSpec::from_probe(&probe).unwrap();
        for (p, h) in rows.chunks(10).enumerate() {
            let base = probe.predict(h).unwrap();
            let slope = dot_mixed(h, &d.unit_vector) * wn;
            for (a, pa) in alphas.iter().zip(&preds) {
                let expect = base - a * slope;
                assert!((pa[p] - expect).abs() <= 1e-6 * expect.abs().max(1.0));
            }
        }
        let samples = Samples::new(10, rows.clone(), vec![0.5; 20]).unwrap();
        let c = dose_response(&probe, &samples, &alphas).unwrap();
        let t = vec![0.5; 20];
        assert!((c.mae_at_alpha[0] - mae(&probe, &rows, &t).unwrap()).abs() < 1e-7);
        assert_eq!(c, dose_response(&probe, &samples, &alphas).unwrap());
    }

    #[test]
    fn ablation_experiment_reports_population_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = rand_vec(&mut rng, 16);
        let probe = depth_probe_with(w.clone(), 0.0, 2);
        let rows = rand_vec(&mut rng, 16 * 100);
        let targets: Vec<f32> = rows.chunks(16).map(|h| crate::tensor::dot(&w, h) as f32).collect();
        let samples = Samples::new(16, rows, targets).unwrap();
        let r = ablation_experiment(&probe, &samples, 99, 10).unwrap();
        assert_eq!(r.random_maes.len(), 10);
        let m = r.random_maes.iter().sum::<f64>() / 10.0;
        let s = (r.random_maes.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 10.0).sqrt();
        assert!((r.random_mae_mean - m).abs() < 1e-12 && (r.random_mae_std - s).abs() < 1e-12);
        assert!(r.orig_mae < 1e-5);
        assert_eq!(r, ablation_experiment(&probe, &samples, 99, 10).unwrap());
    }

    fn label_set(id: &str, depth: f32) -> PatchLabelSet {
        PatchLabelSet {
            image_id: id.into(),
            task: Task::Depth,
            labels: vec![depth; 4],
            split: Split::Test,
        }
    }

    #[test]
    fn contrast_pair_simple_cases() {
        let a = label_set("a", 0.1);
        let b = label_set("b", 0.9);
        let pairs = select_contrast_pairs(&[&b, &a], 1).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].src_image_id.as_str(), pairs[0].dst_image_id.as_str()), ("a", "b"));
        assert!((pairs[0].mean_depth_gap - 0.8).abs() < 1e-6);

        let same: Vec<PatchLabelSet> = ["d", "a", "c", "b"].iter().map(|id| label_set(id, 0.5)).collect();
        let refs: Vec<&PatchLabelSet> = same.iter().collect();
        let pairs = select_contrast_pairs(&refs, 2).unwrap();
        let ids: Vec<(&str, &str)> =
            pairs.iter().map(|p| (p.src_image_id.as_str(), p.dst_image_id.as_str())).collect();
        assert_eq!(ids, vec![("a", "b"), ("c", "d")]);
        assert!(matches!(select_contrast_pairs(&refs, 3), Err(Error::Data(_))));
    }

    /// Repeatedly scans every remaining pair for the best gap, preferring the
    /// smaller (id, id) on ties.
    fn exhaustive_greedy(sets: &[PatchLabelSet], n: usize) -> Vec<(String, String)> {
        let mean = |s: &PatchLabelSet| s.labels.iter().map(|&v| v as f64).sum::<f64>() / s.labels.len() as f64;
        let mut left: Vec<&PatchLabelSet> = sets.iter().collect();
        let mut out = Vec::new();
        while out.len() < n {
            let mut best: Option<(f64, String, String, usize, usize)> = None;
            for i in 0..left.len() {
                for j in 0..left.len() {
                    if i == j {
                        continue;
                    }
                    let (x, y) = if left[i].image_id < left[j].image_id { (i, j) } else { (j, i) };
                    let gap = (mean(left[x]) - mean(left[y])).abs();
                    let cand = (gap, left[x].image_id.clone(), left[y].image_id.clone(), x, y);
                    let better = match &best {
                        None => true,
                        Some(b) => gap > b.0 || (gap == b.0 && (&cand.1, &cand.2) < (&b.1, &b.2)),
                    };
                    if better {
                        best = Some(cand);
                    }
                }
            }
            let (_, s, d, x, y) = best.unwrap();
            out.push((s, d));
            let (hi, lo) = if x > y { (x, y) } else { (y, x) };
            left.remove(hi);
            left.remove(lo);
        }
        out
    }

    #[test]
    fn contrast_pairs_match_exhaustive_oracle() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sets: Vec<PatchLabelSet> = (0..50)
                .map(|i| PatchLabelSet {
                    image_id: format!("img{i:03}"),
                    task: Task::Depth,
                    // Coarse values so that equal gaps actually occur.
                    labels: (0..4).map(|_| rng.gen_range(0..5) as f32 / 4.0).collect(),
                    split: Split::Test,
                })
                .collect();
            let refs: Vec<&PatchLabelSet> = sets.iter().collect();
            let got: Vec<(String, String)> = select_contrast_pairs(&refs, 20)
                .unwrap()
                .into_iter()
                .map(|p| (p.src_image_id, p.dst_image_id))
                .collect();
            assert_eq!(got, exhaustive_greedy(&sets, 20), "seed {seed}");
        }
    }

    fn tiny_setup(seed: u64) -> (Encoder, BTreeMap<String, Tensor>, BTreeMap<usize, ProbeCheckpoint>) {
        let cfg = EncoderConfig::tiny();
        let enc = Encoder::from_store(&random_init(&cfg, seed).unwrap(), InitKind::Random { seed }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let images: BTreeMap<String, Tensor> = (0..4)
            .map(|i| {
                let px = 3 * cfg.image_size * cfg.image_size;
                (format!("im{i}"), Tensor::new(vec![3, 8, 8], rand_vec(&mut rng, px)).unwrap())
            })
            .collect();
        let probes = (0..=cfg.layers)
            .map(|l| (l, depth_probe_with(rand_vec(&mut rng, cfg.width), 0.1, l)))
            .collect();
        (enc, images, probes)
    }

    #[test]
    fn influence_diagonal_is_one() {
        let (enc, images, probes) = tiny_setup(21);
        let pairs = vec![
            ContrastPair { src_image_id: "im0".into(), dst_image_id: "im1".into(), mean_depth_gap: 0.0 },
            ContrastPair { src_image_id: "im2".into(), dst_image_id: "im3".into(), mean_depth_gap: 0.0 },
        ];
        for mode in [PatchMode::AllPositions, PatchMode::PerPosition] {
            let spec = PatchingSpec { layers: vec![0, 1, 2], guard_epsilon: DEFAULT_GUARD_EPSILON, mode };
            let m = influence_matrix(&enc, &images, &pairs, &probes, &spec).unwrap();
            assert_eq!(m.cells.len(), 3 + 2 + 1);
            for l in 0..=2 {
                let e = m.effect(l, l).unwrap();
                assert!((e - 1.0).abs() < 1e-4, "L={l}: {e}");
            }
        }
    }

    #[test]
    fn guard_can_exclude_everything() {
        let (enc, images, probes) = tiny_setup(22);
        let pairs = vec![ContrastPair { src_image_id: "im0".into(), dst_image_id: "im0".into(), mean_depth_gap: 0.0 }];
        let spec = PatchingSpec { layers: vec![1], guard_epsilon: DEFAULT_GUARD_EPSILON, mode: PatchMode::AllPositions };
        assert!(matches!(
            influence_matrix(&enc, &images, &pairs, &probes, &spec),
            Err(Error::DegeneratePair { layer: 1, target: 1 })
        ));
    }
}
