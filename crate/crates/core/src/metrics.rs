// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ranking, thresholded, and regression metrics over patch predictions.

use serde::{Deserialize, Serialize};

use crate::encoder::InitKind;
use crate::error::{Error, Result};
use crate::labels::Task;
use crate::probe::ProbeKind;

/// One point of a precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Contract("scores contain NaN".into()));
    }
    Ok(())
}

/// Precision and recall at every distinct score, highest threshold first.
/// A sample is predicted positive when its score is `>=` the threshold, so
/// tied scores always enter together.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>> {
    check_scores(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("precision-recall needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(PrPoint {
            threshold,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / positives as f64,
        });
    }
    Ok(curve)
}

/// Step-wise area under the precision-recall curve:
/// `Σ (Rₙ − Rₙ₋₁) · Pₙ` over descending distinct thresholds, no interpolation.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for p in pr_curve(scores, labels)? {
        ap += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
    }
    Ok(ap)
}

/// Confusion-matrix statistics at a fixed threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationStats {
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Predicts positive when `score >= threshold`. Precision is 0 when nothing
/// is predicted positive, recall is 0 when there are no positives, and F1 is
/// 0 when precision + recall is 0.
pub fn thresholded_stats(scores: &[f64], labels: &[bool], threshold: f64) -> ClassificationStats {
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassificationStats {
        f1,
        accuracy: ratio(tp + tn, tp + fp + tn + fn_),
        precision,
        recall,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionStats {
    pub mae: f64,
    pub rmse: f64,
}

pub fn regression_stats(preds: &[f64], targets: &[f64]) -> Result<RegressionStats> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Dimension(format!(
            "regression_stats needs equal non-empty lengths, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    let n = preds.len() as f64;
    let (abs, sq) = preds
        .iter()
        .zip(targets)
        .fold((0.0, 0.0), |(a, s), (&p, &t)| {
            let e = p - t;
            (a + e.abs(), s + e * e)
        });
    Ok(RegressionStats {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
    })
}

/// How per-patch results from several images are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// One metric over every test patch of every image.
    #[default]
    Pooled,
    /// Metric per image, then the unweighted mean over images.
    PerImage,
}

/// Regression metrics over per-image `(preds, targets)` groups.
pub fn regression_stats_grouped(
    groups: &[(Vec<f64>, Vec<f64>)],
    pooling: Pooling,
) -> Result<RegressionStats> {
    match pooling {
        Pooling::Pooled => {
            let preds: Vec<f64> = groups.iter().flat_map(|g| g.0.iter().copied()).collect();
            let targets: Vec<f64> = groups.iter().flat_map(|g| g.1.iter().copied()).collect();
            regression_stats(&preds, &targets)
        }
        Pooling::PerImage => {
            let stats = groups
                .iter()
                .map(|(p, t)| regression_stats(p, t))
                .collect::<Result<Vec<_>>>()?;
            if stats.is_empty() {
                return Err(Error::Dimension("no groups".into()));
            }
            let n = stats.len() as f64;
            Ok(RegressionStats {
                mae: stats.iter().map(|s| s.mae).sum::<f64>() / n,
                rmse: stats.iter().map(|s| s.rmse).sum::<f64>() / n,
            })
        }
    }
}

/// AP and thresholded statistics over per-image `(scores, labels)` groups.
/// Images without a positive patch are skipped for AP under per-image
/// averaging.
pub fn classification_grouped(
    groups: &[(Vec<f64>, Vec<bool>)],
    threshold: f64,
    pooling: Pooling,
) -> Result<(f64, ClassificationStats)> {
    match pooling {
        Pooling::Pooled => {
            let scores: Vec<f64> = groups.iter().flat_map(|g| g.0.iter().copied()).collect();
            let labels: Vec<bool> = groups.iter().flat_map(|g| g.1.iter().copied()).collect();
            Ok((
                average_precision(&scores, &labels)?,
                thresholded_stats(&scores, &labels, threshold),
            ))
        }
        Pooling::PerImage => {
            let aps: Vec<f64> = groups
                .iter()
                .filter(|g| g.1.iter().any(|&l| l))
                .map(|(s, l)| average_precision(s, l))
                .collect::<Result<_>>()?;
            if aps.is_empty() {
                return Err(Error::UndefinedMetric("no image has a positive patch".into()));
            }
            let stats: Vec<ClassificationStats> = groups
                .iter()
                .map(|(s, l)| thresholded_stats(s, l, threshold))
                .collect();
            let n = stats.len() as f64;
            let mean = |f: fn(&ClassificationStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
            Ok((
                aps.iter().sum::<f64>() / aps.len() as f64,
                ClassificationStats {
                    f1: mean(|s| s.f1),
                    accuracy: mean(|s| s.accuracy),
                    precision: mean(|s| s.precision),
                    recall: mean(|s| s.recall),
                },
            ))
        }
    }
}

/// Test-set metrics for one probe run. Classification fields are set for
/// boundary runs, regression fields for depth runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: Task,
    pub layer: usize,
    pub kind: ProbeKind,
    pub init: InitKind,
    pub ap: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
}

impl MetricRow {
    /// The task's primary metric: AP for boundaries, MAE for depth.
    pub fn primary(&self) -> Option<f64> {
        match self.task {
            Task::Boundary => self.ap,
            Task::Depth => self.mae,
        }
    }
}
