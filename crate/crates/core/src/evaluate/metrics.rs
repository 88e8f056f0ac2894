//! Discrimination metrics for binary risk scores.

use std::cmp::Ordering;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Recall levels at which screening operating points are reported.
pub const DEFAULT_RECALL_TARGETS: [f64; 4] = [0.6, 0.7, 0.8, 0.9];

const RECALL_TIE_EPS: f64 = 1e-12;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    Ok((pos, neg))
}

fn require_both_classes(pos: usize, neg: usize) -> Result<()> {
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("metric undefined: single-class input"));
    }
    Ok(())
}

/// Mann–Whitney AUROC; tied positive/negative pairs count one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    require_both_classes(pos, neg)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the average rank keeps everything integral.
    let mut rank_sum_x2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank_x2 = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_x2 += avg_rank_x2;
            }
        }
        i = j + 1;
    }
    let pos64 = pos as u64;
    let u_x2 = rank_sum_x2 - pos64 * (pos64 + 1);
    Ok(u_x2 as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// Confusion counts at every distinct score threshold, highest threshold first.
/// A sample is called positive when `score >= threshold`.
fn threshold_sweep(scores: &[f64], labels: &[u8]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((t, tp, fp));
    }
    out
}

/// Average precision: `Σ (ΔTP / P) · precision` over descending thresholds.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::invalid("average precision undefined: no positives"));
    }
    let mut ap = 0.0;
    let mut prev_tp = 0usize;
    for (_, tp, fp) in threshold_sweep(scores, labels) {
        if tp > prev_tp {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (tp - prev_tp) as f64 / pos as f64 * precision;
        }
        prev_tp = tp;
    }
    Ok(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub target_recall: f64,
    pub achieved_recall: f64,
    pub fpr: f64,
    pub precision: f64,
    pub threshold: f64,
}

/// For each target recall, the attainable operating point whose recall is
/// closest to it. Ties go to the higher recall; among thresholds reaching the
/// same recall the highest one (fewest false positives) is reported.
pub fn operating_points(scores: &[f64], labels: &[u8], targets: &[f64]) -> Result<Vec<OperatingPoint>> {
    let (pos, neg) = check_inputs(scores, labels)?;
    require_both_classes(pos, neg)?;
    let sweep = threshold_sweep(scores, labels);
    let candidates: Vec<OperatingPoint> = sweep
        .iter()
        .map(|&(t, tp, fp)| OperatingPoint {
            target_recall: f64::NAN,
            achieved_recall: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
            precision: tp as f64 / (tp + fp) as f64,
            threshold: t,
        })
        .filter(|p| p.achieved_recall > 0.0)
        .collect();
    let better = |a: &OperatingPoint, b: &OperatingPoint, target: f64| -> bool {
        let da = (a.achieved_recall - target).abs();
        let db = (b.achieved_recall - target).abs();
        if (da - db).abs() > RECALL_TIE_EPS {
            return da < db;
        }
        match a.achieved_recall.partial_cmp(&b.achieved_recall) {
            Some(Ordering::Greater) => true,
            Some(Ordering::Less) => false,
            _ => a.threshold > b.threshold,
        }
    };
    Ok(targets
        .iter()
        .map(|&target| {
            let mut best = &candidates[0];
            for c in &candidates[1..] {
                if better(c, best, target) {
                    best = c;
                }
            }
            OperatingPoint {
                target_recall: target,
                ..best.clone()
            }
        })
        .collect())
}

/// One-vs-rest AUROC averaged with class-prevalence weights. `scores` is
/// `n × classes`; classes absent from `labels` are skipped.
pub fn weighted_auroc(scores: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let (n, classes) = scores.dim();
    if n != labels.len() {
        return Err(Error::shape(format!("{n} score rows vs {} labels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} outside {classes} classes")));
    }
    let present: Vec<usize> = (0..classes).filter(|c| labels.contains(c)).collect();
    if present.len() < 2 {
        return Err(Error::invalid("weighted AUROC needs at least two classes present"));
    }
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    for &c in &present {
        let col: Vec<f64> = scores.column(c).to_vec();
        let binary: Vec<u8> = labels.iter().map(|&l| (l == c) as u8).collect();
        let count = binary.iter().filter(|&&b| b == 1).count() as f64;
        total += count * auroc(&col, &binary)?;
        weight_sum += count;
    }
    Ok(total / weight_sum)
}

pub type MetricFn = fn(&[f64], &[u8]) -> Result<f64>;

/// Linear-interpolated quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

const MAX_REDRAWS: usize = 10_000;

/// The metric value on bootstrap resample `draw`. Each draw owns ChaCha
/// stream `draw` of `seed`; resamples on which the metric is undefined
/// (single class) are redrawn from the same stream.
pub fn bootstrap_replicate(scores: &[f64], labels: &[u8], metric: MetricFn, seed: u64, draw: u64) -> Result<f64> {
    let n = scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw);
    let mut s = vec![0.0; n];
    let mut l = vec![0u8; n];
    for _ in 0..MAX_REDRAWS {
        for k in 0..n {
            let idx = rng.random_range(0..n);
            s[k] = scores[idx];
            l[k] = labels[idx];
        }
        if let Ok(v) = metric(&s, &l) {
            return Ok(v);
        }
    }
    Err(Error::invalid("bootstrap could not draw a resample on which the metric is defined"))
}

/// Percentile bootstrap interval over `n_draws` resamples of size `n`.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[u8],
    metric: MetricFn,
    n_draws: usize,
    seed: u64,
    level: f64,
) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} outside (0, 1)")));
    }
    if n_draws == 0 {
        return Err(Error::invalid("bootstrap needs at least one draw"));
    }
    metric(scores, labels)?;
    let mut stats = (0..n_draws as u64)
        .map(|d| bootstrap_replicate(scores, labels, metric, seed, d))
        .collect::<Result<Vec<f64>>>()?;
    stats.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok((quantile_sorted(&stats, alpha / 2.0), quantile_sorted(&stats, 1.0 - alpha / 2.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
}

/// Point estimates, percentile intervals and operating points for one set of
/// predictions. The interval is not guaranteed to contain the point estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub n_positive: usize,
    pub auroc: f64,
    pub auprc: f64,
    pub auroc_ci: ConfidenceInterval,
    pub auprc_ci: ConfidenceInterval,
    pub operating_points: Vec<OperatingPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub bootstrap_draws: usize,
    pub confidence_level: f64,
    pub recall_targets: Vec<f64>,
    pub seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            bootstrap_draws: 10_000,
            confidence_level: 0.95,
            recall_targets: DEFAULT_RECALL_TARGETS.to_vec(),
            seed: 0,
        }
    }
}

pub fn metrics_report(scores: &[f64], labels: &[u8], config: &EvaluationConfig) -> Result<MetricsReport> {
    let (pos, _) = check_inputs(scores, labels)?;
    let auroc_v = auroc(scores, labels)?;
    let auprc_v = auprc(scores, labels)?;
    let (al, au) = bootstrap_ci(scores, labels, auroc, config.bootstrap_draws, config.seed, config.confidence_level)?;
    let (pl, pu) = bootstrap_ci(scores, labels, auprc, config.bootstrap_draws, config.seed, config.confidence_level)?;
    Ok(MetricsReport {
        n: scores.len(),
        n_positive: pos,
        auroc: auroc_v,
        auprc: auprc_v,
        auroc_ci: ConfidenceInterval { lower: al, upper: au },
        auprc_ci: ConfidenceInterval { lower: pl, upper: pu },
        operating_points: operating_points(scores, labels, &config.recall_targets)?,
    })
}
