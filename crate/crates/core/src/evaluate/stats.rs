//! Paired significance tests for comparing fold-level model scores.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::{Error, Result};

/// Largest sample size for which the Wilcoxon null distribution is enumerated.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    pub test: String,
    pub statistic: f64,
    pub p_value: f64,
    /// Pairwise post-hoc p-values, `k × k`, when the test produces them.
    pub pairwise: Option<Vec<Vec<f64>>>,
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn tie_sizes(values: &[f64]) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        out.push(j - i + 1);
        i = j + 1;
    }
    out
}

/// Two-sided Wilcoxon signed-rank test. Zero differences are dropped; the
/// p-value is exact (enumerated null distribution) for up to
/// [`WILCOXON_EXACT_MAX_N`] nonzero differences and uses the tie-corrected
/// normal approximation beyond that.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<StatTestResult> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::invalid("all differences zero"));
    }
    let n = diffs.len();
    if n < 2 {
        return Err(Error::invalid("Wilcoxon test needs at least two nonzero differences"));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let r_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let r_minus = total - r_plus;
    let statistic = r_plus.min(r_minus);

    let p_value = if n <= WILCOXON_EXACT_MAX_N {
        // Doubled ranks are integers even with ties.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0f64; max + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all: f64 = counts.iter().sum();
        let obs = (2.0 * r_plus).round() as usize;
        let lower: f64 = counts[..=obs].iter().sum::<f64>() / all;
        let upper: f64 = counts[obs..].iter().sum::<f64>() / all;
        (2.0 * lower.min(upper)).min(1.0)
    } else {
        let mean = total / 2.0;
        let ties: f64 = tie_sizes(&abs).iter().map(|&t| (t * t * t - t) as f64).sum();
        let var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0 - ties / 48.0;
        let z = (r_plus - mean) / var.sqrt();
        let normal = Normal::standard();
        (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0)
    };
    Ok(StatTestResult {
        test: "wilcoxon_signed_rank".into(),
        statistic,
        p_value,
        pairwise: None,
    })
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// CDF of the studentized range for `k` groups with infinite degrees of
/// freedom: `k ∫ φ(z) [Φ(z) − Φ(z − q)]^(k−1) dz`, by composite Simpson.
pub fn studentized_range_cdf(q: f64, k: usize) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    let (lo, hi) = (-9.0, 9.0 + q);
    let steps = 4000usize;
    let h = (hi - lo) / steps as f64;
    let f = |z: f64| std_normal_pdf(z) * (std_normal_cdf(z) - std_normal_cdf(z - q)).powi(k as i32 - 1);
    let mut acc = f(lo) + f(hi);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * h);
    }
    (k as f64 * acc * h / 3.0).clamp(0.0, 1.0)
}

/// Friedman test over `k` groups of `n` paired blocks, with Nemenyi post-hoc
/// p-values. `groups[j][i]` is the value of group `j` in block `i`.
pub fn friedman_nemenyi(groups: &[Vec<f64>]) -> Result<StatTestResult> {
    let k = groups.len();
    if k < 3 {
        return Err(Error::invalid(format!("Friedman test needs k >= 3 groups, got {k}")));
    }
    let n = groups[0].len();
    if n == 0 || groups.iter().any(|g| g.len() != n) {
        return Err(Error::shape("Friedman groups must have equal, nonzero lengths"));
    }
    let mut rank_sums = vec![0.0; k];
    let mut tie_term = 0.0;
    for i in 0..n {
        let block: Vec<f64> = groups.iter().map(|g| g[i]).collect();
        for (j, r) in average_ranks(&block).into_iter().enumerate() {
            rank_sums[j] += r;
        }
        tie_term += tie_sizes(&block).iter().map(|&t| (t * t * t - t) as f64).sum::<f64>();
    }
    let (nf, kf) = (n as f64, k as f64);
    let q_raw = 12.0 / (nf * kf * (kf + 1.0)) * rank_sums.iter().map(|r| r * r).sum::<f64>()
        - 3.0 * nf * (kf + 1.0);
    let correction = 1.0 - tie_term / (nf * (kf * kf * kf - kf));
    let (statistic, p_value) = if correction <= 1e-12 {
        (0.0, 1.0)
    } else {
        let stat = (q_raw / correction).max(0.0);
        let chi = ChiSquared::new(kf - 1.0).map_err(|e| Error::invalid(e.to_string()))?;
        (stat, (1.0 - chi.cdf(stat)).clamp(0.0, 1.0))
    };

    let mean_ranks: Vec<f64> = rank_sums.iter().map(|r| r / nf).collect();
    let se = (kf * (kf + 1.0) / (6.0 * nf)).sqrt();
    let mut pairwise = vec![vec![1.0; k]; k];
    for a in 0..k {
        for b in (a + 1)..k {
            let q = (mean_ranks[a] - mean_ranks[b]).abs() / se * std::f64::consts::SQRT_2;
            let p = (1.0 - studentized_range_cdf(q, k)).clamp(0.0, 1.0);
            pairwise[a][b] = p;
            pairwise[b][a] = p;
        }
    }
    Ok(StatTestResult {
        test: "friedman_nemenyi".into(),
        statistic,
        p_value,
        pairwise: Some(pairwise),
    })
}
