//! Beta calibration, patient-level max aggregation and fold ensembling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Inputs are clamped to `[EPS, 1 − EPS]` before taking logarithms.
pub const CALIBRATION_EPS: f64 = 1e-6;

const NEWTON_MAX_ITERS: usize = 200;
const NEWTON_TOL: f64 = 1e-10;
const RIDGE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoduleRisk {
    pub patient_id: String,
    pub nodule_id: String,
    pub probability: f64,
    pub fold_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRisk {
    pub patient_id: String,
    pub probability: f64,
}

/// `p ↦ σ(a·ln p − b·ln(1−p) + c)` with `a, b ≥ 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaCalibrator {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for BetaCalibrator {
    fn default() -> Self {
        Self::identity()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn features(p: f64) -> [f64; 2] {
    let p = p.clamp(CALIBRATION_EPS, 1.0 - CALIBRATION_EPS);
    [p.ln(), -(1.0 - p).ln()]
}

impl BetaCalibrator {
    pub fn identity() -> Self {
        Self {
            a: 1.0,
            b: 1.0,
            c: 0.0,
        }
    }

    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        if !(a >= 0.0 && b >= 0.0) || !c.is_finite() {
            return Err(Error::invalid(format!("beta calibrator needs a, b >= 0 (a={a}, b={b}, c={c})")));
        }
        Ok(Self { a, b, c })
    }

    pub fn apply(&self, p: f64) -> f64 {
        let [lp, l1p] = features(p);
        sigmoid(self.a * lp + self.b * l1p + self.c)
    }
}

/// Maximum-likelihood logistic regression on the selected columns of
/// `[ln p, −ln(1−p)]` plus an intercept, by damped Newton iterations.
/// Returns coefficients for the selected columns, the intercept and the
/// log-likelihood.
fn logistic_fit(x: &[[f64; 2]], y: &[u8], use_cols: [bool; 2]) -> (Vec<f64>, f64) {
    let cols: Vec<usize> = (0..2).filter(|&c| use_cols[c]).collect();
    let dim = cols.len() + 1;
    let design = |row: &[f64; 2]| -> Vec<f64> {
        let mut v: Vec<f64> = cols.iter().map(|&c| row[c]).collect();
        v.push(1.0);
        v
    };
    let loglik = |w: &[f64]| -> f64 {
        x.iter()
            .zip(y)
            .map(|(row, &t)| {
                let z: f64 = design(row).iter().zip(w).map(|(a, b)| a * b).sum();
                // log σ(z) and log(1 − σ(z)) computed stably.
                let log1pexp = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                if t == 1 {
                    z - log1pexp
                } else {
                    -log1pexp
                }
            })
            .sum::<f64>()
            - 0.5 * RIDGE * w.iter().map(|v| v * v).sum::<f64>()
    };
    let mut w = vec![0.0; dim];
    let mut current = loglik(&w);
    for _ in 0..NEWTON_MAX_ITERS {
        let mut grad = vec![0.0; dim];
        let mut hess = vec![vec![0.0; dim]; dim];
        for (row, &t) in x.iter().zip(y) {
            let d = design(row);
            let z: f64 = d.iter().zip(&w).map(|(a, b)| a * b).sum();
            let p = sigmoid(z);
            let r = t as f64 - p;
            let s = p * (1.0 - p);
            for i in 0..dim {
                grad[i] += r * d[i];
                for j in 0..dim {
                    hess[i][j] += s * d[i] * d[j];
                }
            }
        }
        for i in 0..dim {
            grad[i] -= RIDGE * w[i];
            hess[i][i] += RIDGE;
        }
        let step = match solve(&hess, &grad) {
            Some(s) => s,
            None => break,
        };
        let mut scale = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let cand: Vec<f64> = w.iter().zip(&step).map(|(a, b)| a + scale * b).collect();
            let ll = loglik(&cand);
            if ll >= current {
                let gain = ll - current;
                w = cand;
                current = ll;
                improved = gain > NEWTON_TOL;
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (w, current)
}

/// Gaussian elimination with partial pivoting for the small Newton systems.
fn solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(row, &v)| {
        let mut r = row.clone();
        r.push(v);
        r
    }).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        for row in (col + 1)..n {
            let f = m[row][col] / m[col][col];
            for k in col..=n {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = ((i + 1)..n).map(|k| m[i][k] * x[k]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    Some(x)
}

/// Fits a Beta calibration map by maximum likelihood. When the unconstrained
/// fit has a negative shape coefficient, the restricted fits with that
/// coefficient pinned to zero are tried and the best admissible one kept.
pub fn fit_beta_calibration(probs: &[f64], labels: &[u8]) -> Result<BetaCalibrator> {
    if probs.len() != labels.len() {
        return Err(Error::shape(format!("{} probabilities vs {} labels", probs.len(), labels.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid("probabilities must be finite"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::invalid("beta calibration needs both classes"));
    }
    let x: Vec<[f64; 2]> = probs.iter().map(|&p| features(p)).collect();

    let mut best: Option<(BetaCalibrator, f64)> = None;
    let mut consider = |cal: BetaCalibrator, ll: f64| {
        if cal.a >= 0.0 && cal.b >= 0.0 && best.as_ref().is_none_or(|(_, b)| ll > *b) {
            best = Some((cal, ll));
        }
    };
    let (w, _) = logistic_fit(&x, labels, [true, true]);
    let full = BetaCalibrator { a: w[0], b: w[1], c: w[2] };
    if full.a >= 0.0 && full.b >= 0.0 {
        return Ok(full);
    }
    let (w, ll) = logistic_fit(&x, labels, [false, true]);
    consider(BetaCalibrator { a: 0.0, b: w[0], c: w[1] }, ll);
    let (w, ll) = logistic_fit(&x, labels, [true, false]);
    consider(BetaCalibrator { a: w[0], b: 0.0, c: w[1] }, ll);
    let (w, ll) = logistic_fit(&x, labels, [false, false]);
    consider(BetaCalibrator { a: 0.0, b: 0.0, c: w[0] }, ll);
    Ok(best.expect("intercept-only fit is always admissible").0)
}

/// Patient risk is the maximum over the patient's nodule probabilities.
pub fn patient_aggregate(risks: &[NoduleRisk]) -> Result<PatientRisk> {
    let first = risks.first().ok_or_else(|| Error::invalid("no nodule risks to aggregate"))?;
    if let Some(other) = risks.iter().find(|r| r.patient_id != first.patient_id) {
        return Err(Error::invalid(format!(
            "mixed patients in aggregation: {} and {}",
            first.patient_id, other.patient_id
        )));
    }
    let probability = risks.iter().map(|r| r.probability).fold(f64::NEG_INFINITY, f64::max);
    Ok(PatientRisk {
        patient_id: first.patient_id.clone(),
        probability,
    })
}

/// Groups nodule risks by patient and aggregates each group, sorted by patient id.
pub fn aggregate_by_patient(risks: &[NoduleRisk]) -> Result<Vec<PatientRisk>> {
    let mut groups: BTreeMap<&str, Vec<NoduleRisk>> = BTreeMap::new();
    for r in risks {
        groups.entry(r.patient_id.as_str()).or_default().push(r.clone());
    }
    groups.values().map(|g| patient_aggregate(g)).collect()
}

/// Per-patient arithmetic mean across fold prediction sets.
pub fn ensemble(per_fold: &[Vec<PatientRisk>]) -> Result<Vec<PatientRisk>> {
    let first = per_fold.first().ok_or_else(|| Error::invalid("no fold predictions to ensemble"))?;
    let mut sums: BTreeMap<&str, f64> = first.iter().map(|r| (r.patient_id.as_str(), 0.0)).collect();
    if sums.len() != first.len() {
        return Err(Error::invalid("duplicate patient in fold predictions"));
    }
    for fold in per_fold {
        if fold.len() != sums.len() {
            return Err(Error::invalid("patient-set mismatch across folds"));
        }
        for r in fold {
            match sums.get_mut(r.patient_id.as_str()) {
                Some(s) => *s += r.probability,
                None => {
                    return Err(Error::invalid(format!("patient-set mismatch across folds: {}", r.patient_id)))
                }
            }
        }
    }
    let k = per_fold.len() as f64;
    Ok(sums
        .into_iter()
        .map(|(pid, s)| PatientRisk {
            patient_id: pid.to_string(),
            probability: s / k,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn risk(pid: &str, nid: &str, p: f64) -> NoduleRisk {
        NoduleRisk {
            patient_id: pid.into(),
            nodule_id: nid.into(),
            probability: p,
            fold_index: 0,
        }
    }

    #[test]
    fn max_aggregation() {
        let r = [risk("p", "a", 0.2), risk("p", "b", 0.7), risk("p", "c", 0.4)];
        assert_eq!(patient_aggregate(&r).unwrap().probability, 0.7);
        let rev: Vec<_> = r.iter().rev().cloned().collect();
        assert_eq!(patient_aggregate(&rev).unwrap().probability, 0.7);
        assert_eq!(patient_aggregate(&r[..1]).unwrap().probability, 0.2);
        assert!(patient_aggregate(&[]).is_err());
        assert!(patient_aggregate(&[risk("p", "a", 0.1), risk("q", "a", 0.2)]).is_err());
    }

    fn pr(pid: &str, p: f64) -> PatientRisk {
        PatientRisk {
            patient_id: pid.into(),
            probability: p,
        }
    }

    #[test]
    fn ensemble_mean() {
        let folds: Vec<Vec<PatientRisk>> = [0.0, 1.0, 0.5, 0.5, 0.5].iter().map(|&p| vec![pr("x", p)]).collect();
        assert_eq!(ensemble(&folds).unwrap()[0].probability, 0.5);
        let same = vec![vec![pr("x", 0.3), pr("y", 0.9)]; 5];
        let out = ensemble(&same).unwrap();
        assert!((out[0].probability - 0.3).abs() < 1e-15);
        assert!((out[1].probability - 0.9).abs() < 1e-15);
        assert!(ensemble(&[vec![pr("x", 0.1)], vec![pr("y", 0.1)]]).is_err());
    }

    #[test]
    fn identity_recovered_from_calibrated_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
        let y: Vec<u8> = p.iter().map(|&q| (rng.random::<f64>() < q) as u8).collect();
        let cal = fit_beta_calibration(&p, &y).unwrap();
        for i in 1..100 {
            let q = i as f64 / 100.0;
            assert!((cal.apply(q) - q).abs() < 0.02, "{q} -> {}", cal.apply(q));
        }
    }

    #[test]
    fn sharpened_labels_recover_shape_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 50_000;
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let y: Vec<u8> = p
            .iter()
            .map(|&q: &f64| {
                let logit = (q / (1.0 - q)).ln();
                (rng.random::<f64>() < sigmoid(2.0 * logit)) as u8
            })
            .collect();
        let cal = fit_beta_calibration(&p, &y).unwrap();
        assert!((cal.a - 2.0).abs() < 0.2, "a = {}", cal.a);
        assert!((cal.b - 2.0).abs() < 0.2, "b = {}", cal.b);
    }

    #[test]
    fn anti_correlated_data_projects_to_nonnegative() {
        let p: Vec<f64> = (1..40).map(|i| i as f64 / 40.0).collect();
        let y: Vec<u8> = p.iter().map(|&q| (q < 0.5) as u8).collect();
        let cal = fit_beta_calibration(&p, &y).unwrap();
        assert!(cal.a >= 0.0 && cal.b >= 0.0);
        assert!(fit_beta_calibration(&p, &vec![1; p.len()]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn calibration_preserves_ranking(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 60;
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut y: Vec<u8> = p.iter().map(|&q| (rng.random::<f64>() < q) as u8).collect();
            y[0] = 0;
            y[1] = 1;
            let cal = fit_beta_calibration(&p, &y).unwrap();
            let mut sorted = p.clone();
            sorted.sort_by(f64::total_cmp);
            for w in sorted.windows(2) {
                proptest::prop_assert!(cal.apply(w[0]) <= cal.apply(w[1]));
            }
        }
    }
}
