//! Evaluation metrics and across-trial summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 20;

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }

    /// Agreement within `tol`, treating two NaNs as equal.
    pub fn close(&self, other: &Stat, tol: f64) -> bool {
        let eq = |a: f64, b: f64| (a.is_nan() && b.is_nan()) || (a - b).abs() <= tol;
        eq(self.mean, other.mean) && eq(self.std, other.std)
    }
}

/// Normalised histogram of scores in [0, 1] with `bins` equal-width bins;
/// a score of exactly 1 falls in the last bin.
pub fn histogram(scores: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &s in scores {
        let b = ((s.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        h[b] += 1.0;
    }
    let n = scores.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Jensen–Shannon divergence (natural log) of two discrete distributions.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (x / (0.5 * (x + y))).ln())
            .sum()
    };
    let d = 0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p);
    d.clamp(0.0, std::f64::consts::LN_2)
}

/// JSD between the histograms of two score lists (e.g. predicted
/// probability of class 0 for samples of class 0 and of class 1).
pub fn outcome_divergence(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("outcome_divergence", "empty score list"));
    }
    if bins == 0 {
        return Err(Error::contract("outcome_divergence", "bins must be at least 1"));
    }
    if let Some(s) = a.iter().chain(b).find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::contract("outcome_divergence", format!("score {s} outside [0, 1]")));
    }
    Ok(jsd(&histogram(a, bins), &histogram(b, bins)))
}
