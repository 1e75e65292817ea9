//! Scalar and vector primitives shared by the loss, encoder and evaluation code.
//!
//! Everything here is a pure function over `f64` slices. Softmax subtracts the
//! maximum logit before exponentiating and the KL routines work in log space,
//! so temperatures as small as 0.04 (a 25x logit inflation) stay finite.

use crate::error::{Co2Error, Result};

/// Norms below this are treated as zero by [`l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

/// Tolerance on the total mass of a [`ProbVector`].
pub const PROB_SUM_TOL: f64 = 1e-9;

/// A finite, nonnegative vector summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Co2Error::InvalidDistribution("empty".into()));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Co2Error::InvalidDistribution(format!(
                "entry {i} is {}",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Co2Error::InvalidDistribution(format!("sums to {total}")));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Co2Error::NonFinite(what))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    ensure_finite(v, "vector to normalize")?;
    let n = norm(v);
    if n < MIN_NORM {
        return Err(Co2Error::ZeroVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Co2Error::NonPositiveTemperature(tau))
    }
}

/// `log(sum(exp(x)))` with the maximum factored out.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Log-probabilities of `softmax(logits / tau)`.
pub fn log_softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    ensure_finite(logits, "logits")?;
    if logits.is_empty() {
        return Err(Co2Error::InvalidDistribution("empty logits".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
    let lse = log_sum_exp(&scaled);
    Ok(scaled.into_iter().map(|s| s - lse).collect())
}

/// Temperature softmax: `exp(l_i / tau) / sum_k exp(l_k / tau)`.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<ProbVector> {
    check_temperature(tau)?;
    ensure_finite(logits, "logits")?;
    if logits.is_empty() {
        return Err(Co2Error::InvalidDistribution("empty logits".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / total).collect()))
}

/// Directed divergence `KL(p || q)` with `0 log 0 = 0`.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Co2Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let mut acc = 0.0;
    for (index, (&pi, &qi)) in p.0.iter().zip(&q.0).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Co2Error::SupportViolation { index, p: pi });
        }
        acc += pi * (pi.ln() - qi.ln());
    }
    Ok(acc.max(0.0))
}

/// `0.5 KL(p || q) + 0.5 KL(q || p)`.
pub fn symmetric_kl(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    Ok(0.5 * kl_divergence(p, q)? + 0.5 * kl_divergence(q, p)?)
}

/// Symmetric KL between two distributions given by their log-probabilities.
///
/// Both directions share the same pair of log vectors, so no entry is ever
/// exponentiated and re-logged.
pub fn symmetric_kl_from_logs(log_p: &[f64], log_q: &[f64]) -> Result<f64> {
    if log_p.len() != log_q.len() {
        return Err(Co2Error::LengthMismatch {
            left: log_p.len(),
            right: log_q.len(),
        });
    }
    let acc: f64 = log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| 0.5 * (lp.exp() - lq.exp()) * (lp - lq))
        .sum();
    Ok(acc.max(0.0))
}
