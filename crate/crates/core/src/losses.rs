//! Instance discrimination and consistency losses over a queue of negatives.
//!
//! For a query `q`, its positive `p` and negatives `n_1..n_K` (all unit norm):
//!
//! ```text
//! L_ins = -log softmax([q.p, q.n_1, ..., q.n_K] / tau_ins)[0]
//! Q     = softmax([q.n_1, ..., q.n_K] / tau_con)
//! P     = softmax([p.n_1, ..., p.n_K] / tau_con)
//! L_con = 0.5 KL(P || Q) + 0.5 KL(Q || P)
//! L     = L_ins + alpha * L_con
//! ```
//!
//! `p` and the negatives are constants here: gradients are only ever produced
//! with respect to `q`. `P` acts as a soft target for `Q`.

use serde::{Deserialize, Serialize};

use crate::embeddings::Embeddings;
use crate::error::{Co2Error, Result};
use crate::numeric::{self, dot, log_softmax_temp, norm, ProbVector};

/// Unit-norm tolerance for vectors entering a loss.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// One query with its positive and a snapshot of the negatives.
#[derive(Debug, Clone, Copy)]
pub struct ContrastItem<'a> {
    pub query: &'a [f64],
    pub positive: &'a [f64],
    pub negatives: &'a Embeddings,
}

impl<'a> ContrastItem<'a> {
    /// Builds an item after checking dimensions and unit norms.
    pub fn new(query: &'a [f64], positive: &'a [f64], negatives: &'a Embeddings) -> Result<Self> {
        let item = Self {
            query,
            positive,
            negatives,
        };
        item.validate()?;
        Ok(item)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.query.len();
        if self.positive.len() != d {
            return Err(Co2Error::LengthMismatch {
                left: d,
                right: self.positive.len(),
            });
        }
        if self.negatives.dim() != d {
            return Err(Co2Error::LengthMismatch {
                left: d,
                right: self.negatives.dim(),
            });
        }
        if self.negatives.is_empty() {
            return Err(Co2Error::InvalidConfig("at least one negative is required".into()));
        }
        let off_unit = |v: &[f64]| (norm(v) - 1.0).abs() > UNIT_NORM_TOL;
        if off_unit(self.query) || off_unit(self.positive) {
            return Err(Co2Error::InvalidConfig("query and positive must be unit norm".into()));
        }
        if self.negatives.max_norm_error() > UNIT_NORM_TOL {
            return Err(Co2Error::InvalidConfig("negatives must be unit norm".into()));
        }
        Ok(())
    }

    pub fn num_negatives(&self) -> usize {
        self.negatives.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossHyperParams {
    pub tau_ins: f64,
    pub tau_con: f64,
    pub alpha: f64,
    /// Label smoothing on the instance term. Zero disables it.
    pub smoothing_eps: f64,
}

impl Default for LossHyperParams {
    fn default() -> Self {
        Self {
            tau_ins: 0.07,
            tau_con: 0.04,
            alpha: 10.0,
            smoothing_eps: 0.0,
        }
    }
}

impl LossHyperParams {
    pub fn validate(&self) -> Result<()> {
        for tau in [self.tau_ins, self.tau_con] {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Co2Error::NonPositiveTemperature(tau));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Co2Error::InvalidConfig(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        check_epsilon(self.smoothing_eps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ins: f64,
    pub l_con: f64,
    pub total: f64,
    /// The positive logit is strictly larger than every negative logit.
    pub correct_instance: bool,
    /// Hyperparameters the breakdown was computed with.
    pub params: LossHyperParams,
}

fn check_epsilon(eps: f64) -> Result<()> {
    if (0.0..1.0).contains(&eps) {
        Ok(())
    } else {
        Err(Co2Error::InvalidEpsilon(eps))
    }
}

/// Dot products `[q.p, q.n_1, ..., q.n_K]`, positive first.
pub fn instance_logits(item: &ContrastItem<'_>) -> Vec<f64> {
    std::iter::once(dot(item.query, item.positive))
        .chain(item.negatives.rows().map(|n| dot(item.query, n)))
        .collect()
}

fn similarities(anchor: &[f64], negatives: &Embeddings) -> Vec<f64> {
    negatives.rows().map(|n| dot(anchor, n)).collect()
}

/// Cross entropy of the instance softmax against a target putting `1 - eps`
/// on the positive and spreading `eps` evenly over the negatives.
fn smoothed_cross_entropy(log_probs: &[f64], eps: f64) -> f64 {
    let k = (log_probs.len() - 1) as f64;
    let on_negatives: f64 = log_probs[1..].iter().sum();
    -(1.0 - eps) * log_probs[0] - (eps / k) * on_negatives
}

/// InfoNCE loss and the raw logits it was computed from.
pub fn info_nce(item: &ContrastItem<'_>, tau_ins: f64) -> Result<(f64, Vec<f64>)> {
    let logits = instance_logits(item);
    let log_probs = log_softmax_temp(&logits, tau_ins)?;
    Ok((-log_probs[0], logits))
}

/// InfoNCE with label smoothing over the negatives.
pub fn label_smoothing_infonce(item: &ContrastItem<'_>, tau_ins: f64, eps: f64) -> Result<f64> {
    check_epsilon(eps)?;
    let log_probs = log_softmax_temp(&instance_logits(item), tau_ins)?;
    Ok(smoothed_cross_entropy(&log_probs, eps))
}

/// Softmax over the anchor's similarities to the negatives only.
pub fn similarity_distribution(
    anchor: &[f64],
    negatives: &Embeddings,
    tau_con: f64,
) -> Result<ProbVector> {
    numeric::softmax_temp(&similarities(anchor, negatives), tau_con)
}

/// Symmetric KL between the positive's and the query's similarity distributions.
pub fn consistency_loss(item: &ContrastItem<'_>, tau_con: f64) -> Result<f64> {
    let log_p = log_softmax_temp(&similarities(item.positive, item.negatives), tau_con)?;
    let log_q = log_softmax_temp(&similarities(item.query, item.negatives), tau_con)?;
    numeric::symmetric_kl_from_logs(&log_p, &log_q)
}

/// Weighted total `L_ins + alpha * L_con`.
pub fn total_loss(item: &ContrastItem<'_>, hp: &LossHyperParams) -> Result<LossBreakdown> {
    evaluate(item, hp, false).map(|(b, _)| b)
}

/// Gradient of [`total_loss`] with respect to the query vector as given.
///
/// The positive and the negatives are treated as constants.
pub fn loss_gradient_wrt_query(item: &ContrastItem<'_>, hp: &LossHyperParams) -> Result<Vec<f64>> {
    evaluate(item, hp, true).map(|(_, g)| g.expect("gradient requested"))
}

/// Computes the loss breakdown and, optionally, `dL/dq` in one pass.
pub fn evaluate(
    item: &ContrastItem<'_>,
    hp: &LossHyperParams,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    hp.validate()?;
    let logits = instance_logits(item);
    let log_s = log_softmax_temp(&logits, hp.tau_ins)?;
    let l_ins = smoothed_cross_entropy(&log_s, hp.smoothing_eps);
    let correct_instance = logits[1..].iter().all(|&n| logits[0] > n);

    let log_p = log_softmax_temp(&similarities(item.positive, item.negatives), hp.tau_con)?;
    let log_q = log_softmax_temp(&logits[1..], hp.tau_con)?;
    let l_con = numeric::symmetric_kl_from_logs(&log_p, &log_q)?;

    let breakdown = LossBreakdown {
        l_ins,
        l_con,
        total: l_ins + hp.alpha * l_con,
        correct_instance,
        params: *hp,
    };
    if !with_grad {
        return Ok((breakdown, None));
    }

    let d = item.query.len();
    let k = item.num_negatives();
    let mut grad = vec![0.0; d];

    // dL_ins/dlogit_j = (s_j - t_j) / tau_ins
    let neg_target = hp.smoothing_eps / k as f64;
    let pos_coef = (log_s[0].exp() - (1.0 - hp.smoothing_eps)) / hp.tau_ins;
    axpy(&mut grad, pos_coef, item.positive);
    for (j, n) in item.negatives.rows().enumerate() {
        axpy(&mut grad, (log_s[j + 1].exp() - neg_target) / hp.tau_ins, n);
    }

    if hp.alpha != 0.0 {
        // With u = q.n / tau_con and r = log Q - log P:
        // d KL(P||Q)/du = Q - P,  d KL(Q||P)/du = Q * (r - E_Q[r]).
        let q: Vec<f64> = log_q.iter().map(|l| l.exp()).collect();
        let r: Vec<f64> = log_q.iter().zip(&log_p).map(|(a, b)| a - b).collect();
        let mean_r = dot(&q, &r);
        for (i, n) in item.negatives.rows().enumerate() {
            let p_i = log_p[i].exp();
            let g = 0.5 * (q[i] - p_i) + 0.5 * q[i] * (r[i] - mean_r);
            axpy(&mut grad, hp.alpha * g / hp.tau_con, n);
        }
    }
    Ok((breakdown, Some(grad)))
}

#[inline]
fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (y, xi) in acc.iter_mut().zip(x) {
        *y += a * xi;
    }
}

/// Mean of per-item losses for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub l_ins: f64,
    pub l_con: f64,
    pub total: f64,
    pub inst_acc: f64,
}

impl BatchLoss {
    /// Averages in item order.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let mut out = Self {
            l_ins: 0.0,
            l_con: 0.0,
            total: 0.0,
            inst_acc: 0.0,
        };
        for b in items {
            out.l_ins += b.l_ins;
            out.l_con += b.l_con;
            out.total += b.total;
            out.inst_acc += if b.correct_instance { 1.0 } else { 0.0 };
        }
        out.l_ins /= n;
        out.l_con /= n;
        out.total /= n;
        out.inst_acc /= n;
        out
    }
}
