//! Temperature-scaled in-batch contrastive objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// `-mean log softmax(positive)`.
    #[default]
    Log,
    /// `-mean softmax(positive)` without the logarithm, kept for comparison.
    Probability,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_queries: Vec<Vec<f64>>,
    pub grad_pool: Vec<Vec<f64>>,
    /// `log Σ_j exp(q_i·c_j / τ)` per query.
    pub log_denominators: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Each query is scored against the whole candidate pool; `positives[i]`
/// indexes the pool entry that is correct for query `i`.
pub fn pooled_contrastive_loss(
    queries: &[Vec<f64>],
    pool: &[Vec<f64>],
    positives: &[usize],
    tau: f64,
    form: LossForm,
) -> Result<LossOutput> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    if queries.is_empty() || pool.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if positives.len() != queries.len() {
        return Err(Error::InvalidArgument(format!(
            "{} queries but {} positive indices",
            queries.len(),
            positives.len()
        )));
    }
    if let Some(&p) = positives.iter().find(|&&p| p >= pool.len()) {
        return Err(Error::InvalidArgument(format!("positive index {p} outside pool of {}", pool.len())));
    }
    let dim = queries[0].len();
    if queries.iter().chain(pool).any(|r| r.len() != dim) {
        return Err(Error::InvalidArgument("embedding dimensions differ".into()));
    }

    let b = queries.len() as f64;
    let mut loss = 0.0;
    let mut gq = vec![vec![0.0; dim]; queries.len()];
    let mut gp = vec![vec![0.0; dim]; pool.len()];
    let mut log_den = Vec::with_capacity(queries.len());
    let mut logits = vec![0.0; pool.len()];
    for (i, q) in queries.iter().enumerate() {
        for (z, c) in logits.iter_mut().zip(pool) {
            *z = dot(q, c) / tau;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        log_den.push(lse);
        let pos = positives[i];
        let log_p = logits[pos] - lse;
        // dL/dz_j for this query, already divided by |B|
        let dz: Vec<f64> = match form {
            LossForm::Log => {
                loss -= log_p / b;
                logits
                    .iter()
                    .enumerate()
                    .map(|(j, z)| ((z - lse).exp() - if j == pos { 1.0 } else { 0.0 }) / b)
                    .collect()
            }
            LossForm::Probability => {
                let p_pos = log_p.exp();
                loss -= p_pos / b;
                logits
                    .iter()
                    .enumerate()
                    .map(|(j, z)| -p_pos * ((if j == pos { 1.0 } else { 0.0 }) - (z - lse).exp()) / b)
                    .collect()
            }
        };
        for (j, c) in pool.iter().enumerate() {
            let s = dz[j] / tau;
            if s == 0.0 {
                continue;
            }
            for k in 0..dim {
                gq[i][k] += s * c[k];
                gp[j][k] += s * q[k];
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    // -log p can round to a tiny negative number when p == 1
    if form == LossForm::Log {
        loss = loss.max(0.0);
    }
    Ok(LossOutput { loss, grad_queries: gq, grad_pool: gp, log_denominators: log_den })
}

/// Aligned-batch loss: row `i` of `u` is positive for row `i` of `v`, every
/// other row of `v` is an in-batch negative.
pub fn contrastive_loss(u: &[Vec<f64>], v: &[Vec<f64>], tau: f64) -> Result<LossOutput> {
    contrastive_loss_with(u, v, tau, LossForm::Log)
}

pub fn contrastive_loss_with(u: &[Vec<f64>], v: &[Vec<f64>], tau: f64, form: LossForm) -> Result<LossOutput> {
    if u.len() != v.len() {
        return Err(Error::InvalidArgument(format!("batch sizes differ: {} vs {}", u.len(), v.len())));
    }
    let positives: Vec<usize> = (0..u.len()).collect();
    pooled_contrastive_loss(u, v, &positives, tau, form)
}
