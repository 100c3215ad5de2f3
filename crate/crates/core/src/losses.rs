//! Training objectives with analytic gradients.
//!
//! Each loss returns a [`LossValue`] whose gradient is taken with respect to
//! the loss's direct input (evidence, logits, projections, or per-term
//! losses for the masked ensemble objective).

use serde::{Deserialize, Serialize};

use crate::error::{Result, UmeError};
use crate::evidential::{sigmoid, EvidenceVector};
use crate::special::{digamma, ln_gamma, trigamma};

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl LossValue {
    pub fn zero(n: usize) -> Self {
        Self { value: 0.0, gradient: vec![0.0; n] }
    }
}

fn check_labels(k: usize, y: &[bool]) -> Result<()> {
    if y.len() != k {
        return Err(UmeError::DimensionMismatch { expected: k, found: y.len() });
    }
    Ok(())
}

/// Negative log marginal likelihood of the positive labels under
/// `Dir(e + 1)`, summed over positives: `sum_k y_k (ln S - ln alpha_k)`.
pub fn marginal_likelihood_loss(e: &EvidenceVector, y: &[bool]) -> Result<LossValue> {
    let e = e.as_slice();
    check_labels(e.len(), y)?;
    let positives = y.iter().filter(|&&b| b).count();
    if positives == 0 {
        return Err(UmeError::EmptyLabelSet);
    }
    let strength: f64 = e.iter().map(|v| v + 1.0).sum();
    let ln_s = strength.ln();
    let mut value = 0.0;
    let mut gradient = vec![positives as f64 / strength; e.len()];
    for (k, (&ek, &yk)) in e.iter().zip(y).enumerate() {
        if yk {
            value += ln_s - (ek + 1.0).ln();
            gradient[k] -= 1.0 / (ek + 1.0);
        }
    }
    Ok(LossValue { value, gradient })
}

/// `KL(Dir(alpha_tilde) || Dir(1))` with `alpha_tilde = 1 + (1 - y) * e`.
pub fn evidence_kl_loss(e: &EvidenceVector, y: &[bool]) -> Result<LossValue> {
    let e = e.as_slice();
    check_labels(e.len(), y)?;
    let k = e.len() as f64;
    let alpha: Vec<f64> = e
        .iter()
        .zip(y)
        .map(|(&v, &pos)| if pos { 1.0 } else { 1.0 + v })
        .collect();
    let s: f64 = alpha.iter().sum();
    let psi_s = digamma(s);
    let mut value = ln_gamma(s) - ln_gamma(k);
    for &a in &alpha {
        value += -ln_gamma(a) + (a - 1.0) * (digamma(a) - psi_s);
    }
    let tri_s = trigamma(s);
    let gradient = alpha
        .iter()
        .zip(y)
        .map(|(&a, &pos)| {
            if pos {
                0.0
            } else {
                (a - 1.0) * trigamma(a) - (s - k) * tri_s
            }
        })
        .collect();
    Ok(LossValue { value: value.max(0.0), gradient })
}

/// Linear annealing horizon for the KL weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub horizon: usize,
}

impl AnnealSchedule {
    pub fn new(horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(UmeError::InvalidArgument("anneal horizon must be >= 1".into()));
        }
        Ok(Self { horizon })
    }
}

/// `min(1, t / T)`.
pub fn anneal(t: usize, schedule: AnnealSchedule) -> f64 {
    (t as f64 / schedule.horizon as f64).min(1.0)
}

pub const BCE_CLAMP: f64 = 1e-7;

/// Binary cross-entropy summed over labels. The gradient is with respect to
/// the pre-sigmoid logits, `p - y`.
pub fn bce_loss(p: &[f64], y: &[bool]) -> Result<LossValue> {
    check_labels(p.len(), y)?;
    let mut value = 0.0;
    let mut gradient = Vec::with_capacity(p.len());
    for (&pk, &yk) in p.iter().zip(y) {
        let q = pk.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        value -= if yk { q.ln() } else { (1.0 - q).ln() };
        gradient.push(pk - if yk { 1.0 } else { 0.0 });
    }
    Ok(LossValue { value, gradient })
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Same loss as [`bce_loss`] evaluated directly from logits.
pub fn bce_with_logits(logits: &[f64], y: &[bool]) -> Result<LossValue> {
    check_labels(logits.len(), y)?;
    let mut value = 0.0;
    let mut gradient = Vec::with_capacity(logits.len());
    for (&z, &yk) in logits.iter().zip(y) {
        value -= if yk { log_sigmoid(z) } else { log_sigmoid(-z) };
        gradient.push(sigmoid(z) - if yk { 1.0 } else { 0.0 });
    }
    Ok(LossValue { value, gradient })
}

/// NT-Xent over `2N` projection rows of width `dim`, flattened row-major.
/// `partner[i]` is the positive for row `i`. Returns the mean over all
/// anchors; the gradient has the shape of `rows`.
pub fn ntxent_loss(rows: &[f64], dim: usize, partner: &[usize], tau: f64) -> Result<LossValue> {
    if dim == 0 || rows.len() % dim != 0 {
        return Err(UmeError::InvalidArgument("projection rows have inconsistent width".into()));
    }
    if !(tau > 0.0) {
        return Err(UmeError::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let n = rows.len() / dim;
    if partner.len() != n {
        return Err(UmeError::DimensionMismatch { expected: n, found: partner.len() });
    }
    if n < 2 {
        return Err(UmeError::InvalidArgument("need at least one positive pair".into()));
    }
    let row = |i: usize| &rows[i * dim..(i + 1) * dim];
    let norms: Vec<f64> = (0..n).map(|i| row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(UmeError::ZeroNorm(i));
    }
    let mut cos = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let d: f64 = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum();
            let c = d / (norms[i] * norms[j]);
            cos[i * n + j] = c;
            cos[j * n + i] = c;
        }
    }
    // dL/dcos accumulated for every ordered pair.
    let mut dcos = vec![0.0; n * n];
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    for i in 0..n {
        let j = partner[i];
        if j >= n || j == i {
            return Err(UmeError::InvalidArgument(format!("invalid partner {j} for row {i}")));
        }
        let max = (0..n)
            .filter(|&k| k != i)
            .map(|k| cos[i * n + k] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).filter(|&k| k != i).map(|k| (cos[i * n + k] / tau - max).exp()).sum();
        let lse = max + z.ln();
        value += lse - cos[i * n + j] / tau;
        for k in (0..n).filter(|&k| k != i) {
            let soft = (cos[i * n + k] / tau - lse).exp();
            dcos[i * n + k] += scale * soft / tau;
        }
        dcos[i * n + j] -= scale / tau;
    }
    let mut gradient = vec![0.0; rows.len()];
    for i in 0..n {
        for k in 0..n {
            let g = dcos[i * n + k];
            if g == 0.0 {
                continue;
            }
            let c = cos[i * n + k];
            let inv = 1.0 / (norms[i] * norms[k]);
            for d in 0..dim {
                let (a, b) = (row(i)[d], row(k)[d]);
                gradient[i * dim + d] += g * (b * inv - c * a / (norms[i] * norms[i]));
                gradient[k * dim + d] += g * (a * inv - c * b / (norms[k] * norms[k]));
            }
        }
    }
    Ok(LossValue { value: value * scale, gradient })
}

/// Per-sample terms of one expert's objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExpertTerms {
    pub marginal_likelihood: f64,
    pub evidence_kl: f64,
    pub bce_real: f64,
    pub bce_key: f64,
    pub contrastive: f64,
}

/// `L_ml + lambda * L_kl + L_C + L_C_key + L_cl`.
pub fn single_expert_loss(terms: &ExpertTerms, lambda: f64) -> f64 {
    terms.marginal_likelihood
        + lambda * terms.evidence_kl
        + terms.bce_real
        + terms.bce_key
        + terms.contrastive
}

/// Indicator-masked double sum over samples and experts. The gradient is the
/// mask itself (row-major over `per_term`), since the indicator carries no
/// gradient of its own.
pub fn masked_ensemble_loss(per_term: &[Vec<f64>], weights: &[Vec<f64>], epsilon: f64) -> Result<LossValue> {
    if per_term.len() != weights.len() {
        return Err(UmeError::DimensionMismatch { expected: per_term.len(), found: weights.len() });
    }
    let mut value = 0.0;
    let mut gradient = Vec::new();
    for (losses, ws) in per_term.iter().zip(weights) {
        if losses.len() != ws.len() {
            return Err(UmeError::DimensionMismatch { expected: losses.len(), found: ws.len() });
        }
        for (&l, &w) in losses.iter().zip(ws) {
            let open = w > epsilon;
            if open {
                value += l;
            }
            gradient.push(if open { 1.0 } else { 0.0 });
        }
    }
    Ok(LossValue { value, gradient })
}
