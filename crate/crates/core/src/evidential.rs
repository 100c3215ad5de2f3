//! Subjective-logic opinions over Dirichlet evidence and the sequential
//! fusion algebra used to combine adjacent experts.
//!
//! Every function here is pure. Evidence is the non-negative support per
//! label; an opinion derives `alpha = e + 1`, strength `S = sum(alpha)`,
//! beliefs `b_k = e_k / S` and uncertainty `u = K / S`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UmeError};

/// Largest conflict value allowed in a `1 - C` divisor.
pub const CONFLICT_CLAMP: f64 = 1.0 - 1e-6;
/// Upper bound for propagated expert weights.
pub const WEIGHT_CLAMP: f64 = 10.0;

/// Non-negative evidence, one entry per label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceVector(Vec<f64>);

impl EvidenceVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(UmeError::NonFinite { index, value });
            }
            if value < 0.0 {
                return Err(UmeError::NegativeEvidence { index, value });
            }
        }
        Ok(Self(values))
    }

    /// Zero evidence over `k` labels.
    pub fn vacuous(k: usize) -> Self {
        Self(vec![0.0; k])
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

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Map classifier logits to evidence through softplus.
pub fn evidence_from_logits(logits: &[f64]) -> Result<EvidenceVector> {
    for (index, &value) in logits.iter().enumerate() {
        if !value.is_finite() {
            return Err(UmeError::NonFinite { index, value });
        }
    }
    Ok(EvidenceVector(logits.iter().map(|&z| softplus(z)).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletOpinion {
    pub alpha: Vec<f64>,
    pub belief: Vec<f64>,
    pub uncertainty: f64,
    pub strength: f64,
}

impl DirichletOpinion {
    pub fn num_labels(&self) -> usize {
        self.alpha.len()
    }

    pub fn belief_mass(&self) -> f64 {
        self.belief.iter().sum()
    }
}

pub fn opinion_from_evidence(e: &EvidenceVector) -> DirichletOpinion {
    let alpha: Vec<f64> = e.0.iter().map(|&v| v + 1.0).collect();
    let strength: f64 = alpha.iter().sum();
    let belief = alpha.iter().map(|&a| (a - 1.0) / strength).collect();
    DirichletOpinion {
        uncertainty: alpha.len() as f64 / strength,
        alpha,
        belief,
        strength,
    }
}

/// Cross-label belief product between two adjacent opinions,
/// `sum_{i != j} b_i^curr b_j^prev`.
pub fn conflict(prev: &DirichletOpinion, curr: &DirichletOpinion) -> Result<f64> {
    if prev.belief.len() != curr.belief.len() {
        return Err(UmeError::DimensionMismatch {
            expected: prev.belief.len(),
            found: curr.belief.len(),
        });
    }
    let agree: f64 = prev
        .belief
        .iter()
        .zip(&curr.belief)
        .map(|(p, c)| p * c)
        .sum();
    let c = curr.belief_mass() * prev.belief_mass() - agree;
    Ok(c.clamp(0.0, 1.0))
}

fn check_shared_k(opinions: &[DirichletOpinion]) -> Result<()> {
    let Some(first) = opinions.first() else {
        return Err(UmeError::InvalidArgument("at least one opinion is required".into()));
    };
    let k = first.num_labels();
    for o in opinions {
        if o.num_labels() != k {
            return Err(UmeError::DimensionMismatch {
                expected: k,
                found: o.num_labels(),
            });
        }
    }
    Ok(())
}

/// Conflicts `C^1..C^M` with `C^1 = 0`.
pub fn conflict_chain(opinions: &[DirichletOpinion]) -> Result<Vec<f64>> {
    check_shared_k(opinions)?;
    let mut out = Vec::with_capacity(opinions.len());
    out.push(0.0);
    for pair in opinions.windows(2) {
        out.push(conflict(&pair[0], &pair[1])?);
    }
    Ok(out)
}

fn divisor(c: f64) -> f64 {
    1.0 - c.min(CONFLICT_CLAMP)
}

/// Sequentially fused uncertainty `prod(u^m) / prod(1 - C^m)`.
///
/// Can exceed one when adjacent experts strongly disagree; the value is
/// returned as-is.
pub fn fuse_uncertainty(opinions: &[DirichletOpinion]) -> Result<f64> {
    let conflicts = conflict_chain(opinions)?;
    Ok(fused_uncertainty_from(opinions, &conflicts))
}

fn fused_uncertainty_from(opinions: &[DirichletOpinion], conflicts: &[f64]) -> f64 {
    let num: f64 = opinions.iter().map(|o| o.uncertainty).product();
    let den: f64 = conflicts.iter().map(|&c| divisor(c)).product();
    num / den
}

/// Weight recursion without the final clamp: `w^1 = 1`,
/// `w^{m+1} = w^m u^m / (1 - C^m)`.
pub fn propagate_weights_unclamped(uncertainties: &[f64], conflicts: &[f64]) -> Vec<f64> {
    let m = uncertainties.len();
    let mut w = Vec::with_capacity(m);
    if m == 0 {
        return w;
    }
    w.push(1.0);
    for i in 1..m {
        let prev = w[i - 1];
        w.push(prev * uncertainties[i - 1] / divisor(conflicts[i - 1]));
    }
    w
}

/// Same recursion, with each weight clamped to `[0, WEIGHT_CLAMP]` before it
/// feeds the next step.
pub fn weights_from_chain(uncertainties: &[f64], conflicts: &[f64]) -> Vec<f64> {
    let m = uncertainties.len();
    let mut w = Vec::with_capacity(m);
    if m == 0 {
        return w;
    }
    w.push(1.0);
    for i in 1..m {
        let next = w[i - 1] * uncertainties[i - 1] / divisor(conflicts[i - 1]);
        w.push(next.clamp(0.0, WEIGHT_CLAMP));
    }
    w
}

pub fn propagate_weights(opinions: &[DirichletOpinion]) -> Result<Vec<f64>> {
    let conflicts = conflict_chain(opinions)?;
    let u: Vec<f64> = opinions.iter().map(|o| o.uncertainty).collect();
    Ok(weights_from_chain(&u, &conflicts))
}

/// Softmax of `weights / eta`.
pub fn temperature_softmax(weights: &[f64], eta: f64) -> Result<Vec<f64>> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(UmeError::InvalidArgument(format!(
            "temperature eta must be positive, got {eta}"
        )));
    }
    let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = weights.iter().map(|&w| ((w - max) / eta).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|v| v / z).collect())
}

/// Convex combination `sum_m softmax(w/eta)_m e^m`.
pub fn aggregate_evidence(evidences: &[EvidenceVector], weights: &[f64], eta: f64) -> Result<Vec<f64>> {
    if evidences.is_empty() {
        return Err(UmeError::InvalidArgument("at least one expert is required".into()));
    }
    if weights.len() != evidences.len() {
        return Err(UmeError::DimensionMismatch {
            expected: evidences.len(),
            found: weights.len(),
        });
    }
    let k = evidences[0].len();
    let coeffs = temperature_softmax(weights, eta)?;
    let mut out = vec![0.0; k];
    for (e, &c) in evidences.iter().zip(&coeffs) {
        if e.len() != k {
            return Err(UmeError::DimensionMismatch { expected: k, found: e.len() });
        }
        for (o, &v) in out.iter_mut().zip(e.as_slice()) {
            *o += c * v;
        }
    }
    Ok(out)
}

pub fn predict_probabilities(fused_evidence: &[f64]) -> Vec<f64> {
    fused_evidence.iter().map(|&v| sigmoid(v)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Conflict-propagated weights with temperature aggregation.
    #[default]
    Dst,
    /// Plain mean of expert evidence.
    Average,
}

impl std::str::FromStr for FusionMode {
    type Err = UmeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dst" => Ok(FusionMode::Dst),
            "average" => Ok(FusionMode::Average),
            other => Err(UmeError::InvalidArgument(format!(
                "unknown fusion mode '{other}' (expected dst or average)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Dst => "dst",
            FusionMode::Average => "average",
        })
    }
}

/// Every intermediate of one fused prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionTrace {
    pub conflicts: Vec<f64>,
    pub weights: Vec<f64>,
    pub uncertainties: Vec<f64>,
    /// Diagnostic only; prediction goes through `fused_evidence`.
    pub fused_uncertainty: f64,
    pub fused_evidence: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl FusionTrace {
    /// Largest adjacent-pair conflict, zero for a single expert.
    pub fn max_conflict(&self) -> f64 {
        self.conflicts.iter().cloned().fold(0.0, f64::max)
    }

    pub fn last_conflict(&self) -> f64 {
        self.conflicts.last().copied().unwrap_or(0.0)
    }
}

pub fn fuse(evidences: &[EvidenceVector], eta: f64, mode: FusionMode) -> Result<FusionTrace> {
    if evidences.is_empty() {
        return Err(UmeError::InvalidArgument("at least one expert is required".into()));
    }
    let opinions: Vec<DirichletOpinion> = evidences.iter().map(opinion_from_evidence).collect();
    check_shared_k(&opinions)?;
    let uncertainties: Vec<f64> = opinions.iter().map(|o| o.uncertainty).collect();
    let (conflicts, weights) = match mode {
        FusionMode::Dst => {
            let c = conflict_chain(&opinions)?;
            let w = weights_from_chain(&uncertainties, &c);
            (c, w)
        }
        FusionMode::Average => (vec![0.0; opinions.len()], vec![1.0; opinions.len()]),
    };
    let fused_uncertainty = fused_uncertainty_from(&opinions, &conflicts);
    let fused_evidence = aggregate_evidence(evidences, &weights, eta)?;
    let probabilities = predict_probabilities(&fused_evidence);
    Ok(FusionTrace {
        conflicts,
        weights,
        uncertainties,
        fused_uncertainty,
        fused_evidence,
        probabilities,
    })
}
