//! Shift scores derived from the KL divergence between the uniform
//! distribution and the softmax prediction.
//!
//! With logits `lᵢ = ‖f‖ ‖wᵢ‖ cos φᵢ`, the combined score
//! `U = max l − mean l` brackets `KL(U‖P)` within `ln M` and factors as
//! `g · h`:
//!
//! * `g = ‖f‖` responds to covariate shift (input statistics),
//! * `h = max ‖wⱼ‖cos φⱼ − mean ‖wᵢ‖cos φᵢ` responds to concept shift.
//!
//! For every score a higher value means "more in-distribution".

use serde::{Deserialize, Serialize};

use crate::error::{GeodinError, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::EPS_NORM;

/// A rectified feature: finite and elementwise nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GeodinError::Domain(format!(
                "feature entry {i} is not finite ({})",
                values[i]
            )));
        }
        if let Some(i) = values.iter().position(|&v| v < 0.0) {
            return Err(GeodinError::Domain(format!(
                "feature entry {i} is negative ({}); features must be rectified",
                values[i]
            )));
        }
        Ok(FeatureVector(values))
    }

    /// Caller guarantees the invariants (used on ReLU outputs).
    pub(crate) fn from_rectified(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite() && *v >= 0.0));
        FeatureVector(values)
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

/// Per-sample norm/angle decomposition of the vanilla logits `f · wᵢ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryView {
    pub feature_norm: f64,
    pub weight_norms: Vec<f64>,
    pub cosines: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub g: f64,
    pub h: f64,
    pub u: f64,
    pub msp: f64,
    pub energy: f64,
}

impl ScoreSet {
    /// `g`, `h`, `U` and `energy` come from the vanilla geometry and so do not
    /// depend on the alpha/beta heads; `msp` is the confidence of the model's
    /// actual predictive distribution (`output_logits`).
    pub fn compute(f: &FeatureVector, view: &GeometryView, output_logits: &[f64]) -> Self {
        ScoreSet {
            g: covariate_score(f),
            h: concept_score(view),
            u: combined_score(view),
            msp: msp_score(output_logits),
            energy: energy_score(&view.logits),
        }
    }
}

pub fn geometry_view(f: &FeatureVector, w: &Matrix) -> Result<GeometryView> {
    if w.cols() != f.len() {
        return Err(GeodinError::Shape(format!(
            "feature has dimension {} but weight matrix has {} columns",
            f.len(),
            w.cols()
        )));
    }
    if f.is_empty() || w.rows() < 2 {
        return Err(GeodinError::Shape(format!(
            "need D >= 1 and M >= 2, got D={} M={}",
            f.len(),
            w.rows()
        )));
    }
    let fv = f.as_slice();
    let feature_norm = norm(fv);
    let m = w.rows();
    let mut weight_norms = Vec::with_capacity(m);
    let mut cosines = Vec::with_capacity(m);
    let mut logits = Vec::with_capacity(m);
    for i in 0..m {
        let row = w.row(i);
        let wn = norm(row);
        let l = dot(fv, row);
        let c = if feature_norm < EPS_NORM || wn < EPS_NORM {
            0.0
        } else {
            (l / (feature_norm * wn)).clamp(-1.0, 1.0)
        };
        weight_norms.push(wn);
        cosines.push(c);
        logits.push(l);
    }
    Ok(GeometryView {
        feature_norm,
        weight_norms,
        cosines,
        logits,
    })
}

/// `g(x) = ‖f‖₂`.
pub fn covariate_score(f: &FeatureVector) -> f64 {
    norm(f.as_slice())
}

/// `h(y, x)`: gap between the winning weighted cosine and the class mean.
///
/// When the feature norm is below [`EPS_NORM`] the cosines are undefined and
/// the un-normalised logit gap is returned instead.
pub fn concept_score(view: &GeometryView) -> f64 {
    if view.feature_norm < EPS_NORM {
        return max_minus_mean(&view.logits);
    }
    let terms: Vec<f64> = view
        .weight_norms
        .iter()
        .zip(&view.cosines)
        .map(|(w, c)| w * c)
        .collect();
    max_minus_mean(&terms)
}

/// `U = max l − mean l`.
pub fn combined_score(view: &GeometryView) -> f64 {
    max_minus_mean(&view.logits)
}

fn max_minus_mean(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (max - mean).max(0.0)
}

/// `ln Σ exp(lⱼ)` with the max subtracted first.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn msp_score(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // the arg-max term contributes exp(0) = 1 to the denominator
    1.0 / logits.iter().map(|l| (l - max).exp()).sum::<f64>()
}

/// Log-sum-exp of the logits; the negative free energy.
pub fn energy_score(logits: &[f64]) -> f64 {
    log_sum_exp(logits)
}

/// `KL(U‖P) = −Σ (1/M) ln(M Pᵢ)`.
pub fn kl_from_uniform(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(GeodinError::Domain("empty probability vector".into()));
    }
    if let Some(i) = probs.iter().position(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(GeodinError::Domain(format!(
            "probability {i} is not strictly positive ({})",
            probs[i]
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(GeodinError::Domain(format!("probabilities sum to {total}, not 1")));
    }
    let m = probs.len() as f64;
    Ok(-probs.iter().map(|p| (m * p).ln()).sum::<f64>() / m)
}

/// The same divergence evaluated from logits as `LSE(l) − mean l − ln M`,
/// which stays finite when some probabilities underflow.
pub fn kl_from_uniform_logits(logits: &[f64]) -> f64 {
    let m = logits.len() as f64;
    log_sum_exp(logits) - logits.iter().sum::<f64>() / m - m.ln()
}
