//! The decomposed final layer.
//!
//! Logits are `lᵢ = (‖f‖/α(f) + β(f)/α(f)) ‖wᵢ‖ cos φᵢ`, evaluated as
//! `m(f) · (f · wᵢ)` with the shared multiplier `m = 1/α + β/(α‖f‖)`.
//! Since `0 < α < 1` and `β > 0`, `m > 1` and the logit ranking of the plain
//! inner products is preserved exactly.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GeodinError, Result};
use crate::linalg::{dot, norm, sigmoid, softplus, Matrix};
use crate::scores::{log_sum_exp, softmax, FeatureVector};
use crate::EPS_NORM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    Vanilla,
    AlphaOnly,
    BetaOnly,
    AlphaBeta,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 4] = [
        HeadVariant::Vanilla,
        HeadVariant::AlphaOnly,
        HeadVariant::BetaOnly,
        HeadVariant::AlphaBeta,
    ];

    pub fn has_alpha(self) -> bool {
        matches!(self, HeadVariant::AlphaOnly | HeadVariant::AlphaBeta)
    }

    pub fn has_beta(self) -> bool {
        matches!(self, HeadVariant::BetaOnly | HeadVariant::AlphaBeta)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadVariant::Vanilla => "vanilla",
            HeadVariant::AlphaOnly => "alpha_only",
            HeadVariant::BetaOnly => "beta_only",
            HeadVariant::AlphaBeta => "alpha_beta",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            HeadVariant::Vanilla => 0,
            HeadVariant::AlphaOnly => 1,
            HeadVariant::BetaOnly => 2,
            HeadVariant::AlphaBeta => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        HeadVariant::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadVariant {
    type Err = GeodinError;

    fn from_str(s: &str) -> Result<Self> {
        HeadVariant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            GeodinError::Config(format!(
                "unknown head variant `{s}` (expected vanilla, alpha_only, beta_only or alpha_beta)"
            ))
        })
    }
}

/// Class weights (no bias) plus the linear alpha and beta heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub w: Matrix,
    pub alpha_weights: Vec<f64>,
    pub alpha_bias: f64,
    pub beta_weights: Vec<f64>,
    pub beta_bias: f64,
    pub variant: HeadVariant,
}

impl HeadParams {
    /// Class weights uniform in `±1/√D`; both heads start at zero so the
    /// initial multiplier is input independent (`α = 0.5`, `β = ln 2`).
    pub fn init<R: Rng>(feature_dim: usize, n_classes: usize, variant: HeadVariant, rng: &mut R) -> Self {
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let data = (0..feature_dim * n_classes)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        HeadParams {
            w: Matrix::from_vec(n_classes, feature_dim, data).expect("sized above"),
            alpha_weights: vec![0.0; feature_dim],
            alpha_bias: 0.0,
            beta_weights: vec![0.0; feature_dim],
            beta_bias: 0.0,
            variant,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.w.rows()
    }

    /// `α(f)`; identically 1 for variants without an alpha head.
    pub fn alpha(&self, f: &[f64]) -> f64 {
        if self.variant.has_alpha() {
            sigmoid(dot(&self.alpha_weights, f) + self.alpha_bias)
        } else {
            1.0
        }
    }

    /// `β(f)`; identically 0 for variants without a beta head.
    pub fn beta(&self, f: &[f64]) -> f64 {
        if self.variant.has_beta() {
            softplus(dot(&self.beta_weights, f) + self.beta_bias)
        } else {
            0.0
        }
    }

    pub fn forward(&self, f: &FeatureVector) -> Result<HeadForwardTrace> {
        if f.len() != self.feature_dim() {
            return Err(GeodinError::Shape(format!(
                "feature has dimension {} but head expects {}",
                f.len(),
                self.feature_dim()
            )));
        }
        Ok(self.forward_slice(f.as_slice()))
    }

    pub(crate) fn forward_slice(&self, f: &[f64]) -> HeadForwardTrace {
        let raw = self.w.matvec(f);
        let feature_norm = norm(f);
        let alpha_pre = dot(&self.alpha_weights, f) + self.alpha_bias;
        let beta_pre = dot(&self.beta_weights, f) + self.beta_bias;
        let alpha = if self.variant.has_alpha() {
            sigmoid(alpha_pre)
        } else {
            1.0
        };
        let beta = if self.variant.has_beta() {
            softplus(beta_pre)
        } else {
            0.0
        };
        let degenerate = self.variant != HeadVariant::Vanilla && feature_norm < EPS_NORM;
        let multiplier = if self.variant == HeadVariant::Vanilla {
            1.0
        } else if degenerate {
            1.0 / alpha
        } else {
            1.0 / alpha + beta / (alpha * feature_norm)
        };
        let logits = raw.iter().map(|z| multiplier * z).collect();
        HeadForwardTrace {
            alpha,
            beta,
            multiplier,
            logits,
            raw_logits: raw,
            feature: f.to_vec(),
            feature_norm,
            alpha_pre,
            beta_pre,
            degenerate,
        }
    }

    pub fn backward(&self, trace: &HeadForwardTrace, grad_logits: &[f64]) -> Result<HeadGradients> {
        if grad_logits.len() != self.n_classes() || trace.feature.len() != self.feature_dim() {
            return Err(GeodinError::Shape(format!(
                "gradient of length {} and trace feature of length {} do not fit a {}x{} head",
                grad_logits.len(),
                trace.feature.len(),
                self.n_classes(),
                self.feature_dim()
            )));
        }
        Ok(self.backward_unchecked(trace, grad_logits))
    }

    pub(crate) fn backward_unchecked(&self, trace: &HeadForwardTrace, grad_logits: &[f64]) -> HeadGradients {
        let d = self.feature_dim();
        let f = &trace.feature;
        let m = trace.multiplier;

        // l = m z, z = W f
        let grad_raw: Vec<f64> = grad_logits.iter().map(|g| g * m).collect();
        let mut w = Matrix::zeros(self.n_classes(), d);
        w.add_outer(1.0, &grad_raw, f);
        let mut feature = self.w.matvec_t(&grad_raw);

        let grad_m = dot(grad_logits, &trace.raw_logits);
        let alpha = trace.alpha;
        let beta = trace.beta;
        let n = trace.feature_norm;

        let mut grads = HeadGradients {
            w,
            alpha_weights: vec![0.0; d],
            alpha_bias: 0.0,
            beta_weights: vec![0.0; d],
            beta_bias: 0.0,
            feature: Vec::new(),
            degenerate: trace.degenerate,
        };

        if self.variant.has_alpha() {
            // m = (1 + β/n)/α, or 1/α when degenerate
            let numerator = if trace.degenerate { 1.0 } else { 1.0 + beta / n };
            let dm_dalpha = -numerator / (alpha * alpha);
            let dpre = grad_m * dm_dalpha * alpha * (1.0 - alpha);
            grads.alpha_bias = dpre;
            for (g, &x) in grads.alpha_weights.iter_mut().zip(f) {
                *g = dpre * x;
            }
            for (g, &a) in feature.iter_mut().zip(&self.alpha_weights) {
                *g += dpre * a;
            }
        }
        if self.variant.has_beta() && !trace.degenerate {
            let dm_dbeta = 1.0 / (alpha * n);
            let dpre = grad_m * dm_dbeta * sigmoid(trace.beta_pre);
            grads.beta_bias = dpre;
            for (g, &x) in grads.beta_weights.iter_mut().zip(f) {
                *g = dpre * x;
            }
            for (g, &b) in feature.iter_mut().zip(&self.beta_weights) {
                *g += dpre * b;
            }
            // ∂m/∂n · ∂n/∂f
            let dn = grad_m * (-beta / (alpha * n * n)) / n;
            for (g, &x) in feature.iter_mut().zip(f) {
                *g += dn * x;
            }
        }

        grads.feature = if trace.degenerate { vec![0.0; d] } else { feature };
        grads
    }

    /// Vanilla inner products `f · wᵢ`, independent of the heads.
    pub fn vanilla_logits(&self, f: &[f64]) -> Vec<f64> {
        self.w.matvec(f)
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite()
            && self.alpha_weights.iter().all(|v| v.is_finite())
            && self.beta_weights.iter().all(|v| v.is_finite())
            && self.alpha_bias.is_finite()
            && self.beta_bias.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadForwardTrace {
    pub alpha: f64,
    pub beta: f64,
    pub multiplier: f64,
    pub logits: Vec<f64>,
    /// `f · wᵢ` before the multiplier.
    pub raw_logits: Vec<f64>,
    pub feature: Vec<f64>,
    pub feature_norm: f64,
    pub alpha_pre: f64,
    pub beta_pre: f64,
    /// Feature norm below [`EPS_NORM`] on a non-vanilla head: `β` is dropped
    /// from the multiplier and no gradient flows back into the feature.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub w: Matrix,
    pub alpha_weights: Vec<f64>,
    pub alpha_bias: f64,
    pub beta_weights: Vec<f64>,
    pub beta_bias: f64,
    pub feature: Vec<f64>,
    pub degenerate: bool,
}

pub fn head_forward(f: &FeatureVector, params: &HeadParams) -> Result<HeadForwardTrace> {
    params.forward(f)
}

pub fn head_backward(params: &HeadParams, trace: &HeadForwardTrace, grad_logits: &[f64]) -> Result<HeadGradients> {
    params.backward(trace, grad_logits)
}

/// Cross entropy of the softmax and its gradient `softmax(l) − onehot(label)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(GeodinError::Index {
            index: label,
            len: logits.len(),
        });
    }
    let loss = log_sum_exp(logits) - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}
