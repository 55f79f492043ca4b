//! Distance-aware weighting and focal-modulated binary cross-entropy.
//!
//! Each human-object pair contributes
//! `w * sum_c focal(delta_c, y_c)` where `w = sigmoid(alpha * D + beta)` and
//! `D` is the pair's center distance. The batch loss divides the summed pair
//! losses by the number of pairs with at least one positive verb (at least 1).

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autograd::{FocalSpec, NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softplus};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub focal_balance: f64,
    pub normalization: Normalization,
    pub da_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            focal_balance: 0.25,
            normalization: Normalization::PositivePairs,
            da_enabled: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config("focal_gamma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_balance) {
            return Err(Error::Config("focal_balance must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by `max(1, #pairs with a positive verb)`.
    PositivePairs,
    /// Plain sum.
    None,
}

/// `sigmoid(alpha * d + beta)`
pub fn da_weight(d: f64, alpha: f64, beta: f64) -> f64 {
    sigmoid(alpha * d + beta)
}

/// Focal term on a probability.
pub fn focal(delta: f64, y: f64, gamma: f64, balance: f64) -> Result<f64> {
    if y == 1.0 {
        Ok(-balance * libm::pow(1.0 - delta, gamma) * libm::log(delta))
    } else if y == 0.0 {
        Ok(-(1.0 - balance) * libm::pow(delta, gamma) * libm::log(1.0 - delta))
    } else {
        Err(Error::InvalidTarget(y))
    }
}

/// Focal term and its derivative, parameterized by the logit `x`
/// (`delta = sigmoid(x)`). Logs are computed through softplus so saturated
/// logits stay finite.
pub(crate) fn focal_logit_term(x: f64, y: f64, gamma: f64, balance: f64) -> Result<(f64, f64)> {
    let p = sigmoid(x);
    let q = sigmoid(-x);
    if y == 1.0 {
        let log_p = -softplus(-x);
        let qg = libm::pow(q, gamma);
        let loss = -balance * qg * log_p;
        let grad = balance * (gamma * qg * p * log_p - qg * q);
        Ok((loss, grad))
    } else if y == 0.0 {
        let log_q = -softplus(x);
        let pg = libm::pow(p, gamma);
        let loss = -(1.0 - balance) * pg * log_q;
        let grad = (1.0 - balance) * (pg * p - gamma * pg * q * log_q);
        Ok((loss, grad))
    } else {
        Err(Error::InvalidTarget(y))
    }
}

/// `w * sum_c focal(delta_c, y_c)`
pub fn pair_loss(delta: &[f64], y: &[f64], w: f64, cfg: &LossConfig) -> Result<f64> {
    if delta.len() != y.len() {
        return Err(Error::Shape {
            op: "pair_loss",
            left: (1, delta.len()),
            right: (1, y.len()),
        });
    }
    let mut total = 0.0;
    for (&d, &t) in delta.iter().zip(y) {
        total += focal(d, t, cfg.focal_gamma, cfg.focal_balance)?;
    }
    Ok(w * total)
}

/// Scored pair with its training target, for the plain-value loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub delta: Vec<f64>,
    pub target: Vec<f64>,
    pub distance: f64,
}

pub fn is_positive(target: &[f64]) -> bool {
    target.contains(&1.0)
}

pub fn normalizer<'a>(targets: impl IntoIterator<Item = &'a [f64]>, cfg: &LossConfig) -> f64 {
    match cfg.normalization {
        Normalization::PositivePairs => {
            let n = targets.into_iter().filter(|t| is_positive(t)).count();
            n.max(1) as f64
        }
        Normalization::None => 1.0,
    }
}

/// Plain-value batch loss. With DA disabled every weight is one.
pub fn batch_loss(pairs: &[ScoredPair], alpha: f64, beta: f64, cfg: &LossConfig) -> Result<f64> {
    let mut num = 0.0;
    for p in pairs {
        let w = if cfg.da_enabled {
            da_weight(p.distance, alpha, beta)
        } else {
            1.0
        };
        num += pair_loss(&p.delta, &p.target, w, cfg)?;
    }
    Ok(num / normalizer(pairs.iter().map(|p| p.target.as_slice()), cfg))
}

/// Records the loss of one scene's pairs: `scale * sum_pairs w * focal`.
///
/// `logits` is `m x C`; `da` carries the `alpha` and `beta` nodes when the
/// distance-aware weight is active.
pub fn record_pair_loss(
    tape: &mut Tape,
    logits: NodeId,
    targets: &Matrix,
    distances: &[f64],
    da: Option<(NodeId, NodeId)>,
    cfg: &LossConfig,
    scale: f64,
) -> Result<NodeId> {
    let weights = match da {
        Some((alpha, beta)) if cfg.da_enabled => Some(tape.da_weight(alpha, beta, distances)?),
        _ => None,
    };
    tape.focal_loss(
        logits,
        targets,
        weights,
        FocalSpec {
            gamma: cfg.focal_gamma,
            balance: cfg.focal_balance,
            scale,
        },
    )
}
