use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::PairLabel;
use crate::error::{Error, Result};

/// Numerator of the exponential rate: `gamma = -EXP_RATE / c_n`.
pub const EXP_RATE: f64 = 2.77;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    /// `(1 - y) * alpha * D^2 + y * beta * exp(gamma * D)`.
    #[default]
    Exponential,
    /// Classical margin hinge, `(1 - y) * D^2 / 2 + y * max(0, margin - D)^2 / 2`,
    /// kept for ablations.
    MarginHinge,
}

/// Pair-loss constants. `alpha`, `beta` and `gamma` are always derived
/// from `c_p` and `c_n`, never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub c_p: f64,
    pub c_n: f64,
    /// Only read by [`LossVariant::MarginHinge`]; the exponential loss has no margin.
    pub margin: f64,
    pub variant: LossVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            c_p: 0.2,
            c_n: 10.0,
            margin: 2.0,
            variant: LossVariant::Exponential,
        }
    }
}

impl LossConfig {
    pub fn alpha(&self) -> f64 {
        1.0 / self.c_p
    }

    pub fn beta(&self) -> f64 {
        self.c_n
    }

    pub fn gamma(&self) -> f64 {
        -EXP_RATE / self.c_n
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_p > 0.0 && self.c_p.is_finite()) || !(self.c_n > 0.0 && self.c_n.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "c_p ({}) and c_n ({}) must be positive",
                self.c_p, self.c_n
            )));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidConfig(format!("margin {}", self.margin)));
        }
        Ok(())
    }
}

/// Loss of one pair at embedding distance `d`.
pub fn contrastive_loss(d: f64, y: PairLabel, cfg: &LossConfig) -> Result<f64> {
    if d < 0.0 || d.is_nan() {
        return Err(Error::NegativeDistance(d));
    }
    Ok(match (cfg.variant, y) {
        (LossVariant::Exponential, PairLabel::Similar) => cfg.alpha() * d * d,
        (LossVariant::Exponential, PairLabel::Dissimilar) => cfg.beta() * (cfg.gamma() * d).exp(),
        (LossVariant::MarginHinge, PairLabel::Similar) => 0.5 * d * d,
        (LossVariant::MarginHinge, PairLabel::Dissimilar) => {
            let gap = (cfg.margin - d).max(0.0);
            0.5 * gap * gap
        }
    })
}

/// Analytic `dL/dD`.
pub fn contrastive_loss_derivative(d: f64, y: PairLabel, cfg: &LossConfig) -> Result<f64> {
    if d < 0.0 || d.is_nan() {
        return Err(Error::NegativeDistance(d));
    }
    Ok(match (cfg.variant, y) {
        (LossVariant::Exponential, PairLabel::Similar) => 2.0 * cfg.alpha() * d,
        (LossVariant::Exponential, PairLabel::Dissimilar) => {
            cfg.beta() * cfg.gamma() * (cfg.gamma() * d).exp()
        }
        (LossVariant::MarginHinge, PairLabel::Similar) => d,
        (LossVariant::MarginHinge, PairLabel::Dissimilar) => -(cfg.margin - d).max(0.0),
    })
}

/// Eps under the square root so the dissimilar branch stays differentiable at D = 0.
const SQRT_EPS: f64 = 1e-12;

/// Per-pair losses from squared distances and float labels (0 similar,
/// 1 dissimilar). Differentiable; used by the trainer.
pub fn contrastive_loss_tensor(sq_dist: &Tensor, y: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let dist = (sq_dist + SQRT_EPS)?.sqrt()?;
    let similar = y.affine(-1.0, 1.0)?;
    let (pos, neg) = match cfg.variant {
        LossVariant::Exponential => (
            (sq_dist * cfg.alpha())?,
            ((&dist * cfg.gamma())?.exp()? * cfg.beta())?,
        ),
        LossVariant::MarginHinge => (
            (sq_dist * 0.5)?,
            (dist.affine(-1.0, cfg.margin)?.relu()?.sqr()? * 0.5)?,
        ),
    };
    Ok(((similar * pos)? + (y * neg)?)?)
}
