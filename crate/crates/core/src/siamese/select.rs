use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::Checkpoint;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionRule {
    /// Lowest validation loss, earliest epoch on ties.
    #[default]
    MinValLoss,
    /// Point of the validation curve farthest from the straight line
    /// joining its first and last points, after scaling both axes to [0, 1].
    Elbow,
}

impl FromStr for SelectionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min-val-loss" => Ok(SelectionRule::MinValLoss),
            "elbow" => Ok(SelectionRule::Elbow),
            other => Err(Error::InvalidConfig(format!(
                "unknown selection rule {other:?} (expected min-val-loss or elbow)"
            ))),
        }
    }
}

impl fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionRule::MinValLoss => "min-val-loss",
            SelectionRule::Elbow => "elbow",
        })
    }
}

/// Index chosen by `rule` over a validation-loss curve, `None` when empty.
pub fn select_epoch(val_losses: &[f64], rule: SelectionRule) -> Option<usize> {
    let first_min = |xs: &[f64]| {
        let mut best = 0;
        for (i, v) in xs.iter().enumerate() {
            if *v < xs[best] {
                best = i;
            }
        }
        best
    };
    if val_losses.is_empty() {
        return None;
    }
    match rule {
        SelectionRule::MinValLoss => Some(first_min(val_losses)),
        SelectionRule::Elbow => {
            let n = val_losses.len();
            let lo = val_losses.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = val_losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if n < 3 || hi - lo <= 0.0 {
                return Some(first_min(val_losses));
            }
            let pt = |i: usize| ((i as f64) / (n - 1) as f64, (val_losses[i] - lo) / (hi - lo));
            let (x0, y0) = pt(0);
            let (x1, y1) = pt(n - 1);
            let (dx, dy) = (x1 - x0, y1 - y0);
            let norm = (dx * dx + dy * dy).sqrt();
            let mut best = 0;
            let mut best_d = f64::NEG_INFINITY;
            for i in 0..n {
                let (x, y) = pt(i);
                let d = (dy * (x - x0) - dx * (y - y0)).abs() / norm;
                if d > best_d {
                    best_d = d;
                    best = i;
                }
            }
            Some(best)
        }
    }
}

pub fn select_checkpoint(history: &[Checkpoint], rule: SelectionRule) -> Result<&Checkpoint> {
    let losses: Vec<f64> = history.iter().map(|c| c.meta.val_loss).collect();
    select_epoch(&losses, rule)
        .map(|i| &history[i])
        .ok_or(Error::Empty("checkpoint history"))
}
