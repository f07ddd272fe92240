//! Per-pixel depth losses and their masked reduction.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    L1,
    L2,
    /// Reversed Huber with threshold `c = 0.2 * max |residual|` over valid pixels.
    BerHu,
}

/// Fraction of the largest valid residual used as the berHu switch point.
pub const BERHU_FRACTION: f64 = 0.2;

impl LossKind {
    /// Per-element loss and its derivative with respect to the prediction,
    /// given residual `r = pred - target` and berHu threshold `c`.
    pub fn eval(self, r: f64, c: f64) -> (f64, f64) {
        match self {
            LossKind::L1 => (r.abs(), sign(r)),
            LossKind::L2 => (r * r, 2.0 * r),
            LossKind::BerHu => {
                if r.abs() <= c || c == 0.0 {
                    (r.abs(), sign(r))
                } else {
                    ((r * r + c * c) / (2.0 * c), r / c)
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
            LossKind::BerHu => "berhu",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            "berhu" => Ok(LossKind::BerHu),
            other => Err(Error::Config(format!(
                "unknown loss '{other}' (expected l1, l2 or berhu)"
            ))),
        }
    }
}

/// Sign with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Result of a masked loss reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLossValue {
    pub value: f64,
    /// d value / d pred, same length as `pred`.
    pub grad: Vec<f64>,
    pub valid: usize,
}

impl MaskedLossValue {
    pub fn no_observation(&self) -> bool {
        self.valid == 0
    }
}

/// `Σ M·ℓ(pred, target)`, divided by `max(1, ΣM)` when `normalize` is set.
/// The berHu threshold is treated as a constant.
pub fn masked_loss(
    kind: LossKind,
    pred: &[f64],
    target: &[f64],
    mask: &[f64],
    normalize: bool,
) -> MaskedLossValue {
    let valid = mask.iter().filter(|&&m| m != 0.0).count();
    let c = match kind {
        LossKind::BerHu => {
            BERHU_FRACTION
                * pred
                    .iter()
                    .zip(target)
                    .zip(mask)
                    .filter(|(_, &m)| m != 0.0)
                    .fold(0.0_f64, |acc, ((p, t), _)| acc.max((p - t).abs()))
        }
        _ => 0.0,
    };
    let scale = if normalize {
        1.0 / (valid.max(1) as f64)
    } else {
        1.0
    };
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        let m = mask[i];
        if m == 0.0 {
            continue;
        }
        let (l, d) = kind.eval(pred[i] - target[i], c);
        value += m * l;
        grad[i] = m * d * scale;
    }
    MaskedLossValue {
        value: value * scale,
        grad,
        valid,
    }
}
