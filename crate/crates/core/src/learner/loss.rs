//! Three-part hinge objective with ±0.5 margins.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MARGIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::unsupervised()
    }
}

impl LossConfig {
    pub fn unsupervised() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.0,
            margin: MARGIN,
        }
    }

    pub fn semi_supervised() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 15.0,
            margin: MARGIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::validation("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Unweighted per-set means and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub term_n: f64,
    pub term_p: f64,
    pub term_a: f64,
}

fn mean_hinge(values: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|&v| f(v).max(0.0)).sum::<f64>() / values.len() as f64
}

fn check(psi_n: &[f64], psi_a: Option<&[f64]>, cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    if psi_n.is_empty() {
        return Err(Error::validation(
            "hinge loss needs at least one normal score",
        ));
    }
    if (cfg.lambda2 > 0.0) != psi_a.is_some() {
        return Err(Error::validation(
            "anomalous scores must be given exactly when lambda2 > 0",
        ));
    }
    Ok(())
}

/// Normal scores are pushed above `+margin`, pseudo-negative and anomalous
/// scores below `-margin`; each set is mean-reduced before weighting.
pub fn hinge_loss(
    psi_n: &[f64],
    psi_p: &[f64],
    psi_a: Option<&[f64]>,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    check(psi_n, psi_a, cfg)?;
    let m = cfg.margin;
    let term_n = mean_hinge(psi_n, |v| m - v);
    let term_p = mean_hinge(psi_p, |v| m + v);
    let term_a = psi_a.map_or(0.0, |a| mean_hinge(a, |v| m + v));
    Ok(LossTerms {
        total: term_n + cfg.lambda1 * term_p + cfg.lambda2 * term_a,
        term_n,
        term_p,
        term_a,
    })
}

/// dLoss/dScore for each set. Kinks take the zero subgradient.
pub fn hinge_loss_grad(
    psi_n: &[f64],
    psi_p: &[f64],
    psi_a: Option<&[f64]>,
    cfg: &LossConfig,
) -> Result<(Array1<f64>, Array1<f64>, Array1<f64>)> {
    check(psi_n, psi_a, cfg)?;
    let m = cfg.margin;
    let grad = |vals: &[f64], weight: f64, sign: f64| -> Array1<f64> {
        let n = vals.len().max(1) as f64;
        vals.iter()
            .map(|&v| {
                if m + sign * v > 0.0 {
                    sign * weight / n
                } else {
                    0.0
                }
            })
            .collect()
    };
    Ok((
        grad(psi_n, 1.0, -1.0),
        grad(psi_p, cfg.lambda1, 1.0),
        psi_a.map_or_else(|| Array1::zeros(0), |a| grad(a, cfg.lambda2, 1.0)),
    ))
}
