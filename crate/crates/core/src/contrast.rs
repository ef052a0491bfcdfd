//! Logit-combination rules: plain contrastive decoding, its multi-model
//! generalisation, the bundled method variants, coefficient schedules, and
//! the plausibility mask.
//!
//! Every combiner takes log-probabilities (outputs of
//! [`crate::numerics::log_softmax`]) and returns an unnormalized score
//! vector; the caller renormalizes before decoding. Masked `-inf` entries in
//! the original model's log-probabilities stay masked in the output.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::LogitVector;

#[derive(Debug, Error)]
pub enum ContrastError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty component list; use the baseline path instead")]
    EmptyComponents,
    #[error("invalid coefficient: {0}")]
    InvalidCoefficient(String),
}

/// Which degraded forward pass a contrast component consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HalModelTag {
    /// Sparsified visual tokens, all text retained.
    VisHal,
    /// No visual tokens, only the least-important text retained.
    VisTxtHal,
    /// No visual tokens, all text retained.
    NoVis,
}

/// Coefficient schedule for one contrast component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant { alpha: f64 },
    /// `(1 - exp(-gamma * tau)) / exp(-gamma * tau) = exp(gamma * tau) - 1`
    /// with `tau = max(0, t - time_offset)`. Exactly zero at the offset and
    /// non-decreasing afterwards.
    M3idExponential { gamma: f64, time_offset: u64 },
}

impl Schedule {
    pub fn constant(alpha: f64) -> Self {
        Schedule::Constant { alpha }
    }

    pub fn m3id_exponential(gamma: f64, time_offset: u64) -> Self {
        Schedule::M3idExponential { gamma, time_offset }
    }
}

/// Coefficient value of `schedule` at generation step `t`.
pub fn schedule_value(schedule: &Schedule, t: u64) -> f64 {
    match schedule {
        Schedule::Constant { alpha } => *alpha,
        Schedule::M3idExponential { gamma, time_offset } => {
            let tau = t.saturating_sub(*time_offset) as f64;
            (gamma * tau).exp_m1()
        }
    }
}

/// Declares which degraded passes a contrastive method runs and how their
/// coefficients evolve, plus the plausibility threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastSpec {
    pub components: Vec<(HalModelTag, Schedule)>,
    pub plausibility_beta: f64,
}

impl ContrastSpec {
    pub fn new(
        components: Vec<(HalModelTag, Schedule)>,
        plausibility_beta: f64,
    ) -> Result<Self, ContrastError> {
        if components.is_empty() {
            return Err(ContrastError::EmptyComponents);
        }
        if !(0.0..=1.0).contains(&plausibility_beta) {
            return Err(ContrastError::InvalidCoefficient(format!(
                "plausibility_beta must be in [0, 1], got {plausibility_beta}"
            )));
        }
        Ok(Self {
            components,
            plausibility_beta,
        })
    }
}

fn check_len(orig: &LogitVector, other: &LogitVector) -> Result<(), ContrastError> {
    if orig.len() != other.len() {
        return Err(ContrastError::LengthMismatch {
            left: orig.len(),
            right: other.len(),
        });
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<(), ContrastError> {
    if !(alpha >= 0.0) {
        return Err(ContrastError::InvalidCoefficient(format!(
            "contrast coefficient must be non-negative, got {alpha}"
        )));
    }
    Ok(())
}

/// Plain contrastive decoding: `(1 + alpha) * lp_orig - alpha * lp_hal`.
pub fn contrastive_combine(
    log_p_orig: &LogitVector,
    log_p_hal: &LogitVector,
    alpha: f64,
) -> Result<LogitVector, ContrastError> {
    check_len(log_p_orig, log_p_hal)?;
    check_alpha(alpha)?;
    let coeff = 1.0 + alpha;
    let out = log_p_orig
        .values()
        .iter()
        .zip(log_p_hal.values())
        .map(|(&o, &h)| {
            if o == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                let mut v = coeff * o;
                if alpha != 0.0 {
                    v -= alpha * h;
                }
                v
            }
        })
        .collect();
    Ok(LogitVector::new(out).expect("combined scores contain NaN"))
}

/// Contrastive decoding against several degraded models at once:
/// `(1 + sum(alpha_r)) * lp_orig - sum(alpha_r * lp_hal_r)`.
pub fn generalized_combine(
    log_p_orig: &LogitVector,
    components: &[(&LogitVector, f64)],
) -> Result<LogitVector, ContrastError> {
    if components.is_empty() {
        return Err(ContrastError::EmptyComponents);
    }
    for (hal, alpha) in components {
        check_len(log_p_orig, hal)?;
        check_alpha(*alpha)?;
    }
    let total: f64 = components.iter().map(|(_, a)| *a).sum();
    let coeff = 1.0 + total;
    let out = (0..log_p_orig.len())
        .map(|i| {
            let o = log_p_orig.values()[i];
            if o == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            let mut v = coeff * o;
            for (hal, alpha) in components {
                if *alpha != 0.0 {
                    v -= alpha * hal.values()[i];
                }
            }
            v
        })
        .collect();
    Ok(LogitVector::new(out).expect("combined scores contain NaN"))
}

/// The two-model combination: a constant coefficient on the sparse-visual
/// pass and a time-increasing one on the pruned-text pass.
///
/// `(1 + alpha1 + alpha2_t) * lp_orig - alpha1 * lp_vis_hal
///  - alpha2_t * lp_vis_txt_hal`, with `alpha2_t` from the exponential
/// schedule. Bitwise identical to [`generalized_combine`] with the matching
/// component list.
#[allow(clippy::too_many_arguments)]
pub fn crops_combine(
    log_p_orig: &LogitVector,
    log_p_vis_hal: &LogitVector,
    log_p_vis_txt_hal: &LogitVector,
    alpha1: f64,
    t: u64,
    gamma: f64,
    time_offset: u64,
) -> Result<LogitVector, ContrastError> {
    check_len(log_p_orig, log_p_vis_hal)?;
    check_len(log_p_orig, log_p_vis_txt_hal)?;
    check_alpha(alpha1)?;
    let alpha2 = schedule_value(&Schedule::m3id_exponential(gamma, time_offset), t);
    let coeff = 1.0 + (alpha1 + alpha2);
    let out = (0..log_p_orig.len())
        .map(|i| {
            let o = log_p_orig.values()[i];
            if o == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            let mut v = coeff * o;
            if alpha1 != 0.0 {
                v -= alpha1 * log_p_vis_hal.values()[i];
            }
            if alpha2 != 0.0 {
                v -= alpha2 * log_p_vis_txt_hal.values()[i];
            }
            v
        })
        .collect();
    Ok(LogitVector::new(out).expect("combined scores contain NaN"))
}

/// Mutual-information-style combination against the no-visual pass:
/// `lp_orig + alpha_t * (lp_orig - lp_no_vis)`.
///
/// Written in this additive form so the output degrades gracefully to
/// `lp_orig` as the two models converge, regardless of how large `alpha_t`
/// has grown.
pub fn m3id_combine(
    log_p_orig: &LogitVector,
    log_p_no_vis: &LogitVector,
    t: u64,
    gamma: f64,
    time_offset: u64,
) -> Result<LogitVector, ContrastError> {
    check_len(log_p_orig, log_p_no_vis)?;
    let alpha = schedule_value(&Schedule::m3id_exponential(gamma, time_offset), t);
    let out = log_p_orig
        .values()
        .iter()
        .zip(log_p_no_vis.values())
        .map(|(&o, &nv)| {
            if o == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                let mut v = o;
                if alpha != 0.0 {
                    v += alpha * (o - nv);
                }
                v
            }
        })
        .collect();
    Ok(LogitVector::new(out).expect("combined scores contain NaN"))
}

/// Masks score entries whose original-model probability falls below
/// `beta_p * max(p_orig)`. The original argmax always survives.
pub fn plausibility_mask(
    scores: &LogitVector,
    p_orig: &crate::numerics::ProbDistribution,
    beta_p: f64,
) -> Result<LogitVector, ContrastError> {
    if !(0.0..=1.0).contains(&beta_p) {
        return Err(ContrastError::InvalidCoefficient(format!(
            "beta_p must be in [0, 1], got {beta_p}"
        )));
    }
    if scores.len() != p_orig.len() {
        return Err(ContrastError::LengthMismatch {
            left: scores.len(),
            right: p_orig.len(),
        });
    }
    let max = p_orig.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = beta_p * max;
    let out = scores
        .values()
        .iter()
        .zip(p_orig.values())
        .map(|(&s, &p)| if p < threshold { f64::NEG_INFINITY } else { s })
        .collect();
    Ok(LogitVector::new(out).expect("mask produced NaN"))
}
