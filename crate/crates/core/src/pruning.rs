//! Attention-based token importance and the pruning rules built on it:
//! least-important selection, retention-count policies, and visual-token
//! sparsification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PruningError {
    #[error("key index {index} out of range for {keys} attention columns")]
    IndexOutOfRange { index: usize, keys: usize },
    #[error("nothing to retain: zero tokens available")]
    NothingToRetain,
}

/// Importance scores for a subset of keys in one attention row.
///
/// `scores[i]` is the mean attention weight across heads for the key at
/// sequence position `key_indices[i]`. Scores are not renormalized over the
/// subset; only their ordering is consumed downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub scores: Vec<f64>,
    pub key_indices: Vec<usize>,
}

impl ImportanceScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Schedule for how many text tokens the degraded pass retains at step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RetentionPolicy {
    /// `beta0` tokens at every step.
    Constant { beta0: f64 },
    /// `max(0, t - 2)` tokens: discards everything except the most recent.
    AllButOne,
    /// `floor(beta0 + beta1 * t)`.
    Linear { beta0: f64, beta1: f64 },
    /// `floor(beta0 + beta1 * (1 - exp(-mu * t)))`: starts at `beta0` and
    /// saturates at `beta0 + beta1`.
    Exponential { beta0: f64, beta1: f64, mu: f64 },
}

/// Mean attention weight across heads for each requested key.
pub fn importance_scores(
    attention: &[Vec<f64>],
    key_indices: &[usize],
) -> Result<ImportanceScores, PruningError> {
    let heads = attention.len() as f64;
    let keys = attention.first().map_or(0, Vec::len);
    let mut scores = Vec::with_capacity(key_indices.len());
    for &k in key_indices {
        if k >= keys {
            return Err(PruningError::IndexOutOfRange { index: k, keys });
        }
        let total: f64 = attention.iter().map(|row| row[k]).sum();
        scores.push(total / heads);
    }
    Ok(ImportanceScores {
        scores,
        key_indices: key_indices.to_vec(),
    })
}

/// Positions of the `keep` lowest-scoring keys, in original sequence order.
///
/// Ties break toward the lower original position. Returns all positions when
/// `keep` meets or exceeds the subset size.
pub fn least_important_keep(scores: &ImportanceScores, keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores.scores[a]
            .partial_cmp(&scores.scores[b])
            .unwrap()
            .then(scores.key_indices[a].cmp(&scores.key_indices[b]))
    });
    let mut kept: Vec<usize> = order
        .into_iter()
        .take(keep.min(scores.len()))
        .map(|i| scores.key_indices[i])
        .collect();
    kept.sort_unstable();
    kept
}

/// Number of text tokens to retain at step `t` under `policy`, clamped to
/// `[1, available]`.
pub fn retention_count(
    policy: &RetentionPolicy,
    t: u64,
    available: usize,
) -> Result<usize, PruningError> {
    if available == 0 {
        return Err(PruningError::NothingToRetain);
    }
    let raw = match policy {
        RetentionPolicy::Constant { beta0 } => beta0.floor(),
        RetentionPolicy::AllButOne => (t as f64 - 2.0).max(0.0),
        RetentionPolicy::Linear { beta0, beta1 } => (beta0 + beta1 * t as f64).floor(),
        RetentionPolicy::Exponential { beta0, beta1, mu } => {
            (beta0 + beta1 * (1.0 - (-mu * t as f64).exp())).floor()
        }
    };
    let raw = raw.max(0.0) as usize;
    Ok(raw.clamp(1, available))
}

/// Keeps the `max(1, floor(fraction * m))` least-important visual tokens.
///
/// `scores` must cover exactly the visual keys. An empty score set returns an
/// empty selection: the degraded pass then sees no visual tokens at all.
pub fn sparsify_visual(scores: &ImportanceScores, fraction: f64) -> Vec<usize> {
    if scores.is_empty() {
        return Vec::new();
    }
    let m = scores.len();
    let keep = ((fraction * m as f64).floor() as usize).max(1);
    least_important_keep(scores, keep)
}
