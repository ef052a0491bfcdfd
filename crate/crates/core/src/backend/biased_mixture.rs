//! Analytic test backend with a decaying visual term and a last-token bias.
//!
//! The next-token score is `w_v(t) * G(y) + B(y | last_token)` where
//! `w_v(t) = w0 * exp(-kappa * t)` decays with the number of generated
//! tokens in the input, `G(y)` pays `g_hi` for object-range tokens that are
//! present in the visual segment, and `B` is a bias-matrix row keyed by the
//! most recent token. With `kappa > 0` the influence of visual evidence
//! shrinks as generation proceeds while the bias term keeps its strength,
//! which is exactly the failure mode the contrastive methods target.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::LogitVector;

use super::{
    check_token_ids, Backend, BackendDescriptor, BackendError, BackendKind, ForwardOutput,
    Segment, TokenId, TokenSequence,
};

/// Per-head exponent perturbation for the synthetic attention rows.
pub const HEAD_DELTA: f64 = 0.1;

/// Dense vocab-by-vocab bias table, row = most recent token, column = next.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMatrix {
    vocab_size: usize,
    dense: Vec<f64>,
}

impl BiasMatrix {
    pub fn zeros(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            dense: vec![0.0; vocab_size * vocab_size],
        }
    }

    /// Builds from sparse `{from: {to: weight}}` entries.
    pub fn from_sparse(
        vocab_size: usize,
        entries: &BTreeMap<u32, BTreeMap<u32, f64>>,
    ) -> Result<Self, BackendError> {
        let mut m = Self::zeros(vocab_size);
        for (&from, row) in entries {
            for (&to, &w) in row {
                m.set(TokenId(from), TokenId(to), w)?;
            }
        }
        Ok(m)
    }

    pub fn set(&mut self, from: TokenId, to: TokenId, weight: f64) -> Result<(), BackendError> {
        let (f, t) = (from.0 as usize, to.0 as usize);
        if f >= self.vocab_size || t >= self.vocab_size {
            return Err(BackendError::InvalidConfig(format!(
                "bias entry ({}, {}) outside vocab of size {}",
                from.0, to.0, self.vocab_size
            )));
        }
        if !weight.is_finite() {
            return Err(BackendError::InvalidConfig(format!(
                "bias weight ({}, {}) is {weight}",
                from.0, to.0
            )));
        }
        self.dense[f * self.vocab_size + t] = weight;
        Ok(())
    }

    pub fn get(&self, from: TokenId, to: TokenId) -> f64 {
        self.dense[from.0 as usize * self.vocab_size + to.0 as usize]
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasedMixtureParams {
    pub vocab_size: usize,
    pub head_count: usize,
    pub attention_layer: usize,
    /// Half-open `[lo, hi)` range of object token ids.
    pub object_range: (u32, u32),
    /// Score paid to an object-range token present in the visual segment.
    pub g_hi: f64,
    /// Initial weight of the visual term.
    pub w0: f64,
    /// Decay rate of the visual term per generated token.
    pub kappa: f64,
    pub bias: BiasMatrix,
    /// Carried for reproducibility bookkeeping; the score formula itself is
    /// deterministic and does not consume it.
    pub seed: u64,
}

impl BiasedMixtureParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.bias.vocab_size() != self.vocab_size {
            return Err(BackendError::InvalidConfig(format!(
                "bias matrix is {}x{0} but vocab_size is {}",
                self.bias.vocab_size(),
                self.vocab_size
            )));
        }
        if self.object_range.0 > self.object_range.1
            || self.object_range.1 as usize > self.vocab_size
        {
            return Err(BackendError::InvalidConfig(format!(
                "object_range [{}, {}) outside vocab of size {}",
                self.object_range.0, self.object_range.1, self.vocab_size
            )));
        }
        for v in [self.g_hi, self.w0, self.kappa] {
            if !v.is_finite() {
                return Err(BackendError::InvalidConfig(format!(
                    "non-finite parameter {v}"
                )));
            }
        }
        Ok(())
    }
}

pub struct BiasedMixtureBackend {
    params: BiasedMixtureParams,
    descriptor: BackendDescriptor,
}

impl BiasedMixtureBackend {
    pub fn new(params: BiasedMixtureParams) -> Result<Self, BackendError> {
        params.validate()?;
        let descriptor = BackendDescriptor::new(
            params.vocab_size,
            params.head_count,
            params.attention_layer,
            BackendKind::BiasedMixture,
        )?;
        Ok(Self { params, descriptor })
    }

    pub fn params(&self) -> &BiasedMixtureParams {
        &self.params
    }

    /// Weight of the visual term after `generated` output tokens.
    pub fn visual_weight(&self, generated: usize) -> f64 {
        self.params.w0 * (-self.params.kappa * generated as f64).exp()
    }

    fn in_object_range(&self, id: TokenId) -> bool {
        id.0 >= self.params.object_range.0 && id.0 < self.params.object_range.1
    }

    /// Next-token scores for `seq` under the mixture formula.
    pub fn logits(&self, seq: &TokenSequence) -> Result<LogitVector, BackendError> {
        check_token_ids(seq, self.params.vocab_size)?;
        let w = self.visual_weight(seq.segment_count(Segment::Generated));
        let (last, _) = seq.last();
        let values = (0..self.params.vocab_size as u32)
            .map(|y| {
                let y = TokenId(y);
                let g = if self.in_object_range(y) && seq.contains_visual(y) {
                    self.params.g_hi
                } else {
                    0.0
                };
                w * g + self.params.bias.get(last, y)
            })
            .collect();
        LogitVector::new(values)
            .map_err(|e| BackendError::InvalidConfig(format!("score formula produced {e}")))
    }

    /// Synthetic per-head attention row for the current query.
    ///
    /// Base raw weights: each visual key gets `w_v(t) / max(1, |visual|)`,
    /// each text key gets the recency weight `1 + position / K`. Head `h`
    /// raises the base to the power `1 + h * HEAD_DELTA` before row
    /// normalization, so later heads sharpen the same ordering.
    pub fn attention(&self, seq: &TokenSequence) -> Result<Vec<Vec<f64>>, BackendError> {
        check_token_ids(seq, self.params.vocab_size)?;
        let k = seq.len();
        let visual_count = seq.segment_count(Segment::Visual);
        let w = self.visual_weight(seq.segment_count(Segment::Generated));
        let base: Vec<f64> = seq
            .tokens()
            .iter()
            .enumerate()
            .map(|(pos, (_, segment))| match segment {
                Segment::Visual => w / visual_count.max(1) as f64,
                Segment::Prompt | Segment::Generated => 1.0 + pos as f64 / k as f64,
            })
            .collect();

        let rows = (0..self.params.head_count)
            .map(|h| {
                let exponent = 1.0 + h as f64 * HEAD_DELTA;
                let raw: Vec<f64> = base.iter().map(|&b| b.powf(exponent)).collect();
                let sum: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / sum).collect()
            })
            .collect();
        Ok(rows)
    }
}

impl Backend for BiasedMixtureBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn forward(&self, seq: &TokenSequence) -> Result<ForwardOutput, BackendError> {
        let out = ForwardOutput {
            logits: self.logits(seq)?,
            attention: self.attention(seq)?,
        };
        out.validate(self.params.vocab_size, seq.len())?;
        Ok(out)
    }
}
