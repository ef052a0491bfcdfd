//! The model abstraction behind the generation loop: given a token sequence,
//! a backend returns next-token logits and the per-head attention row at its
//! pruning layer for the current query.
//!
//! Three backends are bundled: an analytic biased-mixture model for desk-scale
//! experiments, a fixture/replay backend, and a remote HTTP client.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::LogitVector;

pub mod biased_mixture;
pub mod fixture;
pub mod remote;

pub use biased_mixture::{BiasMatrix, BiasedMixtureBackend, BiasedMixtureParams};
pub use fixture::{fixture_key, FixtureBackend, FixtureRecord};
pub use remote::{RemoteBackend, WireRequest, WireResponse};

/// Beginning-of-sequence token, reserved in all bundled backends.
pub const BOS_TOKEN: TokenId = TokenId(0);
/// End-of-sequence token, reserved in all bundled backends.
pub const EOS_TOKEN: TokenId = TokenId(1);

/// Tolerance for attention-row normalization checks.
pub const ATTENTION_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),
    #[error("token id {id} out of range for vocab size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("shape mismatch: {what} expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid attention: {0}")]
    InvalidAttention(String),
    #[error("no fixture recorded for key {0}")]
    MissingFixture(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("server returned status {code}: {message}")]
    Status { code: u16, message: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Vocabulary index. Ids 0 and 1 are BOS and EOS in the bundled backends.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TokenId(pub u32);

/// Which part of the model input a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Visual,
    Prompt,
    Generated,
}

/// One token of the wire and fixture serializations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub id: u32,
    pub segment: Segment,
}

/// Ordered token list with segment tags.
///
/// Segments must appear in the order visual, prompt, generated, and the
/// prompt segment must be non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<(TokenId, Segment)>,
}

impl TokenSequence {
    pub fn from_parts(
        visual: &[TokenId],
        prompt: &[TokenId],
        generated: &[TokenId],
    ) -> Result<Self, BackendError> {
        let mut tokens = Vec::with_capacity(visual.len() + prompt.len() + generated.len());
        tokens.extend(visual.iter().map(|&t| (t, Segment::Visual)));
        tokens.extend(prompt.iter().map(|&t| (t, Segment::Prompt)));
        tokens.extend(generated.iter().map(|&t| (t, Segment::Generated)));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<(TokenId, Segment)>) -> Result<Self, BackendError> {
        let mut max_seen = 0u8;
        let mut prompt_len = 0usize;
        for (_, segment) in &tokens {
            let rank = match segment {
                Segment::Visual => 0,
                Segment::Prompt => 1,
                Segment::Generated => 2,
            };
            if rank < max_seen {
                return Err(BackendError::InvalidSequence(
                    "segments must appear in the order visual, prompt, generated".into(),
                ));
            }
            max_seen = rank;
            if *segment == Segment::Prompt {
                prompt_len += 1;
            }
        }
        if prompt_len == 0 {
            return Err(BackendError::InvalidSequence(
                "prompt segment must contain at least one token".into(),
            ));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[(TokenId, Segment)] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn last(&self) -> (TokenId, Segment) {
        *self.tokens.last().expect("sequence has a prompt token")
    }

    /// Sequence positions of every token in `segment`, in order.
    pub fn segment_positions(&self, segment: Segment) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, (_, s))| *s == segment)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn segment_count(&self, segment: Segment) -> usize {
        self.tokens.iter().filter(|(_, s)| *s == segment).count()
    }

    pub fn contains_visual(&self, id: TokenId) -> bool {
        self.tokens
            .iter()
            .any(|&(t, s)| s == Segment::Visual && t == id)
    }

    /// Position of the first prompt token (the BOS slot for text pruning).
    pub fn first_prompt_position(&self) -> usize {
        self.tokens
            .iter()
            .position(|(_, s)| *s == Segment::Prompt)
            .expect("sequence has a prompt token")
    }

    pub fn to_records(&self) -> Vec<TokenRecord> {
        self.tokens
            .iter()
            .map(|&(TokenId(id), segment)| TokenRecord { id, segment })
            .collect()
    }

    pub fn from_records(records: &[TokenRecord]) -> Result<Self, BackendError> {
        Self::from_tokens(
            records
                .iter()
                .map(|r| (TokenId(r.id), r.segment))
                .collect(),
        )
    }
}

/// Next-token logits plus the per-head attention row at the pruning layer
/// for the current query: `head_count` rows over `seq_len` keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: LogitVector,
    pub attention: Vec<Vec<f64>>,
}

impl ForwardOutput {
    /// Checks logits length, attention geometry, and row normalization.
    pub fn validate(&self, vocab_size: usize, seq_len: usize) -> Result<(), BackendError> {
        if self.logits.len() != vocab_size {
            return Err(BackendError::ShapeMismatch {
                what: "logits length",
                expected: vocab_size,
                got: self.logits.len(),
            });
        }
        if self.attention.is_empty() {
            return Err(BackendError::InvalidAttention("no attention rows".into()));
        }
        for (h, row) in self.attention.iter().enumerate() {
            if row.len() != seq_len {
                return Err(BackendError::ShapeMismatch {
                    what: "attention row length",
                    expected: seq_len,
                    got: row.len(),
                });
            }
            let mut sum = 0.0;
            for &w in row {
                if !w.is_finite() || w < 0.0 {
                    return Err(BackendError::InvalidAttention(format!(
                        "head {h} has weight {w}"
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > ATTENTION_SUM_TOLERANCE {
                return Err(BackendError::InvalidAttention(format!(
                    "head {h} row sums to {sum}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    BiasedMixture,
    Fixture,
    Remote,
}

/// Model geometry a backend declares so the engine never guesses it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub vocab_size: usize,
    pub head_count: usize,
    pub attention_layer: usize,
    pub kind: BackendKind,
    /// True when forward calls must not run concurrently; the engine then
    /// serializes the per-step passes.
    pub serialized_access: bool,
}

impl BackendDescriptor {
    pub fn new(
        vocab_size: usize,
        head_count: usize,
        attention_layer: usize,
        kind: BackendKind,
    ) -> Result<Self, BackendError> {
        if vocab_size < 3 {
            return Err(BackendError::InvalidConfig(format!(
                "vocab_size must be at least 3, got {vocab_size}"
            )));
        }
        if head_count == 0 {
            return Err(BackendError::InvalidConfig("head_count must be positive".into()));
        }
        Ok(Self {
            vocab_size,
            head_count,
            attention_layer,
            kind,
            serialized_access: false,
        })
    }
}

/// A source of next-token logits and attention rows.
///
/// `forward` must be safe for concurrent invocation unless the descriptor
/// declares serialized access.
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn forward(&self, seq: &TokenSequence) -> Result<ForwardOutput, BackendError>;
}

pub(crate) fn check_token_ids(
    seq: &TokenSequence,
    vocab_size: usize,
) -> Result<(), BackendError> {
    if seq.is_empty() {
        return Err(BackendError::InvalidSequence("empty sequence".into()));
    }
    for &(TokenId(id), _) in seq.tokens() {
        if id as usize >= vocab_size {
            return Err(BackendError::TokenOutOfRange { id, vocab_size });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_requires_prompt() {
        assert!(TokenSequence::from_parts(&[TokenId(2)], &[], &[]).is_err());
        assert!(TokenSequence::from_parts(&[], &[BOS_TOKEN], &[]).is_ok());
    }

    #[test]
    fn sequence_rejects_out_of_order_segments() {
        let tokens = vec![
            (TokenId(0), Segment::Prompt),
            (TokenId(2), Segment::Visual),
        ];
        assert!(TokenSequence::from_tokens(tokens).is_err());
    }

    #[test]
    fn sequence_positions_and_counts() {
        let seq = TokenSequence::from_parts(
            &[TokenId(5), TokenId(6)],
            &[TokenId(0), TokenId(3)],
            &[TokenId(4)],
        )
        .unwrap();
        assert_eq!(seq.segment_positions(Segment::Visual), vec![0, 1]);
        assert_eq!(seq.segment_positions(Segment::Prompt), vec![2, 3]);
        assert_eq!(seq.segment_positions(Segment::Generated), vec![4]);
        assert_eq!(seq.segment_count(Segment::Generated), 1);
        assert_eq!(seq.first_prompt_position(), 2);
        assert_eq!(seq.last(), (TokenId(4), Segment::Generated));
        assert!(seq.contains_visual(TokenId(6)));
        assert!(!seq.contains_visual(TokenId(3)));
    }

    #[test]
    fn forward_output_validation() {
        let out = ForwardOutput {
            logits: LogitVector::new(vec![0.0; 4]).unwrap(),
            attention: vec![vec![0.5, 0.5]],
        };
        assert!(out.validate(4, 2).is_ok());
        assert!(matches!(
            out.validate(5, 2),
            Err(BackendError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            out.validate(4, 3),
            Err(BackendError::ShapeMismatch { .. })
        ));

        let bad = ForwardOutput {
            logits: LogitVector::new(vec![0.0; 4]).unwrap(),
            attention: vec![vec![0.9, 0.3]],
        };
        assert!(matches!(
            bad.validate(4, 2),
            Err(BackendError::InvalidAttention(_))
        ));
    }

    #[test]
    fn descriptor_validation() {
        assert!(BackendDescriptor::new(2, 1, 2, BackendKind::Fixture).is_err());
        assert!(BackendDescriptor::new(3, 0, 2, BackendKind::Fixture).is_err());
        let d = BackendDescriptor::new(8, 2, 2, BackendKind::BiasedMixture).unwrap();
        assert!(!d.serialized_access);
    }
}
