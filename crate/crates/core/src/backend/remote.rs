//! HTTP client backend: the attachment point for real models served behind
//! the forward-pass wire protocol.
//!
//! Protocol (JSON bodies, UTF-8):
//!
//! ```text
//! POST {endpoint}/v1/forward
//! request:  {"tokens": [{"id": 2, "segment": "visual"}, ...], "attention_layer": 2}
//! 200:      {"logits": [f64 x vocab_size], "attention": [[f64 x K] x H]}
//! 4xx/5xx:  {"error": "message"}
//! ```

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::numerics::LogitVector;

use super::{
    Backend, BackendDescriptor, BackendError, BackendKind, ForwardOutput, TokenRecord,
    TokenSequence,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub tokens: Vec<TokenRecord>,
    pub attention_layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub logits: Vec<f64>,
    pub attention: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
struct WireErrorBody {
    error: String,
}

/// Encodes a forward output into its wire form.
pub fn encode_output(output: &ForwardOutput) -> WireResponse {
    WireResponse {
        logits: output.logits.values().to_vec(),
        attention: output.attention.clone(),
    }
}

/// Decodes and validates a wire response against the declared geometry.
pub fn decode_output(
    response: WireResponse,
    vocab_size: usize,
    seq_len: usize,
) -> Result<ForwardOutput, BackendError> {
    let logits = LogitVector::new(response.logits)
        .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    let output = ForwardOutput {
        logits,
        attention: response.attention,
    };
    output.validate(vocab_size, seq_len)?;
    Ok(output)
}

pub struct RemoteBackend {
    endpoint: String,
    client: reqwest::blocking::Client,
    descriptor: BackendDescriptor,
}

impl RemoteBackend {
    pub fn new(
        endpoint: impl Into<String>,
        vocab_size: usize,
        head_count: usize,
        attention_layer: usize,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::InvalidConfig(format!("http client: {e}")))?;
        Ok(Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            client,
            descriptor: BackendDescriptor::new(
                vocab_size,
                head_count,
                attention_layer,
                BackendKind::Remote,
            )?,
        })
    }

    fn classify(e: reqwest::Error) -> BackendError {
        if e.is_timeout() {
            BackendError::Timeout(e.to_string())
        } else if e.is_decode() {
            BackendError::MalformedResponse(e.to_string())
        } else {
            BackendError::Transport(e.to_string())
        }
    }
}

impl Backend for RemoteBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn forward(&self, seq: &TokenSequence) -> Result<ForwardOutput, BackendError> {
        super::check_token_ids(seq, self.descriptor.vocab_size)?;
        let request = WireRequest {
            tokens: seq.to_records(),
            attention_layer: self.descriptor.attention_layer,
        };
        let url = format!("{}/v1/forward", self.endpoint);
        let response = self
            .client
            .post(&url)
            .json(&request)
            .send()
            .map_err(Self::classify)?;

        let status = response.status();
        let body = response.text().map_err(Self::classify)?;
        if !status.is_success() {
            let message = serde_json::from_str::<WireErrorBody>(&body)
                .map(|b| b.error)
                .unwrap_or(body);
            return Err(BackendError::Status {
                code: status.as_u16(),
                message,
            });
        }
        let wire: WireResponse = serde_json::from_str(&body)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        decode_output(wire, self.descriptor.vocab_size, seq.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::TokenId;

    #[test]
    fn wire_round_trip_is_identity() {
        let output = ForwardOutput {
            logits: LogitVector::new(vec![0.1, -2.5, 3.25, f64::NEG_INFINITY]).unwrap(),
            attention: vec![vec![0.125, 0.875], vec![0.5, 0.5]],
        };
        let encoded = serde_json::to_string(&encode_output(&output)).unwrap();
        let decoded: WireResponse = serde_json::from_str(&encoded).unwrap();
        let back = decode_output(decoded, 4, 2).unwrap();
        assert_eq!(back, output);
    }

    #[test]
    fn decode_rejects_wrong_logit_length() {
        let wire = WireResponse {
            logits: vec![0.0; 3],
            attention: vec![vec![1.0]],
        };
        assert!(matches!(
            decode_output(wire, 4, 1),
            Err(BackendError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn decode_rejects_unnormalized_attention() {
        let wire = WireResponse {
            logits: vec![0.0; 4],
            attention: vec![vec![0.9, 0.3]],
        };
        assert!(matches!(
            decode_output(wire, 4, 2),
            Err(BackendError::InvalidAttention(_))
        ));
    }

    #[test]
    fn request_serialization_shape() {
        let seq = TokenSequence::from_parts(&[TokenId(2)], &[TokenId(0)], &[TokenId(4)]).unwrap();
        let request = WireRequest {
            tokens: seq.to_records(),
            attention_layer: 2,
        };
        let json = serde_json::to_string(&request).unwrap();
        assert_eq!(
            json,
            "{\"tokens\":[{\"id\":2,\"segment\":\"visual\"},{\"id\":0,\"segment\":\"prompt\"},{\"id\":4,\"segment\":\"generated\"}],\"attention_layer\":2}"
        );
    }
}
