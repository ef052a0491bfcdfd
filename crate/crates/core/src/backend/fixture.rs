//! Replay backend backed by recorded (sequence, output) pairs.
//!
//! Fixture files are JSONL, one record per line:
//! `{"key": <sha256-hex>, "logits": [...], "attention": [[...]]}` where the
//! key is the SHA-256 of the compact JSON serialization of the token/segment
//! list (the same `tokens` array shape the wire protocol uses).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::LogitVector;

use super::{
    Backend, BackendDescriptor, BackendError, BackendKind, ForwardOutput, TokenSequence,
};

/// Content hash identifying a token sequence in fixture files.
pub fn fixture_key(seq: &TokenSequence) -> String {
    let canonical =
        serde_json::to_string(&seq.to_records()).expect("token records serialize to JSON");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub key: String,
    pub logits: Vec<f64>,
    pub attention: Vec<Vec<f64>>,
}

/// Backend that replays recorded outputs and fails on unknown sequences.
pub struct FixtureBackend {
    records: BTreeMap<String, ForwardOutput>,
    descriptor: BackendDescriptor,
}

impl FixtureBackend {
    pub fn new(
        vocab_size: usize,
        head_count: usize,
        attention_layer: usize,
    ) -> Result<Self, BackendError> {
        Ok(Self {
            records: BTreeMap::new(),
            descriptor: BackendDescriptor::new(
                vocab_size,
                head_count,
                attention_layer,
                BackendKind::Fixture,
            )?,
        })
    }

    /// Loads a fixture file, inferring vocab size and head count from the
    /// first record.
    pub fn from_path(path: &Path, attention_layer: usize) -> Result<Self, BackendError> {
        let file = std::fs::File::open(path)?;
        let mut lines = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: FixtureRecord = serde_json::from_str(&line)
                .map_err(|e| BackendError::MalformedResponse(format!("fixture line: {e}")))?;
            lines.push(record);
        }
        let first = lines
            .first()
            .ok_or_else(|| BackendError::InvalidConfig("empty fixture file".into()))?;
        let mut backend = Self::new(first.logits.len(), first.attention.len(), attention_layer)?;
        for record in lines {
            backend.insert_record(record)?;
        }
        Ok(backend)
    }

    /// Records `output` as the reply for `seq`.
    pub fn insert(
        &mut self,
        seq: &TokenSequence,
        output: ForwardOutput,
    ) -> Result<(), BackendError> {
        output.validate(self.descriptor.vocab_size, seq.len())?;
        self.records.insert(fixture_key(seq), output);
        Ok(())
    }

    fn insert_record(&mut self, record: FixtureRecord) -> Result<(), BackendError> {
        if record.logits.len() != self.descriptor.vocab_size {
            return Err(BackendError::ShapeMismatch {
                what: "fixture logits length",
                expected: self.descriptor.vocab_size,
                got: record.logits.len(),
            });
        }
        if record.attention.len() != self.descriptor.head_count {
            return Err(BackendError::ShapeMismatch {
                what: "fixture attention rows",
                expected: self.descriptor.head_count,
                got: record.attention.len(),
            });
        }
        let logits = LogitVector::new(record.logits)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        self.records.insert(
            record.key,
            ForwardOutput {
                logits,
                attention: record.attention,
            },
        );
        Ok(())
    }

    /// Writes all records as JSONL, ordered by key for reproducible files.
    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        let mut file = std::fs::File::create(path)?;
        for (key, output) in &self.records {
            let record = FixtureRecord {
                key: key.clone(),
                logits: output.logits.values().to_vec(),
                attention: output.attention.clone(),
            };
            let line = serde_json::to_string(&record)
                .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
            writeln!(file, "{line}")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl Backend for FixtureBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn forward(&self, seq: &TokenSequence) -> Result<ForwardOutput, BackendError> {
        let key = fixture_key(seq);
        let output = self
            .records
            .get(&key)
            .ok_or(BackendError::MissingFixture(key))?
            .clone();
        output.validate(self.descriptor.vocab_size, seq.len())?;
        Ok(output)
    }
}
