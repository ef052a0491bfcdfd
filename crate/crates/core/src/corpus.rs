//! Corpus files and the object vocabulary map.
//!
//! A corpus is JSONL, one item per line. Captioning items carry
//! `gt_objects`; binary VQA items carry `gold` and `question_object`. The
//! vocabulary map is a JSON object from token id to object name.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::PopeAnswer;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus")]
    Empty,
    #[error("duplicate id {0:?} in corpus")]
    DuplicateId(String),
    #[error("corpus line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusItem {
    pub id: String,
    pub visual_tokens: Vec<u32>,
    pub prompt_tokens: Vec<u32>,
    /// Ground-truth object names for caption scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_objects: Option<Vec<String>>,
    /// Gold answer for binary VQA scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<PopeAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_object: Option<String>,
}

/// Parses a corpus from JSONL text, rejecting duplicates and empty corpora.
pub fn parse_corpus(text: &str) -> Result<Vec<CorpusItem>, CorpusError> {
    let mut items = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: CorpusItem = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(item.id.clone()) {
            return Err(CorpusError::DuplicateId(item.id));
        }
        items.push(item);
    }
    if items.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(items)
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusItem>, CorpusError> {
    let file = std::fs::File::open(path)?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_corpus(&text)
}

/// Token id to object name mapping; its domain doubles as the set of object
/// token ids during mention extraction.
pub type VocabMap = BTreeMap<u32, String>;

pub fn load_vocab_map(path: &Path) -> Result<VocabMap, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
        line: 0,
        message: format!("vocab map: {e}"),
    })
}

/// Object mentions in a generated token stream: every occurrence of an id in
/// the vocabulary map, in generation order, mapped to its name.
pub fn extract_mentions(tokens: &[u32], vocab: &VocabMap) -> Vec<String> {
    tokens
        .iter()
        .filter_map(|id| vocab.get(id).cloned())
        .collect()
}
