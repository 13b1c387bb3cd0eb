//! Word tokenization with character offsets and serializable extraction results.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Extraction;

static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\w+(?:[-'’.]\w+)*|[^\w\s]").expect("valid pattern"));

/// A word with its `[start, end)` character offsets in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordToken {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits on whitespace and isolates punctuation; intra-word hyphens,
/// apostrophes and dots stay attached.
pub fn tokenize(text: &str) -> Vec<WordToken> {
    let mut chars = 0;
    let mut last_byte = 0;
    WORD.find_iter(text)
        .map(|m| {
            chars += text[last_byte..m.start()].chars().count();
            let start = chars;
            chars += m.as_str().chars().count();
            last_byte = m.end();
            WordToken {
                text: m.as_str().to_string(),
                start,
                end: chars,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityResult {
    pub text: String,
    /// Inclusive word indices.
    pub start: usize,
    pub end: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationResult {
    pub head: String,
    pub tail: String,
    /// Indices into the entity list of the same result.
    pub head_entity: usize,
    pub tail_entity: usize,
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub text: String,
    pub entities: Vec<EntityResult>,
    pub relations: Vec<RelationResult>,
}

impl ExtractionResult {
    /// Maps word-level predictions back onto `text` through its tokens.
    pub fn new(
        text: &str,
        tokens: &[WordToken],
        extraction: &Extraction,
        entity_labels: &[String],
        relation_labels: &[String],
    ) -> Result<Self> {
        let chars: Vec<char> = text.chars().collect();
        let entities = extraction
            .entities
            .iter()
            .map(|e| {
                let (first, last) = match (tokens.get(e.span.start), tokens.get(e.span.end)) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(Error::contract("entity span outside the tokenized text")),
                };
                let label = entity_labels
                    .get(e.type_index)
                    .ok_or_else(|| Error::contract("entity type index outside the label list"))?;
                Ok(EntityResult {
                    text: chars[first.start..last.end].iter().collect(),
                    start: e.span.start,
                    end: e.span.end,
                    char_start: first.start,
                    char_end: last.end,
                    label: label.clone(),
                    score: e.score,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let relations = extraction
            .relations
            .iter()
            .map(|r| {
                let label = relation_labels
                    .get(r.relation_index)
                    .ok_or_else(|| Error::contract("relation index outside the label list"))?;
                let surface = |i: usize| {
                    entities
                        .get(i)
                        .map(|e| e.text.clone())
                        .ok_or_else(|| Error::contract("relation endpoint is not an emitted entity"))
                };
                Ok(RelationResult {
                    head: surface(r.head_index)?,
                    tail: surface(r.tail_index)?,
                    head_entity: r.head_index,
                    tail_entity: r.tail_index,
                    label: label.clone(),
                    score: r.score,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            text: text.to_string(),
            entities,
            relations,
        })
    }
}
