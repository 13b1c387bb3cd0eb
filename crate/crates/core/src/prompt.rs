//! Unified input layout: entity-type prompt, relation-type prompt, then text.
//!
//! ```text
//! [ENT] e1 [ENT] e2 ... [REL] r1 [REL] r2 ... [SEP] t0 t1 ... tN
//! ```
//!
//! Multi-word labels occupy consecutive slots after their delimiter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of text words fed to the model.
pub const DEFAULT_MAX_WORDS: usize = 2048;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenUnit {
    EntDelimiter,
    RelDelimiter,
    Separator,
    LabelWord(String),
    TextWord(String),
}

impl TokenUnit {
    pub fn is_delimiter(&self) -> bool {
        matches!(self, TokenUnit::EntDelimiter | TokenUnit::RelDelimiter | TokenUnit::Separator)
    }

    pub fn as_str(&self) -> &str {
        match self {
            TokenUnit::EntDelimiter => "[ENT]",
            TokenUnit::RelDelimiter => "[REL]",
            TokenUnit::Separator => "[SEP]",
            TokenUnit::LabelWord(w) | TokenUnit::TextWord(w) => w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    pub tokens: Vec<TokenUnit>,
    pub ent_delimiter_positions: Vec<usize>,
    pub rel_delimiter_positions: Vec<usize>,
    pub text_start: usize,
    pub word_count: usize,
}

impl PromptLayout {
    pub fn entity_count(&self) -> usize {
        self.ent_delimiter_positions.len()
    }

    pub fn relation_count(&self) -> usize {
        self.rel_delimiter_positions.len()
    }

    /// Segment id per token: 0 entity prompt, 1 relation prompt, 2 text (separator included).
    pub fn segments(&self) -> Vec<usize> {
        let rel_start = self
            .rel_delimiter_positions
            .first()
            .copied()
            .unwrap_or(self.text_start - 1);
        (0..self.tokens.len())
            .map(|i| {
                if i >= self.text_start - 1 {
                    2
                } else if i >= rel_start {
                    1
                } else {
                    0
                }
            })
            .collect()
    }

    /// Label words following the delimiter at `pos`, up to the next delimiter.
    pub fn label_words_at(&self, pos: usize) -> Vec<&str> {
        self.tokens[pos + 1..]
            .iter()
            .take_while(|t| matches!(t, TokenUnit::LabelWord(_)))
            .map(TokenUnit::as_str)
            .collect()
    }
}

/// Keeps the leading `max_words` words; no sliding window.
pub fn truncate_words<S: Clone>(words: &[S], max_words: usize) -> Vec<S> {
    debug_assert!(max_words > 0);
    words[..words.len().min(max_words)].to_vec()
}

pub fn build_prompt<E, R, W>(entity_labels: &[E], relation_labels: &[R], words: &[W]) -> Result<PromptLayout>
where
    E: AsRef<str>,
    R: AsRef<str>,
    W: AsRef<str>,
{
    if entity_labels.is_empty() {
        return Err(Error::config("at least one entity label is required"));
    }
    let mut tokens = Vec::new();
    let mut ent_delimiter_positions = Vec::with_capacity(entity_labels.len());
    let mut rel_delimiter_positions = Vec::with_capacity(relation_labels.len());

    let push_label = |tokens: &mut Vec<TokenUnit>, delim: TokenUnit, label: &str| -> Result<usize> {
        let pieces: Vec<&str> = label.split_whitespace().collect();
        if pieces.is_empty() {
            return Err(Error::config(format!("label {label:?} is empty")));
        }
        let pos = tokens.len();
        tokens.push(delim);
        tokens.extend(pieces.into_iter().map(|w| TokenUnit::LabelWord(w.to_owned())));
        Ok(pos)
    };

    for label in entity_labels {
        ent_delimiter_positions.push(push_label(&mut tokens, TokenUnit::EntDelimiter, label.as_ref())?);
    }
    for label in relation_labels {
        rel_delimiter_positions.push(push_label(&mut tokens, TokenUnit::RelDelimiter, label.as_ref())?);
    }
    tokens.push(TokenUnit::Separator);
    let text_start = tokens.len();
    tokens.extend(words.iter().map(|w| TokenUnit::TextWord(w.as_ref().to_owned())));

    Ok(PromptLayout {
        tokens,
        ent_delimiter_positions,
        rel_delimiter_positions,
        text_start,
        word_count: words.len(),
    })
}
