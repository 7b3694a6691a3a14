use std::ops::Range;

use super::text::ReferenceTextEncoder;
use super::tokens::{TokenId, TokenTable, PLACEHOLDER_ID, START_ID};
use super::EncoderError;
use crate::numerics::{self, Scalar};

/// Training templates; `*` marks where instance tokens are spliced.
pub const DEFAULT_TEMPLATES: [&str; 3] = [
    "an image of *",
    "* can be seen in this photo",
    "there is * in this image",
];

/// Prompt used for generic instance retrieval.
pub const GENERIC_PROMPT: &str = "an image of *";

/// Tokenized prompt with exactly one placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
    ids: Vec<TokenId>,
    placeholder: usize,
}

impl PromptTemplate {
    pub fn parse<T: Scalar>(text: &str, table: &TokenTable<T>) -> Result<Self, EncoderError> {
        let ids = table.tokenize(text);
        let mut marks = ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == PLACEHOLDER_ID);
        let placeholder = match (marks.next(), marks.next()) {
            (Some((k, _)), None) => k,
            _ => {
                return Err(EncoderError::InvalidTemplate(format!(
                    "{text:?} must contain exactly one standalone '*'"
                )))
            }
        };
        if ids.len() + 1 > table.max_len() {
            return Err(EncoderError::SequenceTooLong {
                len: ids.len() + 1,
                max: table.max_len(),
            });
        }
        Ok(Self {
            text: text.to_string(),
            ids,
            placeholder,
        })
    }

    pub fn defaults<T: Scalar>(table: &TokenTable<T>) -> Result<Vec<Self>, EncoderError> {
        DEFAULT_TEMPLATES
            .iter()
            .map(|t| Self::parse(t, table))
            .collect()
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    /// Index of the placeholder among the template's own tokens.
    pub fn placeholder(&self) -> usize {
        self.placeholder
    }
}

/// Embedding sequence of a personalized query, ready for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySequence<T: Scalar> {
    pub tokens: Vec<Vec<T>>,
    /// Positions of the spliced instance tokens within `tokens`.
    pub instance_slots: Range<usize>,
}

/// Replaces the template placeholder with `instance_tokens`, after a leading
/// start token. Positions are assigned after splicing, so instance tokens
/// occupy real positional slots.
pub fn build_personalized_query<T: Scalar>(
    template: &PromptTemplate,
    instance_tokens: &[Vec<T>],
    encoder: &ReferenceTextEncoder<T>,
) -> Result<QuerySequence<T>, EncoderError> {
    if instance_tokens.is_empty() {
        return Err(EncoderError::InvalidTemplate(
            "at least one instance token required".into(),
        ));
    }
    let len = 1 + template.ids.len() - 1 + instance_tokens.len();
    if len > encoder.max_len() {
        return Err(EncoderError::SequenceTooLong {
            len,
            max: encoder.max_len(),
        });
    }
    let table = encoder.table();
    let mut tokens = Vec::with_capacity(len);
    tokens.push(table.embedding(START_ID).to_vec());
    for &id in &template.ids[..template.placeholder] {
        tokens.push(table.embedding(id).to_vec());
    }
    let start = tokens.len();
    for w in instance_tokens {
        numerics::check_len(encoder.dim(), w.len())?;
        tokens.push(w.clone());
    }
    let end = tokens.len();
    for &id in &template.ids[template.placeholder + 1..] {
        tokens.push(table.embedding(id).to_vec());
    }
    Ok(QuerySequence {
        tokens,
        instance_slots: start..end,
    })
}
