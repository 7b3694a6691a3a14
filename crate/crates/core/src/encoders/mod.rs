//! The frozen-encoder contract.
//!
//! Text goes through [`ReferenceTextEncoder`], a differentiable linear
//! mean-pool encoder over a frozen [`TokenTable`]. Vision features are never
//! computed here: they arrive as precomputed vectors in an [`EmbeddingStore`]
//! and shots are embedded by averaging their frames.

pub mod binio;
mod prompt;
mod store;
mod text;
mod tokens;

use thiserror::Error;

pub use binio::{sha256_hex, write_atomic, FormatError};
pub use prompt::{
    build_personalized_query, PromptTemplate, QuerySequence, DEFAULT_TEMPLATES, GENERIC_PROMPT,
};
pub use store::{shot_embedding, EmbeddingStore};
pub use text::ReferenceTextEncoder;
pub use tokens::{
    normalize_word, TokenId, TokenTable, TokenTableBuilder, OOV_ID, OOV_TOKEN, PLACEHOLDER_ID,
    PLACEHOLDER_MARK, PLACEHOLDER_TOKEN, START_ID, START_TOKEN,
};

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("sequence of {len} tokens exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("frame {0:?} not found in embedding store")]
    MissingFrame(String),
    #[error("shot has no frames")]
    EmptyShot,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("invalid token table: {0}")]
    InvalidTable(String),
    #[error("invalid prompt template: {0}")]
    InvalidTemplate(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Format(#[from] FormatError),
}
