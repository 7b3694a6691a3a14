//! Personalized vision-language retrieval over frozen encoders: mining named
//! instances from transcripted videos, learning instance tokens from shared
//! category features, and ranking shot corpora with personalized queries.
//!
//! Numeric code is generic over [`numerics::Scalar`]; the aliases below fix
//! the scalar to `f64` (the default) or `f32`.

// `!(x >= y)` checks deliberately reject NaN along with small values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encoders;
pub mod experiment;
pub mod io;
pub mod mining;
pub mod numerics;
pub mod personalization;
pub mod retrieval;
pub mod synthworld;

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type TextEncoder = encoders::ReferenceTextEncoder<f64>;
pub type Tokens = encoders::TokenTable<f64>;
pub type FeatureBank = personalization::CategoryFeatureBank<f64>;
pub type Model = personalization::PersonalizedModel<f64>;
pub type Corpus = retrieval::ShotCorpus<f64>;
pub type Prepared = experiment::Prepared<f64>;

pub type TextEncoderF32 = encoders::ReferenceTextEncoder<f32>;
pub type ModelF32 = personalization::PersonalizedModel<f32>;
pub type CorpusF32 = retrieval::ShotCorpus<f32>;
