//! Instance tokens `w = C_l·z`, the contrastive objective, zero-shot category
//! assignment, and the two training stages: meta-personalization of the
//! category feature bank and test-time personalization of instance weights.

mod category;
mod gradcheck;
mod loss;
mod model;
mod objective;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use category::{
    assign_category, assign_with_anchors, category_anchor, category_prompt, COCO_CATEGORIES,
};
pub use gradcheck::{run_gradcheck, GradCheckEntry, GradCheckSuite, GRADCHECK_TOLERANCE};
pub use loss::{loss_cat, loss_ll, loss_vl, LossOutput};
pub use model::{
    instance_tokens, CategoryFeatureBank, InstanceEntry, Parameterization, PersonalizedModel,
    SHARED_KEY,
};
pub use objective::{
    BatchItem, LossWeights, Objective, ParamGrads, ParamSet, TotalLoss, TrainBatch, TrainInstance,
};
pub use train::{meta_personalize, test_time_personalize, EpochLog, MetaOutcome, TestTimeOutcome};

use crate::encoders::{EncoderError, FormatError};
use crate::numerics::{AdamConfig, NumericsError};

#[derive(Debug, Error)]
pub enum PersonalizationError {
    #[error("category list is empty")]
    EmptyCategoryList,
    #[error("negative set is empty")]
    EmptyNegativesSet,
    #[error("instance {0:?} has no training shots")]
    EmptyInstance(String),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("unknown instance {0:?}")]
    UnknownInstance(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Training-design ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// a: no meta stage; instance tokens `w` are learned directly.
    #[serde(rename = "a")]
    NoMeta,
    /// b: one feature matrix shared by all categories.
    #[serde(rename = "b")]
    SingleC,
    /// c: drop the language-language loss.
    #[serde(rename = "c")]
    NoLanguageLoss,
    /// d: drop the category-anchoring loss.
    #[serde(rename = "d")]
    NoAnchorLoss,
    /// e: negatives are the batch shots only.
    #[serde(rename = "e")]
    BatchNegativesOnly,
    /// f: test-time training starts from a random bank.
    #[serde(rename = "f")]
    RandomC,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Self::NoMeta,
        Self::SingleC,
        Self::NoLanguageLoss,
        Self::NoAnchorLoss,
        Self::BatchNegativesOnly,
        Self::RandomC,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
    }

    pub fn code(self) -> &'static str {
        match self {
            Self::NoMeta => "a",
            Self::SingleC => "b",
            Self::NoLanguageLoss => "c",
            Self::NoAnchorLoss => "d",
            Self::BatchNegativesOnly => "e",
            Self::RandomC => "f",
        }
    }
}

/// Hyper-parameters of both training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizationConfig {
    /// Category features per matrix.
    pub q: usize,
    /// Instance tokens per instance.
    pub n_w: usize,
    /// Temperature of the contrastive kernel.
    pub lambda: f64,
    /// Weight of the category-anchoring loss.
    pub lambda_c: f64,
    /// Standard deviation of the `z` (or direct `w`) initialization.
    pub init_std: f64,
    /// Standard deviation of random feature-matrix entries; `1/√q` when unset.
    pub feature_init_std: Option<f64>,
    pub adam: AdamConfig,
    pub meta_rounds: usize,
    pub instances_per_category: usize,
    pub meta_epochs: usize,
    pub meta_batch: usize,
    pub epochs: usize,
    pub batch: usize,
    /// Distractor shots drawn per iteration at test time.
    pub distractors: usize,
    /// Same-category instances from the meta dataset added at test time, per category.
    pub extra_instances: usize,
    pub ablation: Option<Ablation>,
    /// Leave `i = j` pairs out of the vision-language sum.
    pub vl_exclude_self: bool,
    /// Templates used in addition to the three built-in ones.
    pub templates: Vec<String>,
}

impl Default for PersonalizationConfig {
    fn default() -> Self {
        Self {
            q: 512,
            n_w: 1,
            lambda: 0.1,
            lambda_c: 0.5,
            init_std: 0.1,
            feature_init_std: None,
            adam: AdamConfig::default(),
            meta_rounds: 10,
            instances_per_category: 32,
            meta_epochs: 20,
            meta_batch: 512,
            epochs: 40,
            batch: 16,
            distractors: 512,
            extra_instances: 8,
            ablation: None,
            vl_exclude_self: false,
            templates: Vec::new(),
        }
    }
}

impl PersonalizationConfig {
    pub fn validate(&self) -> Result<(), PersonalizationError> {
        let bad = |m: &str| Err(PersonalizationError::InvalidConfig(m.to_string()));
        if self.q == 0 || self.n_w == 0 {
            return bad("q and n_w must be positive");
        }
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if !(self.lambda_c >= 0.0) || !(self.init_std >= 0.0) {
            return bad("lambda_c and init_std must be non-negative");
        }
        if self.feature_init_std.is_some_and(|s| !(s >= 0.0)) {
            return bad("feature_init_std must be non-negative");
        }
        if self.batch == 0 || self.meta_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.adam.lr_max >= 0.0) {
            return bad("lr_max must be non-negative");
        }
        Ok(())
    }

    pub fn feature_std(&self) -> f64 {
        self.feature_init_std
            .unwrap_or(1.0 / (self.q as f64).sqrt())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            lambda_c: self.lambda_c,
            use_ll: self.ablation != Some(Ablation::NoLanguageLoss),
            use_cat: self.ablation != Some(Ablation::NoAnchorLoss),
            vl_exclude_self: self.vl_exclude_self,
        }
    }

    pub fn parameterization(&self) -> Parameterization {
        if self.ablation == Some(Ablation::NoMeta) {
            Parameterization::Direct
        } else {
            Parameterization::Composed
        }
    }

    pub fn shared_bank(&self) -> bool {
        self.ablation == Some(Ablation::SingleC)
    }
}
