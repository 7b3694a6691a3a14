//! Mining named instances from time-aligned transcripts.
//!
//! Three stages: spot possessive mentions in the transcript, keep only names
//! that are visually grounded in a shot near the mention, then grow each
//! instance's shot set with visually near-identical shots from the same video.

mod filter;
mod pipeline;
mod spot;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use filter::{
    expand_instance_shots, filter_nonvisual, truncate_name, FilterOutcome, ShotCache,
    VisualReference,
};
pub use pipeline::{mine_corpus, MiningConfig, MiningOutput, RejectReason, Rejection};
pub use spot::{spot_instances, POSSESSIVE_PATTERNS};

use crate::encoders::EncoderError;
use crate::numerics::NumericsError;

/// Default text-to-visual acceptance threshold.
pub const THETA_VIS: f64 = 0.3;
/// Default shot-expansion threshold.
pub const THETA_EXP: f64 = 0.9;
/// Maximum number of words kept after a possessive pattern.
pub const MAX_NAME_WORDS: usize = 4;

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("no shot overlaps the mention at {0:.2}s")]
    NoOverlappingShot(f64),
    #[error("no name prefix is visually grounded")]
    NoVisualName,
    #[error("invalid video {video_id}: {reason}")]
    InvalidVideo { video_id: String, reason: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub t0: f64,
    pub t1: f64,
    pub w: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shot {
    pub id: String,
    pub t0: f64,
    pub t1: f64,
    pub frames: Vec<String>,
}

/// One line of the transcript JSONL input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptedVideo {
    pub video_id: String,
    pub words: Vec<Word>,
    pub shots: Vec<Shot>,
}

impl TranscriptedVideo {
    /// Checks time ordering, shot overlap and frame presence.
    pub fn validate(&self) -> Result<(), MiningError> {
        let bad = |reason: String| MiningError::InvalidVideo {
            video_id: self.video_id.clone(),
            reason,
        };
        for pair in self.words.windows(2) {
            if pair[1].t0 < pair[0].t0 {
                return Err(bad(format!(
                    "word {:?} starts before its predecessor",
                    pair[1].w
                )));
            }
        }
        for (i, s) in self.shots.iter().enumerate() {
            if !(s.t1 >= s.t0) {
                return Err(bad(format!("shot {} ends before it starts", s.id)));
            }
            if s.frames.is_empty() {
                return Err(bad(format!("shot {} has no frames", s.id)));
            }
            if i > 0 && s.t0 < self.shots[i - 1].t1 {
                return Err(bad(format!("shot {} overlaps its predecessor", s.id)));
            }
        }
        let mut ids: Vec<&str> = self.shots.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(bad("duplicate shot ids".into()));
        }
        Ok(())
    }

    /// Index of the shot whose `[t0, t1)` span contains `t` (the last shot
    /// also owns its end time).
    pub fn shot_at(&self, t: f64) -> Option<usize> {
        let last = self.shots.len().checked_sub(1)?;
        self.shots
            .iter()
            .position(|s| s.t0 <= t && t < s.t1)
            .or_else(|| (self.shots[last].t1 == t).then_some(last))
    }

    pub fn shot_index(&self, id: &str) -> Option<usize> {
        self.shots.iter().position(|s| s.id == id)
    }
}

/// A possessive mention found in a transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceCandidate {
    pub video_id: String,
    /// Position of this match among the video's matches.
    pub match_index: usize,
    pub pattern: String,
    /// Normalized words following the pattern (1 to 4).
    pub name: Vec<String>,
    /// Start time of the first name word, in seconds.
    pub mention_time: f64,
    /// Index into the video's shots of the shot overlapping `mention_time`.
    pub overlapping_shot: Option<usize>,
}

impl InstanceCandidate {
    pub fn instance_id(&self) -> String {
        format!("{}#{}", self.video_id, self.match_index)
    }

    pub fn with_name(&self, name: &[String]) -> Self {
        Self {
            name: name.to_vec(),
            ..self.clone()
        }
    }
}

/// A mined (or annotated) named instance: one line of the dataset JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: String,
    pub name: String,
    pub video_id: String,
    pub reference_shot: String,
    pub shots: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default)]
    pub rejected: bool,
}
