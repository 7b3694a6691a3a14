use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::filter::{
    expand_instance_shots, filter_nonvisual, truncate_name, FilterOutcome, ShotCache,
};
use super::spot::spot_instances;
use super::{
    InstanceCandidate, InstanceRecord, MiningError, TranscriptedVideo, THETA_EXP, THETA_VIS,
};
use crate::encoders::{EmbeddingStore, EncoderError, ReferenceTextEncoder};
use crate::numerics::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub theta_vis: f64,
    pub theta_exp: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            theta_vis: THETA_VIS,
            theta_exp: THETA_EXP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectReason {
    NonVisual,
    NoOverlappingShot,
    MissingFrame,
    InvalidVideo,
    DegenerateEmbedding,
}

/// A candidate (or whole video) dropped by the miner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    /// Instance id, or the bare video id when the whole video was skipped.
    pub id: String,
    pub video_id: String,
    pub name: String,
    pub reason: RejectReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningOutput {
    pub records: Vec<InstanceRecord>,
    pub rejections: Vec<Rejection>,
}

/// Runs spotting, non-visual filtering, name truncation and shot expansion
/// over every video. Videos are mined in parallel; outputs are sorted by id so
/// the result does not depend on input order.
///
/// Filtering needs a name and truncation needs a reference shot, so name
/// prefixes are tried from longest to shortest: the first prefix that passes
/// the filter fixes `s*`, then the name is truncated against `s*`.
pub fn mine_corpus<T: Scalar>(
    videos: &[TranscriptedVideo],
    encoder: &ReferenceTextEncoder<T>,
    store: &EmbeddingStore,
    config: &MiningConfig,
) -> MiningOutput {
    let per_video: Vec<MiningOutput> = videos
        .par_iter()
        .map(|v| mine_video(v, encoder, store, config))
        .collect();
    let mut out = MiningOutput::default();
    for part in per_video {
        out.records.extend(part.records);
        out.rejections.extend(part.rejections);
    }
    out.records
        .sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    out.rejections.sort_by(|a, b| a.id.cmp(&b.id));
    for r in &out.rejections {
        tracing::info!(id = %r.id, reason = ?r.reason, detail = %r.detail, "candidate rejected");
    }
    out
}

fn mine_video<T: Scalar>(
    video: &TranscriptedVideo,
    encoder: &ReferenceTextEncoder<T>,
    store: &EmbeddingStore,
    config: &MiningConfig,
) -> MiningOutput {
    let mut out = MiningOutput::default();
    if let Err(e) = video.validate() {
        out.rejections.push(Rejection {
            id: video.video_id.clone(),
            video_id: video.video_id.clone(),
            name: String::new(),
            reason: RejectReason::InvalidVideo,
            detail: e.to_string(),
        });
        return out;
    }
    let cache = ShotCache::new(video, store);
    for candidate in spot_instances(video) {
        match mine_candidate(&candidate, video, encoder, &cache, config) {
            Ok(record) => out.records.push(record),
            Err((reason, detail)) => out.rejections.push(Rejection {
                id: candidate.instance_id(),
                video_id: video.video_id.clone(),
                name: candidate.name.join(" "),
                reason,
                detail,
            }),
        }
    }
    out
}

fn reason_for(e: &MiningError) -> RejectReason {
    match e {
        MiningError::NoOverlappingShot(_) => RejectReason::NoOverlappingShot,
        MiningError::NoVisualName => RejectReason::NonVisual,
        MiningError::InvalidVideo { .. } => RejectReason::InvalidVideo,
        MiningError::Encoder(EncoderError::MissingFrame(_) | EncoderError::EmptyShot) => {
            RejectReason::MissingFrame
        }
        MiningError::Encoder(_) | MiningError::Numerics(_) => RejectReason::DegenerateEmbedding,
    }
}

fn mine_candidate<T: Scalar>(
    candidate: &InstanceCandidate,
    video: &TranscriptedVideo,
    encoder: &ReferenceTextEncoder<T>,
    cache: &ShotCache<T>,
    config: &MiningConfig,
) -> Result<InstanceRecord, (RejectReason, String)> {
    let fail = |e: MiningError| (reason_for(&e), e.to_string());
    let mut best = f64::NEG_INFINITY;
    let mut reference = None;
    for k in (1..=candidate.name.len()).rev() {
        let prefix = candidate.with_name(&candidate.name[..k]);
        match filter_nonvisual(&prefix, video, encoder, cache, config.theta_vis).map_err(fail)? {
            FilterOutcome::Accepted(r) => {
                reference = Some(r);
                break;
            }
            FilterOutcome::Rejected { best_similarity } => best = best.max(best_similarity),
        }
    }
    let Some(reference) = reference else {
        return Err((
            RejectReason::NonVisual,
            format!("best similarity {best:.4} <= {}", config.theta_vis),
        ));
    };
    let ref_embedding = cache.get(reference.shot_index).map_err(fail)?;
    let name = truncate_name(candidate, ref_embedding, encoder, config.theta_vis).map_err(fail)?;
    let shots = expand_instance_shots(reference.shot_index, video, cache, config.theta_exp)
        .map_err(fail)?;
    Ok(InstanceRecord {
        instance_id: candidate.instance_id(),
        name: name.join(" "),
        video_id: video.video_id.clone(),
        reference_shot: reference.shot_id,
        shots,
        category: None,
        rejected: false,
    })
}
