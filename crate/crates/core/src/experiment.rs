//! The three-stage pipeline end to end: mine, categorize, meta-personalize,
//! personalize at test time, rank and score, repeated over seeds.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::encoders::{shot_embedding, EmbeddingStore, EncoderError, ReferenceTextEncoder};
use crate::mining::{mine_corpus, InstanceRecord, MiningConfig, MiningOutput, TranscriptedVideo};
use crate::numerics::{Embedding, RngStream, Scalar};
use crate::personalization::{
    assign_with_anchors, category_anchor, meta_personalize, test_time_personalize, Ablation,
    CategoryFeatureBank, PersonalizationConfig, PersonalizationError, PersonalizedModel,
    TestTimeOutcome, TrainInstance,
};
use crate::retrieval::{
    baseline_embedding, compute_metrics, personalized_query, rank_corpus, summarize_seeds,
    BaselineKind, EvalManifest, MetricReport, QuerySpec, RankedRetrieval, RetrievalError,
    SeedSummary, ShotCorpus,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("record {0:?} refers to an unknown video")]
    UnknownVideo(String),
    #[error("record {record:?} refers to unknown shot {shot:?}")]
    UnknownShot { record: String, shot: String },
    #[error("query {query:?} names instance {instance:?}, which was not mined")]
    UnminedInstance { query: String, instance: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Personalization(#[from] PersonalizationError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Fills in `category` by zero-shot classification of each record's shots.
pub fn categorize<T: Scalar>(
    records: &mut [InstanceRecord],
    videos: &[TranscriptedVideo],
    store: &EmbeddingStore,
    categories: &[String],
    encoder: &ReferenceTextEncoder<T>,
) -> Result<(), ExperimentError> {
    let anchors = categories
        .iter()
        .map(|c| category_anchor(c, encoder))
        .collect::<Result<Vec<_>, _>>()?;
    let index = video_index(videos);
    for r in records.iter_mut() {
        let shots = record_shots(r, &index, store)?;
        r.category = Some(assign_with_anchors(&shots, categories, &anchors)?);
    }
    Ok(())
}

fn video_index(videos: &[TranscriptedVideo]) -> HashMap<&str, &TranscriptedVideo> {
    videos.iter().map(|v| (v.video_id.as_str(), v)).collect()
}

fn record_shots<T: Scalar>(
    record: &InstanceRecord,
    videos: &HashMap<&str, &TranscriptedVideo>,
    store: &EmbeddingStore,
) -> Result<Vec<Embedding<T>>, ExperimentError> {
    let video = videos
        .get(record.video_id.as_str())
        .ok_or_else(|| ExperimentError::UnknownVideo(record.instance_id.clone()))?;
    record
        .shots
        .iter()
        .map(|id| {
            let shot = video.shots.iter().find(|s| &s.id == id).ok_or_else(|| {
                ExperimentError::UnknownShot {
                    record: record.instance_id.clone(),
                    shot: id.clone(),
                }
            })?;
            Ok(shot_embedding(&shot.frames, store)?)
        })
        .collect()
}

/// Training instances from categorized records; shots come from each
/// record's own video only.
pub fn train_instances<T: Scalar>(
    records: &[InstanceRecord],
    videos: &[TranscriptedVideo],
    store: &EmbeddingStore,
) -> Result<Vec<TrainInstance<T>>, ExperimentError> {
    let index = video_index(videos);
    records
        .iter()
        .map(|r| {
            Ok(TrainInstance {
                id: r.instance_id.clone(),
                category: r.category.clone().ok_or_else(|| {
                    PersonalizationError::UnknownCategory(format!(
                        "{} is uncategorized",
                        r.instance_id
                    ))
                })?,
                shots: record_shots(r, &index, store)?,
            })
        })
        .collect()
}

/// Shots of `videos` that are positive for no record: the non-instance
/// segments used as extra negatives.
pub fn negative_pool<T: Scalar>(
    videos: &[TranscriptedVideo],
    records: &[InstanceRecord],
    store: &EmbeddingStore,
) -> Result<Vec<Embedding<T>>, ExperimentError> {
    let positive: HashSet<&str> = records
        .iter()
        .flat_map(|r| r.shots.iter().map(String::as_str))
        .collect();
    let mut out = Vec::new();
    for v in videos {
        for s in v.shots.iter().filter(|s| !positive.contains(s.id.as_str())) {
            match shot_embedding(&s.frames, store) {
                Ok(e) => out.push(e),
                Err(e) => tracing::warn!(shot = %s.id, error = %e, "negative shot skipped"),
            }
        }
    }
    Ok(out)
}

/// Everything the training and retrieval stages need, after mining.
#[derive(Debug, Clone)]
pub struct Prepared<T: Scalar> {
    pub categories: Vec<String>,
    pub meta_mining: MiningOutput,
    pub personal_mining: MiningOutput,
    pub meta: Vec<TrainInstance<T>>,
    pub personal: Vec<TrainInstance<T>>,
    pub negatives: Vec<Embedding<T>>,
    pub corpus: ShotCorpus<T>,
    pub queries: Vec<QuerySpec>,
}

/// Mines and categorizes both video sets and embeds the retrieval corpus.
#[allow(clippy::too_many_arguments)]
pub fn prepare<T: Scalar>(
    meta_videos: &[TranscriptedVideo],
    personal_videos: &[TranscriptedVideo],
    store: &EmbeddingStore,
    encoder: &ReferenceTextEncoder<T>,
    manifest: &EvalManifest,
    queries: &[QuerySpec],
    mining: &MiningConfig,
) -> Result<Prepared<T>, ExperimentError> {
    let mut meta_mining = mine_corpus(meta_videos, encoder, store, mining);
    let mut personal_mining = mine_corpus(personal_videos, encoder, store, mining);
    categorize(
        &mut meta_mining.records,
        meta_videos,
        store,
        &manifest.categories,
        encoder,
    )?;
    categorize(
        &mut personal_mining.records,
        personal_videos,
        store,
        &manifest.categories,
        encoder,
    )?;
    let meta = train_instances(&meta_mining.records, meta_videos, store)?;
    let personal = train_instances(&personal_mining.records, personal_videos, store)?;
    let all_videos: Vec<TranscriptedVideo> =
        meta_videos.iter().chain(personal_videos).cloned().collect();
    let all_records: Vec<InstanceRecord> = meta_mining
        .records
        .iter()
        .chain(&personal_mining.records)
        .cloned()
        .collect();
    let negatives = negative_pool(&all_videos, &all_records, store)?;
    let corpus = ShotCorpus::from_shots(&manifest.corpus, store)?;
    let mined: HashSet<&str> = personal.iter().map(|p| p.id.as_str()).collect();
    if let Some(q) = queries
        .iter()
        .find(|q| !mined.contains(q.instance_id.as_str()))
    {
        return Err(ExperimentError::UnminedInstance {
            query: q.query_id.clone(),
            instance: q.instance_id.clone(),
        });
    }
    Ok(Prepared {
        categories: manifest.categories.clone(),
        meta_mining,
        personal_mining,
        meta,
        personal,
        negatives,
        corpus,
        queries: queries.to_vec(),
    })
}

/// A retrieval method under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    /// Meta-personalization followed by test-time personalization.
    Personalized(Option<Ablation>),
    Baseline(BaselineKind),
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Personalized(None) => f.write_str("ours"),
            Self::Personalized(Some(a)) => write!(f, "ours ({})", a.code()),
            Self::Baseline(b) => write!(f, "baseline {b}"),
        }
    }
}

/// Meta-personalizes a random bank under `seed`; `None` for ablation a,
/// which has no bank.
pub fn meta_stage<T: Scalar>(
    meta: &[TrainInstance<T>],
    categories: &[String],
    encoder: &ReferenceTextEncoder<T>,
    cfg: &PersonalizationConfig,
    seed: u64,
) -> Result<Option<CategoryFeatureBank<T>>, ExperimentError> {
    if cfg.ablation == Some(Ablation::NoMeta) {
        tracing::info!("meta-personalization skipped for ablation a");
        return Ok(None);
    }
    let root = RngStream::new(seed);
    let init = CategoryFeatureBank::random(
        categories,
        encoder.dim(),
        cfg.q,
        cfg.shared_bank(),
        cfg.feature_std(),
        &mut root.fork(0),
    )?;
    Ok(Some(
        meta_personalize(meta, init, encoder, cfg, &mut root.fork(1))?.bank,
    ))
}

/// Test-time personalization under `seed`, on a stream disjoint from the
/// meta stage's.
#[allow(clippy::too_many_arguments)]
pub fn test_time_stage<T: Scalar>(
    personal: &[TrainInstance<T>],
    bank: Option<&CategoryFeatureBank<T>>,
    meta: &[TrainInstance<T>],
    negatives: &[Embedding<T>],
    categories: &[String],
    encoder: &ReferenceTextEncoder<T>,
    cfg: &PersonalizationConfig,
    seed: u64,
) -> Result<TestTimeOutcome<T>, ExperimentError> {
    let mut rng = RngStream::new(seed).fork(2);
    Ok(test_time_personalize(
        personal, bank, meta, negatives, categories, encoder, cfg, &mut rng,
    )?)
}

/// Trains both personalization stages under `seed`. A `pretrained` bank
/// replaces the meta stage.
pub fn train_personalized<T: Scalar>(
    prepared: &Prepared<T>,
    encoder: &ReferenceTextEncoder<T>,
    cfg: &PersonalizationConfig,
    seed: u64,
    pretrained: Option<&CategoryFeatureBank<T>>,
) -> Result<PersonalizedModel<T>, ExperimentError> {
    let bank = match (cfg.ablation, pretrained) {
        // Ablation f replaces whatever bank it is given with a random one.
        (Some(Ablation::RandomC), _) => None,
        (_, Some(b)) => Some(b.clone()),
        (_, None) => meta_stage(&prepared.meta, &prepared.categories, encoder, cfg, seed)?,
    };
    let out = test_time_stage(
        &prepared.personal,
        bank.as_ref(),
        &prepared.meta,
        &prepared.negatives,
        &prepared.categories,
        encoder,
        cfg,
        seed,
    )?;
    Ok(out.model)
}

/// Ranks the corpus for every query with a trained model.
pub fn rank_personalized<T: Scalar>(
    model: &PersonalizedModel<T>,
    prepared: &Prepared<T>,
    encoder: &ReferenceTextEncoder<T>,
) -> Result<Vec<RankedRetrieval>, ExperimentError> {
    prepared
        .queries
        .iter()
        .map(|q| {
            let e = personalized_query(model, &q.instance_id, &q.prompt, encoder)?;
            Ok(rank_corpus(&q.query_id, &e, &prepared.corpus)?)
        })
        .collect()
}

/// Ranks the corpus for every query with a non-personalized baseline.
pub fn rank_baseline<T: Scalar>(
    kind: BaselineKind,
    prepared: &Prepared<T>,
    encoder: &ReferenceTextEncoder<T>,
) -> Result<Vec<RankedRetrieval>, ExperimentError> {
    let by_id: HashMap<&str, &TrainInstance<T>> = prepared
        .personal
        .iter()
        .map(|p| (p.id.as_str(), p))
        .collect();
    prepared
        .queries
        .iter()
        .map(|q| {
            let inst = by_id[q.instance_id.as_str()];
            let e = baseline_embedding(kind, &inst.category, &inst.shots, encoder)?;
            Ok(rank_corpus(&q.query_id, &e, &prepared.corpus)?)
        })
        .collect()
}

/// Metrics of one method under one seed. Baselines ignore the seed.
pub fn run_method<T: Scalar>(
    prepared: &Prepared<T>,
    encoder: &ReferenceTextEncoder<T>,
    method: Method,
    cfg: &PersonalizationConfig,
    seed: u64,
    k: usize,
    pretrained: Option<&CategoryFeatureBank<T>>,
) -> Result<MetricReport, ExperimentError> {
    let rankings = match method {
        Method::Personalized(ablation) => {
            let cfg = PersonalizationConfig {
                ablation,
                ..cfg.clone()
            };
            let model = train_personalized(prepared, encoder, &cfg, seed, pretrained)?;
            rank_personalized(&model, prepared, encoder)?
        }
        Method::Baseline(kind) => rank_baseline(kind, prepared, encoder)?,
    };
    let relevant: Vec<Vec<&str>> = prepared
        .queries
        .iter()
        .map(|q| q.relevant_shots.iter().map(String::as_str).collect())
        .collect();
    Ok(compute_metrics(&rankings, &relevant, k)?)
}

/// Mean ± standard error of each method over `seeds`.
pub fn compare_methods<T: Scalar>(
    prepared: &Prepared<T>,
    encoder: &ReferenceTextEncoder<T>,
    methods: &[Method],
    cfg: &PersonalizationConfig,
    seeds: &[u64],
    k: usize,
    pretrained: Option<&CategoryFeatureBank<T>>,
) -> Result<Vec<SeedSummary>, ExperimentError> {
    methods
        .iter()
        .map(|&m| {
            let reports = seeds
                .iter()
                .map(|&s| run_method(prepared, encoder, m, cfg, s, k, pretrained))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(summarize_seeds(&m.to_string(), seeds, reports)?)
        })
        .collect()
}
