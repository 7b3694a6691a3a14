//! Query scoring, exhaustive ranking over a shot corpus, the three
//! non-personalized baselines and the ranking metrics (MRR, R@K, mAP).

mod metrics;

use std::collections::HashSet;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{
    compute_metrics, summarize_seeds, MeanStderr, MetricReport, QueryMetrics, SeedSummary,
    DEFAULT_K,
};

use crate::encoders::{
    shot_embedding, EmbeddingStore, EncoderError, PromptTemplate, ReferenceTextEncoder,
};
use crate::numerics::{self, Embedding, NumericsError, Scalar};
use crate::personalization::{category_prompt, PersonalizationError, PersonalizedModel};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("retrieval corpus is empty")]
    EmptyCorpus,
    #[error("query {0:?} has no relevant shot in the ranking")]
    NoRelevantShots(String),
    #[error("instance {0:?} has no training shots")]
    EmptyInstance(String),
    #[error("no seeds given")]
    NoSeeds,
    #[error("duplicate shot id {0:?} in corpus")]
    DuplicateShot(String),
    #[error(transparent)]
    Personalization(#[from] PersonalizationError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// A retrieval-corpus shot and the frames it averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusShot {
    pub id: String,
    pub frames: Vec<String>,
}

/// Evaluation manifest: the category list and the retrieval corpus. Training
/// shots are never part of the corpus; every non-instance shot is a distractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalManifest {
    pub categories: Vec<String>,
    /// Seed of the reference text encoder's projection.
    pub encoder_seed: u64,
    pub corpus: Vec<CorpusShot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Generic,
    Contextual,
}

/// One line of the query JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub query_id: String,
    pub instance_id: String,
    pub kind: QueryKind,
    /// Prompt text with a `*` placeholder.
    pub prompt: String,
    pub relevant_shots: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedShot {
    pub shot_id: String,
    pub score: f64,
}

/// Full ranking of the corpus for one query: scores non-increasing, ties in
/// ascending shot id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRetrieval {
    pub query_id: String,
    pub ranking: Vec<RankedShot>,
}

/// Embedded shots to rank.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotCorpus<T: Scalar> {
    ids: Vec<String>,
    embeddings: Vec<Embedding<T>>,
}

impl<T: Scalar> ShotCorpus<T> {
    pub fn new(entries: Vec<(String, Embedding<T>)>) -> Result<Self, RetrievalError> {
        let mut seen = HashSet::new();
        let mut ids = Vec::with_capacity(entries.len());
        let mut embeddings = Vec::with_capacity(entries.len());
        for (id, e) in entries {
            if !seen.insert(id.clone()) {
                return Err(RetrievalError::DuplicateShot(id));
            }
            ids.push(id);
            embeddings.push(e);
        }
        Ok(Self { ids, embeddings })
    }

    /// Embeds each `(shot id, frame ids)` pair from the store.
    pub fn from_store<S: AsRef<str>>(
        shots: &[(String, Vec<S>)],
        store: &EmbeddingStore,
    ) -> Result<Self, RetrievalError> {
        let entries = shots
            .iter()
            .map(|(id, frames)| Ok((id.clone(), shot_embedding(frames, store)?)))
            .collect::<Result<Vec<_>, RetrievalError>>()?;
        Self::new(entries)
    }

    pub fn from_shots(
        shots: &[CorpusShot],
        store: &EmbeddingStore,
    ) -> Result<Self, RetrievalError> {
        let pairs: Vec<(String, Vec<&str>)> = shots
            .iter()
            .map(|s| (s.id.clone(), s.frames.iter().map(String::as_str).collect()))
            .collect();
        Self::from_store(&pairs, store)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> &[Embedding<T>] {
        &self.embeddings
    }
}

/// `M(u, v) = cos(f_l(û), ψ)`.
pub fn score<T: Scalar>(query: &Embedding<T>, shot: &Embedding<T>) -> Result<f64, RetrievalError> {
    Ok(query.cosine(shot)?.as_f64())
}

/// Personalized query embedding for `instance` under `prompt` (with `*`).
pub fn personalized_query<T: Scalar>(
    model: &PersonalizedModel<T>,
    instance: &str,
    prompt: &str,
    encoder: &ReferenceTextEncoder<T>,
) -> Result<Embedding<T>, RetrievalError> {
    let template = PromptTemplate::parse(prompt, encoder.table())?;
    Ok(model.query_embedding(instance, &template, encoder)?)
}

/// Scores every shot (in parallel) and sorts descending, ties by shot id.
pub fn rank_corpus<T: Scalar>(
    query_id: &str,
    query: &Embedding<T>,
    corpus: &ShotCorpus<T>,
) -> Result<RankedRetrieval, RetrievalError> {
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let scores = corpus
        .embeddings
        .par_iter()
        .map(|e| score(query, e))
        .collect::<Result<Vec<f64>, _>>()?;
    let mut ranking: Vec<RankedShot> = corpus
        .ids
        .iter()
        .zip(scores)
        .map(|(id, score)| RankedShot {
            shot_id: id.clone(),
            score,
        })
        .collect();
    ranking.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.shot_id.cmp(&b.shot_id))
    });
    Ok(RankedRetrieval {
        query_id: query_id.to_string(),
        ranking,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaselineKind {
    /// Generic category prompt.
    #[serde(rename = "language")]
    Language,
    /// Mean of the training shots.
    #[serde(rename = "visual")]
    Visual,
    /// Normalized mean of the two above.
    #[serde(rename = "v+l")]
    VisionLanguage,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [Self::Language, Self::Visual, Self::VisionLanguage];
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Language => "language",
            Self::Visual => "visual",
            Self::VisionLanguage => "v+l",
        })
    }
}

/// Non-personalized query vector for an instance.
pub fn baseline_embedding<T: Scalar>(
    kind: BaselineKind,
    category: &str,
    training_shots: &[Embedding<T>],
    encoder: &ReferenceTextEncoder<T>,
) -> Result<Embedding<T>, RetrievalError> {
    let language = || -> Result<Embedding<T>, RetrievalError> {
        Ok(encoder.encode_text(&category_prompt(category))?)
    };
    let visual = || -> Result<Embedding<T>, RetrievalError> {
        let first = training_shots
            .first()
            .ok_or_else(|| RetrievalError::EmptyInstance(category.to_string()))?;
        let mut acc = vec![T::zero(); first.dim()];
        for s in training_shots {
            numerics::axpy(&mut acc, T::one(), s.as_slice());
        }
        Ok(Embedding::new(numerics::normalize_slice(&acc)?)?)
    };
    match kind {
        BaselineKind::Language => language(),
        BaselineKind::Visual => visual(),
        BaselineKind::VisionLanguage => {
            let l = language()?;
            let v = visual()?;
            let mean: Vec<T> = l
                .as_slice()
                .iter()
                .zip(v.as_slice())
                .map(|(&a, &b)| (a + b) / T::lit(2.0))
                .collect();
            Ok(Embedding::new(numerics::normalize_slice(&mean)?)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::TokenTableBuilder;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn e(v: &[f64]) -> Embedding<f64> {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn corpus(entries: &[(&str, Vec<f64>)]) -> ShotCorpus<f64> {
        ShotCorpus::new(
            entries
                .iter()
                .map(|(id, v)| (id.to_string(), e(v)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn score_extremes() {
        let q = e(&[0.6, 0.8]);
        assert!((score(&q, &q).unwrap() - 1.0).abs() < 1e-15);
        assert!(score(&q, &e(&[-0.8, 0.6])).unwrap().abs() < 1e-15);
    }

    #[test]
    fn score_matches_scalar_oracle() {
        let mut rng = RngStream::new(4);
        let a = rng.normal_vec(9, 1.0);
        let b = rng.normal_vec(9, 1.0);
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for i in 0..9 {
            ab += a[i] * b[i];
            aa += a[i] * a[i];
            bb += b[i] * b[i];
        }
        assert!((score(&e(&a), &e(&b)).unwrap() - ab / (aa.sqrt() * bb.sqrt())).abs() < 1e-14);
    }

    #[test]
    fn single_shot_ranks_first() {
        let r = rank_corpus("q", &e(&[1.0, 0.0]), &corpus(&[("s", vec![0.0, 1.0])])).unwrap();
        assert_eq!(r.ranking.len(), 1);
        assert_eq!(r.ranking[0].shot_id, "s");
    }

    #[test]
    fn ties_break_by_id() {
        let c = corpus(&[
            ("b", vec![1.0, 1.0]),
            ("a", vec![1.0, -1.0]),
            ("c", vec![2.0, 0.0]),
        ]);
        let r = rank_corpus("q", &e(&[1.0, 0.0]), &c).unwrap();
        let ids: Vec<&str> = r.ranking.iter().map(|s| s.shot_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn empty_corpus_and_duplicates_are_errors() {
        assert!(matches!(
            rank_corpus("q", &e(&[1.0]), &ShotCorpus::new(vec![]).unwrap()),
            Err(RetrievalError::EmptyCorpus)
        ));
        assert!(matches!(
            ShotCorpus::new(vec![("x".into(), e(&[1.0])), ("x".into(), e(&[2.0]))]),
            Err(RetrievalError::DuplicateShot(_))
        ));
    }

    fn encoder() -> ReferenceTextEncoder<f64> {
        let t = TokenTableBuilder::random(
            &["an", "image", "of", "a", "dog"],
            4,
            8,
            0.5,
            0.1,
            &mut RngStream::new(1),
        )
        .build()
        .unwrap();
        ReferenceTextEncoder::new(t, 2)
    }

    #[test]
    fn baselines_follow_their_definitions() {
        let enc = encoder();
        let lang = baseline_embedding::<f64>(BaselineKind::Language, "dog", &[], &enc).unwrap();
        assert_eq!(lang, enc.encode_text("an image of a dog").unwrap());

        let shot = e(&numerics::normalize_slice(&[0.2, -0.4, 0.1, 0.9]).unwrap());
        let vis = baseline_embedding(BaselineKind::Visual, "dog", &[shot.clone()], &enc).unwrap();
        for (a, b) in vis.as_slice().iter().zip(shot.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }

        let both =
            baseline_embedding(BaselineKind::VisionLanguage, "dog", &[shot.clone()], &enc).unwrap();
        let mut mean = [0.0; 4];
        for k in 0..4 {
            mean[k] = 0.5 * (lang.as_slice()[k] + shot.as_slice()[k]);
        }
        let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        for k in 0..4 {
            assert!((both.as_slice()[k] - mean[k] / n).abs() < 1e-14);
        }
        assert!(matches!(
            baseline_embedding::<f64>(BaselineKind::Visual, "dog", &[], &enc),
            Err(RetrievalError::EmptyInstance(_))
        ));
    }

    proptest! {
        #[test]
        fn ranking_ignores_corpus_order_and_scale(seed in 0u64..1000, s in 0.01f64..100.0) {
            let mut rng = RngStream::new(seed);
            let q = e(&rng.normal_vec(5, 1.0));
            let entries: Vec<(String, Vec<f64>)> = (0..12).map(|i| (format!("s{i:02}"), rng.normal_vec(5, 1.0))).collect();
            let mut shuffled = entries.clone();
            rng.shuffle(&mut shuffled);
            let scaled: Vec<(String, Embedding<f64>)> = shuffled
                .iter()
                .map(|(id, v)| (id.clone(), e(&v.iter().map(|x| x * s).collect::<Vec<_>>())))
                .collect();
            let a = rank_corpus("q", &q, &ShotCorpus::new(entries.into_iter().map(|(i, v)| (i, e(&v))).collect()).unwrap()).unwrap();
            let b = rank_corpus("q", &q, &ShotCorpus::new(scaled).unwrap()).unwrap();
            let ids_a: Vec<&String> = a.ranking.iter().map(|r| &r.shot_id).collect();
            let ids_b: Vec<&String> = b.ranking.iter().map(|r| &r.shot_id).collect();
            prop_assert_eq!(ids_a, ids_b);
            prop_assert!(a.ranking.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }
}
