//! Deterministic embedding-space worlds with known ground truth.
//!
//! Visual content lives in the leading `dim - text_dim` coordinates; the
//! trailing `text_dim` coordinates hold text-only content (function words,
//! chatter, positions). Token rows are planted through the inverse of the
//! encoder's projection so that encoded text lands exactly where the world
//! needs it: instance names point at their instance, category words at their
//! prototype, and everything else carries no visual signal.

mod report;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use report::{world_report, Ratio, WorldReport};

use crate::encoders::{
    sha256_hex, shot_embedding, EmbeddingStore, EncoderError, ReferenceTextEncoder, TokenTable,
    TokenTableBuilder, DEFAULT_TEMPLATES, GENERIC_PROMPT, OOV_ID, PLACEHOLDER_ID, START_ID,
};
use crate::io::{self, IoError};
use crate::mining::{
    Shot, TranscriptedVideo, Word, MAX_NAME_WORDS, POSSESSIVE_PATTERNS, THETA_EXP, THETA_VIS,
};
use crate::numerics::{dot, Embedding, RngStream, Scalar};
use crate::personalization::{category_prompt, COCO_CATEGORIES};
use crate::retrieval::{CorpusShot, EvalManifest, QueryKind, QuerySpec};

/// Generation attempts before a spec is declared infeasible.
const MAX_ATTEMPTS: u64 = 32;
/// Clearance kept between planted cosines and the mining thresholds.
const THRESHOLD_SLACK: f64 = 0.02;
const SHOT_SECONDS: f64 = 5.0;
const WORD_SECONDS: f64 = 0.4;
const SENTENCE_OFFSET: f64 = 0.5;
/// Output-space norm of function words, positions and `<sot>`.
const FUNCTION_NORM: f64 = 1.0;
const POSITION_NORM: f64 = 0.3;
/// Output-space norm of chatter words; large so that trailing chatter pulls
/// an over-long name below the visual threshold.
const CHATTER_NORM: f64 = 10.0;
/// Visual weight of a two-word instance name.
const NAME_NORM: f64 = 2.0;
const NAME_TEXT_NOISE: f64 = 0.2;

const FUNCTION_WORDS: [&str; 19] = [
    "an", "image", "of", "a", "can", "be", "seen", "in", "this", "photo", "there", "is", "these",
    "are", "my", "our", "his", "her", "their",
];
const CHATTER_WORDS: [&str; 24] = [
    "every", "morning", "right", "here", "today", "and", "so", "we", "went", "outside", "then",
    "really", "love", "time", "to", "talk", "about", "favorite", "part", "the", "first", "day",
    "back", "at",
];
const TAILS: [[&str; 2]; 5] = [
    ["every", "morning"],
    ["right", "here"],
    ["today", "and"],
    ["so", "really"],
    ["then", "we"],
];
const DECOY_PHRASES: [[&str; 4]; 3] = [
    ["time", "to", "talk", "about"],
    ["favorite", "part", "of", "the"],
    ["first", "day", "back", "at"],
];
const CHATTER: [&str; 5] = ["so", "we", "went", "outside", "today"];
const SYLLABLES: [&str; 12] = [
    "ba", "ko", "ri", "mu", "te", "lo", "vi", "sa", "ne", "du", "pa", "gi",
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("planted geometry cannot meet the spec: {0}")]
    InfeasibleMargin(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    /// Embedding width.
    pub dim: usize,
    /// Trailing coordinates reserved for text-only content.
    pub text_dim: usize,
    /// Maximum token sequence length of the emitted table.
    pub max_len: usize,
    /// Seed of the reference encoder's projection.
    pub encoder_seed: u64,
    pub categories: usize,
    /// Personal instances per category.
    pub instances_per_category: usize,
    /// Retrieval-corpus shots per personal instance.
    pub shots_per_instance: usize,
    /// Instance shots in the video where an instance is named.
    pub train_shots: usize,
    /// Non-instance shots in each naming video.
    pub background_shots: usize,
    pub distractor_shots: usize,
    /// Instances per category in the corpus mined for meta-personalization.
    pub meta_instances_per_category: usize,
    pub frames_per_shot: usize,
    /// Attribute directions per category.
    pub attribute_dim: usize,
    pub sigma_attr: f64,
    pub sigma_ctx: f64,
    pub sigma_frame: f64,
    /// Cosine between a generic category prompt and its prototype.
    pub anchor_cosine: f64,
    /// Minimum gap between the own-category and best other-category cosine,
    /// for instance shots and category prompts alike.
    pub margin: f64,
    /// Possessive mentions of non-visual phrases.
    pub decoys: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            dim: 64,
            text_dim: 16,
            max_len: 16,
            encoder_seed: 0,
            categories: 3,
            instances_per_category: 4,
            shots_per_instance: 6,
            train_shots: 3,
            background_shots: 2,
            distractor_shots: 60,
            meta_instances_per_category: 32,
            frames_per_shot: 3,
            attribute_dim: 8,
            sigma_attr: 0.3,
            sigma_ctx: 0.2,
            sigma_frame: 0.1,
            anchor_cosine: 0.7,
            margin: 0.25,
            decoys: 6,
        }
    }
}

fn single_word_categories() -> Vec<&'static str> {
    COCO_CATEGORIES
        .iter()
        .copied()
        .filter(|c| !c.contains(' '))
        .collect()
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        for (name, v) in [
            ("categories", self.categories),
            ("instances_per_category", self.instances_per_category),
            ("shots_per_instance", self.shots_per_instance),
            ("train_shots", self.train_shots),
            ("background_shots", self.background_shots),
            ("frames_per_shot", self.frames_per_shot),
            ("attribute_dim", self.attribute_dim),
            ("text_dim", self.text_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.text_dim >= self.dim || self.dim - self.text_dim <= self.categories {
            return bad(format!(
                "dim {} leaves no room for {} prototypes beside {} text coordinates",
                self.dim, self.categories, self.text_dim
            ));
        }
        if self.categories > single_word_categories().len() {
            return bad(format!(
                "at most {} categories",
                single_word_categories().len()
            ));
        }
        for (name, v) in [
            ("sigma_attr", self.sigma_attr),
            ("sigma_ctx", self.sigma_ctx),
            ("sigma_frame", self.sigma_frame),
            ("margin", self.margin),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.anchor_cosine > 0.0 && self.anchor_cosine < 1.0) {
            return bad("anchor_cosine must lie in (0, 1)".into());
        }
        // `<sot>` plus the longest template with one instance token.
        let longest = DEFAULT_TEMPLATES
            .iter()
            .map(|t| t.split_whitespace().count())
            .chain([
                category_prompt("x").split_whitespace().count(),
                MAX_NAME_WORDS,
            ])
            .max()
            .unwrap_or(0)
            + 2;
        if self.max_len < longest {
            return bad(format!("max_len must be at least {longest}"));
        }
        let videos =
            self.categories * (self.instances_per_category + self.meta_instances_per_category);
        if self.decoys > videos {
            return bad(format!("{} decoys for {videos} videos", self.decoys));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// A user's instance: trained at test time and queried.
    Personal,
    /// A mined-corpus instance used for meta-personalization.
    Meta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedInstance {
    /// Id the miner assigns: `{video_id}#{match_index}`.
    pub instance_id: String,
    pub name: String,
    pub category: String,
    pub role: Role,
    pub video_id: String,
    /// Instance shots of the naming video.
    pub train_shots: Vec<String>,
    /// Instance shots of the retrieval corpus (personal instances only).
    pub eval_shots: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedDecoy {
    pub candidate_id: String,
    pub video_id: String,
    pub phrase: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldTruth {
    pub seed: u64,
    pub categories: Vec<String>,
    /// Unit category prototypes, one per category.
    pub prototypes: Vec<Vec<f64>>,
    pub instances: Vec<PlantedInstance>,
    /// Unit instance vectors, aligned with `instances`.
    pub instance_vectors: Vec<Vec<f64>>,
    pub decoys: Vec<PlantedDecoy>,
    /// Owning instance of every shot; `None` for non-instance shots.
    pub shot_labels: BTreeMap<String, Option<String>>,
}

impl WorldTruth {
    pub fn personal(&self) -> impl Iterator<Item = &PlantedInstance> {
        self.instances.iter().filter(|i| i.role == Role::Personal)
    }
}

/// A generated world: every input the pipeline consumes, plus the truth.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub meta_videos: Vec<TranscriptedVideo>,
    pub personal_videos: Vec<TranscriptedVideo>,
    pub store: EmbeddingStore,
    pub table: TokenTable<f64>,
    pub manifest: EvalManifest,
    pub queries: Vec<QuerySpec>,
    pub truth: WorldTruth,
}

impl World {
    pub fn encoder<T: Scalar>(&self) -> Result<ReferenceTextEncoder<T>, SynthError> {
        let table =
            TokenTable::<T>::from_bytes(&self.table.to_bytes().map_err(EncoderError::from)?)?;
        Ok(ReferenceTextEncoder::new(table, self.spec.encoder_seed))
    }

    pub fn videos(&self) -> impl Iterator<Item = &TranscriptedVideo> {
        self.meta_videos.iter().chain(&self.personal_videos)
    }

    /// Writes every world file into `dir` (created if missing).
    pub fn write(&self, dir: &Path) -> Result<WorldFiles, SynthError> {
        std::fs::create_dir_all(dir).map_err(|e| IoError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let files = WorldFiles::in_dir(dir);
        io::write_jsonl(&files.meta_transcripts, &self.meta_videos)?;
        io::write_jsonl(&files.personal_transcripts, &self.personal_videos)?;
        self.store.save(&files.store)?;
        self.table.save(&files.tokens)?;
        io::write_json(&files.manifest, &self.manifest)?;
        io::write_jsonl(&files.queries, &self.queries)?;
        io::write_json(&files.truth, &self.truth)?;
        io::write_json(&files.spec, &self.spec)?;
        Ok(files)
    }

    /// SHA-256 of the store bytes.
    pub fn store_hash(&self) -> String {
        sha256_hex(&self.store.to_bytes().expect("store serializes"))
    }
}

/// Paths of the files a world is written to.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorldFiles {
    pub meta_transcripts: PathBuf,
    pub personal_transcripts: PathBuf,
    pub store: PathBuf,
    pub tokens: PathBuf,
    pub manifest: PathBuf,
    pub queries: PathBuf,
    pub truth: PathBuf,
    pub spec: PathBuf,
}

impl WorldFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            meta_transcripts: dir.join("meta_transcripts.jsonl"),
            personal_transcripts: dir.join("personal_transcripts.jsonl"),
            store: dir.join("store.mpes"),
            tokens: dir.join("tokens.mptt"),
            manifest: dir.join("manifest.json"),
            queries: dir.join("queries.jsonl"),
            truth: dir.join("truth.json"),
            spec: dir.join("world.json"),
        }
    }
}

/// Generates the world for `spec`. Draws are redone on a fresh substream
/// until the planted geometry clears every threshold and margin, up to a
/// fixed number of attempts, so the result is a pure function of the spec.
pub fn generate_world(spec: &WorldSpec) -> Result<World, SynthError> {
    spec.validate()?;
    let root = RngStream::new(spec.seed);
    let mut last = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        let world = build(spec, &mut root.fork(attempt))?;
        match verify(&world) {
            Ok(()) => {
                if attempt > 0 {
                    tracing::debug!(attempt, "world geometry accepted after redraw");
                }
                return Ok(world);
            }
            Err(reason) => last = reason,
        }
    }
    Err(SynthError::InfeasibleMargin(last))
}

struct Geometry {
    d: usize,
    dv: usize,
}

impl Geometry {
    fn visual(&self, rng: &mut RngStream) -> Vec<f64> {
        let mut v = rng.normal_vec(self.dv, 1.0);
        v.resize(self.d, 0.0);
        unit(v)
    }

    fn textual(&self, rng: &mut RngStream, norm: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dv];
        v.extend(rng.normal_vec(self.d - self.dv, 1.0));
        scale(&unit(v), norm)
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn scale(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Removes the components along each (unit) vector of `basis`.
fn orthogonalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Vec<f64> {
    for b in basis {
        let p = dot(&v, b);
        for (x, y) in v.iter_mut().zip(b) {
            *x -= p * y;
        }
    }
    v
}

/// Shot frames around a centre direction: a shared context offset plus
/// per-frame noise, each frame normalized.
fn shot_frames(
    g: &Geometry,
    centre: &[f64],
    spec: &WorldSpec,
    rng: &mut RngStream,
) -> Vec<Vec<f64>> {
    let ctx = scale(&g.visual(rng), spec.sigma_ctx);
    let base = add(centre, &ctx);
    (0..spec.frames_per_shot)
        .map(|_| unit(add(&base, &scale(&g.visual(rng), spec.sigma_frame))))
        .collect()
}

struct Mention {
    shot: usize,
    words: Vec<String>,
}

struct VideoPlan {
    video_id: String,
    /// Centre direction per shot and the instance it belongs to, if any.
    shots: Vec<(Vec<f64>, bool)>,
    mentions: Vec<Mention>,
    chatter_shot: Option<usize>,
}

fn pseudo_words(n: usize, taken: &HashSet<String>, rng: &mut RngStream) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    let mut seen = taken.clone();
    while out.len() < n {
        let w: String = (0..3)
            .map(|_| SYLLABLES[rng.index(SYLLABLES.len())])
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn build(spec: &WorldSpec, rng: &mut RngStream) -> Result<World, SynthError> {
    let g = Geometry {
        d: spec.dim,
        dv: spec.dim - spec.text_dim,
    };
    let single = single_word_categories();
    let mut picks = rng.sample_indices(single.len(), spec.categories);
    picks.sort_unstable();
    let categories: Vec<String> = picks.iter().map(|&i| single[i].to_string()).collect();

    let mut prototypes: Vec<Vec<f64>> = Vec::new();
    for _ in 0..spec.categories {
        let v = orthogonalize(g.visual(rng), &prototypes);
        prototypes.push(unit(v));
    }
    let attributes: Vec<Vec<Vec<f64>>> = (0..spec.categories)
        .map(|_| {
            (0..spec.attribute_dim)
                .map(|_| unit(orthogonalize(g.visual(rng), &prototypes)))
                .collect()
        })
        .collect();
    let object = |l: usize, rng: &mut RngStream| -> Vec<f64> {
        let mut v = prototypes[l].clone();
        let s = spec.sigma_attr / (spec.attribute_dim as f64).sqrt();
        for a in &attributes[l] {
            let c = rng.normal(s);
            for (x, y) in v.iter_mut().zip(a) {
                *x += c * y;
            }
        }
        unit(v)
    };

    // Instances: personal first, then meta, category-major.
    struct Inst {
        category: usize,
        role: Role,
        vector: Vec<f64>,
        video_id: String,
    }
    let mut insts = Vec::new();
    for (role, per, prefix) in [
        (Role::Personal, spec.instances_per_category, "p"),
        (Role::Meta, spec.meta_instances_per_category, "m"),
    ] {
        let mut k = 0;
        for l in 0..spec.categories {
            for _ in 0..per {
                insts.push(Inst {
                    category: l,
                    role,
                    vector: object(l, rng),
                    video_id: format!("{prefix}{k:03}"),
                });
                k += 1;
            }
        }
    }

    let mut vocab: Vec<String> = FUNCTION_WORDS
        .iter()
        .chain(&CHATTER_WORDS)
        .map(|s| s.to_string())
        .collect();
    vocab.extend(categories.iter().cloned());
    let mut taken: HashSet<String> = vocab.iter().cloned().collect();
    taken.extend(["fender".to_string(), "guitar".to_string()]);
    let mut names: Vec<[String; 2]> = vec![["fender".into(), "guitar".into()]];
    let fresh = pseudo_words(2 * insts.len().saturating_sub(1), &taken, rng);
    names.extend(fresh.chunks(2).map(|c| [c[0].clone(), c[1].clone()]));
    for n in &names {
        vocab.extend(n.iter().cloned());
    }

    // Per-video layout: one background shot, the instance shots, then the
    // remaining background shots. The name is mentioned in the first instance
    // shot; a decoy, if any, in the last background shot.
    let decoy_videos: HashSet<usize> = (0..spec.decoys)
        .map(|k| k * insts.len() / spec.decoys.max(1))
        .collect();
    let mut plans = Vec::new();
    for (i, inst) in insts.iter().enumerate() {
        let mut shots = vec![(g.visual(rng), false)];
        shots.extend((0..spec.train_shots).map(|_| (inst.vector.clone(), true)));
        shots.extend((1..spec.background_shots).map(|_| (g.visual(rng), false)));
        let pattern = POSSESSIVE_PATTERNS[i % POSSESSIVE_PATTERNS.len()];
        let tail = TAILS[i % TAILS.len()];
        let mut words: Vec<String> = pattern.split_whitespace().map(str::to_string).collect();
        words.extend(names[i].iter().cloned());
        words.extend(tail.iter().map(|s| s.to_string()));
        let mut mentions = vec![Mention { shot: 1, words }];
        if decoy_videos.contains(&i) {
            let phrase = DECOY_PHRASES[i % DECOY_PHRASES.len()];
            let mut words: Vec<String> = POSSESSIVE_PATTERNS[(i + 1) % POSSESSIVE_PATTERNS.len()]
                .split_whitespace()
                .map(str::to_string)
                .collect();
            words.extend(phrase.iter().map(|s| s.to_string()));
            let shot = if spec.background_shots > 1 {
                shots.len() - 1
            } else {
                0
            };
            mentions.push(Mention { shot, words });
        }
        let used: Vec<usize> = mentions.iter().map(|m| m.shot).collect();
        let chatter_shot = (0..shots.len()).find(|s| !used.contains(s));
        mentions.sort_by_key(|m| m.shot);
        plans.push(VideoPlan {
            video_id: inst.video_id.clone(),
            shots,
            mentions,
            chatter_shot,
        });
    }

    // Token table, planted through the inverse projection.
    let p = ReferenceTextEncoder::<f64>::seeded_projection(g.d, spec.encoder_seed);
    let lu = DMatrix::from_row_slice(g.d, g.d, p.as_slice()).lu();
    let pull = |t: &[f64]| -> Result<Vec<f64>, SynthError> {
        lu.solve(&DVector::from_column_slice(t))
            .map(|v| v.as_slice().to_vec())
            .ok_or_else(|| SynthError::InfeasibleMargin("encoder projection is singular".into()))
    };
    let mut builder = TokenTableBuilder::<f64>::random(&vocab, g.d, spec.max_len, 1.0, 1.0, rng);
    let text =
        |word: &str, builder: &mut TokenTableBuilder<f64>, t: Vec<f64>| -> Result<(), SynthError> {
            let id = match word {
                "<oov>" => OOV_ID,
                "<*>" => PLACEHOLDER_ID,
                "<sot>" => START_ID,
                w => builder.id(w).expect("planted word is in the vocabulary"),
            };
            builder.set_row(id, pull(&t)?);
            Ok(())
        };
    let mut positions = Vec::new();
    for pos in 0..spec.max_len {
        let t = g.textual(rng, POSITION_NORM);
        builder.set_positional(pos, pull(&t)?);
        positions.push(t);
    }
    let sot = g.textual(rng, FUNCTION_NORM);
    text("<sot>", &mut builder, sot.clone())?;
    for w in ["<oov>", "<*>"] {
        text(w, &mut builder, g.textual(rng, FUNCTION_NORM))?;
    }
    let mut function_rows = BTreeMap::new();
    for w in FUNCTION_WORDS {
        let t = g.textual(rng, FUNCTION_NORM);
        function_rows.insert(w, t.clone());
        text(w, &mut builder, t)?;
    }
    for w in CHATTER_WORDS {
        text(w, &mut builder, g.textual(rng, CHATTER_NORM))?;
    }
    for (inst, name) in insts.iter().zip(&names) {
        for w in name {
            let t = add(
                &scale(&inst.vector, NAME_NORM / 2.0),
                &g.textual(rng, NAME_TEXT_NOISE),
            );
            text(w, &mut builder, t)?;
        }
    }
    // Category word weight solves cos(prompt, c_l) = anchor_cosine, given the
    // text-only remainder of "an image of a {l}".
    for (l, cat) in categories.iter().enumerate() {
        let prompt = category_prompt(cat);
        let mut rest = add(&sot, &positions[0]);
        for (k, w) in prompt.split_whitespace().enumerate() {
            if w != cat {
                rest = add(&rest, &function_rows[w]);
            }
            rest = add(&rest, &positions[k + 1]);
        }
        let r = dot(&rest, &rest).sqrt();
        let a = spec.anchor_cosine;
        let beta = r * a / (1.0 - a * a).sqrt();
        text(cat, &mut builder, scale(&prototypes[l], beta))?;
    }
    let table = builder.build()?;

    // Videos and frames.
    let mut store = EmbeddingStore::new(g.d);
    let mut insert_frames =
        |shot_id: &str, frames: Vec<Vec<f64>>| -> Result<Vec<String>, SynthError> {
            frames
                .into_iter()
                .enumerate()
                .map(|(j, f)| {
                    let id = format!("{shot_id}/f{j}");
                    store.insert(id.clone(), f.into_iter().map(|x| x as f32).collect())?;
                    Ok(id)
                })
                .collect()
        };
    let mut meta_videos = Vec::new();
    let mut personal_videos = Vec::new();
    let mut planted = Vec::new();
    let mut decoys = Vec::new();
    let mut shot_labels = BTreeMap::new();
    for (inst, plan) in insts.iter().zip(&plans) {
        let mut shots = Vec::new();
        for (k, (centre, _)) in plan.shots.iter().enumerate() {
            let id = format!("{}/s{k}", plan.video_id);
            let frames = insert_frames(&id, shot_frames(&g, centre, spec, rng))?;
            shots.push(Shot {
                id,
                t0: k as f64 * SHOT_SECONDS,
                t1: (k + 1) as f64 * SHOT_SECONDS,
                frames,
            });
        }
        let mut sentences: Vec<(usize, Vec<String>)> = plan
            .mentions
            .iter()
            .map(|m| (m.shot, m.words.clone()))
            .collect();
        if let Some(s) = plan.chatter_shot {
            sentences.push((s, CHATTER.iter().map(|w| w.to_string()).collect()));
        }
        sentences.sort_by_key(|(s, _)| *s);
        let mut words = Vec::new();
        for (s, sentence) in &sentences {
            let start = *s as f64 * SHOT_SECONDS + SENTENCE_OFFSET;
            for (k, w) in sentence.iter().enumerate() {
                let t0 = start + k as f64 * WORD_SECONDS;
                words.push(Word {
                    t0,
                    t1: t0 + WORD_SECONDS,
                    w: w.clone(),
                });
            }
        }
        let train: Vec<String> = plan
            .shots
            .iter()
            .zip(&shots)
            .filter(|((_, own), _)| *own)
            .map(|(_, s)| s.id.clone())
            .collect();
        let mut instance_id = String::new();
        for (match_index, m) in plan.mentions.iter().enumerate() {
            let id = format!("{}#{match_index}", plan.video_id);
            if m.shot == 1 {
                instance_id = id;
            } else {
                decoys.push(PlantedDecoy {
                    candidate_id: id,
                    video_id: plan.video_id.clone(),
                    phrase: m.words[3..].join(" "),
                });
            }
        }
        for ((_, own), s) in plan.shots.iter().zip(&shots) {
            shot_labels.insert(s.id.clone(), own.then(|| instance_id.clone()));
        }
        let video = TranscriptedVideo {
            video_id: plan.video_id.clone(),
            words,
            shots,
        };
        match inst.role {
            Role::Personal => personal_videos.push(video),
            Role::Meta => meta_videos.push(video),
        }
        planted.push(PlantedInstance {
            instance_id,
            name: names[planted.len()].join(" "),
            category: categories[inst.category].clone(),
            role: inst.role,
            video_id: plan.video_id.clone(),
            train_shots: train,
            eval_shots: Vec::new(),
        });
    }

    // Retrieval corpus: instance shots of personal instances in new contexts,
    // same-category look-alikes and unrelated background, shuffled before ids
    // are assigned so that ids carry no label information.
    let mut corpus_items: Vec<(Vec<f64>, Option<usize>)> = Vec::new();
    for (i, inst) in insts
        .iter()
        .enumerate()
        .filter(|(_, x)| x.role == Role::Personal)
    {
        corpus_items.extend((0..spec.shots_per_instance).map(|_| (inst.vector.clone(), Some(i))));
    }
    for k in 0..spec.distractor_shots {
        let centre = if k % 2 == 0 {
            object(k / 2 % spec.categories, rng)
        } else {
            g.visual(rng)
        };
        corpus_items.push((centre, None));
    }
    rng.shuffle(&mut corpus_items);
    let mut corpus = Vec::new();
    for (k, (centre, owner)) in corpus_items.into_iter().enumerate() {
        let id = format!("corpus/s{k:03}");
        let frames = insert_frames(&id, shot_frames(&g, &centre, spec, rng))?;
        if let Some(i) = owner {
            planted[i].eval_shots.push(id.clone());
        }
        shot_labels.insert(id.clone(), owner.map(|i| planted[i].instance_id.clone()));
        corpus.push(CorpusShot { id, frames });
    }

    let queries = planted
        .iter()
        .filter(|p| p.role == Role::Personal)
        .map(|p| QuerySpec {
            query_id: format!("generic/{}", p.instance_id),
            instance_id: p.instance_id.clone(),
            kind: QueryKind::Generic,
            prompt: GENERIC_PROMPT.to_string(),
            relevant_shots: p.eval_shots.clone(),
        })
        .collect();
    let truth = WorldTruth {
        seed: spec.seed,
        categories: categories.clone(),
        prototypes,
        instance_vectors: insts.iter().map(|i| i.vector.clone()).collect(),
        instances: planted,
        decoys,
        shot_labels,
    };
    Ok(World {
        spec: spec.clone(),
        meta_videos,
        personal_videos,
        store,
        table,
        manifest: EvalManifest {
            categories,
            encoder_seed: spec.encoder_seed,
            corpus,
        },
        queries,
        truth,
    })
}

/// Checks every planted guarantee through the real encoder and store.
fn verify(world: &World) -> Result<(), String> {
    let spec = &world.spec;
    let enc = world.encoder::<f64>().map_err(|e| e.to_string())?;
    let embed = |frames: &[String]| -> Result<Vec<f64>, String> {
        shot_embedding::<f64, _>(frames, &world.store)
            .map(Embedding::into_vec)
            .map_err(|e| e.to_string())
    };
    let encode = |words: &[String]| -> Result<Vec<f64>, String> {
        enc.encode_text(&words.join(" "))
            .map(Embedding::into_vec)
            .map_err(|e| e.to_string())
    };
    let truth = &world.truth;
    let protos = &truth.prototypes;
    let gap = |v: &[f64], own: usize| -> f64 {
        let other = (0..protos.len())
            .filter(|&l| l != own)
            .map(|l| cos(v, &protos[l]))
            .fold(f64::NEG_INFINITY, f64::max);
        cos(v, &protos[own]) - if other.is_finite() { other } else { 0.0 }
    };

    for (l, cat) in truth.categories.iter().enumerate() {
        let prompt: Vec<String> = category_prompt(cat)
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let g = gap(&encode(&prompt)?, l);
        if g < spec.margin {
            return Err(format!(
                "prompt for {cat} separates its prototype by {g:.3} < {}",
                spec.margin
            ));
        }
    }

    let cat_index = |c: &str| {
        truth
            .categories
            .iter()
            .position(|x| x == c)
            .expect("known category")
    };
    let videos: BTreeMap<&str, &TranscriptedVideo> =
        world.videos().map(|v| (v.video_id.as_str(), v)).collect();
    for inst in &truth.instances {
        let video = videos[inst.video_id.as_str()];
        let shots: Vec<Vec<f64>> = video
            .shots
            .iter()
            .map(|s| embed(&s.frames))
            .collect::<Result<_, _>>()?;
        let own: Vec<usize> = video
            .shots
            .iter()
            .enumerate()
            .filter(|(_, s)| inst.train_shots.contains(&s.id))
            .map(|(k, _)| k)
            .collect();
        let l = cat_index(&inst.category);
        for &k in &own {
            let g = gap(&shots[k], l);
            if g < spec.margin {
                return Err(format!(
                    "shot {} separates its category by {g:.3}",
                    video.shots[k].id
                ));
            }
        }
        // Expansion: instance shots stay above, other shots below, the threshold.
        for &a in &own {
            for (b, s) in shots.iter().enumerate() {
                let c = cos(&shots[a], s);
                let ok = if own.contains(&b) {
                    c > THETA_EXP + THRESHOLD_SLACK
                } else {
                    c < THETA_EXP - THRESHOLD_SLACK
                };
                if !ok {
                    return Err(format!(
                        "shots {} and {} have cosine {c:.3}",
                        video.shots[a].id, video.shots[b].id
                    ));
                }
            }
        }
        // Mentions: the planted name is the longest visual prefix and its best
        // window shot is an instance shot; decoys stay non-visual.
        let mut mention_words: Vec<(f64, Vec<String>)> = Vec::new();
        let mut current: Option<(f64, Vec<String>)> = None;
        for w in &video.words {
            if POSSESSIVE_PATTERNS
                .iter()
                .any(|p| p.split_whitespace().next() == Some(w.w.as_str()))
            {
                if let Some(m) = current.take() {
                    mention_words.push(m);
                }
                current = Some((w.t0, Vec::new()));
            }
            if let Some((_, ws)) = current.as_mut() {
                ws.push(w.w.clone());
            }
        }
        mention_words.extend(current);
        for (t, words) in mention_words.iter().filter(|(_, w)| w.len() > 3) {
            let candidate = &words[3..(3 + MAX_NAME_WORDS).min(words.len())];
            let s = video
                .shot_at(*t + 3.0 * WORD_SECONDS)
                .ok_or("mention outside every shot")?;
            let window: Vec<usize> = (s.saturating_sub(1)..=(s + 1).min(shots.len() - 1)).collect();
            let name: Vec<&str> = inst.name.split_whitespace().collect();
            let is_name = candidate.len() >= name.len() && candidate[..name.len()] == name[..];
            for len in 1..=candidate.len() {
                let text = encode(&candidate[..len])?;
                let sims: Vec<f64> = window.iter().map(|&k| cos(&text, &shots[k])).collect();
                let best = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let visual = is_name && len <= name.len();
                if visual && len == name.len() {
                    let arg = window[sims
                        .iter()
                        .position(|&x| x == best)
                        .expect("non-empty window")];
                    if !own.contains(&arg) {
                        return Err(format!("name {:?} prefers non-instance shot", inst.name));
                    }
                }
                let ok = if visual && len == name.len() {
                    best > THETA_VIS + THRESHOLD_SLACK
                } else if visual {
                    true
                } else {
                    best < THETA_VIS - THRESHOLD_SLACK
                };
                if !ok {
                    return Err(format!(
                        "prefix {:?} has cosine {best:.3}",
                        candidate[..len].join(" ")
                    ));
                }
            }
        }
    }

    // Corpus shots: category margin and separability of each personal
    // instance's shots from everything else.
    let corpus: Vec<(String, Vec<f64>)> = world
        .manifest
        .corpus
        .iter()
        .map(|s| Ok((s.id.clone(), embed(&s.frames)?)))
        .collect::<Result<_, String>>()?;
    for (inst, v) in truth.instances.iter().zip(&truth.instance_vectors) {
        if inst.role != Role::Personal {
            continue;
        }
        let l = cat_index(&inst.category);
        let mut worst_own = f64::INFINITY;
        let mut best_other = f64::NEG_INFINITY;
        for (id, e) in &corpus {
            let c = cos(e, v);
            if inst.eval_shots.contains(id) {
                worst_own = worst_own.min(c);
                let g = gap(e, l);
                if g < spec.margin {
                    return Err(format!("corpus shot {id} separates its category by {g:.3}"));
                }
            } else {
                best_other = best_other.max(c);
            }
        }
        if worst_own <= best_other {
            return Err(format!(
                "instance {} is not separable in the corpus",
                inst.instance_id
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
