//! One function per subcommand. Each resolves its effective configuration,
//! reads and validates inputs, writes outputs atomically and records a run
//! manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use metaper::encoders::{EmbeddingStore, ReferenceTextEncoder, TokenTable};
use metaper::experiment::{
    categorize, compare_methods, meta_stage, negative_pool, prepare, test_time_stage,
    train_instances, Method,
};
use metaper::io;
use metaper::mining::{mine_corpus, InstanceRecord, TranscriptedVideo};
use metaper::personalization::{run_gradcheck, Ablation, PersonalizedModel, COCO_CATEGORIES};
use metaper::retrieval::{
    personalized_query, rank_corpus, BaselineKind, CorpusShot, EvalManifest, QuerySpec,
    SeedSummary, ShotCorpus,
};
use metaper::synthworld::{generate_world, world_report, WorldFiles, WorldSpec, WorldTruth};
use metaper::{FeatureBank, Model, TextEncoder};
use serde::Serialize;

use crate::args::{
    CategoryArgs, EvaluateArgs, GradcheckArgs, MetaArgs, MineArgs, PersonalizeArgs, QueryArgs,
    StoreArgs, SynthArgs,
};
use crate::config::RunConfig;
use crate::error::{CliError, EXIT_FAILURE};
use crate::manifest::{default_manifest_path, ManifestBuilder};

/// Settings common to every command.
pub struct Context {
    pub config: RunConfig,
    pub threads: usize,
    pub run_manifest: Option<PathBuf>,
}

impl Context {
    fn manifest(&self, command: &str) -> ManifestBuilder {
        ManifestBuilder::new(command, &self.config, self.threads)
    }

    fn finish(&self, builder: ManifestBuilder, fallback: Option<PathBuf>) -> Result<(), CliError> {
        let m = builder.finish();
        tracing::info!(
            command = %m.command,
            config_hash = %m.config_hash,
            wall_time_s = m.wall_time_s,
            outputs = m.outputs.len(),
            "run complete"
        );
        if let Some(path) = self.run_manifest.clone().or(fallback) {
            m.write(&path)?;
        }
        Ok(())
    }
}

pub fn load_store(path: &Path) -> Result<EmbeddingStore, CliError> {
    if !path.is_file() {
        return Err(CliError::input(
            "STORE_NOT_FOUND",
            format!("{}: no such file", path.display()),
        ));
    }
    Ok(EmbeddingStore::load(path)?)
}

pub fn load_tokens(path: &Path) -> Result<TokenTable<f64>, CliError> {
    if !path.is_file() {
        return Err(CliError::input(
            "TOKENS_NOT_FOUND",
            format!("{}: no such file", path.display()),
        ));
    }
    Ok(TokenTable::load(path)?)
}

pub fn load_model(path: &Path) -> Result<Model, CliError> {
    if !path.is_file() {
        return Err(CliError::input(
            "MODEL_NOT_FOUND",
            format!("{}: no such file", path.display()),
        ));
    }
    Ok(PersonalizedModel::load(path)?)
}

fn dim_mismatch(what: &str, expected: usize, found: usize) -> CliError {
    CliError::input(
        "DIM_MISMATCH",
        format!("{what}: expected dimension {expected}, found {found}"),
    )
}

/// Store, token table and the encoder they imply, with matching widths.
fn load_data(
    store: &Path,
    tokens: &Path,
    encoder_seed: u64,
    manifest: &mut ManifestBuilder,
) -> Result<(EmbeddingStore, TextEncoder), CliError> {
    let s = load_store(store)?;
    let t = load_tokens(tokens)?;
    if s.dim() != t.dim() {
        return Err(dim_mismatch("token table vs store", s.dim(), t.dim()));
    }
    manifest.input(store)?;
    manifest.input(tokens)?;
    Ok((s, ReferenceTextEncoder::new(t, encoder_seed)))
}

fn check_encoder(model: &Model, encoder: &TextEncoder) -> Result<(), CliError> {
    if model.encoder_fingerprint != encoder.fingerprint() {
        return Err(CliError::input(
            "ENCODER_MISMATCH",
            "model was trained against a different token table or encoder seed",
        ));
    }
    if let Some(b) = &model.bank {
        if b.dim() != encoder.dim() {
            return Err(dim_mismatch(
                "model bank vs encoder",
                encoder.dim(),
                b.dim(),
            ));
        }
    }
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: &Path,
    manifest: &mut ManifestBuilder,
) -> Result<Vec<T>, CliError> {
    let out = io::read_jsonl(path)?;
    manifest.input(path)?;
    Ok(out)
}

fn read_videos(
    path: &Path,
    manifest: &mut ManifestBuilder,
) -> Result<Vec<TranscriptedVideo>, CliError> {
    let videos: Vec<TranscriptedVideo> = read_jsonl(path, manifest)?;
    for v in &videos {
        v.validate().map_err(|e| {
            CliError::input("INVALID_TRANSCRIPT", format!("{}: {e}", path.display()))
        })?;
    }
    Ok(videos)
}

fn read_eval_manifest(
    path: &Path,
    manifest: &mut ManifestBuilder,
) -> Result<EvalManifest, CliError> {
    let m = io::read_json(path)?;
    manifest.input(path)?;
    Ok(m)
}

/// Categories and, when given, the evaluation manifest they came from. The
/// manifest's encoder seed applies unless `--encoder-seed` was passed.
fn resolve_categories(
    args: &CategoryArgs,
    store_args: &StoreArgs,
    cfg: &mut RunConfig,
    manifest: &mut ManifestBuilder,
) -> Result<(Vec<String>, Option<EvalManifest>), CliError> {
    if let Some(path) = &args.manifest {
        let m = read_eval_manifest(path, manifest)?;
        if store_args.encoder_seed.is_none() {
            cfg.encoder_seed = m.encoder_seed;
        }
        return Ok((m.categories.clone(), Some(m)));
    }
    let categories = match &args.categories {
        Some(list) => list
            .iter()
            .map(|c| c.trim().to_string())
            .filter(|c| !c.is_empty())
            .collect(),
        None => COCO_CATEGORIES.iter().map(|c| c.to_string()).collect(),
    };
    Ok((categories, None))
}

fn write_jsonl_out<T: Serialize>(
    path: &Path,
    rows: &[T],
    manifest: &mut ManifestBuilder,
) -> Result<(), CliError> {
    io::write_jsonl(path, rows)?;
    manifest.output(path)
}

fn write_json_out<T: Serialize>(
    path: &Path,
    value: &T,
    manifest: &mut ManifestBuilder,
) -> Result<(), CliError> {
    io::write_json(path, value)?;
    manifest.output(path)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn synth(ctx: &Context, args: &SynthArgs) -> Result<(), CliError> {
    let mut m = ctx.manifest("synth");
    let spec: WorldSpec = match &args.spec {
        Some(path) => {
            let s = io::read_json(path)?;
            m.input(path)?;
            s
        }
        None => WorldSpec::default(),
    };
    let world = generate_world(&spec)?;
    let files = world.write(&args.out_dir)?;
    for path in [
        &files.meta_transcripts,
        &files.personal_transcripts,
        &files.store,
        &files.tokens,
        &files.manifest,
        &files.queries,
        &files.truth,
        &files.spec,
    ] {
        m.output(path)?;
    }
    m.extra("world", &spec);
    println!(
        "world seed {}: {} categories, {} personal and {} meta videos, {} corpus shots, {} queries -> {}",
        spec.seed,
        world.truth.categories.len(),
        world.personal_videos.len(),
        world.meta_videos.len(),
        world.manifest.corpus.len(),
        world.queries.len(),
        args.out_dir.display()
    );
    ctx.finish(m, Some(default_manifest_path(&args.out_dir, true)))
}

pub fn mine(ctx: &Context, args: &MineArgs) -> Result<(), CliError> {
    let mut cfg = ctx.config.clone();
    args.apply(&mut cfg);
    let mut m = ctx.manifest("mine");
    let (categories, _) = resolve_categories(&args.categories, &args.data, &mut cfg, &mut m)?;
    cfg.validate()?;
    let (store, encoder) = load_data(
        &args.data.store,
        &args.data.tokens,
        cfg.encoder_seed,
        &mut m,
    )?;
    let videos = read_videos(&args.transcripts, &mut m)?;
    let mut out = mine_corpus(&videos, &encoder, &store, &cfg.mining());
    categorize(&mut out.records, &videos, &store, &categories, &encoder)?;
    let rejects = args
        .rejects
        .clone()
        .unwrap_or_else(|| with_suffix(&args.out, ".rejects.jsonl"));
    write_jsonl_out(&args.out, &out.records, &mut m)?;
    write_jsonl_out(&rejects, &out.rejections, &mut m)?;
    let shots: usize = out.records.iter().map(|r| r.shots.len()).sum();
    println!(
        "mined {} instances ({} shots) from {} videos; {} rejections -> {}",
        out.records.len(),
        shots,
        videos.len(),
        out.rejections.len(),
        args.out.display()
    );
    let m = m.with_config(cfg);
    ctx.finish(m, Some(default_manifest_path(&args.out, false)))
}

/// Records with categories filled in where missing.
fn categorized(
    mut records: Vec<InstanceRecord>,
    videos: &[TranscriptedVideo],
    store: &EmbeddingStore,
    categories: &[String],
    encoder: &TextEncoder,
) -> Result<Vec<InstanceRecord>, CliError> {
    if records.iter().any(|r| r.category.is_none()) {
        let mut missing: Vec<InstanceRecord> = records
            .iter()
            .filter(|r| r.category.is_none())
            .cloned()
            .collect();
        categorize(&mut missing, videos, store, categories, encoder)?;
        let mut it = missing.into_iter();
        for r in records.iter_mut().filter(|r| r.category.is_none()) {
            *r = it.next().expect("one categorized record per missing one");
        }
    }
    if let Some(r) = records
        .iter()
        .find(|r| !categories.contains(r.category.as_ref().expect("categorized")))
    {
        return Err(CliError::input(
            "INVALID_CATEGORIES",
            format!(
                "record {} has category {:?}, not in the category list",
                r.instance_id, r.category
            ),
        ));
    }
    Ok(records.into_iter().filter(|r| !r.rejected).collect())
}

pub fn meta_personalize(ctx: &Context, args: &MetaArgs) -> Result<(), CliError> {
    let mut cfg = ctx.config.clone();
    args.apply(&mut cfg);
    let mut m = ctx.manifest("meta-personalize");
    let (categories, _) = resolve_categories(&args.categories, &args.data, &mut cfg, &mut m)?;
    cfg.validate()?;
    let pcfg = cfg.personalization();
    let (store, encoder) = load_data(
        &args.data.store,
        &args.data.tokens,
        cfg.encoder_seed,
        &mut m,
    )?;
    let videos = read_videos(&args.transcripts, &mut m)?;
    let records = categorized(
        read_jsonl(&args.dataset, &mut m)?,
        &videos,
        &store,
        &categories,
        &encoder,
    )?;
    let meta = train_instances(&records, &videos, &store)?;
    let bank = meta_stage(&meta, &categories, &encoder, &pcfg, cfg.seed)?;
    let model = Model {
        parameterization: pcfg.parameterization(),
        categories: categories.clone(),
        bank,
        instances: Default::default(),
        encoder_fingerprint: encoder.fingerprint(),
        config: serde_json::to_value(&pcfg).expect("config serializes"),
    };
    model.save(&args.out)?;
    m.output(&args.out)?;
    println!(
        "meta-personalized {} categories on {} instances{} -> {}",
        categories.len(),
        meta.len(),
        if model.bank.is_none() {
            " (skipped: ablation a)"
        } else {
            ""
        },
        args.out.display()
    );
    ctx.finish(
        m.with_config(cfg),
        Some(default_manifest_path(&args.out, false)),
    )
}

pub fn personalize(ctx: &Context, args: &PersonalizeArgs) -> Result<(), CliError> {
    let mut cfg = ctx.config.clone();
    args.apply(&mut cfg);
    let mut m = ctx.manifest("personalize");
    let (mut categories, _) = resolve_categories(&args.categories, &args.data, &mut cfg, &mut m)?;
    cfg.validate()?;
    let pcfg = cfg.personalization();
    let (store, encoder) = load_data(
        &args.data.store,
        &args.data.tokens,
        cfg.encoder_seed,
        &mut m,
    )?;
    let bank: Option<FeatureBank> = match &args.model {
        Some(path) => {
            let model = load_model(path)?;
            m.input(path)?;
            check_encoder(&model, &encoder)?;
            categories = model.categories.clone();
            model.bank
        }
        None if matches!(cfg.ablation, Some(Ablation::NoMeta | Ablation::RandomC)) => None,
        None => {
            return Err(CliError::input(
                "MODEL_REQUIRED",
                "personalize needs --model unless the ablation is a or f",
            ))
        }
    };
    let videos = read_videos(&args.transcripts, &mut m)?;
    let records = categorized(
        read_jsonl(&args.dataset, &mut m)?,
        &videos,
        &store,
        &categories,
        &encoder,
    )?;
    let personal = train_instances(&records, &videos, &store)?;
    let (meta_records, meta_videos) = match (&args.meta_dataset, &args.meta_transcripts) {
        (Some(d), Some(t)) => {
            let v = read_videos(t, &mut m)?;
            (
                categorized(read_jsonl(d, &mut m)?, &v, &store, &categories, &encoder)?,
                v,
            )
        }
        _ => (Vec::new(), Vec::new()),
    };
    let meta = train_instances(&meta_records, &meta_videos, &store)?;
    let all_videos: Vec<TranscriptedVideo> = videos.iter().chain(&meta_videos).cloned().collect();
    let all_records: Vec<InstanceRecord> = records.iter().chain(&meta_records).cloned().collect();
    let negatives = negative_pool(&all_videos, &all_records, &store)?;
    let out = test_time_stage(
        &personal,
        bank.as_ref(),
        &meta,
        &negatives,
        &categories,
        &encoder,
        &pcfg,
        cfg.seed,
    )?;
    out.model.save(&args.out)?;
    m.output(&args.out)?;
    m.extra("extra_instances", &out.extra_instances);
    println!(
        "personalized {} instances ({} extra, {} negatives) -> {}",
        personal.len(),
        out.extra_instances.len(),
        negatives.len(),
        args.out.display()
    );
    ctx.finish(
        m.with_config(cfg),
        Some(default_manifest_path(&args.out, false)),
    )
}

/// Shots of every frame in the store, grouped by the id prefix before the
/// last `/`.
fn store_corpus(store: &EmbeddingStore) -> Vec<CorpusShot> {
    let mut shots: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for id in store.ids() {
        let shot = id.rsplit_once('/').map_or(id, |(s, _)| s);
        shots.entry(shot).or_default().push(id.to_string());
    }
    shots
        .into_iter()
        .map(|(id, frames)| CorpusShot {
            id: id.to_string(),
            frames,
        })
        .collect()
}

pub fn query(ctx: &Context, args: &QueryArgs) -> Result<(), CliError> {
    let mut cfg = ctx.config.clone();
    args.apply(&mut cfg);
    let mut m = ctx.manifest("query");
    let eval = match &args.manifest {
        Some(p) => {
            let e = read_eval_manifest(p, &mut m)?;
            if args.data.encoder_seed.is_none() {
                cfg.encoder_seed = e.encoder_seed;
            }
            Some(e)
        }
        None => None,
    };
    cfg.validate()?;
    let (store, encoder) = load_data(
        &args.data.store,
        &args.data.tokens,
        cfg.encoder_seed,
        &mut m,
    )?;
    let model = load_model(&args.model)?;
    m.input(&args.model)?;
    check_encoder(&model, &encoder)?;
    let shots = eval.map_or_else(|| store_corpus(&store), |e| e.corpus);
    let corpus = ShotCorpus::<f64>::from_shots(&shots, &store)?;
    let q = personalized_query(&model, &args.instance, &args.prompt, &encoder)?;
    let ranked = rank_corpus(&format!("{}|{}", args.instance, args.prompt), &q, &corpus)?;
    for (i, s) in ranked.ranking.iter().take(cfg.topk).enumerate() {
        println!("{:>4}  {:<32}  {:.6}", i + 1, s.shot_id, s.score);
    }
    if let Some(out) = &args.out {
        write_json_out(out, &ranked, &mut m)?;
    }
    m.extra("instance", &args.instance);
    m.extra("prompt", &args.prompt);
    let fallback = args.out.as_ref().map(|o| default_manifest_path(o, false));
    ctx.finish(m.with_config(cfg), fallback)
}

/// The evaluate command's JSON output.
#[derive(Debug, Serialize)]
pub struct EvaluationReport {
    pub seeds: Vec<u64>,
    pub k: usize,
    pub mined_meta_instances: usize,
    pub mined_personal_instances: usize,
    pub methods: Vec<SeedSummary>,
    /// Reconciliation against a synthetic world's truth, when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub world: Option<metaper::synthworld::WorldReport>,
}

fn pick(
    flag: &Option<PathBuf>,
    dir: Option<&WorldFiles>,
    f: fn(&WorldFiles) -> &PathBuf,
    name: &str,
) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| dir.map(|d| f(d).clone()))
        .ok_or_else(|| {
            CliError::input(
                "MISSING_ARGUMENT",
                format!("--{name} or --data-dir is required"),
            )
        })
}

pub fn evaluate(ctx: &Context, args: &EvaluateArgs) -> Result<(), CliError> {
    let mut cfg = ctx.config.clone();
    args.apply(&mut cfg);
    cfg.validate()?;
    let mut m = ctx.manifest("evaluate");
    let files = args.data_dir.as_deref().map(WorldFiles::in_dir);
    let dir = files.as_ref();
    let store_path = pick(&args.store, dir, |f| &f.store, "store")?;
    let tokens_path = pick(&args.tokens, dir, |f| &f.tokens, "tokens")?;
    let manifest_path = pick(&args.manifest, dir, |f| &f.manifest, "manifest")?;
    let queries_path = pick(&args.queries, dir, |f| &f.queries, "queries")?;
    let meta_path = pick(
        &args.meta_transcripts,
        dir,
        |f| &f.meta_transcripts,
        "meta-transcripts",
    )?;
    let personal_path = pick(
        &args.personal_transcripts,
        dir,
        |f| &f.personal_transcripts,
        "personal-transcripts",
    )?;

    let eval = read_eval_manifest(&manifest_path, &mut m)?;
    cfg.encoder_seed = eval.encoder_seed;
    let (store, encoder) = load_data(&store_path, &tokens_path, cfg.encoder_seed, &mut m)?;
    let meta_videos = read_videos(&meta_path, &mut m)?;
    let personal_videos = read_videos(&personal_path, &mut m)?;
    let queries: Vec<QuerySpec> = read_jsonl(&queries_path, &mut m)?;
    let pretrained = match &args.model {
        Some(path) => {
            let model = load_model(path)?;
            m.input(path)?;
            check_encoder(&model, &encoder)?;
            if model.categories != eval.categories {
                return Err(CliError::input(
                    "INVALID_CATEGORIES",
                    "model categories differ from the manifest's",
                ));
            }
            model.bank
        }
        None => None,
    };

    let prepared = prepare(
        &meta_videos,
        &personal_videos,
        &store,
        &encoder,
        &eval,
        &queries,
        &cfg.mining(),
    )?;
    let mut methods = vec![Method::Personalized(cfg.ablation)];
    if !args.no_baselines {
        methods.extend(BaselineKind::ALL.iter().map(|&b| Method::Baseline(b)));
    }
    let seeds = cfg.seed_list();
    let pcfg = cfg.personalization();
    let rows = compare_methods(
        &prepared,
        &encoder,
        &methods,
        &pcfg,
        &seeds,
        cfg.k,
        pretrained.as_ref(),
    )?;

    let truth_path = dir.map(|d| d.truth.clone()).filter(|p| p.is_file());
    let world = match truth_path {
        Some(p) => {
            let truth: WorldTruth = io::read_json(&p)?;
            m.input(&p)?;
            let records: Vec<InstanceRecord> = prepared
                .meta_mining
                .records
                .iter()
                .chain(&prepared.personal_mining.records)
                .cloned()
                .collect();
            let rejections: Vec<_> = prepared
                .meta_mining
                .rejections
                .iter()
                .chain(&prepared.personal_mining.rejections)
                .cloned()
                .collect();
            Some(world_report(&truth, &records, &rejections, rows.first()))
        }
        None => None,
    };
    let report = EvaluationReport {
        seeds: seeds.clone(),
        k: cfg.k,
        mined_meta_instances: prepared.meta.len(),
        mined_personal_instances: prepared.personal.len(),
        methods: rows,
        world,
    };
    print!("{}", SeedSummary::table(&report.methods));
    if let Some(out) = &args.out {
        write_json_out(out, &report, &mut m)?;
    }
    let fallback = args.out.as_ref().map(|o| default_manifest_path(o, false));
    ctx.finish(m.with_config(cfg), fallback)
}

pub fn gradcheck(ctx: &Context, args: &GradcheckArgs) -> Result<(), CliError> {
    let mut m = ctx.manifest("gradcheck");
    let seeds: Vec<u64> = (0..args.problems).collect();
    let suite = run_gradcheck(&seeds)?;
    for e in &suite.entries {
        println!(
            "problem {}  {:<6} max rel error {:.3e}  ({} coords)",
            e.problem, e.term, e.max_rel_error, e.coords_checked
        );
    }
    println!(
        "{}: max rel error {:.3e} (tolerance {:.0e})",
        if suite.passed { "PASS" } else { "FAIL" },
        suite.max_rel_error,
        suite.tolerance
    );
    if let Some(out) = &args.out {
        write_json_out(out, &suite, &mut m)?;
    }
    let fallback = args.out.as_ref().map(|o| default_manifest_path(o, false));
    ctx.finish(m, fallback)?;
    if !suite.passed {
        return Err(CliError::new(
            "GRADCHECK_FAILED",
            format!(
                "max relative error {:.3e} exceeds {:.0e}",
                suite.max_rel_error, suite.tolerance
            ),
            EXIT_FAILURE,
        ));
    }
    Ok(())
}
