//! Command-line surface. Tunable flags are optional so that an absent flag
//! falls back to the config file and then to the built-in default, which
//! each flag's help text states.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metaper::personalization::Ablation;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "metaper",
    version,
    about = "Mine, personalize and retrieve named instances in video shots",
    after_help = RunConfig::help_table()
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON file of configuration keys; flags take precedence over it
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for corpus scoring and per-video mining [default: 1]
    #[arg(long, global = true, env = "METAPER_THREADS", value_name = "N")]
    pub threads: Option<usize>,
    /// Log verbosity; logs are JSON lines on stderr
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Info)]
    pub log_level: LogLevel,
    /// Where to write the run manifest [default: next to the main output]
    #[arg(long, global = true, value_name = "FILE")]
    pub run_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl LogLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Error => "error",
            Self::Warn => "warn",
            Self::Info => "info",
            Self::Debug => "debug",
            Self::Trace => "trace",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world with known ground truth
    Synth(SynthArgs),
    /// Spot, filter and expand named instances in transcripted videos
    Mine(MineArgs),
    /// Learn the category feature bank from a mined meta dataset
    MetaPersonalize(MetaArgs),
    /// Learn instance weights for a personal dataset
    Personalize(PersonalizeArgs),
    /// Rank a shot corpus for one personalized prompt
    Query(QueryArgs),
    /// Train and score over several seeds, with baselines
    Evaluate(EvaluateArgs),
    /// Check analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Check magic bytes, checksums, dimensions and schemas of input files
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// World spec JSON; missing keys take their defaults
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

/// Shared data inputs.
#[derive(Debug, Args)]
pub struct StoreArgs {
    /// Frame embedding store (.mpes)
    #[arg(long, value_name = "FILE")]
    pub store: PathBuf,
    /// Token table (.mptt)
    #[arg(long, value_name = "FILE")]
    pub tokens: PathBuf,
    /// Seed of the text encoder projection [default: 0, or the manifest's]
    #[arg(long, value_name = "N")]
    pub encoder_seed: Option<u64>,
}

/// Where the category list comes from.
#[derive(Debug, Args)]
pub struct CategoryArgs {
    /// Comma-separated category list [default: the 80 COCO categories]
    #[arg(
        long,
        value_delimiter = ',',
        value_name = "LIST",
        conflicts_with = "manifest"
    )]
    pub categories: Option<Vec<String>>,
    /// Evaluation manifest; supplies categories, encoder seed and corpus
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MiningFlags {
    /// Visual-relevance threshold, strict [default: 0.3]
    #[arg(long, value_name = "F")]
    pub theta_vis: Option<f64>,
    /// Shot-expansion threshold, strict [default: 0.9]
    #[arg(long, value_name = "F")]
    pub theta_exp: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    /// Transcript JSONL, one video per line
    #[arg(long, value_name = "FILE")]
    pub transcripts: PathBuf,
    #[command(flatten)]
    pub data: StoreArgs,
    #[command(flatten)]
    pub categories: CategoryArgs,
    #[command(flatten)]
    pub mining: MiningFlags,
    /// Instance dataset JSONL to write
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Rejections JSONL [default: <out>.rejects.jsonl]
    #[arg(long, value_name = "FILE")]
    pub rejects: Option<PathBuf>,
}

/// Model and optimizer flags shared by every training command.
#[derive(Debug, Args)]
pub struct ModelFlags {
    /// Category features per matrix [default: 512]
    #[arg(long, value_name = "N")]
    pub q: Option<usize>,
    /// Instance tokens per instance [default: 1]
    #[arg(long, value_name = "N")]
    pub nw: Option<usize>,
    /// Contrastive temperature [default: 0.1]
    #[arg(long, value_name = "F")]
    pub lambda: Option<f64>,
    /// Weight of the category-anchoring loss [default: 0.5]
    #[arg(long, value_name = "F")]
    pub lambda_c: Option<f64>,
    /// Std of the instance-weight initialization [default: 0.1]
    #[arg(long, value_name = "F")]
    pub init_std: Option<f64>,
    /// Std of random feature-matrix entries [default: 1/sqrt(q)]
    #[arg(long, value_name = "F")]
    pub feature_init_std: Option<f64>,
    /// Peak learning rate of the cosine schedule [default: 0.1]
    #[arg(long, value_name = "F")]
    pub lr_max: Option<f64>,
    /// Decoupled weight decay [default: 1e-5]
    #[arg(long, value_name = "F")]
    pub weight_decay: Option<f64>,
    /// Adam first-moment decay [default: 0.9]
    #[arg(long, value_name = "F")]
    pub beta1: Option<f64>,
    /// Adam second-moment decay [default: 0.999]
    #[arg(long, value_name = "F")]
    pub beta2: Option<f64>,
    /// Adam denominator epsilon [default: 1e-8]
    #[arg(long, value_name = "F")]
    pub adam_eps: Option<f64>,
    /// Meta-personalization rounds [default: 10]
    #[arg(long, value_name = "N")]
    pub rounds: Option<usize>,
    /// Meta instances sampled per category and round [default: 32]
    #[arg(long, value_name = "N")]
    pub instances_per_cat: Option<usize>,
    /// Distractor shots per test-time iteration [default: 512]
    #[arg(long, value_name = "N")]
    pub distractors: Option<usize>,
    /// Same-category meta instances added at test time [default: 8]
    #[arg(long, value_name = "N")]
    pub extra_instances: Option<usize>,
    /// Leave i = j pairs out of the vision-language sum [default: false]
    #[arg(long, value_name = "BOOL")]
    pub vl_exclude_self: Option<bool>,
    /// Training ablation a..f [default: none]
    #[arg(long, value_name = "CODE", value_parser = parse_ablation)]
    pub ablation: Option<Ablation>,
    /// Extra prompt template with a `*` placeholder, repeatable [default: none]
    #[arg(long = "template", value_name = "TEXT")]
    pub templates: Vec<String>,
    /// Random seed [default: 0]
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s)
        .ok_or_else(|| format!("unknown ablation {s:?}; expected one of a, b, c, d, e, f"))
}

#[derive(Debug, Args)]
pub struct MetaArgs {
    /// Mined meta dataset JSONL
    #[arg(long, value_name = "FILE")]
    pub dataset: PathBuf,
    /// Transcripts the dataset was mined from
    #[arg(long, value_name = "FILE")]
    pub transcripts: PathBuf,
    #[command(flatten)]
    pub data: StoreArgs,
    #[command(flatten)]
    pub categories: CategoryArgs,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Epochs per meta round [default: 20]
    #[arg(long = "epochs", value_name = "N")]
    pub meta_epochs: Option<usize>,
    /// Meta batch size [default: 512]
    #[arg(long = "batch", value_name = "N")]
    pub meta_batch: Option<usize>,
    /// Model file to write
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PersonalizeArgs {
    /// Meta-personalized model; required unless the ablation is a or f
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Mined personal dataset JSONL
    #[arg(long, value_name = "FILE")]
    pub dataset: PathBuf,
    /// Transcripts the personal dataset was mined from
    #[arg(long, value_name = "FILE")]
    pub transcripts: PathBuf,
    /// Mined meta dataset, source of extra instances and negatives
    #[arg(long, value_name = "FILE", requires = "meta_transcripts")]
    pub meta_dataset: Option<PathBuf>,
    /// Transcripts of the meta dataset
    #[arg(long, value_name = "FILE", requires = "meta_dataset")]
    pub meta_transcripts: Option<PathBuf>,
    #[command(flatten)]
    pub data: StoreArgs,
    #[command(flatten)]
    pub categories: CategoryArgs,
    #[command(flatten)]
    pub model_flags: ModelFlags,
    /// Test-time epochs [default: 40]
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Test-time batch size [default: 16]
    #[arg(long, value_name = "N")]
    pub batch: Option<usize>,
    /// Model file to write
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Personalized model
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: StoreArgs,
    /// Prompt with a `*` placeholder, e.g. "an image of *"
    #[arg(long, value_name = "TEXT")]
    pub prompt: String,
    /// Instance id to personalize the prompt with
    #[arg(long, value_name = "ID")]
    pub instance: String,
    /// Shots to print [default: 10]
    #[arg(long, value_name = "N")]
    pub topk: Option<usize>,
    /// Evaluation manifest whose corpus is ranked [default: every shot in the store]
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// JSON file for the full ranking
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Meta-personalized model whose bank replaces the meta stage
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Directory with the standard file names written by `synth`
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    /// Query JSONL [default: <data-dir>/queries.jsonl]
    #[arg(long, value_name = "FILE")]
    pub queries: Option<PathBuf>,
    /// Evaluation manifest [default: <data-dir>/manifest.json]
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Meta transcripts [default: <data-dir>/meta_transcripts.jsonl]
    #[arg(long, value_name = "FILE")]
    pub meta_transcripts: Option<PathBuf>,
    /// Personal transcripts [default: <data-dir>/personal_transcripts.jsonl]
    #[arg(long, value_name = "FILE")]
    pub personal_transcripts: Option<PathBuf>,
    /// Frame embedding store [default: <data-dir>/store.mpes]
    #[arg(long, value_name = "FILE")]
    pub store: Option<PathBuf>,
    /// Token table [default: <data-dir>/tokens.mptt]
    #[arg(long, value_name = "FILE")]
    pub tokens: Option<PathBuf>,
    #[command(flatten)]
    pub mining: MiningFlags,
    #[command(flatten)]
    pub model_flags: ModelFlags,
    /// Epochs per meta round [default: 20]
    #[arg(long, value_name = "N")]
    pub meta_epochs: Option<usize>,
    /// Meta batch size [default: 512]
    #[arg(long, value_name = "N")]
    pub meta_batch: Option<usize>,
    /// Test-time epochs [default: 40]
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Test-time batch size [default: 16]
    #[arg(long, value_name = "N")]
    pub batch: Option<usize>,
    /// Number of seeds, counting up from --seed [default: 5]
    #[arg(long, value_name = "N")]
    pub seeds: Option<usize>,
    /// Recall cutoff K [default: 5]
    #[arg(long, value_name = "N")]
    pub k: Option<usize>,
    /// Skip the language, visual and v+l baselines
    #[arg(long)]
    pub no_baselines: bool,
    /// JSON report to write
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of seeded problems
    #[arg(long, default_value_t = 3, value_name = "N")]
    pub problems: u64,
    /// JSON report to write
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Frame embedding store
    #[arg(long, value_name = "FILE")]
    pub store: Option<PathBuf>,
    /// Token table
    #[arg(long, value_name = "FILE")]
    pub tokens: Option<PathBuf>,
    /// Model file
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Transcript JSONL, repeatable
    #[arg(long, value_name = "FILE")]
    pub transcripts: Vec<PathBuf>,
    /// Instance dataset JSONL, repeatable
    #[arg(long, value_name = "FILE")]
    pub dataset: Vec<PathBuf>,
    /// Query JSONL
    #[arg(long, value_name = "FILE")]
    pub queries: Option<PathBuf>,
    /// Evaluation manifest
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Seed of the text encoder projection, for model fingerprint checks [default: 0, or the manifest's]
    #[arg(long, value_name = "N")]
    pub encoder_seed: Option<u64>,
    /// Exit non-zero with an error JSON on the first failed check
    #[arg(long)]
    pub strict: bool,
    /// Print the report as JSON instead of text
    #[arg(long)]
    pub json: bool,
}

macro_rules! overlay {
    ($cfg:expr, $src:expr; $($field:ident => $key:ident),* $(,)?) => {
        $(if let Some(v) = $src.$field.clone() { $cfg.$key = v; })*
    };
}

impl MiningFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        overlay!(cfg, self; theta_vis => theta_vis, theta_exp => theta_exp);
    }
}

impl ModelFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        overlay!(cfg, self;
            q => q, nw => nw, lambda => lambda, lambda_c => lambda_c, init_std => init_std,
            lr_max => lr_max, weight_decay => weight_decay, beta1 => beta1, beta2 => beta2,
            adam_eps => adam_eps, rounds => rounds, instances_per_cat => instances_per_cat,
            distractors => distractors, extra_instances => extra_instances,
            vl_exclude_self => vl_exclude_self, seed => seed,
        );
        if self.feature_init_std.is_some() {
            cfg.feature_init_std = self.feature_init_std;
        }
        if self.ablation.is_some() {
            cfg.ablation = self.ablation;
        }
        if !self.templates.is_empty() {
            cfg.templates = self.templates.clone();
        }
    }
}

impl StoreArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        overlay!(cfg, self; encoder_seed => encoder_seed);
    }
}

impl MetaArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        self.data.apply(cfg);
        self.model.apply(cfg);
        overlay!(cfg, self; meta_epochs => meta_epochs, meta_batch => meta_batch);
    }
}

impl PersonalizeArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        self.data.apply(cfg);
        self.model_flags.apply(cfg);
        overlay!(cfg, self; epochs => epochs, batch => batch);
    }
}

impl EvaluateArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        self.mining.apply(cfg);
        self.model_flags.apply(cfg);
        overlay!(cfg, self;
            meta_epochs => meta_epochs, meta_batch => meta_batch, epochs => epochs,
            batch => batch, seeds => seeds, k => k,
        );
    }
}

impl QueryArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        self.data.apply(cfg);
        overlay!(cfg, self; topk => topk);
    }
}

impl MineArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        self.data.apply(cfg);
        self.mining.apply(cfg);
    }
}
