//! Read-only checks of input files: magic bytes, checksums, dimensions and
//! JSON schemas. Failures are collected into a report rather than raised.

use std::collections::HashSet;
use std::path::Path;

use metaper::encoders::{EmbeddingStore, ReferenceTextEncoder};
use metaper::io;
use metaper::mining::{InstanceRecord, TranscriptedVideo};
use metaper::retrieval::{EvalManifest, QuerySpec};
use serde::Serialize;

use crate::args::ValidateArgs;
use crate::commands::{load_model, load_store, load_tokens};
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub target: String,
    pub check: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }

    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| !c.ok)
    }

    fn pass(&mut self, target: &Path, check: &str, detail: String) {
        self.checks.push(Check {
            target: target.display().to_string(),
            check: check.to_string(),
            ok: true,
            code: None,
            detail,
        });
    }

    fn fail(&mut self, target: &Path, check: &str, e: &CliError) {
        self.checks.push(Check {
            target: target.display().to_string(),
            check: check.to_string(),
            ok: false,
            code: Some(e.code.to_string()),
            detail: e.message.clone(),
        });
    }

    /// Records the outcome and returns the value on success.
    fn record<T>(
        &mut self,
        target: &Path,
        check: &str,
        r: Result<(T, String), CliError>,
    ) -> Option<T> {
        match r {
            Ok((v, detail)) => {
                self.pass(target, check, detail);
                Some(v)
            }
            Err(e) => {
                self.fail(target, check, &e);
                None
            }
        }
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.ok { "ok  " } else { "FAIL" };
            let code = c
                .code
                .as_deref()
                .map(|s| format!(" {s}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{status} {:<12} {}{code}  {}\n",
                c.check, c.target, c.detail
            ));
        }
        out
    }
}

fn missing_frames<'a>(
    frames: impl Iterator<Item = &'a String>,
    store: &EmbeddingStore,
) -> Result<(), CliError> {
    let missing: Vec<&String> = frames.filter(|f| !store.contains(f)).collect();
    match missing.first() {
        None => Ok(()),
        Some(first) => Err(CliError::input(
            "MISSING_FRAME",
            format!(
                "{} frame ids absent from the store, first {first:?}",
                missing.len()
            ),
        )),
    }
}

pub fn validate_inputs(args: &ValidateArgs) -> ValidationReport {
    let mut r = ValidationReport::default();
    let store = args.store.as_deref().and_then(|p| {
        let v = load_store(p).map(|s| {
            let d = format!("{} frames, dim {}", s.len(), s.dim());
            (s, d)
        });
        r.record(p, "store", v)
    });
    let tokens = args.tokens.as_deref().and_then(|p| {
        let v = load_tokens(p).map(|t| {
            let d = format!(
                "{} tokens, dim {}, max_len {}",
                t.vocab_size(),
                t.dim(),
                t.max_len()
            );
            (t, d)
        });
        r.record(p, "tokens", v)
    });
    if let (Some(s), Some(t), Some(tp)) = (&store, &tokens, args.tokens.as_deref()) {
        let v = if s.dim() == t.dim() {
            Ok(((), format!("store and token table both dim {}", s.dim())))
        } else {
            Err(CliError::input(
                "DIM_MISMATCH",
                format!("store dim {} vs token table dim {}", s.dim(), t.dim()),
            ))
        };
        r.record(tp, "dims", v);
    }

    let manifest = args.manifest.as_deref().and_then(|p| {
        let v = io::read_json::<EvalManifest>(p)
            .map_err(CliError::from)
            .and_then(|m| {
                let mut ids = HashSet::new();
                if let Some(dup) = m.corpus.iter().find(|s| !ids.insert(s.id.as_str())) {
                    return Err(CliError::input(
                        "INVALID_CORPUS",
                        format!("duplicate shot id {:?}", dup.id),
                    ));
                }
                if let Some(s) = &store {
                    missing_frames(m.corpus.iter().flat_map(|c| &c.frames), s)?;
                }
                let d = format!(
                    "{} categories, {} corpus shots",
                    m.categories.len(),
                    m.corpus.len()
                );
                Ok((m, d))
            });
        r.record(p, "manifest", v)
    });

    if let Some(p) = args.model.as_deref() {
        let seed = args
            .encoder_seed
            .or(manifest.as_ref().map(|m| m.encoder_seed))
            .unwrap_or(0);
        let v = load_model(p).and_then(|m| {
            if let (Some(b), Some(s)) = (&m.bank, &store) {
                if b.dim() != s.dim() {
                    return Err(CliError::input(
                        "DIM_MISMATCH",
                        format!("model dim {} vs store dim {}", b.dim(), s.dim()),
                    ));
                }
            }
            if let Some(t) = &tokens {
                let enc = ReferenceTextEncoder::new(t.clone(), seed);
                if enc.fingerprint() != m.encoder_fingerprint {
                    return Err(CliError::input(
                        "ENCODER_MISMATCH",
                        format!(
                            "model fingerprint differs from token table with encoder seed {seed}"
                        ),
                    ));
                }
            }
            let d = format!(
                "{} categories, {} instances",
                m.categories.len(),
                m.instances.len()
            );
            Ok(((), d))
        });
        r.record(p, "model", v);
    }

    let mut shot_ids: HashSet<String> = HashSet::new();
    for p in &args.transcripts {
        let v = io::read_jsonl::<TranscriptedVideo>(p)
            .map_err(CliError::from)
            .and_then(|videos| {
                for v in &videos {
                    v.validate()
                        .map_err(|e| CliError::input("INVALID_TRANSCRIPT", e.to_string()))?;
                    shot_ids.extend(v.shots.iter().map(|s| s.id.clone()));
                }
                if let Some(s) = &store {
                    missing_frames(
                        videos.iter().flat_map(|v| &v.shots).flat_map(|s| &s.frames),
                        s,
                    )?;
                }
                Ok(((), format!("{} videos", videos.len())))
            });
        r.record(p, "transcripts", v);
    }

    for p in &args.dataset {
        let v = io::read_jsonl::<InstanceRecord>(p)
            .map_err(CliError::from)
            .and_then(|records| {
                if !args.transcripts.is_empty() {
                    let unknown = records
                        .iter()
                        .flat_map(|r| &r.shots)
                        .find(|s| !shot_ids.contains(*s));
                    if let Some(s) = unknown {
                        return Err(CliError::input(
                            "UNKNOWN_SHOT",
                            format!("shot {s:?} is in no transcript"),
                        ));
                    }
                }
                Ok(((), format!("{} records", records.len())))
            });
        r.record(p, "dataset", v);
    }

    if let Some(p) = args.queries.as_deref() {
        let v = io::read_jsonl::<QuerySpec>(p)
            .map_err(CliError::from)
            .and_then(|queries| {
                if let Some(m) = &manifest {
                    let corpus: HashSet<&str> = m.corpus.iter().map(|s| s.id.as_str()).collect();
                    for q in &queries {
                        if q.relevant_shots.is_empty()
                            || q.relevant_shots
                                .iter()
                                .any(|s| !corpus.contains(s.as_str()))
                        {
                            return Err(CliError::input(
                                "INVALID_QUERY",
                                format!(
                                    "query {:?} has relevant shots outside the corpus",
                                    q.query_id
                                ),
                            ));
                        }
                    }
                }
                Ok(((), format!("{} queries", queries.len())))
            });
        r.record(p, "queries", v);
    }
    r
}

/// Codes passed through unchanged by `--strict`.
const KNOWN_CODES: &[&str] = &[
    "BAD_MAGIC",
    "CRC_MISMATCH",
    "DIM_MISMATCH",
    "ENCODER_MISMATCH",
    "MISSING_FRAME",
    "STORE_NOT_FOUND",
    "TOKENS_NOT_FOUND",
    "MODEL_NOT_FOUND",
    "TRUNCATED",
    "UNSUPPORTED_VERSION",
];

pub fn validate(args: &ValidateArgs) -> Result<(), CliError> {
    let report = validate_inputs(args);
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        );
    } else {
        print!("{}", report.text());
        let failed = report.checks.iter().filter(|c| !c.ok).count();
        println!("{} checks, {} failed", report.checks.len(), failed);
    }
    match report.first_failure() {
        Some(c) if args.strict => {
            let code = KNOWN_CODES
                .iter()
                .find(|k| c.code.as_deref() == Some(**k))
                .copied()
                .unwrap_or("VALIDATION_FAILED");
            Err(CliError::input(
                code,
                format!("{} {}: {}", c.check, c.target, c.detail),
            ))
        }
        _ => Ok(()),
    }
}
