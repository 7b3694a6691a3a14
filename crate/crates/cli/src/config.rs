//! Effective run configuration: built-in defaults, overridden by a JSON
//! config file, overridden by command-line flags.

use std::path::Path;

use metaper::encoders::sha256_hex;
use metaper::mining::{MiningConfig, THETA_EXP, THETA_VIS};
use metaper::numerics::AdamConfig;
use metaper::personalization::{Ablation, PersonalizationConfig};
use metaper::retrieval::DEFAULT_K;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Every tunable value, one flat key per command-line flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub theta_vis: f64,
    pub theta_exp: f64,
    pub q: usize,
    pub nw: usize,
    pub lambda: f64,
    pub lambda_c: f64,
    pub init_std: f64,
    /// `1/√q` when unset.
    pub feature_init_std: Option<f64>,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub rounds: usize,
    pub instances_per_cat: usize,
    pub meta_epochs: usize,
    pub meta_batch: usize,
    pub epochs: usize,
    pub batch: usize,
    pub distractors: usize,
    pub extra_instances: usize,
    pub vl_exclude_self: bool,
    pub ablation: Option<Ablation>,
    pub templates: Vec<String>,
    pub seed: u64,
    /// Number of seeds for `evaluate`: `seed, seed+1, …`.
    pub seeds: usize,
    pub k: usize,
    pub topk: usize,
    pub encoder_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PersonalizationConfig::default();
        Self {
            theta_vis: THETA_VIS,
            theta_exp: THETA_EXP,
            q: p.q,
            nw: p.n_w,
            lambda: p.lambda,
            lambda_c: p.lambda_c,
            init_std: p.init_std,
            feature_init_std: p.feature_init_std,
            lr_max: p.adam.lr_max,
            weight_decay: p.adam.weight_decay,
            beta1: p.adam.beta1,
            beta2: p.adam.beta2,
            adam_eps: p.adam.epsilon,
            rounds: p.meta_rounds,
            instances_per_cat: p.instances_per_category,
            meta_epochs: p.meta_epochs,
            meta_batch: p.meta_batch,
            epochs: p.epochs,
            batch: p.batch,
            distractors: p.distractors,
            extra_instances: p.extra_instances,
            vl_exclude_self: p.vl_exclude_self,
            ablation: p.ablation,
            templates: p.templates,
            seed: 0,
            seeds: 5,
            k: DEFAULT_K,
            topk: 10,
            encoder_seed: 0,
        }
    }
}

impl RunConfig {
    /// Every configuration key with its default, one per line.
    pub fn help_table() -> String {
        let v = serde_json::to_value(Self::default()).expect("config serializes");
        let mut out =
            String::from("Configuration keys (--config FILE, a JSON object) and defaults:\n");
        for (k, v) in v.as_object().expect("config is an object") {
            let shown = match (k.as_str(), v) {
                ("feature_init_std", serde_json::Value::Null) => "1/sqrt(q)".to_string(),
                (_, serde_json::Value::Null) => "none".to_string(),
                _ => v.to_string(),
            };
            out.push_str(&format!("  {k:<18} {shown}\n"));
        }
        out
    }

    /// Defaults overridden by the keys present in `file`.
    pub fn from_file(file: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = file else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::not_found("CONFIG_NOT_FOUND", path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::invalid_config(format!("{}: {e}", path.display())))
    }

    pub fn personalization(&self) -> PersonalizationConfig {
        PersonalizationConfig {
            q: self.q,
            n_w: self.nw,
            lambda: self.lambda,
            lambda_c: self.lambda_c,
            init_std: self.init_std,
            feature_init_std: self.feature_init_std,
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.adam_eps,
                weight_decay: self.weight_decay,
                lr_max: self.lr_max,
            },
            meta_rounds: self.rounds,
            instances_per_category: self.instances_per_cat,
            meta_epochs: self.meta_epochs,
            meta_batch: self.meta_batch,
            epochs: self.epochs,
            batch: self.batch,
            distractors: self.distractors,
            extra_instances: self.extra_instances,
            ablation: self.ablation,
            vl_exclude_self: self.vl_exclude_self,
            templates: self.templates.clone(),
        }
    }

    pub fn mining(&self) -> MiningConfig {
        MiningConfig {
            theta_vis: self.theta_vis,
            theta_exp: self.theta_exp,
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.personalization()
            .validate()
            .map_err(|e| CliError::invalid_config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.theta_vis) || !(0.0..=1.0).contains(&self.theta_exp) {
            return Err(CliError::invalid_config("thresholds must lie in [0, 1]"));
        }
        if self.seeds == 0 || self.k == 0 || self.topk == 0 {
            return Err(CliError::invalid_config(
                "seeds, k and topk must be positive",
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_published_values() {
        let c = RunConfig::default();
        assert_eq!(
            (c.q, c.nw, c.rounds, c.instances_per_cat, c.distractors),
            (512, 1, 10, 32, 512)
        );
        assert_eq!(
            (c.lambda, c.lambda_c, c.lr_max, c.weight_decay),
            (0.1, 0.5, 0.1, 1e-5)
        );
        assert_eq!((c.theta_vis, c.theta_exp), (0.3, 0.9));
        assert_eq!(
            (c.meta_epochs, c.meta_batch, c.epochs, c.batch),
            (20, 512, 40, 16)
        );
        assert_eq!(c.personalization(), PersonalizationConfig::default());
        assert_eq!(c.mining(), MiningConfig::default());
    }

    #[test]
    fn file_keys_override_defaults_only_where_present() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"q": 64, "ablation": "f"}"#).unwrap();
        let c = RunConfig::from_file(Some(&path)).unwrap();
        assert_eq!(c.q, 64);
        assert_eq!(c.ablation, Some(Ablation::RandomC));
        assert_eq!(c.lambda, 0.1);
        std::fs::write(&path, r#"{"qq": 64}"#).unwrap();
        assert_eq!(
            RunConfig::from_file(Some(&path)).unwrap_err().code,
            "INVALID_CONFIG"
        );
    }

    #[test]
    fn seed_list_counts_up_from_seed() {
        let c = RunConfig {
            seed: 3,
            seeds: 2,
            ..RunConfig::default()
        };
        assert_eq!(c.seed_list(), vec![3, 4]);
    }
}
