//! Run configuration: a TOML file with one table per subsystem, overridable
//! per key from the command line.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::http::HttpConfig;
use crate::distractors::DistractorConfig;
use crate::mining::MiningConfig;
use crate::permute::PermuteConfig;
use crate::pipeline::{PipelineConfig, RequestSettings};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("bad --set {0:?}: expected section.key=value")]
    BadOverride(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApiConfig {
    pub backend: BackendKind,
    pub base_url: String,
    pub key_env: String,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
    pub max_retries: u32,
    pub concurrency: usize,
    pub backoff_base_ms: u64,
    pub timeout_secs: u64,
    /// Scene description consumed by the mock backend.
    pub scene_file: Option<PathBuf>,
}

impl Default for ApiConfig {
    fn default() -> Self {
        let http = HttpConfig::default();
        let req = RequestSettings::default();
        Self {
            backend: BackendKind::Http,
            base_url: http.base_url,
            key_env: http.api_key_env,
            model: req.model,
            temperature: req.temperature,
            max_output_tokens: req.max_output_tokens,
            max_retries: http.max_retries,
            concurrency: http.concurrency,
            backoff_base_ms: http.backoff_base.as_millis() as u64,
            timeout_secs: http.timeout.as_secs(),
            scene_file: None,
        }
    }
}

impl ApiConfig {
    pub fn http(&self) -> HttpConfig {
        HttpConfig {
            base_url: self.base_url.clone(),
            api_key_env: self.key_env.clone(),
            max_retries: self.max_retries,
            concurrency: self.concurrency,
            backoff_base: Duration::from_millis(self.backoff_base_ms),
            timeout: Duration::from_secs(self.timeout_secs),
        }
    }

    pub fn request(&self) -> RequestSettings {
        RequestSettings {
            model: self.model.clone(),
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
        }
    }
}

/// Permuter settings plus the tokenizer files used for budget checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PermuteSection {
    pub token_limit: usize,
    pub max_compounds: usize,
    pub allow_sizes: Vec<usize>,
    pub seed: u64,
    pub count_special_tokens: bool,
    /// CLIP `vocab.json`.
    pub vocab: Option<PathBuf>,
    /// CLIP `merges.txt`.
    pub merges: Option<PathBuf>,
}

impl Default for PermuteSection {
    fn default() -> Self {
        let p = PermuteConfig::default();
        Self {
            token_limit: p.token_limit,
            max_compounds: p.max_compounds,
            allow_sizes: p.allow_sizes.into_iter().collect(),
            seed: p.seed,
            count_special_tokens: p.count_special_tokens,
            vocab: None,
            merges: None,
        }
    }
}

impl PermuteSection {
    pub fn permute_config(&self) -> PermuteConfig {
        PermuteConfig {
            token_limit: self.token_limit,
            max_compounds: self.max_compounds,
            allow_sizes: self.allow_sizes.iter().copied().collect(),
            seed: self.seed,
            count_special_tokens: self.count_special_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10, 50],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub api: ApiConfig,
    pub mine: MiningConfig,
    pub pipeline: PipelineConfig,
    pub permute: PermuteSection,
    pub distract: DistractorConfig,
    pub eval: EvalConfig,
}

// Anything that is not valid TOML on its own is taken as a bare string.
fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::BadOverride(spec.to_string());
    let (key, value) = spec.split_once('=').ok_or_else(bad)?;
    let (section, field) = key.trim().split_once('.').ok_or_else(bad)?;
    if section.is_empty() || field.is_empty() || field.contains('.') {
        return Err(bad());
    }
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let sect = entry.as_table_mut().ok_or_else(bad)?;
    sect.insert(field.to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    /// Flags override the file, which overrides the defaults. Relative paths
    /// inside the file are resolved against the file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
                    path: p.display().to_string(),
                    message: e.to_string(),
                })?;
                text.parse::<toml::Table>().map_err(|e| ConfigError::Read {
                    path: p.display().to_string(),
                    message: e.to_string(),
                })?
            }
            None => toml::Table::new(),
        };
        let mut cfg: RunConfig = toml::Value::Table(table.clone())
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        if let Some(dir) = path.and_then(Path::parent) {
            cfg.resolve_paths(dir);
        }
        if !overrides.is_empty() {
            // Re-serialise so resolved paths survive, then layer the flags on top.
            table = toml::Table::try_from(&cfg).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            for o in overrides {
                apply_override(&mut table, o)?;
            }
            cfg = toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = dir.join(&*path);
                }
            }
        };
        fix(&mut self.api.scene_file);
        fix(&mut self.pipeline.templates_dir);
        fix(&mut self.permute.vocab);
        fix(&mut self.permute.merges);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        self.mine
            .validate(64)
            .map_err(|e| ConfigError::Invalid(format!("mine: {e}")))?;
        self.permute
            .permute_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("permute: {e}")))?;
        if self.api.concurrency == 0 {
            return inv("api.concurrency must be at least 1".into());
        }
        if !(0.0..=2.0).contains(&self.api.temperature) {
            return inv(format!(
                "api.temperature must be in [0, 2], got {}",
                self.api.temperature
            ));
        }
        if self.pipeline.max_objects == Some(0) {
            return inv("pipeline.max_objects must be at least 1".into());
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return inv("eval.ks must be a non-empty list of positive integers".into());
        }
        if self.api.backend == BackendKind::Mock && self.api.scene_file.is_none() {
            return inv("api.backend = \"mock\" requires api.scene_file".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the effective configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        crate::dataset::sha256_hex(&json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_str(text: &str, overrides: &[&str]) -> Result<RunConfig, ConfigError> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text).unwrap();
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        RunConfig::load(Some(&p), &o)
    }

    #[test]
    fn defaults_when_empty() {
        let cfg = load_str("", &[]).unwrap();
        assert_eq!(cfg.mine.hash_min, 25);
        assert_eq!(cfg.mine.hash_max, 35);
        assert_eq!(cfg.permute.token_limit, 77);
        assert_eq!(cfg.permute.max_compounds, 60);
        assert_eq!(cfg.distract.k, 5);
        assert_eq!(cfg.pipeline.parse_retries, 2);
        assert_eq!(cfg.api.max_retries, 4);
    }

    #[test]
    fn precedence_flag_over_file() {
        let cfg = load_str(
            "[permute]\nseed = 3\nmax_compounds = 10\n",
            &["permute.seed=9"],
        )
        .unwrap();
        assert_eq!(cfg.permute.seed, 9);
        assert_eq!(cfg.permute.max_compounds, 10);
        let cfg = load_str("", &["api.model=gpt-4o-mini", "eval.ks=[1, 3]"]).unwrap();
        assert_eq!(cfg.api.model, "gpt-4o-mini");
        assert_eq!(cfg.eval.ks, vec![1, 3]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            load_str("[mine]\nhash_mni = 3\n", &[]),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            load_str("[nope]\n", &[]),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            load_str("", &["mine.nope=1"]),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            load_str("", &["mine"]),
            Err(ConfigError::BadOverride(_))
        ));
        assert!(matches!(
            load_str("", &["mine.hash_min=40"]),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[api]\nbackend = \"mock\"\nscene_file = \"s.json\"\n").unwrap();
        let cfg = RunConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(cfg.api.scene_file.unwrap(), dir.path().join("s.json"));
    }

    #[test]
    fn digest_tracks_content() {
        let a = load_str("", &[]).unwrap();
        let b = load_str("", &["permute.seed=1"]).unwrap();
        assert_eq!(a.digest(), load_str("", &[]).unwrap().digest());
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
