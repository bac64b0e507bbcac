//! Run configuration. Each field is taken from the first source that sets
//! it: command-line flags, then the `--config` JSON file, then `MAKA_*`
//! environment variables, then built-in defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use maka_core::agents::PromptStrategy;
use maka_core::corpus::CatalogVariant;
use maka_core::evaluation::DEFAULT_TRIAL_THRESHOLD;
use maka_core::gateway::{BackendTag, ReplayMode};
use maka_core::pipeline::DEFAULT_MAX_CONCURRENCY;
use maka_core::agents::DEFAULT_TOKEN_BUDGET;

use crate::CliError;

pub const DEFAULT_MODEL: &str = "gpt-4";
pub const DEFAULT_OUT_DIR: &str = "out";
pub const DEFAULT_SEED: i64 = 0;

/// Every setting as it may appear in a config file, the environment or on
/// the command line. Field names double as config-file keys; environment
/// variables are `MAKA_` plus the upper-cased name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub corpus_dir: Option<PathBuf>,
    pub criteria_path: Option<PathBuf>,
    pub variant: Option<String>,
    pub strategy: Option<String>,
    pub model_id: Option<String>,
    pub backend: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub replay_mode: Option<String>,
    pub script_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub max_concurrency: Option<usize>,
    pub token_budget: Option<usize>,
    pub trial_threshold: Option<usize>,
    pub seed: Option<i64>,
    pub snippets_path: Option<PathBuf>,
    pub search_results_path: Option<PathBuf>,
    pub prepared_path: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
}

macro_rules! merge_fields {
    ($hi:expr, $lo:expr, $($f:ident),*) => {
        PartialConfig { $($f: $hi.$f.or($lo.$f)),* }
    };
}

impl PartialConfig {
    /// Fields set in `self` win over `lower`.
    pub fn over(self, lower: PartialConfig) -> PartialConfig {
        merge_fields!(
            self, lower, corpus_dir, criteria_path, variant, strategy, model_id, backend, cache_dir, replay_mode,
            script_path, out_dir, max_concurrency, token_budget, trial_threshold, seed, snippets_path,
            search_results_path, prepared_path, prompts_dir
        )
    }

    pub fn from_file(path: &Path) -> Result<PartialConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn from_env(env: &dyn Fn(&str) -> Option<String>) -> Result<PartialConfig, CliError> {
        fn path(env: &dyn Fn(&str) -> Option<String>, key: &str) -> Option<PathBuf> {
            env(key).filter(|v| !v.is_empty()).map(PathBuf::from)
        }
        fn num<T: FromStr>(env: &dyn Fn(&str) -> Option<String>, key: &str) -> Result<Option<T>, CliError> {
            match env(key).filter(|v| !v.is_empty()) {
                None => Ok(None),
                Some(v) => v.parse().map(Some).map_err(|_| CliError::Usage(format!("{key}={v:?} is not a valid number"))),
            }
        }
        let text = |key: &str| env(key).filter(|v| !v.is_empty());
        Ok(PartialConfig {
            corpus_dir: path(env, "MAKA_CORPUS_DIR"),
            criteria_path: path(env, "MAKA_CRITERIA_PATH"),
            variant: text("MAKA_VARIANT"),
            strategy: text("MAKA_STRATEGY"),
            model_id: text("MAKA_MODEL_ID"),
            backend: text("MAKA_BACKEND"),
            cache_dir: path(env, "MAKA_CACHE_DIR"),
            replay_mode: text("MAKA_REPLAY_MODE"),
            script_path: path(env, "MAKA_SCRIPT_PATH"),
            out_dir: path(env, "MAKA_OUT_DIR"),
            max_concurrency: num(env, "MAKA_MAX_CONCURRENCY")?,
            token_budget: num(env, "MAKA_TOKEN_BUDGET")?,
            trial_threshold: num(env, "MAKA_TRIAL_THRESHOLD")?,
            seed: num(env, "MAKA_SEED")?,
            snippets_path: path(env, "MAKA_SNIPPETS_PATH"),
            search_results_path: path(env, "MAKA_SEARCH_RESULTS_PATH"),
            prepared_path: path(env, "MAKA_PREPARED_PATH"),
            prompts_dir: path(env, "MAKA_PROMPTS_DIR"),
        })
    }
}

/// Fully resolved settings for one command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub corpus_dir: Option<PathBuf>,
    pub criteria_path: Option<PathBuf>,
    pub variant: CatalogVariant,
    pub strategy: PromptStrategy,
    pub model_id: String,
    pub backend: BackendTag,
    pub cache_dir: Option<PathBuf>,
    pub replay_mode: ReplayMode,
    pub script_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub max_concurrency: usize,
    pub token_budget: usize,
    pub trial_threshold: usize,
    pub seed: Option<i64>,
    pub snippets_path: Option<PathBuf>,
    pub search_results_path: Option<PathBuf>,
    pub prepared_path: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
}

fn parse<T: FromStr>(what: &str, v: Option<String>, default: T) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    match v {
        None => Ok(default),
        Some(s) => s.parse().map_err(|e| CliError::Usage(format!("{what}: {e}"))),
    }
}

fn positive(what: &str, v: Option<usize>, default: usize) -> Result<usize, CliError> {
    match v.unwrap_or(default) {
        0 => Err(CliError::Usage(format!("{what} must be positive"))),
        n => Ok(n),
    }
}

/// Catalog variant a strategy is evaluated with when none is given.
pub fn default_variant(strategy: PromptStrategy) -> CatalogVariant {
    match strategy {
        PromptStrategy::ZeroShot => CatalogVariant::Redefined,
        PromptStrategy::CoT | PromptStrategy::Maka => CatalogVariant::Original,
    }
}

impl RunConfig {
    pub fn resolve(p: PartialConfig) -> Result<RunConfig, CliError> {
        let strategy = parse("strategy", p.strategy, PromptStrategy::Maka)?;
        let variant = parse("variant", p.variant, default_variant(strategy))?;
        let backend = parse("backend", p.backend, BackendTag::Http)?;
        let replay_mode = parse("replay mode", p.replay_mode, ReplayMode::Strict)?;
        let cfg = RunConfig {
            corpus_dir: p.corpus_dir,
            criteria_path: p.criteria_path,
            variant,
            strategy,
            model_id: p.model_id.unwrap_or_else(|| DEFAULT_MODEL.to_string()),
            backend,
            cache_dir: p.cache_dir,
            replay_mode,
            script_path: p.script_path,
            out_dir: p.out_dir.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
            max_concurrency: positive("max concurrency", p.max_concurrency, DEFAULT_MAX_CONCURRENCY)?,
            token_budget: positive("token budget", p.token_budget, DEFAULT_TOKEN_BUDGET)?,
            trial_threshold: positive("trial threshold", p.trial_threshold, DEFAULT_TRIAL_THRESHOLD)?,
            seed: Some(p.seed.unwrap_or(DEFAULT_SEED)),
            snippets_path: p.snippets_path,
            search_results_path: p.search_results_path,
            prepared_path: p.prepared_path,
            prompts_dir: p.prompts_dir,
        };
        if cfg.backend == BackendTag::Scripted && cfg.script_path.is_none() {
            return Err(CliError::Usage("the scripted backend needs --script".into()));
        }
        if cfg.backend == BackendTag::Replay && cfg.cache_dir.is_none() {
            return Err(CliError::Usage("the replay backend needs --cache-dir".into()));
        }
        Ok(cfg)
    }

    pub fn require_corpus(&self) -> Result<&Path, CliError> {
        self.corpus_dir.as_deref().ok_or_else(|| CliError::Usage("--corpus is required".into()))
    }

    pub fn require_criteria(&self) -> Result<&Path, CliError> {
        self.criteria_path.as_deref().ok_or_else(|| CliError::Usage("--criteria is required".into()))
    }

    /// Snapshot for the manifest, with paths relative to the output directory.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut copy = self.clone();
        let base = &self.out_dir;
        for p in [
            &mut copy.corpus_dir,
            &mut copy.criteria_path,
            &mut copy.cache_dir,
            &mut copy.script_path,
            &mut copy.snippets_path,
            &mut copy.search_results_path,
            &mut copy.prepared_path,
            &mut copy.prompts_dir,
        ] {
            if let Some(path) = p.as_mut() {
                *path = relative_to(path, base);
            }
        }
        copy.out_dir = PathBuf::from(".");
        serde_json::to_value(copy).expect("config serializes")
    }
}

fn normalized(path: &Path) -> PathBuf {
    let abs = std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf());
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            std::path::Component::CurDir => {}
            std::path::Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

/// Lexical path from `base` to `path`, both resolved against the current
/// directory.
pub fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let path = normalized(path);
    let base = normalized(base);
    let common = path.components().zip(base.components()).take_while(|(a, b)| a == b).count();
    let mut rel = PathBuf::new();
    for _ in base.components().skip(common) {
        rel.push("..");
    }
    for c in path.components().skip(common) {
        rel.push(c);
    }
    if rel.as_os_str().is_empty() {
        rel.push(".");
    }
    rel
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env_of(pairs: &'static [(&'static str, &'static str)]) -> impl Fn(&str) -> Option<String> {
        move |k| pairs.iter().find(|(n, _)| *n == k).map(|(_, v)| v.to_string())
    }

    #[test]
    fn precedence_is_flags_file_env_default() {
        let flags = PartialConfig { model_id: Some("flag-model".into()), ..Default::default() };
        let file = PartialConfig {
            model_id: Some("file-model".into()),
            token_budget: Some(500),
            ..Default::default()
        };
        let env = PartialConfig::from_env(&env_of(&[
            ("MAKA_MODEL_ID", "env-model"),
            ("MAKA_TOKEN_BUDGET", "900"),
            ("MAKA_MAX_CONCURRENCY", "3"),
        ]))
        .unwrap();
        let cfg = RunConfig::resolve(flags.over(file).over(env)).unwrap();
        assert_eq!(cfg.model_id, "flag-model");
        assert_eq!(cfg.token_budget, 500);
        assert_eq!(cfg.max_concurrency, 3);
        assert_eq!(cfg.trial_threshold, DEFAULT_TRIAL_THRESHOLD);
        assert_eq!(cfg.seed, Some(DEFAULT_SEED));
    }

    #[test]
    fn strategy_picks_the_default_variant() {
        let resolve = |s: &str| {
            RunConfig::resolve(PartialConfig { strategy: Some(s.into()), ..Default::default() }).unwrap().variant
        };
        assert_eq!(resolve("zeroshot"), CatalogVariant::Redefined);
        assert_eq!(resolve("cot"), CatalogVariant::Original);
        assert_eq!(resolve("maka"), CatalogVariant::Original);
    }

    #[test]
    fn backend_requirements() {
        let scripted = PartialConfig { backend: Some("scripted".into()), ..Default::default() };
        assert!(matches!(RunConfig::resolve(scripted), Err(CliError::Usage(_))));
        let replay = PartialConfig { backend: Some("replay".into()), ..Default::default() };
        assert!(matches!(RunConfig::resolve(replay), Err(CliError::Usage(_))));
        let bad = PartialConfig { backend: Some("carrier-pigeon".into()), ..Default::default() };
        assert!(RunConfig::resolve(bad).is_err());
        let zero = PartialConfig { max_concurrency: Some(0), ..Default::default() };
        assert!(RunConfig::resolve(zero).is_err());
    }

    #[test]
    fn bad_env_number_is_usage_error() {
        assert!(PartialConfig::from_env(&env_of(&[("MAKA_SEED", "abc")])).is_err());
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"model_id": "m", "colour": "blue"}"#).unwrap();
        assert!(PartialConfig::from_file(&path).is_err());
        std::fs::write(&path, r#"{"model_id": "m", "seed": 4}"#).unwrap();
        let p = PartialConfig::from_file(&path).unwrap();
        assert_eq!((p.model_id.as_deref(), p.seed), (Some("m"), Some(4)));
    }

    #[test]
    fn relative_paths() {
        assert_eq!(relative_to(Path::new("/a/b/c"), Path::new("/a/x")), PathBuf::from("../b/c"));
        assert_eq!(relative_to(Path::new("/a/b"), Path::new("/a/b")), PathBuf::from("."));
        assert_eq!(relative_to(Path::new("/a/b/./c/../d"), Path::new("/a")), PathBuf::from("b/d"));
    }
}
