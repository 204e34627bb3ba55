//! Pipeline configuration file: one TOML document with a section per stage.
//! Command-line flags override anything set here.
//!
//! ```toml
//! seed = 7
//!
//! [curate]
//! factor = 2.0
//! min_speedup = 1.1
//!
//! [run]            # evaluation harness
//! repetitions = 3
//! runtime_quantum_seconds = 0.01
//!
//! [planner]        # chat endpoint used by plan / optimize / grpo-sample
//! endpoint_url = "http://127.0.0.1:8000/v1"
//! model_name = "planner"
//! temperature = 0.8
//! ```

use std::path::{Path, PathBuf};

use perfforge_core::orchestrate::ChatClientConfig;
use perfforge_core::rlmath::{GrpoConfig, RewardConfig};
use perfforge_core::strategy::AnnotateMode;
use perfforge_core::RunConfig;
use serde::{Deserialize, Serialize};

use crate::error::{StageError, StageResult};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub curate: CurateSection,
    #[serde(default)]
    pub annotate: AnnotateSection,
    #[serde(default)]
    pub balance: BalanceSection,
    #[serde(default)]
    pub pack: PackSection,
    #[serde(default)]
    pub run: Option<RunConfig>,
    #[serde(default)]
    pub reward: Option<RewardConfig>,
    #[serde(default)]
    pub grpo: Option<GrpoConfig>,
    #[serde(default)]
    pub extractor: ClientSection,
    #[serde(default)]
    pub planner: ClientSection,
    #[serde(default)]
    pub optimizer: ClientSection,
}

/// Default artifact locations, used when a stage's flag is omitted.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub submissions: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub annotated: Option<PathBuf>,
    pub balanced: Option<PathBuf>,
    pub packed: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub tests: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub groups: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurateSection {
    pub factor: Option<f64>,
    pub min_speedup: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotateSection {
    pub mode: Option<AnnotateMode>,
    pub concurrency: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceSection {
    pub budget: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackSection {
    pub instruction_template: Option<PathBuf>,
}

/// Partial chat-client settings; flags fill in or override fields.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSection {
    pub endpoint_url: Option<String>,
    pub model_name: Option<String>,
    pub api_key_env_var: Option<String>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub stop_sequences: Option<Vec<String>>,
    pub max_retries: Option<u32>,
    pub backoff_base_seconds: Option<f64>,
    pub concurrency_limit: Option<usize>,
    pub request_timeout_seconds: Option<f64>,
}

impl ClientSection {
    /// Fields set in `over` win.
    pub fn overlay(&self, over: &ClientSection) -> ClientSection {
        macro_rules! pick {
            ($($f:ident),*) => { ClientSection { $($f: over.$f.clone().or_else(|| self.$f.clone()),)* } };
        }
        pick!(
            endpoint_url,
            model_name,
            api_key_env_var,
            temperature,
            max_tokens,
            stop_sequences,
            max_retries,
            backoff_base_seconds,
            concurrency_limit,
            request_timeout_seconds
        )
    }

    pub fn resolve(&self, role: &str) -> StageResult<ChatClientConfig> {
        let (Some(endpoint), Some(model)) = (&self.endpoint_url, &self.model_name) else {
            return Err(StageError::usage(format!(
                "{role} endpoint and model are required (flags or the [{role}] config section)"
            )));
        };
        let mut cfg = ChatClientConfig::new(endpoint.clone(), model.clone());
        cfg.api_key_env_var = self.api_key_env_var.clone();
        if let Some(v) = self.temperature {
            cfg.temperature = v;
        }
        if let Some(v) = self.max_tokens {
            cfg.max_tokens = v;
        }
        if let Some(v) = &self.stop_sequences {
            cfg.stop_sequences = v.clone();
        }
        if let Some(v) = self.max_retries {
            cfg.max_retries = v;
        }
        if let Some(v) = self.backoff_base_seconds {
            cfg.backoff_base_seconds = v;
        }
        if let Some(v) = self.concurrency_limit {
            cfg.concurrency_limit = v;
        }
        if let Some(v) = self.request_timeout_seconds {
            cfg.request_timeout_seconds = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> StageResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text =
            std::fs::read_to_string(path).map_err(|e| StageError::input(format!("config {}: {e}", path.display())))?;
        let config: Self =
            toml::from_str(&text).map_err(|e| StageError::usage(format!("config {}: {e}", path.display())))?;
        config.paths.check_distinct()?;
        Ok(config)
    }
}

impl PathsSection {
    /// Two artifacts configured at one path would overwrite each other.
    pub fn check_distinct(&self) -> StageResult<()> {
        let named = [
            ("submissions", &self.submissions),
            ("pairs", &self.pairs),
            ("annotated", &self.annotated),
            ("balanced", &self.balanced),
            ("packed", &self.packed),
            ("candidates", &self.candidates),
            ("tests", &self.tests),
            ("results", &self.results),
            ("groups", &self.groups),
            ("taxonomy", &self.taxonomy),
            ("prompts", &self.prompts),
        ];
        let mut seen: Vec<(&str, &PathBuf)> = Vec::new();
        for (name, path) in named {
            let Some(path) = path else { continue };
            if let Some((other, _)) = seen.iter().find(|(_, p)| *p == path) {
                return Err(StageError::usage(format!(
                    "paths.{other} and paths.{name} both point at {}",
                    path.display()
                )));
            }
            seen.push((name, path));
        }
        Ok(())
    }
}

/// `flag`, else `config`, else `what` is missing (usage error).
pub fn require<T: Clone>(flag: Option<T>, config: &Option<T>, what: &str) -> StageResult<T> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| StageError::usage(format!("missing required {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let cfg: PipelineConfig = toml::from_str(
            "seed = 3\n[curate]\nfactor = 3.0\n[run]\nrepetitions = 5\n[planner]\nendpoint_url = \"http://h\"\nmodel_name = \"p\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.curate.factor, Some(3.0));
        assert_eq!(cfg.run.unwrap().repetitions, 5);
        assert_eq!(cfg.planner.resolve("planner").unwrap().model_name, "p");
        assert!(toml::from_str::<PipelineConfig>("[curate]\nfactr = 1").is_err());
    }

    #[test]
    fn duplicate_paths_rejected() {
        let cfg: PipelineConfig = toml::from_str("[paths]\npairs = \"a.jsonl\"\nannotated = \"a.jsonl\"\n").unwrap();
        assert!(cfg.paths.check_distinct().is_err());
        let cfg: PipelineConfig = toml::from_str("[paths]\npairs = \"a.jsonl\"\nannotated = \"b.jsonl\"\n").unwrap();
        assert!(cfg.paths.check_distinct().is_ok());
    }

    #[test]
    fn flags_override_config() {
        let base = ClientSection {
            endpoint_url: Some("http://a".into()),
            model_name: Some("m".into()),
            temperature: Some(0.5),
            ..Default::default()
        };
        let over = ClientSection {
            model_name: Some("n".into()),
            ..Default::default()
        };
        let merged = base.overlay(&over).resolve("planner").unwrap();
        assert_eq!((merged.model_name.as_str(), merged.temperature), ("n", 0.5));
        assert!(ClientSection::default().resolve("planner").is_err());
    }
}
