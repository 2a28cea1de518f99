//! Run configuration: a TOML file merged over command-line flags.
//!
//! Every field is optional at parse time so the two sources can be layered;
//! values from the file win over flags, flags win over built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use insight_rag::gateway::{ChatBackend, Gateway, ModelHandle, Role};
use insight_rag::pipelines::mocks::MockSpec;
use insight_rag::retrieval::{Embedder, HashingEmbedder, HttpEmbedder};
use insight_rag::{BenchmarkItem, PipelineKind};
use serde::{Deserialize, Serialize};

/// Overrides for one role's [`ModelHandle`]. A `mock` entry selects a
/// deterministic offline backend instead of an HTTP endpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleConfig {
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    pub temperature: Option<f64>,
    pub sample_temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub strip_think_blocks: Option<bool>,
    pub retry_limit: Option<u32>,
    pub parallelism_cap: Option<usize>,
    pub backoff_ms: Option<u64>,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub mock: Option<MockSpec>,
}

impl RoleConfig {
    pub fn handle(&self, role: Role) -> Result<ModelHandle> {
        let mut handle = match (&self.mock, &self.endpoint) {
            (Some(_), _) => ModelHandle::mock(role),
            (None, Some(endpoint)) => ModelHandle::new(role, endpoint.clone(), self.model_name.clone().unwrap_or_default()),
            (None, None) => bail!("models.{}: set either `endpoint` or `mock`", role.as_str()),
        };
        if let Some(v) = &self.model_name {
            handle.model_name = v.clone();
        }
        if let Some(v) = self.temperature {
            handle.temperature = v;
        }
        if let Some(v) = self.sample_temperature {
            handle.sample_temperature = v;
        }
        if let Some(v) = self.max_tokens {
            handle.max_tokens = v;
        }
        if let Some(v) = self.strip_think_blocks {
            handle.strip_think_blocks = v;
        }
        if let Some(v) = self.retry_limit {
            handle.retry_limit = v;
        }
        if let Some(v) = self.parallelism_cap {
            handle.parallelism_cap = v;
        }
        if let Some(v) = self.backoff_ms {
            handle.backoff_ms = v;
        }
        if let Some(v) = &self.api_key_env {
            handle.api_key_env = v.clone();
        }
        handle.validate()?;
        Ok(handle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderConfig {
    /// Feature hashing over lowercase tokens; offline and deterministic.
    Hashing { dim: usize },
    /// An embeddings HTTP endpoint.
    Http {
        endpoint: String,
        model: String,
        #[serde(default = "default_key_env")]
        api_key_env: String,
        #[serde(default = "default_retries")]
        retry_limit: u32,
    },
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}

fn default_retries() -> u32 {
    3
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hashing { dim: 256 }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        Ok(match self {
            EmbedderConfig::Hashing { dim } => Box::new(HashingEmbedder::new(*dim)),
            EmbedderConfig::Http {
                endpoint,
                model,
                api_key_env,
                retry_limit,
            } => Box::new(HttpEmbedder::new(endpoint, model, api_key_env, *retry_limit)?),
        })
    }
}

/// The layered configuration. Paths in a config file are relative to the
/// file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    /// Raw corpus consumed by `ingest`.
    pub corpus: Option<PathBuf>,
    /// BFS sample size; the whole corpus is kept when unset.
    pub sample_size: Option<usize>,
    pub bfs_seeds: Option<Vec<String>>,
    /// Labelled paper pairs for the matching task.
    pub matching_pairs: Option<PathBuf>,
    /// Benchmark file used instead of the one `build-bench` writes.
    pub benchmark: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
    pub relation_rules: Option<PathBuf>,
    pub stoplist: Option<PathBuf>,
    pub pipelines: Option<Vec<PipelineKind>>,
    pub k: Option<Vec<usize>>,
    pub m: Option<Vec<usize>>,
    pub embedder: Option<EmbedderConfig>,
    #[serde(default)]
    pub models: BTreeMap<Role, RoleConfig>,
}

macro_rules! layer {
    ($top:expr, $bottom:expr, $($field:ident),*) => {
        $( if $top.$field.is_none() { $top.$field = $bottom.$field.clone(); } )*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.rebase(base);
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        for path in [
            &mut self.output_dir,
            &mut self.corpus,
            &mut self.matching_pairs,
            &mut self.benchmark,
            &mut self.prompts_dir,
            &mut self.relation_rules,
            &mut self.stoplist,
        ]
        .into_iter()
        .flatten()
        {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    /// Fills every unset field of `self` from `lower`.
    pub fn over(mut self, lower: &RunConfig) -> Self {
        layer!(
            self, lower, output_dir, seed, parallelism, corpus, sample_size, bfs_seeds, matching_pairs, benchmark,
            prompts_dir, relation_rules, stoplist, pipelines, k, m, embedder
        );
        for (role, cfg) in &lower.models {
            self.models.entry(*role).or_insert_with(|| cfg.clone());
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, list) in [("k", &self.k), ("m", &self.m)] {
            if let Some(list) = list {
                if list.is_empty() || list.contains(&0) {
                    bail!("sweep list `{name}` must be non-empty and positive");
                }
            }
        }
        if self.pipelines.as_ref().is_some_and(Vec::is_empty) {
            bail!("`pipelines` must be non-empty");
        }
        for (name, path) in [
            ("corpus", &self.corpus),
            ("matching_pairs", &self.matching_pairs),
            ("benchmark", &self.benchmark),
            ("prompts_dir", &self.prompts_dir),
            ("relation_rules", &self.relation_rules),
            ("stoplist", &self.stoplist),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    bail!("{name}: {} does not exist", path.display());
                }
            }
        }
        if self.parallelism == Some(0) {
            bail!("`parallelism` must be positive");
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("insight-rag-out"))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism.unwrap_or(4)
    }

    pub fn pipelines(&self) -> Vec<PipelineKind> {
        self.pipelines.clone().unwrap_or_else(|| {
            vec![PipelineKind::Vanilla, PipelineKind::RagDoc, PipelineKind::RagTriple, PipelineKind::Insight]
        })
    }

    pub fn k(&self) -> Vec<usize> {
        self.k.clone().unwrap_or_else(|| vec![1, 3, 5, 10])
    }

    pub fn m(&self) -> Vec<usize> {
        self.m.clone().unwrap_or_else(|| vec![1, 3, 5])
    }

    pub fn embedder(&self) -> EmbedderConfig {
        self.embedder.clone().unwrap_or_default()
    }

    pub fn role(&self, role: Role) -> Result<&RoleConfig> {
        self.models
            .get(&role)
            .ok_or_else(|| anyhow!("no model configured for role `{}` (add [models.{}])", role.as_str(), role.as_str()))
    }

    /// A gateway for `role`; oracle mocks read `bench`.
    pub fn gateway(&self, role: Role, bench: &[BenchmarkItem]) -> Result<Gateway> {
        let cfg = self.role(role)?;
        let handle = cfg.handle(role)?;
        let gateway = match &cfg.mock {
            Some(spec) => {
                let backend: Arc<dyn ChatBackend> = spec.build(bench);
                Gateway::new(handle, backend)?
            }
            None => Gateway::http(handle)?,
        };
        Ok(gateway)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
        output_dir = "out"
        k = [1, 5]
        pipelines = ["vanilla", "insight"]

        [embedder]
        kind = "hashing"
        dim = 32

        [models.miner]
        mock = { kind = "oracle_miner" }

        [models.generator]
        endpoint = "http://localhost:8000/v1"
        model_name = "small"
        strip_think_blocks = true
    "#;

    #[test]
    fn parses_and_layers() {
        let mut file: RunConfig = toml::from_str(SAMPLE).unwrap();
        file.rebase(Path::new("/cfg"));
        let flags = RunConfig {
            output_dir: Some("elsewhere".into()),
            m: Some(vec![2]),
            ..Default::default()
        };
        let merged = file.over(&flags);
        assert_eq!(merged.output_dir(), PathBuf::from("/cfg/out"));
        assert_eq!(merged.m(), vec![2]);
        assert_eq!(merged.k(), vec![1, 5]);
        assert_eq!(merged.pipelines(), vec![PipelineKind::Vanilla, PipelineKind::Insight]);
        assert_eq!(merged.embedder(), EmbedderConfig::Hashing { dim: 32 });

        let miner = merged.role(Role::Miner).unwrap().handle(Role::Miner).unwrap();
        assert!(miner.is_mock());
        assert_eq!(miner.max_tokens, 100);
        let generator = merged.role(Role::Generator).unwrap().handle(Role::Generator).unwrap();
        assert_eq!(generator.model_name, "small");
        assert!(generator.strip_think_blocks);
        assert!(merged.role(Role::Judge).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(toml::from_str::<RunConfig>("colour = 1").is_err());
        let empty = RunConfig {
            k: Some(vec![]),
            ..Default::default()
        };
        assert!(empty.validate().is_err());
        let missing = RunConfig {
            corpus: Some("/definitely/not/here.jsonl".into()),
            ..Default::default()
        };
        assert!(missing.validate().unwrap_err().to_string().contains("corpus"));
        let cfg = RoleConfig {
            mock: Some(MockSpec::Extractive),
            max_tokens: Some(0),
            ..Default::default()
        };
        assert!(cfg.handle(Role::Generator).is_err());
        assert!(RoleConfig::default().handle(Role::Judge).is_err());
    }
}
