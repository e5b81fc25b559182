//! Run configuration: a TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use gazetutor::agents::{AnalysisConfig, MatcherMode, PetMode, Thresholds};
use gazetutor::complexity::{AgentPolicy, RecruitmentPolicy};
use gazetutor::gateway::{
    RemoteConfig, DEFAULT_CONCURRENCY, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE, DEFAULT_TIMEOUT,
};
use gazetutor::graph::SynonymTable;
use gazetutor::pipeline::DEFAULT_MAX_PARALLEL_CASES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Remote {
        base_url: String,
        model_id: String,
        api_key_env: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_s: Option<u64>,
    },
    Scripted {
        script_path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model_id: Option<String>,
    },
}

impl BackendConfig {
    pub fn model_id(&self) -> &str {
        match self {
            BackendConfig::Remote { model_id, .. } => model_id,
            BackendConfig::Scripted { model_id, .. } => model_id.as_deref().unwrap_or("scripted"),
        }
    }

    pub fn remote(&self) -> Option<RemoteConfig> {
        match self {
            BackendConfig::Remote {
                base_url,
                api_key_env,
                timeout_s,
                ..
            } => Some(RemoteConfig {
                base_url: base_url.clone(),
                api_key_env: api_key_env.clone(),
                timeout: timeout_s.map_or(DEFAULT_TIMEOUT, Duration::from_secs),
            }),
            BackendConfig::Scripted { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub tolerance_ms: u64,
    pub temperature: f64,
    pub max_tokens: u32,
    pub policy: RecruitmentPolicy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agent_cap: Option<usize>,
    pub mode: PetMode,
    pub communication: bool,
    pub matcher: MatcherMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synonym_table_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distractor_table_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_parallel_agents: Option<usize>,
    pub max_parallel_cases: usize,
    pub max_concurrent_calls: usize,
    pub thresholds: Thresholds,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<BackendConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tolerance_ms: 0,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            policy: RecruitmentPolicy::default(),
            agent_cap: None,
            mode: PetMode::default(),
            communication: false,
            matcher: MatcherMode::default(),
            synonym_table_path: None,
            distractor_table_path: None,
            max_parallel_agents: None,
            max_parallel_cases: DEFAULT_MAX_PARALLEL_CASES,
            max_concurrent_calls: DEFAULT_CONCURRENCY,
            thresholds: Thresholds::default(),
            backend: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PolicyArg {
    ByComplexity,
    ByErrorCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModeArg {
    Llm,
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum MatcherArg {
    Exact,
    LlmMatcher,
}

/// Flags shared by every command that reads a run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the effective configuration and exit
    #[arg(long, global = true)]
    pub print_config: bool,
    /// Seed for corpus synthesis
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Slack around sentence windows when aligning fixations
    #[arg(long, global = true)]
    pub tolerance_ms: Option<u64>,
    /// Sampling temperature for model calls
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Completion token limit per model call
    #[arg(long, global = true)]
    pub max_tokens: Option<u32>,
    /// How many comparison agents to recruit
    #[arg(long, global = true, value_enum)]
    pub policy: Option<PolicyArg>,
    /// Upper bound on agents per case
    #[arg(long, global = true)]
    pub agent_cap: Option<usize>,
    /// Classify with the model or with the local evidence rule
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    /// Share posted verdicts between agents of a case
    #[arg(long, global = true)]
    pub communication: Option<bool>,
    /// How student findings are matched to expert findings
    #[arg(long, global = true, value_enum)]
    pub matcher: Option<MatcherArg>,
    /// JSON object mapping finding labels to canonical labels
    #[arg(long, global = true)]
    pub synonyms: Option<PathBuf>,
    /// JSON distractor table for incomplete-knowledge variants
    #[arg(long, global = true)]
    pub distractors: Option<PathBuf>,
    /// Agents run at once within a case
    #[arg(long, global = true)]
    pub max_parallel_agents: Option<usize>,
    /// Cases analyzed at once
    #[arg(long, global = true)]
    pub max_parallel_cases: Option<usize>,
    /// Overlap radius in normalized image coordinates
    #[arg(long, global = true)]
    pub radius: Option<f64>,
    /// Share of expert dwell below which a look counts as brief
    #[arg(long, global = true)]
    pub dwell_fraction: Option<f64>,
    /// Replay replies from a scripted fixture instead of calling a service
    #[arg(long, global = true, conflicts_with = "base_url")]
    pub script: Option<PathBuf>,
    /// OpenAI-compatible endpoint, e.g. https://host/v1
    #[arg(long, global = true, requires_all = ["model", "api_key_env"])]
    pub base_url: Option<String>,
    /// Model id sent to the endpoint
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Name of the environment variable holding the API key
    #[arg(long, global = true)]
    pub api_key_env: Option<String>,
}

fn resolve_path(base: Option<&Path>, p: PathBuf) -> PathBuf {
    match base {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p,
    }
}

impl RunConfig {
    pub fn from_toml(raw: &str) -> Result<Self> {
        Ok(toml::from_str(raw)?)
    }

    /// Loads the config file (paths inside it are relative to the file) and
    /// applies flag overrides.
    pub fn resolve(args: &ConfigArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            None => RunConfig::default(),
            Some(path) => {
                let raw = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let mut cfg = Self::from_toml(&raw)
                    .with_context(|| format!("parsing {}", path.display()))?;
                let base = path.parent();
                cfg.synonym_table_path = cfg.synonym_table_path.map(|p| resolve_path(base, p));
                cfg.distractor_table_path =
                    cfg.distractor_table_path.map(|p| resolve_path(base, p));
                if let Some(BackendConfig::Scripted { script_path, .. }) = &mut cfg.backend {
                    *script_path = resolve_path(base, std::mem::take(script_path));
                }
                cfg
            }
        };
        cfg.apply(args);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, a: &ConfigArgs) {
        macro_rules! set {
            ($($field:ident <- $flag:expr),* $(,)?) => {
                $(if let Some(v) = $flag.clone() { self.$field = v; })*
            };
        }
        set!(
            seed <- a.seed,
            tolerance_ms <- a.tolerance_ms,
            temperature <- a.temperature,
            max_tokens <- a.max_tokens,
            communication <- a.communication,
            max_parallel_cases <- a.max_parallel_cases,
        );
        if let Some(p) = a.policy {
            self.policy = match p {
                PolicyArg::ByComplexity => RecruitmentPolicy::ByComplexity,
                PolicyArg::ByErrorCount => RecruitmentPolicy::ByErrorCount,
            };
        }
        if let Some(m) = a.mode {
            self.mode = match m {
                ModeArg::Llm => PetMode::Llm,
                ModeArg::Reference => PetMode::Reference,
            };
        }
        if let Some(m) = a.matcher {
            self.matcher = match m {
                MatcherArg::Exact => MatcherMode::Exact,
                MatcherArg::LlmMatcher => MatcherMode::LlmMatcher,
            };
        }
        if a.agent_cap.is_some() {
            self.agent_cap = a.agent_cap;
        }
        if a.max_parallel_agents.is_some() {
            self.max_parallel_agents = a.max_parallel_agents;
        }
        if a.synonyms.is_some() {
            self.synonym_table_path = a.synonyms.clone();
        }
        if a.distractors.is_some() {
            self.distractor_table_path = a.distractors.clone();
        }
        if let Some(r) = a.radius {
            self.thresholds.radius = r;
        }
        if let Some(d) = a.dwell_fraction {
            self.thresholds.dwell_fraction = d;
        }
        if let Some(script_path) = &a.script {
            self.backend = Some(BackendConfig::Scripted {
                script_path: script_path.clone(),
                model_id: a.model.clone(),
            });
        } else if let (Some(base_url), Some(model_id), Some(api_key_env)) =
            (&a.base_url, &a.model, &a.api_key_env)
        {
            self.backend = Some(BackendConfig::Remote {
                base_url: base_url.clone(),
                model_id: model_id.clone(),
                api_key_env: api_key_env.clone(),
                timeout_s: None,
            });
        } else if let Some(model) = &a.model {
            match &mut self.backend {
                Some(BackendConfig::Remote { model_id, .. }) => *model_id = model.clone(),
                Some(BackendConfig::Scripted { model_id, .. }) => *model_id = Some(model.clone()),
                None => {}
            }
        }
        if let (Some(env), Some(BackendConfig::Remote { api_key_env, .. })) =
            (&a.api_key_env, &mut self.backend)
        {
            *api_key_env = env.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.temperature) {
            bail!("temperature must be within [0, 2], got {}", self.temperature);
        }
        if self.thresholds.radius.is_nan() || self.thresholds.radius <= 0.0 {
            bail!("thresholds.radius must be positive");
        }
        if !(0.0..=1.0).contains(&self.thresholds.dwell_fraction) {
            bail!("thresholds.dwell_fraction must be within [0, 1]");
        }
        if self.max_parallel_cases == 0 || self.max_concurrent_calls == 0 {
            bail!("parallelism limits must be at least 1");
        }
        if self.max_parallel_agents == Some(0) {
            bail!("max_parallel_agents must be at least 1");
        }
        if let Some(BackendConfig::Remote {
            base_url,
            model_id,
            api_key_env,
            ..
        }) = &self.backend
        {
            if base_url.is_empty() || model_id.is_empty() || api_key_env.is_empty() {
                bail!("remote backend needs base_url, model_id and api_key_env");
            }
        }
        let needs_backend = self.mode == PetMode::Llm || self.matcher == MatcherMode::LlmMatcher;
        if needs_backend && self.backend.is_none() {
            bail!("mode `llm` and matcher `llm_matcher` need a [backend] section or --script / --base-url");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn synonyms(&self) -> Result<SynonymTable> {
        match &self.synonym_table_path {
            None => Ok(SynonymTable::default()),
            Some(p) => {
                let raw = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&raw).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    pub fn analysis(&self) -> Result<AnalysisConfig> {
        Ok(AnalysisConfig {
            tolerance_ms: self.tolerance_ms,
            policy: AgentPolicy {
                kind: self.policy,
                agent_cap: self.agent_cap,
            },
            mode: self.mode,
            matcher: self.matcher,
            synonyms: self.synonyms()?,
            thresholds: self.thresholds,
            communication: self.communication,
            max_parallel_agents: self.max_parallel_agents,
            model_id: self
                .backend
                .as_ref()
                .map(|b| b.model_id().to_string())
                .unwrap_or_default(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        })
    }
}
