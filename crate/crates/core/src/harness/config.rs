//! Run configuration: a TOML file with per-environment defaults filled in on
//! resolution, plus construction of the gateway and embedder it describes.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{load_suite, EnvFactory, EnvKind};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::gather::{GatherConfig, ReflectContext};
use crate::inference::{EvalConfig, EvalMode, RetrievalStrategy};
use crate::insights::ExtractConfig;
use crate::llm::{
    Backend, Gateway, RemoteBackend, RemoteConfig, RemoteEmbedder, Role, ScriptedBackend,
};
use crate::model::{Task, Trajectory};
use crate::retrieval::{Embedder, HashEmbedder};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

const BUILTIN_PREFIX: &str = "builtin:";
const SCRIPTED_PREFIX: &str = "scripted:";

/// Model ids per role. A role without its own entry uses `default`.
///
/// Ids are `builtin:<scenario>`, `scripted:<path to rule file>`, or the name
/// of a model served by the remote endpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMap {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflector: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<String>,
    /// Used for actor calls whose prompt overflows the primary model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor_fallback: Option<String>,
}

impl ModelMap {
    pub fn for_role(&self, role: Role) -> Option<&str> {
        let own = match role {
            Role::Actor => &self.actor,
            Role::Reflector => &self.reflector,
            Role::Extractor => &self.extractor,
            Role::Transfer => &self.transfer,
        };
        own.as_deref().or(self.default.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteSettings {
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_limit: Option<usize>,
}

impl Default for RemoteSettings {
    fn default() -> Self {
        let r = RemoteConfig::new("");
        Self {
            endpoint: r.endpoint,
            api_key_env: r.api_key_env,
            timeout_secs: r.timeout_secs,
            max_retries: 3,
            context_limit: None,
        }
    }
}

impl RemoteSettings {
    fn for_model(&self, model: &str) -> RemoteConfig {
        RemoteConfig {
            model: model.to_string(),
            endpoint: self.endpoint.clone(),
            api_key_env: self.api_key_env.clone(),
            timeout_secs: self.timeout_secs,
            context_limit: self.context_limit,
        }
    }
}

/// Agent and retrieval parameters. Unset values take the environment's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub max_retries: Option<u32>,
    pub horizon: Option<usize>,
    pub k: Option<usize>,
    pub chunk_size: Option<usize>,
    pub reflection_fewshots: Option<usize>,
    pub include_manual_in_retrieval: bool,
    pub include_reflections: bool,
    pub retrieval: RetrievalStrategy,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            max_retries: None,
            horizon: None,
            k: None,
            chunk_size: None,
            reflection_fewshots: None,
            include_manual_in_retrieval: true,
            include_reflections: false,
            retrieval: RetrievalStrategy::Task,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub chunking: u64,
    pub folds: u64,
    pub embedder: u64,
    /// Only used by random retrieval.
    pub retrieval: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    #[default]
    Hash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSettings {
    pub kind: EmbedderKind,
    pub dimension: usize,
    /// Embedding model name, for the remote kind.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl Default for EmbedderSettings {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Hash,
            dimension: crate::retrieval::DEFAULT_DIMENSION,
            model: None,
        }
    }
}

/// How tasks are divided into train and eval halves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    /// A fixed single run; when both are set no folds are drawn.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<Vec<String>>,
    /// Independent seeded splits; each yields two runs.
    pub splits: usize,
    pub train_fraction: f64,
    /// Split each task type separately.
    pub stratify: bool,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            train: None,
            eval: None,
            splits: 2,
            train_fraction: 0.5,
            stratify: false,
        }
    }
}

fn default_modes() -> Vec<EvalMode> {
    vec![EvalMode::Full]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    #[serde(default = "default_modes")]
    pub modes: Vec<EvalMode>,
    /// Directory with the environment content; the built-in content otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Task list in the environment's task-file format, replacing the content's own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<PathBuf>,
    /// Demonstration scripts; the built-in ones otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demos: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub parallel_folds: bool,
    #[serde(default)]
    pub models: ModelMap,
    #[serde(default)]
    pub remote: RemoteSettings,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub embedder: EmbedderSettings,
    #[serde(default)]
    pub split: SplitSettings,
}

impl RunConfig {
    pub fn new(env: EnvKind) -> Self {
        Self {
            env,
            modes: default_modes(),
            data_dir: None,
            tasks: None,
            demos: None,
            out_dir: default_out_dir(),
            parallel_folds: false,
            models: ModelMap::default(),
            remote: RemoteSettings::default(),
            params: Params::default(),
            seeds: Seeds::default(),
            embedder: EmbedderSettings::default(),
            split: SplitSettings::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` and makes its relative paths relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut config = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let dir = path
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let dir = std::path::absolute(dir)
            .map_err(|e| Error::io(format!("resolving {}", dir.display()), e))?;
        config.rebase(&dir);
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.data_dir, &mut self.tasks, &mut self.demos]
            .into_iter()
            .flatten()
        {
            join(p);
        }
        join(&mut self.out_dir);
        for spec in [
            &mut self.models.default,
            &mut self.models.actor,
            &mut self.models.reflector,
            &mut self.models.extractor,
            &mut self.models.transfer,
            &mut self.models.actor_fallback,
        ]
        .into_iter()
        .flatten()
        {
            if let Some(rel) = spec.strip_prefix(SCRIPTED_PREFIX) {
                if Path::new(rel).is_relative() {
                    *spec = format!("{SCRIPTED_PREFIX}{}", base.join(rel).display());
                }
            }
        }
    }

    /// A copy with every defaulted parameter written out.
    pub fn resolved(&self) -> Result<Self> {
        self.validate()?;
        let d = self.env.defaults();
        let mut r = self.clone();
        let p = &mut r.params;
        p.max_retries.get_or_insert(GatherConfig::DEFAULT_RETRIES);
        p.horizon.get_or_insert(d.horizon);
        p.k.get_or_insert(d.fewshots);
        p.chunk_size.get_or_insert(d.chunk_size);
        p.reflection_fewshots.get_or_insert(d.reflection_fewshots);
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::Config("at least one eval mode is required".into()));
        }
        for (name, v) in [
            ("horizon", self.params.horizon),
            ("k", self.params.k),
            ("chunk_size", self.params.chunk_size),
        ] {
            if v == Some(0) {
                return Err(Error::Config(format!("params.{name} must be at least 1")));
            }
        }
        if self.embedder.dimension == 0 {
            return Err(Error::Config(
                "embedder.dimension must be at least 1".into(),
            ));
        }
        if self.embedder.kind == EmbedderKind::Remote && self.embedder.model.is_none() {
            return Err(Error::Config(
                "a remote embedder needs embedder.model".into(),
            ));
        }
        let s = &self.split;
        if s.train.is_some() != s.eval.is_some() {
            return Err(Error::Config(
                "split.train and split.eval must be given together".into(),
            ));
        }
        if s.splits == 0 {
            return Err(Error::Config("split.splits must be at least 1".into()));
        }
        if !(s.train_fraction > 0.0 && s.train_fraction < 1.0) {
            return Err(Error::Config(
                "split.train_fraction must lie strictly between 0 and 1".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn param<T: Copy>(v: Option<T>, fallback: T) -> T {
        v.unwrap_or(fallback)
    }

    pub fn gather_config(&self) -> Result<GatherConfig> {
        let d = self.env.defaults();
        let mut g = GatherConfig::for_env(self.env)?;
        g.max_retries = Self::param(self.params.max_retries, g.max_retries);
        g.horizon = Self::param(self.params.horizon, g.horizon);
        g.fewshots = Self::param(self.params.k, g.fewshots);
        g.reflect = ReflectContext::for_env(
            self.env,
            Self::param(self.params.reflection_fewshots, d.reflection_fewshots),
        )?;
        Ok(g)
    }

    pub fn extract_config(&self) -> ExtractConfig {
        let mut e = ExtractConfig::for_env(self.env, self.seeds.chunking);
        e.chunk_size = Self::param(self.params.chunk_size, e.chunk_size);
        e.include_reflections = self.params.include_reflections;
        e
    }

    pub fn eval_config(&self, mode: EvalMode) -> EvalConfig {
        let mut e = EvalConfig::for_env(self.env, mode);
        e.k = Self::param(self.params.k, e.k);
        e.horizon = Self::param(self.params.horizon, e.horizon);
        e.retrieval = self.params.retrieval;
        e.seed = self.seeds.retrieval;
        e
    }

    pub fn factory(&self) -> Result<Arc<dyn EnvFactory>> {
        let suite = load_suite(self.env, self.data_dir.as_deref())?;
        match &self.tasks {
            Some(path) => {
                let json = std::fs::read_to_string(path)
                    .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
                suite.with_tasks_json(&json)
            }
            None => Ok(suite),
        }
    }

    pub fn manual_fewshots(&self, factory: &dyn EnvFactory) -> Result<Vec<Trajectory>> {
        match &self.demos {
            Some(path) => fixtures::load_manual_fewshots(factory, path),
            None => fixtures::manual_fewshots(self.env),
        }
    }

    /// Looks up `ids` in the factory, keeping their order.
    pub fn tasks_by_id(factory: &dyn EnvFactory, ids: &[String]) -> Result<Vec<Task>> {
        ids.iter()
            .map(|id| {
                factory
                    .task(id)
                    .cloned()
                    .ok_or_else(|| Error::UnknownTask(id.clone()))
            })
            .collect()
    }

    pub fn embedder(&self) -> Box<dyn Embedder> {
        match self.embedder.kind {
            EmbedderKind::Hash => Box::new(HashEmbedder::new(
                self.embedder.dimension,
                self.seeds.embedder,
            )),
            EmbedderKind::Remote => Box::new(RemoteEmbedder::new(
                self.remote
                    .for_model(self.embedder.model.as_deref().unwrap_or_default()),
                self.embedder.dimension,
            )),
        }
    }

    /// A fresh gateway with every role that has a model bound. Roles sharing a
    /// model id share one backend.
    pub fn gateway(&self) -> Result<Gateway> {
        let mut cache: HashMap<String, Arc<dyn Backend>> = HashMap::new();
        let mut gw = Gateway::new().with_retry(crate::llm::RetryPolicy {
            max_retries: self.remote.max_retries,
            ..Default::default()
        });
        for role in Role::ALL {
            if let Some(spec) = self.models.for_role(role) {
                gw = gw.bind(role, self.backend(spec, &mut cache)?);
            }
        }
        if let Some(spec) = &self.models.actor_fallback {
            gw = gw.with_fallback(Role::Actor, self.backend(spec, &mut cache)?);
        }
        Ok(gw)
    }

    fn backend(
        &self,
        spec: &str,
        cache: &mut HashMap<String, Arc<dyn Backend>>,
    ) -> Result<Arc<dyn Backend>> {
        if let Some(b) = cache.get(spec) {
            return Ok(b.clone());
        }
        let backend: Arc<dyn Backend> = if let Some(name) = spec.strip_prefix(BUILTIN_PREFIX) {
            Arc::new(builtin_scenario(name)?)
        } else if let Some(path) = spec.strip_prefix(SCRIPTED_PREFIX) {
            Arc::new(ScriptedBackend::load(Path::new(path))?)
        } else if spec.trim().is_empty() {
            return Err(Error::Config("empty model id".into()));
        } else {
            let key = &self.remote.api_key_env;
            if std::env::var_os(key).is_none() {
                return Err(Error::Config(format!(
                    "model `{spec}` needs an API key in the environment variable `{key}`, which is not set"
                )));
            }
            Arc::new(RemoteBackend::new(self.remote.for_model(spec)))
        };
        cache.insert(spec.to_string(), backend.clone());
        Ok(backend)
    }
}

/// Scripted scenarios shipped with the crate.
pub fn builtin_scenario(name: &str) -> Result<ScriptedBackend> {
    match name {
        "toyqa" => ScriptedBackend::from_json(fixtures::QA_SCENARIO),
        _ => Err(Error::Config(format!("unknown built-in scenario `{name}`"))),
    }
}
