//! Completion gateway: named model roles over pluggable backends, with
//! retries, context-overflow handling and a call log for token accounting.

mod remote;
mod scripted;
mod tokens;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::PromptBundle;

pub use remote::{RemoteBackend, RemoteConfig, RemoteEmbedder};
pub use scripted::{Matcher, Rule, ScriptedBackend, ScriptedSpec};
pub use tokens::{count_tokens, Tokenizer, WhitespaceTokenizer};

pub const DEFAULT_ACTION_MAX_TOKENS: u32 = 512;
pub const DEFAULT_EXTRACTION_MAX_TOKENS: u32 = 2048;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport error: {message}")]
    Transport { message: String, retryable: bool },

    #[error("prompt of {measured} tokens exceeds context limit of {limit}")]
    ContextOverflow { measured: usize, limit: usize },

    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },

    #[error("malformed backend response: {0}")]
    Decode(String),

    #[error("environment variable `{0}` holding the API key is not set")]
    MissingApiKey(String),

    #[error("no backend bound to role `{0}`")]
    NoBackend(Role),

    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<LlmError> },
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Transport { retryable, .. } => *retryable,
            LlmError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Actor,
    Reflector,
    Extractor,
    Transfer,
}

impl Role {
    pub const ALL: [Role; 4] = [
        Role::Actor,
        Role::Reflector,
        Role::Extractor,
        Role::Transfer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Actor => "actor",
            Role::Reflector => "reflector",
            Role::Extractor => "extractor",
            Role::Transfer => "transfer",
        }
    }

    pub fn default_params(self) -> DecodingParams {
        let max_output_tokens = match self {
            Role::Actor | Role::Reflector => DEFAULT_ACTION_MAX_TOKENS,
            Role::Extractor | Role::Transfer => DEFAULT_EXTRACTION_MAX_TOKENS,
        };
        DecodingParams {
            max_output_tokens,
            ..DecodingParams::default()
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown model role `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodingStrategy {
    #[default]
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub temperature: f64,
    pub strategy: DecodingStrategy,
    pub max_output_tokens: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            strategy: DecodingStrategy::Greedy,
            max_output_tokens: DEFAULT_ACTION_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub prompt_text: String,
    pub completion_text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub backend_id: String,
}

/// Raw reply from a backend; usage is optional because not every server reports it.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub usage: Option<(u64, u64)>,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn complete(&self, prompt: &str, params: &DecodingParams) -> Result<BackendReply, LlmError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub role: Role,
    pub record: CompletionRecord,
}

struct RoleBinding {
    backend: Arc<dyn Backend>,
    fallback: Option<Arc<dyn Backend>>,
    params: DecodingParams,
}

/// Routes completions for each [`Role`] and keeps an ordered call log.
pub struct Gateway {
    roles: BTreeMap<Role, RoleBinding>,
    tokenizer: Arc<dyn Tokenizer>,
    retry: RetryPolicy,
    log: Mutex<Vec<CallRecord>>,
}

impl Default for Gateway {
    fn default() -> Self {
        Self::new()
    }
}

impl Gateway {
    pub fn new() -> Self {
        Self {
            roles: BTreeMap::new(),
            tokenizer: Arc::new(WhitespaceTokenizer),
            retry: RetryPolicy::default(),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Binds one backend to every role.
    pub fn uniform(backend: Arc<dyn Backend>) -> Self {
        let mut gw = Self::new();
        for role in Role::ALL {
            gw = gw.bind(role, backend.clone());
        }
        gw
    }

    pub fn bind(mut self, role: Role, backend: Arc<dyn Backend>) -> Self {
        self.roles.insert(
            role,
            RoleBinding {
                backend,
                fallback: None,
                params: role.default_params(),
            },
        );
        self
    }

    pub fn with_fallback(mut self, role: Role, backend: Arc<dyn Backend>) -> Self {
        if let Some(binding) = self.roles.get_mut(&role) {
            binding.fallback = Some(backend);
        }
        self
    }

    pub fn with_params(mut self, role: Role, params: DecodingParams) -> Self {
        if let Some(binding) = self.roles.get_mut(&role) {
            binding.params = params;
        }
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_tokenizer(mut self, tokenizer: Arc<dyn Tokenizer>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn has_role(&self, role: Role) -> bool {
        self.roles.contains_key(&role)
    }

    /// Completes `bundle` with the backend bound to `role`.
    ///
    /// On context overflow the role's fallback backend is tried once; without
    /// one, the oldest fewshot is dropped and the call repeated. The current
    /// task and trajectory are never truncated.
    pub fn complete(
        &self,
        role: Role,
        bundle: &PromptBundle,
    ) -> Result<CompletionRecord, LlmError> {
        let binding = self.roles.get(&role).ok_or(LlmError::NoBackend(role))?;
        let mut bundle = std::borrow::Cow::Borrowed(bundle);
        let mut backend = &binding.backend;
        let mut used_fallback = false;
        loop {
            let prompt = bundle.render();
            match self.call_with_retry(backend.as_ref(), &prompt, &binding.params) {
                Ok(reply) => {
                    let (input_tokens, output_tokens) = reply.usage.unwrap_or_else(|| {
                        (
                            self.tokenizer.count(&prompt) as u64,
                            self.tokenizer.count(&reply.text) as u64,
                        )
                    });
                    let record = CompletionRecord {
                        prompt_text: prompt,
                        completion_text: reply.text,
                        input_tokens,
                        output_tokens,
                        backend_id: backend.id().to_string(),
                    };
                    self.log
                        .lock()
                        .expect("call log poisoned")
                        .push(CallRecord {
                            role,
                            record: record.clone(),
                        });
                    return Ok(record);
                }
                Err(LlmError::ContextOverflow { measured, limit }) => {
                    if let (Some(fallback), false) = (&binding.fallback, used_fallback) {
                        log::warn!(
                            "{role}: prompt of {measured} tokens exceeds {limit}; switching to {}",
                            fallback.id()
                        );
                        backend = fallback;
                        used_fallback = true;
                    } else if !bundle.fewshots.is_empty() {
                        log::warn!("{role}: prompt of {measured} tokens exceeds {limit}; dropping oldest fewshot");
                        bundle.to_mut().fewshots.remove(0);
                    } else {
                        return Err(LlmError::ContextOverflow { measured, limit });
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn call_with_retry(
        &self,
        backend: &dyn Backend,
        prompt: &str,
        params: &DecodingParams,
    ) -> Result<BackendReply, LlmError> {
        let mut attempt = 0;
        loop {
            match backend.complete(prompt, params) {
                Ok(reply) => return Ok(reply),
                Err(e) if e.is_retryable() => {
                    if attempt >= self.retry.max_retries {
                        return Err(LlmError::RetriesExhausted {
                            attempts: attempt + 1,
                            last: Box::new(e),
                        });
                    }
                    let delay = self.retry.base_delay * 2u32.saturating_pow(attempt);
                    log::debug!("{}: retrying after {delay:?}: {e}", backend.id());
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn call_log(&self) -> Vec<CallRecord> {
        self.log.lock().expect("call log poisoned").clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("call log poisoned").len()
    }

    pub fn calls_for(&self, role: Role) -> usize {
        self.log
            .lock()
            .expect("call log poisoned")
            .iter()
            .filter(|c| c.role == role)
            .count()
    }

    /// Returns and clears the call log.
    pub fn take_log(&self) -> Vec<CallRecord> {
        std::mem::take(&mut *self.log.lock().expect("call log poisoned"))
    }
}
