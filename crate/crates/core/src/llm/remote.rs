use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendReply, DecodingParams, LlmError, Tokenizer, WhitespaceTokenizer};
use crate::retrieval::Embedder;

fn default_endpoint() -> String {
    "https://api.openai.com/v1".to_string()
}

fn default_api_key_env() -> String {
    "OPENAI_API_KEY".to_string()
}

fn default_timeout() -> u64 {
    120
}

/// Connection settings for an OpenAI-compatible server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub model: String,
    #[serde(default = "default_endpoint")]
    pub endpoint: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Prompt size (in whitespace tokens) above which calls fail fast with an overflow.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_limit: Option<usize>,
}

impl RemoteConfig {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            endpoint: default_endpoint(),
            api_key_env: default_api_key_env(),
            timeout_secs: default_timeout(),
            context_limit: None,
        }
    }

    fn api_key(&self) -> Result<String, LlmError> {
        std::env::var(&self.api_key_env)
            .map_err(|_| LlmError::MissingApiKey(self.api_key_env.clone()))
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.endpoint.trim_end_matches('/'), path)
    }

    fn client(&self) -> Result<reqwest::blocking::Client, LlmError> {
        reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(self.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport {
                message: e.to_string(),
                retryable: false,
            })
    }
}

fn post_json(config: &RemoteConfig, path: &str, body: &Value) -> Result<Value, LlmError> {
    let key = config.api_key()?;
    let response = config
        .client()?
        .post(config.url(path))
        .bearer_auth(key)
        .json(body)
        .send()
        .map_err(|e| LlmError::Transport {
            message: e.to_string(),
            retryable: e.is_timeout() || e.is_connect() || e.is_request(),
        })?;
    let status = response.status().as_u16();
    let text = response.text().map_err(|e| LlmError::Transport {
        message: e.to_string(),
        retryable: true,
    })?;
    if !(200..300).contains(&status) {
        return Err(LlmError::Http { status, body: text });
    }
    serde_json::from_str(&text).map_err(|e| LlmError::Decode(e.to_string()))
}

/// Chat-completion client.
pub struct RemoteBackend {
    config: RemoteConfig,
    id: String,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let id = format!("remote:{}", config.model);
        Self { config, id }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    pub fn request_body(&self, prompt: &str, params: &DecodingParams) -> Value {
        json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        })
    }

    pub fn parse_response(body: &Value) -> Result<BackendReply, LlmError> {
        let text = body
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| LlmError::Decode("missing choices[0].message.content".into()))?;
        let usage = match (
            body.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
            body.pointer("/usage/completion_tokens")
                .and_then(Value::as_u64),
        ) {
            (Some(i), Some(o)) => Some((i, o)),
            _ => None,
        };
        Ok(BackendReply {
            text: text.to_string(),
            usage,
        })
    }
}

fn is_overflow_body(body: &str) -> bool {
    body.contains("context_length_exceeded") || body.contains("maximum context length")
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str, params: &DecodingParams) -> Result<BackendReply, LlmError> {
        let measured = WhitespaceTokenizer.count(prompt);
        if let Some(limit) = self.config.context_limit {
            if measured > limit {
                return Err(LlmError::ContextOverflow { measured, limit });
            }
        }
        match post_json(
            &self.config,
            "chat/completions",
            &self.request_body(prompt, params),
        ) {
            Ok(body) => Self::parse_response(&body),
            Err(LlmError::Http { status: 400, body }) if is_overflow_body(&body) => {
                Err(LlmError::ContextOverflow {
                    measured,
                    limit: self.config.context_limit.unwrap_or(0),
                })
            }
            Err(e) => Err(e),
        }
    }
}

/// Client for an OpenAI-compatible `/embeddings` endpoint.
pub struct RemoteEmbedder {
    config: RemoteConfig,
    id: String,
    dimension: usize,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteConfig, dimension: usize) -> Self {
        let id = format!("remote:{}", config.model);
        Self {
            config,
            id,
            dimension,
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> crate::Result<Vec<f32>> {
        let body = json!({"model": self.config.model, "input": text});
        let reply = post_json(&self.config, "embeddings", &body)?;
        let values = reply
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| LlmError::Decode("missing data[0].embedding".into()))?;
        let vector: Vec<f32> = values
            .iter()
            .filter_map(Value::as_f64)
            .map(|v| v as f32)
            .collect();
        if vector.len() != self.dimension {
            return Err(crate::Error::InvalidData(format!(
                "embedder {} returned {} dimensions, expected {}",
                self.id,
                vector.len(),
                self.dimension
            )));
        }
        Ok(vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unset_temperature_is_sent_as_zero() {
        let backend = RemoteBackend::new(RemoteConfig::new("gpt-3.5-turbo-0613"));
        let body = backend.request_body("hello", &DecodingParams::default());
        assert_eq!(body["temperature"], json!(0.0));
        assert_eq!(body["max_tokens"], json!(512));
        assert_eq!(body["messages"][0]["role"], json!("user"));
        assert_eq!(body["model"], json!("gpt-3.5-turbo-0613"));
    }

    #[test]
    fn parses_text_and_usage() {
        let body = json!({
            "choices": [{"message": {"role": "assistant", "content": "Action: Finish[x]"}}],
            "usage": {"prompt_tokens": 12, "completion_tokens": 3}
        });
        let reply = RemoteBackend::parse_response(&body).unwrap();
        assert_eq!(reply.text, "Action: Finish[x]");
        assert_eq!(reply.usage, Some((12, 3)));
        assert!(RemoteBackend::parse_response(&json!({})).is_err());
    }

    #[test]
    fn missing_key_is_reported() {
        let mut config = RemoteConfig::new("m");
        config.api_key_env = "EXPERIENTIAL_TEST_UNSET_KEY".into();
        let backend = RemoteBackend::new(config);
        let err = backend
            .complete("x", &DecodingParams::default())
            .unwrap_err();
        assert_eq!(
            err,
            LlmError::MissingApiKey("EXPERIENTIAL_TEST_UNSET_KEY".into())
        );
    }
}
