use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendReply, DecodingParams, LlmError, Tokenizer, WhitespaceTokenizer};
use crate::error::{Error, Result};

/// Conditions over the prompt text; every listed condition must hold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Matcher {
    pub all_of: Vec<String>,
    pub none_of: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regex: Option<String>,
}

impl Matcher {
    pub fn contains(needle: impl Into<String>) -> Self {
        Self {
            all_of: vec![needle.into()],
            ..Self::default()
        }
    }

    pub fn all_of<I, S>(needles: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            all_of: needles.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    pub fn and_not(mut self, needle: impl Into<String>) -> Self {
        self.none_of.push(needle.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub when: Matcher,
    pub respond: String,
}

impl Rule {
    pub fn new(when: Matcher, respond: impl Into<String>) -> Self {
        Self {
            when,
            respond: respond.into(),
        }
    }
}

/// On-disk form of a scripted backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedSpec {
    pub id: String,
    #[serde(default)]
    pub default_response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_limit: Option<usize>,
    #[serde(default)]
    pub rules: Vec<Rule>,
}

struct CompiledRule {
    rule: Rule,
    regex: Option<Regex>,
}

impl CompiledRule {
    fn matches(&self, prompt: &str) -> bool {
        self.rule
            .when
            .all_of
            .iter()
            .all(|n| prompt.contains(n.as_str()))
            && !self
                .rule
                .when
                .none_of
                .iter()
                .any(|n| prompt.contains(n.as_str()))
            && self.regex.as_ref().is_none_or(|re| re.is_match(prompt))
    }
}

/// Deterministic backend answering from an ordered rule table.
/// The first matching rule wins; otherwise the default response is returned.
pub struct ScriptedBackend {
    id: String,
    rules: Vec<CompiledRule>,
    default_response: String,
    context_limit: Option<usize>,
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>, default_response: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            rules: Vec::new(),
            default_response: default_response.into(),
            context_limit: None,
        }
    }

    pub fn with_rule(mut self, when: Matcher, respond: impl Into<String>) -> Self {
        self.push(Rule::new(when, respond))
            .expect("rule without a regex always compiles");
        self
    }

    pub fn with_context_limit(mut self, limit: usize) -> Self {
        self.context_limit = Some(limit);
        self
    }

    fn push(&mut self, rule: Rule) -> Result<()> {
        let regex = match &rule.when.regex {
            Some(pattern) => Some(
                Regex::new(pattern)
                    .map_err(|e| Error::InvalidData(format!("bad rule regex {pattern:?}: {e}")))?,
            ),
            None => None,
        };
        self.rules.push(CompiledRule { rule, regex });
        Ok(())
    }

    pub fn from_spec(spec: ScriptedSpec) -> Result<Self> {
        let mut backend = Self::new(spec.id, spec.default_response);
        backend.context_limit = spec.context_limit;
        for rule in spec.rules {
            backend.push(rule)?;
        }
        Ok(backend)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_spec(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading scripted backend {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn respond(&self, prompt: &str) -> &str {
        self.rules
            .iter()
            .find(|r| r.matches(prompt))
            .map_or(self.default_response.as_str(), |r| r.rule.respond.as_str())
    }

    pub fn rule_count(&self) -> usize {
        self.rules.len()
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str, _params: &DecodingParams) -> Result<BackendReply, LlmError> {
        if let Some(limit) = self.context_limit {
            let measured = WhitespaceTokenizer.count(prompt);
            if measured > limit {
                return Err(LlmError::ContextOverflow { measured, limit });
            }
        }
        Ok(BackendReply {
            text: self.respond(prompt).to_string(),
            usage: None,
        })
    }
}
