use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    parse_bracketed, read_data, EnvFactory, EnvKind, EnvObservation, Environment, EpisodeState,
};
use crate::error::{Error, Result};
use crate::model::Task;

const SUMMARY_SENTENCES: usize = 5;
const SIMILAR_TITLES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub title: String,
    pub sentences: Vec<String>,
}

/// Small offline stand-in for an encyclopedia lookup API.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Docstore {
    articles: Vec<Article>,
    by_title: HashMap<String, usize>,
}

impl Docstore {
    pub fn new(articles: Vec<Article>) -> Result<Self> {
        let mut by_title = HashMap::new();
        for (i, article) in articles.iter().enumerate() {
            if by_title.insert(article.title.to_lowercase(), i).is_some() {
                return Err(Error::InvalidData(format!(
                    "duplicate article `{}`",
                    article.title
                )));
            }
        }
        Ok(Self { articles, by_title })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn builtin() -> Result<Self> {
        Self::from_json(include_str!("../../data/envs/docstore.json"))
    }

    pub fn get(&self, title: &str) -> Option<&Article> {
        self.by_title
            .get(&title.trim().to_lowercase())
            .map(|&i| &self.articles[i])
    }

    pub fn articles(&self) -> &[Article] {
        &self.articles
    }

    fn similar(&self, query: &str) -> Vec<&str> {
        let words: Vec<String> = query.split_whitespace().map(str::to_lowercase).collect();
        self.articles
            .iter()
            .filter(|a| {
                a.title
                    .split_whitespace()
                    .any(|w| words.iter().any(|q| q == &w.to_lowercase()))
            })
            .map(|a| a.title.as_str())
            .take(SIMILAR_TITLES)
            .collect()
    }
}

/// Lowercase, drop punctuation and articles, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Search/Lookup state shared by the QA and fact-verification environments.
#[derive(Debug, Clone, Default)]
struct Browser {
    page: Option<usize>,
    lookup: Option<(String, Vec<String>, usize)>,
}

impl Browser {
    fn search(&mut self, store: &Docstore, query: &str) -> EnvObservation {
        self.lookup = None;
        match store.by_title.get(&query.to_lowercase()) {
            Some(&i) => {
                self.page = Some(i);
                let article = &store.articles[i];
                let summary = article
                    .sentences
                    .iter()
                    .take(SUMMARY_SENTENCES)
                    .cloned()
                    .collect::<Vec<_>>()
                    .join(" ");
                EnvObservation::new(summary)
            }
            None => {
                self.page = None;
                let similar = store
                    .similar(query)
                    .iter()
                    .map(|t| format!("'{t}'"))
                    .collect::<Vec<_>>()
                    .join(", ");
                EnvObservation::new(format!("Could not find [{query}]. Similar: [{similar}]."))
            }
        }
    }

    fn lookup(&mut self, store: &Docstore, keyword: &str) -> EnvObservation {
        let Some(page) = self.page else {
            return EnvObservation::invalid();
        };
        let key = keyword.to_lowercase();
        let fresh = !matches!(&self.lookup, Some((k, _, _)) if *k == key);
        if fresh {
            let hits = store.articles[page]
                .sentences
                .iter()
                .filter(|s| s.to_lowercase().contains(&key))
                .cloned()
                .collect();
            self.lookup = Some((key, hits, 0));
        }
        let (_, hits, cursor) = self.lookup.as_mut().expect("lookup state set above");
        if *cursor >= hits.len() {
            return EnvObservation::new("No more results.");
        }
        let text = format!(
            "(Result {} / {}) {}",
            *cursor + 1,
            hits.len(),
            hits[*cursor]
        );
        *cursor += 1;
        EnvObservation::new(text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaTask {
    pub id: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_type: Option<String>,
}

pub struct QaEnv {
    store: Arc<Docstore>,
    tasks: Arc<HashMap<String, QaTask>>,
    answer: String,
    browser: Browser,
    state: EpisodeState,
}

impl Environment for QaEnv {
    fn reset(&mut self, task_id: &str) -> Result<EnvObservation> {
        let task = self
            .tasks
            .get(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
        self.answer = task.answer.clone();
        self.browser = Browser::default();
        self.state = EpisodeState::Running;
        Ok(EnvObservation::new(format!("Question: {}", task.question)))
    }

    fn step(&mut self, action: &str) -> Result<EnvObservation> {
        self.state.check_step()?;
        let Some((verb, arg)) = parse_bracketed(action) else {
            return Ok(EnvObservation::invalid());
        };
        if arg.is_empty() {
            return Ok(EnvObservation::invalid());
        }
        Ok(match verb {
            "Search" => self.browser.search(&self.store, arg),
            "Lookup" => self.browser.lookup(&self.store, arg),
            "Finish" => {
                self.state = EpisodeState::Done;
                let reward = if normalize_answer(arg) == normalize_answer(&self.answer) {
                    1.0
                } else {
                    0.0
                };
                EnvObservation::finished(format!("Episode finished, reward = {reward}"), reward)
            }
            _ => EnvObservation::invalid(),
        })
    }
}

fn index_tasks<T: Clone>(tasks: &[T], id: impl Fn(&T) -> &str) -> Result<HashMap<String, T>> {
    let mut map = HashMap::new();
    for task in tasks {
        if map.insert(id(task).to_string(), task.clone()).is_some() {
            return Err(Error::InvalidData(format!(
                "duplicate task id `{}`",
                id(task)
            )));
        }
    }
    Ok(map)
}

pub struct QaSuite {
    store: Arc<Docstore>,
    by_id: Arc<HashMap<String, QaTask>>,
    tasks: Vec<Task>,
}

impl QaSuite {
    pub fn new(store: Docstore, qa: Vec<QaTask>) -> Result<Self> {
        let tasks: Vec<Task> = qa
            .iter()
            .map(|q| Task {
                id: q.id.clone(),
                env_name: EnvKind::ToyQa.as_str().to_string(),
                description: q.question.clone(),
                task_type: q.task_type.clone(),
            })
            .collect();
        crate::model::validate_tasks(&tasks)?;
        Ok(Self {
            store: Arc::new(store),
            by_id: Arc::new(index_tasks(&qa, |q| &q.id)?),
            tasks,
        })
    }

    pub fn builtin() -> Result<Self> {
        Self::new(
            Docstore::builtin()?,
            serde_json::from_str(include_str!("../../data/envs/qa_tasks.json"))?,
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::new(
            Docstore::from_json(&read_data(dir, "docstore.json")?)?,
            serde_json::from_str(&read_data(dir, "qa_tasks.json")?)?,
        )
    }

    pub fn answer(&self, task_id: &str) -> Option<&str> {
        self.by_id.get(task_id).map(|t| t.answer.as_str())
    }

    pub fn docstore(&self) -> &Docstore {
        &self.store
    }
}

impl EnvFactory for QaSuite {
    fn kind(&self) -> EnvKind {
        EnvKind::ToyQa
    }

    fn with_tasks_json(&self, json: &str) -> Result<Arc<dyn EnvFactory>> {
        Ok(Arc::new(Self::new(
            Docstore::clone(&self.store),
            serde_json::from_str(json)?,
        )?))
    }

    fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    fn create(&self) -> Box<dyn Environment> {
        Box::new(QaEnv {
            store: self.store.clone(),
            tasks: self.by_id.clone(),
            answer: String::new(),
            browser: Browser::default(),
            state: EpisodeState::Idle,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactTask {
    pub id: String,
    pub claim: String,
    /// One of SUPPORTS, REFUTES, NOT ENOUGH INFO.
    pub label: String,
}

pub struct FactVerifyEnv {
    store: Arc<Docstore>,
    tasks: Arc<HashMap<String, FactTask>>,
    label: String,
    browser: Browser,
    state: EpisodeState,
}

const LABELS: [&str; 3] = ["SUPPORTS", "REFUTES", "NOT ENOUGH INFO"];

impl Environment for FactVerifyEnv {
    fn reset(&mut self, task_id: &str) -> Result<EnvObservation> {
        let task = self
            .tasks
            .get(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
        self.label = task.label.clone();
        self.browser = Browser::default();
        self.state = EpisodeState::Running;
        Ok(EnvObservation::new(format!("Claim: {}", task.claim)))
    }

    fn step(&mut self, action: &str) -> Result<EnvObservation> {
        self.state.check_step()?;
        let Some((verb, arg)) = parse_bracketed(action) else {
            return Ok(EnvObservation::invalid());
        };
        if arg.is_empty() {
            return Ok(EnvObservation::invalid());
        }
        Ok(match verb {
            "Search" => self.browser.search(&self.store, arg),
            "Lookup" => self.browser.lookup(&self.store, arg),
            "Finish" => {
                let answer = arg.to_uppercase();
                if !LABELS.contains(&answer.as_str()) {
                    return Ok(EnvObservation::invalid());
                }
                self.state = EpisodeState::Done;
                let reward = if answer == self.label.to_uppercase() {
                    1.0
                } else {
                    0.0
                };
                EnvObservation::finished(format!("Episode finished, reward = {reward}"), reward)
            }
            _ => EnvObservation::invalid(),
        })
    }
}

pub struct FactSuite {
    store: Arc<Docstore>,
    by_id: Arc<HashMap<String, FactTask>>,
    tasks: Vec<Task>,
}

impl FactSuite {
    pub fn new(store: Docstore, claims: Vec<FactTask>) -> Result<Self> {
        for claim in &claims {
            if !LABELS.contains(&claim.label.to_uppercase().as_str()) {
                return Err(Error::InvalidData(format!(
                    "claim `{}` has label `{}`",
                    claim.id, claim.label
                )));
            }
        }
        let tasks: Vec<Task> = claims
            .iter()
            .map(|c| Task {
                id: c.id.clone(),
                env_name: EnvKind::ToyFever.as_str().to_string(),
                description: c.claim.clone(),
                task_type: Some(c.label.to_lowercase()),
            })
            .collect();
        crate::model::validate_tasks(&tasks)?;
        Ok(Self {
            store: Arc::new(store),
            by_id: Arc::new(index_tasks(&claims, |c| &c.id)?),
            tasks,
        })
    }

    pub fn builtin() -> Result<Self> {
        Self::new(
            Docstore::builtin()?,
            serde_json::from_str(include_str!("../../data/envs/fever_tasks.json"))?,
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::new(
            Docstore::from_json(&read_data(dir, "docstore.json")?)?,
            serde_json::from_str(&read_data(dir, "fever_tasks.json")?)?,
        )
    }
}

impl EnvFactory for FactSuite {
    fn kind(&self) -> EnvKind {
        EnvKind::ToyFever
    }

    fn with_tasks_json(&self, json: &str) -> Result<Arc<dyn EnvFactory>> {
        Ok(Arc::new(Self::new(
            Docstore::clone(&self.store),
            serde_json::from_str(json)?,
        )?))
    }

    fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    fn create(&self) -> Box<dyn Environment> {
        Box::new(FactVerifyEnv {
            store: self.store.clone(),
            tasks: self.by_id.clone(),
            label: String::new(),
            browser: Browser::default(),
            state: EpisodeState::Idle,
        })
    }
}
