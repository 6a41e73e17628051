//! Deterministic text environments.
//!
//! Every environment follows the same reset/step contract: `reset` returns the
//! canonical initial observation for a task, `step` parses one action in the
//! environment's grammar. Unparseable or inapplicable actions produce
//! [`INVALID_ACTION`] with zero reward and leave the episode running.

mod docstore;
mod household;
mod shop;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;

pub use docstore::{
    normalize_answer, Article, Docstore, FactSuite, FactTask, FactVerifyEnv, QaEnv, QaSuite, QaTask,
};
pub use household::{HouseholdEnv, HouseholdSuite, HouseholdTask, World, TASK_TYPES};
pub use shop::{
    r_type, shop_reward, text_match, CatalogItem, ShopEnv, ShopGoal, ShopItem, ShopSuite, ShopTask,
    SimpleTagger, TitleTagger, RESULTS_PER_PAGE,
};

pub const INVALID_ACTION: &str = "Invalid action.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvObservation {
    pub text: String,
    pub reward: f64,
    pub done: bool,
    /// Whether the environment accepted the action.
    pub valid: bool,
}

impl EnvObservation {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            reward: 0.0,
            done: false,
            valid: true,
        }
    }

    pub fn invalid() -> Self {
        Self {
            text: INVALID_ACTION.to_string(),
            reward: 0.0,
            done: false,
            valid: false,
        }
    }

    pub fn finished(text: impl Into<String>, reward: f64) -> Self {
        Self {
            text: text.into(),
            reward,
            done: true,
            valid: true,
        }
    }
}

pub trait Environment: Send {
    fn reset(&mut self, task_id: &str) -> Result<EnvObservation>;

    fn step(&mut self, action: &str) -> Result<EnvObservation>;
}

/// A family of tasks plus the means to instantiate fresh environments for them.
pub trait EnvFactory: Send + Sync {
    fn kind(&self) -> EnvKind;

    fn tasks(&self) -> &[Task];

    fn create(&self) -> Box<dyn Environment>;

    fn task(&self, id: &str) -> Option<&Task> {
        self.tasks().iter().find(|t| t.id == id)
    }

    /// The same content (docstore, catalog, worlds) with a different task list,
    /// given as JSON in the family's task-file format.
    fn with_tasks_json(&self, json: &str) -> Result<Arc<dyn EnvFactory>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    /// Multi-hop question answering over a small docstore.
    ToyQa,
    /// Product search and purchase with attribute-matching reward.
    ToyShop,
    /// Household object manipulation.
    Household,
    /// Claim verification over the same docstore as ToyQa.
    ToyFever,
}

/// Per-family defaults: step cap, fewshot count, success chunk size, reflection exemplars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyDefaults {
    pub horizon: usize,
    pub fewshots: usize,
    pub chunk_size: usize,
    pub reflection_fewshots: usize,
}

impl EnvKind {
    pub const ALL: [EnvKind; 4] = [
        EnvKind::ToyQa,
        EnvKind::ToyShop,
        EnvKind::Household,
        EnvKind::ToyFever,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::ToyQa => "toyqa",
            EnvKind::ToyShop => "toyshop",
            EnvKind::Household => "household",
            EnvKind::ToyFever => "toyfever",
        }
    }

    pub fn defaults(self) -> FamilyDefaults {
        match self {
            EnvKind::ToyQa => FamilyDefaults {
                horizon: 7,
                fewshots: 6,
                chunk_size: 8,
                reflection_fewshots: 2,
            },
            EnvKind::ToyShop => FamilyDefaults {
                horizon: 15,
                fewshots: 2,
                chunk_size: 4,
                reflection_fewshots: 2,
            },
            EnvKind::Household => FamilyDefaults {
                horizon: 20,
                fewshots: 2,
                chunk_size: 8,
                reflection_fewshots: 2,
            },
            // L and the reflection count follow the QA family, which shares its tools.
            EnvKind::ToyFever => FamilyDefaults {
                horizon: 7,
                fewshots: 3,
                chunk_size: 8,
                reflection_fewshots: 2,
            },
        }
    }

    /// One-line summary used in transfer prompts.
    pub fn summary(self) -> &'static str {
        match self {
            EnvKind::ToyQa => {
                "answering multi-hop questions by searching and looking up articles in a document store"
            }
            EnvKind::ToyShop => "finding and buying a product that matches an instruction on a shopping website",
            EnvKind::Household => "completing household chores by moving and processing objects in a room",
            EnvKind::ToyFever => {
                "deciding whether a claim is supported, refuted, or lacks evidence by searching a document store"
            }
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown environment `{s}`")))
    }
}

/// Loads the built-in content for `kind`, or content from `dir` when given.
pub fn load_suite(kind: EnvKind, dir: Option<&Path>) -> Result<Arc<dyn EnvFactory>> {
    Ok(match kind {
        EnvKind::ToyQa => Arc::new(match dir {
            Some(d) => QaSuite::load(d)?,
            None => QaSuite::builtin()?,
        }),
        EnvKind::ToyFever => Arc::new(match dir {
            Some(d) => FactSuite::load(d)?,
            None => FactSuite::builtin()?,
        }),
        EnvKind::ToyShop => Arc::new(match dir {
            Some(d) => ShopSuite::load(d)?,
            None => ShopSuite::builtin()?,
        }),
        EnvKind::Household => Arc::new(match dir {
            Some(d) => HouseholdSuite::load(d)?,
            None => HouseholdSuite::builtin()?,
        }),
    })
}

pub(crate) fn read_data(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Guards against stepping a finished or never-reset episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) enum EpisodeState {
    #[default]
    Idle,
    Running,
    Done,
}

impl EpisodeState {
    pub(crate) fn check_step(self) -> Result<()> {
        match self {
            EpisodeState::Running => Ok(()),
            EpisodeState::Done => Err(Error::usage("step called on a finished episode")),
            EpisodeState::Idle => Err(Error::usage("step called before reset")),
        }
    }
}

/// Splits `Verb[argument]`; `None` when the text does not have that shape.
pub(crate) fn parse_bracketed(action: &str) -> Option<(&str, &str)> {
    let action = action.trim();
    let open = action.find('[')?;
    if !action.ends_with(']') {
        return None;
    }
    let verb = action[..open].trim();
    let arg = action[open + 1..action.len() - 1].trim();
    if verb.is_empty() || verb.contains(char::is_whitespace) {
        return None;
    }
    Some((verb, arg))
}
