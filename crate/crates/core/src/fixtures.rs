//! Shipped prompt templates, reflection exemplars, manual demonstrations and
//! scripted scenarios.
//!
//! Manual demonstrations are stored as action scripts and replayed through
//! the real environment on load, so their observations always agree with
//! the environment code.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{load_suite, EnvFactory, EnvKind};
use crate::error::{Error, Result};
use crate::model::{Outcome, Step, Trajectory};

pub const REFLECT_TEMPLATE: &str = include_str!("../data/prompts/reflect.txt");
pub const EXTRACT_COMPARE_TEMPLATE: &str = include_str!("../data/prompts/extract_compare.txt");
pub const EXTRACT_SUCCESS_TEMPLATE: &str = include_str!("../data/prompts/extract_success.txt");
pub const TRANSFER_TEMPLATE: &str = include_str!("../data/prompts/transfer.txt");

/// Scripted backend for the ToyQA train/eval scenario.
pub const QA_SCENARIO: &str = include_str!("../data/scenarios/toyqa.json");

pub fn react_instruction(kind: EnvKind) -> &'static str {
    match kind {
        EnvKind::ToyQa => include_str!("../data/prompts/react_toyqa.txt"),
        EnvKind::ToyFever => include_str!("../data/prompts/react_toyfever.txt"),
        EnvKind::ToyShop => include_str!("../data/prompts/react_toyshop.txt"),
        EnvKind::Household => include_str!("../data/prompts/react_household.txt"),
    }
}

pub fn reflection_exemplars(kind: EnvKind) -> Result<Vec<String>> {
    let mut all: BTreeMap<String, Vec<String>> =
        serde_json::from_str(include_str!("../data/prompts/reflections.json"))?;
    Ok(all.remove(kind.as_str()).unwrap_or_default())
}

fn demo_source(kind: EnvKind) -> &'static str {
    match kind {
        EnvKind::ToyQa => include_str!("../data/fewshots/toyqa.json"),
        EnvKind::ToyFever => include_str!("../data/fewshots/toyfever.json"),
        EnvKind::ToyShop => include_str!("../data/fewshots/toyshop.json"),
        EnvKind::Household => include_str!("../data/fewshots/household.json"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedStep {
    #[serde(default)]
    pub thoughts: Vec<String>,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoScript {
    pub task_id: String,
    pub steps: Vec<ScriptedStep>,
}

/// Demonstration tasks in the environment's own task format, plus the
/// action script solving each of them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoFile {
    pub tasks: serde_json::Value,
    pub demos: Vec<DemoScript>,
}

/// Replays every script against `content` extended with the demo tasks.
/// Each demo must end the episode with reward 1 on its last action.
pub fn replay_demos(content: &dyn EnvFactory, json: &str) -> Result<Vec<Trajectory>> {
    let file: DemoFile = serde_json::from_str(json)?;
    let suite = content.with_tasks_json(&file.tasks.to_string())?;
    let mut out = Vec::with_capacity(file.demos.len());
    for demo in &file.demos {
        let task = suite
            .task(&demo.task_id)
            .ok_or_else(|| Error::UnknownTask(demo.task_id.clone()))?;
        let mut env = suite.create();
        let init = env.reset(&task.id)?;
        let mut trajectory = Trajectory::new(task, 0, init.text);
        trajectory.manual = true;
        let mut finished = None;
        for (i, scripted) in demo.steps.iter().enumerate() {
            if finished.is_some() {
                return Err(Error::InvalidData(format!(
                    "demo `{}` continues after the episode ended",
                    demo.task_id
                )));
            }
            let obs = env.step(&scripted.action)?;
            if !obs.valid {
                return Err(Error::InvalidData(format!(
                    "demo `{}` step {} (`{}`) is not a valid action",
                    demo.task_id,
                    i + 1,
                    scripted.action
                )));
            }
            trajectory.append_step(
                Step::new(&scripted.action, obs.text, obs.reward, true)
                    .with_thoughts(scripted.thoughts.clone()),
            )?;
            if obs.done {
                finished = Some(obs.reward);
            }
        }
        if finished != Some(1.0) {
            return Err(Error::InvalidData(format!(
                "demo `{}` does not solve its task",
                demo.task_id
            )));
        }
        trajectory.finalize(Outcome::Success)?;
        out.push(trajectory);
    }
    Ok(out)
}

/// The shipped demonstrations for `kind`, replayed against built-in content.
pub fn manual_fewshots(kind: EnvKind) -> Result<Vec<Trajectory>> {
    let suite = load_suite(kind, None)?;
    replay_demos(suite.as_ref(), demo_source(kind))
}

/// Demonstrations from `path`, replayed against `content`.
pub fn load_manual_fewshots(content: &dyn EnvFactory, path: &Path) -> Result<Vec<Trajectory>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading demonstrations {}", path.display()), e))?;
    replay_demos(content, &text)
}
