//! Tasks, trajectories and the experience pool.
//!
//! The pool is persisted as JSON lines, one trajectory per line, manual
//! demonstrations first. Embeddings never live here; see [`crate::retrieval`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub env_name: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_type: Option<String>,
}

impl Task {
    pub fn new(
        id: impl Into<String>,
        env_name: impl Into<String>,
        description: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            env_name: env_name.into(),
            description: description.into(),
            task_type: None,
        }
    }

    pub fn with_type(mut self, task_type: impl Into<String>) -> Self {
        self.task_type = Some(task_type.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidData("task id is empty".into()));
        }
        if self.description.trim().is_empty() {
            return Err(Error::InvalidData(format!(
                "task `{}` has an empty description",
                self.id
            )));
        }
        Ok(())
    }
}

/// Checks that ids are unique and descriptions non-empty.
pub fn validate_tasks(tasks: &[Task]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for task in tasks {
        task.validate()?;
        if !seen.insert(task.id.as_str()) {
            return Err(Error::InvalidData(format!(
                "duplicate task id `{}`",
                task.id
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(default)]
    pub thoughts: Vec<String>,
    pub action: String,
    pub observation: String,
    pub reward: f64,
    pub valid: bool,
}

impl Step {
    pub fn new(
        action: impl Into<String>,
        observation: impl Into<String>,
        reward: f64,
        valid: bool,
    ) -> Self {
        Self {
            thoughts: Vec::new(),
            action: action.into(),
            observation: observation.into(),
            reward,
            valid,
        }
    }

    pub fn with_thoughts(mut self, thoughts: Vec<String>) -> Self {
        self.thoughts = thoughts;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.action.is_empty() {
            return Err(Error::InvalidData("step action is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.reward) {
            return Err(Error::InvalidData(format!(
                "step reward {} outside [0, 1]",
                self.reward
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    /// The step cap was reached before the environment signalled completion.
    Halted,
}

impl Outcome {
    pub fn is_success(self) -> bool {
        self == Outcome::Success
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Failure => "failure",
            Outcome::Halted => "halted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderStyle {
    Full,
    TaskOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub trial_index: u32,
    #[serde(default)]
    pub task_description: String,
    #[serde(default)]
    pub initial_observation: String,
    pub steps: Vec<Step>,
    pub outcome: Option<Outcome>,
    #[serde(default)]
    pub reflections_used: String,
    /// Hand-written demonstration rather than gathered experience.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub manual: bool,
    /// Error that cut the attempt short, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trajectory {
    pub fn new(task: &Task, trial_index: u32, initial_observation: impl Into<String>) -> Self {
        Self {
            task_id: task.id.clone(),
            trial_index,
            task_description: task.description.clone(),
            initial_observation: initial_observation.into(),
            steps: Vec::new(),
            outcome: None,
            reflections_used: String::new(),
            manual: false,
            error: None,
        }
    }

    pub fn with_reflections(mut self, reflections: impl Into<String>) -> Self {
        self.reflections_used = reflections.into();
        self
    }

    pub fn is_finalized(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn is_success(&self) -> bool {
        self.outcome == Some(Outcome::Success)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn append_step(&mut self, step: Step) -> Result<()> {
        if let Some(outcome) = self.outcome {
            return Err(Error::usage(format!(
                "cannot append a step to trajectory for `{}` already finalized as {}",
                self.task_id,
                outcome.as_str()
            )));
        }
        step.validate()?;
        self.steps.push(step);
        Ok(())
    }

    pub fn finalize(&mut self, outcome: Outcome) -> Result<()> {
        if let Some(prev) = self.outcome {
            return Err(Error::usage(format!(
                "trajectory for `{}` already finalized as {}",
                self.task_id,
                prev.as_str()
            )));
        }
        self.outcome = Some(outcome);
        Ok(())
    }

    pub fn final_reward(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.reward)
    }

    /// All thought lines, in step order.
    pub fn thoughts(&self) -> impl Iterator<Item = &str> {
        self.steps
            .iter()
            .flat_map(|s| s.thoughts.iter().map(String::as_str))
    }

    pub fn latest_thought(&self) -> Option<&str> {
        self.steps
            .iter()
            .rev()
            .find_map(|s| s.thoughts.last().map(String::as_str))
    }

    pub fn render(&self, style: RenderStyle) -> String {
        match style {
            RenderStyle::TaskOnly => self.task_description.clone(),
            RenderStyle::Full => {
                let mut out = String::new();
                if self.initial_observation.is_empty() {
                    out.push_str(&self.task_description);
                } else {
                    out.push_str(&self.initial_observation);
                }
                out.push('\n');
                out.push_str(&render_steps(&self.steps));
                out
            }
        }
    }
}

/// Thought/Action/Observation lines for each step, newline terminated.
pub fn render_steps(steps: &[Step]) -> String {
    let mut out = String::new();
    for step in steps {
        for thought in &step.thoughts {
            let _ = writeln!(out, "Thought: {thought}");
        }
        let _ = writeln!(out, "Action: {}", step.action);
        let _ = writeln!(out, "Observation: {}", step.observation);
    }
    out
}

pub fn render_trajectory(trajectory: &Trajectory, style: RenderStyle) -> String {
    trajectory.render(style)
}

/// Append-only store of trajectories, seeded with manual demonstrations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperiencePool {
    trajectories: Vec<Trajectory>,
    by_task: BTreeMap<String, Vec<usize>>,
    manual_count: usize,
}

impl ExperiencePool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_manual(fewshots: Vec<Trajectory>) -> Result<Self> {
        let mut pool = Self::new();
        for mut trajectory in fewshots {
            if pool.manual_count != pool.trajectories.len() {
                unreachable!("manual demonstrations precede gathered experience");
            }
            trajectory.manual = true;
            pool.push(trajectory)?;
            pool.manual_count += 1;
        }
        Ok(pool)
    }

    pub fn insert(&mut self, mut trajectory: Trajectory) -> Result<usize> {
        trajectory.manual = false;
        self.push(trajectory)
    }

    fn push(&mut self, trajectory: Trajectory) -> Result<usize> {
        if !trajectory.is_finalized() {
            return Err(Error::usage(format!(
                "cannot insert unfinalized trajectory for `{}` into the pool",
                trajectory.task_id
            )));
        }
        let index = self.trajectories.len();
        self.by_task
            .entry(trajectory.task_id.clone())
            .or_default()
            .push(index);
        self.trajectories.push(trajectory);
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Trajectory> {
        self.trajectories.get(index)
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn manual_fewshots(&self) -> &[Trajectory] {
        &self.trajectories[..self.manual_count]
    }

    pub fn gathered(&self) -> &[Trajectory] {
        &self.trajectories[self.manual_count..]
    }

    pub fn task_indices(&self, task_id: &str) -> &[usize] {
        self.by_task.get(task_id).map_or(&[], Vec::as_slice)
    }

    /// Task ids in lexical order with their trajectory indices.
    pub fn by_task(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.by_task
    }

    /// `(pool index, trajectory)` for every success, in insertion order.
    pub fn successes(&self, include_manual: bool) -> impl Iterator<Item = (usize, &Trajectory)> {
        let skip = if include_manual { 0 } else { self.manual_count };
        self.trajectories
            .iter()
            .enumerate()
            .skip(skip)
            .filter(|(_, t)| t.is_success())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for trajectory in &self.trajectories {
            out.push_str(&serde_json::to_string(trajectory)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses pool records. The whole input must parse; nothing partial is returned.
    pub fn from_jsonl(text: &str, origin: &Path) -> Result<Self> {
        let mut pool = Self::new();
        let mut manual_done = false;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message,
            };
            let trajectory: Trajectory =
                serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            if trajectory.outcome.is_none() {
                return Err(parse_err("record has no outcome".into()));
            }
            for step in &trajectory.steps {
                step.validate().map_err(|e| parse_err(e.to_string()))?;
            }
            if trajectory.manual {
                if manual_done {
                    return Err(parse_err(
                        "manual demonstration after gathered experience".into(),
                    ));
                }
                pool.push(trajectory)?;
                pool.manual_count += 1;
            } else {
                manual_done = true;
                pool.push(trajectory)?;
            }
        }
        Ok(pool)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.to_jsonl()?;
        write_atomic(path, body.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading pool {}", path.display()), e))?;
        Self::from_jsonl(&text, path)
    }
}

pub fn save_pool(pool: &ExperiencePool, path: &Path) -> Result<()> {
    pool.save(path)
}

pub fn load_pool(path: &Path) -> Result<ExperiencePool> {
    ExperiencePool::load(path)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    let tmp = path.with_extension("tmp~");
    let mut file =
        fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
    file.write_all(bytes)
        .and_then(|_| file.sync_all())
        .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qa_task() -> Task {
        Task::new("q1", "toyqa", "What is the capital of Arvenia?")
    }

    fn finished(task: &Task, trial: u32, outcome: Outcome) -> Trajectory {
        let mut t = Trajectory::new(task, trial, format!("Question: {}", task.description));
        t.append_step(
            Step::new("Finish[Lumen]", "Episode finished, reward = 1", 1.0, true)
                .with_thoughts(vec!["The answer is Lumen.".into()]),
        )
        .unwrap();
        t.finalize(outcome).unwrap();
        t
    }

    #[test]
    fn append_to_empty_and_to_finalized() {
        let task = qa_task();
        let mut t = Trajectory::new(&task, 0, "Question: x");
        t.append_step(Step::new("Search[x]", "nothing", 0.0, true))
            .unwrap();
        assert_eq!(t.len(), 1);
        t.finalize(Outcome::Success).unwrap();
        let err = t
            .append_step(Step::new("Search[y]", "nothing", 0.0, true))
            .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn append_up_to_horizon() {
        let task = qa_task();
        let h = 7;
        let mut t = Trajectory::new(&task, 0, "");
        for i in 0..h {
            t.append_step(Step::new(format!("Search[{i}]"), "x", 0.0, true))
                .unwrap();
        }
        assert_eq!(t.len(), h);
        assert!(!t.is_finalized());
        t.finalize(Outcome::Halted).unwrap();
    }

    #[test]
    fn rejects_bad_steps() {
        let task = qa_task();
        let mut t = Trajectory::new(&task, 0, "");
        assert!(t.append_step(Step::new("", "x", 0.0, true)).is_err());
        assert!(t.append_step(Step::new("a", "x", 1.5, true)).is_err());
    }

    #[test]
    fn render_full_and_task_only() {
        let task = qa_task();
        let t = finished(&task, 0, Outcome::Success);
        let text = t.render(RenderStyle::Full);
        assert_eq!(text.lines().filter(|l| l.starts_with("Action:")).count(), 1);
        assert_eq!(
            text.lines()
                .filter(|l| l.starts_with("Observation:"))
                .count(),
            1
        );
        assert_eq!(text, t.render(RenderStyle::Full));

        let shop = Task::new("s1", "toyshop", "buy a red mug under $20");
        let t = Trajectory::new(&shop, 0, "WebShop");
        assert_eq!(
            render_trajectory(&t, RenderStyle::TaskOnly),
            "buy a red mug under $20"
        );
    }

    #[test]
    fn pool_insert_requires_finalized() {
        let task = qa_task();
        let mut pool = ExperiencePool::new();
        let open = Trajectory::new(&task, 0, "");
        assert!(matches!(pool.insert(open), Err(Error::Usage(_))));
        assert!(pool.is_empty());
        pool.insert(finished(&task, 0, Outcome::Failure)).unwrap();
        pool.insert(finished(&task, 1, Outcome::Success)).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.task_indices("q1"), &[0, 1]);
    }

    #[test]
    fn empty_and_unicode_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        let pool = ExperiencePool::new();
        pool.save(&path).unwrap();
        assert_eq!(ExperiencePool::load(&path).unwrap(), pool);

        let task = Task::new("u1", "toyqa", "Où est la tour « Eiffel » ? 東京");
        let mut t = Trajectory::new(&task, 0, "Question: 東京 ✓");
        t.append_step(Step::new(
            "Search[東京]",
            "東京は日本の首都です。 🚆",
            0.0,
            true,
        ))
        .unwrap();
        t.finalize(Outcome::Halted).unwrap();
        let mut pool =
            ExperiencePool::with_manual(vec![finished(&qa_task(), 0, Outcome::Success)]).unwrap();
        pool.insert(t).unwrap();
        pool.save(&path).unwrap();
        let back = ExperiencePool::load(&path).unwrap();
        assert_eq!(back, pool);
        assert_eq!(back.manual_fewshots().len(), 1);
    }

    #[test]
    fn truncated_line_is_a_parse_error() {
        let task = qa_task();
        let mut pool = ExperiencePool::new();
        pool.insert(finished(&task, 0, Outcome::Failure)).unwrap();
        pool.insert(finished(&task, 1, Outcome::Success)).unwrap();
        let text = pool.to_jsonl().unwrap();
        let cut = &text[..text.len() - 20];
        let err = ExperiencePool::from_jsonl(cut, Path::new("pool.jsonl")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
