//! Experience gathering: attempt each training task with a thought/action
//! loop, reflect on failures, and retry with the accumulated reflections.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{EnvFactory, EnvKind, Environment, INVALID_ACTION};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::llm::{Gateway, LlmError, Role};
use crate::model::{render_steps, ExperiencePool, Outcome, RenderStyle, Step, Task, Trajectory};
use crate::prompt::{fill, PromptBundle, FEWSHOT_FOOTER, FEWSHOT_HEADER};

/// Joins successive reflections in the accumulated reflection text.
pub const REFLECTION_SEPARATOR: &str = "\n";
const NO_ACTION: &str = "(no action)";

/// Parsed actor completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Intent {
    pub thoughts: Vec<String>,
    /// `None` when the completion had no usable `Action:` line.
    pub action: Option<String>,
    pub raw: String,
}

/// Reads `Thought:` lines up to the first `Action:` line; anything after the
/// action (such as an invented observation) is ignored.
pub fn parse_intent(completion: &str) -> Intent {
    let mut thoughts = Vec::new();
    let mut action = None;
    for line in completion.lines().map(str::trim) {
        if let Some(rest) = strip_label(line, "thought") {
            if !rest.is_empty() {
                thoughts.push(rest.to_string());
            }
        } else if let Some(rest) = strip_label(line, "action") {
            if !rest.is_empty() {
                action = Some(rest.to_string());
            }
            break;
        }
    }
    Intent {
        thoughts,
        action,
        raw: completion.to_string(),
    }
}

/// Strips `Label:` or `Label N:` case-insensitively.
fn strip_label<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let head = line.get(..label.len())?;
    if !head.eq_ignore_ascii_case(label) {
        return None;
    }
    let rest = line[label.len()..].trim_start_matches(|c: char| c.is_ascii_digit() || c == ' ');
    rest.strip_prefix(':').map(str::trim)
}

/// The prompt for the next action in `trajectory`.
pub fn react_bundle(
    instruction: &str,
    insights: &str,
    fewshots: Vec<String>,
    reflections: &str,
    trajectory: &Trajectory,
) -> PromptBundle {
    PromptBundle {
        instruction: instruction.to_string(),
        insights: insights.to_string(),
        fewshots,
        reflections: reflections.to_string(),
        task: task_text(trajectory),
        partial: render_steps(&trajectory.steps),
    }
}

fn task_text(trajectory: &Trajectory) -> String {
    if trajectory.initial_observation.is_empty() {
        trajectory.task_description.clone()
    } else {
        trajectory.initial_observation.clone()
    }
}

/// Asks the actor for the next step.
pub fn react_decide(gateway: &Gateway, bundle: &PromptBundle) -> Result<Intent, LlmError> {
    let record = gateway.complete(Role::Actor, bundle)?;
    Ok(parse_intent(&record.completion_text))
}

/// Runs one attempt from a fresh reset until the episode ends, the horizon is
/// reached, or the actor fails. `prompt` builds the actor prompt from the
/// trajectory so far. Backend errors halt the trajectory and are recorded on it.
pub fn run_episode(
    env: &mut dyn Environment,
    gateway: &Gateway,
    horizon: usize,
    mut trajectory: Trajectory,
    mut prompt: impl FnMut(&Trajectory) -> PromptBundle,
) -> Result<Trajectory> {
    for _ in 0..horizon {
        let bundle = prompt(&trajectory);
        let intent = match react_decide(gateway, &bundle) {
            Ok(intent) => intent,
            Err(e) => {
                log::warn!("task {}: actor failed: {e}", trajectory.task_id);
                trajectory.error = Some(e.to_string());
                trajectory.finalize(Outcome::Halted)?;
                return Ok(trajectory);
            }
        };
        let step = match &intent.action {
            Some(action) => {
                let obs = env.step(action)?;
                let done = obs.done.then_some(obs.reward);
                trajectory.append_step(
                    Step::new(action, obs.text, obs.reward, obs.valid)
                        .with_thoughts(intent.thoughts),
                )?;
                done
            }
            None => {
                let recorded = intent
                    .raw
                    .lines()
                    .map(str::trim)
                    .find(|l| !l.is_empty())
                    .unwrap_or(NO_ACTION);
                log::debug!(
                    "task {}: no action in completion {:?}",
                    trajectory.task_id,
                    intent.raw
                );
                trajectory.append_step(
                    Step::new(recorded, INVALID_ACTION, 0.0, false).with_thoughts(intent.thoughts),
                )?;
                None
            }
        };
        if let Some(reward) = step {
            let outcome = if reward >= 1.0 {
                Outcome::Success
            } else {
                Outcome::Failure
            };
            trajectory.finalize(outcome)?;
            return Ok(trajectory);
        }
    }
    trajectory.finalize(Outcome::Halted)?;
    Ok(trajectory)
}

/// The growing reflection text for one task.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionLog {
    pub task_id: String,
    pub text: String,
    pub entries: Vec<String>,
}

impl ReflectionLog {
    pub fn new(task_id: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, entry: impl Into<String>) {
        let entry = entry.into();
        if !self.entries.is_empty() {
            self.text.push_str(REFLECTION_SEPARATOR);
        }
        self.text.push_str(&entry);
        self.entries.push(entry);
    }
}

/// Fixed inputs of the reflection prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectContext {
    pub template: String,
    pub env_summary: String,
    pub exemplars: Vec<String>,
}

impl ReflectContext {
    pub fn for_env(kind: EnvKind, max_exemplars: usize) -> Result<Self> {
        let mut exemplars = fixtures::reflection_exemplars(kind)?;
        exemplars.truncate(max_exemplars);
        Ok(Self {
            template: fixtures::REFLECT_TEMPLATE.to_string(),
            env_summary: kind.summary().to_string(),
            exemplars,
        })
    }

    pub fn render(&self, failed: &Trajectory) -> String {
        let examples = if self.exemplars.is_empty() {
            String::new()
        } else {
            format!(
                "\n{FEWSHOT_HEADER}\n{}\n{FEWSHOT_FOOTER}\n",
                self.exemplars.join("\n\n")
            )
        };
        fill(
            &self.template,
            &[
                ("env_summary", &self.env_summary),
                ("examples", &examples),
                ("trajectory", failed.render(RenderStyle::Full).trim_end()),
            ],
        )
    }
}

/// Adds one reflection on `failed` to `log`.
pub fn reflect(
    gateway: &Gateway,
    ctx: &ReflectContext,
    failed: &Trajectory,
    log: &mut ReflectionLog,
) -> Result<()> {
    match failed.outcome {
        Some(Outcome::Failure | Outcome::Halted) => {}
        other => {
            return Err(Error::usage(format!(
                "can only reflect on a failed trajectory, `{}` is {}",
                failed.task_id,
                other.map_or("unfinished", Outcome::as_str)
            )))
        }
    }
    let record = gateway.complete(Role::Reflector, &PromptBundle::raw(ctx.render(failed)))?;
    log.push(record.completion_text.trim());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatherConfig {
    /// Retries after the first attempt; each task gets at most `max_retries + 1` trials.
    pub max_retries: u32,
    pub horizon: usize,
    /// How many manual demonstrations the actor sees.
    pub fewshots: usize,
    pub instruction: String,
    pub reflect: ReflectContext,
}

impl GatherConfig {
    pub const DEFAULT_RETRIES: u32 = 3;

    pub fn for_env(kind: EnvKind) -> Result<Self> {
        let d = kind.defaults();
        Ok(Self {
            max_retries: Self::DEFAULT_RETRIES,
            horizon: d.horizon,
            fewshots: d.fewshots,
            instruction: fixtures::react_instruction(kind).to_string(),
            reflect: ReflectContext::for_env(kind, d.reflection_fewshots)?,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedTask {
    pub task_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatherReport {
    pub pool: ExperiencePool,
    pub trials: usize,
    pub skipped: Vec<SkippedTask>,
    pub reflections: Vec<ReflectionLog>,
}

/// Gathers experience on `tasks` in order, starting from a pool seeded with
/// `manual`. When `flush` is given the pool is saved after every task.
pub fn gather(
    config: &GatherConfig,
    factory: &dyn EnvFactory,
    gateway: &Gateway,
    tasks: &[Task],
    manual: Vec<Trajectory>,
    flush: Option<&Path>,
) -> Result<GatherReport> {
    config.validate()?;
    let fewshots: Vec<String> = manual
        .iter()
        .take(config.fewshots)
        .map(|t| t.render(RenderStyle::Full))
        .collect();
    let mut report = GatherReport {
        pool: ExperiencePool::with_manual(manual)?,
        trials: 0,
        skipped: Vec::new(),
        reflections: Vec::new(),
    };
    for task in tasks {
        if factory.task(&task.id).is_none() {
            report.skip(&task.id, format!("unknown task `{}`", task.id));
            continue;
        }
        let mut log = ReflectionLog::new(&task.id);
        for trial in 0..=config.max_retries {
            let mut env = factory.create();
            let init = match env.reset(&task.id) {
                Ok(obs) => obs,
                Err(e) => {
                    report.skip(&task.id, format!("reset failed: {e}"));
                    break;
                }
            };
            let start = Trajectory::new(task, trial, init.text).with_reflections(log.text.clone());
            let trajectory = run_episode(env.as_mut(), gateway, config.horizon, start, |t| {
                react_bundle(&config.instruction, "", fewshots.clone(), &log.text, t)
            })?;
            let outcome = trajectory.outcome.expect("episode finalizes");
            let invalid = trajectory.steps.iter().filter(|s| !s.valid).count();
            log::info!(
                "task {} trial {}: {} in {} steps, {} invalid",
                task.id,
                trial,
                outcome.as_str(),
                trajectory.len(),
                invalid
            );
            let actor_error = trajectory.error.clone();
            let reflect_on =
                (!outcome.is_success() && trial < config.max_retries && actor_error.is_none())
                    .then(|| trajectory.clone());
            report.pool.insert(trajectory)?;
            report.trials += 1;
            if let Some(e) = actor_error {
                report.skip(&task.id, format!("actor failed on trial {trial}: {e}"));
                break;
            }
            let Some(failed) = reflect_on else { break };
            if let Err(e) = reflect(gateway, &config.reflect, &failed, &mut log) {
                report.skip(
                    &task.id,
                    format!("reflection failed after trial {trial}: {e}"),
                );
                break;
            }
        }
        report.reflections.push(log);
        if let Some(path) = flush {
            report.pool.save(path)?;
        }
    }
    Ok(report)
}

impl GatherReport {
    fn skip(&mut self, task_id: &str, reason: String) {
        log::warn!("skipping task {task_id}: {reason}");
        self.skipped.push(SkippedTask {
            task_id: task_id.to_string(),
            reason,
        });
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::env::{load_suite, QaSuite};
    use crate::llm::{Matcher, ScriptedBackend};

    fn gateway(backend: ScriptedBackend) -> Gateway {
        Gateway::uniform(Arc::new(backend))
    }

    #[test]
    fn intent_grammar() {
        let i = parse_intent("Thought: the answer may be X\nAction: Finish[X]");
        assert_eq!(i.thoughts, vec!["the answer may be X"]);
        assert_eq!(i.action.as_deref(), Some("Finish[X]"));

        let i = parse_intent("Action: Search[Y]\nObservation: made up\nAction: Finish[Z]");
        assert!(i.thoughts.is_empty());
        assert_eq!(i.action.as_deref(), Some("Search[Y]"));

        assert_eq!(parse_intent("I think we should…").action, None);
        assert_eq!(
            parse_intent("Thought 2: hm\nAction 2: look")
                .action
                .as_deref(),
            Some("look")
        );
        assert_eq!(parse_intent("Action:   ").action, None);
    }

    #[test]
    fn reflection_log_concatenates() {
        let mut log = ReflectionLog::new("t");
        log.push("I searched the wrong entity");
        assert_eq!(log.text, "I searched the wrong entity");
        let before = log.text.clone();
        log.push("second");
        assert_eq!(
            log.text,
            format!("I searched the wrong entity{REFLECTION_SEPARATOR}second")
        );
        assert!(log.text.starts_with(&before));
    }

    #[test]
    fn reflecting_on_success_is_a_usage_error() {
        let task = Task::new("t", "toyqa", "q");
        let mut ok = Trajectory::new(&task, 0, "");
        ok.finalize(Outcome::Success).unwrap();
        let gw = gateway(ScriptedBackend::new("s", "r"));
        let ctx = ReflectContext::for_env(EnvKind::ToyQa, 2).unwrap();
        let mut log = ReflectionLog::new("t");
        assert!(matches!(
            reflect(&gw, &ctx, &ok, &mut log),
            Err(Error::Usage(_))
        ));
        assert_eq!(gw.call_count(), 0);
    }

    fn qa_tasks(n: usize) -> (Arc<dyn EnvFactory>, Vec<Task>) {
        let suite = load_suite(EnvKind::ToyQa, None).unwrap();
        let tasks = suite.tasks()[..n].to_vec();
        (suite, tasks)
    }

    fn oracle_backend(suite: &QaSuite, tasks: &[Task]) -> ScriptedBackend {
        let mut b = ScriptedBackend::new("oracle", "Action: Finish[nothing]");
        for t in tasks {
            b = b.with_rule(
                Matcher::contains(format!("Current task:\nQuestion: {}", t.description)),
                format!("Action: Finish[{}]", suite.answer(&t.id).unwrap()),
            );
        }
        b
    }

    #[test]
    fn solving_everything_takes_one_trial_each() {
        let suite = QaSuite::builtin().unwrap();
        let (factory, tasks) = qa_tasks(4);
        let gw = gateway(oracle_backend(&suite, &tasks));
        let config = GatherConfig::for_env(EnvKind::ToyQa).unwrap();
        let report = gather(&config, factory.as_ref(), &gw, &tasks, Vec::new(), None).unwrap();
        assert_eq!(report.pool.len(), 4);
        assert!(report
            .pool
            .trajectories()
            .iter()
            .all(|t| t.is_success() && t.reflections_used.is_empty()));
        assert_eq!(gw.calls_for(Role::Reflector), 0);
    }

    #[test]
    fn never_succeeding_exhausts_the_budget() {
        let (factory, tasks) = qa_tasks(1);
        let gw = gateway(ScriptedBackend::new(
            "s",
            "Thought: guess\nAction: Finish[nope]",
        ));
        let config = GatherConfig::for_env(EnvKind::ToyQa).unwrap();
        let report = gather(&config, factory.as_ref(), &gw, &tasks, Vec::new(), None).unwrap();
        assert_eq!(report.pool.len(), 4);
        assert_eq!(report.trials, 4);
        assert!(report
            .pool
            .trajectories()
            .iter()
            .all(|t| t.outcome == Some(Outcome::Failure)));
        assert_eq!(gw.calls_for(Role::Reflector), 3);
        let used: Vec<&str> = report
            .pool
            .trajectories()
            .iter()
            .map(|t| t.reflections_used.as_str())
            .collect();
        for w in used.windows(2) {
            assert!(w[1].starts_with(w[0]) && w[1].len() > w[0].len());
        }
    }

    #[test]
    fn reflection_unlocks_the_second_trial() {
        let suite = QaSuite::builtin().unwrap();
        let (factory, tasks) = qa_tasks(1);
        let backend = ScriptedBackend::new("s", "Action: Finish[nope]")
            .with_rule(
                Matcher::contains("Reflection:"),
                "I should read the article before answering.",
            )
            .with_rule(
                Matcher::all_of(["Reflections from your previous attempts", "Current task:"]),
                format!("Action: Finish[{}]", suite.answer(&tasks[0].id).unwrap()),
            );
        let gw = gateway(backend);
        let config = GatherConfig::for_env(EnvKind::ToyQa).unwrap();
        let report = gather(&config, factory.as_ref(), &gw, &tasks, Vec::new(), None).unwrap();
        let outcomes: Vec<Outcome> = report
            .pool
            .trajectories()
            .iter()
            .map(|t| t.outcome.unwrap())
            .collect();
        assert_eq!(outcomes, vec![Outcome::Failure, Outcome::Success]);
        assert_eq!(
            report.pool.get(1).unwrap().reflections_used,
            "I should read the article before answering."
        );
    }

    #[test]
    fn missing_action_is_an_invalid_step_and_horizon_halts() {
        let (factory, tasks) = qa_tasks(1);
        let gw = gateway(ScriptedBackend::new("s", "I think we should look around"));
        let mut config = GatherConfig::for_env(EnvKind::ToyQa).unwrap();
        config.max_retries = 0;
        let report = gather(&config, factory.as_ref(), &gw, &tasks, Vec::new(), None).unwrap();
        let t = report.pool.get(0).unwrap();
        assert_eq!(t.outcome, Some(Outcome::Halted));
        assert_eq!(t.len(), config.horizon);
        assert!(t
            .steps
            .iter()
            .all(|s| !s.valid && s.observation == INVALID_ACTION));
    }

    #[test]
    fn unknown_tasks_are_reported_not_fatal() {
        let (factory, _) = qa_tasks(1);
        let gw = gateway(ScriptedBackend::new("s", "Action: Finish[x]"));
        let config = GatherConfig::for_env(EnvKind::ToyQa).unwrap();
        let ghost = Task::new("ghost", "toyqa", "who?");
        let report = gather(&config, factory.as_ref(), &gw, &[ghost], Vec::new(), None).unwrap();
        assert!(report.pool.is_empty());
        assert_eq!(report.skipped.len(), 1);
    }
}
