//! Single-attempt evaluation with insights and retrieved demonstrations.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{EnvFactory, EnvKind, Environment};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::gather::{react_bundle, run_episode};
use crate::insights::{render_insights, InsightSet};
use crate::llm::Gateway;
use crate::metrics::Metrics;
use crate::model::{write_atomic, ExperiencePool, Outcome, RenderStyle, Task, Trajectory};
use crate::prompt::PromptBundle;
use crate::retrieval::{Embedder, EmbeddingIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Insights and retrieved demonstrations.
    Full,
    /// Insights with the manual demonstrations.
    InsightsOnly,
    /// Retrieved demonstrations without insights.
    RetrieveOnly,
    /// Manual demonstrations only.
    Base,
}

impl EvalMode {
    pub const ALL: [EvalMode; 4] = [
        EvalMode::Full,
        EvalMode::InsightsOnly,
        EvalMode::RetrieveOnly,
        EvalMode::Base,
    ];

    pub fn uses_insights(self) -> bool {
        matches!(self, EvalMode::Full | EvalMode::InsightsOnly)
    }

    pub fn uses_retrieval(self) -> bool {
        matches!(self, EvalMode::Full | EvalMode::RetrieveOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Full => "full",
            EvalMode::InsightsOnly => "insights_only",
            EvalMode::RetrieveOnly => "retrieve_only",
            EvalMode::Base => "base",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        EvalMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

/// How demonstrations are chosen when the mode retrieves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalStrategy {
    /// Once per task, by similarity of task descriptions.
    #[default]
    Task,
    /// Before every step, by similarity to the latest thought.
    Reason,
    /// Once per task, uniformly at random with a fixed seed.
    Random,
}

impl FromStr for RetrievalStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task" => Ok(Self::Task),
            "reason" => Ok(Self::Reason),
            "random" => Ok(Self::Random),
            _ => Err(Error::Config(format!("unknown retrieval strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub horizon: usize,
    pub mode: EvalMode,
    pub retrieval: RetrievalStrategy,
    pub seed: u64,
    pub instruction: String,
}

impl EvalConfig {
    pub fn for_env(kind: EnvKind, mode: EvalMode) -> Self {
        let d = kind.defaults();
        Self {
            k: d.fewshots,
            horizon: d.horizon,
            mode,
            retrieval: RetrievalStrategy::Task,
            seed: 0,
            instruction: fixtures::react_instruction(kind).to_string(),
        }
    }
}

/// What retrieval needs: the pool the index points into, the index and the
/// embedder it was built with. The thought index is only for reason retrieval.
#[derive(Clone, Copy)]
pub struct Retriever<'a> {
    pub pool: &'a ExperiencePool,
    pub index: &'a EmbeddingIndex,
    pub embedder: &'a dyn Embedder,
    pub thought_index: Option<&'a EmbeddingIndex>,
}

impl Retriever<'_> {
    fn resolve(&self, hits: Vec<crate::retrieval::Hit>) -> Vec<&Trajectory> {
        hits.iter()
            .filter_map(|h| self.pool.get(h.pool_index))
            .collect()
    }

    /// Top-`k` successes for `task`, per `strategy`.
    pub fn for_task(
        &self,
        task: &Task,
        k: usize,
        strategy: RetrievalStrategy,
        seed: u64,
    ) -> Result<Vec<&Trajectory>> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let hits = match strategy {
            RetrievalStrategy::Random => self.index.sample_random(k, seed),
            RetrievalStrategy::Task | RetrievalStrategy::Reason => {
                self.index.query_topk(self.embedder, &task.description, k)?
            }
        };
        if hits.len() < k {
            log::warn!(
                "task {}: only {} of {k} demonstrations available",
                task.id,
                hits.len()
            );
        }
        Ok(self.resolve(hits))
    }

    pub fn for_thought(&self, thought: &str, k: usize) -> Result<Vec<&Trajectory>> {
        let index = self
            .thought_index
            .ok_or_else(|| Error::Config("reason retrieval needs an index over thoughts".into()))?;
        if k == 0 {
            return Ok(Vec::new());
        }
        Ok(self.resolve(index.query_by_reason(self.embedder, thought, k)?))
    }
}

/// The actor prompt for the next step. Insights are shown only in modes that
/// use them; `fewshots` are shown as given.
pub fn assemble_prompt(
    instruction: &str,
    trajectory: &Trajectory,
    insights: &InsightSet,
    fewshots: &[&Trajectory],
    mode: EvalMode,
) -> PromptBundle {
    let insights = if mode.uses_insights() {
        render_insights(insights)
    } else {
        String::new()
    };
    let fewshots = fewshots
        .iter()
        .map(|t| t.render(RenderStyle::Full))
        .collect();
    react_bundle(instruction, &insights, fewshots, "", trajectory)
}

/// Runs `task` once. Any failure along the way, including a failed reset or
/// retrieval, yields a halted trajectory carrying the error.
#[allow(clippy::too_many_arguments)]
pub fn run_task(
    task: &Task,
    env: &mut dyn Environment,
    gateway: &Gateway,
    insights: &InsightSet,
    manual: &[Trajectory],
    retriever: Option<&Retriever<'_>>,
    config: &EvalConfig,
) -> Result<Trajectory> {
    let halted = |init: &str, e: &Error| -> Result<Trajectory> {
        let mut t = Trajectory::new(task, 0, init);
        t.error = Some(e.to_string());
        t.finalize(Outcome::Halted)?;
        Ok(t)
    };
    let init = match env.reset(&task.id) {
        Ok(obs) => obs.text,
        Err(e) => return halted("", &e),
    };
    let fewshots: Vec<&Trajectory> = if config.mode.uses_retrieval() {
        let Some(r) = retriever else {
            return Err(Error::Config(format!(
                "mode {} needs a retrieval index",
                config.mode
            )));
        };
        match r.for_task(task, config.k, config.retrieval, config.seed) {
            Ok(f) => f,
            Err(e) => return halted(&init, &e),
        }
    } else {
        manual.iter().take(config.k).collect()
    };
    let per_step = config.mode.uses_retrieval() && config.retrieval == RetrievalStrategy::Reason;
    let mut current = fewshots;
    let start = Trajectory::new(task, 0, init);
    run_episode(env, gateway, config.horizon, start, |t| {
        if per_step {
            if let (Some(r), Some(thought)) = (retriever, t.latest_thought()) {
                match r.for_thought(thought, config.k) {
                    Ok(f) => current = f,
                    Err(e) => log::warn!("task {}: reason retrieval failed: {e}", t.task_id),
                }
            }
        }
        assemble_prompt(&config.instruction, t, insights, &current, config.mode)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub trajectories: Vec<Trajectory>,
    pub metrics: Metrics,
}

/// Runs every task once, in order, and aggregates metrics over this run's
/// trajectories and gateway calls. With `out_dir`, writes `trajectories.jsonl`,
/// one `trajectories/<task>.json` per task, and `metrics.json`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    config: &EvalConfig,
    factory: &dyn EnvFactory,
    gateway: &Gateway,
    tasks: &[Task],
    insights: &InsightSet,
    manual: &[Trajectory],
    retriever: Option<&Retriever<'_>>,
    out_dir: Option<&Path>,
) -> Result<Evaluation> {
    if tasks.is_empty() {
        return Err(Error::usage("evaluation needs at least one task"));
    }
    if config.horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let first_call = gateway.call_count();
    let mut trajectories = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut env = factory.create();
        let t = run_task(
            task,
            env.as_mut(),
            gateway,
            insights,
            manual,
            retriever,
            config,
        )?;
        log::info!(
            "eval {} [{}]: {} in {} steps",
            task.id,
            config.mode,
            t.outcome.map_or("?", Outcome::as_str),
            t.len()
        );
        trajectories.push(t);
    }
    let calls = gateway.call_log();
    let metrics = Metrics::compute(
        tasks,
        &trajectories,
        &calls[first_call.min(calls.len())..],
        gateway.tokenizer(),
    )?;
    if let Some(dir) = out_dir {
        persist(dir, &trajectories, &metrics)?;
    }
    Ok(Evaluation {
        trajectories,
        metrics,
    })
}

fn persist(dir: &Path, trajectories: &[Trajectory], metrics: &Metrics) -> Result<()> {
    let mut lines = String::new();
    for t in trajectories {
        lines.push_str(&serde_json::to_string(t)?);
        lines.push('\n');
        let name = t.task_id.replace(['/', '\\'], "_");
        write_atomic(
            &dir.join("trajectories").join(format!("{name}.json")),
            serde_json::to_string_pretty(t)?.as_bytes(),
        )?;
    }
    write_atomic(&dir.join("trajectories.jsonl"), lines.as_bytes())?;
    write_atomic(
        &dir.join("metrics.json"),
        serde_json::to_string_pretty(metrics)?.as_bytes(),
    )
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::env::{load_suite, QaSuite};
    use crate::llm::{Matcher, Role, ScriptedBackend};
    use crate::prompt::{FEWSHOT_HEADER, INSIGHTS_HEADER};
    use crate::retrieval::HashEmbedder;

    fn qa() -> (Arc<dyn EnvFactory>, QaSuite) {
        (
            load_suite(EnvKind::ToyQa, None).unwrap(),
            QaSuite::builtin().unwrap(),
        )
    }

    fn pool_of(tasks: &[Task]) -> ExperiencePool {
        let mut pool =
            ExperiencePool::with_manual(fixtures::manual_fewshots(EnvKind::ToyQa).unwrap())
                .unwrap();
        for t in tasks {
            let mut tr = Trajectory::new(t, 0, format!("Question: {}", t.description));
            tr.finalize(Outcome::Success).unwrap();
            pool.insert(tr).unwrap();
        }
        pool
    }

    #[test]
    fn mode_gating() {
        let task = Task::new("q", "toyqa", "What?");
        let t = Trajectory::new(&task, 0, "Question: What?");
        let pool = pool_of(&[Task::new("a", "toyqa", "Who?")]);
        let manual: Vec<&Trajectory> = pool.manual_fewshots().iter().collect();
        let retrieved = vec![pool.get(pool.len() - 1).unwrap()];
        let insights = InsightSet::from_texts(["Search before answering."]);
        let base = assemble_prompt("Solve.", &t, &insights, &manual, EvalMode::Base).render();
        let full = assemble_prompt("Solve.", &t, &insights, &retrieved, EvalMode::Full).render();
        let io = assemble_prompt("Solve.", &t, &insights, &manual, EvalMode::InsightsOnly).render();
        assert!(
            !base.contains(INSIGHTS_HEADER)
                && io.contains(INSIGHTS_HEADER)
                && full.contains(INSIGHTS_HEADER)
        );
        assert_eq!(
            io.replace(
                &format!("{INSIGHTS_HEADER}\n1. Search before answering.\n\n"),
                ""
            ),
            base
        );
        assert!(full.contains(FEWSHOT_HEADER) && full.contains("Question: Who?"));
        let empty = assemble_prompt("Solve.", &t, &InsightSet::new(), &retrieved, EvalMode::Full);
        assert!(empty.insights.is_empty() && !empty.fewshots.is_empty());
        assert_eq!(
            base,
            assemble_prompt("Solve.", &t, &insights, &manual, EvalMode::Base).render()
        );
    }

    #[test]
    fn base_prompt_equals_the_gathering_prompt() {
        let (_, suite) = qa();
        let task = &suite.tasks()[0];
        let manual = fixtures::manual_fewshots(EnvKind::ToyQa).unwrap();
        let config = EvalConfig::for_env(EnvKind::ToyQa, EvalMode::Base);
        let t = Trajectory::new(task, 0, format!("Question: {}", task.description));
        let few: Vec<&Trajectory> = manual.iter().take(config.k).collect();
        let gather_prompt = react_bundle(
            &config.instruction,
            "",
            manual
                .iter()
                .take(config.k)
                .map(|m| m.render(RenderStyle::Full))
                .collect(),
            "",
            &t,
        );
        assert_eq!(
            assemble_prompt(
                &config.instruction,
                &t,
                &InsightSet::new(),
                &few,
                EvalMode::Base
            ),
            gather_prompt
        );
    }

    #[test]
    fn single_attempt_outcomes() {
        let (factory, suite) = qa();
        let tasks = suite.tasks()[..4].to_vec();
        let mut backend = ScriptedBackend::new("s", "Action: Search[Nowhere]");
        for t in &tasks[..3] {
            backend = backend.with_rule(
                Matcher::contains(format!("Current task:\nQuestion: {}", t.description)),
                format!(
                    "Thought: easy\nAction: Finish[{}]",
                    suite.answer(&t.id).unwrap()
                ),
            );
        }
        let gw = Gateway::uniform(Arc::new(backend));
        let config = EvalConfig::for_env(EnvKind::ToyQa, EvalMode::Base);
        let manual = fixtures::manual_fewshots(EnvKind::ToyQa).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let eval = evaluate(
            &config,
            factory.as_ref(),
            &gw,
            &tasks,
            &InsightSet::new(),
            &manual,
            None,
            Some(dir.path()),
        )
        .unwrap();
        assert_eq!(eval.metrics.success_rate, 0.75);
        assert_eq!(eval.trajectories[0].len(), 1);
        assert_eq!(eval.trajectories[3].outcome, Some(Outcome::Halted));
        assert_eq!(eval.trajectories[3].len(), config.horizon);
        assert_eq!(gw.calls_for(Role::Reflector), 0);
        assert_eq!(eval.trajectories.len(), tasks.len());
        assert!(dir.path().join("metrics.json").exists());
        assert!(dir
            .path()
            .join("trajectories")
            .join(format!("{}.json", tasks[3].id))
            .exists());
        let persisted = std::fs::read_to_string(dir.path().join("trajectories.jsonl")).unwrap();
        assert_eq!(persisted.lines().count(), 4);
    }

    #[test]
    fn retrieval_puts_the_identical_task_first() {
        let (factory, suite) = qa();
        let tasks = suite.tasks().to_vec();
        let pool = pool_of(&tasks[..8]);
        let embedder = HashEmbedder::default();
        let index = EmbeddingIndex::build(&pool, &embedder, true).unwrap();
        let r = Retriever {
            pool: &pool,
            index: &index,
            embedder: &embedder,
            thought_index: None,
        };
        let got = r
            .for_task(&tasks[2], 3, RetrievalStrategy::Task, 0)
            .unwrap();
        assert_eq!(got[0].task_id, tasks[2].id);

        let gw = Gateway::uniform(Arc::new(ScriptedBackend::new("s", "Action: Finish[x]")));
        let config = EvalConfig::for_env(EnvKind::ToyQa, EvalMode::Full);
        let mut env = factory.create();
        let t = run_task(
            &tasks[2],
            env.as_mut(),
            &gw,
            &InsightSet::new(),
            &[],
            Some(&r),
            &config,
        )
        .unwrap();
        assert_eq!(t.len(), 1);
        let prompt = &gw.call_log()[0].record.prompt_text;
        let shown = prompt
            .find(&format!("Question: {}", tasks[2].description))
            .unwrap();
        assert!(shown < prompt.find("Current task:").unwrap());
    }

    #[test]
    fn errors_are_recorded_not_raised() {
        let (factory, suite) = qa();
        let tasks = suite.tasks()[..2].to_vec();
        let gw = Gateway::new();
        let config = EvalConfig::for_env(EnvKind::ToyQa, EvalMode::Base);
        let eval = evaluate(
            &config,
            factory.as_ref(),
            &gw,
            &tasks,
            &InsightSet::new(),
            &[],
            None,
            None,
        )
        .unwrap();
        assert!(eval
            .trajectories
            .iter()
            .all(|t| t.outcome == Some(Outcome::Halted) && t.error.is_some()));
        assert!(evaluate(
            &config,
            factory.as_ref(),
            &gw,
            &[],
            &InsightSet::new(),
            &[],
            None,
            None
        )
        .is_err());
        let full = EvalConfig::for_env(EnvKind::ToyQa, EvalMode::Full);
        assert!(evaluate(
            &full,
            factory.as_ref(),
            &gw,
            &tasks,
            &InsightSet::new(),
            &[],
            None,
            None
        )
        .is_err());
    }

    #[test]
    fn mode_names() {
        assert_eq!(
            "insights-only".parse::<EvalMode>().unwrap(),
            EvalMode::InsightsOnly
        );
        assert!("everything".parse::<EvalMode>().is_err());
        assert_eq!(
            "reason".parse::<RetrievalStrategy>().unwrap(),
            RetrievalStrategy::Reason
        );
    }
}
