//! Evaluation metrics: success rate, per-type rates, outcome breakdown and
//! per-trajectory step and token counts.

use std::collections::{BTreeMap, HashMap};
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{count_tokens, CallRecord, Tokenizer};
use crate::model::{Outcome, Task, Trajectory};

/// Counts for one trajectory, or summed over several.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounts {
    pub thoughts: u64,
    pub actions: u64,
    pub observations: u64,
    pub invalid_actions: u64,
    pub thought_tokens: u64,
    pub action_tokens: u64,
    pub observation_tokens: u64,
}

impl StepCounts {
    pub fn of(trajectory: &Trajectory, tokenizer: &dyn Tokenizer) -> Self {
        let mut c = Self::default();
        for step in &trajectory.steps {
            c.thoughts += step.thoughts.len() as u64;
            c.thought_tokens += step
                .thoughts
                .iter()
                .map(|t| count_tokens(t, tokenizer) as u64)
                .sum::<u64>();
            c.actions += 1;
            c.action_tokens += count_tokens(&step.action, tokenizer) as u64;
            c.observations += 1;
            c.observation_tokens += count_tokens(&step.observation, tokenizer) as u64;
            if !step.valid {
                c.invalid_actions += 1;
            }
        }
        c
    }

    pub fn averaged(&self, n: usize) -> StepAverages {
        let d = n.max(1) as f64;
        StepAverages {
            thoughts: self.thoughts as f64 / d,
            actions: self.actions as f64 / d,
            observations: self.observations as f64 / d,
            invalid_actions: self.invalid_actions as f64 / d,
            thought_tokens: self.thought_tokens as f64 / d,
            action_tokens: self.action_tokens as f64 / d,
            observation_tokens: self.observation_tokens as f64 / d,
        }
    }
}

impl AddAssign for StepCounts {
    fn add_assign(&mut self, o: Self) {
        self.thoughts += o.thoughts;
        self.actions += o.actions;
        self.observations += o.observations;
        self.invalid_actions += o.invalid_actions;
        self.thought_tokens += o.thought_tokens;
        self.action_tokens += o.action_tokens;
        self.observation_tokens += o.observation_tokens;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepAverages {
    pub thoughts: f64,
    pub actions: f64,
    pub observations: f64,
    pub invalid_actions: f64,
    pub thought_tokens: f64,
    pub action_tokens: f64,
    pub observation_tokens: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl TokenUsage {
    pub fn from_calls<'a>(calls: impl IntoIterator<Item = &'a CallRecord>) -> Self {
        calls.into_iter().fold(Self::default(), |mut u, c| {
            u.calls += 1;
            u.input_tokens += c.record.input_tokens;
            u.output_tokens += c.record.output_tokens;
            u
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeBreakdown {
    pub success: u64,
    pub failure: u64,
    pub halted: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeStats {
    pub tasks: u64,
    pub successes: u64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub task_count: u64,
    pub success_count: u64,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub per_type: BTreeMap<String, TypeStats>,
    pub outcomes: OutcomeBreakdown,
    pub totals: StepCounts,
    pub averages: StepAverages,
    /// Gateway usage by role name.
    pub llm: BTreeMap<String, TokenUsage>,
    pub llm_total: TokenUsage,
}

/// Tasks without a type are counted under this key.
pub const UNTYPED: &str = "untyped";

impl Metrics {
    /// Aggregates one trajectory per task. Sums run in task-id order so the
    /// result does not depend on the order trajectories finished in.
    pub fn compute(
        tasks: &[Task],
        trajectories: &[Trajectory],
        calls: &[CallRecord],
        tokenizer: &dyn Tokenizer,
    ) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::usage("metrics need at least one trajectory"));
        }
        let types: HashMap<&str, &str> = tasks
            .iter()
            .map(|t| (t.id.as_str(), t.task_type.as_deref().unwrap_or(UNTYPED)))
            .collect();
        let mut ordered: Vec<&Trajectory> = trajectories.iter().collect();
        ordered.sort_by(|a, b| {
            a.task_id
                .cmp(&b.task_id)
                .then(a.trial_index.cmp(&b.trial_index))
        });

        let mut m = Metrics {
            task_count: ordered.len() as u64,
            success_count: 0,
            success_rate: 0.0,
            mean_reward: 0.0,
            per_type: BTreeMap::new(),
            outcomes: OutcomeBreakdown::default(),
            totals: StepCounts::default(),
            averages: StepAverages::default(),
            llm: BTreeMap::new(),
            llm_total: TokenUsage::from_calls(calls),
        };
        let mut reward_sum = 0.0;
        for t in &ordered {
            let success = t.is_success();
            let entry = m
                .per_type
                .entry(
                    types
                        .get(t.task_id.as_str())
                        .copied()
                        .unwrap_or(UNTYPED)
                        .to_string(),
                )
                .or_default();
            entry.tasks += 1;
            match t.outcome {
                Some(Outcome::Success) => m.outcomes.success += 1,
                Some(Outcome::Failure) => m.outcomes.failure += 1,
                _ => m.outcomes.halted += 1,
            }
            if success {
                m.success_count += 1;
                entry.successes += 1;
            }
            reward_sum += if t.outcome.is_some_and(|o| o != Outcome::Halted) {
                t.final_reward()
            } else {
                0.0
            };
            m.totals += StepCounts::of(t, tokenizer);
        }
        for stats in m.per_type.values_mut() {
            stats.rate = stats.successes as f64 / stats.tasks as f64;
        }
        m.success_rate = m.success_count as f64 / m.task_count as f64;
        m.mean_reward = reward_sum / m.task_count as f64;
        m.averages = m.totals.averaged(ordered.len());
        let mut by_role: BTreeMap<String, Vec<&CallRecord>> = BTreeMap::new();
        for c in calls {
            by_role.entry(c.role.to_string()).or_default().push(c);
        }
        m.llm = by_role
            .into_iter()
            .map(|(role, cs)| (role, TokenUsage::from_calls(cs)))
            .collect();
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{CompletionRecord, Role, WhitespaceTokenizer};
    use crate::model::Step;

    fn finished(id: &str, ty: Option<&str>, outcome: Outcome, reward: f64) -> (Task, Trajectory) {
        let mut task = Task::new(id, "toyshop", format!("task {id}"));
        task.task_type = ty.map(str::to_string);
        let mut t = Trajectory::new(&task, 0, "");
        t.append_step(
            Step::new("search[a b]", "x y z", 0.0, true).with_thoughts(vec!["hm ok".into()]),
        )
        .unwrap();
        t.append_step(Step::new("bogus", "Invalid action.", 0.0, false))
            .unwrap();
        t.append_step(Step::new("click[Buy Now]", "done", reward, true))
            .unwrap();
        t.finalize(outcome).unwrap();
        (task, t)
    }

    #[test]
    fn rates_and_counts() {
        let rows = [
            finished("a", Some("kitchen"), Outcome::Success, 1.0),
            finished("b", Some("kitchen"), Outcome::Failure, 0.5),
            finished("c", Some("audio"), Outcome::Success, 1.0),
            finished("d", None, Outcome::Success, 1.0),
        ];
        let tasks: Vec<Task> = rows.iter().map(|r| r.0.clone()).collect();
        let trajs: Vec<Trajectory> = rows.iter().map(|r| r.1.clone()).collect();
        let calls = vec![CallRecord {
            role: Role::Actor,
            record: CompletionRecord {
                prompt_text: "p".into(),
                completion_text: "c".into(),
                input_tokens: 10,
                output_tokens: 3,
                backend_id: "s".into(),
            },
        }];
        let m = Metrics::compute(&tasks, &trajs, &calls, &WhitespaceTokenizer).unwrap();
        assert_eq!(m.success_rate, 0.75);
        assert_eq!(m.mean_reward, 3.5 / 4.0);
        assert_eq!(m.per_type["kitchen"].rate, 0.5);
        assert_eq!(m.per_type[UNTYPED].tasks, 1);
        assert_eq!(m.totals.actions, 12);
        assert_eq!(m.totals.invalid_actions, 4);
        assert_eq!(m.totals.thoughts, 4);
        assert_eq!(m.totals.thought_tokens, 8);
        assert_eq!(m.totals.action_tokens, 4 * 5);
        assert_eq!(m.averages.invalid_actions, 1.0);
        assert_eq!(m.llm["actor"].input_tokens, 10);
        assert_eq!(m.llm_total.output_tokens, 3);
        let weighted: f64 = m.per_type.values().map(|s| s.rate * s.tasks as f64).sum();
        assert!((weighted - m.success_count as f64).abs() < 1e-12);
    }

    #[test]
    fn requires_a_trajectory() {
        assert!(Metrics::compute(&[], &[], &[], &WhitespaceTokenizer).is_err());
    }
}
