//! Fold reports: a per-run table plus mean and standard error per mode.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Metrics, OutcomeBreakdown, StepAverages, StepCounts, TokenUsage};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdErrorKind {
    /// Sample standard deviation (n - 1 denominator) over √n.
    #[default]
    Sample,
    /// Population standard deviation (n denominator) over √n.
    Population,
}

/// Mean and standard error of `values`; the error is 0 for a single value.
pub fn mean_and_std_error(values: &[f64], kind: StdErrorKind) -> Result<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return Err(Error::usage("mean of no values"));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let denom = match kind {
        StdErrorKind::Sample => (n - 1) as f64,
        StdErrorKind::Population => n as f64,
    };
    Ok((mean, (ss / denom).sqrt() / (n as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub run: usize,
    pub mode: String,
    pub train_tasks: usize,
    pub eval_tasks: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub folds: usize,
    pub success_rate: Estimate,
    pub mean_reward: Estimate,
    pub outcomes: OutcomeBreakdown,
    /// Per-trajectory averages over every evaluated trajectory of the mode.
    pub averages: StepAverages,
    pub llm_total: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub std_error: StdErrorKind,
    pub warnings: Vec<String>,
    pub rows: Vec<FoldRow>,
    pub summaries: Vec<ModeSummary>,
}

impl Report {
    /// Rows are sorted by mode, then run; summaries follow the same mode order.
    pub fn build(mut rows: Vec<FoldRow>, kind: StdErrorKind) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::usage("a report needs at least one metrics record"));
        }
        rows.sort_by(|a, b| a.mode.cmp(&b.mode).then(a.run.cmp(&b.run)));
        let mut by_mode: BTreeMap<&str, Vec<&FoldRow>> = BTreeMap::new();
        for r in &rows {
            by_mode.entry(r.mode.as_str()).or_default().push(r);
        }
        let mut warnings = Vec::new();
        let mut summaries = Vec::new();
        for (mode, group) in by_mode {
            if group.len() == 1 {
                warnings.push(format!(
                    "mode {mode}: single fold, standard error reported as 0"
                ));
            }
            let rates: Vec<f64> = group.iter().map(|r| r.metrics.success_rate).collect();
            let rewards: Vec<f64> = group.iter().map(|r| r.metrics.mean_reward).collect();
            let (m, se) = mean_and_std_error(&rates, kind)?;
            let (rm, rse) = mean_and_std_error(&rewards, kind)?;
            let mut outcomes = OutcomeBreakdown::default();
            let mut totals = StepCounts::default();
            let mut llm = TokenUsage::default();
            let mut trajectories = 0;
            for r in &group {
                outcomes.success += r.metrics.outcomes.success;
                outcomes.failure += r.metrics.outcomes.failure;
                outcomes.halted += r.metrics.outcomes.halted;
                totals += r.metrics.totals;
                llm.calls += r.metrics.llm_total.calls;
                llm.input_tokens += r.metrics.llm_total.input_tokens;
                llm.output_tokens += r.metrics.llm_total.output_tokens;
                trajectories += r.metrics.task_count as usize;
            }
            summaries.push(ModeSummary {
                mode: mode.to_string(),
                folds: group.len(),
                success_rate: Estimate {
                    mean: m,
                    std_error: se,
                },
                mean_reward: Estimate {
                    mean: rm,
                    std_error: rse,
                },
                outcomes,
                averages: totals.averaged(trajectories),
                llm_total: llm,
            });
        }
        Ok(Report {
            std_error: kind,
            warnings,
            rows,
            summaries,
        })
    }

    pub fn summary(&self, mode: &str) -> Option<&ModeSummary> {
        self.summaries.iter().find(|s| s.mode == mode)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Evaluation report\n\n## Folds\n\n");
        s.push_str("| run | mode | train | eval | success rate | mean reward | success | failed | halted |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let o = &r.metrics.outcomes;
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.4} | {:.4} | {} | {} | {} |",
                r.run,
                r.mode,
                r.train_tasks,
                r.eval_tasks,
                r.metrics.success_rate,
                r.metrics.mean_reward,
                o.success,
                o.failure,
                o.halted
            );
        }
        let kind = match self.std_error {
            StdErrorKind::Sample => "sample",
            StdErrorKind::Population => "population",
        };
        let _ = write!(
            s,
            "\n## Summary\n\nStandard error: {kind} standard deviation over the square root of the fold count.\n\n"
        );
        s.push_str("| mode | folds | success rate | std. error | mean reward | std. error | success | failed | halted |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for m in &self.summaries {
            let _ = writeln!(
                s,
                "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {} | {} | {} |",
                m.mode,
                m.folds,
                m.success_rate.mean,
                m.success_rate.std_error,
                m.mean_reward.mean,
                m.mean_reward.std_error,
                m.outcomes.success,
                m.outcomes.failure,
                m.outcomes.halted
            );
        }
        s.push_str("\n## Per-trajectory averages\n\n");
        s.push_str("| mode | thoughts | actions | observations | invalid actions | thought tokens | action tokens | observation tokens |\n");
        s.push_str("|---|---|---|---|---|---|---|---|\n");
        for m in &self.summaries {
            let a = &m.averages;
            let _ = writeln!(
                s,
                "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |",
                m.mode,
                a.thoughts,
                a.actions,
                a.observations,
                a.invalid_actions,
                a.thought_tokens,
                a.action_tokens,
                a.observation_tokens
            );
        }
        if !self.warnings.is_empty() {
            s.push_str("\n## Warnings\n\n");
            for w in &self.warnings {
                let _ = writeln!(s, "- {w}");
            }
        }
        s
    }
}
