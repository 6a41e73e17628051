//! Insight sets and their extraction from gathered experience.
//!
//! An insight set changes only through four operations. `ADD` creates an
//! insight with importance 2, `UPVOTE` and `EDIT` add one, `DOWNVOTE`
//! subtracts one and removes the insight when it reaches zero. Ids are never
//! reused. Every applied operation is kept in an audit log, and replaying the
//! log from an empty set reproduces the set.

use std::path::Path;
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::env::EnvKind;
use crate::error::{Error, Result};
use crate::fixtures;
use crate::llm::{Gateway, Role};
use crate::model::{ExperiencePool, RenderStyle, Trajectory};
use crate::prompt::{fill, PromptBundle};

pub const INITIAL_IMPORTANCE: u32 = 2;
const NO_INSIGHTS: &str = "(none yet)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Insight {
    pub id: u32,
    pub text: String,
    pub importance: u32,
}

/// An operation on stable insight ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Operation {
    Add { text: String },
    Edit { id: u32, text: String },
    Upvote { id: u32 },
    Downvote { id: u32 },
}

impl Operation {
    pub fn target(&self) -> Option<u32> {
        match self {
            Operation::Add { .. } => None,
            Operation::Edit { id, .. } | Operation::Upvote { id } | Operation::Downvote { id } => {
                Some(*id)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsightSet {
    insights: Vec<Insight>,
    next_id: u32,
    log: Vec<Operation>,
}

impl Default for InsightSet {
    fn default() -> Self {
        Self::new()
    }
}

impl InsightSet {
    pub fn new() -> Self {
        Self {
            insights: Vec::new(),
            next_id: 1,
            log: Vec::new(),
        }
    }

    /// A fresh set holding `texts` in order, each at the initial importance.
    pub fn from_texts<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = Self::new();
        for text in texts {
            set.apply(Operation::Add { text: text.into() })
                .expect("ADD always applies");
        }
        set
    }

    pub fn insights(&self) -> &[Insight] {
        &self.insights
    }

    pub fn len(&self) -> usize {
        self.insights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.insights.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Insight> {
        self.insights.iter().find(|i| i.id == id)
    }

    pub fn next_id(&self) -> u32 {
        self.next_id
    }

    pub fn log(&self) -> &[Operation] {
        &self.log
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.insights.iter().map(|i| i.text.as_str())
    }

    /// Stable id of the insight shown at 1-based `position` in the rendering.
    pub fn id_at(&self, position: usize) -> Option<u32> {
        position
            .checked_sub(1)
            .and_then(|p| self.insights.get(p))
            .map(|i| i.id)
    }

    /// Applies `op`, recording it in the log. Operations on absent ids or with
    /// empty text are rejected without changing anything.
    pub fn apply(&mut self, op: Operation) -> Result<(), Rejection> {
        let reject = |reason: &str| Rejection {
            line: format!("{op:?}"),
            reason: reason.to_string(),
        };
        match &op {
            Operation::Add { text } | Operation::Edit { text, .. } if text.trim().is_empty() => {
                return Err(reject("empty insight text"));
            }
            _ => {}
        }
        if let Some(id) = op.target() {
            if self.get(id).is_none() {
                return Err(reject("no insight with that id"));
            }
        }
        match &op {
            Operation::Add { text } => {
                self.insights.push(Insight {
                    id: self.next_id,
                    text: text.clone(),
                    importance: INITIAL_IMPORTANCE,
                });
                self.next_id += 1;
            }
            Operation::Edit { id, text } => {
                let i = self.position(*id);
                self.insights[i].text = text.clone();
                self.insights[i].importance += 1;
            }
            Operation::Upvote { id } => {
                let i = self.position(*id);
                self.insights[i].importance += 1;
            }
            Operation::Downvote { id } => {
                let i = self.position(*id);
                self.insights[i].importance -= 1;
                if self.insights[i].importance == 0 {
                    self.insights.remove(i);
                }
            }
        }
        self.log.push(op);
        Ok(())
    }

    fn position(&self, id: u32) -> usize {
        self.insights
            .iter()
            .position(|i| i.id == id)
            .expect("id checked")
    }

    /// Rebuilds a set by applying `log` to an empty set.
    pub fn replay(log: &[Operation]) -> Result<Self> {
        let mut set = Self::new();
        for op in log {
            set.apply(op.clone()).map_err(|r| {
                Error::InvalidData(format!("audit log does not replay: {}", r.reason))
            })?;
        }
        Ok(set)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a saved set and checks it against its own audit log.
    pub fn from_json(text: &str) -> Result<Self> {
        let set: Self = serde_json::from_str(text)?;
        if Self::replay(&set.log)? != set {
            return Err(Error::InvalidData(
                "insight set disagrees with its audit log".into(),
            ));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::model::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading insights {}", path.display()), e))?;
        Self::from_json(&text)
    }
}

pub fn apply_operation(set: &mut InsightSet, op: Operation) -> Result<(), Rejection> {
    set.apply(op)
}

/// `1. text` lines in set order; importance is not shown.
pub fn render_insights(set: &InsightSet) -> String {
    set.insights
        .iter()
        .enumerate()
        .map(|(n, i)| format!("{}. {}", n + 1, i.text))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: String,
    pub reason: String,
}

static OPERATION_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^(ADD|EDIT|UPVOTE|DOWNVOTE)\b\s*(.*)$").expect("static regex")
});
static NUMBERED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?:RULE\s*)?#?(\d+)\s*(?::\s*(.*))?$").expect("static regex"));

/// Parses one operation per line. Numbers refer to positions in the rendering
/// of `set` that the model was shown and are translated to stable ids.
/// Blank lines are ignored; any other line that does not parse, or refers to
/// a position not shown, is rejected and reported.
pub fn parse_operations(completion: &str, set: &InsightSet) -> (Vec<Operation>, Vec<Rejection>) {
    let mut ops = Vec::new();
    let mut rejected = Vec::new();
    for raw in completion.lines() {
        let line = raw.trim().trim_start_matches(['-', '*']).trim();
        if line.is_empty() {
            continue;
        }
        match parse_line(line, set) {
            Ok(op) => ops.push(op),
            Err(reason) => {
                log::debug!("rejected operation line {line:?}: {reason}");
                rejected.push(Rejection {
                    line: line.to_string(),
                    reason,
                });
            }
        }
    }
    (ops, rejected)
}

fn parse_line(line: &str, set: &InsightSet) -> Result<Operation, String> {
    let caps = OPERATION_LINE.captures(line).ok_or("not an operation")?;
    let verb = caps[1].to_ascii_uppercase();
    let rest = caps[2].trim();
    if verb == "ADD" {
        let text = rest.trim_start_matches(':').trim();
        if text.is_empty() {
            return Err("ADD without text".into());
        }
        return Ok(Operation::Add {
            text: text.to_string(),
        });
    }
    let caps = NUMBERED.captures(rest).ok_or("missing rule number")?;
    let position: usize = caps[1].parse().map_err(|_| "bad rule number")?;
    let id = set
        .id_at(position)
        .ok_or_else(|| format!("no rule {position}"))?;
    let text = caps.get(2).map(|m| m.as_str().trim()).unwrap_or("");
    match verb.as_str() {
        "EDIT" if text.is_empty() => Err("EDIT without text".into()),
        "EDIT" => Ok(Operation::Edit {
            id,
            text: text.to_string(),
        }),
        "UPVOTE" => Ok(Operation::Upvote { id }),
        _ => Ok(Operation::Downvote { id }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractionBatch {
    /// Pool indices of a success and a failure on the same task.
    ComparePair { success: usize, failure: usize },
    /// Pool indices of successes on distinct tasks.
    SuccessChunk { members: Vec<usize> },
}

/// One `(success, failure)` pair per failure of every task that also has a
/// success, ordered by task id then trial index. Manual demonstrations are
/// not gathered experience and take no part.
pub fn build_compare_set(pool: &ExperiencePool) -> Vec<ExtractionBatch> {
    let mut pairs = Vec::new();
    for indices in pool.by_task().values() {
        let mut gathered: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| !pool.trajectories()[i].manual)
            .collect();
        gathered.sort_by_key(|&i| (pool.trajectories()[i].trial_index, i));
        let Some(&success) = gathered
            .iter()
            .find(|&&i| pool.trajectories()[i].is_success())
        else {
            continue;
        };
        for &failure in gathered
            .iter()
            .filter(|&&i| !pool.trajectories()[i].is_success())
        {
            pairs.push(ExtractionBatch::ComparePair { success, failure });
        }
    }
    pairs
}

/// A seeded permutation of all gathered successes cut into chunks of `size`,
/// the last chunk holding the remainder.
pub fn build_success_chunks(
    pool: &ExperiencePool,
    size: usize,
    seed: u64,
) -> Result<Vec<ExtractionBatch>> {
    if size == 0 {
        return Err(Error::Config(
            "success chunk size must be at least 1".into(),
        ));
    }
    let mut successes: Vec<usize> = pool.successes(false).map(|(i, _)| i).collect();
    successes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(successes
        .chunks(size)
        .map(|c| ExtractionBatch::SuccessChunk {
            members: c.to_vec(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub chunk_size: usize,
    pub seed: u64,
    /// Render each trajectory's reflections into the batch prompt.
    pub include_reflections: bool,
    pub env_summary: String,
    pub compare_template: String,
    pub success_template: String,
}

impl ExtractConfig {
    pub fn for_env(kind: EnvKind, seed: u64) -> Self {
        Self {
            chunk_size: kind.defaults().chunk_size,
            seed,
            include_reflections: false,
            env_summary: kind.summary().to_string(),
            compare_template: fixtures::EXTRACT_COMPARE_TEMPLATE.to_string(),
            success_template: fixtures::EXTRACT_SUCCESS_TEMPLATE.to_string(),
        }
    }

    fn render_trajectory(&self, t: &Trajectory) -> String {
        let mut out = t.render(RenderStyle::Full).trim_end().to_string();
        if self.include_reflections && !t.reflections_used.is_empty() {
            out.push_str("\nReflections: ");
            out.push_str(&t.reflections_used);
        }
        out
    }

    pub fn render_batch(
        &self,
        pool: &ExperiencePool,
        batch: &ExtractionBatch,
        set: &InsightSet,
    ) -> String {
        let listing = if set.is_empty() {
            NO_INSIGHTS.to_string()
        } else {
            render_insights(set)
        };
        let t = |i: usize| self.render_trajectory(&pool.trajectories()[i]);
        match batch {
            ExtractionBatch::ComparePair { success, failure } => fill(
                &self.compare_template,
                &[
                    ("env_summary", &self.env_summary),
                    ("success", &t(*success)),
                    ("failure", &t(*failure)),
                    ("insights", &listing),
                ],
            ),
            ExtractionBatch::SuccessChunk { members } => {
                let body = members
                    .iter()
                    .enumerate()
                    .map(|(n, &i)| format!("Trial #{}:\n{}", n + 1, t(i)))
                    .collect::<Vec<_>>()
                    .join("\n\n");
                fill(
                    &self.success_template,
                    &[
                        ("env_summary", &self.env_summary),
                        ("successes", &body),
                        ("insights", &listing),
                    ],
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedBatch {
    pub batch: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionReport {
    pub insights: InsightSet,
    pub batches: usize,
    pub rejected: Vec<Rejection>,
    pub skipped: Vec<SkippedBatch>,
}

/// Runs every compare pair and then every success chunk through the extractor,
/// applying the operations each completion emits to a copy of `initial`.
pub fn extract_insights(
    gateway: &Gateway,
    pool: &ExperiencePool,
    config: &ExtractConfig,
    initial: &InsightSet,
) -> Result<ExtractionReport> {
    let mut batches = build_compare_set(pool);
    batches.extend(build_success_chunks(pool, config.chunk_size, config.seed)?);
    let mut report = ExtractionReport {
        insights: initial.clone(),
        batches: batches.len(),
        rejected: Vec::new(),
        skipped: Vec::new(),
    };
    for (n, batch) in batches.iter().enumerate() {
        let prompt = config.render_batch(pool, batch, &report.insights);
        let record = match gateway.complete(Role::Extractor, &PromptBundle::raw(prompt)) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("extraction batch {n} skipped: {e}");
                report.skipped.push(SkippedBatch {
                    batch: n,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let (ops, rejected) = parse_operations(&record.completion_text, &report.insights);
        report.rejected.extend(rejected);
        for op in ops {
            if let Err(r) = report.insights.apply(op) {
                report.rejected.push(r);
            }
        }
        log::info!("extraction batch {n}: {} insights", report.insights.len());
    }
    Ok(report)
}
