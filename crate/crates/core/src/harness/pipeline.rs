//! The gather, extract, index and eval stages over every fold, with each
//! stage's artifacts on disk so a later stage can be re-run alone.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, RESOLVED_CONFIG_FILE};
use super::folds::{make_folds_for, FoldOptions, FoldPlan, FoldRun};
use super::report::{FoldRow, Report, StdErrorKind};
use crate::env::EnvFactory;
use crate::error::{Error, Result};
use crate::gather::{gather, ReflectionLog, SkippedTask};
use crate::inference::{evaluate, EvalMode, RetrievalStrategy, Retriever};
use crate::insights::{extract_insights, InsightSet};
use crate::llm::CallRecord;
use crate::metrics::Metrics;
use crate::model::{write_atomic, ExperiencePool, Trajectory};
use crate::retrieval::{Embedder, EmbeddingIndex};

pub const POOL_FILE: &str = "pool.jsonl";
pub const INSIGHTS_FILE: &str = "insights.json";
pub const INDEX_FILE: &str = "index.bin";
pub const THOUGHT_INDEX_FILE: &str = "thoughts.bin";
pub const CALLS_FILE: &str = "calls.jsonl";
pub const FOLDS_FILE: &str = "folds.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Gather,
    Extract,
    Index,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Gather,
        Stage::Extract,
        Stage::Index,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Gather => "gather",
            Stage::Extract => "extract",
            Stage::Index => "index",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

pub fn run_dir(out_dir: &Path, run: usize) -> PathBuf {
    out_dir.join(format!("run-{run}"))
}

pub fn eval_dir(run_dir: &Path, mode: EvalMode) -> PathBuf {
    run_dir.join(format!("eval-{mode}"))
}

/// Extra gather outputs kept for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatherSummary {
    pub trials: usize,
    pub skipped: Vec<SkippedTask>,
    pub reflections: Vec<ReflectionLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineOptions {
    pub from: Stage,
    pub std_error: StdErrorKind,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            from: Stage::Gather,
            std_error: StdErrorKind::Sample,
        }
    }
}

/// The fold plan the config asks for.
pub fn fold_plan(config: &RunConfig, factory: &dyn EnvFactory) -> Result<FoldPlan> {
    let all: Vec<String> = factory.tasks().iter().map(|t| t.id.clone()).collect();
    match (&config.split.train, &config.split.eval) {
        (Some(train), Some(eval)) => {
            let covered: Vec<String> = all
                .into_iter()
                .filter(|id| train.contains(id) || eval.contains(id))
                .collect();
            FoldPlan::fixed(&covered, train.clone(), eval.clone())
        }
        _ => make_folds_for(
            factory.tasks(),
            config.seeds.folds,
            FoldOptions {
                splits: config.split.splits,
                train_fraction: config.split.train_fraction,
                stratify: config.split.stratify,
            },
        ),
    }
}

/// Runs every stage from `options.from` on, for every fold, then writes the report.
pub fn run_pipeline(config: &RunConfig, options: PipelineOptions) -> Result<Report> {
    let config = config.resolved()?;
    let out = config.out_dir.clone();
    write_atomic(
        &out.join(RESOLVED_CONFIG_FILE),
        config.to_toml()?.as_bytes(),
    )?;
    let factory = config.factory()?;
    let plan = fold_plan(&config, factory.as_ref())?;
    write_atomic(
        &out.join(FOLDS_FILE),
        serde_json::to_string_pretty(&plan)?.as_bytes(),
    )?;
    let manual = if options.from == Stage::Gather {
        config.manual_fewshots(factory.as_ref())?
    } else {
        Vec::new()
    };

    let run_one = |(i, run): (usize, &FoldRun)| {
        run_fold(&config, factory.as_ref(), &manual, i, run, options.from)
    };
    let per_run: Vec<Result<Vec<FoldRow>>> = if config.parallel_folds {
        std::thread::scope(|s| {
            let handles: Vec<_> = plan
                .runs
                .iter()
                .enumerate()
                .map(|r| s.spawn(move || run_one(r)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::InvalidData("fold thread panicked".into())))
                })
                .collect()
        })
    } else {
        plan.runs.iter().enumerate().map(run_one).collect()
    };
    let mut rows = Vec::new();
    for r in per_run {
        rows.extend(r?);
    }
    let report =
        Report::build(rows, options.std_error).map_err(|e| stage_error(Stage::Report, &out, e))?;
    write_atomic(&out.join(REPORT_JSON), report.to_json()?.as_bytes())?;
    write_atomic(&out.join(REPORT_MD), report.to_markdown().as_bytes())?;
    Ok(report)
}

fn stage_error(stage: Stage, dir: &Path, e: Error) -> Error {
    match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: stage.to_string(),
            dir: dir.to_path_buf(),
            source: Box::new(other),
        },
    }
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::usage(format!(
            "missing artifact {}; run an earlier stage first",
            path.display()
        )))
    }
}

fn write_calls(path: &Path, calls: &[CallRecord]) -> Result<()> {
    let mut body = String::new();
    for c in calls {
        body.push_str(&serde_json::to_string(c)?);
        body.push('\n');
    }
    write_atomic(path, body.as_bytes())
}

fn run_fold(
    config: &RunConfig,
    factory: &dyn EnvFactory,
    manual: &[Trajectory],
    i: usize,
    run: &FoldRun,
    from: Stage,
) -> Result<Vec<FoldRow>> {
    let dir = run_dir(&config.out_dir, i);
    let pool_path = dir.join(POOL_FILE);
    let insights_path = dir.join(INSIGHTS_FILE);
    let index_path = dir.join(INDEX_FILE);
    let thoughts_path = dir.join(THOUGHT_INDEX_FILE);
    let gateway = config.gateway()?;
    let embedder = config.embedder();
    let needs_index = config.modes.iter().any(|m| m.uses_retrieval());
    let needs_thoughts = needs_index && config.params.retrieval == RetrievalStrategy::Reason;

    let pool = if from <= Stage::Gather {
        (|| -> Result<ExperiencePool> {
            let train = RunConfig::tasks_by_id(factory, &run.train)?;
            let report = gather(
                &config.gather_config()?,
                factory,
                &gateway,
                &train,
                manual.to_vec(),
                Some(&pool_path),
            )?;
            report.pool.save(&pool_path)?;
            let summary = GatherSummary {
                trials: report.trials,
                skipped: report.skipped,
                reflections: report.reflections,
            };
            write_atomic(
                &dir.join("gather.json"),
                serde_json::to_string_pretty(&summary)?.as_bytes(),
            )?;
            write_calls(&dir.join("gather-calls.jsonl"), &gateway.take_log())?;
            Ok(report.pool)
        })()
        .map_err(|e| stage_error(Stage::Gather, &dir, e))?
    } else {
        require(&pool_path)
            .and_then(|_| ExperiencePool::load(&pool_path))
            .map_err(|e| stage_error(Stage::Extract, &dir, e))?
    };

    let insights = if from <= Stage::Extract {
        (|| -> Result<InsightSet> {
            let report = extract_insights(
                &gateway,
                &pool,
                &config.extract_config(),
                &InsightSet::new(),
            )?;
            report.insights.save(&insights_path)?;
            write_calls(&dir.join("extract-calls.jsonl"), &gateway.take_log())?;
            Ok(report.insights)
        })()
        .map_err(|e| stage_error(Stage::Extract, &dir, e))?
    } else if config.modes.iter().any(|m| m.uses_insights()) {
        require(&insights_path)
            .and_then(|_| InsightSet::load(&insights_path))
            .map_err(|e| stage_error(Stage::Eval, &dir, e))?
    } else {
        InsightSet::new()
    };

    let (index, thoughts) = if !needs_index {
        (None, None)
    } else if from <= Stage::Index {
        (|| -> Result<(Option<EmbeddingIndex>, Option<EmbeddingIndex>)> {
            let include = config.params.include_manual_in_retrieval;
            let index = EmbeddingIndex::build(&pool, embedder.as_ref(), include)?;
            index.save(&index_path)?;
            let thoughts = if needs_thoughts {
                let t = EmbeddingIndex::build_over_thoughts(&pool, embedder.as_ref(), include)?;
                t.save(&thoughts_path)?;
                Some(t)
            } else {
                None
            };
            Ok((Some(index), thoughts))
        })()
        .map_err(|e| stage_error(Stage::Index, &dir, e))?
    } else {
        (|| -> Result<(Option<EmbeddingIndex>, Option<EmbeddingIndex>)> {
            require(&index_path)?;
            let index = EmbeddingIndex::load(&index_path)?;
            let thoughts = if needs_thoughts {
                require(&thoughts_path)?;
                Some(EmbeddingIndex::load(&thoughts_path)?)
            } else {
                None
            };
            Ok((Some(index), thoughts))
        })()
        .map_err(|e| stage_error(Stage::Eval, &dir, e))?
    };

    let mut rows = Vec::new();
    for &mode in &config.modes {
        let mdir = eval_dir(&dir, mode);
        let metrics = if from <= Stage::Eval {
            eval_mode(
                config,
                factory,
                &gateway,
                &pool,
                &insights,
                index.as_ref(),
                thoughts.as_ref(),
                embedder.as_ref(),
                run,
                mode,
                &mdir,
            )
            .map_err(|e| stage_error(Stage::Eval, &mdir, e))?
        } else {
            let path = mdir.join("metrics.json");
            (|| -> Result<Metrics> {
                require(&path)?;
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
                Ok(serde_json::from_str(&text)?)
            })()
            .map_err(|e| stage_error(Stage::Report, &mdir, e))?
        };
        rows.push(FoldRow {
            run: i,
            mode: mode.to_string(),
            train_tasks: run.train.len(),
            eval_tasks: run.eval.len(),
            metrics,
        });
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn eval_mode(
    config: &RunConfig,
    factory: &dyn EnvFactory,
    gateway: &crate::llm::Gateway,
    pool: &ExperiencePool,
    insights: &InsightSet,
    index: Option<&EmbeddingIndex>,
    thoughts: Option<&EmbeddingIndex>,
    embedder: &dyn Embedder,
    run: &FoldRun,
    mode: EvalMode,
    dir: &Path,
) -> Result<Metrics> {
    let tasks = RunConfig::tasks_by_id(factory, &run.eval)?;
    let retriever = index.map(|index| Retriever {
        pool,
        index,
        embedder,
        thought_index: thoughts,
    });
    let empty = InsightSet::new();
    let insights = if mode.uses_insights() {
        insights
    } else {
        &empty
    };
    let eval = evaluate(
        &config.eval_config(mode),
        factory,
        gateway,
        &tasks,
        insights,
        pool.manual_fewshots(),
        retriever.as_ref(),
        Some(dir),
    )?;
    write_calls(&dir.join(CALLS_FILE), &gateway.take_log())?;
    Ok(eval.metrics)
}
