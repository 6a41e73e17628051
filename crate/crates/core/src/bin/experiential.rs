use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use experiential::env::EnvKind;
use experiential::gather::gather;
use experiential::harness::pipeline::{GatherSummary, CALLS_FILE};
use experiential::harness::report::FoldRow;
use experiential::harness::{
    run_pipeline, PipelineOptions, Report, RunConfig, Stage, StdErrorKind,
};
use experiential::inference::{evaluate, EvalMode, RetrievalStrategy, Retriever};
use experiential::insights::{extract_insights, InsightSet};
use experiential::llm::{Gateway, Role};
use experiential::metrics::Metrics;
use experiential::model::ExperiencePool;
use experiential::retrieval::EmbeddingIndex;
use experiential::transfer::{finetune_insights, TransferSpec};
use experiential::{Error, Result};

#[derive(Parser)]
#[command(
    name = "experiential",
    version,
    about = "Gather experience, extract insights, and evaluate agents that use them"
)]
struct Cli {
    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect trajectories with retries and reflections into a pool file.
    Gather(GatherArgs),
    /// Distill a pool into an insight file.
    Extract(ExtractArgs),
    /// Evaluate one mode on a set of tasks.
    Eval(EvalArgs),
    /// Rewrite an insight set for another environment.
    Transfer(TransferArgs),
    /// Summarize the metrics under a pipeline output directory.
    Report(ReportArgs),
    /// Run gather, extract, index and eval over every fold.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct Common {
    /// Run config (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment family: toyqa, toyshop, household or toyfever.
    #[arg(long)]
    env: Option<EnvKind>,
    /// Model id for every role: builtin:<name>, scripted:<path>, or a remote model.
    #[arg(long)]
    model: Option<String>,
    /// Environment content directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Comma-separated task ids; all tasks when omitted.
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match (&self.config, self.env) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(env)) => RunConfig::new(env),
            (None, None) => {
                return Err(Error::Config("either --config or --env is required".into()))
            }
        };
        if let Some(env) = self.env {
            c.env = env;
        }
        if let Some(m) = &self.model {
            c.models.default = Some(m.clone());
        }
        if let Some(d) = &self.data_dir {
            c.data_dir = Some(d.clone());
        }
        Ok(c)
    }
}

#[derive(Args)]
struct GatherArgs {
    #[command(flatten)]
    common: Common,
    /// Pool file to write (JSON lines); flushed after every task.
    #[arg(long)]
    out: PathBuf,
    /// Retries after the first attempt.
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    pool: PathBuf,
    /// Insight file to write.
    #[arg(long)]
    out: PathBuf,
    /// Success chunk size.
    #[arg(long)]
    chunk_size: Option<usize>,
    /// Chunking seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Start from an existing insight file instead of an empty set.
    #[arg(long)]
    initial: Option<PathBuf>,
    #[arg(long)]
    include_reflections: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    insights: Option<PathBuf>,
    /// full, insights_only, retrieve_only or base.
    #[arg(long, default_value = "full")]
    mode: EvalMode,
    #[arg(short, long)]
    k: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// task, reason or random.
    #[arg(long)]
    retrieval: Option<RetrievalStrategy>,
    /// Load the task index from this file instead of building it.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Write the built task index to this file.
    #[arg(long)]
    save_index: Option<PathBuf>,
    /// Directory for metrics.json and the trajectory files.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    /// Model id for the transfer role.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Insight file learned on the source environment.
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    source_env: EnvKind,
    #[arg(long)]
    target_env: EnvKind,
    /// Demonstration scripts for the target; the built-in ones when omitted.
    #[arg(long, conflicts_with = "no_fewshots")]
    fewshots: Option<PathBuf>,
    /// Render the prompt without target demonstrations.
    #[arg(long)]
    no_fewshots: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Pipeline output directory holding run-*/eval-*/metrics.json.
    dir: PathBuf,
    /// Population instead of sample standard deviation.
    #[arg(long)]
    population: bool,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// First stage to run; earlier stages are loaded from disk.
    #[arg(long, default_value = "gather")]
    from: Stage,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Run folds in parallel.
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    population: bool,
}

fn std_error(population: bool) -> StdErrorKind {
    if population {
        StdErrorKind::Population
    } else {
        StdErrorKind::Sample
    }
}

fn require_roles(gateway: &Gateway, roles: &[Role]) -> Result<()> {
    for r in roles {
        if !gateway.has_role(*r) {
            return Err(Error::Config(format!(
                "no model configured for the {r} role"
            )));
        }
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        context: path.display().to_string(),
        source,
    }
}

fn selected_tasks(
    config: &RunConfig,
    ids: &[String],
) -> Result<(
    std::sync::Arc<dyn experiential::env::EnvFactory>,
    Vec<experiential::model::Task>,
)> {
    let factory = config.factory()?;
    let tasks = if ids.is_empty() {
        factory.tasks().to_vec()
    } else {
        RunConfig::tasks_by_id(factory.as_ref(), ids)?
    };
    Ok((factory, tasks))
}

fn cmd_gather(a: GatherArgs) -> Result<()> {
    let mut config = a.common.config()?;
    config.params.max_retries = a.max_retries.or(config.params.max_retries);
    config.params.horizon = a.horizon.or(config.params.horizon);
    let config = config.resolved()?;
    let gateway = config.gateway()?;
    require_roles(&gateway, &[Role::Actor, Role::Reflector])?;
    let (factory, tasks) = selected_tasks(&config, &a.common.tasks)?;
    let manual = config.manual_fewshots(factory.as_ref())?;
    let report = gather(
        &config.gather_config()?,
        factory.as_ref(),
        &gateway,
        &tasks,
        manual,
        Some(&a.out),
    )?;
    report.pool.save(&a.out)?;
    let summary = GatherSummary {
        trials: report.trials,
        skipped: report.skipped,
        reflections: report.reflections,
    };
    write_json(&a.out.with_extension("gather.json"), &summary)?;
    println!(
        "gathered {} trials over {} tasks ({} skipped) into {}",
        summary.trials,
        tasks.len(),
        summary.skipped.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let mut config = a.common.config()?;
    config.params.chunk_size = a.chunk_size.or(config.params.chunk_size);
    config.seeds.chunking = a.seed.unwrap_or(config.seeds.chunking);
    config.params.include_reflections |= a.include_reflections;
    let config = config.resolved()?;
    let gateway = config.gateway()?;
    require_roles(&gateway, &[Role::Extractor])?;
    let pool = ExperiencePool::load(&a.pool)?;
    let initial = match &a.initial {
        Some(p) => InsightSet::load(p)?,
        None => InsightSet::new(),
    };
    let report = extract_insights(&gateway, &pool, &config.extract_config(), &initial)?;
    report.insights.save(&a.out)?;
    println!(
        "{} insights from {} batches ({} operations rejected, {} batches skipped) into {}",
        report.insights.len(),
        report.batches,
        report.rejected.len(),
        report.skipped.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut config = a.common.config()?;
    config.params.k = a.k.or(config.params.k);
    config.params.horizon = a.horizon.or(config.params.horizon);
    if let Some(r) = a.retrieval {
        config.params.retrieval = r;
    }
    let config = config.resolved()?;
    let gateway = config.gateway()?;
    require_roles(&gateway, &[Role::Actor])?;
    let (factory, tasks) = selected_tasks(&config, &a.common.tasks)?;
    let pool = ExperiencePool::load(&a.pool)?;
    let insights = match (&a.insights, a.mode.uses_insights()) {
        (Some(p), true) => InsightSet::load(p)?,
        (None, true) => return Err(Error::Config(format!("mode {} needs --insights", a.mode))),
        (_, false) => InsightSet::new(),
    };
    let embedder = config.embedder();
    let include = config.params.include_manual_in_retrieval;
    let (index, thoughts) = if a.mode.uses_retrieval() {
        let index = match &a.index {
            Some(p) => EmbeddingIndex::load(p)?,
            None => EmbeddingIndex::build(&pool, embedder.as_ref(), include)?,
        };
        if let Some(p) = &a.save_index {
            index.save(p)?;
        }
        let thoughts = (config.params.retrieval == RetrievalStrategy::Reason)
            .then(|| EmbeddingIndex::build_over_thoughts(&pool, embedder.as_ref(), include))
            .transpose()?;
        (Some(index), thoughts)
    } else {
        (None, None)
    };
    let retriever = index.as_ref().map(|index| Retriever {
        pool: &pool,
        index,
        embedder: embedder.as_ref(),
        thought_index: thoughts.as_ref(),
    });
    let eval = evaluate(
        &config.eval_config(a.mode),
        factory.as_ref(),
        &gateway,
        &tasks,
        &insights,
        pool.manual_fewshots(),
        retriever.as_ref(),
        Some(&a.out_dir),
    )?;
    let mut calls = String::new();
    for c in gateway.take_log() {
        calls.push_str(&serde_json::to_string(&c)?);
        calls.push('\n');
    }
    std::fs::write(a.out_dir.join(CALLS_FILE), calls).map_err(|e| io_error(&a.out_dir, e))?;
    let m = &eval.metrics;
    println!(
        "{}: success rate {:.4} ({}/{}), mean reward {:.4}; results in {}",
        a.mode,
        m.success_rate,
        m.success_count,
        m.task_count,
        m.mean_reward,
        a.out_dir.display()
    );
    Ok(())
}

fn cmd_transfer(a: TransferArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(a.target_env),
    };
    config.env = a.target_env;
    if let Some(m) = &a.model {
        config.models.default = Some(m.clone());
    }
    let gateway = config.gateway()?;
    require_roles(&gateway, &[Role::Transfer])?;
    let target_fewshots = if a.no_fewshots {
        Vec::new()
    } else {
        config.demos = a.fewshots.clone().or(config.demos);
        let factory = config.factory()?;
        config.manual_fewshots(factory.as_ref())?
    };
    let spec = TransferSpec {
        source_insights: InsightSet::load(&a.source)?,
        source_description: a.source_env.summary().into(),
        target_description: a.target_env.summary().into(),
        target_fewshots,
    };
    let out = finetune_insights(&gateway, &spec)?;
    out.save(&a.out)?;
    println!(
        "{} transferred insights into {}",
        out.len(),
        a.out.display()
    );
    Ok(())
}

/// Reads run-N/eval-MODE/metrics.json under `dir`.
fn collect_rows(dir: &Path) -> Result<Vec<FoldRow>> {
    let folds: Option<experiential::harness::FoldPlan> =
        std::fs::read_to_string(dir.join("folds.json"))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
    let mut rows = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| io_error(dir, e))?;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(run) = name
            .strip_prefix("run-")
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        for sub in std::fs::read_dir(entry.path())
            .map_err(|e| io_error(&entry.path(), e))?
            .flatten()
        {
            let sub_name = sub.file_name().to_string_lossy().into_owned();
            let Some(mode) = sub_name.strip_prefix("eval-") else {
                continue;
            };
            let path = sub.path().join("metrics.json");
            let Ok(text) = std::fs::read_to_string(&path) else {
                continue;
            };
            let metrics: Metrics = serde_json::from_str(&text)?;
            let fold = folds.as_ref().and_then(|f| f.runs.get(run));
            rows.push(FoldRow {
                run,
                mode: mode.to_string(),
                train_tasks: fold.map_or(0, |f| f.train.len()),
                eval_tasks: metrics.task_count as usize,
                metrics,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::Usage(format!(
            "no run-*/eval-*/metrics.json under {}",
            dir.display()
        )));
    }
    Ok(rows)
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let report = Report::build(collect_rows(&a.dir)?, std_error(a.population))?;
    std::fs::write(a.dir.join("report.json"), report.to_json()?)
        .map_err(|e| io_error(&a.dir, e))?;
    std::fs::write(a.dir.join("report.md"), report.to_markdown())
        .map_err(|e| io_error(&a.dir, e))?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let mut config = RunConfig::load(&a.config)?;
    if let Some(d) = a.out_dir {
        config.out_dir = d;
    }
    config.parallel_folds |= a.parallel;
    let gateway = config.gateway()?;
    if a.from <= Stage::Eval {
        require_roles(&gateway, &[Role::Actor])?;
    }
    if a.from <= Stage::Extract {
        require_roles(&gateway, &[Role::Reflector, Role::Extractor])?;
    }
    let options = PipelineOptions {
        from: a.from,
        std_error: std_error(a.population),
    };
    let report = run_pipeline(&config, options)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Gather(a) => cmd_gather(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Report(a) => cmd_report(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
