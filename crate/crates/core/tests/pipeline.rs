use std::path::{Path, PathBuf};

use experiential::harness::pipeline::{run_dir, FOLDS_FILE, POOL_FILE, REPORT_JSON};
use experiential::harness::{run_pipeline, FoldPlan, PipelineOptions, RunConfig, Stage};

fn config(out: &Path, fixed_split: bool) -> RunConfig {
    let split = if fixed_split {
        r#"
[split]
train = ["t01", "t02", "t03", "t04", "t05", "t06", "t07", "t08"]
eval = ["e01", "e02", "e03", "e04", "e05", "e06", "e07", "e08"]
"#
    } else {
        ""
    };
    RunConfig::from_toml(&format!(
        "env = \"toyqa\"\nmodes = [\"base\", \"full\"]\nout_dir = {out:?}\n[models]\ndefault = \"builtin:toyqa\"\n{split}"
    ))
    .unwrap()
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn from(stage: Stage) -> PipelineOptions {
    PipelineOptions {
        from: stage,
        ..Default::default()
    }
}

#[test]
fn resuming_from_eval_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), true);
    let first = run_pipeline(&c, PipelineOptions::default()).unwrap();
    let before = std::fs::read(dir.path().join(REPORT_JSON)).unwrap();
    let again = run_pipeline(&c, from(Stage::Eval)).unwrap();
    assert_eq!(first, again);
    assert_eq!(before, std::fs::read(dir.path().join(REPORT_JSON)).unwrap());
    let again = run_pipeline(&c, from(Stage::Report)).unwrap();
    assert_eq!(first, again);
}

#[test]
fn a_missing_artifact_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), true);
    let err = run_pipeline(&c, from(Stage::Extract)).unwrap_err();
    assert!(err.is_config(), "{err}");
    assert!(err.to_string().contains(POOL_FILE), "{err}");
}

#[test]
fn default_protocol_runs_four_folds() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(&config(dir.path(), false), PipelineOptions::default()).unwrap();
    let plan: FoldPlan =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(FOLDS_FILE)).unwrap())
            .unwrap();
    assert_eq!(plan.runs.len(), 4);
    for i in 0..4 {
        assert!(run_dir(dir.path(), i).join(POOL_FILE).exists());
    }
    assert_eq!(report.summary("full").unwrap().folds, 4);
    assert!(report.warnings.is_empty());
}

#[test]
fn parallel_folds_match_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let (seq, par) = (dir.path().join("seq"), dir.path().join("par"));
    let a = run_pipeline(&config(&seq, false), PipelineOptions::default()).unwrap();
    let mut c = config(&par, false);
    c.parallel_folds = true;
    let b = run_pipeline(&c, PipelineOptions::default()).unwrap();
    assert_eq!(a, b);
    let strip = |v: Vec<(PathBuf, Vec<u8>)>| -> Vec<(PathBuf, Vec<u8>)> {
        v.into_iter()
            .filter(|(p, _)| !p.ends_with("config.resolved.toml"))
            .collect()
    };
    assert_eq!(strip(files(&seq)), strip(files(&par)));
}
