use std::path::Path;
use std::process::{Command, Output};

const TRAIN: &str = "t01,t02,t03,t04,t05,t06,t07,t08";
const EVAL: &str = "e01,e02,e03,e04,e05,e06,e07,e08";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_experiential"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn experiential")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gather_extract_eval_chain() {
    let dir = tempfile::tempdir().unwrap();
    let pool = dir.path().join("pool.jsonl");
    let insights = dir.path().join("insights.json");
    let eval_out = dir.path().join("eval");
    let common = ["--env", "toyqa", "--model", "builtin:toyqa"];

    let out = run(&[
        &["gather"][..],
        &common,
        &["--tasks", TRAIN, "--out", path(&pool)],
    ]
    .concat());
    assert!(out.status.success(), "{}", stderr(&out));
    let lines = std::fs::read_to_string(&pool).unwrap().lines().count();
    assert!(lines > 8);
    assert!(dir.path().join("pool.gather.json").exists());

    let out = run(&[
        &["extract"][..],
        &common,
        &["--pool", path(&pool), "--out", path(&insights)],
    ]
    .concat());
    assert!(out.status.success(), "{}", stderr(&out));
    let set: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&insights).unwrap()).unwrap();
    assert!(!set.to_string().is_empty());

    let out = run(&[
        &["eval"][..],
        &common,
        &[
            "--tasks",
            EVAL,
            "--pool",
            path(&pool),
            "--insights",
            path(&insights),
        ],
        &["--mode", "full", "--out-dir", path(&eval_out)],
    ]
    .concat());
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["metrics.json", "calls.jsonl"] {
        assert!(eval_out.join(name).exists(), "{name}");
    }
    assert_eq!(
        std::fs::read_dir(eval_out.join("trajectories"))
            .unwrap()
            .count(),
        8
    );
}

#[test]
fn usage_errors_exit_two() {
    let out = run(&["gather"]);
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = run(&[
        "extract",
        "--env",
        "toyqa",
        "--model",
        "builtin:toyqa",
        "--pool",
        path(&missing),
        "--out",
        path(&dir.path().join("i.json")),
    ]);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));

    let out = run(&[
        "gather",
        "--env",
        "toyqa",
        "--model",
        "builtin:nope",
        "--out",
        path(&dir.path().join("p")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let out = run(&["gather", "--env", "marsrover", "--out", "p"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_api_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        r#"
env = "toyqa"
[models]
default = "some-remote-model"
[remote]
endpoint = "http://127.0.0.1:9/v1/chat/completions"
api_key_env = "EXPERIENTIAL_TEST_KEY_THAT_IS_UNSET"
"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_experiential"))
        .args([
            "gather",
            "--config",
            path(&config),
            "--out",
            path(&dir.path().join("pool.jsonl")),
        ])
        .env_remove("EXPERIENTIAL_TEST_KEY_THAT_IS_UNSET")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("EXPERIENTIAL_TEST_KEY_THAT_IS_UNSET"));
}

#[test]
fn pipeline_and_report_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/toyqa-scripted.toml");
    let runs = dir.path().join("runs");
    let out = run(&[
        "pipeline",
        "--config",
        path(&config),
        "--out-dir",
        path(&runs),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let printed = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(printed.contains("retrieve_only"), "{printed}");

    let out = run(&["report", path(&runs)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    for mode in ["base", "insights_only", "retrieve_only", "full"] {
        assert!(text.contains(mode), "{text}");
    }

    let out = run(&[
        "pipeline",
        "--config",
        path(&config),
        "--out-dir",
        path(&runs),
        "--from",
        "nowhere",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn transfer_writes_an_insight_file() {
    let dir = tempfile::tempdir().unwrap();
    let source = dir.path().join("source.json");
    let target = dir.path().join("target.json");
    let script = dir.path().join("transfer.json");
    std::fs::write(
        &script,
        r#"{"id": "transfer", "default_response": "1. Check the claim against the article before answering.\n2. Prefer NOT ENOUGH INFO when nothing matches."}"#,
    )
    .unwrap();
    let pool = dir.path().join("pool.jsonl");
    let common = ["--env", "toyqa", "--model", "builtin:toyqa"];
    assert!(run(&[
        &["gather"][..],
        &common,
        &["--tasks", TRAIN, "--out", path(&pool)]
    ]
    .concat())
    .status
    .success());
    assert!(run(&[
        &["extract"][..],
        &common,
        &["--pool", path(&pool), "--out", path(&source)]
    ]
    .concat())
    .status
    .success());
    let model = format!("scripted:{}", path(&script));
    let out = run(&[
        "transfer",
        "--source",
        path(&source),
        "--source-env",
        "toyqa",
        "--target-env",
        "toyfever",
        "--model",
        &model,
        "--out",
        path(&target),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&target).unwrap();
    assert!(text.contains("NOT ENOUGH INFO"), "{text}");

    let out = run(&[
        "transfer",
        "--source",
        path(&source),
        "--source-env",
        "toyqa",
        "--target-env",
        "toyfever",
        "--model",
        "builtin:toyqa",
        "--out",
        path(&target),
    ]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "an unusable completion is a run failure"
    );
}
