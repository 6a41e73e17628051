//! Compiles and runs a small C program against the generated header and the
//! static library. Skipped when no C compiler is on the path.

use std::path::PathBuf;
use std::process::Command;

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    assert!(header_dir.join("experiential.h").is_file());
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libexperiential_ffi.a");
    if !lib.is_file() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "experiential.h"

int main(void) {
    ExpInsights *set = exp_insights_new();
    if (exp_insights_apply(set, "{\"op\":\"add\",\"text\":\"Read the page first.\"}") != EXP_STATUS_OK) return 1;
    if (exp_insights_apply(set, "{\"op\":\"downvote\",\"id\":1}") != EXP_STATUS_OK) return 2;
    if (exp_insights_apply(set, "{\"op\":\"downvote\",\"id\":1}") != EXP_STATUS_OK) return 3;
    if (exp_insights_len(set) != 0) return 4;
    if (exp_insights_apply(set, "{\"op\":\"upvote\",\"id\":1}") != EXP_STATUS_REJECTED) return 5;
    if (exp_last_error() == NULL) return 6;
    char *json = NULL;
    if (exp_insights_to_json(set, &json) != EXP_STATUS_OK) return 7;
    if (strstr(json, "\"next_id\": 2") == NULL) return 8;
    exp_string_free(json);
    exp_insights_free(set);
    printf("ok %s\n", exp_version());
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(
        out.status.success(),
        "C program exited with {:?}",
        out.status.code()
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}

fn which_cc() -> Result<String, ()> {
    for cc in [
        std::env::var("CC").unwrap_or_default().as_str(),
        "cc",
        "gcc",
        "clang",
    ] {
        if !cc.is_empty()
            && Command::new(cc)
                .arg("--version")
                .output()
                .is_ok_and(|o| o.status.success())
        {
            return Ok(cc.to_string());
        }
    }
    Err(())
}
