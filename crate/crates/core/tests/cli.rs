use std::fs;
use std::path::{Path, PathBuf};

use stagecraft::cli::main_with;

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(cfg: &Path, out: &Path, command: &str) -> i32 {
    main_with([
        "stagecraft".as_ref(),
        "--config".as_ref(),
        cfg.as_os_str(),
        "--out".as_ref(),
        out.as_os_str(),
        command.as_ref(),
    ])
}

fn run_named(name: &str, command: &str) -> (i32, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&config(name), dir.path(), command);
    (code, dir)
}

#[test]
fn synthesize_writes_results() {
    let (code, dir) = run_named("scalar_linear.json", "synthesize");
    assert_eq!(code, 0);
    for f in ["synthesis.json", "certify_ucc.csv"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("synthesis.json")).unwrap()).unwrap();
    assert!(json.is_object());
}

#[test]
fn converse_writes_beta_and_schedule() {
    let (code, dir) = run_named("chain_oracle.json", "converse");
    assert_eq!(code, 0);
    for f in ["converse.json", "beta.csv", "schedule.csv", "claims.csv"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
}

#[test]
fn oracle_on_finite_system() {
    let (code, dir) = run_named("chain_oracle.json", "oracle");
    assert_eq!(code, 0);
    let table = fs::read_to_string(dir.path().join("value_table.csv")).unwrap();
    assert!(table.lines().count() > 1);
}

#[test]
fn failing_choice_exits_one() {
    assert_eq!(run_named("scalar_linear_shrunk.json", "synthesize").0, 1);
}

#[test]
fn preconditions_exit_two() {
    assert_eq!(run_named("chain_not_invariant.json", "converse").0, 2);
    assert_eq!(run_named("scalar_linear.json", "oracle").0, 2);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"system\": {\"kind\": \"builtin\", \"name\": \"nope\"}}").unwrap();
    assert_eq!(run(&bad, dir.path(), "verify"), 2);
    fs::write(&bad, "not json").unwrap();
    assert_eq!(run(&bad, dir.path(), "verify"), 2);
    assert_eq!(run(&dir.path().join("missing.json"), dir.path(), "verify"), 2);
}

#[test]
fn unknown_arguments_exit_two() {
    assert_eq!(main_with(["stagecraft", "--bogus", "verify"]), 2);
}

#[test]
fn empty_samples_pass_trivially() {
    assert_eq!(run_named("scalar_linear_empty.json", "verify").0, 0);
}

#[test]
fn outputs_are_deterministic() {
    for (name, command) in [
        ("double_integrator.json", "synthesize"),
        ("chain_oracle.json", "converse"),
    ] {
        let (c1, a) = run_named(name, command);
        let (c2, b) = run_named(name, command);
        assert_eq!((c1, c2), (0, 0));
        let mut files: Vec<_> = fs::read_dir(a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        files.sort();
        assert!(!files.is_empty());
        for f in files {
            assert_eq!(
                fs::read(a.path().join(&f)).unwrap(),
                fs::read(b.path().join(&f)).unwrap(),
                "{name} {command}: {f:?} differs"
            );
        }
    }
}
