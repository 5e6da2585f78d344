use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3

[synth]
items_per_class = 12
descriptions_per_class = 4

[synth.slides]
count = 4
grid = 6

[trainer]
max_steps = 20
"#;

fn bagalign(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bagalign")).current_dir(dir).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_dir(o: &Output) -> PathBuf {
    let line = stdout(o).lines().find_map(|l| l.strip_prefix("run directory: ").map(str::to_owned)).unwrap();
    PathBuf::from(line)
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), SMALL);
    let mut dir = None;
    for cmd in [
        vec!["gen-synth"],
        vec!["build-bags"],
        vec!["train"],
        vec!["eval-tiles"],
        vec!["eval-tiles", "--mode", "single"],
        vec!["eval-slides", "--k", "5"],
        vec!["segment"],
    ] {
        let mut args = cmd.clone();
        args.extend(["--config", "run.toml"]);
        let out = bagalign(tmp.path(), &args);
        assert!(out.status.success(), "{cmd:?}: {}", String::from_utf8_lossy(&out.stderr));
        let d = run_dir(&out);
        assert_eq!(dir.get_or_insert_with(|| d.clone()), &d, "every command resolves the same run");
    }
    let run = tmp.path().join(dir.unwrap());
    for f in [
        "bags.jsonl",
        "checkpoint.json",
        "trace.csv",
        "eval/tiles_merged.json",
        "eval/tiles_single.json",
        "eval/slides_merged_k5.json",
        "masks/merged/summary.json",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let pgms = fs::read_dir(run.join("masks/merged")).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")
    });
    assert_eq!(pgms.count(), 4);
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 21, "header plus one row per step");
}

#[test]
fn seed_and_out_overrides_change_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), SMALL);
    let a = bagalign(tmp.path(), &["gen-synth", "--config", "run.toml", "--out", "elsewhere"]);
    let b = bagalign(tmp.path(), &["gen-synth", "--config", "run.toml", "--out", "elsewhere", "--seed", "4"]);
    assert!(a.status.success() && b.status.success());
    let (da, db) = (run_dir(&a), run_dir(&b));
    assert!(da.starts_with("elsewhere"));
    assert_ne!(da, db);
}

#[test]
fn help_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bagalign(tmp.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("eval-slides"));
}

#[test]
fn validation_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), SMALL);
    let cases: Vec<Vec<&str>> = vec![
        vec![],
        vec!["train"],
        vec!["frobnicate", "--config", "run.toml"],
        vec!["train", "--config", "missing.toml"],
        vec!["eval-slides", "--config", "run.toml", "--k", "0"],
        vec!["train", "--config", "run.toml", "--preset", "huge"],
        // no data generated yet
        vec!["build-bags", "--config", "run.toml"],
    ];
    for args in cases {
        assert_eq!(bagalign(tmp.path(), &args).status.code(), Some(1), "{args:?}");
    }

    write_config(tmp.path(), "[trainer]\nlearning_rtae = 0.1\n");
    assert_eq!(bagalign(tmp.path(), &["gen-synth", "--config", "run.toml"]).status.code(), Some(1));
    write_config(tmp.path(), "[synth]\nnum_classes = 1\n");
    assert_eq!(bagalign(tmp.path(), &["gen-synth", "--config", "run.toml"]).status.code(), Some(1));
}

#[test]
fn unavailable_provider_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let config = format!("{SMALL}\n[provider]\nkind = \"external\"\nprogram = \"/nonexistent/expander\"\n");
    write_config(tmp.path(), &config);
    assert!(bagalign(tmp.path(), &["gen-synth", "--config", "run.toml"]).status.success());
    let out = bagalign(tmp.path(), &["build-bags", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
