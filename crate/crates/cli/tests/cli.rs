//! Drives the `finecount` binary through its subcommands.

use std::path::Path;
use std::process::{Command, Output};

fn finecount(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_finecount"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const CONFIG: &str = r#"
seed = 2

[synthesis]
n_pos = 10
n_neg_total = 10

[tuning]
epochs = 20

[[categories]]
name = "yellow disk"
parent = "disk"
negative_source = "llm_generated"
"#;

#[test]
fn full_run_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("run.toml"), CONFIG).unwrap();
    let base = ["--config", "run.toml", "--out", "artifacts", "--jobs", "2"];
    let with = |extra: &[&str]| -> Vec<String> {
        base.iter().chain(extra).map(|s| s.to_string()).collect()
    };
    let run = |extra: &[&str]| {
        let args = with(extra);
        finecount(root, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };

    let stdout = ok(&run(&["synth"]));
    assert!(
        stdout.starts_with("yellow disk: 10 positives, 10 negatives"),
        "{stdout}"
    );
    let stdout = ok(&run(&["tune"]));
    assert!(stdout.contains("concepts/yellow_disk.json"), "{stdout}");
    assert!(root
        .join("artifacts/concepts/yellow_disk.log.csv")
        .is_file());

    ok(&run(&[
        "toy-dataset",
        "data",
        "--scenes",
        "6",
        "--size",
        "64",
    ]));
    let stdout = ok(&run(&["count", "data/images"]));
    assert_eq!(stdout.lines().count(), 6);

    let stdout = ok(&run(&["eval", "data"]));
    assert!(stdout.starts_with("# Counting report"), "{stdout}");
    let stdout = ok(&run(&["report"]));
    assert!(stdout.contains("report.md"));
}

#[test]
fn config_subcommand_applies_global_overrides() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    let stdout = ok(&finecount(
        dir.path(),
        &["--config", "run.toml", "--seed", "77", "config"],
    ));
    assert!(stdout.contains("seed = 77"), "{stdout}");
    assert!(stdout.contains("yellow disk"));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = finecount(dir.path(), &["--config", "missing.toml", "synth"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));

    // Tuning before synthesis names the missing step.
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    let out = finecount(dir.path(), &["--config", "run.toml", "tune"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run the synth step first"));

    // An unreachable suggester endpoint is transient.
    let http = CONFIG.replace("seed = 2", "seed = 2\n\n[suggester]\nkind = \"http\"");
    std::fs::write(dir.path().join("http.toml"), http).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_finecount"))
        .current_dir(dir.path())
        .env(
            "FINECOUNT_SUGGESTER_URL",
            "http://127.0.0.1:9/v1/chat/completions",
        )
        .args(["--config", "http.toml", "synth"])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(75),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn process_generator_speaks_the_wire_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_finecount").replace('\\', "\\\\");
    let config = format!(
        "{CONFIG}\n[generator]\nkind = \"process\"\ncommand = [\"{exe}\", \"serve-mock-generator\"]\n"
    );
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    let via_process = ok(&finecount(
        dir.path(),
        &["--config", "run.toml", "--out", "a", "synth"],
    ));
    std::fs::write(dir.path().join("mock.toml"), CONFIG).unwrap();
    let in_process = ok(&finecount(
        dir.path(),
        &["--config", "mock.toml", "--out", "b", "synth"],
    ));
    assert_eq!(via_process, in_process);
    let mask = |root: &str| {
        std::fs::read_to_string(
            dir.path()
                .join(root)
                .join("synth/yellow_disk/positive/0003.json"),
        )
        .unwrap()
    };
    let (a, b): (serde_json::Value, serde_json::Value) = (
        serde_json::from_str(&mask("a")).unwrap(),
        serde_json::from_str(&mask("b")).unwrap(),
    );
    assert_eq!(a["mask_rle"], b["mask_rle"]);
    assert_eq!(a["cat_map"], b["cat_map"]);
}
