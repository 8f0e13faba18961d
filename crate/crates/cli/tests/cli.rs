//! Exit codes and argument handling of the `ecgauth` binary.

use std::process::{Command, Output};

fn ecgauth(root: &std::path::Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecgauth"))
        .arg("--out-root")
        .arg(root)
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["--version"], &["train", "--help"]] {
        assert_eq!(ecgauth(dir.path(), args).status.code(), Some(0), "{args:?}");
    }
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 4] = [
        &["frobnicate"],
        &["synth", "--profile", "nosuch"],
        &["synth", "--set", "train.nosuch=1"],
        &["train", "--profile", "ptb"],
    ];
    for args in cases {
        let out = ecgauth(dir.path(), args);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn missing_or_malformed_inputs_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.ecgi");
    std::fs::write(&bogus, b"not an image set").unwrap();
    let missing = dir.path().join("absent");
    for args in [
        vec!["train", "--data", bogus.to_str().unwrap()],
        vec!["eval", "--model", missing.to_str().unwrap()],
        vec!["rerun", missing.to_str().unwrap()],
    ] {
        let out = ecgauth(dir.path(), &args);
        assert_eq!(
            out.status.code(),
            Some(3),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn synth_prints_its_run_directory_and_records_the_spec() {
    let dir = tempfile::tempdir().unwrap();
    let out = ecgauth(dir.path(), &["synth", "--subjects", "2", "--beats", "5", "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = std::path::PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    assert!(run.starts_with(dir.path()));
    assert!(run.file_name().unwrap().to_str().unwrap().starts_with("synth-"));
    let spec: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(spec["command"], "synth");
    assert_eq!(spec["config"]["synth"]["subjects"], 2);
    assert!(run.join("manifest.tsv").is_file());
    let again = ecgauth(dir.path(), &["synth", "--subjects", "2", "--beats", "5", "--seed", "4"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap().trim(), run.to_str().unwrap());
}
