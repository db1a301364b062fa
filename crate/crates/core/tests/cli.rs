use std::path::Path;
use std::process::{Command, Output};

use spoofbench::data::{generate_domain, write_manifest, DomainSpec};
use spoofbench::model::{init_teacher, TEACHER_FEATURE_DIM};
use spoofbench::RngStream;

fn spoofbench(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spoofbench"));
    cmd.args(args).env_remove("SPOOFBENCH_SEED");
    if let Some(seed) = seed_env {
        cmd.env("SPOOFBENCH_SEED", seed);
    }
    cmd.output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

const SMALL: &str = r#"
seed = 5

[[domains]]
name = "domain-a"
sessions = 60
template = "domain-a"

[[domains]]
name = "domain-b"
sessions = 60
template = "domain-b"
"#;

#[test]
fn missing_manifest_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = spoofbench(
        &["train", "--variant", "v1", "--data", &s(&missing), "--out", &s(dir.path())],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains(&s(&missing)), "{}", stderr(&out));
}

#[test]
fn report_without_results_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = spoofbench(&["report", "--runs", &s(dir.path())], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no eer-on-calib eval results"), "{}", stderr(&out));

    let out = spoofbench(&["report", "--runs", &s(&dir.path().join("absent"))], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(spoofbench(&[], None).status.code(), Some(2));
    assert_eq!(spoofbench(&["train", "--variant", "v3"], None).status.code(), Some(2));
    assert_eq!(spoofbench(&["--help"], None).status.code(), Some(0));
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nlearning_rate = 3\n").unwrap();
    let out = spoofbench(&["generate", "--config", &s(&cfg), "--out", &s(dir.path())], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
}

#[test]
fn eval_rejects_untrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("init.ckpt");
    init_teacher(RngStream::new(0, 0), TEACHER_FEATURE_DIM).unwrap().save(&ckpt).unwrap();
    for spec in [DomainSpec::domain_a(1), DomainSpec::domain_b(2)] {
        let sessions = generate_domain(&spec, 40).unwrap();
        write_manifest(&sessions, &dir.path().join(format!("{}.jsonl", spec.name))).unwrap();
    }
    let out = spoofbench(
        &[
            "eval",
            "--model",
            &s(&ckpt),
            "--data",
            &s(dir.path()),
            "--out",
            &s(&dir.path().join("eval")),
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("untrained"), "{}", stderr(&out));
}

#[test]
fn seed_env_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let other = dir.path().join("other.toml");
    std::fs::write(&other, SMALL.replace("seed = 5", "seed = 9")).unwrap();

    let run = |config: &Path, env: Option<&str>, out: &str| -> Vec<u8> {
        let out = dir.path().join(out);
        let o = spoofbench(&["generate", "--config", &s(config), "--out", &s(&out)], env);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out.join("domain-a.jsonl")).unwrap()
    };
    let from_config = run(&cfg, None, "a");
    assert_eq!(run(&cfg, None, "b"), from_config);
    assert_eq!(run(&other, Some("5"), "c"), from_config);
    assert_ne!(run(&other, None, "d"), from_config);
}

#[test]
fn generate_writes_snapshot_and_output_index() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("data");
    let o = spoofbench(
        &["generate", "--config", &s(&cfg), "--domain", "domain-b", "--out", &s(&out)],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("domain-b.jsonl").is_file());
    assert!(!out.join("domain-a.jsonl").exists());
    assert!(out.join("generate.config.toml").is_file());
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("outputs.json")).unwrap()).unwrap();
    assert!(index["generate"].as_array().is_some_and(|files| files.len() == 2));
    let counts = spoofbench::cli::manifest_counts(&out.join("domain-b.jsonl")).unwrap();
    assert_eq!(counts.train + counts.calib + counts.test, 60);
}
