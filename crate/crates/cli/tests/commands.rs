use std::fs;
use std::path::Path;

use clap::Parser;
use serde_json::Value;

use contextgpt::data;
use contextgpt_cli::{run, Cli};

fn dataset() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for file in [
        "schema.json",
        "phrases.json",
        "template.json",
        "pool.jsonl",
        "rules.json",
    ] {
        fs::copy(
            data::data_dir().join("domino").join(file),
            dir.path().join(file),
        )
        .unwrap();
    }
    dir
}

fn contextgpt(dir: &Path, args: &[&str]) -> anyhow::Result<String> {
    let mut argv = vec![
        "contextgpt".to_string(),
        "--dataset-dir".into(),
        dir.display().to_string(),
    ];
    argv.extend(args.iter().map(|s| s.to_string()));
    let cli = Cli::try_parse_from(argv)?;
    let mut out = Vec::new();
    run(cli, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn write_windows(dir: &Path) -> String {
    let speeds = ["null", "low", "medium", "high"];
    let lines: Vec<String> = (0..200)
        .map(|i| {
            serde_json::json!({
                "window_id": format!("w{i}"),
                "user": format!("u{}", i % 5),
                "z": 4,
                "context": {"speed": speeds[i % 4], "environment": if i % 8 < 4 { "indoor" } else { "outdoor" }}
            })
            .to_string()
        })
        .collect();
    let path = dir.join("windows.jsonl");
    fs::write(&path, lines.join("\n")).unwrap();
    path.display().to_string()
}

#[test]
fn render_prints_the_description() {
    let dir = dataset();
    let text = contextgpt(
        dir.path(),
        &[
            "render",
            "--context",
            r#"{"environment":"outdoor","speed":"low"}"#,
        ],
    )
    .unwrap();
    assert!(text.starts_with("In the last 4 seconds the user Bob was in an outdoor environment"));
    assert!(contextgpt(dir.path(), &["render", "--context", r#"{"speed":"warp"}"#]).is_err());
}

#[test]
fn batch_rerun_is_served_from_cache() {
    let dir = dataset();
    let windows = write_windows(dir.path());
    let cache = dir.path().join("cache.jsonl").display().to_string();
    let out = |name: &str| dir.path().join(name).display().to_string();

    let first: Value = serde_json::from_str(
        &contextgpt(
            dir.path(),
            &[
                "--cache",
                &cache,
                "--k",
                "0.5",
                "batch",
                "--in",
                &windows,
                "--out",
                &out("a.jsonl"),
            ],
        )
        .unwrap(),
    )
    .unwrap();
    assert_eq!(first["windows"], 200);
    assert_eq!(first["unique_contexts"], 8);
    assert_eq!(first["backend_calls"], 8);
    assert!(Path::new(&out("a.jsonl.summary.json")).exists());

    for name in ["b.jsonl", "c.jsonl"] {
        let again: Value = serde_json::from_str(
            &contextgpt(
                dir.path(),
                &[
                    "--cache",
                    &cache,
                    "--k",
                    "0.5",
                    "batch",
                    "--in",
                    &windows,
                    "--out",
                    &out(name),
                ],
            )
            .unwrap(),
        )
        .unwrap();
        assert_eq!(again["backend_calls"], 0);
        assert_eq!(again["cache_hits"], 8);
    }
    assert_eq!(
        fs::read(out("b.jsonl")).unwrap(),
        fs::read(out("c.jsonl")).unwrap()
    );

    let aggregate: Value = serde_json::from_str(
        &contextgpt(
            dir.path(),
            &[
                "compare",
                "--in",
                &out("a.jsonl"),
                "--out",
                &out("report.csv"),
            ],
        )
        .unwrap(),
    )
    .unwrap();
    assert_eq!(aggregate["by_k"][0]["mean_l2o"], 1.0);
    assert_eq!(aggregate["by_k"][0]["mean_o2l"], 1.0);
    let csv = fs::read_to_string(out("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(Path::new(&out("report.json")).exists());
}

#[test]
fn k_one_runs_without_examples() {
    let dir = dataset();
    let windows = write_windows(dir.path());
    let out = dir.path().join("v.jsonl").display().to_string();
    let summary: Value = serde_json::from_str(
        &contextgpt(
            dir.path(),
            &["--k", "1", "batch", "--in", &windows, "--out", &out],
        )
        .unwrap(),
    )
    .unwrap();
    assert_eq!(summary["examples_per_prompt_mean"], 0.0);
    assert!(contextgpt(
        dir.path(),
        &["--k", "1.5", "batch", "--in", &windows, "--out", &out]
    )
    .is_err());
}

#[test]
fn pool_commands_edit_the_pool_file() {
    let dir = dataset();
    let listed = contextgpt(dir.path(), &["pool", "list"]).unwrap();
    assert_eq!(listed.lines().count(), 21);

    let embedded = contextgpt(dir.path(), &["pool", "embed"]).unwrap();
    assert!(embedded.contains("21 computed"), "{embedded}");
    let embedded = contextgpt(dir.path(), &["pool", "embed"]).unwrap();
    assert!(embedded.contains("0 computed, 21 reused"), "{embedded}");

    let example = r#"{"id":"gym-bike","context":{"semantic-location":"Gym","speed":"null"},"z":4,"consistent":["Cycling","Running"]}"#;
    contextgpt(dir.path(), &["pool", "add", "--example", example]).unwrap();
    assert!(contextgpt(dir.path(), &["pool", "add", "--example", example]).is_err());
    assert_eq!(
        contextgpt(dir.path(), &["pool", "list"])
            .unwrap()
            .lines()
            .count(),
        22
    );
    let embedded = contextgpt(dir.path(), &["pool", "embed"]).unwrap();
    assert!(embedded.contains("1 computed, 21 reused"), "{embedded}");

    contextgpt(dir.path(), &["pool", "rm", "gym-bike"]).unwrap();
    assert!(contextgpt(dir.path(), &["pool", "rm", "gym-bike"]).is_err());
    assert_eq!(
        contextgpt(dir.path(), &["pool", "list"])
            .unwrap()
            .lines()
            .count(),
        21
    );
}

#[test]
fn select_and_probe_agree() {
    let dir = dataset();
    let ctx = r#"{"semantic-location":"Gym","environment":"indoor"}"#;
    let selected: Value = serde_json::from_str(
        &contextgpt(dir.path(), &["--k", "0.6", "select", "--context", ctx]).unwrap(),
    )
    .unwrap();
    let probe: Value = serde_json::from_str(
        &contextgpt(dir.path(), &["--k", "0.6", "probe", "--context", ctx]).unwrap(),
    )
    .unwrap();
    let ids = |v: &Value, key: &str| -> Vec<String> {
        v[key]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| {
                s.pointer("/id")
                    .or(s.pointer("/example/id"))
                    .unwrap()
                    .as_str()
                    .unwrap()
                    .to_string()
            })
            .collect()
    };
    assert_eq!(ids(&selected, "selected"), ids(&probe, "selected"));
    assert_eq!(probe["vector"].as_array().unwrap().len(), 14);
}

#[test]
fn missing_inputs_are_reported() {
    let err = Cli::try_parse_from(["contextgpt", "render", "--context", "{}"])
        .map_err(anyhow::Error::from)
        .and_then(|cli| run(cli, &mut Vec::new()))
        .unwrap_err();
    assert!(err.to_string().contains("--dataset-dir"), "{err}");
}
