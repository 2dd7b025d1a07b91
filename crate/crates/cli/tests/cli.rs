use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use priming_core::head::HeadFile;
use priming_core::pool::read_pool;
use serde_json::Value;

fn priming(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_priming"))
        .args(args)
        .env_remove("NP_WORKERS")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = priming(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn error_json(out: &Output) -> Value {
    assert_eq!(out.status.code(), Some(1));
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(line.trim()).unwrap_or_else(|e| panic!("{e}: {line}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SYNTH: &str = r#"{"n_classes": 6, "dim": 16, "per_class": 50, "test_per_class": 10, "distractors": 40, "seed": 7}"#;

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("cfg.json");
    fs::write(
        &path,
        format!("{{\"synth\": {SYNTH}, \"cap\": 20, \"shots\": 2, \"seeds\": [0, 1, 2]{extra}}}"),
    )
    .unwrap();
    path
}

const REPRODUCIBLE: &[&str] = &[
    "pool_raw.jsonl",
    "pool_filtered.jsonl",
    "pool_capped.jsonl",
    "pool_transduced.jsonl",
    "head_zero_shot.nphead",
    "head_centroid.nphead",
    "head_ensemble.nphead",
    "head_transduced_centroid.nphead",
    "head_transduced_ensemble.nphead",
    "eval_zero_shot.json",
    "eval_primed.json",
    "eval_transduced.json",
    "summary.jsonl",
    "fewshot.json",
    "provenance.json",
];

#[test]
fn run_writes_every_artifact_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["run", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["run", "--config", s(&cfg), "--out", s(&b), "--workers", "3"]);
    for name in REPRODUCIBLE.iter().chain(&["timings.jsonl", "config.json"]) {
        assert!(a.join(name).is_file(), "missing {name}");
    }
    for name in REPRODUCIBLE {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs"
        );
    }
    assert_eq!(
        fs::read(a.join("data/manifest.json")).unwrap(),
        fs::read(b.join("data/manifest.json")).unwrap()
    );

    let summary: Value =
        serde_json::from_str(fs::read_to_string(a.join("summary.jsonl")).unwrap().trim()).unwrap();
    for key in [
        "zero_shot_accuracy",
        "primed_accuracy",
        "transduced_accuracy",
        "pool_sizes",
    ] {
        assert!(summary.get(key).is_some(), "summary lacks {key}");
    }
    let (header, pool) = read_pool(a.join("pool_capped.jsonl")).unwrap();
    assert!(header.created_from.starts_with("priming "));
    assert!(pool.cluster_sizes().iter().all(|&n| n <= 20));
    let fewshot: Value =
        serde_json::from_slice(&fs::read(a.join("fewshot.json")).unwrap()).unwrap();
    assert_eq!(fewshot["accuracies"].as_array().unwrap().len(), 3);
    let prov: Value =
        serde_json::from_slice(&fs::read(a.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["command"], "run");
    assert!(prov["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .any(|v| v == "pool_raw.jsonl"));
}

#[test]
fn different_config_changes_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    ok(&[
        "run",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("a")),
    ]);
    ok(&[
        "run",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("b")),
        "--cap",
        "5",
    ]);
    let read = |d: &str| fs::read_to_string(dir.path().join(d).join("provenance.json")).unwrap();
    assert_ne!(read("a"), read("b"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), ", \"k\": 3");
    let out = dir.path().join("o");
    ok(&[
        "synth",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--cap",
        "7",
        "--seeds",
        "4,5",
        "--alpha-n0",
        "20",
    ]);
    let echo: Value = serde_json::from_slice(&fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["cap"], 7);
    assert_eq!(echo["k"], 3);
    assert_eq!(echo["seeds"], serde_json::json!([4, 5]));
    assert_eq!(echo["alpha"]["n0"], 20.0);
    assert_eq!(echo["shots"], 2);
}

#[test]
fn workers_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("o");
    let status = Command::new(env!("CARGO_BIN_EXE_priming"))
        .args(["synth", "--config", s(&cfg), "--out", s(&out)])
        .env("NP_WORKERS", "2")
        .status()
        .unwrap();
    assert!(status.success());
    let echo: Value = serde_json::from_slice(&fs::read(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["workers"], 2);
}

#[test]
fn config_errors_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let e = error_json(&priming(&["pool-build", "--out", s(&out)]));
    assert_eq!(e["error"]["stage"], "pool-build");
    assert_eq!(e["error"]["kind"], "MissingRequired");

    let e = error_json(&priming(&["run"]));
    assert_eq!(e["error"]["kind"], "MissingRequired");

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"cap": 3, "nonsense": 1}"#).unwrap();
    let e = error_json(&priming(&["run", "--config", s(&bad), "--out", s(&out)]));
    assert_eq!(e["error"]["kind"], "UnknownKey");

    fs::write(&bad, r#"{"cap": "many"}"#).unwrap();
    let e = error_json(&priming(&["run", "--config", s(&bad), "--out", s(&out)]));
    assert_eq!(e["error"]["kind"], "TypeError");

    fs::write(&bad, r#"{"cap": "#).unwrap();
    let e = error_json(&priming(&["run", "--config", s(&bad), "--out", s(&out)]));
    assert_eq!(e["error"]["kind"], "Syntax");

    let e = error_json(&priming(&[
        "run",
        "--config",
        s(&dir.path().join("none.json")),
        "--out",
        s(&out),
    ]));
    assert_eq!(e["error"]["kind"], "Io");
}

#[test]
fn core_errors_carry_their_kind() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.json");
    fs::write(
        &manifest,
        r#"{"dim": 4, "shards": [{"captions": "c.jsonl", "embeddings": "e.npemb"}]}"#,
    )
    .unwrap();
    fs::write(
        dir.path().join("c.jsonl"),
        "{\"id\": 1, \"caption\": \"x\"}\n",
    )
    .unwrap();
    fs::write(
        dir.path().join("e.npemb"),
        b"NPEMB001\x04\0\0\0\x01\0\0\0\0\0\0\0\0\0",
    )
    .unwrap();
    let e = error_json(&priming(&[
        "index-build",
        "--corpus",
        s(&manifest),
        "--out",
        s(&dir.path().join("o")),
    ]));
    assert_eq!(e["error"]["kind"], "TruncatedPayload");
    assert!(e["error"]["message"].as_str().unwrap().len() > 5);
}

#[test]
fn unknown_command_fails() {
    let out = priming(&["frobnicate"]);
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(0));
    assert!(!out.stderr.is_empty());
}

#[test]
fn stage_commands_reproduce_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = dir.path().join("run");
    ok(&["run", "--config", s(&cfg), "--out", s(&run)]);
    let data = run.join("data");
    let corpus = data.join("manifest.json");
    let classes = data.join("classes.json");
    let test = data.join("test.npemb");
    let labels = data.join("test_labels.txt");
    let o = |name: &str| dir.path().join(name);
    let base = ["--corpus", s(&corpus), "--classes", s(&classes)];
    let with = |extra: &[&str]| -> Vec<String> {
        base.iter().chain(extra).map(|x| x.to_string()).collect()
    };
    let call = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd.to_string()];
        args.extend(with(extra));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs);
    };

    call("index-build", &["--out", s(&o("idx"))]);
    assert!(o("idx/index.npidx").is_file());
    call(
        "index-stats",
        &["--index", s(&o("idx/index.npidx")), "--out", s(&o("stats"))],
    );
    let stats = fs::read_to_string(o("stats/query_stats.jsonl")).unwrap();
    assert_eq!(stats.lines().count(), 12);

    call(
        "pool-build",
        &["--index", s(&o("idx/index.npidx")), "--out", s(&o("raw"))],
    );
    call(
        "pool-filter",
        &[
            "--pool",
            s(&o("raw/pool_raw.jsonl")),
            "--out",
            s(&o("filt")),
        ],
    );
    let ids = o("exclude.txt");
    fs::write(&ids, "").unwrap();
    call(
        "pool-exclude",
        &[
            "--pool",
            s(&o("filt/pool_filtered.jsonl")),
            "--exclude",
            s(&ids),
            "--out",
            s(&o("excl")),
        ],
    );
    call(
        "pool-cap",
        &[
            "--pool",
            s(&o("excl/pool_excluded.jsonl")),
            "--cap",
            "20",
            "--out",
            s(&o("cap")),
        ],
    );
    call(
        "transduct",
        &[
            "--pool",
            s(&o("cap/pool_capped.jsonl")),
            "--test",
            s(&test),
            "--out",
            s(&o("tr")),
        ],
    );

    for (stage, run_name) in [
        ("raw/pool_raw.jsonl", "pool_raw.jsonl"),
        ("filt/pool_filtered.jsonl", "pool_filtered.jsonl"),
        ("cap/pool_capped.jsonl", "pool_capped.jsonl"),
        ("tr/pool_transduced.jsonl", "pool_transduced.jsonl"),
    ] {
        assert_eq!(
            read_pool(o(stage)).unwrap().1,
            read_pool(run.join(run_name)).unwrap().1,
            "{stage}"
        );
    }

    let train = data.join("train.npemb");
    let train_labels = data.join("train_labels.txt");
    call(
        "attune",
        &[
            "--pool",
            s(&o("cap/pool_capped.jsonl")),
            "--train",
            s(&train),
            "--train-labels",
            s(&train_labels),
            "--shots",
            "2",
            "--out",
            s(&o("heads")),
        ],
    );
    for name in [
        "head_zero_shot.nphead",
        "head_centroid.nphead",
        "head_ensemble.nphead",
    ] {
        assert_eq!(
            fs::read(o("heads").join(name)).unwrap(),
            fs::read(run.join(name)).unwrap(),
            "{name}"
        );
    }

    let head = o("heads/head_ensemble.nphead");
    let zs = o("heads/head_zero_shot.nphead");
    call(
        "eval",
        &[
            "--head",
            s(&zs),
            "--head-b",
            s(&head),
            "--test",
            s(&test),
            "--test-labels",
            s(&labels),
            "--out",
            s(&o("ev")),
        ],
    );
    let report: Value = serde_json::from_slice(&fs::read(o("ev/eval.json")).unwrap()).unwrap();
    let run_report: Value =
        serde_json::from_slice(&fs::read(run.join("eval_zero_shot.json")).unwrap()).unwrap();
    assert_eq!(report, run_report);
    let cmp: Value = serde_json::from_slice(&fs::read(o("ev/compare.json")).unwrap()).unwrap();
    let primed: Value =
        serde_json::from_slice(&fs::read(run.join("eval_primed.json")).unwrap()).unwrap();
    assert_eq!(cmp["accuracy_b"], primed["accuracy"]);

    call(
        "bench",
        &[
            "--pool",
            s(&o("cap/pool_capped.jsonl")),
            "--test",
            s(&test),
            "--out",
            s(&o("bench")),
        ],
    );
    let bench: Value =
        serde_json::from_str(fs::read_to_string(o("bench/bench.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(bench["queries"], 60);

    let h = HeadFile::load(&head).unwrap();
    assert_eq!(h.alphas.len(), 6);
}

#[test]
fn eval_requires_labels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = dir.path().join("run");
    ok(&["run", "--config", s(&cfg), "--out", s(&run)]);
    let e = error_json(&priming(&[
        "eval",
        "--head",
        s(&run.join("head_zero_shot.nphead")),
        "--test",
        s(&run.join("data/test.npemb")),
        "--out",
        s(&dir.path().join("ev")),
    ]));
    assert_eq!(e["error"]["kind"], "MissingRequired");
}
