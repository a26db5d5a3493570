use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cirforge::backend::batch::run_batch;
use cirforge::backend::mock::MockBackend;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cirforge"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/e2e")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let o = run(&["permute", "--bogus"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);

    let cfg = fixture("config.toml");
    let o = run(&[
        "validate",
        "--config",
        s(&cfg),
        "--set",
        "mine.nope=1",
        "--in",
        s(&fixture("pairs.jsonl")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
}

#[test]
fn missing_api_key_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.jsonl");
    let o = run(&[
        "generate",
        "--set",
        "api.key_env=CIRFORGE_TEST_UNSET_KEY",
        "--pairs",
        s(&fixture("pairs.jsonl")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("CIRFORGE_TEST_UNSET_KEY"));
    assert!(!out.exists());
}

#[test]
fn dry_run_prints_prompts_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.jsonl");
    let o = run(&[
        "generate",
        "--dry-run",
        "--set",
        "pipeline.max_objects=7",
        "--pairs",
        s(&fixture("pairs.jsonl")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.matches("=== ").count(), 10);
    assert!(text.contains("=== room00__room01 stage1 ==="));
    assert!(text.contains("up to 7 objects"));
    assert!(!out.exists());
}

fn generate(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "generate".to_string(),
        "--config".into(),
        s(&fixture("config.toml")).into(),
        "--pairs".into(),
        s(&fixture("pairs.jsonl")).into(),
        "--out".into(),
        s(&dir.join("results.jsonl")).into(),
    ];
    args.extend(extra.iter().map(|x| x.to_string()));
    bin().args(&args).output().unwrap()
}

#[test]
fn permute_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&generate(dir.path(), &[])), 0);
    let results = dir.path().join("results.jsonl");
    let cfg = fixture("config.toml");
    let mut outputs = vec![];
    for (name, seed) in [("a", "7"), ("b", "7"), ("c", "8")] {
        let out = dir.path().join(format!("{name}.jsonl"));
        let o = run(&[
            "permute",
            "--config",
            s(&cfg),
            "--set",
            &format!("permute.seed={seed}"),
            "--in",
            s(&results),
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(!outputs[0].is_empty());
    assert_ne!(outputs[0], outputs[2]);
}

#[test]
fn failed_pairs_give_exit_1_with_results() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("pairs.jsonl")).unwrap();
    let pairs = dir.path().join("pairs.jsonl");
    std::fs::write(
        &pairs,
        text.replacen("images/room03.png", "images/gone.png", 1),
    )
    .unwrap();
    let out = dir.path().join("results.jsonl");
    let o = run(&[
        "generate",
        "--config",
        s(&fixture("config.toml")),
        "--pairs",
        s(&pairs),
        "--image-root",
        s(&fixture("")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 1);
    let lines = std::fs::read_to_string(&out).unwrap();
    assert_eq!(lines.lines().count(), 10);
    assert!(lines.lines().nth(1).unwrap().contains("image_io"));
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("room02__room03: failed at stage2: image_io")
    );
}

#[test]
fn hash_import_mine_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let hashes = d.join("hashes.jsonl");
    let emb = d.join("emb.jsonl");
    let pairs = d.join("pairs.jsonl");
    let manifest = d.join("manifest.json");
    let corpus = fixture("corpus.jsonl");

    assert_eq!(
        code(&run(&["hash", "--corpus", s(&corpus), "--out", s(&hashes)])),
        0
    );
    assert_eq!(
        std::fs::read_to_string(&hashes).unwrap().lines().count(),
        20
    );

    // Alternate field names are accepted and rewritten canonically.
    let raw = std::fs::read_to_string(fixture("embeddings.jsonl"))
        .unwrap()
        .replace("\"vec\"", "\"embedding\"");
    let raw_path = d.join("raw.jsonl");
    std::fs::write(&raw_path, raw).unwrap();
    let o = run(&[
        "embed-import",
        "--in",
        s(&raw_path),
        "--out",
        s(&emb),
        "--corpus",
        s(&corpus),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = bin()
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .args([
            "mine",
            "--set",
            "mine.hash_min=0",
            "--set",
            "mine.hash_max=64",
            "--corpus",
            s(&corpus),
            "--embeddings",
            s(&emb),
            "--hashes",
            s(&hashes),
            "--out",
            s(&pairs),
            "--manifest-out",
            s(&manifest),
            "--val-fraction",
            "0.25",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // With the band wide open every image gets its nearest other-class neighbour.
    assert_eq!(std::fs::read_to_string(&pairs).unwrap().lines().count(), 20);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["created"], "2023-11-14T22:13:20Z");
    assert_eq!(m["splits"]["val"].as_array().unwrap().len(), 5);

    for f in [&hashes, &emb, &pairs, &manifest] {
        let o = run(&["validate", "--in", s(f)]);
        assert_eq!(
            code(&o),
            0,
            "{}: {}",
            f.display(),
            String::from_utf8_lossy(&o.stdout)
        );
    }
}

#[test]
fn validate_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.jsonl");
    std::fs::write(
        &p,
        r#"{"pair_id":"a__b","query_id":"a","target_id":"b","caption":{"text":"Ensure a lamp is there.","kind":"atomic","source_indices":[0],"token_count":7},"distractor_ids":["a"]}
"#,
    )
    .unwrap();
    let o = run(&["validate", "--in", s(&p)]);
    assert_eq!(code(&o), 1);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("line 1: forbidden_verb, distractor_is_query"));
    assert!(out.contains("1 records, 1 violations"));
}

#[test]
fn eval_reports_recall_and_map() {
    let dir = tempfile::tempdir().unwrap();
    let run_file = dir.path().join("run.jsonl");
    let rel = dir.path().join("rel.jsonl");
    let gallery = |first: &str, pos: usize| -> String {
        let mut ids: Vec<String> = (0..10).map(|i| format!("g{i}")).collect();
        ids.insert(pos, first.to_string());
        serde_json::to_string(&ids).unwrap()
    };
    std::fs::write(
        &run_file,
        format!(
            "{{\"query_id\":\"q1\",\"ranking\":{}}}\n{{\"query_id\":\"q2\",\"ranking\":{}}}\n{{\"query_id\":\"q3\",\"ranking\":{}}}\n",
            gallery("t1", 2),
            gallery("t2", 6),
            gallery("t3", 0)
        ),
    )
    .unwrap();
    std::fs::write(
        &rel,
        "{\"query_id\":\"q1\",\"relevant\":[\"t1\"]}\n{\"query_id\":\"q2\",\"relevant\":[\"t2\"]}\n{\"query_id\":\"q3\",\"relevant\":[\"t3\"]}\n",
    )
    .unwrap();
    let out = dir.path().join("report.json");
    let o = run(&[
        "eval",
        "--set",
        "eval.ks=[1, 5]",
        "--run",
        s(&run_file),
        "--relevance",
        s(&rel),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rep: HashMap<String, f64> =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!((rep["R@5"] - 2.0 / 3.0).abs() < 1e-12);
    assert!((rep["R@1"] - 1.0 / 3.0).abs() < 1e-12);
    assert!((rep["mAP@5"] - (1.0 / 3.0 + 1.0) / 3.0).abs() < 1e-12);
}

#[test]
fn batch_workflow_matches_live_generation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&generate(d, &[])), 0);
    let live = std::fs::read(d.join("results.jsonl")).unwrap();
    let live_usage = std::fs::read(d.join("results.usage.jsonl")).unwrap();

    let cfg = fixture("config.toml");
    let store = d.join("responses.jsonl");
    let mock = MockBackend::from_path(&fixture("scenes.json"), 10).unwrap();
    let mut rounds = 0;
    loop {
        let reqs = d.join(format!("requests{rounds}.jsonl"));
        let mut args = vec!["emit-batch", "--config", s(&cfg), "--pairs"];
        let pairs = fixture("pairs.jsonl");
        args.extend([s(&pairs), "--out", s(&reqs)]);
        if store.exists() {
            args.extend(["--responses", s(&store)]);
        }
        assert_eq!(code(&run(&args)), 0);
        if std::fs::metadata(&reqs).unwrap().len() == 0 {
            break;
        }
        let results = d.join(format!("output{rounds}.jsonl"));
        let failures = run_batch(
            &mock,
            BufReader::new(File::open(&reqs).unwrap()),
            File::create(&results).unwrap(),
        )
        .unwrap();
        assert_eq!(failures, 0);
        let o = run(&[
            "ingest-batch",
            "--in",
            s(&results),
            "--requests",
            s(&reqs),
            "--out",
            s(&store),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        rounds += 1;
    }
    assert_eq!(rounds, 3);

    let replay_dir = d.join("replay");
    std::fs::create_dir(&replay_dir).unwrap();
    let o = generate(&replay_dir, &["--responses", s(&store)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(replay_dir.join("results.jsonl")).unwrap(),
        live
    );
    assert_eq!(
        std::fs::read(replay_dir.join("results.usage.jsonl")).unwrap(),
        live_usage
    );

    // Dropping one result line leaves it in the missing set.
    let last = d.join("output0.jsonl");
    let text = std::fs::read_to_string(&last).unwrap();
    let kept: Vec<&str> = text.lines().skip(1).collect();
    let dropped: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let short = d.join("short.jsonl");
    std::fs::write(&short, kept.join("\n") + "\n").unwrap();
    let o = run(&[
        "ingest-batch",
        "--in",
        s(&short),
        "--requests",
        s(&d.join("requests0.jsonl")),
        "--out",
        s(&d.join("partial_store.jsonl")),
    ]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(&format!(
        "missing {}",
        dropped["custom_id"].as_str().unwrap()
    )));
    assert!(err.contains("1 missing"));
}
