use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn focal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_focal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn schema(name: &str) -> jsonschema::Validator {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(name);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
    jsonschema::validator_for(&v).unwrap()
}

fn assert_valid(v: &jsonschema::Validator, doc: &Value) {
    let errs: Vec<String> = v.iter_errors(doc).map(|e| format!("{e} at {}", e.instance_path)).collect();
    assert!(errs.is_empty(), "{errs:#?}");
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display())))
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic suite: two planted documents and one control.
struct Suite {
    dir: tempfile::TempDir,
}

impl Suite {
    fn new(edit: impl FnOnce(&mut Value)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let spec = json!({
            "docs": 2, "words_per_doc": 240, "control_docs": 1, "seed": 11,
            "model": {"kind": "keyword_and", "keywords": ["governing", "illinois"], "p_on": 0.9, "p_off": 0.1}
        });
        let sp = dir.path().join("spec.json");
        std::fs::write(&sp, spec.to_string()).unwrap();
        let o = focal(&["synth", "--spec", s(&sp), "--out", s(&dir.path().join("suite"))]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let suite = Suite { dir };
        let mut cfg = read_json(&suite.config());
        cfg["narrow"]["steps"] = json!(1);
        cfg["eval"]["k_max_eval"] = json!(20);
        edit(&mut cfg);
        std::fs::write(suite.config(), cfg.to_string()).unwrap();
        suite
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("suite/config.json")
    }

    fn data(&self) -> PathBuf {
        self.dir.path().join("suite/dataset.jsonl")
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn explain(&self, method: &str, out: &str) -> Output {
        focal(&[
            "explain",
            "--config",
            s(&self.config()),
            "--data",
            s(&self.data()),
            "--method",
            method,
            "--out",
            s(&self.path(out)),
        ])
    }
}

const IDS: [&str; 3] = ["doc-0000", "doc-0001", "ctrl-0000"];

#[test]
fn synth_writes_schema_valid_records() {
    let suite = Suite::new(|_| {});
    let v = schema("dataset_record.schema.json");
    let text = std::fs::read_to_string(suite.data()).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for l in &lines {
        assert_valid(&v, l);
    }
    assert_eq!(lines[2]["evidence"], json!([]));
}

#[test]
fn explain_is_deterministic_and_schema_valid() {
    let suite = Suite::new(|_| {});
    assert_eq!(code(&suite.explain("focus", "a")), 0);
    assert_eq!(code(&suite.explain("focus", "b")), 0);
    let v = schema("explanation.schema.json");
    for id in IDS {
        let a = std::fs::read(suite.path(&format!("a/{id}.json"))).unwrap();
        let b = std::fs::read(suite.path(&format!("b/{id}.json"))).unwrap();
        assert_eq!(a, b, "{id}");
        let x: Value = serde_json::from_slice(&a).unwrap();
        assert_valid(&v, &x);
        assert!(suite.path(&format!("a/{id}.html")).exists());
        assert_eq!(x["diagnostics"]["budget"]["target_tokens_scout"], json!(0));
    }
}

#[test]
fn seed_flag_changes_output() {
    let suite = Suite::new(|_| {});
    assert_eq!(code(&suite.explain("focus", "a")), 0);
    let o = focal(&[
        "explain", "--config", s(&suite.config()), "--data", s(&suite.data()),
        "--out", s(&suite.path("b")), "--seed", "999",
    ]);
    assert_eq!(code(&o), 0);
    let a = read_json(&suite.path("a/doc-0000.json"));
    let b = read_json(&suite.path("b/doc-0000.json"));
    assert_ne!(a["diagnostics"]["seed"], b["diagnostics"]["seed"]);
}

#[test]
fn lime_uses_the_whole_document() {
    let suite = Suite::new(|_| {});
    assert_eq!(code(&suite.explain("lime", "out")), 0);
    let x = read_json(&suite.path("out/doc-0000.json"));
    let mask = x["focus_mask"].as_array().unwrap();
    assert_eq!(mask.len(), 240);
    assert!(mask.iter().all(|b| b == 1));
    assert!(x["diagnostics"]["scout"].is_null());
    assert!(x["diagnostics"]["provenance"].as_array().unwrap().iter().all(|p| p == "fitted"));
}

#[test]
fn evaluate_outputs_agree_with_each_other() {
    let suite = Suite::new(|_| {});
    assert_eq!(code(&suite.explain("focus", "ex")), 0);
    let run = |metric: &str| {
        focal(&[
            "evaluate", "--config", s(&suite.config()), "--data", s(&suite.data()),
            "--explanations", s(&suite.path("ex")), "--metric", metric, "--out", s(&suite.path("ev")),
        ])
    };
    assert_eq!(code(&run("aopc")), 0);
    let a = read_json(&suite.path("ev/aopc.json"));
    assert_valid(&schema("aopc.schema.json"), &a);
    let c = &a["curve"];
    let examples = c["examples"].as_array().unwrap();
    assert_eq!(examples.len(), 3);
    let per_k: Vec<f64> = c["per_k"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(per_k.len(), 20);
    for (k, v) in per_k.iter().enumerate() {
        let mean = examples.iter().map(|e| e["drops"][k].as_f64().unwrap()).sum::<f64>() / 3.0;
        assert!((mean - v).abs() < 1e-12);
    }
    assert_eq!(c["aopc_10"].as_f64().unwrap(), per_k[9]);
    assert!(c["aopc_50"].is_null());
    let mean_k = per_k.iter().sum::<f64>() / 20.0;
    assert!((c["aopc"].as_f64().unwrap() - mean_k).abs() < 1e-12);

    let rows = std::fs::read_to_string(suite.path("ev/aopc.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3 + 1);
    let curve = std::fs::read_to_string(suite.path("ev/aopc_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 21);

    assert_eq!(code(&run("recall")), 0);
    let r = read_json(&suite.path("ev/recall.json"));
    assert_valid(&schema("recall.schema.json"), &r);
    assert_eq!(r["report"]["skipped"][0]["id"], json!("ctrl-0000"));
    assert_eq!(r["report"]["examples"].as_array().unwrap().len(), 2);
}

#[test]
fn missing_explanation_is_reported_per_record() {
    let suite = Suite::new(|_| {});
    assert_eq!(code(&suite.explain("focus", "ex")), 0);
    std::fs::remove_file(suite.path("ex/doc-0001.json")).unwrap();
    let o = focal(&[
        "evaluate", "--config", s(&suite.config()), "--data", s(&suite.data()),
        "--explanations", s(&suite.path("ex")), "--metric", "aopc", "--out", s(&suite.path("ev")),
    ]);
    assert_eq!(code(&o), focal_cli::EXIT_RECORD);
    let a = read_json(&suite.path("ev/aopc.json"));
    assert_eq!(a["curve"]["examples"].as_array().unwrap().len(), 2);
    assert_eq!(a["excluded"][0]["id"], json!("doc-0001"));
    let summary = read_json(&suite.path("ev/summary.json"));
    assert_eq!(summary["succeeded"], json!(2));
}

#[test]
fn narrow_with_one_step_gives_two_nested_rows() {
    let suite = Suite::new(|_| {});
    let o = focal(&[
        "narrow", "--config", s(&suite.config()), "--data", s(&suite.data()),
        "--out", s(&suite.path("nw")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = schema("narrowing.schema.json");
    for id in IDS {
        let t = read_json(&suite.path(&format!("nw/{id}.narrow.json")));
        assert_valid(&v, &t);
        let steps = t["steps"].as_array().unwrap();
        assert_eq!(steps.len(), 2);
        let m0 = steps[0]["focus_mask"].as_array().unwrap();
        let m1 = steps[1]["focus_mask"].as_array().unwrap();
        let diff: Vec<usize> = (0..m0.len()).filter(|&i| m0[i] != m1[i]).collect();
        assert_eq!(diff.len(), 1);
        assert_eq!((&m0[diff[0]], &m1[diff[0]]), (&json!(1), &json!(0)));
        assert_eq!(steps[1]["frozen"], json!(diff[0]));
        let csv = std::fs::read_to_string(suite.path(&format!("nw/{id}.narrow.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("step,n_active,mean_aopc,optimal"));
    }
}

#[test]
fn report_escapes_markup_and_flags_broken_files() {
    let suite = Suite::new(|_| {});
    assert_eq!(code(&suite.explain("lime", "ex")), 0);
    let p = suite.path("ex/doc-0000.json");
    let mut x = read_json(&p);
    x["units"][0]["surface"] = json!("<script>alert(1)</script>");
    x["diagnostics"]["question"] = json!("a & b?");
    std::fs::write(&p, x.to_string()).unwrap();
    std::fs::write(suite.path("ex/broken.json"), "{not json").unwrap();

    let o = focal(&["report", "--input", s(&suite.path("ex")), "--out", s(&suite.path("html"))]);
    assert_eq!(code(&o), focal_cli::EXIT_RECORD);
    let html = std::fs::read_to_string(suite.path("html/doc-0000.html")).unwrap();
    assert!(!html.contains("<script>"));
    assert!(html.contains("&lt;script&gt;alert(1)&lt;/script&gt;"));
    assert!(html.contains("a &amp; b?"));
    let err = std::fs::read_to_string(suite.path("html/broken.html")).unwrap();
    assert!(err.contains("class=\"error\""));
    assert!(suite.path("html/ctrl-0000.html").exists());
    assert!(!suite.path("html/summary.html").exists());
}

#[test]
fn cache_file_lines_match_schema_and_are_reused() {
    let suite = Suite::new(|_| {});
    let cache = suite.path("cache.jsonl");
    let mut cfg = read_json(&suite.config());
    cfg["cache_path"] = json!(s(&cache));
    std::fs::write(suite.config(), cfg.to_string()).unwrap();
    assert_eq!(code(&suite.explain("focus", "a")), 0);
    let v = schema("cache_record.schema.json");
    let text = std::fs::read_to_string(&cache).unwrap();
    assert!(!text.is_empty());
    for l in text.lines() {
        assert_valid(&v, &serde_json::from_str(l).unwrap());
    }
    // A warm cache answers everything: no new lines and nothing charged.
    assert_eq!(code(&suite.explain("focus", "b")), 0);
    assert_eq!(std::fs::read_to_string(&cache).unwrap(), text);
    let a = read_json(&suite.path("a/doc-0000.json"));
    let b = read_json(&suite.path("b/doc-0000.json"));
    assert_eq!(a["scores"], b["scores"]);
    assert_eq!(b["diagnostics"]["budget"]["target_tokens_total"], json!(0));
}

#[test]
fn exit_codes() {
    let suite = Suite::new(|_| {});
    let o = focal(&["explain", "--config", s(&suite.path("nope.json")), "--data", s(&suite.data())]);
    assert_eq!(code(&o), focal_cli::EXIT_CONFIG);

    let bad = suite.path("bad.json");
    let mut cfg = read_json(&suite.config());
    cfg["surprise"] = json!(1);
    std::fs::write(&bad, cfg.to_string()).unwrap();
    let o = focal(&["explain", "--config", s(&bad), "--data", s(&suite.data())]);
    assert_eq!(code(&o), focal_cli::EXIT_CONFIG);

    let o = focal(&["explain", "--frobnicate"]);
    assert_eq!(code(&o), focal_cli::EXIT_USAGE);

    let baddata = suite.path("bad.jsonl");
    std::fs::write(&baddata, "{\"id\": \"x\"}\n").unwrap();
    let o = focal(&["explain", "--config", s(&suite.config()), "--data", s(&baddata)]);
    assert_eq!(code(&o), focal_cli::EXIT_RECORD);

    // One query's worth of tokens cannot fund a single sample.
    let mut cfg = read_json(&suite.config());
    cfg["budget"]["target_queries"] = Value::Null;
    cfg["budget"]["target_tokens"] = json!(5);
    std::fs::write(suite.config(), cfg.to_string()).unwrap();
    let o = suite.explain("focus", "out");
    assert_eq!(code(&o), focal_cli::EXIT_BUDGET);
    let summary = read_json(&suite.path("out/summary.json"));
    assert_eq!(summary["failed"].as_array().unwrap().len(), 3);
    assert_eq!(summary["failed"][0]["kind"], json!("budget"));
}
