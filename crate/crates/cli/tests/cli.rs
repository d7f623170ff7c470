use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use jfaa_core::scores::{write_scores, ActionPair, ScoreSet};
use jfaa_core::windows::{write_annotations, AnnotationRecord};

fn jfaa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jfaa"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

// Per-epoch overall MT5R (verb, noun, action) for epochs 18..=27.
const VALIDATION_MATRIX: [(f64, f64, f64); 10] = [
    (60.9, 59.3, 39.1),
    (62.3, 58.8, 38.8),
    (63.9, 60.3, 39.2),
    (65.1, 60.3, 38.9),
    (63.6, 61.1, 39.6),
    (64.0, 60.8, 39.5),
    (64.2, 61.2, 39.5),
    (65.0, 60.1, 39.5),
    (64.4, 61.8, 39.1),
    (64.3, 60.5, 39.2),
];

fn validation_matrix_tsv() -> String {
    let mut s = String::from(
        "epoch\thead\tverb_overall_mt5r\tverb_unseen_mt5r\tverb_tail_mt5r\tnoun_overall_mt5r\tnoun_unseen_mt5r\tnoun_tail_mt5r\taction_overall_mt5r\taction_unseen_mt5r\taction_tail_mt5r\n",
    );
    for (i, (v, n, a)) in VALIDATION_MATRIX.iter().enumerate() {
        s.push_str(&format!("{}\t0\t{v}\tNA\tNA\t{n}\tNA\tNA\t{a}\tNA\tNA\n", 18 + i));
    }
    s
}

#[test]
fn select_on_fixture_reports_best_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.tsv");
    fs::write(&path, validation_matrix_tsv()).unwrap();
    let o = jfaa(&["select", "--metrics", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out, "verb -> 21\nnoun -> 26\naction -> 22\n");
}

#[test]
fn select_with_missing_metrics_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = jfaa(&["select", "--metrics", dir.path().join("nope.tsv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("grad.json");
    let o = jfaa(&["gradcheck", "--report", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
    assert!(!v["tensors"].as_array().unwrap().is_empty());
}

#[test]
fn gradcheck_failure_exits_with_check_code() {
    // A negative tolerance cannot be met.
    let o = jfaa(&["gradcheck", "--tolerance=-1", "--samples", "1"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

fn score_set(id: &str, n_pairs: usize) -> ScoreSet {
    ScoreSet {
        narration_id: id.into(),
        verb: (0..97).map(|i| i as f64 / 97.0).collect(),
        noun: (0..300).map(|i| i as f64 / 300.0).collect(),
        action: (0..n_pairs).map(|i| (ActionPair::new(i as u32 % 97, i as u32 / 97), 1.0 - i as f64 / 200.0)).collect(),
    }
}

#[test]
fn submit_refuses_short_action_list() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("short.scores");
    write_scores(&[score_set("a", 99), score_set("b", 99)], &scores).unwrap();
    let out = dir.path().join("sub.json");
    let o = jfaa(&["submit", "--scores", scores.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("99 action pairs"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn submit_accepts_full_scores() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("ok.scores");
    write_scores(&[score_set("a", 100)], &scores).unwrap();
    let out = dir.path().join("sub.json");
    let o = jfaa(&["submit", "--scores", scores.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["results"]["a"]["action"].as_object().unwrap().len(), 100);
}

fn record(id: &str, start_s: f64) -> AnnotationRecord {
    AnnotationRecord {
        narration_id: id.into(),
        video_id: "P01_01".into(),
        participant_id: "P01".into(),
        start_s,
        stop_s: start_s + 2.0,
        verb_class: 1,
        noun_class: 2,
    }
}

fn windows(ann: &Path, out: &Path) -> Output {
    jfaa(&["windows", "--annotations", ann.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

#[test]
fn windows_writes_one_row_per_record_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann.csv");
    write_annotations(&ann, &[record("x_1", 10.0), record("x_2", 3.0), record("x_3", 7.25)]).unwrap();
    let a = dir.path().join("a.tsv");
    let b = dir.path().join("b.tsv");
    assert!(windows(&ann, &a).status.success());
    assert!(windows(&ann, &b).status.success());
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("narration_id\t"));
    // start 10 with a 1 s gap and 4 s observation: [5, 9], not clamped.
    let row: Vec<&str> = lines[1].split('\t').collect();
    assert_eq!(&row[..4], &["x_1", "5", "9", "0"]);
    assert_eq!(row[4].split(',').count(), 32);
    // start 3: [0, 2], clamped.
    assert!(lines[2].starts_with("x_2\t0\t2\t1\t"));
}

#[test]
fn unsatisfiable_window_names_the_instance() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("ann.csv");
    write_annotations(&ann, &[record("ok_1", 10.0), record("early_7", 0.5)]).unwrap();
    let out = dir.path().join("w.tsv");
    let o = windows(&ann, &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("early_7"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = jfaa(&["select", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_file_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "not_a_key = 3\n").unwrap();
    let o = jfaa(&["--config", cfg.to_str().unwrap(), "select"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synthetic_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let cfg = dir.path().join("config.toml");
    let c = cfg.to_str().unwrap();
    let ok = |o: Output| assert!(o.status.success(), "{}", stderr(&o));
    ok(jfaa(&["synth", "--out-dir", d, "--n-train", "40", "--n-val", "16", "--n-verbs", "4", "--n-nouns", "4"]));
    ok(jfaa(&[
        "--config", c, "train", "--epochs", "2", "--lrs", "1e-3", "--wds", "0", "--allow-any-grid", "--d-model", "16",
        "--batch-size", "8",
    ]));
    ok(jfaa(&["--config", c, "select"]));
    ok(jfaa(&["--config", c, "ensemble", "--grid-steps", "4"]));
    let run = dir.path().join("run");
    let meta = fs::read_to_string(run.join("run.json")).unwrap();
    assert!(meta.contains("\"winners\""));
    // Re-scoring checkpoints with a different feature width is refused.
    let o = jfaa(&["--config", c, "eval", "--epoch", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    ok(jfaa(&["--config", c, "eval", "--epoch", "1", "--d-model", "16"]));
    let sub = dir.path().join("sub.json");
    ok(jfaa(&["--config", c, "submit", "--out", sub.to_str().unwrap()]));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&sub).unwrap()).unwrap();
    assert_eq!(v["results"].as_object().unwrap().len(), 16);
}
