// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tunelens(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tunelens"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = tunelens(args, dir);
    assert!(
        out.status.success(),
        "tunelens {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn planted(dir: &Path) {
    ok(&["make-fixture", "--planted", "--seed", "3", "--out", "planted"], dir);
}

fn attn_diff_args<'a>(workers: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "--workers",
        workers,
        "attn-diff",
        "--bundle-a",
        "planted/pretrained",
        "--bundle-b",
        "planted/tuned",
        "--glove",
        "planted/glove.txt",
        "--instruction-verbs",
        "planted/instruction_verbs.txt",
        "--general-verbs",
        "planted/general_verbs.txt",
        "-K",
        "4",
        "--out",
        out,
    ]
}

#[test]
fn attn_diff_is_byte_identical_across_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    planted(d);
    ok(&attn_diff_args("1", "w1.json"), d);
    ok(&attn_diff_args("4", "w4.json"), d);
    let (a, b) = (std::fs::read(d.join("w1.json")).unwrap(), std::fs::read(d.join("w4.json")).unwrap());
    assert_eq!(a, b);

    let report = read_json(&d.join("w1.json"));
    let detail = report["sections"]["verb_heads_detail"]["rows"].as_array().unwrap();
    let write = detail.iter().find(|r| r["label"] == "write@9-16").unwrap();
    assert_eq!(write["value"], 100.0);
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    planted(d);
    std::fs::write(d.join("cfg.json"), r#"{"neuron_k": 2, "top_n": 7}"#).unwrap();

    let mut args = vec!["--config", "cfg.json"];
    args.extend(attn_diff_args("2", "flag.json"));
    ok(&args, d);
    let hp = &read_json(&d.join("flag.json"))["sections"]["attention_intersection"]["hyperparameters"];
    assert_eq!(hp["k"], 4);
    assert_eq!(hp["top_n"], 7);

    let mut args = vec!["--config", "cfg.json"];
    args.extend(attn_diff_args("2", "cfg_only.json").into_iter().filter(|a| *a != "-K" && *a != "4"));
    ok(&args, d);
    let hp = &read_json(&d.join("cfg_only.json"))["sections"]["attention_intersection"]["hyperparameters"];
    assert_eq!(hp["k"], 2);

    std::fs::write(d.join("bad.json"), r#"{"no_such_key": 1}"#).unwrap();
    let mut args = vec!["--config", "bad.json"];
    args.extend(attn_diff_args("1", "x.json"));
    assert!(!tunelens(&args, d).status.success());
}

#[test]
fn attribute_then_render() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["make-fixture", "--seed", "5", "--out", "toy"], d);
    ok(
        &[
            "attribute", "--bundle", "toy", "--prompt", "the cat", "--response", "is on it", "--tsv", "map.tsv",
            "--out", "map.json",
        ],
        d,
    );
    let map = read_json(&d.join("map.json"));
    let rows = map["normalized"]["rows"].as_u64().unwrap() as usize;
    assert_eq!(std::fs::read_to_string(d.join("map.tsv")).unwrap().lines().count(), rows);

    ok(&["render", "--map", "map.json", "--out", "map.svg"], d);
    ok(&["render", "--map", "map.json", "--out", "map.ppm", "-b", "3"], d);
    let svg = std::fs::read_to_string(d.join("map.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    let ppm = std::fs::read(d.join("map.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n"));

    ok(&["render", "--map", "map.json", "--out", "again.svg"], d);
    assert_eq!(std::fs::read(d.join("again.svg")).unwrap(), svg.as_bytes());
}

#[test]
fn annotate_replay_then_ffn_diff() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["make-fixture", "--seed", "1", "--out", "a"], d);
    ok(&["make-fixture", "--seed", "2", "--out", "b"], d);
    ok(&["ffn-concepts", "--bundle", "a", "-R", "3", "-k", "4", "--curves", "curves.csv", "--out", "c.json"], d);
    let concepts = read_json(&d.join("c.json"));
    assert_eq!(concepts.as_array().unwrap().len(), 2);
    assert_eq!(concepts[0]["components"].as_array().unwrap().len(), 3);

    std::fs::write(d.join("replay.json"), r#"{"responses": {}, "fallback": "Writing"}"#).unwrap();
    for name in ["a", "b"] {
        let out = format!("ann_{name}.json");
        let audit = format!("audit_{name}.jsonl");
        ok(
            &[
                "annotate", "--bundle", name, "-R", "2", "-k", "3", "--replay", "replay.json", "--audit", &audit,
                "--out", &out,
            ],
            d,
        );
    }
    // 2 layers x 2 components x (5 summaries + 5 x 2 classifications)
    let audit = std::fs::read_to_string(d.join("audit_a.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), 2 * 2 * 15);

    let run = |workers: &str, out: &str| {
        ok(
            &[
                "--workers", workers, "ffn-diff", "--bundle-a", "a", "--bundle-b", "b", "--annotations-a",
                "ann_a.json", "--annotations-b", "ann_b.json", "-R", "2", "--out", out, "--tsv", "r.tsv",
            ],
            d,
        )
    };
    run("1", "f1.json");
    run("4", "f4.json");
    assert_eq!(std::fs::read(d.join("f1.json")).unwrap(), std::fs::read(d.join("f4.json")).unwrap());
    let report = read_json(&d.join("f1.json"));
    for row in report["sections"]["concept_distribution"]["rows"].as_array().unwrap() {
        if !row["p_value"].is_null() {
            assert_eq!(row["p_value"], 1.0);
        }
    }
}

#[test]
fn density_report_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["make-fixture", "--seed", "1", "--out", "a"], d);
    ok(&["make-fixture", "--seed", "2", "--out", "b"], d);
    let mut lines = String::new();
    for (i, p) in ["the cat is in it", "to the end of it", "it is you and the"].iter().enumerate() {
        let inst = serde_json::json!({
            "prompt": p,
            "response": "you are on it and it is that",
            "instruction_spans": [[0, 3]],
            "followed": i % 2 == 0,
            "dataset": if i < 2 { "x" } else { "y" },
        });
        lines.push_str(&(inst.to_string() + "\n"));
    }
    std::fs::write(d.join("inst.jsonl"), lines).unwrap();
    ok(
        &[
            "density-report", "--bundle-a", "a", "--bundle-b", "b", "--instances", "inst.jsonl", "-b", "0",
            "--out", "d.json",
        ],
        d,
    );
    let report = read_json(&d.join("d.json"));
    assert_eq!(report["metadata"]["schema_version"], 1);
    assert!(report["sections"]["density_by_dataset"]["rows"].as_array().unwrap().len() >= 2);
}

#[test]
fn missing_bundle_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tunelens(&["ffn-concepts", "--bundle", "nope"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}
