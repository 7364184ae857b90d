use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn hggan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hggan"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn small_config(dir: &Path, extra: Value) -> String {
    let mut cfg = json!({
        "synth": { "n": 8, "d": 40, "subjects_per_group": 6 },
        "dhc": { "k": 3 },
        "train": { "epochs": 3, "walks_per_start": 16 },
        "evaluate": { "seeds": 2, "classifier": { "epochs": 20 } }
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d, json!({}));
    let common = ["--config", cfg.as_str(), "--seed", "3", "--out-dir", "out"];
    let with = |extra: &[&'static str]| [&common[..], extra].concat();

    ok(&hggan(d, &with(&["synth"])));
    let manifest = "out/data/manifest.json";
    assert!(d.join(manifest).exists());
    ok(&hggan(d, &with(&["--manifest", manifest, "construct"])));
    assert_eq!(fs::read_dir(d.join("out/hypergraphs")).unwrap().count(), 12);
    ok(&hggan(d, &with(&["--manifest", manifest, "consensus", "--hypergraphs", "out/hypergraphs"])));
    assert!(d.join("out/consensus.hg").exists());
    let sidecar: Value = serde_json::from_str(&fs::read_to_string(d.join("out/consensus.json")).unwrap()).unwrap();
    assert!(sidecar["score"].as_f64().unwrap() > 0.0);

    ok(&hggan(d, &with(&["--manifest", manifest, "train", "--consensus", "out/consensus.hg"])));
    assert!(d.join("out/checkpoint/checkpoint.json").exists());
    let history = fs::read_to_string(d.join("out/checkpoint/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);

    ok(&hggan(d, &with(&["--manifest", manifest, "generate"])));
    assert!(d.join("out/generated/a000_mc.csv").exists());

    for kind in ["sc", "fc", "mc"] {
        ok(&hggan(d, &with(&["--manifest", manifest, "evaluate", "--kind", kind, "--format", "json"])));
        let report: Value =
            serde_json::from_str(&fs::read_to_string(d.join(format!("out/evaluation_{kind}.json"))).unwrap()).unwrap();
        assert!(report.to_string().contains("acc"));
    }
    ok(&hggan(d, &with(&["--manifest", manifest, "evaluate", "--kind", "fc", "--format", "svg"])));
    roxmltree::Document::parse(&fs::read_to_string(d.join("out/evaluation_fc.svg")).unwrap()).unwrap();

    ok(&hggan(d, &with(&["--manifest", manifest, "rank", "--k", "3", "--format", "csv"])));
    assert!(d.join("out/ranking.csv").exists());
    ok(&hggan(d, &with(&["--manifest", manifest, "plot", "--k", "3"])));
    let svg = fs::read_to_string(d.join("out/connectivity.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let top = doc
        .descendants()
        .filter(|n| n.has_tag_name("circle") && n.attribute("class") == Some("top"))
        .count();
    assert_eq!(top, 3);
}

#[test]
fn runs_are_reproducible_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d, json!({}));
    for out in ["x", "y"] {
        ok(&hggan(d, &["--config", &cfg, "--seed", "7", "--out-dir", out, "synth"]));
    }
    let a = fs::read(d.join("x/data/a000_bold.bin")).unwrap();
    let b = fs::read(d.join("y/data/a000_bold.bin")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // no manifest given
    assert_eq!(code(&hggan(d, &["construct"])), 2);
    // missing manifest file
    assert_eq!(code(&hggan(d, &["--manifest", "nope.json", "construct"])), 2);
    // unknown configuration key
    fs::write(d.join("bad.json"), r#"{"trian": {}}"#).unwrap();
    assert_eq!(code(&hggan(d, &["--config", "bad.json", "synth"])), 2);
    // start node outside the matrix
    fs::write(d.join("c.csv"), "3 3 FC\n0,1,1\n1,0,1\n1,1,0\n").unwrap();
    let out = hggan(d, &["walk-check", "--matrix", "c.csv", "--start", "5"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    // k larger than the node count
    let cfg = small_config(d, json!({}));
    ok(&hggan(d, &["--config", &cfg, "--out-dir", "out", "synth"]));
    ok(&hggan(d, &["--config", &cfg, "--out-dir", "out", "--manifest", "out/data/manifest.json", "train"]));
    let out = hggan(
        d,
        &["--config", &cfg, "--out-dir", "out", "--manifest", "out/data/manifest.json", "rank", "--k", "20"],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn walk_check_prints_json_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.csv"), "3 3 FC\n0,1,1\n1,0,1\n1,1,0\n").unwrap();
    let out = hggan(d, &["walk-check", "--matrix", "c.csv", "--samples", "50000", "--seed", "1"]);
    ok(&out);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let exact: Vec<f64> = v["exact_distribution"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((exact[0] - 1.0 / 7.0).abs() < 1e-12);
    assert!(v["tv_distance"].as_f64().unwrap() < 0.02);
    assert_eq!(v["samples"], 50000);
}
