//! Drives the `xmodal` binary as a user would.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn xmodal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmodal"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = xmodal(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(dir: &Path, args: &[&str]) -> Value {
    let mut all = args.to_vec();
    all.push("--json");
    serde_json::from_str(ok(dir, &all).trim()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Captions of a knowledge source keyed by record id.
fn captions(path: &Path) -> HashMap<u64, String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            (v["id"].as_u64().unwrap(), v["caption"].as_str().unwrap().to_string())
        })
        .collect()
}

/// Corpus, short alignment run and a caption index with its retriever config.
fn prepared() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--out", "a", "--n-pairs", "120", "--questions-per-scene", "2"]);
    ok(d, &["gen-data", "--out", "b", "--n-pairs", "60", "--seed", "9", "--template-set", "1"]);
    ok(
        d,
        &[
            "train-align",
            "--data",
            "a",
            "--out",
            "align.ckpt",
            "--iterations",
            "40",
            "--warmup-iters",
            "5",
            "--all-negatives-iters",
            "10",
            "--batch-size",
            "8",
        ],
    );
    ok(
        d,
        &[
            "build-index",
            "--checkpoint",
            "align.ckpt",
            "--ks",
            "a/ks.jsonl",
            "--out",
            "a.xidx",
            "--retriever-config",
            "r.cfg",
            "--k",
            "5",
        ],
    );
    tmp
}

#[test]
fn no_arguments_prints_usage_and_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = xmodal(tmp.path(), &[]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&xmodal(tmp.path(), &["gen-data", "--bogus", "1"])), 1);
    assert_eq!(code(&xmodal(tmp.path(), &["no-such-command"])), 1);
}

#[test]
fn help_exits_0() {
    let tmp = tempfile::tempdir().unwrap();
    let out = xmodal(tmp.path(), &["query", "--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("--image"));
}

#[test]
fn missing_and_malformed_files_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = xmodal(d, &["query", "--retriever", "absent.cfg", "--image", "0"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.cfg"));
    fs::write(d.join("bad.toml"), "this is = = not toml").unwrap();
    assert_eq!(code(&xmodal(d, &["bench-index", "--config", "bad.toml"])), 2);
    fs::write(d.join("bad.ckpt"), b"not a checkpoint").unwrap();
    ok(d, &["gen-data", "--out", "a", "--n-pairs", "20"]);
    let out = xmodal(d, &["eval-retrieval", "--checkpoint", "bad.ckpt", "--data", "a"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn contract_violations_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("typo.toml"), "[bench-index]\nsizez = [10]\n").unwrap();
    let out = xmodal(d, &["bench-index", "--config", "typo.toml"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sizez"));
    let out = xmodal(d, &["bench-index", "--sizes", "500,100"]);
    assert_eq!(code(&out), 1);
    let out = xmodal(d, &["gen-data", "--visual-noise", "1.5"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("x.toml"),
        "[gen-data]\nout = \"from-file\"\n[gen-data.spec]\nn_pairs = 50\nseed = 3\n",
    )
    .unwrap();
    let v = json(d, &["gen-data", "--config", "x.toml"]);
    assert_eq!(v["scenes"], 50);
    assert_eq!(v["seed"], 3);
    assert!(d.join("from-file/ks.jsonl").exists());
    let v = json(d, &["gen-data", "--config", "x.toml", "--n-pairs", "30"]);
    assert_eq!(v["scenes"], 30);
    assert_eq!(v["seed"], 3);
}

#[test]
fn config_without_command_table_applies_at_top_level() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("x.toml"), "out = \"top\"\n[spec]\nn_pairs = 25\n").unwrap();
    let v = json(d, &["gen-data", "--config", "x.toml"]);
    assert_eq!(v["scenes"], 25);
    assert!(d.join("top/gen.json").exists());
}

#[test]
fn reruns_reproduce_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["r1", "r2"] {
        ok(d, &["gen-data", "--out", out, "--n-pairs", "40", "--seed", "4"]);
        ok(
            d,
            &[
                "train-align",
                "--data",
                out,
                "--out",
                &format!("{out}.ckpt"),
                "--iterations",
                "12",
                "--warmup-iters",
                "2",
                "--all-negatives-iters",
                "4",
                "--batch-size",
                "4",
                "--seed",
                "2",
            ],
        );
    }
    for f in ["ks.jsonl", "vqa.jsonl", "images.xfea", "gen.json"] {
        assert_eq!(
            fs::read(d.join("r1").join(f)).unwrap(),
            fs::read(d.join("r2").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(fs::read(d.join("r1.ckpt")).unwrap(), fs::read(d.join("r2.ckpt")).unwrap());
}

#[test]
fn query_swap_and_restore() {
    let tmp = prepared();
    let d = tmp.path();
    let text = ok(d, &["query", "--retriever", "r.cfg", "--image", "3", "--k", "5"]);
    let ranked: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(ranked.len(), 5, "{text}");
    let scores: Vec<f64> = ranked
        .iter()
        .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]), "{scores:?}");

    let ks_a = captions(&d.join("a/ks.jsonl"));
    let ks_b = captions(&d.join("b/ks.jsonl"));
    let before = json(d, &["query", "--retriever", "r.cfg", "--image", "3", "--k", "5"]);
    for c in before["captions"].as_array().unwrap() {
        assert_eq!(ks_a[&c["id"].as_u64().unwrap()], c["caption"].as_str().unwrap());
    }

    ok(d, &["swap-index", "--retriever", "r.cfg", "--mode", "in-domain", "--ks", "b/ks.jsonl"]);
    assert!(d.join("r.cfg.prev").exists());
    assert!(d.join("b/ks.text.xidx").exists());
    let after = json(d, &["query", "--retriever", "r.cfg", "--image", "3", "--k", "5"]);
    let hits = after["captions"].as_array().unwrap();
    assert_eq!(hits.len(), 5);
    for c in hits {
        assert_eq!(ks_b[&c["id"].as_u64().unwrap()], c["caption"].as_str().unwrap());
    }

    ok(d, &["swap-index", "--retriever", "r.cfg", "--mode", "restore"]);
    let restored = json(d, &["query", "--retriever", "r.cfg", "--image", "3", "--k", "5"]);
    assert_eq!(restored, before);
}

#[test]
fn out_of_domain_swap_rejects_a_foreign_index() {
    let tmp = prepared();
    let d = tmp.path();
    // the prebuilt index was encoded by the current model, not the new one
    ok(
        d,
        &[
            "train-align",
            "--data",
            "b",
            "--out",
            "b.ckpt",
            "--iterations",
            "10",
            "--warmup-iters",
            "2",
            "--all-negatives-iters",
            "2",
            "--batch-size",
            "4",
            "--seed",
            "5",
        ],
    );
    let out = xmodal(
        d,
        &[
            "swap-index",
            "--retriever",
            "r.cfg",
            "--mode",
            "out-of-domain",
            "--ks",
            "b/ks.jsonl",
            "--checkpoint",
            "b.ckpt",
            "--index",
            "a.xidx",
        ],
    );
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!d.join("r.cfg.prev").exists());
    ok(
        d,
        &[
            "swap-index",
            "--retriever",
            "r.cfg",
            "--mode",
            "out-of-domain",
            "--ks",
            "b/ks.jsonl",
            "--checkpoint",
            "b.ckpt",
        ],
    );
    let v = json(d, &["query", "--retriever", "r.cfg", "--image", "0", "--k", "2"]);
    assert_eq!(v["captions"].as_array().unwrap().len(), 2);
}

#[test]
fn reader_commands_and_sweep_outputs() {
    let tmp = prepared();
    let d = tmp.path();
    let v = json(
        d,
        &[
            "train-reader",
            "--data",
            "a",
            "--retriever",
            "r.cfg",
            "--k-min",
            "0",
            "--k-max",
            "2",
            "--epochs",
            "1",
            "--out",
            "reader.ckpt",
        ],
    );
    assert_eq!(v["epochs"].as_array().unwrap().len(), 1);
    let v = json(
        d,
        &[
            "eval-reader",
            "--data",
            "a",
            "--reader",
            "reader.ckpt",
            "--retriever",
            "r.cfg",
            "--k",
            "2",
            "--predictions",
            "preds.jsonl",
        ],
    );
    let acc = v["accuracy"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&acc));
    let preds = fs::read_to_string(d.join("preds.jsonl")).unwrap();
    assert_eq!(preds.lines().count() as u64, v["questions"].as_u64().unwrap());
    let v = json(
        d,
        &[
            "sweep",
            "--data",
            "a",
            "--reader",
            "reader.ckpt",
            "--retriever",
            "r.cfg",
            "--k-values",
            "0,1,2",
            "--out",
            "curve",
        ],
    );
    assert_eq!(v["points"].as_array().unwrap().len(), 3);
    assert!(fs::read_to_string(d.join("curve.csv")).unwrap().lines().count() >= 4);
    assert!(fs::read_to_string(d.join("curve.svg")).unwrap().contains("<svg"));
    // retrieval without a retriever is a usage error
    let out = xmodal(d, &["eval-reader", "--data", "a", "--reader", "reader.ckpt", "--k", "2"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn eval_retrieval_and_bench_report() {
    let tmp = prepared();
    let d = tmp.path();
    let v = json(d, &["eval-retrieval", "--checkpoint", "align.ckpt", "--data", "a", "--out", "r.csv"]);
    for dir in ["text_to_image", "image_to_text"] {
        let r = &v[dir];
        let (r1, r5, r10) = (r["r1"].as_f64().unwrap(), r["r5"].as_f64().unwrap(), r["r10"].as_f64().unwrap());
        assert!(r1 <= r5 && r5 <= r10 && r10 <= 100.0, "{v}");
    }
    assert!(fs::read_to_string(d.join("r.csv")).unwrap().starts_with("direction,k,value,fold"));
    let v = json(d, &["bench-index", "--sizes", "200,400", "--queries", "5", "--m", "8"]);
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
}
