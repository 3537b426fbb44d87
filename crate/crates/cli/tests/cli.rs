use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn invlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_invlab"))
        .args(args)
        .env_remove("INVLAB_OUT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = invlab(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (PathBuf::from(p.file_name().unwrap()), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_twice_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen", "--seed", "4", "--samples", "50", "--out-dir", s(&a)]);
    ok(&["gen", "--seed", "4", "--samples", "50", "--out-dir", s(&b)]);
    let fa = files(&a);
    assert!(fa.iter().any(|(p, _)| p == Path::new("x.csv")));
    assert!(fa.iter().any(|(p, _)| p == Path::new("augmentations.json")));
    assert_eq!(fa, files(&b));
    ok(&["gen", "--seed", "5", "--samples", "50", "--out-dir", s(&b)]);
    assert_ne!(fa, files(&b));
}

#[test]
fn manifest_records_seed_version_and_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("g");
    ok(&["gen", "--seed", "11", "--samples", "20", "--out-dir", s(&dir)]);
    let m = manifest(&dir);
    assert_eq!(m["tool"], "invlab");
    assert_eq!(m["seed"], 11);
    assert_eq!(m["job"]["command"], "gen");
    assert_eq!(m["job"]["config"]["samples"], 20);
    for a in m["artifacts"].as_array().unwrap() {
        assert!(dir.join(a.as_str().unwrap()).exists(), "{a}");
    }
    let augs: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("augmentations.json")).unwrap()).unwrap();
    assert_eq!(augs["seed"], 11);
    let first = &augs["augmentations"][0];
    for key in ["fixed", "block_start", "block_size", "B"] {
        assert!(!first[key].is_null(), "{key}");
    }
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 2, "samples": 30, "train": {"epochs": 9, "lr": 0.01}}"#).unwrap();
    let dir = tmp.path().join("g");
    ok(&["gen", "--config", s(&cfg), "--samples", "40", "--out-dir", s(&dir)]);
    let c = &manifest(&dir)["job"]["config"];
    assert_eq!(c["samples"], 40);
    assert_eq!(c["seed"], 2);
    assert_eq!(c["train"]["epochs"], 9);
    assert_eq!(c["train"]["lr"], 0.01);
    assert_eq!(c["n"], 6);
}

#[test]
fn default_output_root_comes_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_invlab"))
        .args(["dft-demo", "--n", "3"])
        .env("INVLAB_OUT", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("dft-n3").join("manifest.json").exists());
}

#[test]
fn dft_demo_shows_i_for_v1_under_one_shift() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&["dft-demo", "--n", "4", "--out-dir", s(&tmp.path().join("d"))]);
    let row: Vec<&str> = text.lines().find(|l| l.starts_with("v1")).unwrap().split_whitespace().collect();
    assert_eq!(row, vec!["v1", "1", "i", "-1", "-i"]);
    assert!(text.contains("fixed by τ^2: [\"v0\", \"v2\"]"));
}

#[test]
fn spectrum_of_the_four_class_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("s");
    ok(&["spectrum", "--n", "6", "--sets", "0,1,2;0,1,2,3;0,3", "--out-dir", s(&dir)]);
    let csv = std::fs::read_to_string(dir.join("spectrum.csv")).unwrap();
    assert_eq!(csv, "class,T0,T1,T2\n0,1,1,1\n1 2,1,1,0\n3,0,1,1\n4 5,0,0,0\n");
}

#[test]
fn oracle_reports_planted_optimum() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("o");
    let text = ok(&["oracle", "--n", "3", "--supports", "0,1;2", "--random-bases", "100", "--out-dir", s(&dir)]);
    assert!(text.contains("claims hold: yes"));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("oracle.json")).unwrap()).unwrap();
    assert_eq!(r["planted_value"], 3);
    assert_eq!(r["exhaustive"]["best_value"], 3);
    assert_eq!(std::fs::read_to_string(dir.join("random_bases.csv")).unwrap().lines().count(), 101);
}

#[test]
fn train_eval_and_replay_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    ok(&["gen", "--seed", "6", "--samples", "300", "--out-dir", s(&p("gen"))]);
    ok(&["train", "--data", s(&p("gen")), "--epochs", "8", "--out-dir", s(&p("train"))]);
    let text = ok(&["eval", "--run", s(&p("train")), "--out-dir", s(&p("eval"))]);
    assert!(text.contains("diag"));
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(p("eval").join("metrics.json")).unwrap()).unwrap();
    for key in ["diag_mean", "diag_std", "support_f1", "complementarity", "l0_value", "cross_id_score"] {
        assert!(metrics.get(key).is_some(), "{key}");
    }
    assert!(p("eval").join("heatmap_0.pgm").exists());
    for name in ["train", "eval"] {
        let again = p(&format!("{name}-again"));
        ok(&["replay", s(&p(name)), "--out-dir", s(&again)]);
        let csv = |d: &Path| files(d).into_iter().filter(|(f, _)| f.extension().is_some_and(|e| e == "csv")).collect::<Vec<_>>();
        let original = csv(&p(name));
        assert!(!original.is_empty());
        assert_eq!(original, csv(&again), "{name}");
    }
}

#[test]
fn eval_with_second_run_reports_cross_score() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    ok(&["gen", "--seed", "6", "--samples", "200", "--out-dir", s(&p("gen"))]);
    ok(&["train", "--data", s(&p("gen")), "--epochs", "3", "--init-seed", "1", "--out-dir", s(&p("a"))]);
    ok(&["train", "--data", s(&p("gen")), "--epochs", "3", "--init-seed", "2", "--out-dir", s(&p("b"))]);
    ok(&["eval", "--run", s(&p("a")), "--compare", s(&p("b")), "--out-dir", s(&p("e"))]);
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(p("e").join("metrics.json")).unwrap()).unwrap();
    let score = metrics["cross_id_score"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&score));
    assert!(p("e").join("cross_map.csv").exists());
}

#[test]
fn resumed_training_matches_a_straight_run() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    ok(&["gen", "--seed", "8", "--samples", "200", "--out-dir", s(&p("gen"))]);
    ok(&["train", "--data", s(&p("gen")), "--epochs", "10", "--out-dir", s(&p("straight"))]);
    ok(&["train", "--data", s(&p("gen")), "--epochs", "4", "--out-dir", s(&p("split"))]);
    let text = ok(&["train", "--data", s(&p("gen")), "--epochs", "10", "--resume", "--out-dir", s(&p("split"))]);
    assert!(text.contains("resuming at epoch 4"));
    for f in ["loss_curve.csv", "enc_0_w.csv", "dec_0_w.csv", "adam_0.csv"] {
        assert_eq!(std::fs::read(p("straight").join(f)).unwrap(), std::fs::read(p("split").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bad_input_exits_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = invlab(&["gen", "--no-such-flag"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--no-such-flag"));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    let out = invlab(&["gen", "--config", s(&bad), "--out-dir", s(&tmp.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("malformed config"));

    let out = invlab(&["train", "--data", s(&tmp.path().join("missing"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    let out = invlab(&["gen", "--n", "12", "--m", "6", "--out-dir", s(&tmp.path().join("y"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n < m"));

    let out = invlab(&["replay", s(&tmp.path().join("nowhere"))]);
    assert!(!out.status.success());

    let out = invlab(&["frobnicate"]);
    assert!(!out.status.success());
}

#[test]
fn divergent_training_fails_but_keeps_its_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("t");
    let out = invlab(&["train", "--seed", "1", "--samples", "200", "--epochs", "50", "--lr", "1e5", "--out-dir", s(&dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("training failed"));
    assert!(dir.join("report.json").exists());
}
