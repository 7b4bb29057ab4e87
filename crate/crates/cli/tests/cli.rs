use std::path::Path;
use std::process::{Command, Output};

use safeclick::checkpoint::load_checkpoint;
use safeclick::data::{read_dataset, Prompt};
use safeclick::model::{DecoderVariant, Model, ModelConfig};
use safeclick::train::RobustnessTable;

const TINY: &str = r#"{
  "model": {"image_size": 32, "patch_size": 8, "dim": 8, "encoder_depth": 2, "encoder_heads": 2,
            "mlp_ratio": 2, "expert_heads": 2, "expert_mlp_ratio": 2, "e3_heads": 2},
  "synth": {"size": 32},
  "sweep": {"max_test_samples": 3}
}"#;

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_safeclick")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = bin(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    ok(dir.path(), &["--config", "tiny.json", "--seed", "4", "gen-data", "--count", "16", "--out", "d.scds"]);
    dir
}

#[test]
fn gen_data_is_deterministic() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "tiny.json", "--seed", "4", "gen-data", "--count", "16", "--out", "e.scds"]);
    ok(d, &["--config", "tiny.json", "--seed", "5", "gen-data", "--count", "16", "--out", "f.scds"]);
    let bytes = |n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(bytes("d.scds"), bytes("e.scds"));
    assert_ne!(bytes("d.scds"), bytes("f.scds"));
    let samples = read_dataset(d.join("d.scds")).unwrap();
    assert_eq!((samples.len(), samples[0].size), (16, 32));
}

#[test]
fn zero_epoch_training_writes_the_initialisation() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "tiny.json", "--seed", "2", "train", "--stage", "pretrain", "--dataset", "d.scds", "--out", "p.sfck", "--epochs", "0"]);
    let cfg: ModelConfig = serde_json::from_value(serde_json::from_str::<serde_json::Value>(TINY).unwrap()["model"].clone()).unwrap();
    let init = Model::init(cfg, DecoderVariant::Baseline, 2).unwrap();
    assert!(load_checkpoint(d.join("p.sfck")).unwrap().params.bit_eq(&init.params));
}

#[test]
fn train_then_eval_writes_long_csv_and_jsonl() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "tiny.json", "train", "--stage", "pretrain", "--dataset", "d.scds", "--out", "p.sfck", "--epochs", "1", "--metrics", "pm.jsonl"]);
    ok(d, &[
        "--config", "tiny.json", "--threads", "1", "train", "--init", "p.sfck", "--variant", "ablate_crl",
        "--dataset", "d.scds", "--out", "a.sfck", "--epochs", "1", "--metrics", "m.jsonl",
    ]);
    let metrics = std::fs::read_to_string(d.join("m.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(line["variant"], "ablate_crl");

    ok(d, &["--config", "tiny.json", "eval", "--checkpoints", "base=p.sfck,a.sfck", "--dataset", "d.scds", "--out", "r.csv", "--records", "r.jsonl"]);
    let csv = std::fs::read_to_string(d.join("r.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), RobustnessTable::CSV_HEADER);
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 6);
    assert!(csv.contains("base,point,PP,") && csv.contains("ablate_crl,box,150%,"));
    let records = std::fs::read_to_string(d.join("r.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 2 * 10 * 3);

    let dup = bin(d, &["--config", "tiny.json", "eval", "--checkpoints", "p.sfck,p.sfck", "--dataset", "d.scds", "--out", "x.csv"]);
    assert!(!dup.status.success());
}

#[test]
fn perturb_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["--seed", "3", "perturb", "--prompt", r#"{"type":"point","x":20,"y":20,"label":1}"#, "--level", "0.5", "--radius", "8"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let p: Prompt = serde_json::from_value(v["perturbed"].clone()).unwrap();
    let Prompt::Point { x, y, .. } = p else { panic!("{v}") };
    assert!(((x - 20.0).hypot(y - 20.0) - 4.0).abs() < 1e-9);
    let again = ok(dir.path(), &["--seed", "3", "perturb", "--prompt", r#"{"type":"point","x":20,"y":20,"label":1}"#, "--level", "0.5", "--radius", "8"]);
    assert_eq!(out.stdout, again.stdout);

    let bx = ok(dir.path(), &["perturb", "--prompt", r#"{"type":"box","x0":10,"y0":10,"x1":30,"y1":30}"#, "--level", "0.5"]);
    let v: serde_json::Value = serde_json::from_slice(&bx.stdout).unwrap();
    assert_eq!(serde_json::from_value::<Prompt>(v["perturbed"].clone()).unwrap(), Prompt::boxed(15.0, 15.0, 25.0, 25.0));
}

#[test]
fn usage_and_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(bin(d, &["no-such-command"]).status.code(), Some(2));
    assert_eq!(bin(d, &["train", "--dataset", "x"]).status.code(), Some(2));
    let missing = bin(d, &["train", "--stage", "pretrain", "--dataset", "missing.scds", "--out", "p.sfck"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing.scds"));
    std::fs::write(d.join("bad.json"), r#"{"model": {"widht": 3}}"#).unwrap();
    assert_eq!(bin(d, &["--config", "bad.json", "gen-data", "--out", "x.scds"]).status.code(), Some(1));
    std::fs::write(d.join("junk.scds"), b"NOPE\x01\x00\x00\x00").unwrap();
    let junk = bin(d, &["eval", "--checkpoints", "p.sfck", "--dataset", "junk.scds", "--out", "x.csv"]);
    assert!(String::from_utf8_lossy(&junk.stderr).contains("magic"));
}

#[test]
fn grad_check_subcommand_reports_each_case() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["grad-check", "--seeds", "5"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() > 30, "{text}");
    assert!(!text.contains("FAIL"));
}
