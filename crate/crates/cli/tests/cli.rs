use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn desk() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/desk.json")
}

fn pharmakit(args: &[&str], out: &Path, overrides: &[String]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pharmakit"));
    c.args(args).arg("--config").arg(desk()).arg("--out-dir").arg(out);
    for o in overrides {
        c.arg("--override").arg(o);
    }
    c.output().unwrap()
}

fn ok(o: &Output) -> Value {
    assert!(o.status.success(), "exit {}: {}", o.status, String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn error_record(o: &Output) -> Value {
    assert!(!o.status.success());
    let line = String::from_utf8_lossy(&o.stderr).lines().last().unwrap().to_string();
    serde_json::from_str::<Value>(&line).unwrap()["error"].clone()
}

fn artifact(summary: &Value, rel: &str) -> String {
    let dir = PathBuf::from(summary["run_dir"].as_str().unwrap());
    assert!(summary["outputs"].get(rel).is_some(), "{rel} not in manifest outputs");
    dir.join(rel).to_string_lossy().into_owned()
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pharmakit(&["datapipe"], tmp.path(), &["pretrain.bogus_knob=3".into()]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_record(&o);
    assert_eq!(e["kind"], "config");
    assert!(e["message"].as_str().unwrap().contains("bogus_knob"), "{e}");
    // nothing ran, so no run directory
    assert_eq!(std::fs::read_dir(tmp.path()).map(|d| d.count()).unwrap_or(0), 0);
}

#[test]
fn standalone_stages_compose_and_merge_to_450() {
    let tmp = tempfile::tempdir().unwrap();
    let dp = ok(&pharmakit(&["datapipe"], tmp.path(), &[]));
    assert_eq!(dp["summary"]["datapipe"]["exact_duplicates"], 8);
    let clean = format!("paths.clean_corpus={}", artifact(&dp, "datapipe/clean_corpus.jsonl"));
    let tt = ok(&pharmakit(&["tok-train"], tmp.path(), &[clean]));
    let pair = [
        format!("paths.base_tokenizer={}", artifact(&tt, "tokenizer/base.json")),
        format!("paths.domain_tokenizer={}", artifact(&tt, "tokenizer/domain.json")),
    ];
    let a = ok(&pharmakit(&["tok-merge"], tmp.path(), &pair));
    let b = ok(&pharmakit(&["tok-merge"], tmp.path(), &pair));
    assert_eq!(a["summary"]["tok-merge"]["base_vocab"], 300);
    assert_eq!(a["summary"]["tok-merge"]["merged_vocab"], 450);
    let tok = pharmakit::tokenizer::TokenizerModel::load(Path::new(&artifact(&a, "tokenizer/merged.json"))).unwrap();
    assert_eq!(tok.vocab_size(), 450);
    assert_ne!(a["run_dir"], b["run_dir"]);
    assert_eq!(a["outputs"], b["outputs"]);

    let dir = PathBuf::from(a["run_dir"].as_str().unwrap());
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["seed"], 7);
    for k in ["base_tokenizer", "domain_tokenizer", "domain_text"] {
        assert_eq!(manifest["inputs"][k]["sha256"].as_str().unwrap().len(), 64, "{k}");
    }
    assert!(manifest["code_version"].as_str().unwrap().starts_with("pharmakit-cli"));
}

#[test]
fn missing_inputs_fail_before_any_stage_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pharmakit(&["pretrain"], tmp.path(), &["paths.clean_corpus=/nonexistent/clean.jsonl".into()]);
    assert_eq!(o.status.code(), Some(3));
    let e = error_record(&o);
    assert_eq!(e["kind"], "missing_input");
    let msg = e["message"].as_str().unwrap();
    assert!(msg.contains("paths.tokenizer is not set") && msg.contains("/nonexistent/clean.jsonl"), "{msg}");
    assert_eq!(std::fs::read_dir(tmp.path()).map(|d| d.count()).unwrap_or(0), 0);
}

#[test]
fn hyperparameter_table_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pharmakit(&["datapipe"], tmp.path(), &["sft.hyper.global_batch=64".into()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_record(&o)["message"].as_str().unwrap().contains("global_batch"));

    let o = pharmakit(&["datapipe"], tmp.path(), &["pretrain.hyper.tensor_parallel=8".into()]);
    let s = ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("tensor_parallel=8 ignored"));
    let dir = PathBuf::from(s["run_dir"].as_str().unwrap());
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["warnings"][0].as_str().unwrap().contains("tensor_parallel"));
}

#[test]
fn seed_flag_changes_the_config_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = Command::new(env!("CARGO_BIN_EXE_pharmakit"));
    c.args(["datapipe", "--seed", "8", "--out-dir"]).arg(tmp.path()).arg("--config").arg(desk());
    let a = ok(&c.output().unwrap());
    let b = ok(&pharmakit(&["datapipe"], tmp.path(), &[]));
    assert_eq!(a["seed"], 8);
    assert_ne!(a["config_hash"], b["config_hash"]);
}

#[test]
fn training_abort_keeps_last_good_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dp = ok(&pharmakit(&["datapipe"], tmp.path(), &[]));
    let clean = format!("paths.clean_corpus={}", artifact(&dp, "datapipe/clean_corpus.jsonl"));
    let tt = ok(&pharmakit(&["tok-train"], tmp.path(), &[clean.clone()]));
    let tm = ok(&pharmakit(
        &["tok-merge"],
        tmp.path(),
        &[
            format!("paths.base_tokenizer={}", artifact(&tt, "tokenizer/base.json")),
            format!("paths.domain_tokenizer={}", artifact(&tt, "tokenizer/domain.json")),
        ],
    ));
    let o = pharmakit(
        &["pretrain"],
        tmp.path(),
        &[
            clean,
            format!("paths.tokenizer={}", artifact(&tm, "tokenizer/merged.json")),
            "pretrain.hyper.min_lr=1e300".into(),
            "pretrain.hyper.max_lr=1e300".into(),
            "pretrain.hyper.grad_clip=0".into(),
            "pretrain.stage1.token_budget=5120".into(),
            "pretrain.stage2.token_budget=0".into(),
        ],
    );
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let e = error_record(&o);
    assert_eq!(e["kind"], "aborted");
    let run = std::fs::read_dir(tmp.path())
        .unwrap()
        .map(|d| d.unwrap().path())
        .find(|p| p.join("pretrain/aborted.ckpt").exists())
        .expect("aborted checkpoint kept");
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "aborted");
    assert!(manifest["outputs"].get("pretrain/aborted.ckpt").is_some());
    let ck = pharmakit::model::Checkpoint::load(&run.join("pretrain/aborted.ckpt")).unwrap();
    assert!(ck.params.iter().all(|(_, p)| p.data.iter().all(|x| x.is_finite())));
}
