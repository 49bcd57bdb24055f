use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "language.subjects=8",
    "language.relations=3",
    "language.objects=8",
    "corpus.n_facts=16",
    "corpus.sentence_pairs=40",
    "corpus.bitext_pairs=6",
    "corpus.paragraph_pairs=12",
    "corpus.alignment_pairs=12",
    "corpus.monolingual_per_lang=24",
    "corpus.heldout_per_lang=6",
    "model.n_layers=3",
    "model.n_heads=2",
    "model.d_model=8",
    "model.d_ff=16",
    "base.steps=2",
    "base.batch_size=8",
    "pretrain.batch_size=4",
    "schedule.stage1_steps=2",
    "schedule.stage2_steps=1",
    "finetune.steps=2",
    "finetune.batch_size=8",
    "eval.alignment_pairs=12",
    "eval.bootstrap_resamples=20",
    "decode.max_new_tokens=4",
];

fn cclx(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cclx"));
    cmd.args(args).arg("--out").arg(out).env("RUST_LOG", "warn");
    for s in TINY {
        cmd.arg("--set").arg(s);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn config_prints_resolved_document() {
    let o = Command::new(env!("CARGO_BIN_EXE_cclx")).args(["config", "--set", "seed=9"]).output().unwrap();
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seed"], 9);
    assert_eq!(v["corpus"]["n_facts"], 400);
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schedule": {"stage1_steps": "x"}}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cclx")).args(["gen", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("schedule.stage1_steps"));

    let o = cclx(dir.path(), &["run", "ccl-xcot"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("cclx gen"));
}

#[test]
fn gen_run_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(code(&cclx(root, &["gen"])), 0);
    assert!(root.join("data/manifest.json").exists());
    for arm in ["sft", "ccl-xcot"] {
        let o = cclx(root, &["run", arm]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = cclx(root, &["eval", "--kind", "qa", "--emit-plot-data"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rates = std::fs::read_to_string(root.join("reports/rates.csv")).unwrap();
    assert_eq!(rates.lines().count(), 1 + 4);
    assert!(root.join("reports/rates_tidy.csv").exists());
    let o = cclx(root, &["eval", "--kind", "consistency"]);
    assert_eq!(code(&o), 0);
    let o = cclx(root, &["eval", "--kind", "align", "--jobs", "2"]);
    assert_eq!(code(&o), 0);
    assert!(root.join("runs/ccl-xcot/alignment_pretrain_stage1.csv").exists());
}
