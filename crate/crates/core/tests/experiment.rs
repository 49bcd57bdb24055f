//! End-to-end plumbing on a tiny configuration.

use std::path::Path;

use cclx_core::experiment::{
    self, cmd_eval, cmd_gen, cmd_run, files, load_testbed, parse_config, run_dir, Arm, EvalKind, ExperimentConfig,
    RunInfo,
};
use cclx_core::Error;

pub fn tiny_overrides() -> Vec<String> {
    [
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
        "base.steps=3",
        "base.batch_size=8",
        "pretrain.batch_size=4",
        "schedule.stage1_steps=3",
        "schedule.stage2_steps=2",
        "finetune.steps=3",
        "finetune.batch_size=8",
        "eval.alignment_pairs=12",
        "eval.bootstrap_resamples=50",
        "decode.max_new_tokens=6",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn tiny(extra: &[&str]) -> ExperimentConfig {
    let mut o = tiny_overrides();
    o.extend(extra.iter().map(|s| s.to_string()));
    parse_config(None, &o).unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_is_byte_identical_and_counts_match() {
    let cfg = tiny(&[]);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m1 = cmd_gen(&cfg, d1.path()).unwrap();
    let m2 = cmd_gen(&cfg, d2.path()).unwrap();
    assert_eq!(m1, m2);
    for name in files::ALL.iter().chain([&files::MANIFEST]) {
        assert_eq!(read(&d1.path().join("data").join(name)), read(&d2.path().join("data").join(name)), "{name}");
    }
    for (name, n) in &m1.counts {
        if name.ends_with(".jsonl") {
            let text = String::from_utf8(read(&d1.path().join("data").join(name))).unwrap();
            assert_eq!(text.lines().count(), *n, "{name}");
        }
    }
    let (tb, _) = load_testbed(d1.path()).unwrap();
    assert_eq!(tb.facts.len(), 16);
}

#[test]
fn missing_corpus_points_at_gen() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_testbed(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("cclx gen"), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn malformed_config_names_the_key() {
    let err = parse_config(Some(r#"{"corpus": {"n_facts": -3}}"#), &[]).unwrap_err();
    assert!(err.to_string().contains("corpus.n_facts"), "{err}");
    assert_eq!(err.exit_code(), 2);
    let err = parse_config(None, &["model.d_modle=3".into()]).unwrap_err();
    assert!(err.to_string().contains("d_modle"), "{err}");
}

#[test]
fn arms_train_evaluate_and_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny(&[]);
    let manifest = cmd_gen(&cfg, root).unwrap();
    let mut dirs = Vec::new();
    for arm in Arm::ALL {
        let d = cmd_run(&cfg, root, arm).unwrap();
        assert_eq!(d, run_dir(root, arm));
        for f in ["config.json", "metrics.csv", "run.json", "finetune_end.json", "finetune_end.bin", "pretrain_end.json"] {
            assert!(d.join(f).exists(), "{arm}: {f}");
        }
        let info: RunInfo = serde_json::from_slice(&read(&d.join("run.json"))).unwrap();
        assert_eq!(info.corpus_hash, manifest.corpus_hash);
        assert_eq!(info.notices.is_empty(), !matches!(arm, Arm::Sft | Arm::Xcot), "{arm}");
        let snapshot: ExperimentConfig = serde_json::from_slice(&read(&d.join("config.json"))).unwrap();
        assert_eq!(snapshot, cfg);
        dirs.push(d);
    }
    assert!(dirs[3].join("pretrain_stage1.json").exists());
    assert!(!dirs[2].join("pretrain_stage1.json").exists());

    let first = read(&dirs[3].join("metrics.csv"));
    cmd_run(&cfg, root, Arm::CclXcot).unwrap();
    assert_eq!(read(&dirs[3].join("metrics.csv")), first);

    let written = cmd_eval(&cfg, root, &dirs[2..], EvalKind::Align, true).unwrap();
    let aligns: Vec<_> = written.iter().filter(|p| p.to_string_lossy().contains("alignment_pretrain")).collect();
    assert_eq!(aligns.len(), 3, "{written:?}");
    let a = cclx_core::eval::read_alignment_csv(aligns[0]).unwrap();
    let b = cclx_core::eval::read_alignment_csv(aligns[2]).unwrap();
    assert_eq!(
        a.layers.iter().map(|l| l.layer).collect::<Vec<_>>(),
        b.layers.iter().map(|l| l.layer).collect::<Vec<_>>()
    );

    cmd_eval(&cfg, root, &dirs, EvalKind::Qa, true).unwrap();
    let rows = cclx_core::eval::read_rates_csv(&root.join("reports/rates.csv")).unwrap();
    assert_eq!(rows.len(), 8);
    for lang in ["a", "b"] {
        assert_eq!(rows.iter().filter(|r| r.language.to_string() == lang).count(), 4);
    }
    let mut parallel = cfg.clone();
    parallel.eval.jobs = 2;
    let before = read(&root.join("reports/rates.csv"));
    cmd_eval(&parallel, root, &dirs, EvalKind::Qa, false).unwrap();
    assert_eq!(read(&root.join("reports/rates.csv")), before);

    cmd_eval(&cfg, root, &dirs[..1], EvalKind::Consistency, false).unwrap();
    assert!(dirs[0].join("consistency.csv").exists());
    std::fs::remove_file(dirs[0].join(experiment::ANSWERS_A)).unwrap();
    let err = cmd_eval(&cfg, root, &dirs[..1], EvalKind::Consistency, false).unwrap_err();
    assert!(matches!(err, Error::Input(_)), "{err}");

    std::fs::remove_file(dirs[1].join("finetune_end.json")).unwrap();
    let err = cmd_eval(&cfg, root, &dirs[1..2], EvalKind::Qa, false).unwrap_err();
    assert!(err.to_string().contains("finetune_end.json"), "{err}");
}

#[test]
fn ablation_rows_are_complete_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&[]);
    cmd_gen(&cfg, dir.path()).unwrap();
    let written = cmd_eval(&cfg, dir.path(), &[], EvalKind::Ablate, false).unwrap();
    let rows = cclx_core::eval::read_rates_csv(&written[0]).unwrap();
    let arms: Vec<_> = rows.iter().map(|r| r.arm.as_str()).collect();
    assert_eq!(arms, ["low", "mid", "high", "all"]);
    let (tb, m) = load_testbed(dir.path()).unwrap();
    let base = experiment::cached_base(&cfg, &tb, &m, dir.path()).unwrap();
    use cclx_core::model::Segment;
    let dup = experiment::ablate_layers(&cfg, &tb, &base, &[vec![Segment::Mid], vec![Segment::Mid]]).unwrap();
    assert_eq!(dup[0].rate, dup[1].rate);
    assert_eq!(dup[0].rate, rows[1].rate);
}
