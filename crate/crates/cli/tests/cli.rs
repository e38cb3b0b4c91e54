use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pclfit_core::data::synthetic::{generate, SyntheticSpec};
use pclfit_core::data::{write_subtask1_tsv, write_subtask2_tsv};
use pclfit_core::trainer::RunMetadata;

const TINY: [&str; 14] = [
    "--d-model", "8", "--n-heads", "2", "--n-layers", "3", "--d-ff", "16", "--max-len", "24", "--eta", "1e-3",
    "--eval-every-batches", "5",
];

fn pclfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pclfit"))
        .args(args)
        .env_remove("PCLFIT_DATA_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn corpus(dir: &Path) -> PathBuf {
    let recs = generate(&SyntheticSpec {
        n: 50,
        positive_frac: 0.2,
        ..Default::default()
    })
    .unwrap();
    let p = dir.join("train.tsv");
    write_subtask1_tsv(&p, &recs, false).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn evaluate_identical_files_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.tsv");
    fs::write(&p, "a\t1\nb\t0\nc\t1\n").unwrap();
    let out = ok(pclfit(&["evaluate", "--gold", s(&p), "--pred", s(&p), "--subtask", "1"]));
    assert!(out.contains("f1: 1.000000"), "{out}");

    let m = dir.path().join("m.tsv");
    fs::write(&m, "a\t1,0,0,1,0,0,0\nb\t0,1,0,0,0,0,1\n").unwrap();
    let out = ok(pclfit(&["evaluate", "--gold", s(&m), "--pred", s(&m), "--subtask", "2"]));
    assert!(out.contains("macro_f1:"), "{out}");
}

#[test]
fn ensemble_of_identical_files_is_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.tsv");
    let body = "x\t1\ny\t0\nz\t1\n";
    fs::write(&p, body).unwrap();
    let list = [s(&p); 3].join(",");
    assert_eq!(ok(pclfit(&["ensemble", "--preds", &list])), body);
    let out = dir.path().join("fused.tsv");
    ok(pclfit(&["ensemble", "--preds", &list, "--output", s(&out)]));
    assert_eq!(fs::read_to_string(out).unwrap(), body);
    let two = [s(&p); 2].join(",");
    assert_eq!(pclfit(&["ensemble", "--preds", &two]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_nonzero() {
    assert_eq!(pclfit(&["kfold", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(pclfit(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.tsv");
    let o = pclfit(&["kfold", "--train", s(&missing), "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = pclfit(&["kfold", "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = pclfit(&["evaluate", "--gold", s(&missing), "--pred", s(&missing), "--subtask", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn kfold_reports_every_fold_and_writes_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let train = corpus(dir.path());
    let out = dir.path().join("run");
    let mut args = vec!["kfold", "--subtask", "1", "--lambda", "1.6", "--train", s(&train), "--out-dir", s(&out)];
    args.extend(TINY);
    args.extend(["--epochs", "1"]);
    let text = ok(pclfit(&args));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6, "{text}");
    assert!(lines[5].starts_with("mean\t"));
    for f in 0..5 {
        let meta: RunMetadata =
            serde_json::from_str(&fs::read_to_string(out.join(format!("fold_{f}/metadata.json"))).unwrap()).unwrap();
        assert_eq!(meta.config.lambda, 1.6);
        assert!(!meta.history.is_empty());
        assert!(meta.checkpoint_sha256.is_some());
    }
    assert!(out.join("report.json").exists());
    assert!(out.join("vocab.txt").exists());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let train = corpus(dir.path());
    let out = dir.path().join("run");
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("lambda = 4.6\nseed = 7\nk_folds = 3\ntrain = {}\n", train.display())).unwrap();
    let mut args = vec!["train", "--config", s(&cfg), "--lambda", "2.6", "--out-dir", s(&out), "--fold", "2"];
    args.extend(TINY);
    args.extend(["--epochs", "1"]);
    let text = ok(pclfit(&args));
    assert!(text.starts_with("fold 2: best"), "{text}");
    let meta: RunMetadata = serde_json::from_str(&fs::read_to_string(out.join("metadata.json")).unwrap()).unwrap();
    assert_eq!((meta.config.lambda, meta.config.seed, meta.config.k_folds), (2.6, 7, 3));
    assert_eq!(meta.fold, Some(2));
}

#[test]
fn train_then_predict_from_the_data_directory() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let out = dir.path().join("run");
    let mut args = vec!["train", "--train", "train.tsv", "--out-dir", s(&out)];
    args.extend(TINY);
    args.extend(["--epochs", "1"]);
    let o = Command::new(env!("CARGO_BIN_EXE_pclfit"))
        .args(&args)
        .env("PCLFIT_DATA_DIR", dir.path())
        .output()
        .unwrap();
    ok(o);
    let preds = dir.path().join("preds.tsv");
    let o = Command::new(env!("CARGO_BIN_EXE_pclfit"))
        .args(["predict", "--checkpoint", s(&out.join("best.ckpt")), "--input", "train.tsv", "--output", s(&preds)])
        .env("PCLFIT_DATA_DIR", dir.path())
        .output()
        .unwrap();
    ok(o);
    let text = fs::read_to_string(&preds).unwrap();
    assert_eq!(text.lines().count(), 50);
    assert!(text.lines().all(|l| l.ends_with("\t0") || l.ends_with("\t1")));

    let gold = dir.path().join("gold.tsv");
    fs::write(&gold, &text).unwrap();
    let scored = ok(pclfit(&["evaluate", "--gold", s(&gold), "--pred", s(&preds), "--subtask", "1"]));
    assert!(scored.contains("precision:"));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let train = corpus(dir.path());
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--train", s(&train), "--out-dir", s(out)];
        args.extend(TINY);
        args.extend(["--epochs", "2"]);
        args.extend(extra);
        ok(pclfit(&args));
        serde_json::from_str::<RunMetadata>(&fs::read_to_string(out.join("metadata.json")).unwrap()).unwrap()
    };
    // The output directory is part of the recorded config, so both runs use the same one.
    let out = dir.path().join("run");
    let whole = run(&out, &[]);
    fs::remove_dir_all(&out).unwrap();
    let split = out;
    let first = run(&split, &["--stop-after-epoch", "1"]);
    assert!(first.history.len() < whole.history.len());
    let resumed = run(&split, &["--resume"]);
    assert_eq!(resumed.checkpoint_sha256, whole.checkpoint_sha256);
    assert_eq!(resumed.history, whole.history);
}

#[test]
fn sweep_writes_one_row_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let train = corpus(dir.path());
    let out = dir.path().join("sweep");
    let mut args = vec!["sweep", "--grid", "0.6,3.6", "--k-folds", "2", "--train", s(&train), "--out-dir", s(&out)];
    args.extend(TINY);
    args.extend(["--epochs", "1"]);
    let text = ok(pclfit(&args));
    assert_eq!(text.lines().next(), Some("lambda\tmean\tstd"));
    assert_eq!(text.lines().count(), 3);
    assert_eq!(fs::read_to_string(out.join("sweep.tsv")).unwrap(), text);
}

#[test]
fn category_runs_with_and_without_negatives() {
    let dir = tempfile::tempdir().unwrap();
    let recs = generate(&SyntheticSpec {
        n: 60,
        positive_frac: 0.5,
        ..Default::default()
    })
    .unwrap();
    let cats = dir.path().join("cats.tsv");
    write_subtask2_tsv(&cats, &recs, false).unwrap();
    let binary = corpus(dir.path());
    let base = |out: &Path| {
        let mut a: Vec<String> = ["kfold", "--subtask", "2", "--k-folds", "2", "--train", s(&cats), "--out-dir", s(out)]
            .map(String::from)
            .to_vec();
        a.extend(TINY.map(String::from));
        a.extend(["--epochs", "1"].map(String::from));
        a
    };
    let out = dir.path().join("pos");
    let args = base(&out);
    ok(pclfit(&args.iter().map(String::as_str).collect::<Vec<_>>()));

    let out = dir.path().join("neg");
    let mut args = base(&out);
    args.extend(["--include-negatives", "true", "--wrs", "on"].map(String::from));
    let refused = pclfit(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(refused.status.code(), Some(2));
    args.extend(["--negatives".to_string(), s(&binary).to_string()]);
    ok(pclfit(&args.iter().map(String::as_str).collect::<Vec<_>>()));
    let meta: RunMetadata =
        serde_json::from_str(&fs::read_to_string(out.join("fold_0/metadata.json")).unwrap()).unwrap();
    assert!(meta.config.include_negatives && meta.config.wrs);
}
