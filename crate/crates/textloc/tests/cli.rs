mod common;

use std::path::Path;
use std::process::Command;

use textloc::commands::{self, AblationOptions, EvalCommand, GenOptions, InferOptions, Template};
use textloc::core::TaskKind;
use textloc::model::checkpoint;
use textloc::train::{ModelShape, StagePlan, TrainConfig};
use textloc::ServiceTask;

const BIN: &str = env!("CARGO_BIN_EXE_textloc");

fn textloc(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn hash_line(out: &std::process::Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout);
    stdout.lines().find_map(|l| l.strip_prefix("hash ")).unwrap_or_else(|| panic!("no hash in {stdout}")).to_string()
}

#[test]
fn gen_twice_gives_identical_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = textloc(&["gen", "--n", "200", "--seed", "7", "--out", a.to_str().unwrap()]);
    let rb = textloc(&["gen", "--n", "200", "--seed", "7", "--out", b.to_str().unwrap()]);
    assert!(ra.status.success(), "{}", String::from_utf8_lossy(&ra.stderr));
    assert!(rb.status.success());
    assert_eq!(hash_line(&ra), hash_line(&rb));
    // A non-empty target is refused and left untouched.
    let again = textloc(&["gen", "--n", "5", "--seed", "1", "--out", a.to_str().unwrap()]);
    assert!(!again.status.success());
    assert!(!again.stderr.is_empty());
    assert!(a.join("corpus.json").exists());
}

#[test]
fn every_subcommand_documents_its_flags() {
    for sub in ["gen", "train", "eval", "ablate-encodings", "ablate-grid", "infer", "probe-embeddings", "serve"] {
        let out = textloc(&[sub, "--help"]);
        assert!(out.status.success(), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("--"), "{sub}");
    }
}

#[test]
fn bad_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = \"x\"").unwrap();
    let out = textloc(&[
        "train", "--config", cfg.to_str().unwrap(), "--corpus", dir.path().to_str().unwrap(), "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    assert!(!dir.path().join("run").exists());
}

fn small_corpus(dir: &Path, n: usize) -> std::path::PathBuf {
    let out = dir.join("corpus");
    commands::gen(&GenOptions { out: out.clone(), config: None, n: Some(n), seed: Some(4), template: Template::Mixed, width: 160, height: 64 })
        .unwrap();
    out
}

#[test]
fn eval_of_ground_truth_answers_has_zero_cer() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 40);
    let cmd = EvalCommand {
        checkpoint: None,
        corpus,
        split: "test".into(),
        limit: None,
        tasks: Vec::new(),
        out: dir.path().join("metrics.json"),
        dump: Some(dir.path().join("dump.jsonl")),
    };
    let report = commands::eval(&cmd).unwrap();
    for t in [TaskKind::OcrOnly, TaskKind::OcrLayout, TaskKind::ReadAt] {
        assert_eq!(report.get(t).unwrap().cer, Some(0.0), "{t}");
    }
    let written: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cmd.out).unwrap()).unwrap();
    assert_eq!(written["tasks"]["ocr"]["metrics"]["cer"], 0.0);
    let dump = std::fs::read_to_string(cmd.dump.as_ref().unwrap()).unwrap();
    for line in dump.lines() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(row["label"], row["prediction"]);
    }
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut config = TrainConfig::new(1, StagePlan::progressive([2, 2, 2, 2], 2, 1e-3));
    config.model = ModelShape { d_model: 16, heads: 2, layers: 1, ffn: 24, max_seq_len: 320, ..ModelShape::desk() };
    let path = dir.join("tiny.toml");
    std::fs::write(&path, toml::to_string(&config).unwrap()).unwrap();
    path
}

#[test]
fn ablate_encodings_has_three_complete_rows() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 24);
    let opts = AblationOptions {
        config: Some(tiny_config(dir.path())),
        corpus,
        train_split: "train".into(),
        eval_split: "test".into(),
        train_limit: Some(8),
        eval_limit: Some(3),
        out: dir.path().join("table.json"),
    };
    let table = commands::ablate_encodings_cmd(&opts).unwrap();
    assert_eq!(table.rows.len(), 3);
    assert!(table.is_complete());
    assert_eq!(table.to_markdown().lines().count(), 5);
    assert!(opts.out.exists());
}

#[test]
fn ablate_grid_reports_each_step() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 30);
    let opts = AblationOptions {
        config: None,
        corpus,
        train_split: "train".into(),
        eval_split: "test".into(),
        train_limit: None,
        eval_limit: None,
        out: dir.path().join("grid.json"),
    };
    let rows = commands::ablate_grid_cmd(&opts, &commands::DEFAULT_GRID_STEPS).unwrap();
    assert_eq!(rows.iter().map(|r| r.step_px).collect::<Vec<_>>(), [10, 5, 3]);
    assert!(rows[2].mean_corner_error < rows[0].mean_corner_error);
    assert!(rows.iter().all(|r| r.trained.is_none()));
}

#[test]
fn train_infer_and_probe_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 12);
    let run = dir.path().join("run");
    let out = textloc(&[
        "train", "--config", tiny_config(dir.path()).to_str().unwrap(), "--corpus", corpus.to_str().unwrap(), "--out",
        run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["stage0.ckpt", "stage4.ckpt", "state.ckpt", "train_log.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ckpt = run.join("stage4.ckpt");

    let image = std::fs::read_dir(corpus.join("images")).unwrap().next().unwrap().unwrap().path();
    let preds = dir.path().join("preds.jsonl");
    let rows = commands::infer(&InferOptions {
        checkpoint: ckpt.clone(),
        images: vec![image.clone(), image.clone()],
        task: ServiceTask::OcrLayout,
        region: None,
        query: None,
        pad: Some(1.0),
        out: preds.clone(),
    })
    .unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(std::fs::read_to_string(&preds).unwrap().lines().count(), 2);
    let hash = checkpoint::bytes_hash(&std::fs::read(&ckpt).unwrap());
    assert!(rows.iter().all(|r| r.response.model_version == hash && r.response.pad == Some(1.0)));

    // A missing second image fails the run and removes the partial file.
    let failed = dir.path().join("failed.jsonl");
    let err = commands::infer(&InferOptions {
        checkpoint: ckpt.clone(),
        images: vec![image, dir.path().join("missing.png")],
        task: ServiceTask::Ocr,
        region: None,
        query: None,
        pad: None,
        out: failed.clone(),
    });
    assert!(err.is_err());
    assert!(!failed.exists());

    let probe = dir.path().join("probe.json");
    let out = textloc(&["probe-embeddings", run.join("stage0.ckpt").to_str().unwrap(), ckpt.to_str().unwrap(), "--out", probe.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&probe).unwrap()).unwrap();
    assert_eq!(report.as_object().unwrap().len(), 2);
}
