use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use infocascade::corpus::{self, Post, SplitSpec, Task};
use infocascade::synthetic::{planted_keyword_corpus, PipelineFixture, PlantSpec};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_infocascade"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn write_posts(path: &Path, posts: &[Post]) {
    corpus::write_jsonl(path, posts).unwrap();
}

/// Train/val files from a planted-keyword corpus of 200 items.
fn planted_splits(dir: &Path, task: Task) -> (PathBuf, PathBuf) {
    let posts = planted_keyword_corpus(task, 200, 42);
    let sets = corpus::split(&posts, &SplitSpec::standard(42)).unwrap();
    let (train, val) = (dir.join("train.jsonl"), dir.join("val.jsonl"));
    write_posts(&train, &sets.train);
    write_posts(&val, &sets.val);
    (train, val)
}

const TINY: [&str; 12] = [
    "--d-model", "8", "--n-heads", "2", "--n-layers", "1", "--d-ff", "8", "--lstm-hidden", "8", "--max-len", "16",
];

#[test]
fn help_succeeds_for_every_command() {
    let top = run(&["--help"]);
    assert_eq!(code(&top), 0);
    for cmd in ["prepare", "build-vocab", "train", "eval", "pipeline", "chi2", "report"] {
        let out = run(&[cmd, "--help"]);
        assert_eq!(code(&out), 0, "{cmd} --help");
        let text = String::from_utf8_lossy(&out.stdout);
        for flag in ["--seed", "--config", "--out-dir"] {
            assert!(text.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
    let train_help = String::from_utf8_lossy(&run(&["train", "--help"]).stdout).into_owned();
    for flag in ["--epochs", "--batch-size", "--learning-rate", "--select-on", "--model-out"] {
        assert!(train_help.contains(flag), "train --help lacks {flag}");
    }
}

#[test]
fn prepare_splits_exactly_and_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("corpus.jsonl");
    write_posts(&input, &planted_keyword_corpus(Task::Implication, 6420, 3));
    let run_into = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = run(&["prepare", "--input", s(&input), "--task", "implication", "--out-dir", s(&out_dir)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        out_dir
    };
    let a = run_into("a");
    let summary = read_json(&a.join("split_summary.json"));
    assert_eq!(
        (summary["train"].as_u64(), summary["val"].as_u64(), summary["test"].as_u64()),
        (Some(5136), Some(642), Some(642))
    );
    let prep = read_json(&a.join("prepare_summary.json"));
    assert_eq!(prep["config"]["seed"], 42);
    assert_eq!(prep["config"]["stratified"], true);
    let b = run_into("b");
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "split_summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn prepare_reports_malformed_line() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("corpus.jsonl");
    let mut lines: Vec<String> = (0..20)
        .map(|i| format!(r#"{{"id":"x{i}","text":"word number {i}","label":{}}}"#, i % 2))
        .collect();
    lines[16] = r#"{"id":"x16","text":"#.to_string();
    std::fs::write(&input, lines.join("\n") + "\n").unwrap();
    let out = run(&["prepare", "--input", s(&input), "--out-dir", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 17"), "{}", stderr(&out));
}

#[test]
fn prepare_strict_fails_on_out_of_range_label() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("corpus.jsonl");
    let mut posts = planted_keyword_corpus(Task::Veracity, 30, 1);
    posts[4].gold_label = Some(5);
    write_posts(&input, &posts);
    let o = dir.path().join("o");
    let lenient = run(&["prepare", "--input", s(&input), "--task", "veracity", "--out-dir", s(&o)]);
    assert_eq!(code(&lenient), 0, "{}", stderr(&lenient));
    assert_eq!(read_json(&o.join("split_summary.json"))["total"], 29);
    let strict = run(&["prepare", "--input", s(&input), "--task", "veracity", "--strict", "--out-dir", s(&o)]);
    assert_eq!(code(&strict), 2);
    assert!(stderr(&strict).contains("line 5"), "{}", stderr(&strict));
}

#[test]
fn missing_input_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = planted_splits(dir.path(), Task::Veracity);
    let missing = dir.path().join("absent_val.jsonl");
    let out = run(&["train", "--task", "veracity", "--train", s(&train), "--val", s(&missing)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("absent_val.jsonl"));
    let out = run(&["train", "--task", "veracity", "--train", s(&train)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--val"));
}

#[test]
fn build_vocab_writes_loadable_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = planted_splits(dir.path(), Task::Disorder);
    let out = run(&["build-vocab", "--input", s(&train), "--min-freq", "1", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let vocab = infocascade::tokenizer::Vocab::load(&dir.path().join("vocab.json")).unwrap();
    for name in Task::Disorder.schema().names() {
        assert!(vocab.id(name).is_some(), "{name} missing from vocab");
    }
    assert_eq!(read_json(&dir.path().join("vocab_summary.json"))["config"]["min_freq"], 1);
}

#[test]
fn train_and_eval_on_separable_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = planted_splits(dir.path(), Task::Veracity);
    let out_dir = dir.path().join("run");
    let out = run(&["train", "--task", "veracity", "--train", s(&train), "--val", s(&val), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = read_json(&out_dir.join("veracity_train_summary.json"));
    assert!(summary["summary"]["final"]["train_accuracy"].as_f64().unwrap() >= 0.95);
    assert_eq!(summary["config"]["seed"], 42);
    assert_eq!(summary["config"]["training"]["epochs"], 30);
    let curves = std::fs::read_to_string(out_dir.join("veracity_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 31);

    let model = out_dir.join("veracity.json");
    let ev = run(&["eval", "--model", s(&model), "--test", s(&val), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&ev), 0, "{}", stderr(&ev));
    let metrics = read_json(&out_dir.join("veracity_metrics.json"));
    assert_eq!(metrics["accuracy"], 1.0);
    let schema: Value =
        serde_json::from_str(include_str!("../schemas/metrics_report.schema.json")).unwrap();
    if let Err(e) = jsonschema::validate(&schema, &metrics) {
        panic!("metrics report violates schema: {e}");
    }
    let confusion = std::fs::read_to_string(out_dir.join("veracity_confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 3);
}

#[test]
fn one_epoch_disorder_run_and_six_class_confusion() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = planted_splits(dir.path(), Task::Disorder);
    let out_dir = dir.path().join("run");
    let mut args = vec!["train", "--task", "disorder", "--train", s(&train), "--val", s(&val)];
    args.extend_from_slice(&["--epochs", "1", "--out-dir", s(&out_dir)]);
    args.extend_from_slice(&TINY);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let curves = std::fs::read_to_string(out_dir.join("disorder_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 2);

    let model = out_dir.join("disorder.json");
    let ev = run(&["eval", "--model", s(&model), "--test", s(&val), "--averaging", "micro", "--out-dir", s(&out_dir)]);
    assert_eq!(code(&ev), 0, "{}", stderr(&ev));
    let confusion = std::fs::read_to_string(out_dir.join("disorder_confusion.csv")).unwrap();
    let rows: Vec<&str> = confusion.lines().collect();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.split(',').count() == 7));
    let metrics = read_json(&out_dir.join("disorder_metrics.json"));
    assert_eq!(metrics["averaging"], "micro");
    assert_eq!(metrics["precision"], metrics["metrics"]["micro_precision"]);
    let schema: Value =
        serde_json::from_str(include_str!("../schemas/metrics_report.schema.json")).unwrap();
    assert!(jsonschema::is_valid(&schema, &metrics));
}

#[test]
fn config_file_is_layered_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = planted_splits(dir.path(), Task::Veracity);
    let from_file = dir.path().join("from_file");
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        format!(
            "seed = 7\nout_dir = {:?}\n\n[train]\nepochs = 2\nbatch_size = 8\nd_model = 8\nn_heads = 2\nn_layers = 1\nd_ff = 8\nlstm_hidden = 8\nmax_len = 16\n",
            s(&from_file)
        ),
    )
    .unwrap();
    let out = run(&[
        "--config", s(&config), "train", "--task", "veracity", "--train", s(&train), "--val", s(&val), "--epochs", "1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = read_json(&from_file.join("veracity_train_summary.json"));
    let cfg = &summary["config"];
    assert_eq!(cfg["seed"], 7);
    assert_eq!(cfg["training"]["seed"], 7);
    assert_eq!(cfg["training"]["epochs"], 1);
    assert_eq!(cfg["training"]["batch_size"], 8);
    assert_eq!(cfg["architecture"]["encoder"]["d_model"], 8);
    assert_eq!(cfg["training"]["learning_rate"], 0.001);

    std::fs::write(&config, "[train]\nepoch = 2\n").unwrap();
    let bad = run(&["--config", s(&config), "train", "--task", "veracity"]);
    assert_eq!(code(&bad), 2);
}

fn golden_table(dir: &Path) -> PathBuf {
    let path = dir.join("golden_table.csv");
    std::fs::write(&path, ",0,1,2\nfake,2554,1907,6203\nreal,2305,1578,4992\n").unwrap();
    path
}

#[test]
fn chi2_on_golden_table() {
    let dir = tempfile::tempdir().unwrap();
    let input = golden_table(dir.path());
    let out = run(&["chi2", "--input", s(&input), "--alpha", "0.05", "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let result: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((result["p_value"].as_f64().unwrap() - 0.003871).abs() < 5e-6);
    assert!((result["statistic"].as_f64().unwrap() - 11.1084).abs() < 1e-3);
    assert_eq!(result["reject_null"], true);
    assert_eq!(result["dof"], 2);
    assert_eq!(result, read_json(&dir.path().join("chi2_result.json")));
}

#[test]
fn chi2_proportional_rows_and_zero_marginal() {
    let dir = tempfile::tempdir().unwrap();
    let prop = dir.path().join("prop.csv");
    std::fs::write(&prop, ",0,1,2\na,10,20,30\nb,20,40,60\n").unwrap();
    let out = run(&["chi2", "--input", s(&prop), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let result: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(result["reject_null"], false);

    let zero = dir.path().join("zero.csv");
    std::fs::write(&zero, ",0,1,2\na,10,0,30\nb,20,0,60\n").unwrap();
    let out = run(&["chi2", "--input", s(&zero), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("zero marginal"));
}

fn write_manifest(dir: &Path, veracity: Value) -> PathBuf {
    let manifest = serde_json::json!({
        "corpus": "corpus.jsonl",
        "models": {
            "veracity": veracity,
            "implication": { "planted_labels": "implication_labels.jsonl" },
            "disorder": { "planted_labels": "disorder_labels.jsonl" },
        },
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    path
}

#[test]
fn pipeline_with_planted_oracles_reproduces_plant() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PlantSpec::default();
    let fx = PipelineFixture::generate(spec.clone(), 11);
    fx.write(dir.path()).unwrap();
    let manifest = write_manifest(dir.path(), serde_json::json!({ "planted_labels": "veracity_labels.jsonl" }));
    let out_dir = dir.path().join("out");
    let out = run(&["pipeline", "--manifest", s(&manifest), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let report = read_json(&out_dir.join("report.json"));
    assert_eq!(report["post_counts"]["fake"], spec.fake_posts);
    assert_eq!(report["post_counts"]["real"], spec.real_posts);
    assert_eq!(report["contingency"]["observed"], serde_json::json!([spec.fake_implication, spec.real_implication]));
    assert_eq!(report["flagged_replies"], spec.fake_implication[2]);
    for (name, n) in Task::Disorder.schema().names().iter().zip(spec.disorder) {
        assert_eq!(report["disorder_counts"][*name], n, "{name}");
    }
    assert_eq!(report["dropped"]["orphan_replies"], spec.orphans);
    assert_eq!(report["dropped"]["empty_after_cleaning"], spec.empty);
    assert!(report["independence"]["p_value"].is_number());
    assert_eq!(read_json(&out_dir.join("pipeline_summary.json"))["config"]["seed"], 42);

    let saved = std::fs::read(out_dir.join("contingency.csv")).unwrap();
    std::fs::remove_file(out_dir.join("contingency.csv")).unwrap();
    let again = run(&["pipeline", "--contingency-only", "--out-dir", s(&out_dir)]);
    assert_eq!(code(&again), 0, "{}", stderr(&again));
    assert_eq!(std::fs::read(out_dir.join("contingency.csv")).unwrap(), saved);
    let ind = read_json(&out_dir.join("independence.json"));
    assert_eq!(ind["statistic"], report["independence"]["statistic"]);

    let rep = run(&["report", "--out-dir", s(&out_dir)]);
    assert_eq!(code(&rep), 0, "{}", stderr(&rep));
    let posts = std::fs::read_to_string(out_dir.join("post_distribution.csv")).unwrap();
    assert_eq!(posts, format!("class,count\nfake,{}\nreal,{}\n", spec.fake_posts, spec.real_posts));
    let branches = std::fs::read_to_string(out_dir.join("implication_by_branch.csv")).unwrap();
    assert_eq!(branches.lines().nth(1), Some("fake,60,40,100"));
    let disorder = std::fs::read_to_string(out_dir.join("disorder_distribution.csv")).unwrap();
    assert_eq!(disorder.lines().count(), 7);
    assert!(out_dir.join("contingency_cells.csv").exists());
}

#[test]
fn pipeline_names_missing_model_file() {
    let dir = tempfile::tempdir().unwrap();
    PipelineFixture::generate(PlantSpec::default(), 2).write(dir.path()).unwrap();
    let manifest = write_manifest(dir.path(), Value::String("models/veracity_missing.json".into()));
    let out = run(&["pipeline", "--manifest", s(&manifest), "--out-dir", s(&dir.path().join("out"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("veracity_missing.json"), "{}", stderr(&out));
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    PipelineFixture::generate(PlantSpec::default(), 5).write(dir.path()).unwrap();
    let manifest = write_manifest(dir.path(), serde_json::json!({ "planted_labels": "veracity_labels.jsonl" }));
    let mut dirs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = run(&["pipeline", "--manifest", s(&manifest), "--out-dir", s(&out_dir)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        dirs.push(out_dir);
    }
    for f in ["stage1.jsonl", "stage2.jsonl", "stage3.jsonl", "contingency.csv", "report.json"] {
        assert_eq!(std::fs::read(dirs[0].join(f)).unwrap(), std::fs::read(dirs[1].join(f)).unwrap(), "{f}");
    }
}
