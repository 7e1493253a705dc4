use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use infocascade::cascade::{self, Manifest, PipelineOptions, PipelineReport};
use infocascade::corpus::{self, LoadStats, SplitSpec, Task};
use infocascade::independence::{test_independence, ChiSquareResult, ContingencyTable};
use infocascade::metrics::{Averaging, MetricsReport};
use infocascade::model::{Architecture, HybridClassifier, ModelBundle};
use infocascade::tokenizer::{self, Vocab, DEFAULT_MAX_LEN, DEFAULT_MAX_SIZE, DEFAULT_MIN_FREQ};
use infocascade::training::{self, LabeledSet, SelectOn, TrainConfig, TrainOutcome, TrainSummary};
use serde::Serialize;
use serde_json::json;

use crate::args::{Chi2Args, EvalArgs, PipelineArgs, PrepareArgs, ReportArgs, TrainArgs, VocabArgs};
use crate::error::CliError;
use crate::{Globals, DEFAULT_OUT_DIR};

const DEFAULT_ALPHA: f64 = 0.05;

fn require<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::validation(format!("missing required option --{flag}")))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}", dir.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).expect("output serialises");
    write_text(path, &(json + "\n"))
}

/// Load counts without the per-record lists.
fn load_counts(stats: &LoadStats) -> serde_json::Value {
    json!({
        "records_read": stats.records_read,
        "accepted": stats.accepted,
        "rejected": stats.rejects.len(),
        "dropped_empty": stats.dropped_empty.len(),
    })
}

#[derive(Debug, Serialize)]
struct PrepareConfig {
    #[serde(flatten)]
    globals: Globals,
    input: PathBuf,
    task: Option<Task>,
    train_fraction: f64,
    val_fraction: f64,
    test_fraction: f64,
    stratified: bool,
    strict: bool,
}

pub fn prepare(g: &Globals, a: PrepareArgs) -> Result<(), CliError> {
    let config = PrepareConfig {
        globals: g.clone(),
        input: require(a.input, "input")?,
        task: a.task,
        train_fraction: a.train_fraction.unwrap_or(0.8),
        val_fraction: a.val_fraction.unwrap_or(0.1),
        test_fraction: a.test_fraction.unwrap_or(0.1),
        stratified: a.stratified.unwrap_or(true),
        strict: a.strict.unwrap_or(false),
    };
    let schema = config.task.map(Task::schema);
    let corpus = corpus::load_corpus(&config.input, schema.as_ref())?;
    if config.strict {
        corpus.ensure_no_rejects()?;
    }
    let spec = SplitSpec::new(
        config.train_fraction,
        config.val_fraction,
        config.test_fraction,
        g.seed,
        config.stratified,
    )?;
    let sets = corpus::split(&corpus.posts, &spec)?;
    let split = sets.write(&g.out_dir, &spec)?;
    write_json(
        &g.out_dir.join("prepare_summary.json"),
        &json!({ "config": config, "load": corpus.stats, "split": split }),
    )?;
    println!(
        "split {} items into train={} val={} test={} ({} rejected, {} empty after cleaning)",
        split.total,
        split.train,
        split.val,
        split.test,
        corpus.stats.rejects.len(),
        corpus.stats.dropped_empty.len()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct VocabConfig {
    #[serde(flatten)]
    globals: Globals,
    input: PathBuf,
    min_freq: usize,
    max_size: usize,
}

pub fn build_vocab(g: &Globals, a: VocabArgs) -> Result<(), CliError> {
    let config = VocabConfig {
        globals: g.clone(),
        input: require(a.input, "input")?,
        min_freq: a.min_freq.unwrap_or(DEFAULT_MIN_FREQ),
        max_size: a.max_size.unwrap_or(DEFAULT_MAX_SIZE),
    };
    let corpus = corpus::load_corpus(&config.input, None)?;
    let vocab = tokenizer::build_vocab(&corpus.posts, config.min_freq, config.max_size)?;
    create_dir(&g.out_dir)?;
    let path = g.out_dir.join("vocab.json");
    vocab.save(&path)?;
    write_json(
        &g.out_dir.join("vocab_summary.json"),
        &json!({ "config": config, "vocab_size": vocab.len(), "vocab_file": path }),
    )?;
    println!("wrote {} tokens to {}", vocab.len(), path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainRunConfig {
    #[serde(flatten)]
    globals: Globals,
    task: Task,
    train_file: PathBuf,
    val_file: PathBuf,
    vocab: Option<PathBuf>,
    model_out: PathBuf,
    min_freq: usize,
    max_size: usize,
    architecture: Architecture,
    training: TrainConfig,
}

pub fn train(g: &Globals, a: TrainArgs) -> Result<(), CliError> {
    let task = require(a.task, "task")?;
    let train_file = require(a.train_file, "train")?;
    let val_file = require(a.val_file, "val")?;
    let schema = task.schema();
    let train_corpus = corpus::load_corpus(&train_file, Some(&schema))?;
    let val_corpus = corpus::load_corpus(&val_file, Some(&schema))?;

    let min_freq = a.min_freq.unwrap_or(DEFAULT_MIN_FREQ);
    let max_size = a.max_size.unwrap_or(DEFAULT_MAX_SIZE);
    let vocab = match &a.vocab {
        Some(path) => Vocab::load(path)?,
        None => tokenizer::build_vocab(&train_corpus.posts, min_freq, max_size)?,
    };

    let mut arch = Architecture::desk(vocab.len(), a.max_len.unwrap_or(DEFAULT_MAX_LEN), task.class_count());
    let enc = &mut arch.encoder;
    enc.d_model = a.d_model.unwrap_or(enc.d_model);
    enc.n_heads = a.n_heads.unwrap_or(enc.n_heads);
    enc.n_layers = a.n_layers.unwrap_or(enc.n_layers);
    enc.d_ff = a.d_ff.unwrap_or(enc.d_ff);
    enc.dropout_rate = a.dropout.unwrap_or(enc.dropout_rate);
    arch.lstm.input_size = arch.encoder.d_model;
    arch.lstm.hidden_size = a.lstm_hidden.unwrap_or(arch.lstm.hidden_size);
    arch.lstm.n_layers = a.lstm_layers.unwrap_or(arch.lstm.n_layers);

    let defaults = TrainConfig::default();
    let training = TrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
        weight_decay: a.weight_decay.unwrap_or(defaults.weight_decay),
        clip_norm: a.clip_norm.unwrap_or(defaults.clip_norm),
        select_on: a.select_on.unwrap_or(SelectOn::ValAccuracy),
        seed: g.seed,
        ..defaults
    };
    training.validate()?;

    let config = TrainRunConfig {
        globals: g.clone(),
        task,
        model_out: a.model_out.unwrap_or_else(|| g.out_dir.join(format!("{task}.json"))),
        train_file,
        val_file,
        vocab: a.vocab,
        min_freq,
        max_size,
        architecture: arch,
        training,
    };

    let max_len = arch.encoder.max_len;
    let classes = arch.classes;
    let train_set = LabeledSet::encode(&train_corpus.posts, &vocab, max_len, classes)?;
    let val_set = LabeledSet::encode(&val_corpus.posts, &vocab, max_len, classes)?;
    let mut model = HybridClassifier::new(arch, g.seed)?;
    let (best, best_epoch, records) =
        training::train_with_observer(&mut model, &train_set, &val_set, &training, |r| {
            eprintln!(
                "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  train_acc {:.4}  val_acc {:.4}",
                r.epoch, r.train_loss, r.val_loss, r.train_accuracy, r.val_accuracy
            );
        })?;
    let outcome = TrainOutcome {
        model: best,
        best_epoch,
        records,
    };

    create_dir(&g.out_dir)?;
    if let Some(parent) = config.model_out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let bundle = ModelBundle::new(task, outcome.model.clone(), vocab)?;
    bundle.save(&config.model_out)?;
    let curves = g.out_dir.join(format!("{task}_curves.csv"));
    write_text(&curves, &training::curves_to_csv(&outcome.records))?;
    let summary = TrainSummary::new(task.name(), &training, &outcome, train_set.len(), val_set.len());
    write_json(
        &g.out_dir.join(format!("{task}_train_summary.json")),
        &json!({
            "config": config,
            "train_load": load_counts(&train_corpus.stats),
            "val_load": load_counts(&val_corpus.stats),
            "summary": summary,
        }),
    )?;
    println!(
        "best epoch {} (val_acc {:.4}); model written to {}",
        outcome.best_epoch,
        outcome.best_record().val_accuracy,
        config.model_out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalConfig {
    #[serde(flatten)]
    globals: Globals,
    model: PathBuf,
    test: PathBuf,
    averaging: Averaging,
    batch_size: usize,
}

pub fn eval(g: &Globals, a: EvalArgs) -> Result<(), CliError> {
    let config = EvalConfig {
        globals: g.clone(),
        model: require(a.model, "model")?,
        test: require(a.test, "test")?,
        averaging: a.averaging.unwrap_or_default(),
        batch_size: a.batch_size.unwrap_or(cascade::DEFAULT_BATCH_SIZE),
    };
    let bundle = ModelBundle::load(&config.model)?;
    let task = bundle.task;
    let schema = task.schema();
    let test = corpus::load_corpus(&config.test, Some(&schema))?;
    let set = LabeledSet::encode(&test.posts, &bundle.vocab, bundle.max_len(), task.class_count())?;
    let ev = training::evaluate(&bundle.model, &set, config.batch_size)?;
    let names = schema.names();
    let report = MetricsReport::new(task.name(), &names, &ev.confusion, config.averaging)?;

    create_dir(&g.out_dir)?;
    let metrics_path = g.out_dir.join(format!("{task}_metrics.json"));
    report.write_json(&metrics_path)?;
    write_text(&g.out_dir.join(format!("{task}_confusion.csv")), &ev.confusion.to_csv(&names))?;
    let mut predictions = String::new();
    for (i, id) in set.ids.iter().enumerate() {
        let line = json!({
            "id": id,
            "gold": set.labels[i],
            "predicted": ev.predictions[i],
            "probabilities": ev.probabilities[i],
        });
        writeln!(predictions, "{line}").expect("string write");
    }
    write_text(&g.out_dir.join(format!("{task}_predictions.jsonl")), &predictions)?;
    write_json(
        &g.out_dir.join(format!("{task}_eval_summary.json")),
        &json!({
            "config": config,
            "load": load_counts(&test.stats),
            "items": report.items,
            "accuracy": report.accuracy,
            "precision": report.precision,
            "recall": report.recall,
            "f1": report.f1,
        }),
    )?;
    println!(
        "{task}: accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4} ({} averaging, {} items)",
        report.accuracy,
        report.precision,
        report.recall,
        report.f1,
        serde_json::to_value(config.averaging).expect("averaging serialises").as_str().unwrap_or(""),
        report.items
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct PipelineConfig {
    #[serde(flatten)]
    globals: Globals,
    manifest: Option<PathBuf>,
    alpha: f64,
    widen_stage3: bool,
    contingency_only: bool,
}

#[derive(Debug, Serialize)]
struct IndependenceOutput<'a> {
    config: &'a PipelineConfig,
    #[serde(flatten)]
    result: &'a ChiSquareResult,
}

pub fn pipeline(g: &Globals, out_dir_set: bool, a: PipelineArgs) -> Result<(), CliError> {
    let contingency_only = a.contingency_only.unwrap_or(false);
    if contingency_only {
        let config = PipelineConfig {
            globals: g.clone(),
            manifest: a.manifest,
            alpha: a.alpha.unwrap_or(DEFAULT_ALPHA),
            widen_stage3: a.widen_stage3.unwrap_or(false),
            contingency_only,
        };
        let table = cascade::contingency_from_outputs(&g.out_dir)?;
        let result = test_independence(&table, config.alpha)?;
        table.save_csv(&g.out_dir.join("contingency.csv"))?;
        write_json(
            &g.out_dir.join("independence.json"),
            &IndependenceOutput {
                config: &config,
                result: &result,
            },
        )?;
        print_independence(&result);
        return Ok(());
    }

    let manifest_path = require(a.manifest, "manifest")?;
    let manifest = Manifest::load(&manifest_path)?;
    let mut globals = g.clone();
    if !out_dir_set {
        globals.out_dir = manifest.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    }
    let config = PipelineConfig {
        globals,
        manifest: Some(manifest_path),
        alpha: a.alpha.or(manifest.alpha).unwrap_or(DEFAULT_ALPHA),
        widen_stage3: a.widen_stage3.or(manifest.widen_stage3).unwrap_or(false),
        contingency_only,
    };
    let options = PipelineOptions {
        alpha: config.alpha,
        widen_stage3: config.widen_stage3,
    };
    let out = cascade::run_manifest(&manifest, options)?;
    let dir = &config.globals.out_dir;
    out.write(dir)?;
    write_json(
        &dir.join("pipeline_summary.json"),
        &json!({ "config": config, "manifest": manifest, "report": out.report }),
    )?;
    let r = &out.report;
    println!(
        "classified {} posts, {} replies, {} flagged replies; outputs in {}",
        r.posts_classified,
        r.replies_classified,
        r.flagged_replies,
        dir.display()
    );
    match (&r.independence, &r.independence_refused) {
        (Some(result), _) => print_independence(result),
        (None, Some(reason)) => println!("independence test not run: {reason}"),
        (None, None) => {}
    }
    Ok(())
}

fn print_independence(r: &ChiSquareResult) {
    println!(
        "chi2 = {:.4}, dof = {}, p = {:.6}, critical = {:.4}, reject_null = {}",
        r.statistic, r.dof, r.p_value, r.critical_value, r.reject_null
    );
}

#[derive(Debug, Serialize)]
struct Chi2Config {
    #[serde(flatten)]
    globals: Globals,
    input: PathBuf,
    alpha: f64,
}

#[derive(Debug, Serialize)]
struct Chi2Output<'a> {
    config: &'a Chi2Config,
    #[serde(flatten)]
    result: &'a ChiSquareResult,
}

pub fn chi2(g: &Globals, a: Chi2Args) -> Result<(), CliError> {
    let config = Chi2Config {
        globals: g.clone(),
        input: require(a.input, "input")?,
        alpha: a.alpha.unwrap_or(DEFAULT_ALPHA),
    };
    let table = ContingencyTable::load_csv(&config.input)?;
    let result = test_independence(&table, config.alpha)?;
    let output = Chi2Output {
        config: &config,
        result: &result,
    };
    create_dir(&g.out_dir)?;
    write_json(&g.out_dir.join("chi2_result.json"), &output)?;
    println!("{}", serde_json::to_string_pretty(&output).expect("output serialises"));
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportConfig {
    #[serde(flatten)]
    globals: Globals,
    input: PathBuf,
}

fn count_csv<'a>(header: &str, rows: impl IntoIterator<Item = (&'a String, &'a usize)>) -> String {
    let mut out = format!("{header}\n");
    for (name, n) in rows {
        writeln!(out, "{name},{n}").expect("string write");
    }
    out
}

/// Writes tabular plot data derived from a pipeline report.
pub fn report(g: &Globals, a: ReportArgs) -> Result<(), CliError> {
    let config = ReportConfig {
        globals: g.clone(),
        input: a.input.unwrap_or_else(|| g.out_dir.join("report.json")),
    };
    let text = std::fs::read_to_string(&config.input)
        .map_err(|e| CliError::io(format!("cannot read {}", config.input.display()), e))?;
    let report: PipelineReport = serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("{}: not a pipeline report: {e}", config.input.display())))?;
    create_dir(&g.out_dir)?;

    let mut files: Vec<(PathBuf, String)> = Vec::new();
    files.push((
        g.out_dir.join("post_distribution.csv"),
        count_csv("class,count", &report.post_counts),
    ));

    let cols = &report.contingency.col_labels;
    let mut branches = format!("branch,{}\n", cols.join(","));
    for (branch, counts) in &report.implication_counts_by_branch {
        let cells: Vec<String> = counts.iter().map(usize::to_string).collect();
        writeln!(branches, "{branch},{}", cells.join(",")).expect("string write");
    }
    files.push((g.out_dir.join("implication_by_branch.csv"), branches));

    let mut disorder = String::from("class,count,fraction\n");
    for (name, n) in &report.disorder_counts {
        let frac = report.disorder_percentages.get(name).copied().unwrap_or(0.0);
        writeln!(disorder, "{name},{n},{frac}").expect("string write");
    }
    files.push((g.out_dir.join("disorder_distribution.csv"), disorder));

    if let Some(ind) = &report.independence {
        let mut cells = String::from("row,col,observed,expected\n");
        for (i, row) in ind.row_labels.iter().enumerate() {
            for (j, col) in ind.col_labels.iter().enumerate() {
                writeln!(cells, "{row},{col},{},{}", ind.observed[i][j], ind.expected[i][j]).expect("string write");
            }
        }
        files.push((g.out_dir.join("contingency_cells.csv"), cells));
    }

    for (path, body) in &files {
        write_text(path, body)?;
    }
    let names: Vec<&PathBuf> = files.iter().map(|(p, _)| p).collect();
    write_json(
        &g.out_dir.join("report_summary.json"),
        &json!({ "config": config, "files": names }),
    )?;
    for p in names {
        println!("wrote {}", p.display());
    }
    Ok(())
}
