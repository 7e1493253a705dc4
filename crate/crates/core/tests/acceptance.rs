//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. Run with `--nocapture` to see the lines.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use infocascade::autodiff::{gradient_check, AutodiffError};
use infocascade::cascade::{run_cascade, PipelineOptions, PlantedOracle};
use infocascade::corpus::{load_corpus, split, Post, SplitSpec, Task};
use infocascade::independence::{test_independence, ContingencyTable};
use infocascade::metrics::{bundle, confusion_matrix};
use infocascade::model::{classify_graph, Architecture, Batch, HybridClassifier, Mode, ModelBundle, ModelError, Weights};
use infocascade::synthetic::{planted_keyword_corpus, PipelineFixture, PlantSpec};
use infocascade::tokenizer::{build_vocab, DEFAULT_MAX_LEN, DEFAULT_MAX_SIZE, DEFAULT_MIN_FREQ};
use infocascade::training::{curves_to_csv, train, LabeledSet, TrainConfig, TrainSummary};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed < budget, || format!("took {elapsed:.2?}, budget {budget:?}"))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let table = ContingencyTable::from_counts(vec![vec![2554, 1907, 6203], vec![2305, 1578, 4992]])
        .map_err(|e| e.to_string())?;
    let r = test_independence(&table, 0.05).map_err(|e| e.to_string())?;
    let want = [[2651.95, 1902.04, 6110.01], [2207.05, 1582.96, 5084.99]];
    for (row, want_row) in r.expected.iter().zip(want) {
        for (&got, w) in row.iter().zip(want_row) {
            ensure((got - w).abs() <= 0.01, || format!("expected cell {got} vs {w}"))?;
        }
    }
    ensure((r.statistic - 11.1084).abs() <= 0.001, || format!("statistic {}", r.statistic))?;
    ensure(r.dof == 2, || format!("dof {}", r.dof))?;
    ensure((r.p_value - 0.003871).abs() <= 5e-6, || format!("p {}", r.p_value))?;
    ensure((r.critical_value - 5.991).abs() <= 0.001, || format!("critical {}", r.critical_value))?;
    ensure(r.reject_null, || "null not rejected".into())?;
    within_budget(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("chi2={:.4} p={:.6} critical={:.3}", r.statistic, r.p_value, r.critical_value))
}

fn criterion_2() -> Outcome {
    let mut rng = common::rng(2);
    let mut max_delta: f64 = 0.0;
    for case in 0..1000 {
        let rows = rng.random_range(2..=4);
        let cols = rng.random_range(2..=4);
        let observed: Vec<Vec<u64>> =
            (0..rows).map(|_| (0..cols).map(|_| rng.random_range(1..=500)).collect()).collect();
        let table = ContingencyTable::from_counts(observed.clone()).map_err(|e| e.to_string())?;
        let r = test_independence(&table, 0.05).map_err(|e| format!("case {case}: {e}"))?;
        let (expected, stat) = common::chi_square_oracle(&observed);
        max_delta = max_delta.max((r.statistic - stat).abs());
        for (a, b) in r.expected.iter().flatten().zip(expected.iter().flatten()) {
            ensure((a - b).abs() < 1e-9, || format!("case {case}: expected {a} vs {b}"))?;
        }
        let dof = (rows - 1) * (cols - 1);
        let reference = ChiSquared::new(dof as f64).unwrap().sf(stat);
        ensure((r.p_value - reference).abs() <= 1e-9 * reference.max(1e-300), || {
            format!("case {case}: p {} vs {reference}", r.p_value)
        })?;
        ensure((r.p_value < 0.05) == (r.statistic > r.critical_value), || {
            format!("case {case}: decision rules disagree")
        })?;
        ensure(r.reject_null == (r.p_value < 0.05), || format!("case {case}: reject flag"))?;
    }
    ensure(max_delta < 1e-9, || format!("max |dchi2| {max_delta:e}"))?;
    Ok(format!("1000 tables, max |dchi2| {max_delta:.1e}"))
}

fn model_error(e: ModelError) -> AutodiffError {
    match e {
        ModelError::Autodiff(a) => a,
        other => AutodiffError::InvalidArgument(other.to_string()),
    }
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let vocab = 20;
    let arch = common::small_arch(vocab, 8, 3, 1);
    let model = HybridClassifier::new(arch, 3).map_err(|e| e.to_string())?;
    let seqs = [common::padded(&[2, 5, 9, 4, 17, 3, 11], 8, 0), common::padded(&[2, 8, 13, 6], 8, 0)];
    let batch = Batch::from_sequences(&seqs, vocab, false).map_err(|e| e.to_string())?;
    let layout = model.params().clone();
    let mut params = model.params().clone();
    let targets = [1, 2];
    let errors = gradient_check(&mut params, 1e-5, |g, vars| {
        let w = Weights::new(&layout, vars);
        let probs = classify_graph(g, &w, &arch, &batch, Mode::Eval).map_err(model_error)?;
        g.cross_entropy(probs, &targets)
    })
    .map_err(|e| e.to_string())?;
    ensure(errors.len() == layout.len(), || "not every tensor was checked".into())?;
    let worst = errors
        .iter()
        .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
        .ok_or("no parameters")?;
    ensure(worst.max_relative_error < 1e-4, || {
        format!("{} has relative error {:e}", worst.name, worst.max_relative_error)
    })?;
    within_budget(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "{} tensors, worst {:.1e} ({})",
        errors.len(),
        worst.max_relative_error,
        worst.name
    ))
}

fn criterion_4() -> Outcome {
    let vocab = 30;
    let max_len = 12;
    let mut rng = common::rng(4);
    let models: Vec<HybridClassifier> = [2, 3, 6]
        .iter()
        .enumerate()
        .map(|(i, &k)| HybridClassifier::with_init_std(common::small_arch(vocab, max_len, k, 1 + i % 2), i as u64, 0.3))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut worst_sum: f64 = 0.0;
    let mut worst_pad: f64 = 0.0;
    for call in 0..10_000 {
        let model = &models[call % models.len()];
        let rows = rng.random_range(1..=4);
        let mut plain = Vec::with_capacity(rows);
        let mut noisy = Vec::with_capacity(rows);
        for _ in 0..rows {
            let len = rng.random_range(1..=max_len);
            let mut ids = vec![2];
            ids.extend((1..len).map(|_| rng.random_range(0..vocab)));
            plain.push(common::padded(&ids, max_len, 0));
            let mut junk = common::padded(&ids, max_len, 0);
            for id in &mut junk.ids[len..] {
                *id = rng.random_range(0..vocab);
            }
            noisy.push(junk);
        }
        let probs = model.classify(&plain, Mode::Eval).map_err(|e| e.to_string())?;
        let k = model.classes();
        for row in probs.data().chunks(k) {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        if call % 10 == 0 {
            let other = model.classify(&noisy, Mode::Eval).map_err(|e| e.to_string())?;
            for (a, b) in probs.data().iter().zip(other.data()) {
                worst_pad = worst_pad.max((a - b).abs());
            }
        }
    }
    ensure(worst_sum <= 1e-6, || format!("row sum off by {worst_sum:e}"))?;
    ensure(worst_pad <= 1e-9, || format!("padding changed output by {worst_pad:e}"))?;
    Ok(format!("10000 calls, max |sum-1| {worst_sum:.1e}, max padding effect {worst_pad:.1e}"))
}

/// Everything criterion 9 compares for one trained task.
struct TaskRun {
    task: Task,
    train_acc: f64,
    val_acc: f64,
    epochs: usize,
    elapsed: Duration,
    artifacts: BTreeMap<String, Vec<u8>>,
}

fn train_task(task: Task, dir: &Path) -> Result<TaskRun, String> {
    let start = Instant::now();
    let posts = planted_keyword_corpus(task, 200, 42);
    let sets = split(&posts, &SplitSpec::standard(42)).map_err(|e| e.to_string())?;
    let vocab = build_vocab(&sets.train, DEFAULT_MIN_FREQ, DEFAULT_MAX_SIZE).map_err(|e| e.to_string())?;
    let k = task.class_count();
    let train_set = LabeledSet::encode(&sets.train, &vocab, DEFAULT_MAX_LEN, k).map_err(|e| e.to_string())?;
    let val_set = LabeledSet::encode(&sets.val, &vocab, DEFAULT_MAX_LEN, k).map_err(|e| e.to_string())?;
    let arch = Architecture::desk(vocab.len(), DEFAULT_MAX_LEN, k);
    let config = TrainConfig::default();
    let model = HybridClassifier::new(arch, config.seed).map_err(|e| e.to_string())?;
    let outcome = train(model, &train_set, &val_set, &config).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let name = task.name();
    let curves = dir.join(format!("{name}_curves.csv"));
    std::fs::write(&curves, curves_to_csv(&outcome.records)).map_err(|e| e.to_string())?;
    let summary = dir.join(format!("{name}_summary.json"));
    TrainSummary::new(name, &config, &outcome, train_set.len(), val_set.len())
        .write(&summary)
        .map_err(|e| e.to_string())?;
    let best = *outcome.best_record();
    let model_path = dir.join(format!("{name}.json"));
    ModelBundle::new(task, outcome.model, vocab)
        .and_then(|b| b.save(&model_path))
        .map_err(|e| e.to_string())?;

    let mut artifacts = BTreeMap::new();
    for path in [curves, summary, model_path] {
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        artifacts.insert(path.file_name().unwrap().to_string_lossy().into_owned(), bytes);
    }
    Ok(TaskRun {
        task,
        train_acc: best.train_accuracy,
        val_acc: best.val_accuracy,
        epochs: outcome.records.len(),
        elapsed,
        artifacts,
    })
}

fn train_all() -> Result<Vec<TaskRun>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = dir.path();
    std::thread::scope(|s| {
        let handles: Vec<_> = Task::ALL.iter().map(|&t| s.spawn(move || train_task(t, dir))).collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    })
}

fn criterion_5(runs: &[TaskRun]) -> Outcome {
    let mut parts = Vec::new();
    for r in runs {
        let name = r.task.name();
        ensure(r.epochs <= 30, || format!("{name} ran {} epochs", r.epochs))?;
        ensure(r.train_acc >= 0.95, || format!("{name} train accuracy {:.3}", r.train_acc))?;
        ensure(r.val_acc >= 0.90, || format!("{name} val accuracy {:.3}", r.val_acc))?;
        within_budget(r.elapsed, Duration::from_secs(300)).map_err(|e| format!("{name} {e}"))?;
        parts.push(format!(
            "{name} train {:.3} val {:.3} in {:.1?}",
            r.train_acc, r.val_acc, r.elapsed
        ));
    }
    Ok(parts.join("; "))
}

fn criterion_6() -> Outcome {
    let posts: Vec<Post> = (0..6420)
        .map(|i| Post::new(format!("p{i:04}"), format!("item {i}")).with_label(usize::from(i >= 3060)))
        .collect();
    let sets = split(&posts, &SplitSpec::standard(42)).map_err(|e| e.to_string())?;
    let sizes = (sets.train.len(), sets.val.len(), sets.test.len());
    ensure(sizes == (5136, 642, 642), || format!("sizes {sizes:?}"))?;
    let mut seen = BTreeSet::new();
    for p in sets.train.iter().chain(&sets.val).chain(&sets.test) {
        ensure(seen.insert(p.id.clone()), || format!("{} appears twice", p.id))?;
    }
    ensure(seen.len() == posts.len(), || "split is not exhaustive".into())?;
    let mut worst: f64 = 0.0;
    for (part, frac) in [(&sets.train, 0.8), (&sets.val, 0.1), (&sets.test, 0.1)] {
        for (class, total) in [(0, 3060.0), (1, 3360.0)] {
            let n = part.iter().filter(|p| p.gold_label == Some(class)).count() as f64;
            worst = worst.max((n - total * frac).abs());
        }
    }
    ensure(worst <= 1.0, || format!("class proportion off by {worst} items"))?;
    Ok(format!("sizes {sizes:?}, max class deviation {worst}"))
}

fn criterion_7() -> Outcome {
    let mut rng = common::rng(7);
    for case in 0..500 {
        let k = [2, 3, 6][case % 3];
        let n = rng.random_range(1..=60);
        let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let b = bundle(&confusion_matrix(&gold, &pred, k).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let o = common::brute_metrics(&gold, &pred, k);
        let mut diffs = vec![
            b.macro_precision - o.macro_precision,
            b.macro_recall - o.macro_recall,
            b.macro_f1 - o.macro_f1,
            b.accuracy - o.accuracy,
        ];
        for (c, m) in b.per_class.iter().enumerate() {
            diffs.extend([m.precision - o.precision[c], m.recall - o.recall[c], m.f1 - o.f1[c]]);
        }
        ensure(diffs.iter().all(|d| d.abs() < 1e-12), || format!("case {case} differs from brute force"))?;
    }
    let gold = [0, 0, 0];
    let pred = [0, 0, 0];
    let b = bundle(&confusion_matrix(&gold, &pred, 3).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    for m in &b.per_class[1..] {
        ensure(m.precision == 0.0 && m.recall == 0.0 && m.f1 == 0.0, || "zero denominators not 0".into())?;
    }
    Ok("500 pairs match brute force; zero denominators give 0".into())
}

/// The cascade run plus the bytes of everything it writes.
struct CascadeRun {
    artifacts: BTreeMap<String, Vec<u8>>,
    summary: String,
}

fn oracle(task: Task, labels: &BTreeMap<String, usize>) -> PlantedOracle {
    PlantedOracle::new(task, labels.iter().map(|(k, &v)| (k.clone(), v)))
}

fn run_planted_cascade() -> Result<CascadeRun, String> {
    let start = Instant::now();
    let spec = PlantSpec {
        fake_posts: 120,
        real_posts: 80,
        fake_implication: [2554, 1907, 6203],
        real_implication: [2305, 1578, 4992],
        disorder: [2357, 2357, 62, 1365, 31, 31],
        orphans: 7,
        empty: 4,
        childless: 10,
    };
    let fx = PipelineFixture::generate(spec.clone(), 42);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    fx.write(dir.path()).map_err(|e| e.to_string())?;
    let corpus = load_corpus(&dir.path().join("corpus.jsonl"), None).map_err(|e| e.to_string())?;
    let models = [
        oracle(Task::Veracity, &fx.veracity),
        oracle(Task::Implication, &fx.implication),
        oracle(Task::Disorder, &fx.disorder),
    ];
    let out = run_cascade(&corpus, [&models[0], &models[1], &models[2]], PipelineOptions::default())
        .map_err(|e| e.to_string())?;
    let r = &out.report;

    ensure(r.post_counts["fake"] == spec.fake_posts && r.post_counts["real"] == spec.real_posts, || {
        format!("post counts {:?}", r.post_counts)
    })?;
    let planted = vec![
        spec.fake_implication.iter().map(|&v| v as u64).collect::<Vec<_>>(),
        spec.real_implication.iter().map(|&v| v as u64).collect(),
    ];
    ensure(out.contingency.observed() == planted.as_slice(), || {
        format!("contingency {:?}", out.contingency.observed())
    })?;
    ensure(out.contingency.grand_total() as usize == r.replies_classified, || "grand total".into())?;
    let names = Task::Disorder.schema().names();
    let counts: Vec<usize> = names.iter().map(|n| r.disorder_counts[*n]).collect();
    ensure(counts == spec.disorder, || format!("disorder counts {counts:?}"))?;
    let flagged = spec.fake_implication[2] as f64;
    for (name, &want) in names.iter().zip(&spec.disorder) {
        let got = r.disorder_percentages[*name];
        ensure(got == want as f64 / flagged, || format!("{name} share {got}"))?;
    }
    ensure(
        r.dropped.orphan_replies == spec.orphans && r.dropped.empty_after_cleaning == spec.empty,
        || format!("dropped {:?}", r.dropped),
    )?;

    let chi = r.independence.as_ref().ok_or("independence test refused")?;
    let direct = test_independence(&out.contingency, 0.05).map_err(|e| e.to_string())?;
    ensure(&direct == chi, || "report disagrees with a direct test".into())?;
    ensure((chi.statistic - 11.1084).abs() <= 0.001 && chi.reject_null, || {
        format!("statistic {}", chi.statistic)
    })?;
    let elapsed = start.elapsed();
    within_budget(elapsed, Duration::from_secs(60))?;

    let target = dir.path().join("run");
    out.write(&target).map_err(|e| e.to_string())?;
    let mut artifacts = BTreeMap::new();
    for entry in std::fs::read_dir(&target).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        artifacts.insert(path.file_name().unwrap().to_string_lossy().into_owned(), bytes);
    }
    Ok(CascadeRun {
        artifacts,
        summary: format!(
            "{} posts, {} replies, {} flagged, chi2={:.4} in {elapsed:.2?}",
            r.posts_classified, r.replies_classified, r.flagged_replies, chi.statistic
        ),
    })
}

fn same_bytes(label: &str, a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Result<(), String> {
    ensure(a.keys().eq(b.keys()), || format!("{label}: different file sets"))?;
    for (name, bytes) in a {
        ensure(&b[name] == bytes, || format!("{label}: {name} differs between runs"))?;
    }
    Ok(())
}

fn criterion_9(first_train: &[TaskRun], first_cascade: &CascadeRun) -> Outcome {
    let second = train_all()?;
    for (a, b) in first_train.iter().zip(&second) {
        same_bytes(a.task.name(), &a.artifacts, &b.artifacts)?;
    }
    let again = run_planted_cascade()?;
    same_bytes("cascade", &first_cascade.artifacts, &again.artifacts)?;
    let files: usize = first_train.iter().map(|r| r.artifacts.len()).sum::<usize>() + first_cascade.artifacts.len();
    Ok(format!("{files} files byte-identical across reruns"))
}

fn report(n: usize, outcome: &Outcome) -> bool {
    match outcome {
        Ok(detail) => println!("criterion {n}: PASS {detail}"),
        Err(reason) => println!("criterion {n}: FAIL {reason}"),
    }
    outcome.is_ok()
}

#[test]
fn acceptance_criteria() {
    let mut passed = vec![
        report(1, &criterion_1()),
        report(2, &criterion_2()),
        report(3, &criterion_3()),
        report(4, &criterion_4()),
    ];
    let training = train_all();
    passed.push(report(5, &training.as_ref().map_err(Clone::clone).and_then(|runs| criterion_5(runs))));
    passed.push(report(6, &criterion_6()));
    passed.push(report(7, &criterion_7()));
    let cascade = run_planted_cascade();
    passed.push(report(8, &cascade.as_ref().map(|c| c.summary.clone()).map_err(Clone::clone)));
    let determinism = match (&training, &cascade) {
        (Ok(t), Ok(c)) => criterion_9(t, c),
        _ => Err("criteria 5 or 8 produced no artefacts".into()),
    };
    passed.push(report(9, &determinism));
    let failed: Vec<usize> = passed.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
