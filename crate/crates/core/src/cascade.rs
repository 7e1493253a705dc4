//! Three-stage inference cascade: veracity of top-level posts, mental-health
//! implication of replies, and disorder class of flagged replies, followed
//! by the veracity x implication contingency table.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{link_replies, load_corpus, CorpusError, Post, Task, ThreadedCorpus};
use crate::independence::{test_independence, ChiSquareResult, ContingencyTable, IndependenceError};
use crate::model::{argmax, ModelBundle, ModelError};

/// Implication class that flags a reply for disorder analysis.
pub const INDICATIVE: usize = 2;
/// Veracity class of fake posts.
pub const FAKE: usize = 0;

pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("{stage} stage: classifier is for task {found}")]
    TaskMismatch { stage: Task, found: Task },
    #[error("{stage} stage: {source}")]
    Model {
        stage: Task,
        #[source]
        source: ModelError,
    },
    #[error("{stage} stage: no planted label for item {id}")]
    MissingLabel { stage: Task, id: String },
    #[error("{stage} stage: classifier returned {found} rows for {expected} items")]
    RowCount { stage: Task, expected: usize, found: usize },
    #[error("disorder stage: item {id} is not a flagged reply")]
    NotFlagged { id: String },
    #[error("reply {id} traces to {thread}, which has no veracity result")]
    Untraceable { id: String, thread: String },
    #[error("planted label file {path}, line {line}: {reason}")]
    PlantedFile { path: PathBuf, line: usize, reason: String },
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("stage output {path}, line {line}: {reason}")]
    StageFile { path: PathBuf, line: usize, reason: String },
    #[error("missing input file {0}")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Independence(#[from] IndependenceError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Anything that assigns class probabilities to posts for one task.
pub trait StageClassifier {
    fn task(&self) -> Task;

    /// One probability row per item, in input order.
    fn classify(&self, items: &[&Post]) -> Result<Vec<Vec<f64>>, CascadeError>;
}

/// A trained model and its vocabulary.
#[derive(Debug, Clone)]
pub struct NeuralStage {
    pub bundle: ModelBundle,
    pub batch_size: usize,
}

impl NeuralStage {
    pub fn new(bundle: ModelBundle) -> Self {
        Self {
            bundle,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

impl StageClassifier for NeuralStage {
    fn task(&self) -> Task {
        self.bundle.task
    }

    fn classify(&self, items: &[&Post]) -> Result<Vec<Vec<f64>>, CascadeError> {
        let texts: Vec<&str> = items.iter().map(|p| p.text.as_str()).collect();
        self.bundle
            .classify_texts(&texts, self.batch_size)
            .map_err(|source| CascadeError::Model {
                stage: self.bundle.task,
                source,
            })
    }
}

/// Returns one-hot probabilities for fixture gold labels, so the cascade's
/// plumbing can be checked independently of model quality.
#[derive(Debug, Clone)]
pub struct PlantedOracle {
    pub task: Task,
    pub labels: HashMap<String, usize>,
}

#[derive(Deserialize)]
struct PlantedRecord {
    id: String,
    label: usize,
}

impl PlantedOracle {
    pub fn new(task: Task, labels: impl IntoIterator<Item = (String, usize)>) -> Self {
        Self {
            task,
            labels: labels.into_iter().collect(),
        }
    }

    /// Reads `{"id": ..., "label": ...}` JSON Lines.
    pub fn load(task: Task, path: &Path) -> Result<Self, CascadeError> {
        let file = std::fs::File::open(path).map_err(|_| CascadeError::MissingFile(path.to_path_buf()))?;
        let mut labels = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| CascadeError::Read {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| CascadeError::PlantedFile {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            let rec: PlantedRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if rec.label >= task.class_count() {
                return Err(bad(format!("label {} out of range for {task}", rec.label)));
            }
            if labels.insert(rec.id.clone(), rec.label).is_some() {
                return Err(bad(format!("duplicate id {:?}", rec.id)));
            }
        }
        Ok(Self { task, labels })
    }
}

impl StageClassifier for PlantedOracle {
    fn task(&self) -> Task {
        self.task
    }

    fn classify(&self, items: &[&Post]) -> Result<Vec<Vec<f64>>, CascadeError> {
        let k = self.task.class_count();
        items
            .iter()
            .map(|p| {
                let label = *self.labels.get(&p.id).ok_or_else(|| CascadeError::MissingLabel {
                    stage: self.task,
                    id: p.id.clone(),
                })?;
                let mut row = vec![0.0; k];
                row[label] = 1.0;
                Ok(row)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub item_id: String,
    pub stage: Task,
    pub predicted_class: usize,
    pub probabilities: Vec<f64>,
    /// Top-level post the item belongs to; absent for top-level posts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thread_id: Option<String>,
}

fn run_stage(
    stage: Task,
    classifier: &dyn StageClassifier,
    mut items: Vec<(&Post, Option<&str>)>,
) -> Result<Vec<StageResult>, CascadeError> {
    if classifier.task() != stage {
        return Err(CascadeError::TaskMismatch {
            stage,
            found: classifier.task(),
        });
    }
    items.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let posts: Vec<&Post> = items.iter().map(|(p, _)| *p).collect();
    let rows = if posts.is_empty() {
        Vec::new()
    } else {
        classifier.classify(&posts)?
    };
    if rows.len() != posts.len() {
        return Err(CascadeError::RowCount {
            stage,
            expected: posts.len(),
            found: rows.len(),
        });
    }
    Ok(items
        .into_iter()
        .zip(rows)
        .map(|((post, thread), probabilities)| StageResult {
            item_id: post.id.clone(),
            stage,
            predicted_class: argmax(&probabilities),
            probabilities,
            thread_id: thread.map(str::to_string),
        })
        .collect())
}

/// Classifies every top-level post. Results are sorted by item id.
pub fn stage1_veracity(corpus: &ThreadedCorpus, model: &dyn StageClassifier) -> Result<Vec<StageResult>, CascadeError> {
    run_stage(Task::Veracity, model, corpus.posts().map(|p| (p, None)).collect())
}

/// Splits stage-1 results into (fake, real) item ids.
pub fn partition(stage1: &[StageResult]) -> (Vec<&str>, Vec<&str>) {
    let (mut fake, mut real) = (Vec::new(), Vec::new());
    for r in stage1 {
        if r.predicted_class == FAKE {
            fake.push(r.item_id.as_str());
        } else {
            real.push(r.item_id.as_str());
        }
    }
    (fake, real)
}

/// Classifies the replies of every thread, on both veracity branches.
pub fn stage2_implication(
    corpus: &ThreadedCorpus,
    model: &dyn StageClassifier,
) -> Result<Vec<StageResult>, CascadeError> {
    let items = corpus
        .threads
        .iter()
        .flat_map(|t| t.replies.iter().map(move |r| (r, Some(t.post.id.as_str()))))
        .collect();
    run_stage(Task::Implication, model, items)
}

/// A reply selected for disorder analysis with the decisions that
/// selected it.
#[derive(Debug, Clone, Copy)]
pub struct Flagged<'a> {
    pub post: &'a Post,
    pub thread_id: &'a str,
    pub implication: usize,
    pub veracity: usize,
}

/// Replies whose predicted implication is indicative. Unless `widen` is
/// set, only replies on fake threads qualify.
pub fn flagged_replies<'a>(
    corpus: &'a ThreadedCorpus,
    stage1: &[StageResult],
    stage2: &[StageResult],
    widen: bool,
) -> Result<Vec<Flagged<'a>>, CascadeError> {
    let veracity: HashMap<&str, usize> = stage1.iter().map(|r| (r.item_id.as_str(), r.predicted_class)).collect();
    let implication: HashMap<&str, usize> =
        stage2.iter().map(|r| (r.item_id.as_str(), r.predicted_class)).collect();
    let mut out = Vec::new();
    for thread in &corpus.threads {
        let v = *veracity
            .get(thread.post.id.as_str())
            .ok_or_else(|| CascadeError::Untraceable {
                id: thread.post.id.clone(),
                thread: thread.post.id.clone(),
            })?;
        for reply in &thread.replies {
            let Some(&i) = implication.get(reply.id.as_str()) else {
                continue;
            };
            if i == INDICATIVE && (widen || v == FAKE) {
                out.push(Flagged {
                    post: reply,
                    thread_id: &thread.post.id,
                    implication: i,
                    veracity: v,
                });
            }
        }
    }
    Ok(out)
}

/// Assigns a disorder class to each flagged reply.
pub fn stage3_disorder(
    flagged: &[Flagged],
    model: &dyn StageClassifier,
    widen: bool,
) -> Result<Vec<StageResult>, CascadeError> {
    if let Some(f) = flagged
        .iter()
        .find(|f| f.implication != INDICATIVE || (!widen && f.veracity != FAKE))
    {
        return Err(CascadeError::NotFlagged { id: f.post.id.clone() });
    }
    let items = flagged
        .iter()
        .map(|f| (f.post, Some(f.thread_id)))
        .collect();
    run_stage(Task::Disorder, model, items)
}

pub const ROW_LABELS: [&str; 2] = ["fake", "real"];
pub const COL_LABELS: [&str; 3] = ["0", "1", "2"];

/// Cross-tabulates each reply's implication against its thread's veracity.
pub fn build_contingency(stage1: &[StageResult], stage2: &[StageResult]) -> Result<ContingencyTable, CascadeError> {
    let veracity: HashMap<&str, usize> = stage1.iter().map(|r| (r.item_id.as_str(), r.predicted_class)).collect();
    let mut observed = vec![vec![0u64; 3]; 2];
    for r in stage2 {
        let thread = r.thread_id.as_deref().unwrap_or_default();
        let v = *veracity.get(thread).ok_or_else(|| CascadeError::Untraceable {
            id: r.item_id.clone(),
            thread: thread.to_string(),
        })?;
        observed[v][r.predicted_class] += 1;
    }
    Ok(ContingencyTable::new(
        observed,
        ROW_LABELS.iter().map(|s| s.to_string()).collect(),
        COL_LABELS.iter().map(|s| s.to_string()).collect(),
    )?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedCounts {
    /// Records removed because their text was empty after cleaning.
    pub empty_after_cleaning: usize,
    /// Records rejected at load time (duplicate ids).
    pub rejected: usize,
    /// Replies whose parent chain never reaches a top-level post.
    pub orphan_replies: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencySummary {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub observed: Vec<Vec<u64>>,
    pub row_totals: Vec<u64>,
    pub col_totals: Vec<u64>,
    pub grand_total: u64,
}

impl From<&ContingencyTable> for ContingencySummary {
    fn from(t: &ContingencyTable) -> Self {
        Self {
            row_labels: t.row_labels().to_vec(),
            col_labels: t.col_labels().to_vec(),
            observed: t.observed().to_vec(),
            row_totals: t.row_totals(),
            col_totals: t.col_totals(),
            grand_total: t.grand_total(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub records_loaded: usize,
    pub posts_classified: usize,
    pub replies_classified: usize,
    pub posts_without_replies: usize,
    pub post_counts: BTreeMap<String, usize>,
    pub implication_counts_by_branch: BTreeMap<String, Vec<usize>>,
    pub stage3_scope: String,
    pub flagged_replies: usize,
    pub disorder_counts: BTreeMap<String, usize>,
    pub disorder_percentages: BTreeMap<String, f64>,
    pub contingency: ContingencySummary,
    pub dropped: DroppedCounts,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub independence: Option<ChiSquareResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub independence_refused: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub stage1: Vec<StageResult>,
    pub stage2: Vec<StageResult>,
    pub stage3: Vec<StageResult>,
    pub contingency: ContingencyTable,
    pub report: PipelineReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub alpha: f64,
    pub widen_stage3: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            widen_stage3: false,
        }
    }
}

/// Runs all stages over an already loaded corpus.
pub fn run_cascade(
    corpus: &crate::corpus::Corpus,
    models: [&dyn StageClassifier; 3],
    options: PipelineOptions,
) -> Result<PipelineOutput, CascadeError> {
    let threaded = link_replies(corpus);
    let stage1 = stage1_veracity(&threaded, models[0])?;
    let stage2 = stage2_implication(&threaded, models[1])?;
    let flagged = flagged_replies(&threaded, &stage1, &stage2, options.widen_stage3)?;
    let stage3 = stage3_disorder(&flagged, models[2], options.widen_stage3)?;
    let contingency = build_contingency(&stage1, &stage2)?;

    let count_classes = |results: &[StageResult], task: Task| -> BTreeMap<String, usize> {
        let schema = task.schema();
        let mut counts: BTreeMap<String, usize> = schema.names().iter().map(|n| (n.to_string(), 0)).collect();
        for r in results {
            *counts.get_mut(schema.class_name(r.predicted_class).unwrap_or("?")).unwrap() += 1;
        }
        counts
    };
    let disorder_counts = count_classes(&stage3, Task::Disorder);
    let disorder_percentages = disorder_counts
        .iter()
        .map(|(k, &v)| {
            let pct = if stage3.is_empty() { 0.0 } else { v as f64 / stage3.len() as f64 };
            (k.clone(), pct)
        })
        .collect();
    let implication_counts_by_branch = ROW_LABELS
        .iter()
        .zip(contingency.observed())
        .map(|(name, row)| (name.to_string(), row.iter().map(|&v| v as usize).collect()))
        .collect();
    let (independence, independence_refused) = match test_independence(&contingency, options.alpha) {
        Ok(r) => (Some(r), None),
        Err(e @ IndependenceError::ZeroMarginal { .. }) => (None, Some(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let report = PipelineReport {
        records_loaded: corpus.stats.records_read,
        posts_classified: stage1.len(),
        replies_classified: stage2.len(),
        posts_without_replies: threaded.threads.iter().filter(|t| t.replies.is_empty()).count(),
        post_counts: count_classes(&stage1, Task::Veracity),
        implication_counts_by_branch,
        stage3_scope: if options.widen_stage3 { "all_indicative" } else { "fake_indicative" }.to_string(),
        flagged_replies: flagged.len(),
        disorder_counts,
        disorder_percentages,
        contingency: ContingencySummary::from(&contingency),
        dropped: DroppedCounts {
            empty_after_cleaning: corpus.stats.dropped_empty.len(),
            rejected: corpus.stats.rejects.len(),
            orphan_replies: threaded.orphans.len(),
        },
        alpha: options.alpha,
        independence,
        independence_refused,
    };
    Ok(PipelineOutput {
        stage1,
        stage2,
        stage3,
        contingency,
        report,
    })
}

/// Where a stage's classifier comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Model(PathBuf),
    Planted { planted_labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestModels {
    pub veracity: ModelSource,
    pub implication: ModelSource,
    pub disorder: ModelSource,
}

/// Pipeline inputs. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub corpus: PathBuf,
    pub models: ManifestModels,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widen_stage3: Option<bool>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CascadeError> {
        let text = std::fs::read_to_string(path).map_err(|_| CascadeError::MissingFile(path.to_path_buf()))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| CascadeError::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut m.corpus);
        for src in [&mut m.models.veracity, &mut m.models.implication, &mut m.models.disorder] {
            match src {
                ModelSource::Model(p) => fix(p),
                ModelSource::Planted { planted_labels } => fix(planted_labels),
            }
        }
        if let Some(out) = m.out_dir.as_mut() {
            fix(out);
        }
        Ok(m)
    }
}

fn load_stage(task: Task, source: &ModelSource) -> Result<Box<dyn StageClassifier>, CascadeError> {
    match source {
        ModelSource::Planted { planted_labels } => Ok(Box::new(PlantedOracle::load(task, planted_labels)?)),
        ModelSource::Model(path) => {
            if !path.exists() {
                return Err(CascadeError::MissingFile(path.clone()));
            }
            let bundle = ModelBundle::load(path).map_err(|source| CascadeError::Model { stage: task, source })?;
            if bundle.task != task {
                return Err(CascadeError::TaskMismatch {
                    stage: task,
                    found: bundle.task,
                });
            }
            Ok(Box::new(NeuralStage::new(bundle)))
        }
    }
}

/// Loads every input named by the manifest and runs the cascade.
pub fn run_manifest(manifest: &Manifest, options: PipelineOptions) -> Result<PipelineOutput, CascadeError> {
    if !manifest.corpus.exists() {
        return Err(CascadeError::MissingFile(manifest.corpus.clone()));
    }
    let stages = [
        load_stage(Task::Veracity, &manifest.models.veracity)?,
        load_stage(Task::Implication, &manifest.models.implication)?,
        load_stage(Task::Disorder, &manifest.models.disorder)?,
    ];
    let corpus = load_corpus(&manifest.corpus, None)?;
    run_cascade(&corpus, [&*stages[0], &*stages[1], &*stages[2]], options)
}

pub const STAGE_FILES: [&str; 3] = ["stage1.jsonl", "stage2.jsonl", "stage3.jsonl"];

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> CascadeError + '_ {
    move |source| CascadeError::Write {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_stage(path: &Path, results: &[StageResult]) -> Result<(), CascadeError> {
    let err = write_err(path);
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(&err)?);
    for r in results {
        let line = serde_json::to_string(r).expect("stage result serialises");
        writeln!(w, "{line}").map_err(&err)?;
    }
    w.flush().map_err(&err)
}

pub fn read_stage(path: &Path) -> Result<Vec<StageResult>, CascadeError> {
    let file = std::fs::File::open(path).map_err(|_| CascadeError::MissingFile(path.to_path_buf()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CascadeError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CascadeError::StageFile {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

impl PipelineOutput {
    /// Writes the stage files, `contingency.csv`, and `report.json`.
    pub fn write(&self, dir: &Path) -> Result<(), CascadeError> {
        std::fs::create_dir_all(dir).map_err(write_err(dir))?;
        for (name, results) in STAGE_FILES.iter().zip([&self.stage1, &self.stage2, &self.stage3]) {
            write_stage(&dir.join(name), results)?;
        }
        let csv = dir.join("contingency.csv");
        std::fs::write(&csv, self.contingency.to_csv_string()).map_err(write_err(&csv))?;
        let report = dir.join("report.json");
        let json = serde_json::to_string_pretty(&self.report).expect("report serialises");
        std::fs::write(&report, json + "\n").map_err(write_err(&report))
    }
}

/// Rebuilds the contingency table from saved stage-1 and stage-2 outputs.
pub fn contingency_from_outputs(dir: &Path) -> Result<ContingencyTable, CascadeError> {
    let stage1 = read_stage(&dir.join(STAGE_FILES[0]))?;
    let stage2 = read_stage(&dir.join(STAGE_FILES[1]))?;
    build_contingency(&stage1, &stage2)
}
