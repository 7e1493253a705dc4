//! Post and reply corpora in a Reddit-export-compatible JSON Lines format.
//!
//! One object per line with keys `id`, `text`, and optional `parent_id`,
//! `label`, `source` and `created_utc`. Unknown keys are ignored.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: not a JSON Lines corpus (first record is not a JSON object)")]
    NotJsonLines { line: usize },
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: label out of range: {label} for {task} ({classes} classes)")]
    LabelOutOfRange {
        line: usize,
        label: i64,
        task: Task,
        classes: usize,
    },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("stratification impossible: class {class} has {count} items, need at least 3")]
    StratificationImpossible { class: String, count: usize },
    #[error("empty corpus")]
    Empty,
}

/// The three classification tasks of the cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Veracity,
    Implication,
    Disorder,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Veracity, Task::Implication, Task::Disorder];

    pub fn name(self) -> &'static str {
        match self {
            Task::Veracity => "veracity",
            Task::Implication => "implication",
            Task::Disorder => "disorder",
        }
    }

    pub fn class_count(self) -> usize {
        self.schema().len()
    }

    pub fn schema(self) -> LabelSchema {
        LabelSchema::for_task(self)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "veracity" => Ok(Task::Veracity),
            "implication" => Ok(Task::Implication),
            "disorder" => Ok(Task::Disorder),
            other => Err(format!(
                "unknown task {other:?} (expected veracity, implication or disorder)"
            )),
        }
    }
}

/// Ordered class names for a task; a class's index is its label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSchema {
    pub task: Task,
    pub classes: Vec<(usize, &'static str)>,
}

const VERACITY: [&str; 2] = ["fake", "real"];
const IMPLICATION: [&str; 3] = ["none", "mention", "indicative"];
const DISORDER: [&str; 6] = [
    "anxiety",
    "bpd",
    "bipolar",
    "depression",
    "schizophrenia",
    "other",
];

impl LabelSchema {
    pub fn for_task(task: Task) -> Self {
        let names: &[&'static str] = match task {
            Task::Veracity => &VERACITY,
            Task::Implication => &IMPLICATION,
            Task::Disorder => &DISORDER,
        };
        Self {
            task,
            classes: names.iter().copied().enumerate().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_name(&self, index: usize) -> Option<&'static str> {
        self.classes.get(index).map(|(_, n)| *n)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.classes.iter().map(|(_, n)| *n).collect()
    }
}

/// A post or reply. Replies carry a `parent_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(rename = "label", default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<usize>,
    #[serde(rename = "created_utc", default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
}

impl Post {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            source: None,
            parent_id: None,
            gold_label: None,
            timestamp: None,
        }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.gold_label = Some(label);
        self
    }

    pub fn with_parent(mut self, parent: impl Into<String>) -> Self {
        self.parent_id = Some(parent.into());
        self
    }

    pub fn is_reply(&self) -> bool {
        self.parent_id.is_some()
    }
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: Option<serde_json::Value>,
    text: Option<serde_json::Value>,
    #[serde(default)]
    parent_id: Option<String>,
    #[serde(default)]
    label: Option<i64>,
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    created_utc: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    LabelOutOfRange,
    DuplicateId,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::LabelOutOfRange => "label out of range",
            RejectReason::DuplicateId => "duplicate id",
        })
    }
}

/// A record that parsed but was excluded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: usize,
    pub id: String,
    pub reason: RejectReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    pub records_read: usize,
    pub accepted: usize,
    pub rejects: Vec<Reject>,
    /// Line numbers of records whose text was empty after cleaning.
    pub dropped_empty: Vec<usize>,
}

/// A loaded, cleaned corpus plus ingestion provenance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub posts: Vec<Post>,
    pub stats: LoadStats,
    pub task: Option<Task>,
}

impl Corpus {
    pub fn from_posts(posts: Vec<Post>) -> Self {
        let stats = LoadStats {
            records_read: posts.len(),
            accepted: posts.len(),
            ..LoadStats::default()
        };
        Self {
            posts,
            stats,
            task: None,
        }
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    /// Count of items per gold label; unlabeled items are skipped.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for p in &self.posts {
            if let Some(l) = p.gold_label {
                *counts.entry(l).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Converts the first reject, if any, into an error.
    pub fn ensure_no_rejects(&self) -> Result<(), CorpusError> {
        match self.stats.rejects.first() {
            None => Ok(()),
            Some(r) => Err(match r.reason {
                RejectReason::DuplicateId => CorpusError::DuplicateId {
                    line: r.line,
                    id: r.id.clone(),
                },
                RejectReason::LabelOutOfRange => {
                    let task = self.task.unwrap_or(Task::Veracity);
                    CorpusError::LabelOutOfRange {
                        line: r.line,
                        label: r.label.unwrap_or_default(),
                        task,
                        classes: task.class_count(),
                    }
                }
            }),
        }
    }
}

fn is_url(token: &str) -> bool {
    let lower = token.to_lowercase();
    lower.starts_with("http://") || lower.starts_with("https://") || lower.starts_with("www.")
}

fn is_mention(token: &str) -> bool {
    let lower = token.to_lowercase();
    lower.starts_with("u/") || lower.starts_with("/u/") || lower.starts_with('@')
}

/// Normalises raw post text.
///
/// Rules, in order: NFC normalisation, URL removal, user-mention removal
/// (tokens starting `u/` or `@`), control-character removal, lowercasing,
/// whitespace collapse and trimming. URL and mention tests look at a token
/// with its control characters already stripped, so a control character
/// can never hide a mention from the first pass. Total and idempotent.
pub fn clean_text(raw: &str) -> String {
    let normalized: String = raw.nfc().collect();
    let mut kept = Vec::new();
    for token in normalized.split_whitespace() {
        let visible: String = token.chars().filter(|c| !c.is_control()).collect();
        if visible.is_empty() || is_url(&visible) || is_mention(&visible) {
            continue;
        }
        let lowered: String = visible.to_lowercase().nfc().collect();
        kept.extend(lowered.split_whitespace().map(str::to_owned));
    }
    kept.join(" ")
}

/// Parses a JSON Lines corpus from any reader. Text is cleaned on the way
/// in; records whose cleaned text is empty are dropped and counted.
pub fn parse_corpus(reader: impl BufRead, schema: Option<&LabelSchema>) -> Result<Corpus, CorpusError> {
    let mut corpus = Corpus {
        task: schema.map(|s| s.task),
        ..Corpus::default()
    };
    let mut seen = HashSet::new();
    let mut first_record = true;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(trimmed) {
            Ok(v @ serde_json::Value::Object(_)) => v,
            Ok(_) | Err(_) if first_record => return Err(CorpusError::NotJsonLines { line: line_no }),
            Ok(_) => {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    reason: "record is not a JSON object".into(),
                })
            }
            Err(e) => {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    reason: e.to_string(),
                })
            }
        };
        first_record = false;
        corpus.stats.records_read += 1;
        let raw: RawRecord = serde_json::from_value(value).map_err(|e| CorpusError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
        let malformed = |reason: &str| CorpusError::Malformed {
            line: line_no,
            reason: reason.to_string(),
        };
        let id = match raw.id {
            Some(serde_json::Value::String(s)) if !s.is_empty() => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            Some(serde_json::Value::String(_)) => return Err(malformed("empty id")),
            Some(_) => return Err(malformed("id must be a string")),
            None => return Err(malformed("missing id")),
        };
        let text = match raw.text {
            Some(serde_json::Value::String(s)) => s,
            Some(_) => return Err(malformed("text must be a string")),
            None => return Err(malformed("missing text")),
        };
        if raw.parent_id.as_deref() == Some(id.as_str()) {
            return Err(malformed("parent_id equals id"));
        }
        let gold_label = match (raw.label, schema) {
            (None, _) => None,
            (Some(l), Some(s)) if l < 0 || l as usize >= s.len() => {
                corpus.stats.rejects.push(Reject {
                    line: line_no,
                    id,
                    reason: RejectReason::LabelOutOfRange,
                    label: Some(l),
                });
                continue;
            }
            (Some(l), _) if l < 0 => return Err(malformed("negative label")),
            (Some(l), _) => Some(l as usize),
        };
        if !seen.insert(id.clone()) {
            corpus.stats.rejects.push(Reject {
                line: line_no,
                id,
                reason: RejectReason::DuplicateId,
                label: raw.label,
            });
            continue;
        }
        let cleaned = clean_text(&text);
        if cleaned.is_empty() {
            corpus.stats.dropped_empty.push(line_no);
            continue;
        }
        corpus.posts.push(Post {
            id,
            text: cleaned,
            source: raw.source,
            parent_id: raw.parent_id,
            gold_label,
            timestamp: raw.created_utc,
        });
    }
    corpus.stats.accepted = corpus.posts.len();
    Ok(corpus)
}

/// Loads a JSON Lines corpus file. When `schema` is given, labels are
/// validated against it.
pub fn load_corpus(path: &Path, schema: Option<&LabelSchema>) -> Result<Corpus, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus(BufReader::new(file), schema)
}

pub fn write_jsonl<'a>(path: &Path, posts: impl IntoIterator<Item = &'a Post>) -> Result<(), CorpusError> {
    let wrap = |source| CorpusError::Write {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(wrap)?);
    for p in posts {
        let line = serde_json::to_string(p).expect("post serialises");
        writeln!(w, "{line}").map_err(wrap)?;
    }
    w.flush().map_err(wrap)
}

/// A top-level post with the replies that resolve to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Thread {
    pub post: Post,
    pub replies: Vec<Post>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ThreadedCorpus {
    pub threads: Vec<Thread>,
    /// Replies whose parent chain never reaches a loaded top-level post.
    pub orphans: Vec<Post>,
}

impl ThreadedCorpus {
    pub fn reply_count(&self) -> usize {
        self.threads.iter().map(|t| t.replies.len()).sum()
    }

    pub fn posts(&self) -> impl Iterator<Item = &Post> {
        self.threads.iter().map(|t| &t.post)
    }
}

/// Attaches each reply to the top-level post at the root of its parent
/// chain. Nested replies attach to the thread root; replies whose chain is
/// broken or cyclic become orphans.
pub fn link_replies(corpus: &Corpus) -> ThreadedCorpus {
    let by_id: HashMap<&str, &Post> = corpus.posts.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut threaded = ThreadedCorpus::default();
    for p in corpus.posts.iter().filter(|p| !p.is_reply()) {
        slot.insert(p.id.as_str(), threaded.threads.len());
        threaded.threads.push(Thread {
            post: p.clone(),
            replies: Vec::new(),
        });
    }
    for reply in corpus.posts.iter().filter(|p| p.is_reply()) {
        let mut current = reply;
        let mut hops = 0;
        let root = loop {
            match current.parent_id.as_deref() {
                None => break Some(current.id.as_str()),
                Some(parent) => match by_id.get(parent) {
                    Some(next) if hops <= corpus.posts.len() => {
                        current = next;
                        hops += 1;
                    }
                    _ => break None,
                },
            }
        };
        match root.and_then(|r| slot.get(r)) {
            Some(&i) => threaded.threads[i].replies.push(reply.clone()),
            None => threaded.orphans.push(reply.clone()),
        }
    }
    threaded
}

/// Train/validation/test fractions plus the shuffling seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64, stratified: bool) -> Result<Self, CorpusError> {
        for (name, f) in [("train", train), ("val", val), ("test", test)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(CorpusError::InvalidSplit(format!(
                    "{name} fraction {f} must lie strictly between 0 and 1"
                )));
            }
        }
        if (train + val + test - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidSplit(format!(
                "fractions sum to {}, not 1",
                train + val + test
            )));
        }
        Ok(Self {
            train_fraction: train,
            val_fraction: val,
            test_fraction: test,
            seed,
            stratified,
        })
    }

    /// 80:10:10, stratified.
    pub fn standard(seed: u64) -> Self {
        Self::new(0.8, 0.1, 0.1, seed, true).expect("valid fractions")
    }

    /// `(train, val, test)` sizes for `n` items: val and test are floored,
    /// train takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let val = floor_fraction(n, self.val_fraction);
        let test = floor_fraction(n, self.test_fraction);
        (n - val - test, val, test)
    }
}

fn floor_fraction(n: usize, f: f64) -> usize {
    (n as f64 * f + 1e-9).floor() as usize
}

/// Indices into the source corpus, each sorted ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSets {
    pub train: Vec<Post>,
    pub val: Vec<Post>,
    pub test: Vec<Post>,
    pub indices: SplitIndices,
}

/// Summary written alongside split files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub seed: u64,
    pub stratified: bool,
    pub fractions: [f64; 3],
    pub total: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Per-split class counts keyed by label (`"unlabeled"` for none).
    pub class_counts: BTreeMap<String, [usize; 3]>,
}

/// Largest-remainder apportionment of `target` items across strata,
/// respecting per-stratum capacity. Strata are rounded up in ascending
/// `priority` order; any shortfall left after that spills into spare
/// capacity in the same order.
fn apportion(ideal: &[f64], capacity: &[usize], target: usize, priority: &[f64]) -> Vec<usize> {
    let mut quota: Vec<usize> = ideal
        .iter()
        .zip(capacity)
        .map(|(x, &cap)| ((x + 1e-9).floor() as usize).min(cap))
        .collect();
    let mut assigned: usize = quota.iter().sum();
    let mut order: Vec<usize> = (0..ideal.len()).collect();
    order.sort_by(|&a, &b| priority[a].total_cmp(&priority[b]).then(a.cmp(&b)));
    for &c in &order {
        if assigned >= target {
            break;
        }
        if quota[c] < capacity[c] && ideal[c] - quota[c] as f64 > 1e-9 {
            quota[c] += 1;
            assigned += 1;
        }
    }
    while assigned < target {
        let before = assigned;
        for &c in &order {
            if assigned < target && quota[c] < capacity[c] {
                quota[c] += 1;
                assigned += 1;
            }
        }
        if assigned == before {
            break;
        }
    }
    quota
}

/// Deterministic split of `posts` under `spec`.
///
/// Unstratified: one seeded shuffle; the first `val` items go to
/// validation, the next `test` to test, the rest to train. Stratified: the
/// validation and test sizes are apportioned across gold-label strata with
/// largest remainders, then each stratum is shuffled and dealt out the same
/// way. Every split lists its items in corpus order.
pub fn split(posts: &[Post], spec: &SplitSpec) -> Result<SplitSets, CorpusError> {
    if posts.is_empty() {
        return Err(CorpusError::Empty);
    }
    let n = posts.len();
    let (_, n_val, n_test) = spec.sizes(n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut indices = SplitIndices::default();

    if spec.stratified {
        let mut strata: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
        for (i, p) in posts.iter().enumerate() {
            strata.entry(p.gold_label).or_default().push(i);
        }
        for (label, members) in &strata {
            if members.len() < 3 {
                return Err(CorpusError::StratificationImpossible {
                    class: label.map_or("unlabeled".into(), |l| l.to_string()),
                    count: members.len(),
                });
            }
        }
        let sizes: Vec<usize> = strata.values().map(Vec::len).collect();
        let ideal_val: Vec<f64> = sizes.iter().map(|&s| s as f64 * spec.val_fraction).collect();
        let frac_priority: Vec<f64> = ideal_val.iter().map(|x| -(x - x.floor())).collect();
        let val_q = apportion(&ideal_val, &sizes, n_val, &frac_priority);

        // Favour test round-ups where the class would otherwise leave train
        // furthest above its ideal share.
        let ideal_test: Vec<f64> = sizes.iter().map(|&s| s as f64 * spec.test_fraction).collect();
        let spare: Vec<usize> = sizes.iter().zip(&val_q).map(|(s, v)| s - v).collect();
        let test_priority: Vec<f64> = (0..sizes.len())
            .map(|c| (val_q[c] as f64 - ideal_val[c]) + (ideal_test[c].floor() - ideal_test[c]))
            .collect();
        let test_q = apportion(&ideal_test, &spare, n_test, &test_priority);

        for (c, members) in strata.values().enumerate() {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            indices.val.extend_from_slice(&members[..val_q[c]]);
            indices.test.extend_from_slice(&members[val_q[c]..val_q[c] + test_q[c]]);
            indices.train.extend_from_slice(&members[val_q[c] + test_q[c]..]);
        }
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        indices.val = order[..n_val].to_vec();
        indices.test = order[n_val..n_val + n_test].to_vec();
        indices.train = order[n_val + n_test..].to_vec();
    }
    indices.train.sort_unstable();
    indices.val.sort_unstable();
    indices.test.sort_unstable();
    let pick = |ix: &[usize]| ix.iter().map(|&i| posts[i].clone()).collect::<Vec<_>>();
    Ok(SplitSets {
        train: pick(&indices.train),
        val: pick(&indices.val),
        test: pick(&indices.test),
        indices,
    })
}

impl SplitSets {
    pub fn summary(&self, spec: &SplitSpec) -> SplitSummary {
        let mut class_counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
        for (slot, set) in [&self.train, &self.val, &self.test].into_iter().enumerate() {
            for p in set {
                let key = p.gold_label.map_or("unlabeled".into(), |l| l.to_string());
                class_counts.entry(key).or_default()[slot] += 1;
            }
        }
        SplitSummary {
            seed: spec.seed,
            stratified: spec.stratified,
            fractions: [spec.train_fraction, spec.val_fraction, spec.test_fraction],
            total: self.train.len() + self.val.len() + self.test.len(),
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
            class_counts,
        }
    }

    /// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and
    /// `split_summary.json` into `dir`.
    pub fn write(&self, dir: &Path, spec: &SplitSpec) -> Result<SplitSummary, CorpusError> {
        std::fs::create_dir_all(dir).map_err(|source| CorpusError::Write {
            path: dir.to_path_buf(),
            source,
        })?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("val.jsonl"), &self.val)?;
        write_jsonl(&dir.join("test.jsonl"), &self.test)?;
        let summary = self.summary(spec);
        let path = dir.join("split_summary.json");
        let json = serde_json::to_string_pretty(&summary).expect("summary serialises");
        std::fs::write(&path, json + "\n").map_err(|source| CorpusError::Write { path, source })?;
        Ok(summary)
    }
}
