//! Deterministic fixture generators: planted-keyword corpora for training
//! and a threaded corpus with planted labels at every cascade stage.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{CorpusError, Post, Task};

/// Neutral words used to pad planted texts. None of them is a class name.
pub const FILLER: [&str; 40] = [
    "about", "after", "again", "almost", "along", "around", "because", "before", "between", "board",
    "bring", "city", "clear", "could", "during", "early", "every", "family", "friend", "garden",
    "group", "house", "large", "later", "little", "morning", "never", "often", "over", "paper",
    "people", "place", "quite", "river", "second", "share", "short", "still", "table", "window",
];

fn filler_text(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<&'static str> {
    let n = rng.random_range(min..=max);
    (0..n).map(|_| FILLER[rng.random_range(0..FILLER.len())]).collect()
}

/// `n` posts whose class is marked by a single keyword (the class name)
/// inserted among random filler words. Labels cycle through the classes so
/// every class is equally represented.
pub fn planted_keyword_corpus(task: Task, n: usize, seed: u64) -> Vec<Post> {
    let schema = task.schema();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % schema.len();
            let mut words = filler_text(&mut rng, 5, 12);
            let at = rng.random_range(0..=words.len());
            words.insert(at, schema.class_name(label).expect("label in schema"));
            Post::new(format!("{}-{i:04}", task.name()), words.join(" ")).with_label(label)
        })
        .collect()
}

/// Planted label counts for a cascade fixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlantSpec {
    pub fake_posts: usize,
    pub real_posts: usize,
    /// Implication class counts of replies under fake posts.
    pub fake_implication: [usize; 3],
    /// Implication class counts of replies under real posts.
    pub real_implication: [usize; 3],
    /// Disorder class counts of fake-branch class-2 replies; must sum to
    /// `fake_implication[2]`.
    pub disorder: [usize; 6],
    /// Replies whose parent is absent from the corpus.
    pub orphans: usize,
    /// Records that are empty after cleaning.
    pub empty: usize,
    /// Top-level posts with no replies, counted inside the post totals.
    pub childless: usize,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            fake_posts: 60,
            real_posts: 40,
            fake_implication: [60, 40, 100],
            real_implication: [50, 30, 20],
            disorder: [35, 38, 2, 22, 1, 2],
            orphans: 3,
            empty: 2,
            childless: 5,
        }
    }
}

/// A threaded corpus with the gold label of every item at every stage.
#[derive(Debug, Clone)]
pub struct PipelineFixture {
    pub spec: PlantSpec,
    pub posts: Vec<Post>,
    pub veracity: BTreeMap<String, usize>,
    pub implication: BTreeMap<String, usize>,
    pub disorder: BTreeMap<String, usize>,
}

fn expand(counts: &[usize]) -> Vec<usize> {
    counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect()
}

impl PipelineFixture {
    pub fn generate(spec: PlantSpec, seed: u64) -> Self {
        assert_eq!(
            spec.disorder.iter().sum::<usize>(),
            spec.fake_implication[2],
            "disorder counts must cover every flagged fake-branch reply"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fx = Self {
            spec: spec.clone(),
            posts: Vec::new(),
            veracity: BTreeMap::new(),
            implication: BTreeMap::new(),
            disorder: BTreeMap::new(),
        };
        let mut roots: [Vec<String>; 2] = [Vec::new(), Vec::new()];
        for (i, label) in expand(&[spec.fake_posts, spec.real_posts]).into_iter().enumerate() {
            let id = format!("p{i:04}");
            fx.posts.push(Post::new(&id, filler_text(&mut rng, 4, 10).join(" ")));
            fx.veracity.insert(id.clone(), label);
            roots[label].push(id);
        }
        // The last `childless` roots of the larger branch receive no replies.
        let mut parents = roots.clone();
        let larger = usize::from(parents[1].len() > parents[0].len());
        let keep = parents[larger].len().saturating_sub(spec.childless).max(1);
        parents[larger].truncate(keep);

        let mut disorder_labels = expand(&spec.disorder);
        disorder_labels.shuffle(&mut rng);
        let mut next_reply = 0usize;
        for (branch, counts) in [spec.fake_implication, spec.real_implication].iter().enumerate() {
            let mut labels = expand(counts);
            labels.shuffle(&mut rng);
            let mut branch_replies: Vec<String> = Vec::new();
            let pool = &parents[branch];
            for (k, label) in labels.into_iter().enumerate() {
                let id = format!("r{next_reply:05}");
                next_reply += 1;
                // Every remaining root gets a direct reply first; after that
                // about a third of replies answer an earlier reply.
                let parent = if k < pool.len() {
                    pool[k].clone()
                } else if rng.random_bool(0.3) {
                    branch_replies[rng.random_range(0..branch_replies.len())].clone()
                } else {
                    pool[rng.random_range(0..pool.len())].clone()
                };
                fx.posts
                    .push(Post::new(&id, filler_text(&mut rng, 3, 9).join(" ")).with_parent(parent));
                fx.implication.insert(id.clone(), label);
                if branch == 0 && label == 2 {
                    fx.disorder.insert(id.clone(), disorder_labels.pop().expect("enough disorder labels"));
                }
                branch_replies.push(id);
            }
        }
        for i in 0..spec.orphans {
            fx.posts.push(
                Post::new(format!("o{i:03}"), filler_text(&mut rng, 3, 6).join(" "))
                    .with_parent(format!("missing{i:03}")),
            );
        }
        for i in 0..spec.empty {
            fx.posts.push(Post::new(format!("e{i:03}"), "https://example.com/x @someone"));
        }
        fx.posts.shuffle(&mut rng);
        fx
    }

    /// Writes `corpus.jsonl` and one `{"id","label"}` file per stage.
    pub fn write(&self, dir: &Path) -> Result<(), CorpusError> {
        crate::corpus::write_jsonl(&dir.join("corpus.jsonl"), &self.posts)?;
        for (name, labels) in [
            ("veracity_labels.jsonl", &self.veracity),
            ("implication_labels.jsonl", &self.implication),
            ("disorder_labels.jsonl", &self.disorder),
        ] {
            let path = dir.join(name);
            let wrap = |source| CorpusError::Write {
                path: path.clone(),
                source,
            };
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(wrap)?);
            for (id, label) in labels {
                writeln!(f, "{}", serde_json::json!({"id": id, "label": label})).map_err(wrap)?;
            }
            f.flush().map_err(wrap)?;
        }
        Ok(())
    }
}
