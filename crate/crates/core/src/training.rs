//! Mini-batch training with Adam, per-epoch curves, and best-checkpoint
//! selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, CROSS_ENTROPY_CLAMP};
use crate::corpus::Post;
use crate::metrics::{self, ConfusionMatrix, MetricsBundle, MetricsError};
use crate::model::{argmax, Architecture, Batch, HybridClassifier, Mode, ModelError};
use crate::tokenizer::{TokenSequence, Vocab};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("item {id} has no label")]
    Unlabeled { id: String },
    #[error("item {id} has label {label} but the model has {classes} classes")]
    LabelMismatch { id: String, label: usize, classes: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("adam step count must start at 1")]
    ZeroStep,
    #[error("parameter/gradient shape mismatch at tensor {0}")]
    ShapeMismatch(usize),
    #[error("curve file: {0}")]
    Curves(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectOn {
    #[default]
    ValAccuracy,
    ValLoss,
}

impl std::str::FromStr for SelectOn {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "val_accuracy" => Ok(Self::ValAccuracy),
            "val_loss" => Ok(Self::ValLoss),
            other => Err(format!("unknown selection metric {other:?} (expected val_accuracy or val_loss)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub select_on: SelectOn,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 42,
            select_on: SelectOn::ValAccuracy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: String| Err(TrainingError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} {b} must lie strictly between 0 and 1"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps {} must be positive", self.adam_eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update at step `t` (1-based) with decoupled weight decay
/// applied before the moment step.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
    t: u64,
) -> Result<(), TrainingError> {
    if t == 0 {
        return Err(TrainingError::ZeroStep);
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainingError::ShapeMismatch(params.len().min(grads.len())));
    }
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() {
            return Err(TrainingError::ShapeMismatch(i));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            *w -= cfg.learning_rate * cfg.weight_decay * *w;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

pub const CURVE_HEADER: &str = "epoch,train_loss,val_loss,train_acc,val_acc";

/// Curve CSV. Floats use Rust's shortest round-trip formatting, so parsing
/// the file back reproduces the records exactly.
pub fn curves_to_csv(records: &[EpochRecord]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.train_accuracy, r.val_accuracy
        ));
    }
    out
}

pub fn curves_from_csv(text: &str) -> Result<Vec<EpochRecord>, TrainingError> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(TrainingError::Curves(format!("header must be {CURVE_HEADER:?}")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || TrainingError::Curves(format!("row {}: {line:?}", i + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(f[1])?,
                val_loss: num(f[2])?,
                train_accuracy: num(f[3])?,
                val_accuracy: num(f[4])?,
            })
        })
        .collect()
}

/// Encoded inputs with their gold labels.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub ids: Vec<String>,
    pub sequences: Vec<TokenSequence>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn encode(posts: &[Post], vocab: &Vocab, max_len: usize, classes: usize) -> Result<Self, TrainingError> {
        let mut set = Self {
            ids: Vec::with_capacity(posts.len()),
            sequences: Vec::with_capacity(posts.len()),
            labels: Vec::with_capacity(posts.len()),
        };
        for p in posts {
            let label = p.gold_label.ok_or_else(|| TrainingError::Unlabeled { id: p.id.clone() })?;
            if label >= classes {
                return Err(TrainingError::LabelMismatch {
                    id: p.id.clone(),
                    label,
                    classes,
                });
            }
            set.ids.push(p.id.clone());
            set.sequences.push(vocab.encode(&p.text, max_len).map_err(ModelError::from)?);
            set.labels.push(label);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Eval-mode probabilities for every item, computed in fixed batch order.
pub fn predict_probabilities(
    model: &HybridClassifier,
    seqs: &[TokenSequence],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>, TrainingError> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(batch_size.max(1)) {
        let probs = model.classify(chunk, Mode::Eval)?;
        out.extend(probs.rows().map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Mean cross-entropy and accuracy of eval-mode predictions.
fn loss_and_accuracy(
    model: &HybridClassifier,
    set: &LabeledSet,
    batch_size: usize,
) -> Result<(f64, f64), TrainingError> {
    let probs = predict_probabilities(model, &set.sequences, batch_size)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (row, &label) in probs.iter().zip(&set.labels) {
        loss -= row[label].max(CROSS_ENTROPY_CLAMP).ln();
        correct += usize::from(argmax(row) == label);
    }
    let n = set.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: HybridClassifier,
    pub best_epoch: usize,
    pub records: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn best_record(&self) -> &EpochRecord {
        &self.records[self.best_epoch - 1]
    }
}

fn improves(select_on: SelectOn, new: &EpochRecord, best: &EpochRecord) -> bool {
    match select_on {
        SelectOn::ValAccuracy => {
            new.val_accuracy > best.val_accuracy
                || (new.val_accuracy == best.val_accuracy && new.val_loss < best.val_loss)
        }
        SelectOn::ValLoss => {
            new.val_loss < best.val_loss
                || (new.val_loss == best.val_loss && new.val_accuracy > best.val_accuracy)
        }
    }
}

/// Trains `model` on `train` and keeps the parameters of the epoch that is
/// best on `val` under `config.select_on`. Deterministic for a given seed.
pub fn train(
    mut model: HybridClassifier,
    train: &LabeledSet,
    val: &LabeledSet,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainingError> {
    train_with_observer(&mut model, train, val, config, |_| {}).map(|(best, best_epoch, records)| TrainOutcome {
        model: best,
        best_epoch,
        records,
    })
}

/// [`train`] with a callback after every epoch.
pub fn train_with_observer(
    model: &mut HybridClassifier,
    train: &LabeledSet,
    val: &LabeledSet,
    config: &TrainConfig,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<(HybridClassifier, usize, Vec<EpochRecord>), TrainingError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainingError::EmptyDataset("training"));
    }
    if val.is_empty() {
        return Err(TrainingError::EmptyDataset("validation"));
    }
    let classes = model.classes();
    for (set, labels) in [(train, &train.labels), (val, &val.labels)] {
        if let Some(i) = labels.iter().position(|&l| l >= classes) {
            return Err(TrainingError::LabelMismatch {
                id: set.ids[i].clone(),
                label: labels[i],
                classes,
            });
        }
    }
    let vocab_size = model.architecture().encoder.vocab_size;
    let adam = config.adam();
    let mut state = AdamState::new(model.params().tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step: u64 = 0;
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(HybridClassifier, usize)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let seqs: Vec<TokenSequence> = chunk.iter().map(|&i| train.sequences[i].clone()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let batch = Batch::from_sequences(&seqs, vocab_size, true)?;
            let mut graph = Graph::new();
            let vars = model.params().bind(&mut graph);
            let probs = model.forward(
                &mut graph,
                &vars,
                &batch,
                Mode::Train {
                    seed: config.seed,
                    step,
                },
            )?;
            let loss = graph.cross_entropy(probs, &targets)?;
            graph.backward(loss)?;
            let mut grads = model.params().grads(&graph, &vars);
            clip_global_norm(&mut grads, config.clip_norm);
            step += 1;
            adam_step(model.params_mut().tensors_mut(), &grads, &mut state, &adam, step)?;
        }
        let (train_loss, train_accuracy) = loss_and_accuracy(model, train, config.batch_size)?;
        let (val_loss, val_accuracy) = loss_and_accuracy(model, val, config.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            train_accuracy,
            val_accuracy,
        };
        observe(&record);
        let better = match &best {
            None => true,
            Some((_, e)) => improves(config.select_on, &record, &records[*e - 1]),
        };
        if better {
            best = Some((model.clone(), epoch));
        }
        records.push(record);
    }
    let (best_model, best_epoch) = best.expect("at least one epoch");
    Ok((best_model, best_epoch, records))
}

/// Eval-mode predictions with their metrics and confusion matrix.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsBundle,
}

pub fn evaluate(model: &HybridClassifier, set: &LabeledSet, batch_size: usize) -> Result<Evaluation, TrainingError> {
    if set.is_empty() {
        return Err(TrainingError::EmptyDataset("evaluation"));
    }
    let probabilities = predict_probabilities(model, &set.sequences, batch_size)?;
    let predictions: Vec<usize> = probabilities.iter().map(|r| argmax(r)).collect();
    let confusion = metrics::confusion_matrix(&set.labels, &predictions, model.classes())?;
    let metrics = metrics::bundle(&confusion)?;
    Ok(Evaluation {
        predictions,
        probabilities,
        confusion,
        metrics,
    })
}

/// Training summary written next to the curve file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub task: String,
    pub config: TrainConfig,
    pub architecture: Architecture,
    pub parameter_count: usize,
    pub train_items: usize,
    pub val_items: usize,
    pub best_epoch: usize,
    pub best: EpochRecord,
    #[serde(rename = "final")]
    pub last: EpochRecord,
}

impl TrainSummary {
    pub fn new(task: &str, config: &TrainConfig, outcome: &TrainOutcome, train_items: usize, val_items: usize) -> Self {
        Self {
            task: task.to_string(),
            config: *config,
            architecture: *outcome.model.architecture(),
            parameter_count: outcome.model.parameter_count(),
            train_items,
            val_items,
            best_epoch: outcome.best_epoch,
            best: *outcome.best_record(),
            last: *outcome.records.last().expect("at least one epoch"),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainingError> {
        let json = serde_json::to_string_pretty(self).expect("summary serialises");
        std::fs::write(path, json + "\n")?;
        Ok(())
    }
}
