use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint};
use crate::corpus::Task;
use crate::tokenizer::{TokenSequence, Vocab};

use super::{Architecture, HybridClassifier, Mode, ModelError};

pub const BUNDLE_FORMAT: &str = "infocascade-model/1";

/// JSON sidecar describing a saved model. File references are relative to
/// the sidecar's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub task: Task,
    pub architecture: Architecture,
    pub checkpoint: String,
    pub vocab: String,
}

/// A trained classifier with the vocabulary used to encode its inputs.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub task: Task,
    pub model: HybridClassifier,
    pub vocab: Vocab,
}

fn file_err(path: &Path, reason: impl ToString) -> ModelError {
    ModelError::File {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

impl ModelBundle {
    pub fn new(task: Task, model: HybridClassifier, vocab: Vocab) -> Result<Self, ModelError> {
        if model.classes() != task.class_count() {
            return Err(ModelError::Config(format!(
                "task {task} has {} classes but the model has {}",
                task.class_count(),
                model.classes()
            )));
        }
        if vocab.len() != model.architecture().encoder.vocab_size {
            return Err(ModelError::Config(format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                model.architecture().encoder.vocab_size
            )));
        }
        Ok(Self { task, model, vocab })
    }

    pub fn max_len(&self) -> usize {
        self.model.architecture().encoder.max_len
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence, ModelError> {
        Ok(self.vocab.encode(text, self.max_len())?)
    }

    /// Eval-mode probabilities for raw texts, computed in batches.
    pub fn classify_texts(&self, texts: &[&str], batch_size: usize) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(batch_size.max(1)) {
            let seqs = chunk
                .iter()
                .map(|t| self.encode(t))
                .collect::<Result<Vec<_>, _>>()?;
            let probs = self.model.classify(&seqs, Mode::Eval)?;
            out.extend(probs.rows().map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Writes `<path>` (the sidecar), `<stem>.bin`, and `<stem>.vocab.json`.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| file_err(path, "model path needs a file name"))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let sidecar = ModelFile {
            format: BUNDLE_FORMAT.to_string(),
            task: self.task,
            architecture: *self.model.architecture(),
            checkpoint: format!("{stem}.bin"),
            vocab: format!("{stem}.vocab.json"),
        };
        save_checkpoint(self.model.params(), &dir.join(&sidecar.checkpoint))?;
        self.vocab.save(&dir.join(&sidecar.vocab))?;
        let json = serde_json::to_string_pretty(&sidecar).map_err(|e| file_err(path, e))?;
        std::fs::write(path, json + "\n").map_err(|e| file_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
        let sidecar: ModelFile = serde_json::from_str(&text).map_err(|e| file_err(path, e))?;
        if sidecar.format != BUNDLE_FORMAT {
            return Err(file_err(path, format!("unknown format {:?}", sidecar.format)));
        }
        let dir = path.parent().unwrap_or(Path::new(""));
        let resolve = |f: &str| -> PathBuf { dir.join(f) };
        let params = load_checkpoint(&resolve(&sidecar.checkpoint))?;
        let vocab = Vocab::load(&resolve(&sidecar.vocab))?;
        let model = HybridClassifier::from_params(sidecar.architecture, params)?;
        Self::new(sidecar.task, model, vocab)
    }
}
