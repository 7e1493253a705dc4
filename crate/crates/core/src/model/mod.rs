//! Hybrid text classifier: token and position embeddings, pre-norm
//! transformer encoder blocks, an LSTM over all positions, dropout, and a
//! linear softmax head.

mod config;
mod forward;
mod io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamSet, Tensor, Var};
use crate::tokenizer::{TokenSequence, TokenizerError};

pub use config::{Architecture, EncoderConfig, LstmConfig};
pub use forward::{
    classify_graph, encoder_forward, lstm_forward, Batch, EncoderOutput, Mode, Weights,
    ATTENTION_MASK_VALUE, LAYER_NORM_EPS,
};
pub use io::{ModelBundle, ModelFile, BUNDLE_FORMAT};

/// Standard deviation of the normal weight initialisation.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("batch error: {0}")]
    Batch(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("model file {path}: {reason}")]
    File { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Parameter names, shapes, and initialisers in checkpoint order.
fn param_specs(arch: &Architecture) -> Vec<(String, Vec<usize>, Init)> {
    let e = &arch.encoder;
    let (d, ff) = (e.d_model, e.d_ff);
    let mut specs = vec![
        ("embed.token".to_string(), vec![e.vocab_size, d], Init::Normal),
        ("embed.position".to_string(), vec![e.max_len, d], Init::Normal),
    ];
    for l in 0..e.n_layers {
        let p = |s: &str| format!("enc.{l}.{s}");
        specs.push((p("ln1.gain"), vec![d], Init::Ones));
        specs.push((p("ln1.bias"), vec![d], Init::Zeros));
        for m in ["q", "k", "v", "o"] {
            specs.push((p(&format!("attn.w{m}")), vec![d, d], Init::Normal));
            specs.push((p(&format!("attn.b{m}")), vec![d], Init::Zeros));
        }
        specs.push((p("ln2.gain"), vec![d], Init::Ones));
        specs.push((p("ln2.bias"), vec![d], Init::Zeros));
        specs.push((p("ff.w1"), vec![d, ff], Init::Normal));
        specs.push((p("ff.b1"), vec![ff], Init::Zeros));
        specs.push((p("ff.w2"), vec![ff, d], Init::Normal));
        specs.push((p("ff.b2"), vec![d], Init::Zeros));
    }
    let h = arch.lstm.hidden_size;
    for l in 0..arch.lstm.n_layers {
        let input = if l == 0 { arch.lstm.input_size } else { h };
        for gate in ["i", "f", "g", "o"] {
            specs.push((format!("lstm.{l}.w_{gate}"), vec![input, h], Init::Normal));
            specs.push((format!("lstm.{l}.u_{gate}"), vec![h, h], Init::Normal));
            let bias = if gate == "f" { Init::Ones } else { Init::Zeros };
            specs.push((format!("lstm.{l}.b_{gate}"), vec![h], bias));
        }
    }
    specs.push(("head.weight".to_string(), vec![h, arch.classes], Init::Normal));
    specs.push(("head.bias".to_string(), vec![arch.classes], Init::Zeros));
    specs
}

/// Parameter names with their shapes, in checkpoint order.
pub fn parameter_layout(arch: &Architecture) -> Vec<(String, Vec<usize>)> {
    param_specs(arch).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// An architecture together with its parameter values.
#[derive(Debug, Clone)]
pub struct HybridClassifier {
    arch: Architecture,
    params: ParamSet,
}

impl HybridClassifier {
    /// Freshly initialised model; identical seeds give identical weights.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        Self::with_init_std(arch, seed, INIT_STD)
    }

    /// Like [`HybridClassifier::new`] with a custom weight scale.
    pub fn with_init_std(arch: Architecture, seed: u64, std: f64) -> Result<Self, ModelError> {
        arch.validate()?;
        let normal = Normal::new(0.0, std)
            .map_err(|e| ModelError::Config(format!("init std {std}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape, init) in param_specs(&arch) {
            let tensor = match init {
                Init::Normal => {
                    let n = shape.iter().product();
                    Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?
                }
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::filled(&shape, 1.0),
            };
            params.insert(name, tensor)?;
        }
        Ok(Self { arch, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(arch: Architecture, params: ParamSet) -> Result<Self, ModelError> {
        arch.validate()?;
        let layout = parameter_layout(&arch);
        if layout.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape) in &layout {
            let t = params
                .get(name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    /// Builds the forward graph for `batch` and returns the probability node.
    pub fn forward(
        &self,
        graph: &mut Graph,
        vars: &[Var],
        batch: &Batch,
        mode: Mode,
    ) -> Result<Var, ModelError> {
        let w = Weights::new(&self.params, vars);
        classify_graph(graph, &w, &self.arch, batch, mode)
    }

    /// Class probabilities `[batch, K]` for encoded sequences.
    pub fn classify(&self, seqs: &[TokenSequence], mode: Mode) -> Result<Tensor, ModelError> {
        let batch = Batch::from_sequences(seqs, self.arch.encoder.vocab_size, true)?;
        self.classify_batch(&batch, mode)
    }

    pub fn classify_batch(&self, batch: &Batch, mode: Mode) -> Result<Tensor, ModelError> {
        let mut graph = Graph::new();
        let vars = self.params.bind(&mut graph);
        let probs = self.forward(&mut graph, &vars, batch, mode)?;
        Ok(graph.value(probs).clone())
    }

    /// Eval-mode argmax class per sequence.
    pub fn predict(&self, seqs: &[TokenSequence]) -> Result<Vec<usize>, ModelError> {
        Ok(argmax_rows(&self.classify(seqs, Mode::Eval)?))
    }
}

/// Index of the largest entry in each row; the lowest index wins ties.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    probs.rows().map(argmax).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Architecture {
        Architecture {
            encoder: EncoderConfig {
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                d_ff: 16,
                max_len: 16,
                vocab_size: 30,
                dropout_rate: 0.1,
            },
            lstm: LstmConfig {
                input_size: 8,
                hidden_size: 8,
                n_layers: 2,
            },
            classes: 3,
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for arch in [tiny(), Architecture::desk(500, 32, 6)] {
            let m = HybridClassifier::new(arch, 1).unwrap();
            assert_eq!(m.parameter_count(), arch.parameter_count());
        }
    }

    #[test]
    fn init_is_seeded_and_structured() {
        let a = HybridClassifier::new(tiny(), 5).unwrap();
        let b = HybridClassifier::new(tiny(), 5).unwrap();
        assert_eq!(a.params().tensors(), b.params().tensors());
        assert!(a.params().get("lstm.0.b_f").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(a.params().get("lstm.0.b_i").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.params().get("enc.0.ln1.gain").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn argmax_ties_prefer_lowest_index() {
        let t = Tensor::new(vec![2, 2], vec![0.2, 0.8, 0.5, 0.5]).unwrap();
        assert_eq!(argmax_rows(&t), [1, 0]);
    }

    #[test]
    fn from_params_rejects_wrong_shapes() {
        let m = HybridClassifier::new(tiny(), 1).unwrap();
        let mut other = Architecture::desk(30, 16, 3);
        assert!(HybridClassifier::from_params(other, m.params().clone()).is_err());
        other = tiny();
        assert!(HybridClassifier::from_params(other, m.params().clone()).is_ok());
    }
}
