use std::fmt;
use std::io;
use std::process::ExitCode;

use infocascade::autodiff::AutodiffError;
use infocascade::cascade::CascadeError;
use infocascade::corpus::CorpusError;
use infocascade::independence::IndependenceError;
use infocascade::metrics::MetricsError;
use infocascade::model::ModelError;
use infocascade::tokenizer::TokenizerError;
use infocascade::training::TrainingError;

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Io,
    Validation,
    Internal,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Io => 1,
            Kind::Validation => 2,
            Kind::Internal => 3,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Validation,
            message: message.into(),
        }
    }

    pub fn io(context: impl fmt::Display, e: io::Error) -> Self {
        Self {
            kind: io_kind(&e),
            message: format!("{context}: {e}"),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind.code())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// A missing input is a validation failure; other I/O problems are not.
fn io_kind(e: &io::Error) -> Kind {
    if e.kind() == io::ErrorKind::NotFound {
        Kind::Validation
    } else {
        Kind::Io
    }
}

fn make(kind: Kind, e: impl fmt::Display) -> CliError {
    CliError {
        kind,
        message: e.to_string(),
    }
}

fn autodiff_kind(e: &AutodiffError) -> Kind {
    match e {
        AutodiffError::Io(io) => io_kind(io),
        AutodiffError::Checkpoint(_) => Kind::Validation,
        _ => Kind::Internal,
    }
}

fn model_kind(e: &ModelError) -> Kind {
    match e {
        ModelError::Autodiff(a) => autodiff_kind(a),
        ModelError::Tokenizer(t) => tokenizer_kind(t),
        ModelError::Config(_) | ModelError::TokenOutOfRange { .. } | ModelError::File { .. } => Kind::Validation,
        ModelError::MissingParam(_) => Kind::Validation,
        ModelError::Batch(_) => Kind::Internal,
    }
}

fn tokenizer_kind(e: &TokenizerError) -> Kind {
    match e {
        TokenizerError::Io { source, .. } => io_kind(source),
        _ => Kind::Validation,
    }
}

fn corpus_kind(e: &CorpusError) -> Kind {
    match e {
        CorpusError::Read { source, .. } => io_kind(source),
        CorpusError::Write { .. } => Kind::Io,
        _ => Kind::Validation,
    }
}

fn independence_kind(e: &IndependenceError) -> Kind {
    match e {
        IndependenceError::Io(io) => io_kind(io),
        IndependenceError::NoConvergence { .. } | IndependenceError::InconsistentDecision { .. } => Kind::Internal,
        _ => Kind::Validation,
    }
}

fn metrics_kind(e: &MetricsError) -> Kind {
    match e {
        MetricsError::Io(io) => io_kind(io),
        MetricsError::Json(_) => Kind::Internal,
        _ => Kind::Validation,
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        make(corpus_kind(&e), e)
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        make(tokenizer_kind(&e), e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        make(model_kind(&e), e)
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        make(metrics_kind(&e), e)
    }
}

impl From<IndependenceError> for CliError {
    fn from(e: IndependenceError) -> Self {
        make(independence_kind(&e), e)
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        let kind = match &e {
            TrainingError::Model(m) => model_kind(m),
            TrainingError::Autodiff(a) => autodiff_kind(a),
            TrainingError::Metrics(m) => metrics_kind(m),
            TrainingError::Io(io) => io_kind(io),
            TrainingError::ZeroStep | TrainingError::ShapeMismatch(_) => Kind::Internal,
            _ => Kind::Validation,
        };
        make(kind, e)
    }
}

impl From<CascadeError> for CliError {
    fn from(e: CascadeError) -> Self {
        let kind = match &e {
            CascadeError::Model { source, .. } => model_kind(source),
            CascadeError::Corpus(c) => corpus_kind(c),
            CascadeError::Independence(i) => independence_kind(i),
            CascadeError::Write { .. } => Kind::Io,
            CascadeError::Read { source, .. } => io_kind(source),
            CascadeError::RowCount { .. } | CascadeError::NotFlagged { .. } => Kind::Internal,
            _ => Kind::Validation,
        };
        make(kind, e)
    }
}
