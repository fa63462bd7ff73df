//! Machine-readable error codes for the single-line error report.

use asp_core::data::DataError;
use asp_core::evaluator::EvalError;
use asp_core::feasibility::FeasibilityError;
use asp_core::model::ModelError;
use asp_core::tensor::TensorError;
use asp_core::trainer::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    Usage,
    Config,
    Io,
    Data,
    Model,
    Train,
    Eval,
    Feasibility,
    Network,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::Usage => "E_USAGE",
            ErrorCode::Config => "E_CONFIG",
            ErrorCode::Io => "E_IO",
            ErrorCode::Data => "E_DATA",
            ErrorCode::Model => "E_MODEL",
            ErrorCode::Train => "E_TRAIN",
            ErrorCode::Eval => "E_EVAL",
            ErrorCode::Feasibility => "E_FEASIBILITY",
            ErrorCode::Network => "E_NETWORK",
        }
    }

    /// Process exit status: 2 for bad invocations, 1 for everything else.
    pub fn exit_status(self) -> u8 {
        match self {
            ErrorCode::Usage | ErrorCode::Config => 2,
            _ => 1,
        }
    }
}

/// Invalid or missing flag or config value.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(message: impl Into<String>) -> Self {
        ConfigError(message.into())
    }
}

fn data_code(e: &DataError) -> ErrorCode {
    match e {
        DataError::Io { .. } => ErrorCode::Io,
        _ => ErrorCode::Data,
    }
}

fn tensor_code(_: &TensorError) -> ErrorCode {
    ErrorCode::Model
}

fn model_code(e: &ModelError) -> ErrorCode {
    match e {
        ModelError::Config(_) => ErrorCode::Config,
        ModelError::Io { .. } => ErrorCode::Io,
        ModelError::Data(d) => data_code(d),
        ModelError::Tensor(t) => tensor_code(t),
        _ => ErrorCode::Model,
    }
}

fn eval_code(e: &EvalError) -> ErrorCode {
    match e {
        EvalError::Model(m) => model_code(m),
        EvalError::Io { .. } => ErrorCode::Io,
        _ => ErrorCode::Eval,
    }
}

fn train_code(e: &TrainError) -> ErrorCode {
    match e {
        TrainError::Config(_) => ErrorCode::Config,
        TrainError::Data(d) => data_code(d),
        TrainError::Model(m) => model_code(m),
        TrainError::Eval(v) => eval_code(v),
        TrainError::Io { .. } => ErrorCode::Io,
        TrainError::EmptyTrainSplit | TrainError::NonFinite { .. } => ErrorCode::Train,
    }
}

fn feasibility_code(e: &FeasibilityError) -> ErrorCode {
    match e {
        FeasibilityError::Io { .. } => ErrorCode::Io,
        FeasibilityError::Network { .. } | FeasibilityError::Http { .. } | FeasibilityError::BadResponse { .. } => {
            ErrorCode::Network
        }
        FeasibilityError::BaseUrl(_) => ErrorCode::Config,
        _ => ErrorCode::Feasibility,
    }
}

/// Code of the first recognized error in the chain.
pub fn classify(err: &anyhow::Error) -> ErrorCode {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return ErrorCode::Config;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return train_code(e);
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return eval_code(e);
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return model_code(e);
        }
        if let Some(e) = cause.downcast_ref::<FeasibilityError>() {
            return feasibility_code(e);
        }
        if let Some(e) = cause.downcast_ref::<DataError>() {
            return data_code(e);
        }
        if let Some(e) = cause.downcast_ref::<TensorError>() {
            return tensor_code(e);
        }
        if cause.is::<std::io::Error>() {
            return ErrorCode::Io;
        }
        if cause.is::<serde_json::Error>() {
            return ErrorCode::Config;
        }
    }
    ErrorCode::Io
}

/// The error chain on one line. Causes already quoted by their parent's
/// message are not repeated.
pub fn one_line(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.ends_with(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `error[E_CODE]: message`
pub fn render(err: &anyhow::Error) -> (ErrorCode, String) {
    let code = classify(err);
    (code, format!("error[{}]: {}", code.as_str(), one_line(err)))
}
