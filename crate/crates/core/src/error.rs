use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One rejected configuration field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Where in an optimization run a numeric failure happened.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FailureContext {
    pub stage: String,
    pub iteration: Option<usize>,
    pub layer: Option<usize>,
}

impl fmt::Display for FailureContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}`", self.stage)?;
        if let Some(it) = self.iteration {
            write!(f, ", iteration {it}")?;
        }
        if let Some(layer) = self.layer {
            write!(f, ", layer {layer}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure at {context}: {detail}")]
    NumericFailure {
        context: FailureContext,
        detail: String,
    },

    #[error("invalid configuration: {}", join_fields(.0))]
    Config(Vec<FieldError>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn join_fields(fields: &[FieldError]) -> String {
    fields
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numeric(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::NumericFailure {
            context: FailureContext {
                stage: stage.into(),
                ..Default::default()
            },
            detail: detail.into(),
        }
    }

    /// Attaches an iteration index to a numeric failure. Other variants pass through.
    pub fn at_iteration(mut self, iteration: usize) -> Self {
        if let Error::NumericFailure { context, .. } = &mut self {
            context.iteration.get_or_insert(iteration);
        }
        self
    }

    pub fn at_layer(mut self, layer: usize) -> Self {
        if let Error::NumericFailure { context, .. } = &mut self {
            context.layer.get_or_insert(layer);
        }
        self
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NumericFailure { .. })
    }
}
