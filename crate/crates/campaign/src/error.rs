use serde::Serialize;
use thiserror::Error;

/// A problem with one field of a submitted configuration; `field` is `None`
/// when the problem cannot be pinned to a single field.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FieldError {
    pub field: Option<String>,
    pub message: String,
}

impl FieldError {
    pub fn new(field: Option<&str>, message: impl Into<String>) -> Self {
        FieldError {
            field: field.map(str::to_string),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid request: {}", summary(.0))]
    Invalid(Vec<FieldError>),

    #[error("campaign {0:?} not found")]
    NotFound(String),

    /// The request does not fit the campaign's current status.
    #[error("{0}")]
    Conflict(String),

    /// The outcomes contradict every hypothesis; the campaign is flagged and
    /// otherwise left as it was.
    #[error("degenerate evidence: {0}")]
    Degenerate(String),

    /// The event log cannot be replayed.
    #[error("corrupt event log: {0}")]
    Corrupt(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Core(#[from] groupwise_core::Error),
}

fn summary(fields: &[FieldError]) -> String {
    fields
        .iter()
        .map(|f| match &f.field {
            Some(name) => format!("{name}: {}", f.message),
            None => f.message.clone(),
        })
        .collect::<Vec<_>>()
        .join("; ")
}

impl CampaignError {
    pub fn invalid(field: Option<&str>, message: impl Into<String>) -> Self {
        CampaignError::Invalid(vec![FieldError::new(field, message)])
    }
}

pub type Result<T> = std::result::Result<T, CampaignError>;
