//! Error shared by every external backend contract.

use thiserror::Error;

/// Failure reported by a generator, segmenter, counter or suggester backend.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    /// The backend could not be reached or the exchange broke off. Retrying
    /// later may succeed.
    #[error("transport failure talking to {backend}: {message}")]
    Transport { backend: String, message: String },
    /// The backend does not implement a capability the caller needs.
    #[error("{backend} does not support {capability}")]
    Capability { backend: String, capability: String },
    /// The backend ran but rejected the request or produced unusable output.
    #[error("{backend} failed: {message}")]
    Failed { backend: String, message: String },
}

impl BackendError {
    pub fn transport(backend: impl Into<String>, message: impl ToString) -> Self {
        Self::Transport {
            backend: backend.into(),
            message: message.to_string(),
        }
    }

    pub fn failed(backend: impl Into<String>, message: impl ToString) -> Self {
        Self::Failed {
            backend: backend.into(),
            message: message.to_string(),
        }
    }

    pub fn capability(backend: impl Into<String>, capability: impl Into<String>) -> Self {
        Self::Capability {
            backend: backend.into(),
            capability: capability.into(),
        }
    }

    pub fn is_retriable(&self) -> bool {
        matches!(self, Self::Transport { .. })
    }
}
