use std::fmt;

use regmark_core::Error as CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    NotFound,
    /// Conflicts with the current session state (stale client view, wrong candidate).
    Conflict,
    /// Well-formed request carrying invalid values.
    Invalid,
    /// Unparseable request.
    BadRequest,
    Internal,
}

/// Error with a machine-readable code, as returned by the service.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceError {
    pub kind: ErrorKind,
    pub code: &'static str,
    pub message: String,
}

impl ServiceError {
    pub fn new(kind: ErrorKind, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            code,
            message: message.into(),
        }
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(ErrorKind::NotFound, "not_found", format!("unknown {what} {id:?}"))
    }

    pub fn conflict(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Conflict, code, message)
    }

    pub fn invalid(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Invalid, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Internal, "internal", message)
    }

    /// Classifies an engine error raised while validating client input.
    pub fn from_input(e: CoreError) -> Self {
        let code = match &e {
            CoreError::DimensionMismatch { .. } => "dimension_mismatch",
            CoreError::OutsideDomain(_) => "outside_domain",
            CoreError::Validation(_) | CoreError::Degenerate(_) | CoreError::NotPositiveDefinite { .. } => {
                "invalid_covariance"
            }
            CoreError::Domain(_) => "invalid_parameter",
            CoreError::InsufficientData(_) | CoreError::EmptyPool => "insufficient_data",
            _ => return Self::internal(e.to_string()),
        };
        Self::invalid(code, e.to_string())
    }
}

impl fmt::Display for ServiceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ServiceError {}
