//! Error types shared across the simulator.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("linear system is singular even after ridge augmentation")]
    Singular,

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("round {round}{}: {source}", client.map(|k| format!(", client {k}")).unwrap_or_default())]
    Round {
        round: usize,
        client: Option<usize>,
        #[source]
        source: Box<SimError>,
    },
}

impl SimError {
    pub fn dim(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        SimError::DimMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Tag an error with the federation round (and client) it occurred in.
    pub fn in_round(self, round: usize, client: Option<usize>) -> Self {
        SimError::Round {
            round,
            client,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, SimError>;
