use thiserror::Error;

use super::ModelKind;
use crate::numerics::NumericsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WmError {
    #[error("{context}: expected a {expected:?} latent, got {actual:?}")]
    KindMismatch {
        context: String,
        expected: ModelKind,
        actual: ModelKind,
    },
    #[error("only the scaffolded world model has a transdecoder")]
    NoTransdecoder,
    #[error("world model has no privileged-observation head")]
    NoInformedHead,
    #[error("training sequences need at least 2 steps, got {0}")]
    SequenceTooShort(usize),
    #[error("non-finite world-model loss in head `{head}`")]
    NonFiniteLoss { head: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
