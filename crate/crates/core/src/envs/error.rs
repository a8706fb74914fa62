use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("step called after the episode ended; call reset first")]
    StepAfterEnd,
    #[error("action {action} out of range for {n} discrete actions")]
    ActionOutOfRange { action: usize, n: usize },
    #[error("environment `{env}` expects a {expected} action")]
    WrongActionKind { env: String, expected: &'static str },
    #[error("unknown environment `{name}`; valid names: {valid}")]
    UnknownEnv { name: String, valid: String },
    #[error("observation noise sigma must be non-negative, got {0}")]
    NegativeSigma(f64),
}
