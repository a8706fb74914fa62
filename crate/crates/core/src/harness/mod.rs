//! Experiment harness: configuration, the training loop, evaluation, TD
//! probes, run directories and checkpoints.

pub mod acting;
pub mod checkpoint;
pub mod config;
pub mod learner;
pub mod trainer;

use thiserror::Error;

use crate::agent::AgentError;
use crate::analysis::AnalysisError;
use crate::codec::CodecError;
use crate::envs::EnvError;
use crate::numerics::NumericsError;
use crate::replay::ReplayError;
use crate::variants::VariantError;
use crate::world_model::WmError;

pub use acting::{episode_seed, evaluate, probe_episodes, run_episode, Belief, EpisodeOutcome, TargetInput};
pub use checkpoint::{export_learner, import_learner, Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};
pub use config::{default_budget, RunConfig};
pub use learner::{Learner, UpdateReport};
pub use trainer::{
    atomic_write, Completion, latest_checkpoint, list_checkpoints, parse_metrics, run_root, Manifest, MetricRow, MetricsLog, Counters, RunSummary, Trainer,
    ARTIFACT_VERSION, RUN_ROOT_ENV,
};

/// Process exit code for configuration and dimension errors.
pub const EXIT_CONFIG: i32 = 2;
/// Process exit code for numerical divergence.
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {}", .0.iter().map(|(k, m)| format!("{k}: {m}")).collect::<Vec<_>>().join("; "))]
    Config(Vec<(String, String)>),
    #[error("{0}")]
    Invalid(String),
    #[error("TD probe unavailable: {0}")]
    Probe(String),
    #[error("training diverged at env step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    WorldModel(#[from] WmError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Variant(#[from] VariantError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn config(field: &str, message: String) -> Self {
        HarnessError::Config(vec![(field.to_string(), message)])
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Whether the error stems from a non-finite loss or gradient.
    pub fn is_divergence(&self) -> bool {
        fn numerics(e: &NumericsError) -> bool {
            matches!(e, NumericsError::NonFiniteGradient { .. })
        }
        fn wm(e: &WmError) -> bool {
            match e {
                WmError::NonFiniteLoss { .. } => true,
                WmError::Numerics(n) => numerics(n),
                _ => false,
            }
        }
        fn agent(e: &AgentError) -> bool {
            match e {
                AgentError::WorldModel(w) => wm(w),
                AgentError::Numerics(n) => numerics(n),
                AgentError::AtStep { source, .. } => agent(source),
                _ => false,
            }
        }
        match self {
            HarnessError::Diverged { .. } => true,
            HarnessError::WorldModel(w) => wm(w),
            HarnessError::Agent(a) => agent(a),
            HarnessError::Numerics(n) => numerics(n),
            _ => false,
        }
    }

    /// 2 for configuration and dimension errors, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.is_divergence() {
            return EXIT_DIVERGED;
        }
        let dimension = |n: &NumericsError| matches!(n, NumericsError::Dimension { .. });
        match self {
            HarnessError::Config(_) | HarnessError::Variant(_) => EXIT_CONFIG,
            HarnessError::Numerics(n) if dimension(n) => EXIT_CONFIG,
            HarnessError::WorldModel(WmError::Numerics(n)) if dimension(n) => EXIT_CONFIG,
            HarnessError::Agent(AgentError::KindMismatch { .. } | AgentError::LengthMismatch { .. }) => EXIT_CONFIG,
            HarnessError::Analysis(AnalysisError::Empty | AnalysisError::DegenerateBounds(_)) => EXIT_CONFIG,
            _ => 1,
        }
    }
}
