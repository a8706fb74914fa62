//! Policies, critics, latent imagination and the actor-critic updates.

mod actor_critic;
mod critic;
mod imagine;
mod policy;
mod returns;

use thiserror::Error;

use crate::numerics::NumericsError;
use crate::world_model::{ModelKind, WmError};

pub use actor_critic::{fit_critic, policy_kl, rollout_returns, tape_policy_kl, AcConfig, AcReport, ActorCritic, BcTarget};
pub use critic::{Critic, CriticInput};
pub use imagine::{ImaginationMode, ImaginedRollout, Imagination, StartStates, TapeRollout};
pub use policy::{argmax, Policy, PolicyDist, TapeAction, POLICY_MIN_STD};
pub use returns::{percentile, tape_td_lambda, td_lambda, ReturnNormalizer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("{context}: expected a {expected:?} latent, got {actual:?}")]
    KindMismatch {
        context: String,
        expected: ModelKind,
        actual: ModelKind,
    },
    #[error("imagination step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<AgentError>,
    },
    #[error("missing component: {0}")]
    MissingComponent(&'static str),
    #[error("λ-return inputs need equal non-zero lengths (rewards {rewards}, continues {continues}, values {values})")]
    LengthMismatch {
        rewards: usize,
        continues: usize,
        values: usize,
    },
    #[error(transparent)]
    WorldModel(#[from] WmError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Nested latent imagination with the target policy: scaffolded dynamics
/// and heads drive the rollout while the target belief is updated from
/// transdecoded observations. `critic` supplies slow values.
pub fn nested_latent_imagination(
    scaffolded: &crate::world_model::WorldModel,
    target: &crate::world_model::WorldModel,
    policy: &Policy,
    critic: &Critic,
    starts: &StartStates,
    horizon: usize,
    rng: &mut crate::numerics::Rng,
) -> Result<ImaginedRollout, AgentError> {
    let imagination = Imagination {
        mode: ImaginationMode::Nested,
        scaffolded: Some(scaffolded),
        target: Some(target),
        horizon,
    };
    imagine_values(&imagination, policy, critic, starts, rng)
}

/// Run any imagination mode and read off plain values.
pub fn imagine_values(
    imagination: &Imagination<'_>,
    policy: &Policy,
    critic: &Critic,
    starts: &StartStates,
    rng: &mut crate::numerics::Rng,
) -> Result<ImaginedRollout, AgentError> {
    let mut tape = crate::numerics::Tape::new();
    let roll = imagination.run(&mut tape, policy, starts, rng)?;
    let mut feats = Vec::new();
    let mut values = Vec::new();
    for k in 0..=roll.actions.len() {
        let f = roll.critic_feature(&mut tape, critic.input, k)?;
        values.push(critic.tape_value(&mut tape, f, true)?);
        feats.push(f);
    }
    Ok(roll.to_plain(&tape, policy.kind, &feats, &values, critic.input))
}
