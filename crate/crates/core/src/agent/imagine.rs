//! Latent imagination: nested (scaffolded dynamics driving a target belief)
//! and vanilla rollouts inside a single world model.

use crate::numerics::{Rng, SampleMode, Tape, Tensor, Var};
use crate::world_model::{LatentState, ModelKind, TapeLatent, WorldModel};

use super::critic::CriticInput;
use super::policy::{Policy, TapeAction};
use super::AgentError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImaginationMode {
    /// Scaffolded prior dynamics and heads; the target latent is inferred
    /// from transdecoded target observations.
    Nested,
    /// Target prior dynamics and heads. With `track_scaffolded`, a
    /// scaffolded belief is carried along from the target decoder's `ô⁺`.
    Target { track_scaffolded: bool },
    /// Scaffolded prior dynamics and heads, policy on the scaffolded latent.
    Scaffolded,
}

#[derive(Clone, Copy)]
pub struct Imagination<'a> {
    pub mode: ImaginationMode,
    pub scaffolded: Option<&'a WorldModel>,
    pub target: Option<&'a WorldModel>,
    pub horizon: usize,
}

/// Start states for a batch of rollouts, aligned row by row.
#[derive(Clone, Debug)]
pub struct StartStates {
    pub target: Option<LatentState>,
    pub scaffolded: Option<LatentState>,
}

impl StartStates {
    pub fn rows(&self) -> usize {
        self.target
            .as_ref()
            .or(self.scaffolded.as_ref())
            .map_or(0, |s| s.rows())
    }

    pub fn gather(&self, idx: &[usize]) -> Self {
        Self {
            target: self.target.as_ref().map(|s| s.gather(idx)),
            scaffolded: self.scaffolded.as_ref().map(|s| s.gather(idx)),
        }
    }
}

/// A rollout recorded on a tape. Step `k` acts in state `k`; its reward and
/// continue probability are read from state `k + 1`.
pub struct TapeRollout {
    pub target_states: Vec<TapeLatent>,
    pub scaffolded_states: Vec<TapeLatent>,
    pub actions: Vec<TapeAction>,
    pub rewards: Vec<Var>,
    pub continues: Vec<Var>,
    pub head_source: ModelKind,
}

impl TapeRollout {
    pub fn policy_state(&self, kind: ModelKind, k: usize) -> TapeLatent {
        match kind {
            ModelKind::Target => self.target_states[k],
            ModelKind::Scaffolded => self.scaffolded_states[k],
        }
    }

    /// Critic input for state `k`.
    pub fn critic_feature(&self, tape: &mut Tape<'_>, input: CriticInput, k: usize) -> Result<Var, AgentError> {
        let missing = |what: &'static str| AgentError::MissingComponent(what);
        Ok(match input {
            CriticInput::Target => self.target_states.get(k).ok_or(missing("target latent"))?.feature(tape),
            CriticInput::Scaffolded => self.scaffolded_states.get(k).ok_or(missing("scaffolded latent"))?.feature(tape),
            CriticInput::Both => {
                let t = *self.target_states.get(k).ok_or(missing("target latent"))?;
                let s = *self.scaffolded_states.get(k).ok_or(missing("scaffolded latent"))?;
                tape.concat(&[t.h, t.z, s.h, s.z])
            }
        })
    }
}

/// Plain-value rollout.
#[derive(Clone, Debug)]
pub struct ImaginedRollout {
    pub horizon: usize,
    pub rows: usize,
    /// `s⁻_0..s⁻_H` (empty when no target latent is tracked).
    pub target_states: Vec<LatentState>,
    /// `s⁺_0..s⁺_H` (empty when no scaffolded latent is tracked).
    pub scaffolded_states: Vec<LatentState>,
    /// Features the policy acted on, `0..H−1`.
    pub policy_features: Vec<Tensor>,
    /// Encoded actions `a_0..a_{H−1}`.
    pub actions: Vec<Tensor>,
    /// `r̂_k`, `ĉ_k` predicted at state `k + 1`.
    pub rewards: Vec<Tensor>,
    pub continues: Vec<Tensor>,
    /// Critic inputs and slow-critic values for states `0..H`.
    pub critic_features: Vec<Tensor>,
    pub values: Vec<Tensor>,
    /// Model whose reward and continue heads produced the rollout.
    pub head_source: ModelKind,
    /// Critic input used for `values`.
    pub value_source: CriticInput,
}

fn kind_error(step: usize, err: crate::world_model::WmError) -> AgentError {
    AgentError::AtStep {
        step,
        source: Box::new(err.into()),
    }
}

impl<'p> Imagination<'p> {
    fn need(model: Option<&'p WorldModel>, what: &'static str) -> Result<&'p WorldModel, AgentError> {
        model.ok_or(AgentError::MissingComponent(what))
    }

    pub fn policy_kind(&self) -> ModelKind {
        match self.mode {
            ImaginationMode::Scaffolded => ModelKind::Scaffolded,
            _ => ModelKind::Target,
        }
    }

    /// Roll `horizon` steps from `starts`, recording everything on `tape`.
    pub fn run(
        &self,
        tape: &mut Tape<'p>,
        policy: &'p Policy,
        starts: &StartStates,
        rng: &mut Rng,
    ) -> Result<TapeRollout, AgentError> {
        policy.check_kind(self.policy_kind(), "imagination policy")?;
        let mut out = TapeRollout {
            target_states: Vec::new(),
            scaffolded_states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            continues: Vec::new(),
            head_source: ModelKind::Target,
        };
        let start_t = |what| starts.target.as_ref().ok_or(AgentError::MissingComponent(what));
        let start_s = |what| starts.scaffolded.as_ref().ok_or(AgentError::MissingComponent(what));
        match self.mode {
            ImaginationMode::Nested => {
                let scaff = Self::need(self.scaffolded, "scaffolded world model")?;
                let target = Self::need(self.target, "target world model")?;
                out.head_source = ModelKind::Scaffolded;
                let mut s_t = TapeLatent::constant(tape, start_t("target start states")?);
                let mut s_s = TapeLatent::constant(tape, start_s("scaffolded start states")?);
                for (state, expected) in [(s_t, ModelKind::Target), (s_s, ModelKind::Scaffolded)] {
                    if state.kind != expected {
                        return Err(AgentError::KindMismatch {
                            context: "nested imagination start".into(),
                            expected,
                            actual: state.kind,
                        });
                    }
                }
                out.target_states.push(s_t);
                out.scaffolded_states.push(s_s);
                for k in 0..self.horizon {
                    let feat = s_t.feature(tape);
                    let action = policy.tape_sample(tape, feat, rng, SampleMode::Sample)?;
                    let next_s = scaff
                        .tape_prior_step(tape, &s_s, action.encoded, rng, SampleMode::Sample)
                        .map_err(|e| kind_error(k, e))?;
                    let obs_hat = scaff.tape_transdecode(tape, &next_s).map_err(|e| kind_error(k, e))?;
                    let embed = target.tape_embed(tape, obs_hat).map_err(|e| kind_error(k, e))?;
                    let next_t = target
                        .tape_posterior_step(tape, &s_t, action.encoded, embed, rng, SampleMode::Sample)
                        .map_err(|e| kind_error(k, e))?;
                    let f = next_s.feature(tape);
                    let r = scaff.tape_reward(tape, f)?;
                    let c = scaff.tape_continue_logit(tape, f)?;
                    out.rewards.push(r);
                    out.continues.push(tape.sigmoid(c));
                    out.actions.push(action);
                    out.target_states.push(next_t);
                    out.scaffolded_states.push(next_s);
                    s_t = next_t;
                    s_s = next_s;
                }
            }
            ImaginationMode::Target { track_scaffolded } => {
                let target = Self::need(self.target, "target world model")?;
                let scaff = if track_scaffolded {
                    Some(Self::need(self.scaffolded, "scaffolded world model")?)
                } else {
                    None
                };
                if let Some(s) = scaff {
                    if target.layout.decoder_dim() != s.layout.input_dim() {
                        return Err(AgentError::MissingComponent(
                            "target decoder of o⁺ (representation scaffolding) for tracking the scaffolded belief",
                        ));
                    }
                }
                out.head_source = ModelKind::Target;
                let mut s_t = TapeLatent::constant(tape, start_t("target start states")?);
                let mut s_s = match scaff {
                    Some(_) => Some(TapeLatent::constant(tape, start_s("scaffolded start states")?)),
                    None => None,
                };
                out.target_states.push(s_t);
                out.scaffolded_states.extend(s_s);
                for k in 0..self.horizon {
                    let feat = s_t.feature(tape);
                    let action = policy.tape_sample(tape, feat, rng, SampleMode::Sample)?;
                    let next_t = target
                        .tape_prior_step(tape, &s_t, action.encoded, rng, SampleMode::Sample)
                        .map_err(|e| kind_error(k, e))?;
                    let f = next_t.feature(tape);
                    let r = target.tape_reward(tape, f)?;
                    let c = target.tape_continue_logit(tape, f)?;
                    if let (Some(scaff), Some(prev)) = (scaff, s_s) {
                        let obs_hat = target.tape_decode(tape, f)?;
                        let embed = scaff.tape_embed(tape, obs_hat)?;
                        let next_s = scaff
                            .tape_posterior_step(tape, &prev, action.encoded, embed, rng, SampleMode::Sample)
                            .map_err(|e| kind_error(k, e))?;
                        out.scaffolded_states.push(next_s);
                        s_s = Some(next_s);
                    }
                    out.rewards.push(r);
                    out.continues.push(tape.sigmoid(c));
                    out.actions.push(action);
                    out.target_states.push(next_t);
                    s_t = next_t;
                }
            }
            ImaginationMode::Scaffolded => {
                let scaff = Self::need(self.scaffolded, "scaffolded world model")?;
                out.head_source = ModelKind::Scaffolded;
                let mut s_s = TapeLatent::constant(tape, start_s("scaffolded start states")?);
                out.scaffolded_states.push(s_s);
                for k in 0..self.horizon {
                    let feat = s_s.feature(tape);
                    let action = policy.tape_sample(tape, feat, rng, SampleMode::Sample)?;
                    let next_s = scaff
                        .tape_prior_step(tape, &s_s, action.encoded, rng, SampleMode::Sample)
                        .map_err(|e| kind_error(k, e))?;
                    let f = next_s.feature(tape);
                    let r = scaff.tape_reward(tape, f)?;
                    let c = scaff.tape_continue_logit(tape, f)?;
                    out.rewards.push(r);
                    out.continues.push(tape.sigmoid(c));
                    out.actions.push(action);
                    out.scaffolded_states.push(next_s);
                    s_s = next_s;
                }
            }
        }
        Ok(out)
    }
}

impl TapeRollout {
    /// Copy values off the tape. `critic_features` and `values` cover
    /// states `0..H`.
    pub fn to_plain(
        &self,
        tape: &Tape<'_>,
        policy_kind: ModelKind,
        critic_features: &[Var],
        values: &[Var],
        value_source: CriticInput,
    ) -> ImaginedRollout {
        let horizon = self.actions.len();
        let vals = |vs: &[Var]| vs.iter().map(|v| tape.value(*v).clone()).collect::<Vec<_>>();
        let policy_features = (0..horizon)
            .map(|k| {
                let s = self.policy_state(policy_kind, k).values(tape);
                s.feature()
            })
            .collect();
        let rows = tape.value(critic_features[0]).rows;
        ImaginedRollout {
            horizon,
            rows,
            target_states: self.target_states.iter().map(|s| s.values(tape)).collect(),
            scaffolded_states: self.scaffolded_states.iter().map(|s| s.values(tape)).collect(),
            policy_features,
            actions: self.actions.iter().map(|a| tape.value(a.encoded).clone()).collect(),
            rewards: vals(&self.rewards),
            continues: vals(&self.continues),
            critic_features: vals(critic_features),
            values: vals(values),
            head_source: self.head_source,
            value_source,
        }
    }
}
