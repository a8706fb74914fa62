//! Running policies in real environments: data collection, evaluation and
//! the TD-error probe rollouts.

use crate::analysis::{ProbeEpisode, ReturnEstimate};
use crate::envs::{Action, Environment, ObservationBundle, ScoreKind};
use crate::numerics::{Rng, SampleMode, Tensor};
use crate::replay::{Collector, EpisodeRecord};
use crate::world_model::{stack_states, LatentState, WorldModel};

use super::learner::Learner;
use super::HarnessError;

/// Filtered latent belief of one world model over a single episode.
pub struct Belief<'a> {
    wm: &'a WorldModel,
    pub latent: LatentState,
    prev_action: Tensor,
}

impl<'a> Belief<'a> {
    pub fn new(wm: &'a WorldModel) -> Self {
        Self {
            wm,
            latent: wm.initial(1),
            prev_action: Tensor::zeros(1, wm.layout.action_dim),
        }
    }

    /// Fold in the observation reached by the last recorded action.
    pub fn observe(&mut self, input: &[f64], rng: &mut Rng, mode: SampleMode) -> Result<(), HarnessError> {
        let obs = Tensor::row(input);
        self.latent = self.wm.observe(&self.latent, &self.prev_action, &obs, rng, mode)?;
        Ok(())
    }

    pub fn record_action(&mut self, encoded: &[f64]) {
        self.prev_action = Tensor::row(encoded);
    }
}

/// How the target model's input is formed from an observation bundle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetInput {
    TargetOnly,
    Scaffolded,
    /// `oᵖ` kept with probability `keep`, zeros otherwise.
    Dropout { keep: f64 },
}

impl TargetInput {
    pub fn for_learner(learner: &Learner, keep: f64, evaluating: bool) -> Self {
        let v = &learner.variant;
        if v.policy_privileged {
            TargetInput::Scaffolded
        } else if v.guided_dropout {
            TargetInput::Dropout {
                keep: if evaluating { 0.0 } else { keep },
            }
        } else {
            TargetInput::TargetOnly
        }
    }

    pub fn build(self, obs: &ObservationBundle, rng: &mut Rng) -> Vec<f64> {
        match self {
            TargetInput::TargetOnly => obs.target.clone(),
            TargetInput::Scaffolded => obs.scaffolded(),
            TargetInput::Dropout { keep } => {
                let kept = keep >= 1.0 || (keep > 0.0 && rng.unit() < keep);
                let mut v = obs.target.clone();
                if kept {
                    v.extend_from_slice(&obs.privileged);
                } else {
                    v.extend(std::iter::repeat_n(0.0, obs.privileged.len()));
                }
                v
            }
        }
    }
}

/// Outcome of one real episode.
pub struct EpisodeOutcome {
    pub record: EpisodeRecord,
    pub score: f64,
}

fn episode_score(kind: ScoreKind, total_reward: f64, success: bool) -> f64 {
    match kind {
        ScoreKind::Return => total_reward,
        ScoreKind::Success => f64::from(u8::from(success)),
    }
}

/// Roll one episode with the given collector. `mode` governs both action
/// selection and latent sampling.
pub fn run_episode(
    learner: &Learner,
    env: &mut dyn Environment,
    collector: Collector,
    seed: u64,
    input: TargetInput,
    mode: SampleMode,
    rng: &mut Rng,
) -> Result<EpisodeOutcome, HarnessError> {
    let space = env.spec().action_space.clone();
    let kind = env.spec().score_kind;
    let first = env.reset(seed);
    let mut record = EpisodeRecord::new(first.clone(), collector, seed);
    let mut obs = first;
    let model = match collector {
        Collector::ExplorationPolicy => Some(
            learner
                .scaffolded_wm
                .as_ref()
                .ok_or_else(|| HarnessError::Invalid("exploration collector without a scaffolded model".into()))?,
        ),
        Collector::TargetPolicy => Some(&learner.target_wm),
        Collector::Scripted => None,
    };
    let mut belief = model.map(Belief::new);
    let success;
    loop {
        let action: Action = match (&mut belief, collector) {
            (Some(b), Collector::ExplorationPolicy) => {
                b.observe(&obs.scaffolded(), rng, mode)?;
                let explorer = learner.explorer.as_ref().expect("explorer exists with its collector");
                explorer.policy.act(&b.latent, rng, mode)?.remove(0)
            }
            (Some(b), _) => {
                let x = input.build(&obs, rng);
                b.observe(&x, rng, mode)?;
                learner.actor.policy.act(&b.latent, rng, mode)?.remove(0)
            }
            (None, _) => space.random(rng),
        };
        let encoded = space.encode(&action);
        if let Some(b) = belief.as_mut() {
            b.record_action(&encoded);
        }
        let step = env.step(&action)?;
        let done = step.done();
        let ok = step.success();
        record.push(encoded, step.reward, step.continue_flag, step.obs.clone());
        obs = step.obs;
        if done {
            success = ok;
            break;
        }
    }
    let score = episode_score(kind, record.total_reward(), success);
    Ok(EpisodeOutcome { record, score })
}

/// Deterministic per-episode environment seed.
pub fn episode_seed(run_seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = Rng::with_stream(run_seed, 0x5eed_0000 + stream);
    rng.set_counter(u128::from(index) * 16);
    rng.next_u64()
}

/// Mode-action evaluation of the target policy.
pub fn evaluate(
    learner: &Learner,
    env: &mut dyn Environment,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>, HarnessError> {
    let input = TargetInput::for_learner(learner, 0.0, true);
    let mut rng = Rng::with_stream(seed, 0xe7a1);
    (0..episodes)
        .map(|k| {
            let s = episode_seed(seed, 1, k as u64);
            run_episode(learner, env, Collector::TargetPolicy, s, input, SampleMode::Mode, &mut rng).map(|o| o.score)
        })
        .collect()
}

/// Roll the target policy for at least `transitions` steps, tracking both
/// beliefs, and read off each side's one-step model estimates.
pub fn probe_episodes(
    learner: &Learner,
    env: &mut dyn Environment,
    transitions: usize,
    seed: u64,
) -> Result<Vec<ProbeEpisode>, HarnessError> {
    let scaff = learner.scaffolded_wm.as_ref().ok_or_else(|| {
        HarnessError::Probe("no scaffolded world model; the TD probe needs a scaffolded variant".into())
    })?;
    if learner.probe_critic.is_none() || learner.actor.critic.input != crate::agent::CriticInput::Both {
        return Err(HarnessError::Probe(
            "target-side probe critic missing; train with a privileged critic so the passive probe critic is built".into(),
        ));
    }
    let space = env.spec().action_space.clone();
    let input = TargetInput::for_learner(learner, 1.0, true);
    let mut rng = Rng::with_stream(seed, 0x9a0be);
    let mut out = Vec::new();
    let mut total = 0;
    let mut k = 0u64;
    while total < transitions {
        let mut obs = env.reset(episode_seed(seed, 2, k));
        k += 1;
        let mut tb = Belief::new(&learner.target_wm);
        let mut sb = Belief::new(scaff);
        let mut t_states = Vec::new();
        let mut s_states = Vec::new();
        let mut rewards = Vec::new();
        loop {
            tb.observe(&input.build(&obs, &mut rng), &mut rng, SampleMode::Sample)?;
            sb.observe(&obs.scaffolded(), &mut rng, SampleMode::Sample)?;
            t_states.push(tb.latent.clone());
            s_states.push(sb.latent.clone());
            let action = learner.actor.policy.act(&tb.latent, &mut rng, SampleMode::Sample)?.remove(0);
            let encoded = space.encode(&action);
            tb.record_action(&encoded);
            sb.record_action(&encoded);
            let step = env.step(&action)?;
            rewards.push(step.reward);
            let done = step.done();
            obs = step.obs;
            if done {
                break;
            }
        }
        tb.observe(&input.build(&obs, &mut rng), &mut rng, SampleMode::Sample)?;
        sb.observe(&obs.scaffolded(), &mut rng, SampleMode::Sample)?;
        t_states.push(tb.latent.clone());
        s_states.push(sb.latent.clone());
        total += rewards.len();

        // Estimates for transition t are read at state t + 1.
        let t_next = stack_states(&t_states[1..]);
        let s_next = stack_states(&s_states[1..]);
        let t_heads = learner.target_wm.predict_heads(&t_next)?;
        let s_heads = scaff.predict_heads(&s_next)?;
        let both = Tensor::hstack(&[&t_next.feature(), &s_next.feature()]);
        let s_values = learner.actor.critic.value(&both, true)?;
        let t_values = learner
            .probe_values(&t_next.feature())
            .ok_or_else(|| HarnessError::Probe("probe critic evaluation failed".into()))?;
        out.push(ProbeEpisode {
            rewards,
            scaffolded: ReturnEstimate {
                rewards: s_heads.reward,
                continues: s_heads.continue_prob,
                values: s_values,
            },
            target: ReturnEstimate {
                rewards: t_heads.reward,
                continues: t_heads.continue_prob,
                values: t_values,
            },
        });
    }
    Ok(out)
}
