//! Small partially observed environments with a target and a privileged
//! observation channel.
//!
//! Every environment draws its per-episode randomization from the reset seed
//! and is otherwise deterministic, so a seed plus an action sequence fully
//! determines an episode.

pub mod blind_nav;
pub mod car_flag;
mod error;
pub mod touch_search;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::numerics::Rng;

pub use blind_nav::BlindNav;
pub use car_flag::CarFlag;
pub use error::EnvError;
pub use touch_search::TouchSearch;

/// Paired observation: target channel `o⁻` and privileged channel `oᵖ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationBundle {
    pub target: Vec<f64>,
    pub privileged: Vec<f64>,
}

impl ObservationBundle {
    /// `o⁺ = [o⁻, oᵖ]`.
    pub fn scaffolded(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.target.len() + self.privileged.len());
        v.extend_from_slice(&self.target);
        v.extend_from_slice(&self.privileged);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous { dim: usize, low: f64, high: f64 },
}

impl ActionSpace {
    /// Width of the action vector fed to networks: one-hot for discrete
    /// spaces, bounds rescaled to `[-1, 1]` for continuous ones.
    pub fn encoded_dim(&self) -> usize {
        match self {
            ActionSpace::Discrete(n) => *n,
            ActionSpace::Continuous { dim, .. } => *dim,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete(_))
    }

    pub fn encode(&self, action: &Action) -> Vec<f64> {
        match (self, action) {
            (ActionSpace::Discrete(n), Action::Discrete(a)) => {
                let mut v = vec![0.0; *n];
                if *a < *n {
                    v[*a] = 1.0;
                }
                v
            }
            (ActionSpace::Continuous { low, high, .. }, Action::Continuous(v)) => {
                v.iter().map(|x| 2.0 * (x - low) / (high - low) - 1.0).collect()
            }
            (ActionSpace::Discrete(n), Action::Continuous(_)) => vec![0.0; *n],
            (ActionSpace::Continuous { dim, .. }, Action::Discrete(_)) => vec![0.0; *dim],
        }
    }

    /// Inverse of [`ActionSpace::encode`].
    pub fn decode(&self, encoded: &[f64]) -> Action {
        match self {
            ActionSpace::Discrete(_) => {
                let best = encoded
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
                Action::Discrete(best.0)
            }
            ActionSpace::Continuous { low, high, .. } => {
                Action::Continuous(encoded.iter().map(|x| low + 0.5 * (x + 1.0) * (high - low)).collect())
            }
        }
    }

    /// Uniformly random action, used by the scripted warm-up collector.
    pub fn random(&self, rng: &mut Rng) -> Action {
        match self {
            ActionSpace::Discrete(n) => Action::Discrete(rng.below(*n)),
            ActionSpace::Continuous { dim, low, high } => {
                Action::Continuous((0..*dim).map(|_| rng.uniform(*low, *high)).collect())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Undiscounted episode return.
    Return,
    /// 1 when the episode ended in success, else 0.
    Success,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub target_dim: usize,
    pub privileged_dim: usize,
    pub action_space: ActionSpace,
    pub max_episode_steps: usize,
    pub score_kind: ScoreKind,
}

impl EnvSpec {
    pub fn scaffolded_dim(&self) -> usize {
        self.target_dim + self.privileged_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: ObservationBundle,
    pub reward: f64,
    /// `false` exactly when the episode terminated.
    pub continue_flag: bool,
    /// Time limit reached without termination.
    pub truncated: bool,
    pub info: BTreeMap<String, f64>,
}

impl StepResult {
    pub fn done(&self) -> bool {
        !self.continue_flag || self.truncated
    }

    pub fn success(&self) -> bool {
        self.info.get("success").is_some_and(|s| *s > 0.0)
    }
}

pub trait Environment {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, seed: u64) -> ObservationBundle;
    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError>;
}

/// Episode bookkeeping shared by the implementations.
#[derive(Clone, Debug, Default)]
pub(crate) struct EpisodeClock {
    pub steps: usize,
    pub ended: bool,
}

impl EpisodeClock {
    pub fn reset(&mut self) {
        self.steps = 0;
        self.ended = false;
    }

    pub fn check(&self) -> Result<(), EnvError> {
        if self.ended {
            Err(EnvError::StepAfterEnd)
        } else {
            Ok(())
        }
    }

    /// Advance one step; returns whether the time limit is now reached.
    pub fn tick(&mut self, terminated: bool, cap: usize) -> bool {
        self.steps += 1;
        let truncated = !terminated && self.steps >= cap;
        self.ended = terminated || truncated;
        truncated
    }
}

/// Perturb the target channel with i.i.d. `N(0, sigma²)` noise.
pub fn add_observation_noise(
    bundle: &ObservationBundle,
    sigma: f64,
    rng: &mut Rng,
) -> Result<ObservationBundle, EnvError> {
    if !(sigma >= 0.0) {
        return Err(EnvError::NegativeSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(bundle.clone());
    }
    Ok(ObservationBundle {
        target: bundle.target.iter().map(|x| x + sigma * rng.normal()).collect(),
        privileged: bundle.privileged.clone(),
    })
}

pub const DEFAULT_OBS_NOISE: f64 = 0.05;

/// Wrapper adding target-channel noise to any environment. The noise stream
/// is derived from the reset seed.
pub struct NoisyEnv {
    inner: Box<dyn Environment + Send>,
    sigma: f64,
    rng: Rng,
}

impl NoisyEnv {
    pub fn new(inner: Box<dyn Environment + Send>, sigma: f64) -> Result<Self, EnvError> {
        if !(sigma >= 0.0) {
            return Err(EnvError::NegativeSigma(sigma));
        }
        Ok(Self {
            inner,
            sigma,
            rng: Rng::with_stream(0, 0x6e6f697365),
        })
    }
}

impl Environment for NoisyEnv {
    fn spec(&self) -> &EnvSpec {
        self.inner.spec()
    }

    fn reset(&mut self, seed: u64) -> ObservationBundle {
        self.rng = Rng::with_stream(seed, 0x6e6f697365);
        let obs = self.inner.reset(seed);
        add_observation_noise(&obs, self.sigma, &mut self.rng).expect("sigma checked at construction")
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        let mut result = self.inner.step(action)?;
        result.obs = add_observation_noise(&result.obs, self.sigma, &mut self.rng)?;
        Ok(result)
    }
}

pub const ENV_NAMES: &[&str] = &["blind_nav", "car_flag", "touch_search"];

/// Construct an environment by name, optionally wrapped with observation noise.
pub fn make_env(name: &str, obs_noise: f64) -> Result<Box<dyn Environment + Send>, EnvError> {
    let env: Box<dyn Environment + Send> = match name {
        "blind_nav" => Box::new(BlindNav::new()),
        "car_flag" => Box::new(CarFlag::new()),
        "touch_search" => Box::new(TouchSearch::new()),
        _ => {
            return Err(EnvError::UnknownEnv {
                name: name.to_string(),
                valid: ENV_NAMES.join(", "),
            })
        }
    };
    if obs_noise != 0.0 {
        Ok(Box::new(NoisyEnv::new(env, obs_noise)?))
    } else {
        Ok(env)
    }
}

/// Spec of a named environment without keeping an instance around.
pub fn env_spec(name: &str) -> Result<EnvSpec, EnvError> {
    Ok(make_env(name, 0.0)?.spec().clone())
}

/// One line of an episode log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLogLine {
    pub step: usize,
    pub action: Vec<f64>,
    pub reward: f64,
    #[serde(rename = "continue")]
    pub continue_flag: f64,
    pub target_obs: Vec<f64>,
    pub privileged_obs: Vec<f64>,
}

/// Write records as JSON lines, one object per step.
pub fn write_episode_log<W: Write>(out: &mut W, lines: &[EpisodeLogLine]) -> std::io::Result<()> {
    for line in lines {
        serde_json::to_writer(&mut *out, line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_episode_log(text: &str) -> Result<Vec<EpisodeLogLine>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
