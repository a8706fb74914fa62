//! Declarative variant presets: which components receive privileged
//! information, plus the variant-specific loss terms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{policy_kl, AgentError, CriticInput, ImaginationMode, Policy};
use crate::envs::EnvSpec;
use crate::numerics::{Rng, Tape, Tensor};
use crate::world_model::{SequenceBatch, WmError, WmLayout, WorldModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VariantError {
    #[error("unknown variant `{name}`; valid variants: {}", valid.join(", "))]
    UnknownVariant { name: String, valid: Vec<String> },
    #[error("dropout cutoff fraction must lie in (0, 1], got {0}")]
    InvalidCutoff(f64),
    #[error("the informed decoder is not enabled for this world model")]
    InformedDisabled,
    #[error(transparent)]
    WorldModel(#[from] WmError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// World model the target policy is trained in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImaginationModel {
    Scaffolded,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub wm_for_imagination: ImaginationModel,
    pub critic_privileged: bool,
    pub exploration_policy: bool,
    pub repr_scaffolding: bool,
    pub informed_decoder: bool,
    pub bc_teacher: bool,
    pub bc_weight: f64,
    pub guided_dropout: bool,
    pub dropout_cutoff_frac: f64,
    /// The deployed policy reads `o⁺` (upper-bound reference only).
    pub policy_privileged: bool,
}

pub const VARIANT_NAMES: [&str; 10] = [
    "scaffolder",
    "dreamer",
    "no_scaff_wm",
    "no_scaff_critic",
    "no_scaff_explore",
    "no_scaff_repr",
    "informed_dreamer",
    "dreamer_bc",
    "guided_obs",
    "privileged_dreamer",
];

/// Behaviour-cloning weights tried for the teacher-student baseline.
pub const BC_WEIGHT_SWEEP: [f64; 3] = [0.1, 0.01, 0.001];

pub const DEFAULT_DROPOUT_CUTOFF: f64 = 0.5;

impl VariantConfig {
    pub fn scaffolder() -> Self {
        Self {
            wm_for_imagination: ImaginationModel::Scaffolded,
            critic_privileged: true,
            exploration_policy: true,
            repr_scaffolding: true,
            informed_decoder: false,
            bc_teacher: false,
            bc_weight: 0.0,
            guided_dropout: false,
            dropout_cutoff_frac: DEFAULT_DROPOUT_CUTOFF,
            policy_privileged: false,
        }
    }

    pub fn dreamer() -> Self {
        Self {
            wm_for_imagination: ImaginationModel::Target,
            critic_privileged: false,
            exploration_policy: false,
            repr_scaffolding: false,
            ..Self::scaffolder()
        }
    }

    /// True when a scaffolded world model has to exist.
    pub fn needs_scaffolded_wm(&self) -> bool {
        self.wm_for_imagination == ImaginationModel::Scaffolded
            || self.critic_privileged
            || self.exploration_policy
            || self.bc_teacher
    }

    /// The target model reads `o⁺` as input.
    pub fn target_reads_privileged(&self) -> bool {
        self.policy_privileged || self.guided_dropout
    }

    pub fn target_layout(&self, spec: &EnvSpec) -> WmLayout {
        WmLayout {
            input_privileged: self.target_reads_privileged(),
            decode_privileged: self.repr_scaffolding,
            informed_head: self.informed_decoder,
            ..WmLayout::target(spec.target_dim, spec.privileged_dim, spec.action_space.encoded_dim())
        }
    }

    pub fn scaffolded_layout(&self, spec: &EnvSpec) -> Option<WmLayout> {
        self.needs_scaffolded_wm()
            .then(|| WmLayout::scaffolded(spec.target_dim, spec.privileged_dim, spec.action_space.encoded_dim()))
    }

    pub fn imagination_mode(&self) -> ImaginationMode {
        match self.wm_for_imagination {
            ImaginationModel::Scaffolded => ImaginationMode::Nested,
            ImaginationModel::Target => ImaginationMode::Target {
                track_scaffolded: self.critic_privileged,
            },
        }
    }

    pub fn critic_input(&self) -> CriticInput {
        if self.critic_privileged {
            CriticInput::Both
        } else {
            CriticInput::Target
        }
    }

    /// A passive target-only critic is needed for the TD-error probe when
    /// the main critic reads privileged latents.
    pub fn needs_probe_critic(&self) -> bool {
        self.critic_privileged && self.needs_scaffolded_wm()
    }

    /// Keep probability of `oᵖ` at `step` for guided observability, or 1.
    pub fn privileged_keep(&self, step: u64, total_steps: u64) -> Result<f64, VariantError> {
        if self.guided_dropout {
            guided_dropout_prob(step, total_steps, self.dropout_cutoff_frac)
        } else {
            Ok(1.0)
        }
    }

    /// Field names whose values differ from `other`.
    pub fn diff(&self, other: &Self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let mut check = |name, differs: bool| {
            if differs {
                out.push(name);
            }
        };
        check("wm_for_imagination", self.wm_for_imagination != other.wm_for_imagination);
        check("critic_privileged", self.critic_privileged != other.critic_privileged);
        check("exploration_policy", self.exploration_policy != other.exploration_policy);
        check("repr_scaffolding", self.repr_scaffolding != other.repr_scaffolding);
        check("informed_decoder", self.informed_decoder != other.informed_decoder);
        check("bc_teacher", self.bc_teacher != other.bc_teacher);
        check("bc_weight", self.bc_weight != other.bc_weight);
        check("guided_dropout", self.guided_dropout != other.guided_dropout);
        check("dropout_cutoff_frac", self.dropout_cutoff_frac != other.dropout_cutoff_frac);
        check("policy_privileged", self.policy_privileged != other.policy_privileged);
        out
    }
}

pub fn make_variant(name: &str) -> Result<VariantConfig, VariantError> {
    let base = VariantConfig::scaffolder();
    let dreamer = VariantConfig::dreamer();
    Ok(match name {
        "scaffolder" => base,
        "dreamer" => dreamer,
        "no_scaff_wm" => VariantConfig {
            wm_for_imagination: ImaginationModel::Target,
            ..base
        },
        "no_scaff_critic" => VariantConfig {
            critic_privileged: false,
            ..base
        },
        "no_scaff_explore" => VariantConfig {
            exploration_policy: false,
            ..base
        },
        "no_scaff_repr" => VariantConfig {
            repr_scaffolding: false,
            ..base
        },
        "informed_dreamer" => VariantConfig {
            informed_decoder: true,
            ..dreamer
        },
        "dreamer_bc" => VariantConfig {
            bc_teacher: true,
            bc_weight: BC_WEIGHT_SWEEP[0],
            ..dreamer
        },
        "guided_obs" => VariantConfig {
            guided_dropout: true,
            ..dreamer
        },
        "privileged_dreamer" => VariantConfig {
            policy_privileged: true,
            ..dreamer
        },
        _ => {
            return Err(VariantError::UnknownVariant {
                name: name.to_string(),
                valid: VARIANT_NAMES.iter().map(|s| s.to_string()).collect(),
            })
        }
    })
}

/// The four single-component ablations of the scaffolded preset.
pub const ABLATIONS: [&str; 4] = ["no_scaff_wm", "no_scaff_critic", "no_scaff_explore", "no_scaff_repr"];

/// One preset per behaviour-cloning weight of the sweep.
pub fn bc_sweep() -> Vec<VariantConfig> {
    BC_WEIGHT_SWEEP
        .iter()
        .map(|&bc_weight| VariantConfig {
            bc_weight,
            ..make_variant("dreamer_bc").expect("known preset")
        })
        .collect()
}

/// `keep = max(0, 1 − step / (cutoff_frac · total_steps))`.
pub fn guided_dropout_prob(step: u64, total_steps: u64, cutoff_frac: f64) -> Result<f64, VariantError> {
    if !(cutoff_frac > 0.0 && cutoff_frac <= 1.0) {
        return Err(VariantError::InvalidCutoff(cutoff_frac));
    }
    let horizon = cutoff_frac * total_steps as f64;
    if horizon <= 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 - step as f64 / horizon).max(0.0))
}

/// Squared-error reconstruction of `oᵖ` from the target latent, as added to
/// the target world-model loss.
pub fn informed_decoder_loss(target_wm: &WorldModel, batch: &SequenceBatch, rng: &mut Rng) -> Result<f64, VariantError> {
    let mut tape = Tape::new();
    let vars = target_wm.wm_loss(&mut tape, batch, 1.0, rng)?;
    let loss = vars.informed.ok_or(VariantError::InformedDisabled)?;
    Ok(tape.value(loss).scalar())
}

/// `bc_weight · mean KL(teacher ‖ student)` over paired replayed states.
pub fn bc_loss(
    student: &Policy,
    teacher: &Policy,
    student_features: &Tensor,
    teacher_features: &Tensor,
    bc_weight: f64,
) -> Result<f64, VariantError> {
    let kl = policy_kl(teacher, teacher_features, student, student_features)?;
    Ok(bc_weight * kl.iter().sum::<f64>() / kl.len().max(1) as f64)
}
