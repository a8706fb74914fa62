//! Action heads: categorical for discrete spaces, tanh-squashed diagonal
//! Gaussian for continuous ones.

use crate::envs::{Action, ActionSpace};
use crate::numerics::dist::{softmax, std_from_raw, tape_categorical_entropy, tape_gaussian_entropy};
use crate::numerics::{Activation, Adam, AdamConfig, Mlp, ParamSet, Rng, SampleMode, Tape, Tensor, Var};
use crate::world_model::{LatentState, ModelKind};

use super::AgentError;

pub const POLICY_MIN_STD: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Policy {
    /// Kind of latent this policy consumes.
    pub kind: ModelKind,
    pub space: ActionSpace,
    pub input_dim: usize,
    pub net: Mlp,
    pub params: ParamSet,
    pub opt: Adam,
}

/// Distribution parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub enum PolicyDist {
    Categorical { logp: Var },
    /// Pre-squash Gaussian.
    Gaussian { mean: Var, std: Var },
}

/// A sampled action on the tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeAction {
    /// Encoded action as fed to the world model.
    pub encoded: Var,
    pub dist: PolicyDist,
}

impl Policy {
    pub fn new(
        kind: ModelKind,
        space: ActionSpace,
        input_dim: usize,
        hidden: usize,
        lr: f64,
        grad_clip: f64,
        name: &str,
        rng: &mut Rng,
    ) -> Self {
        let mut params = ParamSet::new();
        let out = match &space {
            ActionSpace::Discrete(n) => *n,
            ActionSpace::Continuous { dim, .. } => 2 * dim,
        };
        let net = Mlp::new(
            &mut params,
            name,
            &[input_dim, hidden, hidden, out],
            Activation::Silu,
            Activation::Linear,
            true,
            rng,
        );
        let mut cfg = AdamConfig::with_lr(lr);
        cfg.grad_clip = grad_clip;
        let opt = Adam::new(cfg, &params);
        Self {
            kind,
            space,
            input_dim,
            net,
            params,
            opt,
        }
    }

    pub fn check_kind(&self, kind: ModelKind, context: &str) -> Result<(), AgentError> {
        if kind != self.kind {
            return Err(AgentError::KindMismatch {
                context: context.to_string(),
                expected: self.kind,
                actual: kind,
            });
        }
        Ok(())
    }

    pub fn tape_dist<'p>(&'p self, tape: &mut Tape<'p>, feat: Var) -> Result<PolicyDist, AgentError> {
        let out = self.net.forward(tape, &self.params, feat)?;
        Ok(match &self.space {
            ActionSpace::Discrete(_) => PolicyDist::Categorical {
                logp: tape.log_softmax(out),
            },
            ActionSpace::Continuous { dim, .. } => {
                let mean = tape.slice_cols(out, 0, *dim);
                let raw = tape.slice_cols(out, *dim, *dim);
                PolicyDist::Gaussian {
                    mean,
                    std: std_from_raw(tape, raw, POLICY_MIN_STD),
                }
            }
        })
    }

    /// Draw (or take the mode of) an action for every row.
    pub fn tape_sample<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        feat: Var,
        rng: &mut Rng,
        mode: SampleMode,
    ) -> Result<TapeAction, AgentError> {
        let dist = self.tape_dist(tape, feat)?;
        let encoded = match dist {
            PolicyDist::Categorical { logp } => {
                let lp = tape.value(logp);
                let mut onehot = Tensor::zeros(lp.rows, lp.cols);
                for r in 0..lp.rows {
                    let row = lp.row_slice(r);
                    let a = match mode {
                        SampleMode::Mode => argmax(row),
                        SampleMode::Sample => rng.categorical(&row.iter().map(|x| x.exp()).collect::<Vec<_>>()),
                    };
                    onehot.set(r, a, 1.0);
                }
                tape.constant(onehot)
            }
            PolicyDist::Gaussian { mean, std } => {
                let u = crate::numerics::dist::tape_sample_gaussian(tape, mean, std, rng, mode)?;
                tape.tanh(u)
            }
        };
        Ok(TapeAction { encoded, dist })
    }

    /// Row-wise entropy (`N × 1`); for the squashed Gaussian this is the
    /// entropy before squashing.
    pub fn tape_entropy(&self, tape: &mut Tape<'_>, dist: PolicyDist) -> Var {
        match dist {
            PolicyDist::Categorical { logp } => tape_categorical_entropy(tape, logp),
            PolicyDist::Gaussian { std, .. } => tape_gaussian_entropy(tape, std),
        }
    }

    /// Act on a batch of latents.
    pub fn act(&self, latent: &LatentState, rng: &mut Rng, mode: SampleMode) -> Result<Vec<Action>, AgentError> {
        self.check_kind(latent.kind, "act")?;
        self.act_on_features(&latent.feature(), rng, mode)
    }

    pub fn act_on_features(&self, feat: &Tensor, rng: &mut Rng, mode: SampleMode) -> Result<Vec<Action>, AgentError> {
        let mut tape = Tape::new();
        let f = tape.constant(feat.clone());
        let a = self.tape_sample(&mut tape, f, rng, mode)?;
        let enc = tape.value(a.encoded);
        Ok((0..enc.rows).map(|r| self.space.decode(enc.row_slice(r))).collect())
    }

    /// Action probabilities (discrete) for a batch of features.
    pub fn probs(&self, feat: &Tensor) -> Result<Tensor, AgentError> {
        let mut tape = Tape::new();
        let f = tape.constant(feat.clone());
        let out = self.net.forward(&mut tape, &self.params, f)?;
        let logits = tape.value(out);
        let mut p = Tensor::zeros(logits.rows, logits.cols);
        for r in 0..logits.rows {
            p.row_slice_mut(r).copy_from_slice(&softmax(logits.row_slice(r)));
        }
        Ok(p)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}
