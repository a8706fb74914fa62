//! Value heads with a slowly tracking copy used for return targets.

use serde::{Deserialize, Serialize};

use crate::numerics::{Activation, Adam, AdamConfig, Mlp, ParamSet, Rng, Tape, Tensor, Var};

use super::AgentError;

/// Which latents a critic reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticInput {
    Target,
    Scaffolded,
    /// `[s⁻, s⁺]`.
    Both,
}

#[derive(Clone, Debug)]
pub struct Critic {
    pub input: CriticInput,
    pub input_dim: usize,
    pub net: Mlp,
    pub params: ParamSet,
    pub slow: ParamSet,
    pub opt: Adam,
}

impl Critic {
    pub fn new(input: CriticInput, input_dim: usize, hidden: usize, lr: f64, grad_clip: f64, name: &str, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let net = Mlp::new(
            &mut params,
            name,
            &[input_dim, hidden, hidden, 1],
            Activation::Silu,
            Activation::Linear,
            true,
            rng,
        );
        let slow = params.clone();
        let mut cfg = AdamConfig::with_lr(lr);
        cfg.grad_clip = grad_clip;
        let opt = Adam::new(cfg, &params);
        Self {
            input,
            input_dim,
            net,
            params,
            slow,
            opt,
        }
    }

    pub fn tape_value<'p>(&'p self, tape: &mut Tape<'p>, feat: Var, slow: bool) -> Result<Var, AgentError> {
        let set = if slow { &self.slow } else { &self.params };
        Ok(self.net.forward(tape, set, feat)?)
    }

    pub fn value(&self, feat: &Tensor, slow: bool) -> Result<Vec<f64>, AgentError> {
        let mut tape = Tape::new();
        let f = tape.constant(feat.clone());
        let v = self.tape_value(&mut tape, f, slow)?;
        Ok(tape.value(v).data.clone())
    }

    /// `slow ← (1 − rate)·slow + rate·params`.
    pub fn update_slow(&mut self, rate: f64) {
        self.slow.mix_from(&self.params, rate);
    }
}
