//! Recurrent state-space world models.
//!
//! The scaffolded model reads `o⁺` and additionally owns a transdecoder that
//! predicts `o⁻` from its latent. The target model reads `o⁻` (or a masked
//! `o⁺` for the guided-observability baseline) and may decode `o⁺` when
//! representation scaffolding is enabled.

mod batch;
mod error;
mod train;

use serde::{Deserialize, Serialize};

use crate::numerics::dist::{std_from_raw, tape_sample_gaussian};
use crate::numerics::{Activation, Adam, AdamConfig, Gru, Mlp, ParamSet, Rng, SampleMode, Tape, Tensor, Var};

pub use batch::{strip_privileged, SequenceBatch};
pub use error::WmError;
pub use train::{stack_states, WmLossReport, WmLossVars, WmStepOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Target,
    Scaffolded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WmConfig {
    pub deter: usize,
    pub stoch: usize,
    pub hidden: usize,
    pub embed: usize,
    /// Hidden layers in the reward and continue heads.
    pub head_layers: usize,
    pub min_std: f64,
    pub free_nats: f64,
    pub beta_pred: f64,
    pub beta_dyn: f64,
    pub beta_rep: f64,
    pub transdec_weight: f64,
    pub lr: f64,
    pub grad_clip: f64,
}

impl Default for WmConfig {
    fn default() -> Self {
        Self {
            deter: 32,
            stoch: 16,
            hidden: 64,
            embed: 32,
            head_layers: 2,
            min_std: 0.1,
            free_nats: 1.0,
            beta_pred: 1.0,
            beta_dyn: 0.5,
            beta_rep: 0.1,
            transdec_weight: 1.0,
            lr: 1e-3,
            grad_clip: 100.0,
        }
    }
}

/// Which inputs and reconstruction targets a world model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WmLayout {
    pub kind: ModelKind,
    pub target_dim: usize,
    pub privileged_dim: usize,
    pub action_dim: usize,
    /// Input is `o⁺` (always true for the scaffolded kind).
    pub input_privileged: bool,
    /// Decoder reconstructs `o⁺` instead of the input channel alone.
    pub decode_privileged: bool,
    /// Extra head predicting `oᵖ` from the latent.
    pub informed_head: bool,
}

impl WmLayout {
    pub fn scaffolded(target_dim: usize, privileged_dim: usize, action_dim: usize) -> Self {
        Self {
            kind: ModelKind::Scaffolded,
            target_dim,
            privileged_dim,
            action_dim,
            input_privileged: true,
            decode_privileged: true,
            informed_head: false,
        }
    }

    pub fn target(target_dim: usize, privileged_dim: usize, action_dim: usize) -> Self {
        Self {
            kind: ModelKind::Target,
            target_dim,
            privileged_dim,
            action_dim,
            input_privileged: false,
            decode_privileged: false,
            informed_head: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.target_dim + if self.input_privileged { self.privileged_dim } else { 0 }
    }

    pub fn decoder_dim(&self) -> usize {
        if self.input_privileged || self.decode_privileged {
            self.target_dim + self.privileged_dim
        } else {
            self.target_dim
        }
    }
}

/// Batched latent state, one row per batch element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub kind: ModelKind,
    pub h: Tensor,
    pub z: Tensor,
    pub z_mean: Tensor,
    pub z_std: Tensor,
}

impl LatentState {
    pub fn rows(&self) -> usize {
        self.h.rows
    }

    /// `[h, z]`, the input of every head.
    pub fn feature(&self) -> Tensor {
        Tensor::hstack(&[&self.h, &self.z])
    }

    pub fn gather(&self, idx: &[usize]) -> Self {
        Self {
            kind: self.kind,
            h: self.h.gather_rows(idx),
            z: self.z.gather_rows(idx),
            z_mean: self.z_mean.gather_rows(idx),
            z_std: self.z_std.gather_rows(idx),
        }
    }
}

/// A latent state recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeLatent {
    pub kind: ModelKind,
    pub h: Var,
    pub z: Var,
    pub mean: Var,
    pub std: Var,
}

impl TapeLatent {
    pub fn feature(&self, tape: &mut Tape<'_>) -> Var {
        tape.concat(&[self.h, self.z])
    }

    pub fn constant(tape: &mut Tape<'_>, state: &LatentState) -> Self {
        Self {
            kind: state.kind,
            h: tape.constant(state.h.clone()),
            z: tape.constant(state.z.clone()),
            mean: tape.constant(state.z_mean.clone()),
            std: tape.constant(state.z_std.clone()),
        }
    }

    pub fn values(&self, tape: &Tape<'_>) -> LatentState {
        LatentState {
            kind: self.kind,
            h: tape.value(self.h).clone(),
            z: tape.value(self.z).clone(),
            z_mean: tape.value(self.mean).clone(),
            z_std: tape.value(self.std).clone(),
        }
    }

    pub fn detach(&self, tape: &mut Tape<'_>) -> Self {
        Self {
            kind: self.kind,
            h: tape.detach(self.h),
            z: tape.detach(self.z),
            mean: tape.detach(self.mean),
            std: tape.detach(self.std),
        }
    }
}

/// Head outputs for a batch of latents.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadPrediction {
    pub reward: Vec<f64>,
    pub continue_prob: Vec<f64>,
    pub obs_recon: Tensor,
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub layout: WmLayout,
    pub config: WmConfig,
    pub params: ParamSet,
    pub opt: Adam,
    pub embed_net: Mlp,
    pub sequence_net: Gru,
    pub posterior_head: Mlp,
    pub prior_head: Mlp,
    pub reward_head: Mlp,
    pub continue_head: Mlp,
    pub decoder_head: Mlp,
    pub transdecoder_head: Option<Mlp>,
    pub informed_head: Option<Mlp>,
}

impl WorldModel {
    pub fn new(layout: WmLayout, config: WmConfig, rng: &mut Rng) -> Self {
        let mut layout = layout;
        if layout.kind == ModelKind::Scaffolded {
            layout.input_privileged = true;
            layout.decode_privileged = true;
            layout.informed_head = false;
        }
        let c = &config;
        let feat = c.deter + c.stoch;
        let mut p = ParamSet::new();
        let silu = Activation::Silu;
        let lin = Activation::Linear;
        let embed_net = Mlp::new(&mut p, "embed", &[layout.input_dim(), c.hidden, c.embed], silu, lin, false, rng);
        let sequence_net = Gru::new(&mut p, "seq", c.stoch + layout.action_dim, c.deter, rng);
        let posterior_head = Mlp::new(&mut p, "post", &[c.deter + c.embed, c.hidden, 2 * c.stoch], silu, lin, false, rng);
        let prior_head = Mlp::new(&mut p, "prior", &[c.deter, c.hidden, 2 * c.stoch], silu, lin, false, rng);
        let mut head_sizes = vec![feat];
        head_sizes.extend(std::iter::repeat_n(c.hidden, c.head_layers.max(1)));
        head_sizes.push(1);
        let reward_head = Mlp::new(&mut p, "reward", &head_sizes, silu, lin, true, rng);
        let continue_head = Mlp::new(&mut p, "cont", &head_sizes, silu, lin, true, rng);
        let decoder_head = Mlp::new(&mut p, "dec", &[feat, c.hidden, layout.decoder_dim()], silu, lin, false, rng);
        let transdecoder_head = (layout.kind == ModelKind::Scaffolded)
            .then(|| Mlp::new(&mut p, "transdec", &[feat, c.hidden, layout.target_dim], silu, lin, false, rng));
        let informed_head = layout
            .informed_head
            .then(|| Mlp::new(&mut p, "informed", &[feat, c.hidden, layout.privileged_dim], silu, lin, false, rng));
        let mut adam = AdamConfig::with_lr(c.lr);
        adam.grad_clip = c.grad_clip;
        let opt = Adam::new(adam, &p);
        Self {
            layout,
            config,
            params: p,
            opt,
            embed_net,
            sequence_net,
            posterior_head,
            prior_head,
            reward_head,
            continue_head,
            decoder_head,
            transdecoder_head,
            informed_head,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.layout.kind
    }

    pub fn feature_dim(&self) -> usize {
        self.config.deter + self.config.stoch
    }

    /// Names of the constructed sub-networks.
    pub fn components(&self) -> Vec<&'static str> {
        let mut out = vec!["embed", "sequence", "posterior", "prior", "reward", "continue", "decoder"];
        if self.transdecoder_head.is_some() {
            out.push("transdecoder");
        }
        if self.informed_head.is_some() {
            out.push("informed");
        }
        out
    }

    fn check_kind(&self, kind: ModelKind, context: &str) -> Result<(), WmError> {
        if kind != self.kind() {
            return Err(WmError::KindMismatch {
                context: context.to_string(),
                expected: self.kind(),
                actual: kind,
            });
        }
        Ok(())
    }

    /// All-zero state (`h = 0`, `z = 0`) for `rows` batch elements.
    pub fn initial(&self, rows: usize) -> LatentState {
        LatentState {
            kind: self.kind(),
            h: Tensor::zeros(rows, self.config.deter),
            z: Tensor::zeros(rows, self.config.stoch),
            z_mean: Tensor::zeros(rows, self.config.stoch),
            z_std: Tensor::filled(rows, self.config.stoch, 1.0),
        }
    }

    // ---- tape-level building blocks ----

    pub fn tape_embed<'p>(&'p self, tape: &mut Tape<'p>, obs: Var) -> Result<Var, WmError> {
        Ok(self.embed_net.forward(tape, &self.params, obs)?)
    }

    /// Shared sequence update `h_t = f(h_{t−1}, [z_{t−1}, a_{t−1}])`.
    pub fn tape_sequence<'p>(&'p self, tape: &mut Tape<'p>, prev: &TapeLatent, action: Var) -> Result<Var, WmError> {
        let x = tape.concat(&[prev.z, action]);
        Ok(self.sequence_net.step(tape, &self.params, prev.h, x)?)
    }

    fn tape_gaussian<'p>(&'p self, tape: &mut Tape<'p>, net: &Mlp, input: Var) -> Result<(Var, Var), WmError> {
        let out = net.forward(tape, &self.params, input)?;
        let s = self.config.stoch;
        let mean = tape.slice_cols(out, 0, s);
        let raw = tape.slice_cols(out, s, s);
        let std = std_from_raw(tape, raw, self.config.min_std);
        Ok((mean, std))
    }

    /// Posterior statistics given `h_t` and the observation embedding.
    pub fn tape_posterior_stats<'p>(&'p self, tape: &mut Tape<'p>, h: Var, embed: Var) -> Result<(Var, Var), WmError> {
        let input = tape.concat(&[h, embed]);
        self.tape_gaussian(tape, &self.posterior_head, input)
    }

    /// Prior statistics given `h_t` only.
    pub fn tape_prior_stats<'p>(&'p self, tape: &mut Tape<'p>, h: Var) -> Result<(Var, Var), WmError> {
        self.tape_gaussian(tape, &self.prior_head, h)
    }

    pub fn tape_posterior_step<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        prev: &TapeLatent,
        action: Var,
        embed: Var,
        rng: &mut Rng,
        mode: SampleMode,
    ) -> Result<TapeLatent, WmError> {
        self.check_kind(prev.kind, "posterior step")?;
        let h = self.tape_sequence(tape, prev, action)?;
        let (mean, std) = self.tape_posterior_stats(tape, h, embed)?;
        let z = tape_sample_gaussian(tape, mean, std, rng, mode)?;
        Ok(TapeLatent {
            kind: self.kind(),
            h,
            z,
            mean,
            std,
        })
    }

    pub fn tape_prior_step<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        prev: &TapeLatent,
        action: Var,
        rng: &mut Rng,
        mode: SampleMode,
    ) -> Result<TapeLatent, WmError> {
        self.check_kind(prev.kind, "prior step")?;
        let h = self.tape_sequence(tape, prev, action)?;
        let (mean, std) = self.tape_prior_stats(tape, h)?;
        let z = tape_sample_gaussian(tape, mean, std, rng, mode)?;
        Ok(TapeLatent {
            kind: self.kind(),
            h,
            z,
            mean,
            std,
        })
    }

    pub fn tape_reward<'p>(&'p self, tape: &mut Tape<'p>, feat: Var) -> Result<Var, WmError> {
        Ok(self.reward_head.forward(tape, &self.params, feat)?)
    }

    /// Continue logit; the probability is its sigmoid.
    pub fn tape_continue_logit<'p>(&'p self, tape: &mut Tape<'p>, feat: Var) -> Result<Var, WmError> {
        Ok(self.continue_head.forward(tape, &self.params, feat)?)
    }

    pub fn tape_decode<'p>(&'p self, tape: &mut Tape<'p>, feat: Var) -> Result<Var, WmError> {
        Ok(self.decoder_head.forward(tape, &self.params, feat)?)
    }

    pub fn tape_transdecode<'p>(&'p self, tape: &mut Tape<'p>, latent: &TapeLatent) -> Result<Var, WmError> {
        let head = self.transdecoder_head.as_ref().ok_or(WmError::NoTransdecoder)?;
        if latent.kind != ModelKind::Scaffolded {
            return Err(WmError::KindMismatch {
                context: "transdecode".into(),
                expected: ModelKind::Scaffolded,
                actual: latent.kind,
            });
        }
        let feat = latent.feature(tape);
        Ok(head.forward(tape, &self.params, feat)?)
    }

    pub fn tape_informed<'p>(&'p self, tape: &mut Tape<'p>, feat: Var) -> Result<Var, WmError> {
        let head = self.informed_head.as_ref().ok_or(WmError::NoInformedHead)?;
        Ok(head.forward(tape, &self.params, feat)?)
    }

    // ---- plain-value wrappers ----

    pub fn embed(&self, obs: &Tensor) -> Result<Tensor, WmError> {
        let mut tape = Tape::new();
        let x = tape.constant(obs.clone());
        let e = self.tape_embed(&mut tape, x)?;
        Ok(tape.value(e).clone())
    }

    pub fn posterior_step(
        &self,
        prev: &LatentState,
        action: &Tensor,
        embed: &Tensor,
        rng: &mut Rng,
        mode: SampleMode,
    ) -> Result<LatentState, WmError> {
        let mut tape = Tape::new();
        let p = TapeLatent::constant(&mut tape, prev);
        let a = tape.constant(action.clone());
        let e = tape.constant(embed.clone());
        let next = self.tape_posterior_step(&mut tape, &p, a, e, rng, mode)?;
        Ok(next.values(&tape))
    }

    pub fn prior_step(
        &self,
        prev: &LatentState,
        action: &Tensor,
        rng: &mut Rng,
        mode: SampleMode,
    ) -> Result<LatentState, WmError> {
        let mut tape = Tape::new();
        let p = TapeLatent::constant(&mut tape, prev);
        let a = tape.constant(action.clone());
        let next = self.tape_prior_step(&mut tape, &p, a, rng, mode)?;
        Ok(next.values(&tape))
    }

    /// Embed an observation and take a posterior step.
    pub fn observe(
        &self,
        prev: &LatentState,
        action: &Tensor,
        obs: &Tensor,
        rng: &mut Rng,
        mode: SampleMode,
    ) -> Result<LatentState, WmError> {
        let e = self.embed(obs)?;
        self.posterior_step(prev, action, &e, rng, mode)
    }

    pub fn predict_heads(&self, latent: &LatentState) -> Result<HeadPrediction, WmError> {
        self.check_kind(latent.kind, "predict heads")?;
        let mut tape = Tape::new();
        let feat = tape.constant(latent.feature());
        let r = self.tape_reward(&mut tape, feat)?;
        let c = self.tape_continue_logit(&mut tape, feat)?;
        let c = tape.sigmoid(c);
        let d = self.tape_decode(&mut tape, feat)?;
        Ok(HeadPrediction {
            reward: tape.value(r).data.clone(),
            continue_prob: tape.value(c).data.clone(),
            obs_recon: tape.value(d).clone(),
        })
    }

    /// Estimate of `o⁻` from a scaffolded latent.
    pub fn transdecode(&self, latent: &LatentState) -> Result<Tensor, WmError> {
        let mut tape = Tape::new();
        let l = TapeLatent::constant(&mut tape, latent);
        let out = self.tape_transdecode(&mut tape, &l)?;
        Ok(tape.value(out).clone())
    }

    /// Build this model's input from a target and privileged observation.
    pub fn input_from(&self, target: &Tensor, privileged: &Tensor) -> Tensor {
        if self.layout.input_privileged {
            Tensor::hstack(&[target, privileged])
        } else {
            target.clone()
        }
    }
}
