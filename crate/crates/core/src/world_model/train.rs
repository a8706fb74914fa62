//! World-model loss: reconstruction, reward and continue likelihoods plus
//! KL balancing with free nats.

use serde::{Deserialize, Serialize};

use super::{LatentState, ModelKind, SequenceBatch, TapeLatent, WmError, WorldModel};
use crate::numerics::dist::{tape_kl_diag_gaussian, tape_sample_gaussian};
use crate::numerics::{Rng, SampleMode, Tape, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WmLossReport {
    pub pred_loss: f64,
    pub dyn_loss: f64,
    pub rep_loss: f64,
    pub transdec_loss: f64,
    pub informed_loss: Option<f64>,
    pub total: f64,
    pub obs_loss: f64,
    pub reward_loss: f64,
    pub continue_loss: f64,
    /// Mean KL(posterior ‖ prior) before free-nat clipping.
    pub raw_kl: f64,
    pub grad_norm: f64,
}

/// Output of one training step.
#[derive(Clone, Debug)]
pub struct WmStepOutput {
    pub report: WmLossReport,
    /// Posterior states of every step, row `t·B + b`.
    pub posterior: LatentState,
    /// Matching validity mask (1 for real steps).
    pub mask: Vec<f64>,
}

/// Loss expression recorded on a tape.
pub struct WmLossVars {
    pub total: Var,
    pub obs: Var,
    pub reward: Var,
    pub cont: Var,
    pub dyn_kl: Var,
    pub rep_kl: Var,
    pub raw_kl: Var,
    pub transdec: Option<Var>,
    pub informed: Option<Var>,
    pub posterior: Vec<TapeLatent>,
}

fn masked_mean(tape: &mut Tape<'_>, per_row: Var, mask: &Tensor) -> Var {
    let n = mask.data.iter().sum::<f64>().max(1.0);
    let m = tape.constant(mask.clone());
    let w = tape.mul(per_row, m);
    let s = tape.sum(w);
    tape.scale(s, 1.0 / n)
}

/// Row-wise `0.5·Σ (pred − target)²`.
fn half_squared_error(tape: &mut Tape<'_>, pred: Var, target: Tensor) -> Var {
    let t = tape.constant(target);
    let d = tape.sub(pred, t);
    let sq = tape.square(d);
    let rs = tape.row_sum(sq);
    tape.scale(rs, 0.5)
}

impl WorldModel {
    /// Build the full loss on `tape`. `privileged_keep` is the per-step
    /// probability of keeping `oᵖ` in the input of a target-kind model that
    /// reads `o⁺`; other models ignore it.
    pub fn wm_loss<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        batch: &SequenceBatch,
        privileged_keep: f64,
        rng: &mut Rng,
    ) -> Result<WmLossVars, WmError> {
        let (b, l) = (batch.batch, batch.length);
        if l < 2 {
            return Err(WmError::SequenceTooShort(l));
        }
        let layout = self.layout;
        let dropout = layout.kind == ModelKind::Target && layout.input_privileged && privileged_keep < 1.0;
        let inputs: Vec<Tensor> = (0..l)
            .map(|t| {
                if dropout {
                    batch.scaffolded_dropout(t, privileged_keep, rng)
                } else if layout.input_privileged {
                    batch.scaffolded(t)
                } else {
                    batch.target[t].clone()
                }
            })
            .collect();
        let input_refs: Vec<&Tensor> = inputs.iter().collect();
        let obs_all = tape.constant(Tensor::vstack(&input_refs));
        let embed_all = self.tape_embed(tape, obs_all)?;

        let mut state = TapeLatent::constant(tape, &self.initial(b));
        let mut posterior = Vec::with_capacity(l);
        let (mut qm, mut qs, mut pm, mut ps) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for t in 0..l {
            let action = tape.constant(batch.actions[t].clone());
            let e = tape.slice_rows(embed_all, t * b, b);
            let h = self.tape_sequence(tape, &state, action)?;
            let (prior_mean, prior_std) = self.tape_prior_stats(tape, h)?;
            let (post_mean, post_std) = self.tape_posterior_stats(tape, h, e)?;
            let z = tape_sample_gaussian(tape, post_mean, post_std, rng, SampleMode::Sample)?;
            state = TapeLatent {
                kind: self.kind(),
                h,
                z,
                mean: post_mean,
                std: post_std,
            };
            posterior.push(state);
            qm.push(post_mean);
            qs.push(post_std);
            pm.push(prior_mean);
            ps.push(prior_std);
        }

        let feats: Vec<Var> = posterior.iter().map(|s| s.feature(tape)).collect();
        let feat = tape.vstack(&feats);
        let stack = |parts: &[Tensor]| Tensor::vstack(&parts.iter().collect::<Vec<_>>());
        let mask = stack(&batch.mask);
        let first = stack(&batch.is_first);
        let trans_mask = Tensor::from_vec(
            mask.rows,
            1,
            mask.data.iter().zip(&first.data).map(|(m, f)| m * (1.0 - f)).collect(),
        );

        let recon_target: Vec<Tensor> = (0..l)
            .map(|t| {
                if layout.decoder_dim() == layout.target_dim {
                    batch.target[t].clone()
                } else {
                    batch.scaffolded(t)
                }
            })
            .collect();
        let dec = self.tape_decode(tape, feat)?;
        let obs_rows = half_squared_error(tape, dec, stack(&recon_target));
        let obs = masked_mean(tape, obs_rows, &mask);

        let r_hat = self.tape_reward(tape, feat)?;
        let r_rows = half_squared_error(tape, r_hat, stack(&batch.rewards));
        let reward = masked_mean(tape, r_rows, &trans_mask);

        let logit = self.tape_continue_logit(tape, feat)?;
        let sp = tape.softplus(logit);
        let c = tape.constant(stack(&batch.continues));
        let cl = tape.mul(c, logit);
        let bce = tape.sub(sp, cl);
        let cont = masked_mean(tape, bce, &trans_mask);

        let qm = tape.vstack(&qm);
        let qs = tape.vstack(&qs);
        let pm = tape.vstack(&pm);
        let ps = tape.vstack(&ps);
        let (qm_sg, qs_sg, pm_sg, ps_sg) = (tape.detach(qm), tape.detach(qs), tape.detach(pm), tape.detach(ps));
        let free = self.config.free_nats;
        let dyn_raw = tape_kl_diag_gaussian(tape, qm_sg, qs_sg, pm, ps);
        let raw_kl = masked_mean(tape, dyn_raw, &mask);
        let dyn_shift = tape.add_scalar(dyn_raw, -free);
        let dyn_rows = tape.max_const(dyn_shift, 0.0);
        let dyn_kl = masked_mean(tape, dyn_rows, &mask);
        let rep_raw = tape_kl_diag_gaussian(tape, qm, qs, pm_sg, ps_sg);
        let rep_shift = tape.add_scalar(rep_raw, -free);
        let rep_rows = tape.max_const(rep_shift, 0.0);
        let rep_kl = masked_mean(tape, rep_rows, &mask);

        let c = &self.config;
        let pred = tape.add(obs, reward);
        let pred = tape.add(pred, cont);
        let pred = tape.scale(pred, c.beta_pred);
        let d = tape.scale(dyn_kl, c.beta_dyn);
        let r = tape.scale(rep_kl, c.beta_rep);
        let mut total = tape.add(pred, d);
        total = tape.add(total, r);

        let mut transdec = None;
        if let Some(head) = &self.transdecoder_head {
            let out = head.forward(tape, &self.params, feat)?;
            let rows = half_squared_error(tape, out, stack(&batch.target));
            let loss = masked_mean(tape, rows, &mask);
            let weighted = tape.scale(loss, c.transdec_weight);
            total = tape.add(total, weighted);
            transdec = Some(loss);
        }
        let mut informed = None;
        if self.informed_head.is_some() {
            let out = self.tape_informed(tape, feat)?;
            let rows = half_squared_error(tape, out, stack(&batch.privileged));
            let loss = masked_mean(tape, rows, &mask);
            total = tape.add(total, loss);
            informed = Some(loss);
        }
        Ok(WmLossVars {
            total,
            obs,
            reward,
            cont,
            dyn_kl,
            rep_kl,
            raw_kl,
            transdec,
            informed,
            posterior,
        })
    }

    /// One optimizer step on a replayed batch.
    pub fn wm_train_step(
        &mut self,
        batch: &SequenceBatch,
        privileged_keep: f64,
        rng: &mut Rng,
    ) -> Result<WmStepOutput, WmError> {
        let (grads, mut report, posterior) = {
            let mut tape = Tape::new();
            let vars = self.wm_loss(&mut tape, batch, privileged_keep, rng)?;
            let val = |v: Var| tape.value(v).scalar();
            let checks = [
                ("decoder", val(vars.obs)),
                ("reward", val(vars.reward)),
                ("continue", val(vars.cont)),
                ("dynamics", val(vars.dyn_kl)),
                ("representation", val(vars.rep_kl)),
                ("transdecoder", vars.transdec.map_or(0.0, val)),
                ("informed", vars.informed.map_or(0.0, val)),
            ];
            if let Some((head, _)) = checks.iter().find(|(_, v)| !v.is_finite()) {
                return Err(WmError::NonFiniteLoss { head: head.to_string() });
            }
            let (obs, reward, cont) = (val(vars.obs), val(vars.reward), val(vars.cont));
            let report = WmLossReport {
                pred_loss: obs + reward + cont,
                dyn_loss: val(vars.dyn_kl),
                rep_loss: val(vars.rep_kl),
                transdec_loss: vars.transdec.map_or(0.0, val),
                informed_loss: vars.informed.map(val),
                total: val(vars.total),
                obs_loss: obs,
                reward_loss: reward,
                continue_loss: cont,
                raw_kl: val(vars.raw_kl),
                grad_norm: 0.0,
            };
            let states: Vec<LatentState> = vars.posterior.iter().map(|s| s.values(&tape)).collect();
            let grads = tape.backward(vars.total)?;
            (grads, report, stack_states(&states))
        };
        self.params.accumulate(&grads);
        let stats = self.opt.step(&mut self.params)?;
        report.grad_norm = stats.grad_norm;
        let mask = batch.mask.iter().flat_map(|m| m.data.iter().copied()).collect();
        Ok(WmStepOutput {
            report,
            posterior,
            mask,
        })
    }
}

/// Stack per-step batched states into one state with row `t·B + b`.
pub fn stack_states(states: &[LatentState]) -> LatentState {
    let pick = |f: fn(&LatentState) -> &Tensor| Tensor::vstack(&states.iter().map(f).collect::<Vec<_>>());
    LatentState {
        kind: states[0].kind,
        h: pick(|s| &s.h),
        z: pick(|s| &s.z),
        z_mean: pick(|s| &s.z_mean),
        z_std: pick(|s| &s.z_std),
    }
}
