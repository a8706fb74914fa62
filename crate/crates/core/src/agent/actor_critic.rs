//! Actor and critic update rules on imagined rollouts.

use serde::{Deserialize, Serialize};

use crate::envs::ActionSpace;
use crate::numerics::dist::tape_kl_diag_gaussian;
use crate::numerics::{Gradients, Rng, Tape, Tensor, Var};
use crate::world_model::ModelKind;

use super::critic::{Critic, CriticInput};
use super::imagine::{ImaginedRollout, Imagination, StartStates};
use super::policy::{Policy, PolicyDist};
use super::returns::{tape_td_lambda, td_lambda, ReturnNormalizer};
use super::AgentError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_coef: f64,
    pub horizon: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub slow_rate: f64,
    pub slow_reg: f64,
    pub hidden: usize,
    pub grad_clip: f64,
}

impl Default for AcConfig {
    fn default() -> Self {
        Self {
            gamma: 0.997,
            lambda: 0.95,
            entropy_coef: 3e-4,
            horizon: 15,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            slow_rate: 0.02,
            slow_reg: 1.0,
            hidden: 64,
            grad_clip: 100.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AcReport {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub return_mean: f64,
    pub return_scale: f64,
    pub value_mean: f64,
    pub bc_loss: Option<f64>,
}

/// Imitation target: the teacher's action distribution on replayed states
/// and the student's features for the same states.
pub struct BcTarget<'a> {
    pub teacher: &'a Policy,
    pub teacher_features: Tensor,
    pub student_features: Tensor,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct ActorCritic {
    pub policy: Policy,
    pub critic: Critic,
    pub normalizer: ReturnNormalizer,
    pub config: AcConfig,
}

/// `w_0 = 1`, `w_k = Π_{j<k} ĉ_j`, per row.
fn continuation_weights(continues: &[Tensor], rows: usize) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(continues.len());
    let mut w = Tensor::filled(rows, 1, 1.0);
    for c in continues {
        out.push(w.clone());
        w = Tensor::from_vec(rows, 1, w.data.iter().zip(&c.data).map(|(a, b)| a * b).collect());
    }
    out
}

/// Per-row λ-returns for a plain rollout, `R_0..R_{H−1}`.
pub fn rollout_returns(rollout: &ImaginedRollout, gamma: f64, lambda: f64) -> Result<Vec<Tensor>, AgentError> {
    let (h, n) = (rollout.horizon, rollout.rows);
    let mut out = vec![Tensor::zeros(n, 1); h];
    if h == 0 {
        return Ok(out);
    }
    for row in 0..n {
        let r: Vec<f64> = (0..h).map(|k| rollout.rewards[k].data[row]).collect();
        let c: Vec<f64> = (0..h).map(|k| rollout.continues[k].data[row]).collect();
        let v: Vec<f64> = (1..=h).map(|k| rollout.values[k].data[row]).collect();
        for (k, x) in td_lambda(&r, &c, &v, gamma, lambda)?.into_iter().enumerate() {
            out[k].data[row] = x;
        }
    }
    Ok(out)
}

fn stack(parts: &[Tensor]) -> Tensor {
    Tensor::vstack(&parts.iter().collect::<Vec<_>>())
}

/// Row-wise `KL(teacher ‖ student)` on the tape, teacher held constant.
pub fn tape_policy_kl<'p>(
    tape: &mut Tape<'p>,
    teacher: &'p Policy,
    teacher_features: &Tensor,
    student: PolicyDist,
) -> Result<Var, AgentError> {
    let tf = tape.constant(teacher_features.clone());
    let t = teacher.tape_dist(tape, tf)?;
    Ok(match (t, student) {
        (PolicyDist::Categorical { logp: lt }, PolicyDist::Categorical { logp: ls }) => {
            let lt = tape.detach(lt);
            crate::numerics::dist::tape_categorical_kl(tape, lt, ls)
        }
        (PolicyDist::Gaussian { mean: mt, std: st }, PolicyDist::Gaussian { mean: ms, std: ss }) => {
            let (mt, st) = (tape.detach(mt), tape.detach(st));
            tape_kl_diag_gaussian(tape, mt, st, ms, ss)
        }
        _ => return Err(AgentError::MissingComponent("teacher and student share an action space")),
    })
}

/// Plain KL between two policies' distributions on paired features.
pub fn policy_kl(teacher: &Policy, teacher_features: &Tensor, student: &Policy, student_features: &Tensor) -> Result<Vec<f64>, AgentError> {
    let mut tape = Tape::new();
    let sf = tape.constant(student_features.clone());
    let sd = student.tape_dist(&mut tape, sf)?;
    let kl = tape_policy_kl(&mut tape, teacher, teacher_features, sd)?;
    Ok(tape.value(kl).data.clone())
}

impl ActorCritic {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        policy_kind: ModelKind,
        space: ActionSpace,
        policy_input: usize,
        critic_input: CriticInput,
        critic_input_dim: usize,
        config: AcConfig,
        name: &str,
        rng: &mut Rng,
    ) -> Self {
        let policy = Policy::new(
            policy_kind,
            space,
            policy_input,
            config.hidden,
            config.actor_lr,
            config.grad_clip,
            &format!("{name}.actor"),
            rng,
        );
        let critic = Critic::new(
            critic_input,
            critic_input_dim,
            config.hidden,
            config.critic_lr,
            config.grad_clip,
            &format!("{name}.critic"),
            rng,
        );
        Self {
            policy,
            critic,
            normalizer: ReturnNormalizer::default(),
            config,
        }
    }

    /// Imagine from `starts`, then update actor and critic.
    pub fn imagine_and_update(
        &mut self,
        imagination: &Imagination<'_>,
        starts: &StartStates,
        bc: Option<&BcTarget<'_>>,
        rng: &mut Rng,
    ) -> Result<(AcReport, ImaginedRollout), AgentError> {
        let discrete = self.policy.space.is_discrete();
        let (rollout, pathwise) = {
            let mut tape = Tape::new();
            let roll = imagination.run(&mut tape, &self.policy, starts, rng)?;
            let h = roll.actions.len();
            let mut feats = Vec::with_capacity(h + 1);
            let mut values = Vec::with_capacity(h + 1);
            for k in 0..=h {
                let f = roll.critic_feature(&mut tape, self.critic.input, k)?;
                values.push(self.critic.tape_value(&mut tape, f, true)?);
                feats.push(f);
            }
            let plain = roll.to_plain(&tape, self.policy.kind, &feats, &values, self.critic.input);
            let pathwise = if !discrete && h > 0 {
                let returns = tape_td_lambda(
                    &mut tape,
                    &roll.rewards,
                    &roll.continues,
                    &values[1..],
                    self.config.gamma,
                    self.config.lambda,
                )?;
                let flat: Vec<f64> = returns.iter().flat_map(|r| tape.value(*r).data.clone()).collect();
                self.normalizer.update(&flat);
                let div = self.normalizer.divisor();
                let weights = continuation_weights(&plain.continues, plain.rows);
                let n = (plain.rows * h) as f64;
                let mut terms = Vec::with_capacity(h);
                let mut ent_total = 0.0;
                for k in 0..h {
                    let ent = self.policy.tape_entropy(&mut tape, roll.actions[k].dist);
                    ent_total += tape.value(ent).data.iter().sum::<f64>();
                    let scaled = tape.scale(returns[k], 1.0 / div);
                    let bonus = tape.scale(ent, self.config.entropy_coef);
                    let obj = tape.add(scaled, bonus);
                    let w = tape.constant(weights[k].clone());
                    let wo = tape.mul(obj, w);
                    terms.push(tape.sum(wo));
                }
                let joined = tape.concat(&terms);
                let total = tape.sum(joined);
                let mut loss = tape.scale(total, -1.0 / n);
                let bc_val = match bc {
                    Some(target) => {
                        let (term, value) = bc_term(&mut tape, &self.policy, target)?;
                        loss = tape.add(loss, term);
                        Some(value)
                    }
                    None => None,
                };
                let grads = tape.backward(loss)?;
                Some((grads, tape.value(loss).scalar(), ent_total / n, bc_val))
            } else {
                None
            };
            (plain, pathwise)
        };
        let mut report = AcReport::default();
        if rollout.horizon == 0 {
            return Ok((report, rollout));
        }
        let returns = rollout_returns(&rollout, self.config.gamma, self.config.lambda)?;
        match pathwise {
            Some((grads, loss, entropy, bc_val)) => {
                self.apply_policy_grads(&grads)?;
                report.actor_loss = loss;
                report.entropy = entropy;
                report.bc_loss = bc_val;
            }
            None => {
                let stats = self.actor_update_with_returns(&rollout, &returns, bc)?;
                report.actor_loss = stats.0;
                report.entropy = stats.1;
                report.bc_loss = stats.2;
            }
        }
        report.critic_loss = self.critic_update(&rollout, &returns)?;
        let flat: Vec<f64> = returns.iter().flat_map(|r| r.data.iter().copied()).collect();
        report.return_mean = flat.iter().sum::<f64>() / flat.len().max(1) as f64;
        report.return_scale = self.normalizer.scale;
        let vals: Vec<f64> = rollout.values[..rollout.horizon].iter().flat_map(|v| v.data.iter().copied()).collect();
        report.value_mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        Ok((report, rollout))
    }

    fn apply_policy_grads(&mut self, grads: &Gradients) -> Result<(), AgentError> {
        self.policy.params.accumulate(grads);
        self.policy.opt.step(&mut self.policy.params)?;
        Ok(())
    }

    /// Score-function actor step on a plain rollout (discrete actions).
    /// Returns `(loss, mean entropy, bc loss)`.
    pub fn actor_update(&mut self, rollout: &ImaginedRollout, bc: Option<&BcTarget<'_>>) -> Result<(f64, f64, Option<f64>), AgentError> {
        let returns = rollout_returns(rollout, self.config.gamma, self.config.lambda)?;
        self.actor_update_with_returns(rollout, &returns, bc)
    }

    fn actor_update_with_returns(
        &mut self,
        rollout: &ImaginedRollout,
        returns: &[Tensor],
        bc: Option<&BcTarget<'_>>,
    ) -> Result<(f64, f64, Option<f64>), AgentError> {
        let h = rollout.horizon;
        if h == 0 {
            return Ok((0.0, 0.0, None));
        }
        let flat: Vec<f64> = returns.iter().flat_map(|r| r.data.iter().copied()).collect();
        self.normalizer.update(&flat);
        let div = self.normalizer.divisor();
        let weights = stack(&continuation_weights(&rollout.continues, rollout.rows));
        let base = stack(&rollout.values[..h]);
        let ret = stack(returns);
        let adv = Tensor::from_vec(
            ret.rows,
            1,
            ret.data.iter().zip(&base.data).map(|(r, b)| (r - b) / div).collect(),
        );
        let n = ret.rows as f64;
        let (grads, loss, entropy, bc_val) = {
            let mut tape = Tape::new();
            let feats = tape.constant(stack(&rollout.policy_features));
            let dist = self.policy.tape_dist(&mut tape, feats)?;
            let logp = match dist {
                PolicyDist::Categorical { logp } => {
                    let a = tape.constant(stack(&rollout.actions));
                    let m = tape.mul(logp, a);
                    tape.row_sum(m)
                }
                PolicyDist::Gaussian { mean, std } => {
                    // log-density of the pre-squash sample
                    let acts = stack(&rollout.actions).map(|x| x.clamp(-0.999_999, 0.999_999).atanh());
                    let u = tape.constant(acts);
                    let d = tape.sub(u, mean);
                    let inv = tape.recip(std);
                    let zs = tape.mul(d, inv);
                    let sq = tape.square(zs);
                    let half = tape.scale(sq, -0.5);
                    let ls = tape.ln(std);
                    let per = tape.sub(half, ls);
                    tape.row_sum(per)
                }
            };
            let ent = self.policy.tape_entropy(&mut tape, dist);
            let advv = tape.constant(adv);
            let pg = tape.mul(logp, advv);
            let bonus = tape.scale(ent, self.config.entropy_coef);
            let obj = tape.add(pg, bonus);
            let w = tape.constant(weights);
            let wo = tape.mul(obj, w);
            let total = tape.sum(wo);
            let mut loss = tape.scale(total, -1.0 / n);
            let bc_val = match bc {
                Some(target) => {
                    let (term, value) = bc_term(&mut tape, &self.policy, target)?;
                    loss = tape.add(loss, term);
                    Some(value)
                }
                None => None,
            };
            let entropy = tape.value(ent).data.iter().sum::<f64>() / n;
            let grads = tape.backward(loss)?;
            (grads, tape.value(loss).scalar(), entropy, bc_val)
        };
        self.apply_policy_grads(&grads)?;
        Ok((loss, entropy, bc_val))
    }

    /// Regress the critic toward stop-gradient λ-returns, then move the
    /// slow critic.
    pub fn critic_update(&mut self, rollout: &ImaginedRollout, returns: &[Tensor]) -> Result<f64, AgentError> {
        fit_critic(&mut self.critic, rollout, returns, self.config.slow_reg, self.config.slow_rate)
    }
}

/// One regression step of `critic` toward `returns`, regularized toward
/// the slow values stored in the rollout, followed by the slow-critic mix.
pub fn fit_critic(
    critic: &mut Critic,
    rollout: &ImaginedRollout,
    returns: &[Tensor],
    slow_reg: f64,
    slow_rate: f64,
) -> Result<f64, AgentError> {
    let h = rollout.horizon;
    if h == 0 {
        return Ok(0.0);
    }
    let weights = stack(&continuation_weights(&rollout.continues, rollout.rows));
    let feats = stack(&rollout.critic_features[..h]);
    let slow_targets = stack(&rollout.values[..h]);
    let targets = stack(returns);
    let n = targets.rows as f64;
    let (grads, loss) = {
        let mut tape = Tape::new();
        let f = tape.constant(feats);
        let v = critic.tape_value(&mut tape, f, false)?;
        let t = tape.constant(targets);
        let d = tape.sub(v, t);
        let sq = tape.square(d);
        let s = tape.constant(slow_targets);
        let ds = tape.sub(v, s);
        let sqs = tape.square(ds);
        let sqs = tape.scale(sqs, slow_reg);
        let both = tape.add(sq, sqs);
        let w = tape.constant(weights);
        let wb = tape.mul(both, w);
        let total = tape.sum(wb);
        let loss = tape.scale(total, 0.5 / n);
        (tape.backward(loss)?, tape.value(loss).scalar())
    };
    critic.params.accumulate(&grads);
    critic.opt.step(&mut critic.params)?;
    critic.update_slow(slow_rate);
    Ok(loss)
}

/// Weighted imitation term `weight · mean KL(teacher ‖ student)`.
fn bc_term<'p>(tape: &mut Tape<'p>, student: &'p Policy, target: &BcTarget<'p>) -> Result<(Var, f64), AgentError> {
    let sf = tape.constant(target.student_features.clone());
    let sd = student.tape_dist(tape, sf)?;
    let kl = tape_policy_kl(tape, target.teacher, &target.teacher_features, sd)?;
    let m = tape.mean(kl);
    let value = tape.value(m).scalar();
    Ok((tape.scale(m, target.weight), value))
}
