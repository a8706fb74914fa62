//! The set of models a variant trains, and one update cycle over them.

use std::collections::BTreeMap;

use crate::agent::{
    fit_critic, imagine_values, rollout_returns, AcConfig, ActorCritic, BcTarget, Critic, CriticInput, ImaginationMode,
    Imagination, StartStates,
};
use crate::envs::EnvSpec;
use crate::numerics::{Rng, Tensor};
use crate::variants::VariantConfig;
use crate::world_model::{ModelKind, SequenceBatch, WmConfig, WorldModel};

use super::HarnessError;

/// Named scalar diagnostics from one update.
pub type UpdateReport = BTreeMap<String, f64>;

#[derive(Clone, Debug)]
pub struct Learner {
    pub variant: VariantConfig,
    pub spec: EnvSpec,
    pub target_wm: WorldModel,
    pub scaffolded_wm: Option<WorldModel>,
    /// Deployed target policy and its critic.
    pub actor: ActorCritic,
    pub explorer: Option<ActorCritic>,
    pub teacher: Option<ActorCritic>,
    /// Passive `v⁻(s⁻)` trained on target-model imagination for the TD probe.
    pub probe_critic: Option<Critic>,
    pub imag_starts: usize,
}

impl Learner {
    pub fn new(
        variant: &VariantConfig,
        spec: &EnvSpec,
        wm: &WmConfig,
        ac: &AcConfig,
        imag_starts: usize,
        rng: &mut Rng,
    ) -> Self {
        let target_wm = WorldModel::new(variant.target_layout(spec), wm.clone(), rng);
        let scaffolded_wm = variant
            .scaffolded_layout(spec)
            .map(|layout| WorldModel::new(layout, wm.clone(), rng));
        let feat = wm.deter + wm.stoch;
        let space = spec.action_space.clone();
        let critic_dim = match variant.critic_input() {
            CriticInput::Both => 2 * feat,
            _ => feat,
        };
        let actor = ActorCritic::new(
            ModelKind::Target,
            space.clone(),
            feat,
            variant.critic_input(),
            critic_dim,
            ac.clone(),
            "actor",
            rng,
        );
        let scaffolded_ac = |name: &str, rng: &mut Rng| {
            ActorCritic::new(
                ModelKind::Scaffolded,
                space.clone(),
                feat,
                CriticInput::Scaffolded,
                feat,
                ac.clone(),
                name,
                rng,
            )
        };
        let explorer = variant.exploration_policy.then(|| scaffolded_ac("explorer", rng));
        let teacher = variant.bc_teacher.then(|| scaffolded_ac("teacher", rng));
        let probe_critic = variant
            .needs_probe_critic()
            .then(|| Critic::new(CriticInput::Target, feat, ac.hidden, ac.critic_lr, ac.grad_clip, "probe", rng));
        Self {
            variant: variant.clone(),
            spec: spec.clone(),
            target_wm,
            scaffolded_wm,
            actor,
            explorer,
            teacher,
            probe_critic,
            imag_starts,
        }
    }

    /// Names of the constructed components.
    pub fn components(&self) -> Vec<&'static str> {
        let mut out = vec!["target_wm", "target_policy", "target_critic"];
        if let Some(wm) = &self.scaffolded_wm {
            out.push("scaffolded_wm");
            if wm.transdecoder_head.is_some() {
                out.push("transdecoder");
            }
        }
        if self.target_wm.informed_head.is_some() {
            out.push("informed_decoder");
        }
        if self.explorer.is_some() {
            out.extend(["exploration_policy", "exploration_critic"]);
        }
        if self.teacher.is_some() {
            out.extend(["teacher_policy", "teacher_critic"]);
        }
        if self.probe_critic.is_some() {
            out.push("probe_critic");
        }
        out
    }

    /// World models, then every actor-critic, on one replayed batch.
    pub fn update(&mut self, batch: &SequenceBatch, privileged_keep: f64, rng: &mut Rng) -> Result<UpdateReport, HarnessError> {
        let mut report = UpdateReport::new();
        let t_out = self.target_wm.wm_train_step(batch, privileged_keep, rng)?;
        let t = &t_out.report;
        report.insert("wm_target/total".into(), t.total);
        report.insert("wm_target/obs".into(), t.obs_loss);
        report.insert("wm_target/reward".into(), t.reward_loss);
        report.insert("wm_target/kl".into(), t.raw_kl);
        if let Some(x) = t.informed_loss {
            report.insert("wm_target/informed".into(), x);
        }
        let s_out = match self.scaffolded_wm.as_mut() {
            Some(wm) => {
                let out = wm.wm_train_step(batch, 1.0, rng)?;
                report.insert("wm_scaffolded/total".into(), out.report.total);
                report.insert("wm_scaffolded/transdec".into(), out.report.transdec_loss);
                Some(out)
            }
            None => None,
        };

        let valid: Vec<usize> = (0..t_out.mask.len()).filter(|&i| t_out.mask[i] > 0.0).collect();
        let n = self.imag_starts.min(valid.len());
        let mut pool = valid;
        for i in 0..n {
            let j = i + rng.below(pool.len() - i);
            pool.swap(i, j);
        }
        let idx = &pool[..n];
        let starts = StartStates {
            target: Some(t_out.posterior.gather(idx)),
            scaffolded: s_out.as_ref().map(|o| o.posterior.gather(idx)),
        };
        let horizon = self.actor.config.horizon;

        let imagination = Imagination {
            mode: self.variant.imagination_mode(),
            scaffolded: self.scaffolded_wm.as_ref(),
            target: Some(&self.target_wm),
            horizon,
        };
        let bc = match (&self.teacher, &starts.scaffolded, &starts.target) {
            (Some(teacher), Some(s), Some(t)) if self.variant.bc_weight > 0.0 => Some(BcTarget {
                teacher: &teacher.policy,
                teacher_features: s.feature(),
                student_features: t.feature(),
                weight: self.variant.bc_weight,
            }),
            _ => None,
        };
        let (a, _) = self.actor.imagine_and_update(&imagination, &starts, bc.as_ref(), rng)?;
        report.insert("actor/loss".into(), a.actor_loss);
        report.insert("actor/entropy".into(), a.entropy);
        report.insert("actor/return".into(), a.return_mean);
        report.insert("critic/loss".into(), a.critic_loss);
        report.insert("critic/value".into(), a.value_mean);
        if let Some(x) = a.bc_loss {
            report.insert("actor/bc".into(), x);
        }

        let scaffolded = Imagination {
            mode: ImaginationMode::Scaffolded,
            scaffolded: self.scaffolded_wm.as_ref(),
            target: None,
            horizon,
        };
        for (name, ac) in [("explorer", self.explorer.as_mut()), ("teacher", self.teacher.as_mut())] {
            if let Some(ac) = ac {
                let (r, _) = ac.imagine_and_update(&scaffolded, &starts, None, rng)?;
                report.insert(format!("{name}/return"), r.return_mean);
                report.insert(format!("{name}/critic_loss"), r.critic_loss);
            }
        }

        if let Some(probe) = self.probe_critic.as_mut() {
            let target_only = Imagination {
                mode: ImaginationMode::Target { track_scaffolded: false },
                scaffolded: None,
                target: Some(&self.target_wm),
                horizon,
            };
            let rollout = imagine_values(&target_only, &self.actor.policy, probe, &starts, rng)?;
            let cfg = &self.actor.config;
            let returns = rollout_returns(&rollout, cfg.gamma, cfg.lambda)?;
            let loss = fit_critic(probe, &rollout, &returns, cfg.slow_reg, cfg.slow_rate)?;
            report.insert("probe/critic_loss".into(), loss);
        }
        Ok(report)
    }

    /// Value of target states under the probe critic (slow copy).
    pub fn probe_values(&self, target_features: &Tensor) -> Option<Vec<f64>> {
        self.probe_critic.as_ref().and_then(|c| c.value(target_features, true).ok())
    }
}
