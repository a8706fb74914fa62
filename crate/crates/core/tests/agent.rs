mod common;

use common::td_lambda_oracle;
use proptest::prelude::*;
use scaffolder::agent::{
    imagine_values, nested_latent_imagination, td_lambda, AcConfig, ActorCritic, AgentError, Critic, CriticInput,
    ImaginationMode, ImaginedRollout, Imagination, Policy, ReturnNormalizer, StartStates,
};
use scaffolder::envs::{Action, ActionSpace};
use scaffolder::numerics::{Rng, SampleMode, Tape, Tensor};
use scaffolder::replay::{Collector, EpisodeRecord, ReplayBuffer};
use scaffolder::envs::ObservationBundle;
use scaffolder::world_model::{stack_states, ModelKind, WmConfig, WmLayout, WorldModel};

fn small_wm() -> WmConfig {
    WmConfig {
        deter: 8,
        stoch: 4,
        hidden: 16,
        embed: 8,
        ..WmConfig::default()
    }
}

fn small_ac() -> AcConfig {
    AcConfig {
        hidden: 16,
        ..AcConfig::default()
    }
}

fn model_pair(target_dim: usize, privileged_dim: usize, actions: usize, seed: u64) -> (WorldModel, WorldModel) {
    let mut rng = Rng::new(seed);
    let s = WorldModel::new(WmLayout::scaffolded(target_dim, privileged_dim, actions), small_wm(), &mut rng);
    let t = WorldModel::new(WmLayout::target(target_dim, privileged_dim, actions), small_wm(), &mut rng);
    (s, t)
}

fn feature_rollout(features: Tensor, actions: Tensor, rewards: Vec<f64>, values: Vec<f64>) -> ImaginedRollout {
    let rows = features.rows;
    ImaginedRollout {
        horizon: 1,
        rows,
        target_states: Vec::new(),
        scaffolded_states: Vec::new(),
        policy_features: vec![features.clone()],
        actions: vec![actions],
        rewards: vec![Tensor::from_vec(rows, 1, rewards)],
        continues: vec![Tensor::filled(rows, 1, 1.0)],
        critic_features: vec![features.clone(), features],
        values: vec![Tensor::from_vec(rows, 1, values.clone()), Tensor::from_vec(rows, 1, values)],
        head_source: ModelKind::Target,
        value_source: CriticInput::Target,
    }
}

fn discrete_ac(arms: usize, lr: f64, seed: u64) -> ActorCritic {
    let config = AcConfig {
        actor_lr: lr,
        ..small_ac()
    };
    ActorCritic::new(
        ModelKind::Target,
        ActionSpace::Discrete(arms),
        2,
        CriticInput::Target,
        2,
        config,
        "toy",
        &mut Rng::new(seed),
    )
}

#[test]
fn one_step_td_when_lambda_zero() {
    let r = [0.5, -1.0, 2.0];
    let c = [1.0, 0.0, 1.0];
    let v = [3.0, 4.0, 5.0];
    let out = td_lambda(&r, &c, &v, 0.9, 0.0).unwrap();
    for t in 0..3 {
        assert!((out[t] - (r[t] + 0.9 * c[t] * v[t])).abs() < 1e-15);
    }
}

#[test]
fn two_step_monte_carlo_example() {
    let out = td_lambda(&[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0], 0.9, 1.0).unwrap();
    assert!((out[0] - 1.9).abs() < 1e-15);
    assert!((out[1] - 1.0).abs() < 1e-15);
}

#[test]
fn termination_cuts_bootstrap() {
    let r = [0.3, 0.7, -0.2, 1.1];
    let out = td_lambda(&r, &[0.0; 4], &[9.0; 4], 0.99, 0.95).unwrap();
    for (a, b) in out.iter().zip(&r) {
        assert_eq!(a, b);
    }
}

#[test]
fn length_mismatch_is_an_error() {
    let err = td_lambda(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 0.9, 0.9).unwrap_err();
    assert!(matches!(err, AgentError::LengthMismatch { rewards: 2, continues: 1, values: 2 }));
    assert!(td_lambda(&[], &[], &[], 0.9, 0.9).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn recursion_matches_n_step_oracle(
        h in 1usize..=20,
        seed in any::<u64>(),
        lambda in prop::sample::select(vec![0.0, 0.5, 0.95, 1.0]),
        gamma in 0.5f64..1.0,
    ) {
        let mut rng = Rng::new(seed);
        let r: Vec<f64> = rng.normals(h);
        let c: Vec<f64> = (0..h).map(|_| if rng.unit() < 0.2 { 0.0 } else { rng.unit() }).collect();
        let v: Vec<f64> = rng.normals(h);
        let got = td_lambda(&r, &c, &v, gamma, lambda).unwrap();
        let want = td_lambda_oracle(&r, &c, &v, gamma, lambda);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        prop_assert!((got[h - 1] - (r[h - 1] + gamma * c[h - 1] * v[h - 1])).abs() < 1e-12);
    }
}

#[test]
fn normalizer_never_shrinks_small_ranges() {
    let mut n = ReturnNormalizer::default();
    for _ in 0..2000 {
        n.update(&[0.0, 0.4]);
    }
    assert!(n.scale < 0.4 && n.scale > 0.3);
    assert_eq!(n.divisor(), 1.0);
    for _ in 0..2000 {
        n.update(&(0..100).map(|i| i as f64 / 10.0).collect::<Vec<_>>());
    }
    assert!(n.divisor() > 8.0);
}

#[test]
fn uniform_policy_entropy_is_ln_n() {
    for arms in [2, 3, 5] {
        let mut ac = discrete_ac(arms, 3e-4, 1);
        let f = Tensor::filled(4, 2, 0.5);
        let mut a = Tensor::zeros(4, arms);
        (0..4).for_each(|r| a.set(r, r % arms, 1.0));
        let rollout = feature_rollout(f, a, vec![0.0; 4], vec![0.0; 4]);
        let (loss, entropy, _) = ac.actor_update(&rollout, None).unwrap();
        assert!((entropy - (arms as f64).ln()).abs() < 1e-12);
        assert!((loss + ac.config.entropy_coef * (arms as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn zero_signal_update_raises_entropy() {
    let mut ac = discrete_ac(3, 1e-2, 2);
    let last = ac.policy.net.layers.last().unwrap().bias;
    ac.policy.params.value_mut(last).data.copy_from_slice(&[1.0, 0.0, -1.0]);
    let f = Tensor::filled(3, 2, 0.0);
    let mut a = Tensor::zeros(3, 3);
    (0..3).for_each(|r| a.set(r, r, 1.0));
    let rollout = feature_rollout(f, a, vec![0.0; 3], vec![0.0; 3]);
    let (_, before, _) = ac.actor_update(&rollout, None).unwrap();
    let (_, after, _) = ac.actor_update(&rollout, None).unwrap();
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn better_action_gains_probability() {
    let mut ac = discrete_ac(2, 1e-3, 3);
    let f = Tensor::filled(2, 2, 1.0);
    let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let before = ac.policy.probs(&f).unwrap().get(0, 0);
    let rollout = feature_rollout(f.clone(), a, vec![1.0, 0.0], vec![0.0, 0.0]);
    ac.actor_update(&rollout, None).unwrap();
    let after = ac.policy.probs(&f).unwrap().get(0, 0);
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn bandit_converges_to_better_arm() {
    let mut ac = discrete_ac(2, 3e-3, 4);
    let mut rng = Rng::new(5);
    let f = Tensor::filled(16, 2, 1.0);
    for _ in 0..2000 {
        let acts = ac.policy.act_on_features(&f, &mut rng, SampleMode::Sample).unwrap();
        let mut enc = Tensor::zeros(16, 2);
        let mut rewards = Vec::new();
        for (r, a) in acts.iter().enumerate() {
            let Action::Discrete(i) = a else { unreachable!() };
            enc.set(r, *i, 1.0);
            rewards.push(if *i == 1 { 1.0 } else { 0.2 } + 0.1 * rng.normal());
        }
        let values = ac.critic.value(&f, true).unwrap();
        let rollout = feature_rollout(f.clone(), enc, rewards, values);
        ac.actor_update(&rollout, None).unwrap();
    }
    let p = ac.policy.probs(&f).unwrap().get(0, 1);
    assert!(p > 0.95, "better-arm probability {p}");
}

#[test]
fn critic_fits_constant_return() {
    let mut ac = discrete_ac(2, 3e-4, 6);
    ac.critic = Critic::new(CriticInput::Target, 2, 16, 1e-3, 100.0, "c", &mut Rng::new(7));
    let f = Tensor::from_vec(8, 2, Rng::new(8).normals(16));
    for _ in 0..2000 {
        let f = f.clone();
        let values = ac.critic.value(&f, true).unwrap();
        let mut rollout = feature_rollout(f, Tensor::zeros(8, 2), vec![0.7; 8], values);
        rollout.continues[0] = Tensor::zeros(8, 1);
        let returns = vec![Tensor::filled(8, 1, 0.7)];
        ac.critic_update(&rollout, &returns).unwrap();
    }
    for v in ac.critic.value(&f, false).unwrap() {
        assert!((v - 0.7).abs() < 0.01, "value {v}");
    }
}

fn paired_starts(scaff: &WorldModel, target: &WorldModel, rows: usize, seed: u64) -> StartStates {
    let mut rng = Rng::new(seed);
    let ta = scaff.layout.target_dim;
    let pa = scaff.layout.privileged_dim;
    let a = Tensor::zeros(rows, scaff.layout.action_dim);
    let o_t = Tensor::from_vec(rows, ta, rng.normals(rows * ta));
    let o_p = Tensor::from_vec(rows, pa, rng.normals(rows * pa));
    let s = scaff
        .observe(&scaff.initial(rows), &a, &Tensor::hstack(&[&o_t, &o_p]), &mut rng, SampleMode::Sample)
        .unwrap();
    let t = target.observe(&target.initial(rows), &a, &o_t, &mut rng, SampleMode::Sample).unwrap();
    StartStates {
        target: Some(t),
        scaffolded: Some(s),
    }
}

fn target_policy(target: &WorldModel, actions: usize) -> (Policy, Critic) {
    let mut rng = Rng::new(99);
    let f = target.feature_dim();
    let p = Policy::new(ModelKind::Target, ActionSpace::Discrete(actions), f, 16, 1e-3, 100.0, "pi", &mut rng);
    let c = Critic::new(CriticInput::Both, 2 * f, 16, 1e-3, 100.0, "v", &mut rng);
    (p, c)
}

#[test]
fn zero_horizon_gives_empty_rollout() {
    let (s, t) = model_pair(2, 2, 5, 10);
    let (p, c) = target_policy(&t, 5);
    let starts = paired_starts(&s, &t, 3, 1);
    let roll = nested_latent_imagination(&s, &t, &p, &c, &starts, 0, &mut Rng::new(0)).unwrap();
    assert_eq!(roll.horizon, 0);
    assert!(roll.actions.is_empty() && roll.rewards.is_empty());
    assert_eq!(roll.values.len(), 1);
    assert_eq!(roll.target_states.len(), 1);
}

#[test]
fn nested_rollout_provenance_and_shapes() {
    let (s, t) = model_pair(2, 2, 5, 11);
    let (p, c) = target_policy(&t, 5);
    let starts = paired_starts(&s, &t, 4, 2);
    let roll = nested_latent_imagination(&s, &t, &p, &c, &starts, 6, &mut Rng::new(1)).unwrap();
    assert_eq!(roll.head_source, ModelKind::Scaffolded);
    assert_eq!(roll.value_source, CriticInput::Both);
    assert_eq!(roll.target_states.len(), 7);
    assert_eq!(roll.scaffolded_states.len(), 7);
    assert!(roll.target_states.iter().all(|s| s.kind == ModelKind::Target));
    assert!(roll.scaffolded_states.iter().all(|s| s.kind == ModelKind::Scaffolded));
    assert_eq!(roll.critic_features[0].cols, s.feature_dim() + t.feature_dim());
    assert_eq!(roll.policy_features[0].cols, t.feature_dim());
    assert!(roll.continues.iter().all(|c| c.data.iter().all(|p| (0.0..=1.0).contains(p))));
}

#[test]
fn critic_input_dims_follow_ablation() {
    let (s, t) = model_pair(2, 2, 5, 12);
    let config = small_ac();
    let f = t.feature_dim();
    let full = ActorCritic::new(ModelKind::Target, ActionSpace::Discrete(5), f, CriticInput::Both, 2 * f, config.clone(), "a", &mut Rng::new(0));
    let plain = ActorCritic::new(ModelKind::Target, ActionSpace::Discrete(5), f, CriticInput::Target, f, config, "b", &mut Rng::new(0));
    let starts = paired_starts(&s, &t, 2, 3);
    let imag = Imagination {
        mode: ImaginationMode::Nested,
        scaffolded: Some(&s),
        target: Some(&t),
        horizon: 3,
    };
    let a = imagine_values(&imag, &full.policy, &full.critic, &starts, &mut Rng::new(0)).unwrap();
    let b = imagine_values(&imag, &plain.policy, &plain.critic, &starts, &mut Rng::new(0)).unwrap();
    assert_eq!(a.critic_features[1].cols, t.feature_dim() + s.feature_dim());
    assert_eq!(b.critic_features[1].cols, t.feature_dim());
}

#[test]
fn duplicated_privileged_channel_is_well_formed() {
    let (s, t) = model_pair(2, 2, 5, 13);
    let (p, c) = target_policy(&t, 5);
    let mut rng = Rng::new(4);
    let a = Tensor::zeros(3, 5);
    let o = Tensor::from_vec(3, 2, rng.normals(6));
    let ss = s.observe(&s.initial(3), &a, &Tensor::hstack(&[&o, &o]), &mut rng, SampleMode::Sample).unwrap();
    let ts = t.observe(&t.initial(3), &a, &o, &mut rng, SampleMode::Sample).unwrap();
    let starts = StartStates {
        target: Some(ts),
        scaffolded: Some(ss),
    };
    let roll = nested_latent_imagination(&s, &t, &p, &c, &starts, 5, &mut rng).unwrap();
    assert_eq!(roll.horizon, 5);
    assert!(roll.values.iter().all(|v| v.all_finite()));
}

#[test]
fn target_belief_sees_scaffolded_state_only_through_transdecoder() {
    let (mut s, t) = model_pair(2, 2, 5, 14);
    let (p, c) = target_policy(&t, 5);
    let deter = s.config.deter;
    let stoch = s.config.stoch;
    let first = s.transdecoder_head.as_ref().unwrap().layers[0].clone();
    {
        let w = s.params.value_mut(first.weight);
        for r in 0..w.rows {
            for k in deter..deter + stoch {
                w.set(r, k, 0.0);
            }
        }
    }
    let starts = paired_starts(&s, &t, 3, 5);
    let base = nested_latent_imagination(&s, &t, &p, &c, &starts, 1, &mut Rng::new(6)).unwrap();
    // Shift the scaffolded prior mean; h⁺₁ and the noise stream are unchanged.
    let prior_out = s.prior_head.layers.last().unwrap().bias;
    s.params.value_mut(prior_out).data[..stoch].iter_mut().for_each(|b| *b += 3.0);
    let moved = nested_latent_imagination(&s, &t, &p, &c, &starts, 1, &mut Rng::new(6)).unwrap();
    assert_ne!(base.scaffolded_states[1].z.data, moved.scaffolded_states[1].z.data);
    assert_eq!(base.scaffolded_states[1].h.data, moved.scaffolded_states[1].h.data);
    assert_eq!(base.target_states[1].z.data, moved.target_states[1].z.data);
    assert_eq!(base.target_states[1].h.data, moved.target_states[1].h.data);
}

#[test]
fn kind_mismatches_are_reported() {
    let (s, t) = model_pair(2, 2, 5, 15);
    let (p, c) = target_policy(&t, 5);
    let starts = paired_starts(&s, &t, 2, 6);
    let swapped = StartStates {
        target: starts.scaffolded.clone(),
        scaffolded: starts.target.clone(),
    };
    let err = nested_latent_imagination(&s, &t, &p, &c, &swapped, 2, &mut Rng::new(0)).unwrap_err();
    assert!(matches!(err, AgentError::KindMismatch { .. }), "{err}");
    let explore = Imagination {
        mode: ImaginationMode::Scaffolded,
        scaffolded: Some(&s),
        target: None,
        horizon: 2,
    };
    let mut tape = Tape::new();
    assert!(matches!(
        explore.run(&mut tape, &p, &starts, &mut Rng::new(0)),
        Err(AgentError::KindMismatch { .. })
    ));
    let pe = Policy::new(ModelKind::Scaffolded, ActionSpace::Discrete(5), s.feature_dim(), 16, 1e-3, 100.0, "pe", &mut Rng::new(0));
    let bad = StartStates {
        target: None,
        scaffolded: starts.target.clone(),
    };
    let mut tape = Tape::new();
    let err = explore.run(&mut tape, &pe, &bad, &mut Rng::new(0)).err().unwrap();
    assert!(format!("{err}").contains("step 0"), "{err}");
    assert!(matches!(pe.act(&t.initial(1), &mut Rng::new(0), SampleMode::Mode), Err(AgentError::KindMismatch { .. })));
}

#[test]
fn mode_action_and_bounds() {
    let mut p = Policy::new(ModelKind::Target, ActionSpace::Discrete(3), 2, 8, 1e-3, 100.0, "p", &mut Rng::new(0));
    let last = p.net.layers.last().unwrap().bias;
    p.params.value_mut(last).data.copy_from_slice(&[5.0, 0.0, 0.0]);
    let f = Tensor::zeros(1, 2);
    assert_eq!(p.act_on_features(&f, &mut Rng::new(1), SampleMode::Mode).unwrap(), vec![Action::Discrete(0)]);

    let space = ActionSpace::Continuous { dim: 1, low: -2.0, high: 0.5 };
    let mut q = Policy::new(ModelKind::Target, space, 2, 8, 1e-3, 100.0, "q", &mut Rng::new(0));
    let last = q.net.layers.last().unwrap().bias;
    for mean in [-40.0, 40.0] {
        q.params.value_mut(last).data.copy_from_slice(&[mean, 3.0]);
        let f = Tensor::zeros(64, 2);
        for a in q.act_on_features(&f, &mut Rng::new(2), SampleMode::Sample).unwrap() {
            let Action::Continuous(v) = a else { unreachable!() };
            assert!((-2.0..=0.5).contains(&v[0]), "{v:?}");
        }
    }
    let f = Tensor::from_vec(5, 2, Rng::new(3).normals(10));
    let a = q.act_on_features(&f, &mut Rng::new(4), SampleMode::Sample).unwrap();
    let b = q.act_on_features(&f, &mut Rng::new(4), SampleMode::Sample).unwrap();
    assert_eq!(a, b);
}

/// Three cells in a row; moving right from the last cell stays put, and
/// every step that ends in the last cell pays 1.
fn chain_episode(actions: &[usize], collector: Collector) -> EpisodeRecord {
    let obs = |s: usize| {
        let mut v = vec![0.0; 3];
        v[s] = 1.0;
        ObservationBundle {
            target: v.clone(),
            privileged: v,
        }
    };
    let mut state = 0usize;
    let mut ep = EpisodeRecord::new(obs(0), collector, 0);
    for &a in actions {
        state = if a == 1 { (state + 1).min(2) } else { state.saturating_sub(1) };
        let mut enc = vec![0.0; 2];
        enc[a] = 1.0;
        ep.push(enc, if state == 2 { 1.0 } else { 0.0 }, true, obs(state));
    }
    ep
}

#[test]
fn nested_rewards_match_chain_ground_truth() {
    let (mut s, mut t) = model_pair(3, 3, 2, 16);
    let mut rng = Rng::new(17);
    let mut buf = ReplayBuffer::new(100_000);
    for _ in 0..40 {
        let acts: Vec<usize> = (0..12).map(|_| rng.below(2)).collect();
        buf.push(chain_episode(&acts, Collector::Scripted)).unwrap();
    }
    for _ in 0..3000 {
        let batch = buf.sample_sequences(32, 8, &mut rng).unwrap();
        s.wm_train_step(&batch, 1.0, &mut rng).unwrap();
        t.wm_train_step(&batch, 1.0, &mut rng).unwrap();
    }
    let (mut p, c) = target_policy(&t, 2);
    let last = p.net.layers.last().unwrap().bias;
    p.params.value_mut(last).data.copy_from_slice(&[-30.0, 30.0]);
    let rows = 8;
    let first = Tensor::from_rows(&vec![vec![1.0, 0.0, 0.0]; rows]);
    let a0 = Tensor::zeros(rows, 2);
    let ss = s
        .observe(&s.initial(rows), &a0, &Tensor::hstack(&[&first, &first]), &mut rng, SampleMode::Sample)
        .unwrap();
    let ts = t.observe(&t.initial(rows), &a0, &first, &mut rng, SampleMode::Sample).unwrap();
    let starts = StartStates {
        target: Some(stack_states(&[ts])),
        scaffolded: Some(stack_states(&[ss])),
    };
    let roll = nested_latent_imagination(&s, &t, &p, &c, &starts, 5, &mut rng).unwrap();
    let truth = [0.0, 1.0, 1.0, 1.0, 1.0];
    let mut err = 0.0;
    for (k, want) in truth.iter().enumerate() {
        err += roll.rewards[k].data.iter().map(|r| (r - want).abs()).sum::<f64>();
    }
    let mae = err / (rows * truth.len()) as f64;
    assert!(mae < 0.05, "imagined reward MAE {mae}");
}
