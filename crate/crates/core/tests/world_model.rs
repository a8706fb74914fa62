mod common;

use common::{random_episodes, rel_err};
use scaffolder::envs::env_spec;
use scaffolder::numerics::{Rng, SampleMode, Tape, Tensor};
use scaffolder::world_model::{
    strip_privileged, ModelKind, SequenceBatch, WmConfig, WmError, WmLayout, WorldModel,
};

fn small_config() -> WmConfig {
    WmConfig {
        deter: 8,
        stoch: 4,
        hidden: 16,
        embed: 8,
        ..WmConfig::default()
    }
}

fn layouts(env: &str) -> (WmLayout, WmLayout) {
    let spec = env_spec(env).unwrap();
    let a = spec.action_space.encoded_dim();
    (
        WmLayout::scaffolded(spec.target_dim, spec.privileged_dim, a),
        WmLayout::target(spec.target_dim, spec.privileged_dim, a),
    )
}

fn nav_batch(batch: usize, length: usize, seed: u64) -> SequenceBatch {
    let buffer = random_episodes("blind_nav", 6, seed);
    buffer.sample_sequences(batch, length, &mut Rng::new(seed + 1)).unwrap()
}

fn loss_value(wm: &WorldModel, batch: &SequenceBatch, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars = wm.wm_loss(&mut tape, batch, 1.0, &mut Rng::new(seed)).unwrap();
    tape.value(vars.total).scalar()
}

#[test]
fn components_follow_layout() {
    let (s, t) = layouts("blind_nav");
    let mut rng = Rng::new(0);
    let scaff = WorldModel::new(s, small_config(), &mut rng);
    let target = WorldModel::new(t, small_config(), &mut rng);
    assert!(scaff.components().contains(&"transdecoder"));
    assert!(!target.components().contains(&"transdecoder"));
    assert_eq!(scaff.layout.input_dim(), 4);
    assert_eq!(scaff.layout.decoder_dim(), 4);
    assert_eq!(target.layout.input_dim(), 2);
    assert_eq!(target.layout.decoder_dim(), 2);
    let repr = WmLayout {
        decode_privileged: true,
        ..t
    };
    assert_eq!(repr.decoder_dim(), 4);
    let informed = WmLayout { informed_head: true, ..t };
    let wm = WorldModel::new(informed, small_config(), &mut rng);
    assert!(wm.components().contains(&"informed"));
}

#[test]
fn encoder_with_zero_weights_outputs_bias() {
    let (_, t) = layouts("blind_nav");
    let mut wm = WorldModel::new(t, small_config(), &mut Rng::new(1));
    let last = wm.embed_net.layers.last().unwrap().clone();
    for layer in wm.embed_net.layers.clone() {
        wm.params.value_mut(layer.weight).data.iter_mut().for_each(|w| *w = 0.0);
    }
    let bias: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
    wm.params.value_mut(last.bias).data.copy_from_slice(&bias);
    let e = wm.embed(&Tensor::from_rows(&[vec![0.3, 0.9], vec![-5.0, 2.0]])).unwrap();
    for r in 0..2 {
        for (a, b) in e.row_slice(r).iter().zip(&bias) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn steps_are_deterministic_and_share_recurrent_state() {
    let (s, _) = layouts("blind_nav");
    let wm = WorldModel::new(s, small_config(), &mut Rng::new(2));
    let prev = wm.initial(3);
    let action = Tensor::from_rows(&vec![vec![1.0, 0.0, 0.0, 0.0, 0.0]; 3]);
    let obs = Tensor::from_rows(&vec![vec![0.1, 0.2, 0.3, 0.4]; 3]);
    let a = wm.observe(&prev, &action, &obs, &mut Rng::new(9), SampleMode::Sample).unwrap();
    let b = wm.observe(&prev, &action, &obs, &mut Rng::new(9), SampleMode::Sample).unwrap();
    assert_eq!(a.z.data, b.z.data);
    let p = wm.prior_step(&prev, &action, &mut Rng::new(9), SampleMode::Sample).unwrap();
    assert_eq!(a.h.data, p.h.data);
    let m = wm.observe(&prev, &action, &obs, &mut Rng::new(1), SampleMode::Mode).unwrap();
    assert_eq!(m.z.data, m.z_mean.data);
}

#[test]
fn latent_std_never_below_floor() {
    let (s, _) = layouts("blind_nav");
    let mut wm = WorldModel::new(s, small_config(), &mut Rng::new(3));
    let last = wm.prior_head.layers.last().unwrap().clone();
    wm.params.value_mut(last.bias).data.iter_mut().for_each(|b| *b = -500.0);
    let p = wm
        .prior_step(&wm.initial(2), &Tensor::zeros(2, 5), &mut Rng::new(0), SampleMode::Sample)
        .unwrap();
    for s in &p.z_std.data {
        assert!(*s >= wm.config.min_std);
        assert!((s - wm.config.min_std).abs() < 1e-12);
    }
}

#[test]
fn large_free_nats_zero_the_kl_terms() {
    let (s, _) = layouts("blind_nav");
    let config = WmConfig {
        free_nats: 1e6,
        ..small_config()
    };
    let wm = WorldModel::new(s, config, &mut Rng::new(4));
    let batch = nav_batch(4, 8, 4);
    let mut tape = Tape::new();
    let v = wm.wm_loss(&mut tape, &batch, 1.0, &mut Rng::new(0)).unwrap();
    assert_eq!(tape.value(v.dyn_kl).scalar(), 0.0);
    assert_eq!(tape.value(v.rep_kl).scalar(), 0.0);
    assert!(tape.value(v.raw_kl).scalar() > 0.0);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let (s, _) = layouts("blind_nav");
    let wm = WorldModel::new(s, small_config(), &mut Rng::new(5));
    let batch = nav_batch(2, 4, 5);
    let grads = {
        let mut tape = Tape::new();
        let v = wm.wm_loss(&mut tape, &batch, 1.0, &mut Rng::new(77)).unwrap();
        tape.backward(v.total).unwrap()
    };
    let analytic: Vec<(usize, Tensor)> = grads.param_grads(wm.params.id()).map(|(i, g)| (i, g.clone())).collect();
    let mut probe = Rng::new(6);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (idx, g) in &analytic {
        for _ in 0..3 {
            let k = probe.below(g.len());
            if g.data[k].abs() < 1e-4 {
                continue;
            }
            let eps = 1e-5;
            let mut plus = wm.clone();
            plus.params.iter_mut().nth(*idx).unwrap().value.data[k] += eps;
            let mut minus = wm.clone();
            minus.params.iter_mut().nth(*idx).unwrap().value.data[k] -= eps;
            let fd = (loss_value(&plus, &batch, 77) - loss_value(&minus, &batch, 77)) / (2.0 * eps);
            worst = worst.max(rel_err(fd, g.data[k]));
            checked += 1;
        }
    }
    assert!(checked > 10, "only {checked} coordinates checked");
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn training_reduces_loss_and_fits_constant_reward() {
    let (_, t) = layouts("blind_nav");
    let mut wm = WorldModel::new(t, small_config(), &mut Rng::new(7));
    let mut batch = nav_batch(8, 10, 7);
    for r in &mut batch.rewards {
        r.data.iter_mut().for_each(|x| *x = 0.3);
    }
    let mut rng = Rng::new(8);
    let first = wm.wm_train_step(&batch, 1.0, &mut rng).unwrap().report.total;
    let mut last = first;
    for _ in 0..300 {
        last = wm.wm_train_step(&batch, 1.0, &mut rng).unwrap().report.total;
    }
    assert!(last < 0.7 * first, "loss {first} -> {last}");
    let out = wm.wm_train_step(&batch, 1.0, &mut rng).unwrap();
    let feat = out.posterior.clone();
    let heads = wm.predict_heads(&feat).unwrap();
    let mut sum = 0.0;
    let mut n = 0.0;
    let b = batch.batch;
    for (row, r) in heads.reward.iter().enumerate() {
        let first = batch.is_first[row / b].data[row % b];
        if out.mask[row] > 0.0 && first == 0.0 {
            sum += r;
            n += 1.0;
        }
    }
    assert!((sum / n - 0.3).abs() < 0.01, "mean reward {}", sum / n);
}

#[test]
fn transdecoder_loss_moves_only_scaffolded_parameters() {
    let (s, t) = layouts("blind_nav");
    let mut rng = Rng::new(10);
    let mut scaff = WorldModel::new(s, small_config(), &mut rng);
    let target = WorldModel::new(t, small_config(), &mut rng);
    let batch = nav_batch(4, 6, 10);
    let frozen = target.params.clone();
    let mut tape = Tape::new();
    let v = scaff.wm_loss(&mut tape, &batch, 1.0, &mut Rng::new(0)).unwrap();
    let grads = tape.backward(v.transdec.unwrap()).unwrap();
    assert_eq!(grads.param_grads(target.params.id()).count(), 0);
    let touched: f64 = grads.param_grads(scaff.params.id()).map(|(_, g)| g.max_abs()).sum();
    assert!(touched > 0.0);
    drop(tape);
    scaff.wm_train_step(&batch, 1.0, &mut Rng::new(0)).unwrap();
    for (a, b) in target.params.iter().zip(frozen.iter()) {
        assert_eq!(a.value.data, b.value.data);
    }
}

#[test]
fn both_models_train_from_one_batch() {
    let (s, t) = layouts("blind_nav");
    let mut rng = Rng::new(11);
    let mut scaff = WorldModel::new(s, small_config(), &mut rng);
    let mut target = WorldModel::new(t, small_config(), &mut rng);
    let batch = nav_batch(4, 6, 11);
    let a = scaff.wm_train_step(&batch, 1.0, &mut rng).unwrap();
    let b = target.wm_train_step(&batch, 1.0, &mut rng).unwrap();
    assert_eq!(a.posterior.kind, ModelKind::Scaffolded);
    assert_eq!(b.posterior.kind, ModelKind::Target);
    assert_eq!(a.posterior.rows(), b.posterior.rows());
    assert!(a.report.transdec_loss > 0.0);
}

#[test]
fn target_loss_ignores_privileged_columns() {
    let (_, t) = layouts("blind_nav");
    let wm = WorldModel::new(t, small_config(), &mut Rng::new(12));
    let batch = nav_batch(3, 5, 12);
    let stripped = strip_privileged(&batch);
    assert_eq!(stripped.privileged_dim(), 0);
    assert_eq!(stripped.target, batch.target);
    assert_eq!(loss_value(&wm, &batch, 3), loss_value(&wm, &stripped, 3));
}

#[test]
fn kind_and_component_errors() {
    let (s, t) = layouts("blind_nav");
    let mut rng = Rng::new(13);
    let scaff = WorldModel::new(s, small_config(), &mut rng);
    let target = WorldModel::new(t, small_config(), &mut rng);
    let err = target.predict_heads(&scaff.initial(1)).unwrap_err();
    assert!(matches!(err, WmError::KindMismatch { expected: ModelKind::Target, .. }));
    assert!(matches!(target.transdecode(&target.initial(1)), Err(WmError::NoTransdecoder)));
    assert!(matches!(scaff.transdecode(&target.initial(1)), Err(WmError::KindMismatch { .. })));
    let batch = nav_batch(2, 1, 13);
    let mut tape = Tape::new();
    assert!(matches!(
        target.wm_loss(&mut tape, &batch, 1.0, &mut rng),
        Err(WmError::SequenceTooShort(1))
    ));
}
