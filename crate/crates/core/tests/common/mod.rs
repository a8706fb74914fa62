//! Shared test oracles: central finite differences over tape expressions.

#![allow(dead_code)]

use scaffolder::numerics::{ParamSet, Tape, Tensor, Var};

pub const FD_EPS: f64 = 1e-5;

/// Relative error with a small floor so exact zeros compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Build-the-loss closure: records an expression on the tape from the given
/// parameter set and differentiable input leaves and returns the scalar loss.
pub trait LossFn: for<'p> Fn(&mut Tape<'p>, &'p ParamSet, &[Var]) -> Var {}
impl<F> LossFn for F where F: for<'p> Fn(&mut Tape<'p>, &'p ParamSet, &[Var]) -> Var {}

fn eval_loss(f: &impl LossFn, params: &ParamSet, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let loss = f(&mut tape, params, &vars);
    tape.value(loss).scalar()
}

/// Maximum relative error between tape gradients and central differences,
/// over every input scalar and every parameter scalar.
pub fn max_grad_error(f: impl LossFn, params: &ParamSet, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let loss = f(&mut tape, params, &vars);
    let grads = tape.backward(loss).expect("scalar loss");
    let mut analytic_params = params.clone();
    analytic_params.zero_grad();
    // `accumulate` routes by set id, so feed it through the original id.
    let param_grads: Vec<(usize, Tensor)> = grads
        .param_grads(params.id())
        .map(|(i, g)| (i, g.clone()))
        .collect();
    for (i, g) in &param_grads {
        analytic_params.iter_mut().nth(*i).unwrap().grad.add_assign(g);
    }

    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(x.rows, x.cols);
        let analytic = grads.wrt(vars[k]).unwrap_or(&zero);
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data[j] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[k].data[j] -= FD_EPS;
            let numeric = (eval_loss(&f, params, &plus) - eval_loss(&f, params, &minus)) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic.data[j], numeric));
        }
    }
    for (ti, tensor) in analytic_params.iter().enumerate() {
        for j in 0..tensor.value.len() {
            let mut plus = params.clone();
            plus.iter_mut().nth(ti).unwrap().value.data[j] += FD_EPS;
            let mut minus = params.clone();
            minus.iter_mut().nth(ti).unwrap().value.data[j] -= FD_EPS;
            let numeric = (eval_loss(&f, &plus, inputs) - eval_loss(&f, &minus, inputs)) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(tensor.grad.data[j], numeric));
        }
    }
    worst
}

/// Plain-number random tensor with entries in `[-scale, scale]`.
pub fn random_tensor(rng: &mut scaffolder::numerics::Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(-scale, scale)).collect())
}

use scaffolder::numerics::dist::{
    std_from_raw, tape_categorical_entropy, tape_categorical_kl, tape_gaussian_entropy,
    tape_kl_diag_gaussian, tape_sample_gaussian,
};
use scaffolder::numerics::{Activation, Dense, Gru, Mlp, Rng, SampleMode};

/// Reduce a tensor to a scalar through fixed random weights so that
/// symmetric errors cannot cancel.
fn weighted_sum<'p>(tape: &mut Tape<'p>, v: Var, weights: &Tensor) -> Var {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(v, w);
    tape.sum(prod)
}

fn weights_for(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    random_tensor(rng, rows, cols, 1.0)
}

/// Inputs bounded away from zero, for `ln` and `recip`.
fn positive_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(0.3, 2.0)).collect())
}

pub const GRAD_CASES: &[&str] = &[
    "dense_tanh",
    "dense_silu",
    "dense_linear",
    "dense_softplus",
    "mlp_two_layer",
    "gru_step",
    "add_sub_mul",
    "mul_col",
    "scale_offset",
    "exp_ln",
    "square_recip",
    "sigmoid_tanh",
    "max_const",
    "concat_slice",
    "vstack_slice_rows",
    "row_sum_mean",
    "log_softmax",
    "gaussian_sample",
    "gaussian_kl",
    "gaussian_entropy",
    "categorical_entropy_kl",
];

/// Run one randomized gradient check for the named case.
pub fn grad_case(name: &str, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut params = ParamSet::new();
    let rows = 1 + rng.below(3);
    match name {
        "dense_tanh" | "dense_silu" | "dense_linear" | "dense_softplus" => {
            let act = match name {
                "dense_tanh" => Activation::Tanh,
                "dense_silu" => Activation::Silu,
                "dense_linear" => Activation::Linear,
                _ => Activation::Softplus,
            };
            let layer = Dense::new(&mut params, "d", 4, 3, act, &mut rng);
            let bias = layer.bias;
            *params.value_mut(bias) = random_tensor(&mut rng, 1, 3, 0.5);
            let x = random_tensor(&mut rng, rows, 4, 1.5);
            let w = weights_for(&mut rng, rows, 3);
            max_grad_error(
                move |t: &mut Tape<'_>, p, v: &[Var]| {
                    let y = layer.forward(t, p, v[0]).unwrap();
                    weighted_sum(t, y, &w)
                },
                &params,
                &[x],
            )
        }
        "mlp_two_layer" => {
            let mlp = Mlp::new(&mut params, "m", &[4, 6, 2], Activation::Silu, Activation::Linear, false, &mut rng);
            let x = random_tensor(&mut rng, rows, 4, 1.5);
            let w = weights_for(&mut rng, rows, 2);
            max_grad_error(
                move |t: &mut Tape<'_>, p, v: &[Var]| {
                    let y = mlp.forward(t, p, v[0]).unwrap();
                    weighted_sum(t, y, &w)
                },
                &params,
                &[x],
            )
        }
        "gru_step" => {
            let cell = Gru::new(&mut params, "g", 3, 4, &mut rng);
            *params.value_mut(cell.bias) = random_tensor(&mut rng, 1, 12, 0.5);
            let h = random_tensor(&mut rng, rows, 4, 1.0);
            let x = random_tensor(&mut rng, rows, 3, 1.0);
            let w = weights_for(&mut rng, rows, 4);
            max_grad_error(
                move |t: &mut Tape<'_>, p, v: &[Var]| {
                    let y = cell.step(t, p, v[0], v[1]).unwrap();
                    weighted_sum(t, y, &w)
                },
                &params,
                &[h, x],
            )
        }
        _ => elementwise_case(name, &mut rng, rows),
    }
}

fn elementwise_case(name: &str, rng: &mut Rng, rows: usize) -> f64 {
    let params = ParamSet::new();
    let cols = 2 + rng.below(4);
    let a = random_tensor(rng, rows, cols, 1.5);
    let b = random_tensor(rng, rows, cols, 1.5);
    let w = weights_for(rng, rows, cols);
    let w_row = weights_for(rng, rows, 1);
    let noise_seed = rng.next_u64();
    match name {
        "add_sub_mul" => max_grad_error(
            move |t: &mut Tape<'_>, _p, v: &[Var]| {
                let s = t.add(v[0], v[1]);
                let d = t.sub(v[0], v[1]);
                let m = t.mul(s, d);
                let m = t.mul(m, v[0]);
                weighted_sum(t, m, &w)
            },
            &params,
            &[a, b],
        ),
        "mul_col" => {
            let col = random_tensor(rng, rows, 1, 1.5);
            max_grad_error(
                move |t: &mut Tape<'_>, _p, v: &[Var]| {
                    let m = t.mul_col(v[0], v[1]);
                    weighted_sum(t, m, &w)
                },
                &params,
                &[a, col],
            )
        }
        "scale_offset" => max_grad_error(
            move |t: &mut Tape<'_>, _p, v: &[Var]| {
                let s = t.scale(v[0], -1.7);
                let s = t.add_scalar(s, 0.3);
                let n = t.neg(s);
                let sq = t.square(n);
                weighted_sum(t, sq, &w)
            },
            &params,
            &[a],
        ),
        "exp_ln" => {
            let pos = positive_tensor(rng, rows, cols);
            max_grad_error(
                move |t: &mut Tape<'_>, _p, v: &[Var]| {
                    let e = t.exp(v[0]);
                    let l = t.ln(v[1]);
                    let m = t.mul(e, l);
                    weighted_sum(t, m, &w)
                },
                &params,
                &[a, pos],
            )
        }
        "square_recip" => {
            let pos = positive_tensor(rng, rows, cols);
            max_grad_error(
                move |t: &mut Tape<'_>, _p, v: &[Var]| {
                    let s = t.square(v[0]);
                    let r = t.recip(v[1]);
                    let m = t.add(s, r);
                    weighted_sum(t, m, &w)
                },
                &params,
                &[a, pos],
            )
        }
        "sigmoid_tanh" => max_grad_error(
            move |t: &mut Tape<'_>, _p, v: &[Var]| {
                let s = t.sigmoid(v[0]);
                let h = t.tanh(v[1]);
                let si = t.silu(v[0]);
                let sp = t.softplus(v[1]);
                let m = t.mul(s, h);
                let m = t.add(m, si);
                let m = t.add(m, sp);
                weighted_sum(t, m, &w)
            },
            &params,
            &[a, b],
        ),
        "max_const" => {
            // keep every entry away from the kink at the floor
            let a = a.map(|x| if (x - 0.2).abs() < 1e-2 { x + 0.05 } else { x });
            max_grad_error(
                move |t: &mut Tape<'_>, _p, v: &[Var]| {
                    let m = t.max_const(v[0], 0.2);
                    weighted_sum(t, m, &w)
                },
                &params,
                &[a],
            )
        }
        "concat_slice" => {
            let w2 = Tensor::hstack(&[&w, &w]);
            max_grad_error(
                move |t: &mut Tape<'_>, _p, v: &[Var]| {
                    let c = t.concat(&[v[0], v[1]]);
                    let s = t.slice_cols(c, 1, cols);
                    let tail = t.slice_cols(c, 0, cols);
                    let sq = t.square(s);
                    let joined = t.concat(&[sq, tail]);
                    weighted_sum(t, joined, &w2)
                },
                &params,
                &[a, b],
            )
        }
        "vstack_slice_rows" => {
            let w2 = Tensor::vstack(&[&w, &w]);
            max_grad_error(
                move |t: &mut Tape<'_>, _p, v: &[Var]| {
                    let c = t.vstack(&[v[0], v[1]]);
                    let top = t.slice_rows(c, 0, rows);
                    let sq = t.square(top);
                    let bottom = t.slice_rows(c, rows, rows);
                    let joined = t.vstack(&[sq, bottom]);
                    weighted_sum(t, joined, &w2)
                },
                &params,
                &[a, b],
            )
        }
        "row_sum_mean" => max_grad_error(
            move |t: &mut Tape<'_>, _p, v: &[Var]| {
                let sq = t.square(v[0]);
                let rs = t.row_sum(sq);
                let ws = weighted_sum(t, rs, &w_row);
                let m = t.mean(v[0]);
                let m2 = t.square(m);
                t.add(ws, m2)
            },
            &params,
            &[a],
        ),
        "log_softmax" => max_grad_error(
            move |t: &mut Tape<'_>, _p, v: &[Var]| {
                let l = t.log_softmax(v[0]);
                weighted_sum(t, l, &w)
            },
            &params,
            &[a],
        ),
        "gaussian_sample" => max_grad_error(
            move |t: &mut Tape<'_>, _p, v: &[Var]| {
                let std = std_from_raw(t, v[1], 0.1);
                // frozen noise: same draw on every evaluation
                let mut noise = Rng::new(noise_seed);
                let z = tape_sample_gaussian(t, v[0], std, &mut noise, SampleMode::Sample).unwrap();
                weighted_sum(t, z, &w)
            },
            &params,
            &[a, b],
        ),
        "gaussian_kl" => {
            let c = random_tensor(rng, rows, cols, 1.5);
            let d = random_tensor(rng, rows, cols, 1.5);
            max_grad_error(
                move |t: &mut Tape<'_>, _p, v: &[Var]| {
                    let sq = std_from_raw(t, v[1], 0.1);
                    let sp = std_from_raw(t, v[3], 0.1);
                    let kl = tape_kl_diag_gaussian(t, v[0], sq, v[2], sp);
                    weighted_sum(t, kl, &w_row)
                },
                &params,
                &[a, b, c, d],
            )
        }
        "gaussian_entropy" => max_grad_error(
            move |t: &mut Tape<'_>, _p, v: &[Var]| {
                let s = std_from_raw(t, v[0], 0.1);
                let h = tape_gaussian_entropy(t, s);
                weighted_sum(t, h, &w_row)
            },
            &params,
            &[a],
        ),
        "categorical_entropy_kl" => max_grad_error(
            move |t: &mut Tape<'_>, _p, v: &[Var]| {
                let lp = t.log_softmax(v[0]);
                let lq = t.log_softmax(v[1]);
                let h = tape_categorical_entropy(t, lp);
                let kl = tape_categorical_kl(t, lp, lq);
                let m = t.add(h, kl);
                weighted_sum(t, m, &w_row)
            },
            &params,
            &[a, b],
        ),
        other => panic!("unknown gradient case {other}"),
    }
}

use scaffolder::envs::{make_env, Action};
use scaffolder::replay::{Collector, EpisodeRecord, ReplayBuffer};

/// Uniformly random episodes from a named environment.
pub fn random_episodes(env_name: &str, episodes: usize, seed: u64) -> ReplayBuffer {
    let mut env = make_env(env_name, 0.0).unwrap();
    let space = env.spec().action_space.clone();
    let mut rng = Rng::new(seed);
    let mut buffer = ReplayBuffer::new(1_000_000);
    for e in 0..episodes {
        let ep_seed = seed.wrapping_mul(1000).wrapping_add(e as u64);
        let first = env.reset(ep_seed);
        let mut record = EpisodeRecord::new(first, Collector::Scripted, ep_seed);
        loop {
            let action: Action = space.random(&mut rng);
            let step = env.step(&action).unwrap();
            let done = step.done();
            record.push(space.encode(&action), step.reward, step.continue_flag, step.obs);
            if done {
                break;
            }
        }
        buffer.push(record).unwrap();
    }
    buffer
}

/// Explicit weighted sum of n-step returns, `O(H²)`; `values[t]` is the
/// value of the state reached after step `t`.
pub fn td_lambda_oracle(rewards: &[f64], continues: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let h = rewards.len();
    (0..h)
        .map(|t| {
            let n_step = |n: usize| {
                let mut g = 0.0;
                let mut disc = 1.0;
                for i in 0..n {
                    g += disc * rewards[t + i];
                    disc *= gamma * continues[t + i];
                }
                g + disc * values[t + n - 1]
            };
            let max_n = h - t;
            let mut total = 0.0;
            for n in 1..max_n {
                total += (1.0 - lambda) * lambda.powi(n as i32 - 1) * n_step(n);
            }
            total + lambda.powi(max_n as i32 - 1) * n_step(max_n)
        })
        .collect()
}
