//! Dense layers, small MLPs and a gated recurrent cell built from tape ops.

use serde::{Deserialize, Serialize};

use super::error::NumericsError;
use super::params::{ParamId, ParamSet};
use super::rng::Rng;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Silu,
    Linear,
    Softplus,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Silu => tape.silu(x),
            Activation::Linear => x,
            Activation::Softplus => tape.softplus(x),
        }
    }
}

fn check_cols(tape: &Tape<'_>, x: Var, expected: usize, context: &str) -> Result<(), NumericsError> {
    let actual = tape.shape(x).1;
    if actual != expected {
        return Err(NumericsError::Dimension {
            context: context.to_string(),
            expected,
            actual,
        });
    }
    Ok(())
}

/// `activation(W·x + b)` with `W: out × inp`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub inp: usize,
    pub out: usize,
}

impl Dense {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        inp: usize,
        out: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        let weight = params.add_glorot(format!("{name}.w"), out, inp, rng);
        let bias = params.add(format!("{name}.b"), Tensor::zeros(1, out));
        Self {
            weight,
            bias,
            activation,
            inp,
            out,
        }
    }

    /// Same layer with weights and bias initialized to zero.
    pub fn zeroed(params: &mut ParamSet, name: &str, inp: usize, out: usize, activation: Activation) -> Self {
        let weight = params.add(format!("{name}.w"), Tensor::zeros(out, inp));
        let bias = params.add(format!("{name}.b"), Tensor::zeros(1, out));
        Self {
            weight,
            bias,
            activation,
            inp,
            out,
        }
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, params: &'p ParamSet, x: Var) -> Result<Var, NumericsError> {
        dense_forward(tape, params, self, x)
    }
}

/// Record one dense layer on the tape.
pub fn dense_forward<'p>(
    tape: &mut Tape<'p>,
    params: &'p ParamSet,
    layer: &Dense,
    input: Var,
) -> Result<Var, NumericsError> {
    check_cols(tape, input, layer.inp, "dense input")?;
    let w = tape.param(params, layer.weight);
    let b = tape.param(params, layer.bias);
    let pre = tape.linear(input, w, Some(b));
    Ok(layer.activation.apply(tape, pre))
}

/// Stack of dense layers; hidden layers share one activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `sizes = [inp, hidden.., out]`. When `zero_output` is set the last
    /// layer starts at zero so the network initially predicts its bias (0).
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        zero_output: bool,
        rng: &mut Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                let lname = format!("{name}.{i}");
                if i + 1 == n && zero_output {
                    Dense::zeroed(params, &lname, sizes[i], sizes[i + 1], act)
                } else {
                    Dense::new(params, &lname, sizes[i], sizes[i + 1], act, rng)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn inp(&self) -> usize {
        self.layers[0].inp
    }

    pub fn out(&self) -> usize {
        self.layers.last().unwrap().out
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, params: &'p ParamSet, x: Var) -> Result<Var, NumericsError> {
        self.layers.iter().try_fold(x, |h, layer| layer.forward(tape, params, h))
    }
}

/// Gated recurrent cell:
///
/// ```text
/// r  = σ(Wr·x + Ur·h + br)
/// u  = σ(Wu·x + Uu·h + bu)
/// c  = tanh(Wc·x + Uc·(r ⊙ h) + bc)
/// h' = u ⊙ h + (1 − u) ⊙ c
/// ```
#[derive(Clone, Debug)]
pub struct Gru {
    /// `[Wr; Wu; Wc]`, shape `3H × inp`.
    pub w_input: ParamId,
    /// `[Ur; Uu]`, shape `2H × H`.
    pub w_gates: ParamId,
    /// `Uc`, shape `H × H`.
    pub w_candidate: ParamId,
    /// `[br, bu, bc]`, shape `1 × 3H`.
    pub bias: ParamId,
    pub inp: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(params: &mut ParamSet, name: &str, inp: usize, hidden: usize, rng: &mut Rng) -> Self {
        let w_input = params.add_glorot(format!("{name}.wx"), 3 * hidden, inp, rng);
        let w_gates = params.add_glorot(format!("{name}.uh"), 2 * hidden, hidden, rng);
        let w_candidate = params.add_glorot(format!("{name}.uc"), hidden, hidden, rng);
        let bias = params.add(format!("{name}.b"), Tensor::zeros(1, 3 * hidden));
        Self {
            w_input,
            w_gates,
            w_candidate,
            bias,
            inp,
            hidden,
        }
    }

    pub fn step<'p>(&self, tape: &mut Tape<'p>, params: &'p ParamSet, h_prev: Var, x: Var) -> Result<Var, NumericsError> {
        gru_step(tape, params, self, h_prev, x)
    }
}

/// Record one recurrent update on the tape and return the new hidden state.
pub fn gru_step<'p>(
    tape: &mut Tape<'p>,
    params: &'p ParamSet,
    cell: &Gru,
    h_prev: Var,
    x: Var,
) -> Result<Var, NumericsError> {
    let hsz = cell.hidden;
    check_cols(tape, h_prev, hsz, "gru hidden state")?;
    check_cols(tape, x, cell.inp, "gru input")?;
    if tape.shape(h_prev).0 != tape.shape(x).0 {
        return Err(NumericsError::Dimension {
            context: "gru batch rows".into(),
            expected: tape.shape(h_prev).0,
            actual: tape.shape(x).0,
        });
    }
    let wx = tape.param(params, cell.w_input);
    let uh = tape.param(params, cell.w_gates);
    let uc = tape.param(params, cell.w_candidate);
    let b = tape.param(params, cell.bias);

    let gx = tape.linear(x, wx, Some(b));
    let gh = tape.linear(h_prev, uh, None);
    let xr = tape.slice_cols(gx, 0, hsz);
    let xu = tape.slice_cols(gx, hsz, hsz);
    let xc = tape.slice_cols(gx, 2 * hsz, hsz);
    let hr = tape.slice_cols(gh, 0, hsz);
    let hu = tape.slice_cols(gh, hsz, hsz);

    let r_pre = tape.add(xr, hr);
    let r = tape.sigmoid(r_pre);
    let u_pre = tape.add(xu, hu);
    let u = tape.sigmoid(u_pre);
    let rh = tape.mul(r, h_prev);
    let ch = tape.linear(rh, uc, None);
    let c_pre = tape.add(xc, ch);
    let c = tape.tanh(c_pre);
    // h' = c + u ⊙ (h − c)
    let diff = tape.sub(h_prev, c);
    let gated = tape.mul(u, diff);
    Ok(tape.add(c, gated))
}
