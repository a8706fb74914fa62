//! λ-returns and the return-scale normalizer.

use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::numerics::{Tape, Var};

/// Backward λ-return recursion.
///
/// `values[t]` is the value of the state reached after step `t`, so the
/// recursion bootstraps from `values[H−1]`:
///
/// ```text
/// R_{H−1} = r_{H−1} + γ c_{H−1} v_{H−1}
/// R_t     = r_t + γ c_t ((1 − λ) v_t + λ R_{t+1})
/// ```
pub fn td_lambda(
    rewards: &[f64],
    continues: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>, AgentError> {
    let h = rewards.len();
    if h == 0 || continues.len() != h || values.len() != h {
        return Err(AgentError::LengthMismatch {
            rewards: h,
            continues: continues.len(),
            values: values.len(),
        });
    }
    let mut out = vec![0.0; h];
    let mut next = values[h - 1];
    for t in (0..h).rev() {
        let blended = if t + 1 == h {
            values[t]
        } else {
            (1.0 - lambda) * values[t] + lambda * next
        };
        out[t] = rewards[t] + gamma * continues[t] * blended;
        next = out[t];
    }
    Ok(out)
}

/// The same recursion on batched `N × 1` tape columns.
pub fn tape_td_lambda(
    tape: &mut Tape<'_>,
    rewards: &[Var],
    continues: &[Var],
    values: &[Var],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<Var>, AgentError> {
    let h = rewards.len();
    if h == 0 || continues.len() != h || values.len() != h {
        return Err(AgentError::LengthMismatch {
            rewards: h,
            continues: continues.len(),
            values: values.len(),
        });
    }
    let mut out: Vec<Var> = Vec::with_capacity(h);
    for t in (0..h).rev() {
        let blended = match out.last() {
            None => values[t],
            Some(&next) => {
                let a = tape.scale(values[t], 1.0 - lambda);
                let b = tape.scale(next, lambda);
                tape.add(a, b)
            }
        };
        let disc = tape.mul(continues[t], blended);
        let disc = tape.scale(disc, gamma);
        out.push(tape.add(rewards[t], disc));
    }
    out.reverse();
    Ok(out)
}

/// Linear-interpolation percentile of unsorted data, `q ∈ [0, 1]`.
pub fn percentile(data: &[f64], q: f64) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut v = data.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Exponential moving average of the 5th–95th percentile range of returns.
/// Returns are divided by `max(1, scale)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnNormalizer {
    pub scale: f64,
    pub decay: f64,
}

impl Default for ReturnNormalizer {
    fn default() -> Self {
        Self {
            scale: 0.0,
            decay: 0.99,
        }
    }
}

impl ReturnNormalizer {
    pub fn update(&mut self, returns: &[f64]) {
        let range = percentile(returns, 0.95) - percentile(returns, 0.05);
        self.scale = self.decay * self.scale + (1.0 - self.decay) * range;
    }

    pub fn divisor(&self) -> f64 {
        self.scale.max(1.0)
    }
}
