//! Diagonal Gaussians and categoricals, both as plain functions and as
//! tape-recorded expressions.

use super::error::NumericsError;
use super::rng::Rng;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Whether a distribution is sampled or collapsed to its mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Sample,
    Mode,
}

/// `mean + std ⊙ ε`, `ε ~ N(0, I)`. In [`SampleMode::Mode`] the mean is
/// returned exactly and `std = 0` is accepted.
pub fn sample_diag_gaussian(
    mean: &[f64],
    std: &[f64],
    rng: &mut Rng,
    mode: SampleMode,
) -> Result<Vec<f64>, NumericsError> {
    if mean.len() != std.len() {
        return Err(NumericsError::Dimension {
            context: "gaussian std".into(),
            expected: mean.len(),
            actual: std.len(),
        });
    }
    match mode {
        SampleMode::Mode => {
            if let Some((index, &value)) = std.iter().enumerate().find(|(_, s)| **s < 0.0 || s.is_nan()) {
                return Err(NumericsError::NonPositiveStd { index, value });
            }
            Ok(mean.to_vec())
        }
        SampleMode::Sample => {
            check_positive(std)?;
            Ok(mean
                .iter()
                .zip(std)
                .map(|(m, s)| m + s * rng.normal())
                .collect())
        }
    }
}

fn check_positive(std: &[f64]) -> Result<(), NumericsError> {
    match std.iter().enumerate().find(|(_, s)| !(**s > 0.0)) {
        Some((index, &value)) => Err(NumericsError::NonPositiveStd { index, value }),
        None => Ok(()),
    }
}

/// Reparameterized draw recorded on the tape; gradients reach `mean` and `std`.
pub fn tape_sample_gaussian(
    tape: &mut Tape<'_>,
    mean: Var,
    std: Var,
    rng: &mut Rng,
    mode: SampleMode,
) -> Result<Var, NumericsError> {
    let (rows, cols) = tape.shape(mean);
    if tape.shape(std) != (rows, cols) {
        return Err(NumericsError::Dimension {
            context: "gaussian std".into(),
            expected: cols,
            actual: tape.shape(std).1,
        });
    }
    if mode == SampleMode::Mode {
        return Ok(mean);
    }
    check_positive(&tape.value(std).data)?;
    let eps = tape.constant(Tensor::from_vec(rows, cols, rng.normals(rows * cols)));
    let noise = tape.mul(std, eps);
    Ok(tape.add(mean, noise))
}

/// `softplus(raw) + min_std`.
pub fn std_from_raw(tape: &mut Tape<'_>, raw: Var, min_std: f64) -> Var {
    let sp = tape.softplus(raw);
    tape.add_scalar(sp, min_std)
}

/// Row-wise `KL(N(mq, sq²) ‖ N(mp, sp²))`, summed over dimensions (n×1).
pub fn tape_kl_diag_gaussian(tape: &mut Tape<'_>, mq: Var, sq: Var, mp: Var, sp: Var) -> Var {
    let log_sp = tape.ln(sp);
    let log_sq = tape.ln(sq);
    let log_ratio = tape.sub(log_sp, log_sq);
    let var_q = tape.square(sq);
    let dm = tape.sub(mq, mp);
    let dm2 = tape.square(dm);
    let num = tape.add(var_q, dm2);
    let var_p = tape.square(sp);
    let inv = tape.recip(var_p);
    let quad = tape.mul(num, inv);
    let half_quad = tape.scale(quad, 0.5);
    let terms = tape.add(log_ratio, half_quad);
    let terms = tape.add_scalar(terms, -0.5);
    tape.row_sum(terms)
}

/// Plain-number KL between diagonal Gaussians.
pub fn kl_diag_gaussian(mq: &[f64], sq: &[f64], mp: &[f64], sp: &[f64]) -> f64 {
    mq.iter()
        .zip(sq)
        .zip(mp.iter().zip(sp))
        .map(|((m1, s1), (m2, s2))| (s2 / s1).ln() + (s1 * s1 + (m1 - m2).powi(2)) / (2.0 * s2 * s2) - 0.5)
        .sum()
}

/// Row-wise entropy of a diagonal Gaussian with stds `std` (n×1).
pub fn tape_gaussian_entropy(tape: &mut Tape<'_>, std: Var) -> Var {
    let c = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let log_s = tape.ln(std);
    let shifted = tape.add_scalar(log_s, c);
    tape.row_sum(shifted)
}

/// Row-wise categorical entropy from log-probabilities (n×1).
pub fn tape_categorical_entropy(tape: &mut Tape<'_>, logp: Var) -> Var {
    let p = tape.exp(logp);
    let plogp = tape.mul(p, logp);
    let s = tape.row_sum(plogp);
    tape.neg(s)
}

/// Row-wise `KL(p ‖ q)` between categoricals given log-probabilities (n×1).
pub fn tape_categorical_kl(tape: &mut Tape<'_>, logp: Var, logq: Var) -> Var {
    let p = tape.exp(logp);
    let diff = tape.sub(logp, logq);
    let prod = tape.mul(p, diff);
    tape.row_sum(prod)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

pub fn categorical_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_returns_mean_even_with_zero_std() {
        let mut rng = Rng::new(3);
        let z = sample_diag_gaussian(&[1.0, -2.0], &[0.0, 0.0], &mut rng, SampleMode::Mode).unwrap();
        assert_eq!(z, vec![1.0, -2.0]);
    }

    #[test]
    fn sampling_rejects_non_positive_std() {
        let mut rng = Rng::new(3);
        let err = sample_diag_gaussian(&[0.0, 0.0], &[1.0, 0.0], &mut rng, SampleMode::Sample).unwrap_err();
        assert_eq!(err, NumericsError::NonPositiveStd { index: 1, value: 0.0 });
    }

    #[test]
    fn same_counter_same_draw() {
        let rng = Rng::new(11);
        let mut a = rng.clone();
        let mut b = rng.clone();
        let x = sample_diag_gaussian(&[0.0; 4], &[1.0; 4], &mut a, SampleMode::Sample).unwrap();
        let y = sample_diag_gaussian(&[0.0; 4], &[1.0; 4], &mut b, SampleMode::Sample).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn monte_carlo_moments() {
        let mut rng = Rng::new(2024);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_diag_gaussian(&[0.0], &[1.0], &mut rng, SampleMode::Sample).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.02, "sample mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "sample std {}", var.sqrt());
    }

    #[test]
    fn kl_of_identical_is_zero() {
        assert!(kl_diag_gaussian(&[0.3, -1.0], &[0.5, 2.0], &[0.3, -1.0], &[0.5, 2.0]).abs() < 1e-15);
    }

    #[test]
    fn uniform_entropy_is_ln_n() {
        for n in 1..8 {
            let p = softmax(&vec![0.0; n]);
            assert!((categorical_entropy(&p) - (n as f64).ln()).abs() < 1e-12);
        }
    }
}
