//! Time-major batches of replayed sub-sequences.

use serde::{Deserialize, Serialize};

use crate::numerics::{Rng, Tensor};

/// `B` sub-sequences of length `L`, stored time-major: entry `t` of each
/// field is a `B × dim` tensor. At step `t`, `actions`, `rewards` and
/// `continues` describe the transition that produced the observation at
/// `t`; they are zero where `is_first` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceBatch {
    pub batch: usize,
    pub length: usize,
    pub target: Vec<Tensor>,
    pub privileged: Vec<Tensor>,
    pub actions: Vec<Tensor>,
    pub rewards: Vec<Tensor>,
    pub continues: Vec<Tensor>,
    pub is_first: Vec<Tensor>,
    /// 1 for real steps, 0 for padding past the end of a short episode.
    pub mask: Vec<Tensor>,
}

impl SequenceBatch {
    pub fn target_dim(&self) -> usize {
        self.target.first().map_or(0, |t| t.cols)
    }

    pub fn privileged_dim(&self) -> usize {
        self.privileged.first().map_or(0, |t| t.cols)
    }

    /// `o⁺` at step `t`.
    pub fn scaffolded(&self, t: usize) -> Tensor {
        Tensor::hstack(&[&self.target[t], &self.privileged[t]])
    }

    /// `[o⁻, keep ⊙ oᵖ]` with a fresh Bernoulli(keep) draw per row.
    pub fn scaffolded_dropout(&self, t: usize, keep: f64, rng: &mut Rng) -> Tensor {
        let mut p = self.privileged[t].clone();
        if keep < 1.0 {
            for r in 0..p.rows {
                if rng.unit() >= keep {
                    p.row_slice_mut(r).iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        Tensor::hstack(&[&self.target[t], &p])
    }

    pub fn valid_steps(&self) -> f64 {
        self.mask.iter().map(|m| m.data.iter().sum::<f64>()).sum()
    }
}

/// Drop the privileged channel, keeping everything else.
pub fn strip_privileged(batch: &SequenceBatch) -> SequenceBatch {
    SequenceBatch {
        privileged: batch.privileged.iter().map(|p| Tensor::zeros(p.rows, 0)).collect(),
        ..batch.clone()
    }
}
