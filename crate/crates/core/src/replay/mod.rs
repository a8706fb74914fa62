//! Episode storage, sub-sequence sampling and the data-collection schedule.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{ByteReader, ByteWriter, CodecError};
use crate::envs::{EpisodeLogLine, ObservationBundle};
use crate::numerics::{Rng, Tensor};
use crate::world_model::SequenceBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collector {
    TargetPolicy,
    ExplorationPolicy,
    Scripted,
}

impl Collector {
    fn code(self) -> u8 {
        match self {
            Collector::TargetPolicy => 0,
            Collector::ExplorationPolicy => 1,
            Collector::Scripted => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Collector::TargetPolicy),
            1 => Some(Collector::ExplorationPolicy),
            2 => Some(Collector::Scripted),
            _ => None,
        }
    }
}

/// One trajectory. `actions[k]`, `rewards[k]` and `continues[k]` describe
/// the transition from `observations[k]` to `observations[k + 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub observations: Vec<ObservationBundle>,
    /// Encoded actions (one-hot for discrete spaces).
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub continues: Vec<f64>,
    pub collector: Collector,
    pub seed: u64,
}

impl EpisodeRecord {
    pub fn new(first: ObservationBundle, collector: Collector, seed: u64) -> Self {
        Self {
            observations: vec![first],
            actions: Vec::new(),
            rewards: Vec::new(),
            continues: Vec::new(),
            collector,
            seed,
        }
    }

    pub fn push(&mut self, action: Vec<f64>, reward: f64, continue_flag: bool, obs: ObservationBundle) {
        self.actions.push(action);
        self.rewards.push(reward);
        self.continues.push(if continue_flag { 1.0 } else { 0.0 });
        self.observations.push(obs);
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        let bad = |why: String| Err(ReplayError::Malformed(why));
        let n = self.actions.len();
        if self.observations.len() != n + 1 {
            return bad(format!("{} observations for {} actions", self.observations.len(), n));
        }
        if self.rewards.len() != n || self.continues.len() != n {
            return bad("rewards/continues must align with transitions".into());
        }
        let (td, pd) = (self.observations[0].target.len(), self.observations[0].privileged.len());
        if self.observations.iter().any(|o| o.target.len() != td || o.privileged.len() != pd) {
            return bad("observation widths change within the episode".into());
        }
        if let Some(a) = self.actions.first() {
            if self.actions.iter().any(|x| x.len() != a.len()) {
                return bad("action widths change within the episode".into());
            }
        }
        if let Some(k) = self.continues.iter().position(|c| *c != 0.0 && *c != 1.0) {
            return bad(format!("continue flag at {k} is not 0 or 1"));
        }
        if let Some(k) = self.continues.iter().position(|c| *c == 0.0) {
            if k + 1 != n {
                return bad(format!("episode continues after termination at step {k}"));
            }
        }
        Ok(())
    }

    /// Per-step records for the JSON-lines episode log.
    pub fn log_lines(&self) -> Vec<EpisodeLogLine> {
        (0..self.len())
            .map(|k| EpisodeLogLine {
                step: k,
                action: self.actions[k].clone(),
                reward: self.rewards[k],
                continue_flag: self.continues[k],
                target_obs: self.observations[k + 1].target.clone(),
                privileged_obs: self.observations[k + 1].privileged.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("replay buffer is not ready: {0}")]
    NotReady(String),
    #[error("malformed episode: {0}")]
    Malformed(String),
    #[error("episode of {steps} steps exceeds the buffer capacity of {capacity}")]
    TooLong { steps: usize, capacity: usize },
    #[error("replay snapshot: {0}")]
    Codec(#[from] CodecError),
}

/// Where a sampled sub-sequence came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceOrigin {
    pub episode_id: u64,
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<(u64, EpisodeRecord)>,
    stored_steps: usize,
    next_id: u64,
}

pub const DEFAULT_CAPACITY: usize = 1_000_000;

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            episodes: VecDeque::new(),
            stored_steps: 0,
            next_id: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn stored_steps(&self) -> usize {
        self.stored_steps
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.episodes.iter().map(|(_, e)| e)
    }

    pub fn episode_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.episodes.iter().map(|(id, _)| *id)
    }

    /// Append an episode and evict the oldest ones while over capacity.
    pub fn push(&mut self, episode: EpisodeRecord) -> Result<u64, ReplayError> {
        episode.validate()?;
        if episode.is_empty() {
            return Err(ReplayError::Malformed("episode has no transitions".into()));
        }
        if let Some((_, first)) = self.episodes.front() {
            let (a, b) = (&first.observations[0], &episode.observations[0]);
            if a.target.len() != b.target.len() || a.privileged.len() != b.privileged.len() {
                return Err(ReplayError::Malformed("observation widths differ from stored episodes".into()));
            }
        }
        if episode.len() > self.capacity {
            return Err(ReplayError::TooLong {
                steps: episode.len(),
                capacity: self.capacity,
            });
        }
        self.stored_steps += episode.len();
        let id = self.next_id;
        self.next_id += 1;
        self.episodes.push_back((id, episode));
        while self.stored_steps > self.capacity {
            let (_, old) = self.episodes.pop_front().expect("non-empty while over capacity");
            self.stored_steps -= old.len();
        }
        Ok(id)
    }

    /// `batch` sub-sequences of `length` steps. Each draw picks a stored
    /// observation uniformly and an offset into the window uniformly, then
    /// clamps the window inside its episode, so steps near episode ends are
    /// covered about as often as interior ones. Short episodes yield one
    /// padded window.
    pub fn sample_sequences(&self, batch: usize, length: usize, rng: &mut Rng) -> Result<SequenceBatch, ReplayError> {
        Ok(self.sample_with_origins(batch, length, rng)?.0)
    }

    pub fn sample_with_origins(
        &self,
        batch: usize,
        length: usize,
        rng: &mut Rng,
    ) -> Result<(SequenceBatch, Vec<SequenceOrigin>), ReplayError> {
        if self.episodes.is_empty() {
            return Err(ReplayError::NotReady("no episodes stored".into()));
        }
        if length == 0 || batch == 0 {
            return Err(ReplayError::NotReady("batch and length must be positive".into()));
        }
        let counts: Vec<usize> = self.episodes.iter().map(|(_, e)| e.observations.len()).collect();
        let total: usize = counts.iter().sum();
        let mut origins = Vec::with_capacity(batch);
        let mut picks = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut k = rng.below(total);
            let mut idx = 0;
            while k >= counts[idx] {
                k -= counts[idx];
                idx += 1;
            }
            let offset = rng.below(length);
            let start = k.saturating_sub(offset).min(counts[idx].saturating_sub(length));
            picks.push((idx, start));
            origins.push(SequenceOrigin {
                episode_id: self.episodes[idx].0,
                start,
            });
        }

        let first = &self.episodes[0].1;
        let td = first.observations[0].target.len();
        let pd = first.observations[0].privileged.len();
        let ad = self
            .episodes
            .iter()
            .find_map(|(_, e)| e.actions.first().map(|a| a.len()))
            .unwrap_or(0);
        let mut out = SequenceBatch {
            batch,
            length,
            target: vec![Tensor::zeros(batch, td); length],
            privileged: vec![Tensor::zeros(batch, pd); length],
            actions: vec![Tensor::zeros(batch, ad); length],
            rewards: vec![Tensor::zeros(batch, 1); length],
            continues: vec![Tensor::zeros(batch, 1); length],
            is_first: vec![Tensor::zeros(batch, 1); length],
            mask: vec![Tensor::zeros(batch, 1); length],
        };
        for (b, &(idx, start)) in picks.iter().enumerate() {
            let ep = &self.episodes[idx].1;
            for j in 0..length {
                let k = start + j;
                if k >= ep.observations.len() {
                    break;
                }
                let obs = &ep.observations[k];
                out.target[j].row_slice_mut(b).copy_from_slice(&obs.target);
                out.privileged[j].row_slice_mut(b).copy_from_slice(&obs.privileged);
                out.mask[j].data[b] = 1.0;
                if j == 0 {
                    out.is_first[j].data[b] = 1.0;
                    out.continues[j].data[b] = 1.0;
                } else {
                    out.actions[j].row_slice_mut(b).copy_from_slice(&ep.actions[k - 1]);
                    out.rewards[j].data[b] = ep.rewards[k - 1];
                    out.continues[j].data[b] = ep.continues[k - 1];
                }
            }
        }
        Ok((out, origins))
    }

    /// Binary snapshot with bit-exact step data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u64(self.capacity as u64);
        w.u64(self.next_id);
        w.u64(self.episodes.len() as u64);
        for (id, ep) in &self.episodes {
            w.u64(*id);
            w.u8(ep.collector.code());
            w.u64(ep.seed);
            w.u64(ep.observations.len() as u64);
            for o in &ep.observations {
                w.f64s(&o.target);
                w.f64s(&o.privileged);
            }
            for a in &ep.actions {
                w.f64s(a);
            }
            w.f64s(&ep.rewards);
            w.f64s(&ep.continues);
        }
        w.into_bytes()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, ReplayError> {
        let mut r = ByteReader::new(data);
        let capacity = r.u64()? as usize;
        let next_id = r.u64()?;
        let n = r.len_prefix(8)?;
        let mut buf = Self::new(capacity);
        buf.next_id = next_id;
        for _ in 0..n {
            let id = r.u64()?;
            let collector = Collector::from_code(r.u8()?)
                .ok_or_else(|| CodecError::Invalid("unknown collector tag".into()))?;
            let seed = r.u64()?;
            let n_obs = r.len_prefix(16)?;
            let mut observations = Vec::with_capacity(n_obs);
            for _ in 0..n_obs {
                let target = r.f64s()?;
                let privileged = r.f64s()?;
                observations.push(ObservationBundle { target, privileged });
            }
            let actions = (0..n_obs.saturating_sub(1)).map(|_| r.f64s()).collect::<Result<_, _>>()?;
            let rewards = r.f64s()?;
            let continues = r.f64s()?;
            let ep = EpisodeRecord {
                observations,
                actions,
                rewards,
                continues,
                collector,
                seed,
            };
            ep.validate()?;
            buf.stored_steps += ep.len();
            buf.episodes.push_back((id, ep));
        }
        if !r.is_empty() {
            return Err(CodecError::Invalid("trailing bytes after replay snapshot".into()).into());
        }
        Ok(buf)
    }
}

/// Collector for the `episode`-th collected episode: strict alternation
/// starting with the target policy, or always the target policy when there
/// is no exploration policy.
pub fn collection_scheduler(episode: u64, exploration_policy: bool) -> Collector {
    if exploration_policy && episode % 2 == 1 {
        Collector::ExplorationPolicy
    } else {
        Collector::TargetPolicy
    }
}
