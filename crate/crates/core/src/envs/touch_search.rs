//! A probe on a 21-cell strip must find the bigger of two bumps by pressing.

use std::collections::BTreeMap;

use super::{Action, ActionSpace, EnvError, EnvSpec, Environment, EpisodeClock, ObservationBundle, ScoreKind, StepResult};
use crate::numerics::Rng;

pub const CELLS: usize = 21;
pub const MAX_STEPS: usize = 120;
pub const STEP_COST: f64 = 0.01;

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;
pub const PRESS: usize = 2;
pub const DECLARE: usize = 3;

pub struct TouchSearch {
    spec: EnvSpec,
    probe: usize,
    /// Bump cells ordered by position.
    bumps: [usize; 2],
    /// Index into `bumps` of the taller bump.
    bigger: usize,
    clock: EpisodeClock,
}

impl Default for TouchSearch {
    fn default() -> Self {
        Self::new()
    }
}

fn normalize(cell: usize) -> f64 {
    cell as f64 / (CELLS - 1) as f64
}

impl TouchSearch {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "touch_search".into(),
                target_dim: 2,
                privileged_dim: 3,
                action_space: ActionSpace::Discrete(4),
                max_episode_steps: MAX_STEPS,
                score_kind: ScoreKind::Success,
            },
            probe: CELLS / 2,
            bumps: [0, 1],
            bigger: 0,
            clock: EpisodeClock {
                steps: 0,
                ended: true,
            },
        }
    }

    /// Start from an explicit instance; `big` and `small` are bump cells.
    pub fn reset_to(&mut self, probe: usize, big: usize, small: usize) -> ObservationBundle {
        assert!(big != small && big < CELLS && small < CELLS && probe < CELLS);
        self.probe = probe;
        self.bumps = [big.min(small), big.max(small)];
        self.bigger = usize::from(big > small);
        self.clock.reset();
        self.observe(0.0)
    }

    /// Bump height at a cell: 2 for the bigger, 1 for the smaller, else 0.
    pub fn height(&self, cell: usize) -> f64 {
        match self.bumps.iter().position(|&b| b == cell) {
            Some(i) if i == self.bigger => 2.0,
            Some(_) => 1.0,
            None => 0.0,
        }
    }

    pub fn probe(&self) -> usize {
        self.probe
    }

    fn observe(&self, reading: f64) -> ObservationBundle {
        ObservationBundle {
            target: vec![normalize(self.probe), reading / 2.0],
            privileged: vec![normalize(self.bumps[0]), normalize(self.bumps[1]), self.bigger as f64],
        }
    }
}

impl Environment for TouchSearch {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> ObservationBundle {
        let mut rng = Rng::new(seed);
        let big = rng.below(CELLS);
        let mut small = rng.below(CELLS - 1);
        if small >= big {
            small += 1;
        }
        self.reset_to(CELLS / 2, big, small)
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        self.clock.check()?;
        let a = match action {
            Action::Discrete(a) if *a < 4 => *a,
            Action::Discrete(a) => return Err(EnvError::ActionOutOfRange { action: *a, n: 4 }),
            Action::Continuous(_) => {
                return Err(EnvError::WrongActionKind {
                    env: self.spec.name.clone(),
                    expected: "discrete",
                })
            }
        };
        let mut info = BTreeMap::new();
        let mut reading = 0.0;
        let (reward, terminated) = match a {
            LEFT => {
                self.probe = self.probe.saturating_sub(1);
                (-STEP_COST, false)
            }
            RIGHT => {
                self.probe = (self.probe + 1).min(CELLS - 1);
                (-STEP_COST, false)
            }
            PRESS => {
                reading = self.height(self.probe);
                (-STEP_COST, false)
            }
            _ => {
                if self.height(self.probe) == 2.0 {
                    info.insert("success".to_string(), 1.0);
                    (1.0, true)
                } else {
                    (-1.0, true)
                }
            }
        };
        let truncated = self.clock.tick(terminated, MAX_STEPS);
        Ok(StepResult {
            obs: self.observe(reading),
            reward,
            continue_flag: !terminated,
            truncated,
            info,
        })
    }
}
