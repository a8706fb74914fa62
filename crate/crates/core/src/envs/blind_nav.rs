//! Goal reaching on a 15×15 grid where the agent sees only its own position.

use std::collections::BTreeMap;

use super::{Action, ActionSpace, EnvError, EnvSpec, Environment, EpisodeClock, ObservationBundle, ScoreKind, StepResult};
use crate::numerics::Rng;

pub const GRID: i64 = 15;
pub const MAX_STEPS: usize = 100;
pub const STEP_COST: f64 = 0.01;
pub const GOAL_REWARD: f64 = 1.0;

/// Moves in action order: up, down, left, right, stay.
pub const MOVES: [(i64, i64); 5] = [(0, 1), (0, -1), (-1, 0), (1, 0), (0, 0)];

pub struct BlindNav {
    spec: EnvSpec,
    agent: (i64, i64),
    goal: (i64, i64),
    clock: EpisodeClock,
}

impl Default for BlindNav {
    fn default() -> Self {
        Self::new()
    }
}

fn normalize(c: i64) -> f64 {
    c as f64 / (GRID - 1) as f64
}

impl BlindNav {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "blind_nav".into(),
                target_dim: 2,
                privileged_dim: 2,
                action_space: ActionSpace::Discrete(5),
                max_episode_steps: MAX_STEPS,
                score_kind: ScoreKind::Return,
            },
            agent: (0, 0),
            goal: (0, 0),
            clock: EpisodeClock {
                steps: 0,
                ended: true,
            },
        }
    }

    /// Start an episode from explicit cells instead of a seed.
    pub fn reset_to(&mut self, agent: (i64, i64), goal: (i64, i64)) -> ObservationBundle {
        self.agent = agent;
        self.goal = goal;
        self.clock.reset();
        self.observe()
    }

    pub fn agent(&self) -> (i64, i64) {
        self.agent
    }

    pub fn goal(&self) -> (i64, i64) {
        self.goal
    }

    fn observe(&self) -> ObservationBundle {
        ObservationBundle {
            target: vec![normalize(self.agent.0), normalize(self.agent.1)],
            privileged: vec![normalize(self.goal.0), normalize(self.goal.1)],
        }
    }
}

impl Environment for BlindNav {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> ObservationBundle {
        let mut rng = Rng::new(seed);
        let cells = (GRID * GRID) as usize;
        let a = rng.below(cells);
        let mut g = rng.below(cells - 1);
        if g >= a {
            g += 1;
        }
        let cell = |i: usize| ((i as i64) % GRID, (i as i64) / GRID);
        self.reset_to(cell(a), cell(g))
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        self.clock.check()?;
        let a = match action {
            Action::Discrete(a) if *a < 5 => *a,
            Action::Discrete(a) => return Err(EnvError::ActionOutOfRange { action: *a, n: 5 }),
            Action::Continuous(_) => {
                return Err(EnvError::WrongActionKind {
                    env: self.spec.name.clone(),
                    expected: "discrete",
                })
            }
        };
        let (dx, dy) = MOVES[a];
        self.agent = (
            (self.agent.0 + dx).clamp(0, GRID - 1),
            (self.agent.1 + dy).clamp(0, GRID - 1),
        );
        let reached = self.agent == self.goal;
        let reward = if reached { GOAL_REWARD } else { -STEP_COST };
        let truncated = self.clock.tick(reached, MAX_STEPS);
        let mut info = BTreeMap::new();
        if reached {
            info.insert("success".to_string(), 1.0);
        }
        Ok(StepResult {
            obs: self.observe(),
            reward,
            continue_flag: !reached,
            truncated,
            info,
        })
    }
}
