//! A car on a line must find a green flag whose side is random. Touching a
//! blue flag at a fixed point reveals where the green flag is.

use std::collections::BTreeMap;

use super::{Action, ActionSpace, EnvError, EnvSpec, Environment, EpisodeClock, ObservationBundle, ScoreKind, StepResult};
use crate::numerics::Rng;

pub const MAX_SPEED: f64 = 0.1;
pub const BLUE_FLAG: f64 = -0.4;
pub const GREEN_OFFSET: f64 = 0.8;
pub const BOUNDARY: f64 = 1.0;
pub const START_RANGE: (f64, f64) = (0.0, 0.2);
pub const STEP_COST: f64 = 0.005;
pub const MAX_STEPS: usize = 160;

pub struct CarFlag {
    spec: EnvSpec,
    position: f64,
    green: f64,
    revealed: bool,
    clock: EpisodeClock,
}

impl Default for CarFlag {
    fn default() -> Self {
        Self::new()
    }
}

fn crossed(from: f64, to: f64, point: f64) -> bool {
    (from.min(to) <= point) && (point <= from.max(to))
}

impl CarFlag {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "car_flag".into(),
                target_dim: 3,
                privileged_dim: 1,
                action_space: ActionSpace::Continuous {
                    dim: 1,
                    low: -1.0,
                    high: 1.0,
                },
                max_episode_steps: MAX_STEPS,
                score_kind: ScoreKind::Return,
            },
            position: 0.0,
            green: GREEN_OFFSET,
            revealed: false,
            clock: EpisodeClock {
                steps: 0,
                ended: true,
            },
        }
    }

    pub fn reset_to(&mut self, position: f64, green: f64) -> ObservationBundle {
        self.position = position;
        self.green = green;
        self.revealed = false;
        self.clock.reset();
        self.observe()
    }

    pub fn position(&self) -> f64 {
        self.position
    }

    pub fn green(&self) -> f64 {
        self.green
    }

    fn observe(&self) -> ObservationBundle {
        let (flag, at) = if self.revealed { (1.0, self.green) } else { (0.0, 0.0) };
        ObservationBundle {
            target: vec![self.position, flag, at],
            privileged: vec![self.green],
        }
    }
}

impl Environment for CarFlag {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> ObservationBundle {
        let mut rng = Rng::new(seed);
        let start = rng.uniform(START_RANGE.0, START_RANGE.1);
        let green = if rng.below(2) == 0 { GREEN_OFFSET } else { -GREEN_OFFSET };
        self.reset_to(start, green)
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        self.clock.check()?;
        let raw = match action {
            Action::Continuous(v) if v.len() == 1 => v[0],
            _ => {
                return Err(EnvError::WrongActionKind {
                    env: self.spec.name.clone(),
                    expected: "one-dimensional continuous",
                })
            }
        };
        let mut info = BTreeMap::new();
        let throttle = if raw.is_nan() { 0.0 } else { raw.clamp(-1.0, 1.0) };
        if throttle != raw {
            info.insert("action_clamped".to_string(), 1.0);
        }
        let from = self.position;
        let to = (from + MAX_SPEED * throttle).clamp(-BOUNDARY, BOUNDARY);
        self.position = to;
        if crossed(from, to, BLUE_FLAG) {
            self.revealed = true;
        }
        let (reward, terminated) = if crossed(from, to, self.green) {
            info.insert("success".to_string(), 1.0);
            (1.0, true)
        } else if to.abs() >= BOUNDARY {
            (-1.0, true)
        } else {
            (-STEP_COST, false)
        };
        let truncated = self.clock.tick(terminated, MAX_STEPS);
        Ok(StepResult {
            obs: self.observe(),
            reward,
            continue_flag: !terminated,
            truncated,
            info,
        })
    }
}
