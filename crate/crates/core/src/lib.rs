//! Model-based reinforcement learning with privileged training-time sensors.
//!
//! A target policy that only sees impoverished observations is trained inside
//! a world model that additionally sees privileged observations. The crate
//! contains the numerics it runs on, small partially observable
//! environments, both world models, the agent and its update rules, replay,
//! the baseline/ablation switchboard, return-error analysis and the
//! experiment harness behind the `scaffolder` CLI.

pub mod agent;
pub mod analysis;
pub mod codec;
pub mod envs;
pub mod harness;
pub mod numerics;
pub mod replay;
pub mod variants;
pub mod world_model;
