//! Localization environment and the soft actor-critic agent trained on it.

pub mod env;
pub mod eval;
pub mod sac;

pub use env::{
    reward, target_error, Env, EnvConfig, EnvError, InitDistribution, Observation, RewardBreakdown,
    StepOutcome, TargetError, TerminalKind,
};
pub use eval::{evaluate, evaluate_with, rollout, Controller, LocalizationStats, PolicyController, Trajectory};
pub use sac::{train_sac, Policy, PolicyDoc, SacConfig, SacError, TrainingCurves};
