//! Rollouts and localization statistics.

use super::env::{target_error, Env, EnvError, Observation, StepOutcome, TerminalKind};
use super::sac::{Policy, ACTION_DIM};
use crate::kinematics::JointState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Anything that picks a normalized action from an observation.
pub trait Controller {
    fn action(&mut self, env: &Env, obs: &Observation) -> [f64; ACTION_DIM];
}

/// A policy driven either by its squashed mean or by seeded samples.
pub struct PolicyController<'a> {
    pub policy: &'a Policy,
    pub deterministic: bool,
    pub rng: ChaCha8Rng,
}

impl<'a> PolicyController<'a> {
    pub fn new(policy: &'a Policy, deterministic: bool, seed: u64) -> Self {
        Self {
            policy,
            deterministic,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Controller for PolicyController<'_> {
    fn action(&mut self, _env: &Env, obs: &Observation) -> [f64; ACTION_DIM] {
        self.policy.act(obs, self.deterministic, &mut self.rng)
    }
}

impl<F: FnMut(&Env, &Observation) -> [f64; ACTION_DIM]> Controller for F {
    fn action(&mut self, env: &Env, obs: &Observation) -> [f64; ACTION_DIM] {
        self(env, obs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub action: [f64; ACTION_DIM],
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial: JointState,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.outcome.reward.total()).sum()
    }

    pub fn terminal(&self) -> TerminalKind {
        self.steps.last().map_or(TerminalKind::Running, |s| s.outcome.terminal)
    }

    /// Joint states visited, starting with the initial one.
    pub fn joint_path(&self) -> Vec<JointState> {
        std::iter::once(self.initial)
            .chain(self.steps.iter().map(|s| s.outcome.joints))
            .collect()
    }
}

/// Step a freshly reset env until it reports a terminal state.
pub fn rollout(controller: &mut impl Controller, env: &mut Env) -> Result<Trajectory, EnvError> {
    let initial = env.joints();
    let mut obs = env.observe(&initial);
    let mut steps = Vec::new();
    loop {
        let action = controller.action(env, &obs);
        let outcome = env.step(action)?;
        obs = outcome.observation;
        let done = outcome.terminal.is_terminal();
        steps.push(StepRecord { action, outcome });
        if done {
            return Ok(Trajectory { initial, steps });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub terminal: TerminalKind,
    pub success: bool,
    pub steps: usize,
    pub total_reward: f64,
    pub position_error: f64,
    pub orientation_error: f64,
    pub depth: f64,
}

impl RolloutRecord {
    pub fn from_trajectory(t: &Trajectory, env: &Env) -> Self {
        let last = t.steps.last().expect("rollouts take at least one step");
        let e = target_error(&last.outcome.tip, env.target());
        Self {
            terminal: last.outcome.terminal,
            success: last.outcome.terminal == TerminalKind::Success,
            steps: t.steps.len(),
            total_reward: t.total_reward(),
            position_error: e.position,
            orientation_error: e.orientation,
            depth: e.depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationStats {
    pub n: usize,
    pub success_rate: f64,
    pub position_mean: f64,
    pub position_std: f64,
    pub position_max: f64,
    pub orientation_mean: f64,
    pub orientation_std: f64,
    pub orientation_max: f64,
    pub records: Vec<RolloutRecord>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl LocalizationStats {
    pub fn from_records(records: Vec<RolloutRecord>) -> Self {
        assert!(!records.is_empty(), "need at least one rollout");
        let pos: Vec<f64> = records.iter().map(|r| r.position_error).collect();
        let ang: Vec<f64> = records.iter().map(|r| r.orientation_error).collect();
        let (pm, ps) = mean_std(&pos);
        let (am, as_) = mean_std(&ang);
        Self {
            n: records.len(),
            success_rate: records.iter().filter(|r| r.success).count() as f64 / records.len() as f64,
            position_mean: pm,
            position_std: ps,
            position_max: pos.iter().copied().fold(0.0, f64::max),
            orientation_mean: am,
            orientation_std: as_,
            orientation_max: ang.iter().copied().fold(0.0, f64::max),
            records,
        }
    }
}

/// `n` rollouts of `controller` from starts drawn with `seed`.
pub fn evaluate_with(
    controller: &mut impl Controller,
    env: &mut Env,
    n: usize,
    seed: u64,
) -> Result<LocalizationStats, EnvError> {
    assert!(n >= 1, "need at least one rollout");
    env.reseed(seed);
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        env.reset()?;
        let t = rollout(controller, env)?;
        records.push(RolloutRecord::from_trajectory(&t, env));
    }
    Ok(LocalizationStats::from_records(records))
}

/// Deterministic-mode evaluation of a policy.
pub fn evaluate(policy: &Policy, env: &mut Env, n: usize, seed: u64) -> Result<LocalizationStats, EnvError> {
    evaluate_with(&mut PolicyController::new(policy, true, seed), env, n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_small_cases() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
