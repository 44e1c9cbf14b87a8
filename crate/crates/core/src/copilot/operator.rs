//! A seeded synthetic operator for closed-loop experiments without a human at the console.
//!
//! The operator believes the target configuration is `goal + bias` and perceives the session
//! `reaction_delay` seconds late. It drives one planning DOF at a time with a proportional,
//! noisy velocity command. In master-slave mode it drives until it believes it has arrived.
//! In copilot mode it only steps in once the tip strays more than `intervention_threshold`
//! from the straight approach it expects (start tip to believed goal tip), and lets go
//! once back within half that distance or after `correction_time`, whichever comes first.
//! Letting go re-anchors the expected approach at the current tip.

use super::{ControlAxis, ControlMode, OperatorCommand, Session, SessionState};
use crate::kinematics::{forward_kinematics, Dof, JointState};
use crate::rl::eval::{rollout, PolicyController};
use crate::rl::{Env, Policy, TerminalKind};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorProfile {
    /// Seconds between the session state and the operator's perception of it.
    pub reaction_delay: f64,
    /// Magnitude of the operator's belief error per planning DOF (mm or deg).
    pub error_bias: f64,
    /// Tip deviation (mm) from the expected approach that triggers a copilot intervention.
    pub intervention_threshold: f64,
    /// Standard deviation of the noise added to each velocity fraction.
    pub noise: f64,
    /// Proportional gain from remaining seconds-at-full-speed to velocity fraction.
    pub gain: f64,
    /// Longest single copilot intervention, seconds.
    pub correction_time: f64,
}

impl Default for OperatorProfile {
    fn default() -> Self {
        Self {
            reaction_delay: 0.2,
            error_bias: 1.0,
            intervention_threshold: 10.0,
            noise: 0.05,
            gain: 2.0,
            correction_time: 0.5,
        }
    }
}

impl OperatorProfile {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.reaction_delay >= 0.0 && self.reaction_delay.is_finite()) {
            return Err("reaction_delay must be finite and >= 0".into());
        }
        if !(self.error_bias >= 0.0 && self.error_bias.is_finite()) {
            return Err("error_bias must be finite and >= 0".into());
        }
        if !(self.intervention_threshold > 0.0) {
            return Err("intervention_threshold must be > 0".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.gain > 0.0 && self.gain.is_finite()) {
            return Err("noise must be >= 0 and gain > 0".into());
        }
        if !(self.correction_time > 0.0) {
            return Err("correction_time must be > 0".into());
        }
        Ok(())
    }

    /// `n` profiles spread over plausible operator behaviour, drawn from `seed`.
    pub fn seeded(n: usize, seed: u64) -> Vec<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Self {
                reaction_delay: rng.random_range(0.1..0.4),
                error_bias: rng.random_range(0.0..3.0),
                intervention_threshold: rng.random_range(2.0..8.0),
                noise: rng.random_range(0.0..0.15),
                gain: rng.random_range(1.5..3.0),
                correction_time: rng.random_range(0.3..0.8),
            })
            .collect()
    }
}

/// Seconds at full speed below which the operator treats a DOF as arrived.
const DEADBAND: f64 = 0.05;

pub struct ScriptedOperator {
    pub profile: OperatorProfile,
    /// Believed target configuration for the planning DOFs.
    pub goal: [f64; 3],
    rng: ChaCha8Rng,
    seen: VecDeque<SessionState>,
    start_tip: Option<Vector3<f64>>,
    goal_tip: Vector3<f64>,
    active: Option<Dof>,
    /// Perceived time at which the current intervention began.
    intervening: Option<f64>,
}

impl ScriptedOperator {
    /// Operator aiming at `goal` shifted by a seeded ±`error_bias` per planning DOF.
    pub fn new(profile: OperatorProfile, goal: JointState, env: &Env, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = goal.planning();
        let believed: [f64; 3] = std::array::from_fn(|k| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            p[k] + sign * profile.error_bias
        });
        let believed_state = goal.with_planning(believed);
        let goal_tip = forward_kinematics(&believed_state, env.rig()).tip_pose().position;
        Self {
            profile,
            goal: believed,
            rng,
            seen: VecDeque::new(),
            start_tip: None,
            goal_tip,
            active: None,
            intervening: None,
        }
    }

    /// The state the operator currently perceives: the newest one at least
    /// `reaction_delay` old, or the oldest seen.
    fn perceive(&mut self, now: SessionState) -> SessionState {
        if self.start_tip.is_none() {
            self.start_tip = Some(now.tip.position);
        }
        self.seen.push_back(now);
        let cutoff = now.t - self.profile.reaction_delay;
        while self.seen.len() > 1 && self.seen[1].t <= cutoff + 1e-12 {
            self.seen.pop_front();
        }
        self.seen[0]
    }

    /// Distance from the tip to the expected straight approach.
    pub fn deviation(&self, tip: &Vector3<f64>) -> f64 {
        let a = self.start_tip.unwrap_or(*tip);
        let ab = self.goal_tip - a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 { ((tip - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
        (tip - (a + ab * t)).norm()
    }

    /// Whether the operator believes every planning DOF has arrived.
    pub fn believes_arrived(&self, j: &JointState, session: &Session) -> bool {
        self.remaining(j, session).iter().all(|r| r.abs() < DEADBAND)
    }

    /// Signed seconds at full speed left per planning DOF.
    fn remaining(&self, j: &JointState, session: &Session) -> [f64; 3] {
        let p = j.planning();
        std::array::from_fn(|k| (self.goal[k] - p[k]) / session.config().max_vel(Dof::PLANNING[k]))
    }

    fn drive(&mut self, perceived: &SessionState, session: &Session) -> Option<OperatorCommand> {
        let rem = self.remaining(&perceived.joints, session);
        let (best, best_abs) = rem
            .iter()
            .enumerate()
            .map(|(k, r)| (k, r.abs()))
            .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best_abs < DEADBAND {
            self.active = None;
            return None;
        }
        // stay on the current DOF until another clearly has further to go
        let k = match self.active.and_then(|d| d.planning_index()) {
            Some(a) if rem[a].abs() >= DEADBAND && rem[a].abs() >= 0.5 * best_abs => a,
            _ => best,
        };
        self.active = Some(Dof::PLANNING[k]);
        let noise: f64 = self.rng.sample::<f64, _>(StandardNormal) * self.profile.noise;
        let vf = (self.profile.gain * rem[k] + noise).clamp(-1.0, 1.0);
        Some(OperatorCommand {
            axis: ControlAxis::single(Dof::PLANNING[k]),
            velocity_fraction: vf,
            timestamp: perceived.t,
        })
    }

    /// Command for the next tick given the latest session snapshot.
    pub fn command(&mut self, session: &Session) -> Option<OperatorCommand> {
        let perceived = self.perceive(session.state());
        match session.mode() {
            ControlMode::MasterSlave => self.drive(&perceived, session),
            ControlMode::Copilot => {
                let dev = self.deviation(&perceived.tip.position);
                let threshold = self.profile.intervention_threshold;
                match self.intervening {
                    None if dev > threshold => self.intervening = Some(perceived.t),
                    Some(t0) if dev < 0.5 * threshold || perceived.t - t0 >= self.profile.correction_time => {
                        self.release(&perceived)
                    }
                    _ => {}
                }
                if self.intervening.is_none() {
                    self.active = None;
                    return None;
                }
                let cmd = self.drive(&perceived, session);
                if cmd.is_none() {
                    self.release(&perceived);
                }
                cmd
            }
        }
    }
}

impl ScriptedOperator {
    fn release(&mut self, perceived: &SessionState) {
        self.intervening = None;
        self.start_tip = Some(perceived.tip.position);
    }
}

/// End of the plan from the env's nominal start, if that plan succeeds.
pub fn planned_goal(policy: &Policy, env: &mut Env) -> Option<JointState> {
    let start = env.init_distribution().nominal;
    env.reset_to(start);
    let t = rollout(&mut PolicyController::new(policy, true, 0), env).ok()?;
    (t.terminal() == TerminalKind::Success).then(|| t.steps.last().expect("non-empty").outcome.joints)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopLimits {
    pub max_ticks: usize,
    /// Seconds of operator inactivity after which a session with nothing left to do ends.
    pub settle_time: f64,
}

impl Default for LoopLimits {
    fn default() -> Self {
        Self {
            max_ticks: 6000,
            settle_time: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopEnd {
    Reached,
    Collision,
    Settled,
    TickLimit,
}

/// Tick `session` with `operator` until the target is reached, the catheter collides,
/// nothing moves for `settle_time`, or the tick limit.
pub fn run_closed_loop(session: &mut Session, operator: &mut ScriptedOperator, limits: &LoopLimits) -> LoopEnd {
    let dt = session.config().dt();
    let mut quiet = 0.0;
    for _ in 0..limits.max_ticks {
        let cmd = operator.command(session);
        let before = session.joints();
        let state = session.tick(dt, cmd).expect("scripted commands respect the phase");
        if state.terminal == super::SessionTerminal::Reached {
            return LoopEnd::Reached;
        }
        if state.terminal == super::SessionTerminal::Collision {
            return LoopEnd::Collision;
        }
        if cmd.is_none() && session.joints() == before {
            quiet += dt;
            if quiet >= limits.settle_time {
                return LoopEnd::Settled;
            }
        } else {
            quiet = 0.0;
        }
    }
    LoopEnd::TickLimit
}
