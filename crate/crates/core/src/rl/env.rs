//! Localization environment: joint-space actions on translation, rotation and bending,
//! collision-terminated episodes, and the four-case terminal reward.

use crate::anatomy::{collision, HeartModel, ValveTarget};
use crate::kinematics::{
    clamp_joints, forward_kinematics, CatheterShape, Dof, JointLimits, JointState, RigGeometry,
    TipPose,
};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub max_steps: usize,
    /// Largest per-step change of (translation mm, rotation deg, bending deg).
    pub action_scale: [f64; 3],
    pub success_pos_tol: f64,
    pub success_ang_tol: f64,
    pub wall_margin: f64,
    pub r_step: f64,
    pub r_obstacle: f64,
    pub r_target: f64,
    /// Weight of the lateral centerline error, per mm.
    pub w_err: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_steps: 200,
            action_scale: [8.0, 8.0, 8.0],
            success_pos_tol: 5.0,
            success_ang_tol: 10.0,
            wall_margin: 1.0,
            r_step: -50.0,
            r_obstacle: -300.0,
            r_target: 300.0,
            w_err: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("invalid env config: {0}")]
    InvalidConfig(String),
    #[error("valve target lies outside the lumen")]
    TargetOutside,
    #[error("initial state in collision after {0} draws")]
    InitialCollision(usize),
    #[error("step called on a finished episode")]
    StepAfterTerminal,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.into()));
        if self.max_steps < 1 {
            return bad("max_steps must be at least 1");
        }
        if !self.action_scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return bad("action_scale entries must be positive");
        }
        if !(self.success_pos_tol > 0.0 && self.success_ang_tol > 0.0) {
            return bad("success tolerances must be positive");
        }
        if !(self.wall_margin >= 0.0) {
            return bad("wall_margin must be non-negative");
        }
        if !(self.r_step < 0.0 && self.r_obstacle < 0.0 && self.r_target > 0.0) {
            return bad("need r_step < 0, r_obstacle < 0 and r_target > 0");
        }
        if !(self.w_err >= 0.0 && self.w_err.is_finite()) {
            return bad("w_err must be non-negative");
        }
        Ok(())
    }
}

/// Initial states: uniform box around `nominal` in the planning DOFs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitDistribution {
    pub nominal: JointState,
    pub translation_halfwidth: f64,
    pub rotation_halfwidth: f64,
    /// Bending is drawn from `[nominal, nominal + bending_span]`.
    pub bending_span: f64,
}

impl Default for InitDistribution {
    fn default() -> Self {
        Self {
            nominal: JointState::zero().with(Dof::Translation, 20.0),
            translation_halfwidth: 15.0,
            rotation_halfwidth: 30.0,
            bending_span: 10.0,
        }
    }
}

impl InitDistribution {
    pub fn fixed(nominal: JointState) -> Self {
        Self {
            nominal,
            translation_halfwidth: 0.0,
            rotation_halfwidth: 0.0,
            bending_span: 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> JointState {
        let mut u = |w: f64| if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
        let dt = u(self.translation_halfwidth);
        let dr = u(self.rotation_halfwidth);
        let db = if self.bending_span > 0.0 {
            rng.random_range(0.0..=self.bending_span)
        } else {
            0.0
        };
        let n = self.nominal;
        n.with_planning([n.translation + dt, n.rotation + dr, n.bending + db])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalKind {
    Running,
    Collision,
    Timeout,
    MaxBend,
    Success,
}

impl TerminalKind {
    pub fn is_terminal(self) -> bool {
        self != TerminalKind::Running
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub step: f64,
    pub obstacle: f64,
    pub error: f64,
    pub target: f64,
}

impl RewardBreakdown {
    pub fn total(&self) -> f64 {
        self.step + self.obstacle + self.error + self.target
    }
}

/// Distance from `p` to the line through the tip along its axis, i.e. the norm of the
/// lateral (x, y) coordinates of `p` in the tip frame.
pub fn lateral_offset(tip: &TipPose, p: &Vector3<f64>) -> f64 {
    let q = p - tip.position;
    (q - tip.axis * q.dot(&tip.axis)).norm()
}

/// Per-step reward; the lateral-error term only enters on timeout, maximum bend and success.
pub fn reward(tip: &TipPose, target: &ValveTarget, terminal: TerminalKind, cfg: &EnvConfig) -> RewardBreakdown {
    let error = || -cfg.w_err * (lateral_offset(tip, &target.p1) + lateral_offset(tip, &target.p2));
    let mut r = RewardBreakdown {
        step: cfg.r_step,
        ..Default::default()
    };
    match terminal {
        TerminalKind::Running => {}
        TerminalKind::Collision => r.obstacle = cfg.r_obstacle,
        TerminalKind::Timeout | TerminalKind::MaxBend => r.error = error(),
        TerminalKind::Success => {
            r.error = error();
            r.target = cfg.r_target;
        }
    }
    r
}

/// Tip-to-centerline geometry used for success and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetError {
    /// Distance from the tip to the closest point of the p1–p2 segment, mm.
    pub position: f64,
    /// Angle between the tip axis and the target axis, degrees.
    pub orientation: f64,
    /// Signed tip depth past the p1 plane along the target axis, mm.
    pub depth: f64,
}

pub fn target_error(tip: &TipPose, target: &ValveTarget) -> TargetError {
    let depth = target.depth(&tip.position);
    let s = depth.clamp(0.0, target.length());
    let closest = target.p1 + target.axis * s;
    let cos = tip.axis.normalize().dot(&target.axis).clamp(-1.0, 1.0);
    TargetError {
        position: (tip.position - closest).norm(),
        orientation: cos.acos().to_degrees(),
        depth,
    }
}

/// Planning joints scaled to [-1, 1] plus the two centerline points in the tip frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub joints: [f64; 3],
    pub p1: [f64; 3],
    pub p2: [f64; 3],
}

impl Observation {
    pub const LEN: usize = 9;

    pub fn to_array(&self) -> [f64; 9] {
        let mut v = [0.0; 9];
        v[..3].copy_from_slice(&self.joints);
        v[3..6].copy_from_slice(&self.p1);
        v[6..].copy_from_slice(&self.p2);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: RewardBreakdown,
    pub terminal: TerminalKind,
    pub joints: JointState,
    pub tip: TipPose,
}

#[derive(Debug, Clone)]
pub struct Env {
    model: Arc<HeartModel>,
    target: ValveTarget,
    limits: JointLimits,
    rig: RigGeometry,
    cfg: EnvConfig,
    init: InitDistribution,
    rng: ChaCha8Rng,
    joints: JointState,
    steps: usize,
    done: bool,
}

/// Redraws allowed before `reset` gives up on a collision-free start.
pub const MAX_INIT_DRAWS: usize = 100;

impl Env {
    pub fn new(
        model: Arc<HeartModel>,
        target: ValveTarget,
        limits: JointLimits,
        rig: RigGeometry,
        cfg: EnvConfig,
        init: InitDistribution,
        seed: u64,
    ) -> Result<Self, EnvError> {
        cfg.validate()?;
        limits
            .validate()
            .map_err(|e| EnvError::InvalidConfig(e.to_string()))?;
        if !model.contains(&target.p1) || !model.contains(&target.p2) {
            return Err(EnvError::TargetOutside);
        }
        let joints = clamp_joints(&init.nominal, &limits);
        Ok(Self {
            model,
            target,
            limits,
            rig,
            cfg,
            init,
            rng: ChaCha8Rng::seed_from_u64(seed),
            joints,
            steps: 0,
            done: false,
        })
    }

    pub fn model(&self) -> &Arc<HeartModel> {
        &self.model
    }

    pub fn target(&self) -> &ValveTarget {
        &self.target
    }

    pub fn limits(&self) -> &JointLimits {
        &self.limits
    }

    pub fn rig(&self) -> &RigGeometry {
        &self.rig
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn init_distribution(&self) -> &InitDistribution {
        &self.init
    }

    pub fn joints(&self) -> JointState {
        self.joints
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn shape(&self, j: &JointState) -> CatheterShape {
        forward_kinematics(j, &self.rig)
    }

    pub fn collides(&self, j: &JointState) -> bool {
        collision(&self.model, &self.shape(j), self.cfg.wall_margin)
    }

    /// Draw a collision-free start from the init distribution.
    pub fn reset(&mut self) -> Result<Observation, EnvError> {
        for _ in 0..MAX_INIT_DRAWS {
            let j = clamp_joints(&self.init.sample(&mut self.rng), &self.limits);
            if !self.collides(&j) {
                return Ok(self.reset_to(j));
            }
        }
        Err(EnvError::InitialCollision(MAX_INIT_DRAWS))
    }

    /// Start an episode from `j` (clamped) without consuming randomness.
    pub fn reset_to(&mut self, j: JointState) -> Observation {
        self.joints = clamp_joints(&j, &self.limits);
        self.steps = 0;
        self.done = false;
        self.observe(&self.joints)
    }

    pub fn observe(&self, j: &JointState) -> Observation {
        let frame = self.shape(j).tip_frame;
        let p1 = frame.to_local(&self.target.p1);
        let p2 = frame.to_local(&self.target.p2);
        let norm = [
            self.limits.translation.normalize(j.translation),
            self.limits.rotation.normalize(j.rotation),
            self.limits.bending.normalize(j.bending),
        ];
        Observation {
            joints: norm,
            p1: [p1.x, p1.y, p1.z],
            p2: [p2.x, p2.y, p2.z],
        }
    }

    /// Joint state reached from `j` by `action`, clipped to [-1, 1] and the limits.
    pub fn apply_action(&self, j: &JointState, action: &[f64; 3]) -> JointState {
        let p = j.planning();
        let mut next = [0.0; 3];
        for k in 0..3 {
            let a = if action[k].is_finite() { action[k].clamp(-1.0, 1.0) } else { 0.0 };
            next[k] = p[k] + a * self.cfg.action_scale[k];
        }
        clamp_joints(&j.with_planning(next), &self.limits)
    }

    /// Terminal classification of a state reached after `steps` steps. Cases are checked
    /// in the order collision, success, maximum bend, timeout.
    pub fn classify(&self, j: &JointState, steps: usize) -> (TerminalKind, TipPose) {
        let shape = self.shape(j);
        let tip = shape.tip_pose();
        let kind = if collision(&self.model, &shape, self.cfg.wall_margin) {
            TerminalKind::Collision
        } else if self.is_success(&tip) {
            TerminalKind::Success
        } else if j.bending >= self.limits.bending.max {
            TerminalKind::MaxBend
        } else if steps >= self.cfg.max_steps {
            TerminalKind::Timeout
        } else {
            TerminalKind::Running
        };
        (kind, tip)
    }

    pub fn is_success(&self, tip: &TipPose) -> bool {
        let e = target_error(tip, &self.target);
        e.depth > 0.0 && e.position <= self.cfg.success_pos_tol && e.orientation <= self.cfg.success_ang_tol
    }

    pub fn step(&mut self, action: [f64; 3]) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterTerminal);
        }
        let j = self.apply_action(&self.joints, &action);
        self.steps += 1;
        let (terminal, tip) = self.classify(&j, self.steps);
        self.joints = j;
        self.done = terminal.is_terminal();
        Ok(StepOutcome {
            observation: self.observe(&j),
            reward: reward(&tip, &self.target, terminal, &self.cfg),
            terminal,
            joints: j,
            tip,
        })
    }
}
