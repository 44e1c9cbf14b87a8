//! Co-piloted control: the session loop that follows a policy plan, arbitrates single-DOF
//! operator overrides under the speed governor, replans after interventions and gates DOFs
//! by surgical phase.

pub mod operator;

use crate::kinematics::{clamp_joints, Dof, JointState, TipPose};
use crate::probmap::{speed_scale, speed_scales, GovernorConfig, ProbabilityMap, SpeedScale};
use crate::rl::eval::{rollout, PolicyController};
use crate::rl::{Env, Policy, TerminalKind};
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initialization,
    Localization,
    Releasing,
    Anchoring,
    Retraction,
}

/// What a single operator command moves: one DOF, or sheath and core together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlAxis {
    Translation,
    Rotation,
    Sheath,
    Bending,
    Core,
    Jaw,
    SheathCore,
}

impl ControlAxis {
    pub fn single(dof: Dof) -> Self {
        match dof {
            Dof::Translation => ControlAxis::Translation,
            Dof::Rotation => ControlAxis::Rotation,
            Dof::Sheath => ControlAxis::Sheath,
            Dof::Bending => ControlAxis::Bending,
            Dof::Core => ControlAxis::Core,
            Dof::Jaw => ControlAxis::Jaw,
        }
    }

    pub fn dofs(self) -> &'static [Dof] {
        match self {
            ControlAxis::Translation => &[Dof::Translation],
            ControlAxis::Rotation => &[Dof::Rotation],
            ControlAxis::Sheath => &[Dof::Sheath],
            ControlAxis::Bending => &[Dof::Bending],
            ControlAxis::Core => &[Dof::Core],
            ControlAxis::Jaw => &[Dof::Jaw],
            ControlAxis::SheathCore => &[Dof::Sheath, Dof::Core],
        }
    }
}

impl Phase {
    pub const ORDER: [Phase; 5] = [
        Phase::Initialization,
        Phase::Localization,
        Phase::Releasing,
        Phase::Anchoring,
        Phase::Retraction,
    ];

    pub fn allowed_axes(self) -> &'static [ControlAxis] {
        use ControlAxis::*;
        match self {
            Phase::Initialization => &[Translation, Rotation],
            Phase::Localization => &[Translation, Rotation, Bending],
            Phase::Releasing => &[Sheath, Core, SheathCore],
            // the anchoring needle is pushed by hand
            Phase::Anchoring => &[],
            Phase::Retraction => &[Translation, Sheath, Core],
        }
    }

    pub fn allows(self, axis: ControlAxis) -> bool {
        self.allowed_axes().contains(&axis)
    }

    /// DOFs any allowed axis may move.
    pub fn allowed_dofs(self) -> Vec<Dof> {
        let mut v: Vec<Dof> = self.allowed_axes().iter().flat_map(|a| a.dofs().iter().copied()).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn successor(self) -> Option<Phase> {
        let i = Self::ORDER.iter().position(|&p| p == self)?;
        Self::ORDER.get(i + 1).copied()
    }

    /// The next phase in order, or an abort to retraction from anywhere else.
    pub fn can_transition_to(self, next: Phase) -> bool {
        self.successor() == Some(next) || (next == Phase::Retraction && self != Phase::Retraction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    MasterSlave,
    Copilot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorCommand {
    pub axis: ControlAxis,
    /// Fraction of the axis's maximum velocity, in [-1, 1].
    pub velocity_fraction: f64,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CopilotConfig {
    /// Per-DOF speed limits in DOF order (translation, rotation, sheath, bending, core,
    /// jaw); mm/s or deg/s.
    pub max_velocity: [f64; 6],
    /// Seconds without a command that end an intervention.
    pub idle_timeout: f64,
    pub tick_rate: f64,
    pub governor: GovernorConfig,
}

impl Default for CopilotConfig {
    fn default() -> Self {
        Self {
            max_velocity: [10.0, 30.0, 5.0, 20.0, 5.0, 45.0],
            idle_timeout: 0.5,
            tick_rate: 50.0,
            governor: GovernorConfig::default(),
        }
    }
}

impl CopilotConfig {
    pub fn validate(&self) -> Result<(), CopilotError> {
        let bad = |m: &str| Err(CopilotError::InvalidConfig(m.into()));
        if self.max_velocity.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("max_velocity entries must be positive");
        }
        if !(self.idle_timeout >= 0.0 && self.tick_rate > 0.0) {
            return bad("idle_timeout must be >= 0 and tick_rate > 0");
        }
        if !(self.governor.floor > 0.0 && self.governor.floor <= 1.0) {
            return bad("governor floor must lie in (0, 1]");
        }
        if self.governor.lookahead.iter().any(|&l| !(l > 0.0)) {
            return bad("governor lookahead must be positive");
        }
        Ok(())
    }

    pub fn max_vel(&self, dof: Dof) -> f64 {
        self.max_velocity[dof.index()]
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.tick_rate
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CopilotError {
    #[error("invalid copilot config: {0}")]
    InvalidConfig(String),
    #[error("copilot mode needs a policy and probability maps")]
    MissingArtifacts,
    #[error("nominal rollout from the ideal start ended in collision")]
    NominalRolloutFailed,
    #[error("tick length must be positive (got {0})")]
    BadDt(f64),
    #[error("{axis:?} is not allowed in the {phase:?} phase")]
    DisallowedAxis { axis: ControlAxis, phase: Phase },
    #[error("velocity fraction {0} outside [-1, 1]")]
    BadVelocity(f64),
    #[error("illegal phase transition {from:?} -> {to:?}")]
    IllegalTransition { from: Phase, to: Phase },
    #[error("replanning needs copilot mode")]
    NotCopilot,
    #[error("replan collides on its first step; session is manual-only")]
    ReplanCollision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    SessionStart,
    InterventionStart,
    InterventionEnd,
    Replan,
    ReplanFailed,
    PhaseChange,
    PhaseRejected,
    CommandRejected,
    ModeChange,
    Collision,
    TargetReached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub kind: EventKind,
    pub payload: serde_json::Value,
}

/// One row per accepted tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: f64,
    pub joints: JointState,
    pub command: Option<OperatorCommand>,
    /// Governor scale applied to the command (1 when there is none).
    pub scale: f64,
    pub phase: Phase,
    pub collided: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionTerminal {
    None,
    Collision,
    Reached,
}

/// Immutable snapshot published after every tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub t: f64,
    pub joints: JointState,
    pub tip: TipPose,
    pub phase: Phase,
    pub mode: ControlMode,
    pub scales: SpeedScale,
    pub in_intervention: bool,
    pub terminal: SessionTerminal,
    pub total_time: f64,
    pub intervention_time: f64,
}

pub struct Session {
    mode: ControlMode,
    phase: Phase,
    joints: JointState,
    nominal: Vec<JointState>,
    /// Index of the next waypoint to move toward.
    nominal_index: usize,
    policy: Option<Policy>,
    map: Option<ProbabilityMap>,
    env: Env,
    cfg: CopilotConfig,
    events: Vec<Event>,
    history: Vec<TickRecord>,
    total_time: f64,
    intervention_time: f64,
    in_intervention: bool,
    idle_time: f64,
    manual_only: bool,
    collided: bool,
    reached: bool,
    /// Last commanded sign per planning DOF, for the governor gauges.
    last_direction: [f64; 3],
}

impl Session {
    pub fn mode(&self) -> ControlMode {
        self.mode
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn joints(&self) -> JointState {
        self.joints
    }

    pub fn nominal(&self) -> &[JointState] {
        &self.nominal
    }

    pub fn nominal_index(&self) -> usize {
        self.nominal_index
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn history(&self) -> &[TickRecord] {
        &self.history
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn config(&self) -> &CopilotConfig {
        &self.cfg
    }

    pub fn map(&self) -> Option<&ProbabilityMap> {
        self.map.as_ref()
    }

    pub fn total_time(&self) -> f64 {
        self.total_time
    }

    pub fn intervention_time(&self) -> f64 {
        self.intervention_time
    }

    pub fn in_intervention(&self) -> bool {
        self.in_intervention
    }

    pub fn is_manual_only(&self) -> bool {
        self.manual_only
    }

    pub fn reached(&self) -> bool {
        self.reached
    }

    pub fn collided(&self) -> bool {
        self.collided
    }

    /// Whether the plan has run out of waypoints.
    pub fn nominal_finished(&self) -> bool {
        self.nominal_index >= self.nominal.len()
    }

    fn log(&mut self, kind: EventKind, payload: serde_json::Value) {
        self.events.push(Event {
            t: self.total_time,
            kind,
            payload,
        });
    }

    pub fn events_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&serde_json::to_string(e).expect("serializable"));
            s.push('\n');
        }
        s
    }

    pub fn state(&self) -> SessionState {
        let tip = self.env.shape(&self.joints).tip_pose();
        let scales = match (&self.map, self.mode) {
            (Some(m), ControlMode::Copilot) => speed_scales(m, &self.joints, self.last_direction, &self.cfg.governor),
            _ => SpeedScale {
                translation: 1.0,
                rotation: 1.0,
                bending: 1.0,
            },
        };
        let terminal = if self.collided {
            SessionTerminal::Collision
        } else if self.reached {
            SessionTerminal::Reached
        } else {
            SessionTerminal::None
        };
        SessionState {
            t: self.total_time,
            joints: self.joints,
            tip,
            phase: self.phase,
            mode: self.mode,
            scales,
            in_intervention: self.in_intervention,
            terminal,
            total_time: self.total_time,
            intervention_time: self.intervention_time,
        }
    }

    /// Deterministic policy rollout from `start`: the start plus every state reached
    /// before any collision, and the rollout's terminal kind.
    fn plan_from(&mut self, start: JointState) -> (Vec<JointState>, TerminalKind) {
        let policy = self.policy.as_ref().expect("copilot sessions hold a policy");
        self.env.reset_to(start);
        let mut ctl = PolicyController::new(policy, true, 0);
        let traj = rollout(&mut ctl, &mut self.env).expect("fresh env");
        let mut path = vec![clamp_joints(&start, self.env.limits())];
        for s in &traj.steps {
            if s.outcome.terminal == TerminalKind::Collision {
                break;
            }
            path.push(s.outcome.joints);
        }
        (path, traj.terminal())
    }

    /// Recompute the plan from the current state.
    pub fn end_intervention_replan(&mut self) -> Result<(), CopilotError> {
        if self.mode != ControlMode::Copilot {
            return Err(CopilotError::NotCopilot);
        }
        let (path, terminal) = self.plan_from(self.joints);
        if path.len() == 1 && terminal == TerminalKind::Collision {
            self.manual_only = true;
            self.nominal = path;
            self.nominal_index = 1;
            self.log(EventKind::ReplanFailed, json!({"joints": self.joints}));
            return Err(CopilotError::ReplanCollision);
        }
        self.manual_only = false;
        self.log(
            EventKind::Replan,
            json!({"from": self.joints, "waypoints": path.len(), "terminal": terminal}),
        );
        self.nominal = path;
        self.nominal_index = 1;
        Ok(())
    }

    pub fn set_phase(&mut self, next: Phase) -> Result<(), CopilotError> {
        if !self.phase.can_transition_to(next) {
            self.log(EventKind::PhaseRejected, json!({"from": self.phase, "to": next}));
            return Err(CopilotError::IllegalTransition { from: self.phase, to: next });
        }
        self.log(EventKind::PhaseChange, json!({"from": self.phase, "to": next}));
        self.phase = next;
        self.in_intervention = false;
        self.idle_time = 0.0;
        Ok(())
    }

    /// Switch control mode. Entering copilot replans from the current state.
    pub fn set_mode(&mut self, mode: ControlMode) -> Result<(), CopilotError> {
        if mode == self.mode {
            return Ok(());
        }
        if mode == ControlMode::Copilot && (self.policy.is_none() || self.map.is_none()) {
            return Err(CopilotError::MissingArtifacts);
        }
        self.log(EventKind::ModeChange, json!({"from": self.mode, "to": mode}));
        self.mode = mode;
        self.in_intervention = false;
        self.idle_time = 0.0;
        match mode {
            ControlMode::Copilot => self.end_intervention_replan(),
            ControlMode::MasterSlave => {
                self.nominal.clear();
                self.nominal_index = 0;
                Ok(())
            }
        }
    }

    fn check_command(&mut self, cmd: &OperatorCommand) -> Result<(), CopilotError> {
        let err = if !self.phase.allows(cmd.axis) {
            Some(CopilotError::DisallowedAxis { axis: cmd.axis, phase: self.phase })
        } else if !(cmd.velocity_fraction.abs() <= 1.0) {
            Some(CopilotError::BadVelocity(cmd.velocity_fraction))
        } else {
            None
        };
        match err {
            Some(e) => {
                self.log(EventKind::CommandRejected, json!({"command": cmd, "reason": e.to_string()}));
                Err(e)
            }
            None => Ok(()),
        }
    }

    /// Governor scale for a command; 1 outside copilot, for non-planning DOFs, or when the
    /// command does not move.
    pub fn command_scale(&self, cmd: &OperatorCommand) -> f64 {
        let (ControlMode::Copilot, Some(map)) = (self.mode, &self.map) else {
            return 1.0;
        };
        let mut s: f64 = 1.0;
        for &dof in cmd.axis.dofs() {
            if dof.planning_index().is_some() {
                s = s.min(speed_scale(map, &self.joints, dof, cmd.velocity_fraction, &self.cfg.governor).expect("planning DOF"));
            }
        }
        s
    }

    /// Move toward the plan for `budget` seconds, each segment timed by its slowest DOF.
    fn advance_nominal(&mut self, mut budget: f64) {
        while budget > 0.0 && self.nominal_index < self.nominal.len() {
            let target = self.nominal[self.nominal_index];
            let cur = self.joints.to_array();
            let goal = target.to_array();
            let needed = Dof::ALL
                .iter()
                .map(|&d| (goal[d.index()] - cur[d.index()]).abs() / self.cfg.max_vel(d))
                .fold(0.0, f64::max);
            if needed <= budget {
                self.joints = target;
                budget -= needed;
                self.nominal_index += 1;
            } else {
                let f = budget / needed;
                let mut next = cur;
                for k in 0..6 {
                    next[k] = cur[k] + (goal[k] - cur[k]) * f;
                }
                self.joints = JointState::from_array(next);
                budget = 0.0;
            }
        }
    }

    /// Advance the session by `dt` seconds with an optional operator command.
    /// A rejected command leaves the session untouched apart from the event log.
    pub fn tick(&mut self, dt: f64, cmd: Option<OperatorCommand>) -> Result<SessionState, CopilotError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(CopilotError::BadDt(dt));
        }
        if let Some(c) = &cmd {
            self.check_command(c)?;
        }
        let mut scale = 1.0;
        self.total_time += dt;
        match cmd {
            Some(c) => {
                self.intervention_time += dt;
                self.idle_time = 0.0;
                if !self.in_intervention {
                    self.in_intervention = true;
                    self.log(EventKind::InterventionStart, json!({"axis": c.axis}));
                }
                scale = self.command_scale(&c);
                let mut next = self.joints;
                // coupled axes move together at the first DOF's speed
                for &dof in c.axis.dofs() {
                    let v = c.velocity_fraction * self.cfg.max_vel(c.axis.dofs()[0]) * scale * dt;
                    next.set(dof, next.get(dof) + v);
                    if let Some(i) = dof.planning_index() {
                        if c.velocity_fraction != 0.0 {
                            self.last_direction[i] = c.velocity_fraction.signum();
                        }
                    }
                }
                self.joints = clamp_joints(&next, self.env.limits());
            }
            None => {
                if self.in_intervention {
                    self.idle_time += dt;
                    if self.idle_time >= self.cfg.idle_timeout {
                        self.in_intervention = false;
                        self.log(EventKind::InterventionEnd, json!({"joints": self.joints}));
                        if self.mode == ControlMode::Copilot && self.phase == Phase::Localization {
                            // a failed replan leaves the session manual-only, which the log records
                            let _ = self.end_intervention_replan();
                        }
                    }
                } else if self.mode == ControlMode::Copilot && self.phase == Phase::Localization && !self.manual_only {
                    self.advance_nominal(dt);
                }
            }
        }
        let collided = self.env.collides(&self.joints);
        if collided && !self.collided {
            self.log(EventKind::Collision, json!({"joints": self.joints}));
        }
        self.collided = collided;
        let tip = self.env.shape(&self.joints).tip_pose();
        let reached = !collided && self.env.is_success(&tip);
        if reached && !self.reached {
            self.log(EventKind::TargetReached, json!({"joints": self.joints}));
        }
        self.reached = reached;
        self.history.push(TickRecord {
            t: self.total_time,
            joints: self.joints,
            command: cmd,
            scale,
            phase: self.phase,
            collided,
        });
        Ok(self.state())
    }
}

/// Open a session at the env's nominal start. Copilot mode plans a deterministic policy
/// rollout from there; master-slave starts with no plan.
pub fn init_session(
    policy: Option<Policy>,
    map: Option<ProbabilityMap>,
    env: Env,
    mode: ControlMode,
    phase: Phase,
    cfg: CopilotConfig,
) -> Result<Session, CopilotError> {
    cfg.validate()?;
    if mode == ControlMode::Copilot && (policy.is_none() || map.is_none()) {
        return Err(CopilotError::MissingArtifacts);
    }
    let start = clamp_joints(&env.init_distribution().nominal, env.limits());
    let mut s = Session {
        mode,
        phase,
        joints: start,
        nominal: Vec::new(),
        nominal_index: 0,
        policy,
        map,
        env,
        cfg,
        events: Vec::new(),
        history: Vec::new(),
        total_time: 0.0,
        intervention_time: 0.0,
        in_intervention: false,
        idle_time: 0.0,
        manual_only: false,
        collided: false,
        reached: false,
        last_direction: [1.0; 3],
    };
    if mode == ControlMode::Copilot {
        let (path, terminal) = s.plan_from(start);
        if path.len() == 1 && terminal == TerminalKind::Collision {
            return Err(CopilotError::NominalRolloutFailed);
        }
        s.nominal = path;
        s.nominal_index = 1;
    }
    s.collided = s.env.collides(&start);
    s.log(
        EventKind::SessionStart,
        json!({"mode": mode, "phase": phase, "joints": start, "waypoints": s.nominal.len()}),
    );
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_transitions() {
        use Phase::*;
        assert!(Initialization.can_transition_to(Localization));
        assert!(!Localization.can_transition_to(Anchoring));
        assert!(!Localization.can_transition_to(Initialization));
        for p in Phase::ORDER {
            assert_eq!(p.can_transition_to(Retraction), p != Retraction);
        }
        assert_eq!(Retraction.successor(), None);
    }

    #[test]
    fn phase_allowed_dofs() {
        use Dof::*;
        assert_eq!(Phase::Initialization.allowed_dofs(), vec![Translation, Rotation]);
        assert_eq!(Phase::Localization.allowed_dofs(), vec![Translation, Rotation, Bending]);
        assert_eq!(Phase::Releasing.allowed_dofs(), vec![Sheath, Core]);
        assert!(Phase::Anchoring.allowed_dofs().is_empty());
        assert_eq!(Phase::Retraction.allowed_dofs(), vec![Translation, Sheath, Core]);
    }
}
