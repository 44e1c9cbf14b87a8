use cathtwin_core::anatomy::{icosphere, synthesize_phantom, HeartModel, PhantomSpec, ValveTarget};
use cathtwin_core::copilot::operator::*;
use cathtwin_core::copilot::*;
use cathtwin_core::kinematics::{forward_kinematics, Dof, JointLimits, JointState, RigGeometry};
use cathtwin_core::probmap::*;
use cathtwin_core::rl::*;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::sync::Arc;

const START_T: f64 = 20.0;

/// A roomy sphere where nothing near the port collides.
fn open_env() -> Env {
    let m = HeartModel::from_mesh(icosphere(Vector3::zeros(), 500.0, 3), Vector3::z()).unwrap();
    let rig = RigGeometry::new(*m.insertion_port(), 10.0);
    let o = m.insertion_port().origin;
    let t = ValveTarget::new(o - Vector3::z() * 300.0, o - Vector3::z() * 320.0).unwrap();
    let init = InitDistribution::fixed(JointState::zero().with(Dof::Translation, START_T));
    Env::new(Arc::new(m), t, JointLimits::default(), rig, EnvConfig::default(), init, 0).unwrap()
}

fn untrained_policy() -> Policy {
    Policy::new(&[16, 16], 0.1, &mut ChaCha8Rng::seed_from_u64(4))
}

/// Maps fitted to a tight cluster well ahead of the start at (T 100, R 0, B 50).
fn cluster_map() -> ProbabilityMap {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = Normal::new(0.0, 1.0).unwrap();
    let rows: Vec<[f64; 3]> = (0..400)
        .map(|_| [100.0 + 10.0 * n.sample(&mut rng), 10.0 * n.sample(&mut rng), 50.0 + 10.0 * n.sample(&mut rng)])
        .collect();
    let samples = JointSampleSet {
        rows,
        n_inits: 1,
        seed: 11,
        successful_only: false,
        successes: 0,
        rollout_lengths: vec![400],
    };
    let cfg = MapConfig {
        k_tb: 1,
        k_rb: 1,
        grid: 50,
        ..Default::default()
    };
    build_probability_maps(&samples, &cfg, &JointLimits::default(), 0).unwrap()
}

fn copilot_session() -> Session {
    let mut s = init_session(
        Some(untrained_policy()),
        Some(cluster_map()),
        open_env(),
        ControlMode::Copilot,
        Phase::Initialization,
        CopilotConfig::default(),
    )
    .unwrap();
    s.set_phase(Phase::Localization).unwrap();
    s
}

fn master_slave_session(env: Env) -> Session {
    let mut s = init_session(None, None, env, ControlMode::MasterSlave, Phase::Initialization, CopilotConfig::default()).unwrap();
    s.set_phase(Phase::Localization).unwrap();
    s
}

fn cmd(dof: Dof, vf: f64) -> Option<OperatorCommand> {
    Some(OperatorCommand {
        axis: ControlAxis::single(dof),
        velocity_fraction: vf,
        timestamp: 0.0,
    })
}

fn count(s: &Session, kind: EventKind) -> usize {
    s.events().iter().filter(|e| e.kind == kind).count()
}

#[test]
fn master_slave_holds_still_without_commands() {
    let mut s = master_slave_session(open_env());
    assert!(s.nominal().is_empty());
    let j0 = s.joints();
    for _ in 0..100 {
        s.tick(0.02, None).unwrap();
    }
    assert_eq!(s.joints(), j0);
    assert_eq!(s.intervention_time(), 0.0);
    assert!((s.total_time() - 2.0).abs() < 1e-9);
}

#[test]
fn copilot_follows_its_plan_without_commands() {
    let mut s = copilot_session();
    assert!(s.nominal().len() >= 2);
    assert_eq!(s.nominal()[0], s.joints());
    let j0 = s.joints();
    s.tick(0.02, None).unwrap();
    assert_ne!(s.joints(), j0);
    // no DOF exceeds its speed limit along the plan
    let cfg = *s.config();
    let mut prev = s.joints();
    for _ in 0..200 {
        s.tick(0.02, None).unwrap();
        let (a, b) = (prev.to_array(), s.joints().to_array());
        for d in Dof::ALL {
            assert!((b[d.index()] - a[d.index()]).abs() <= cfg.max_vel(d) * 0.02 + 1e-9);
        }
        prev = s.joints();
    }
    assert_eq!(s.intervention_time(), 0.0);
}

#[test]
fn governor_passes_moves_toward_density_and_floors_moves_away() {
    let mut s = copilot_session();
    let dt = 0.02;
    let vmax = s.config().max_vel(Dof::Translation);

    let t0 = s.joints().get(Dof::Translation);
    let st = s.tick(dt, cmd(Dof::Translation, 0.5)).unwrap();
    assert_eq!(st.scales.translation, 1.0);
    assert_eq!(s.history().last().unwrap().scale, 1.0);
    assert!((s.joints().get(Dof::Translation) - (t0 + 0.5 * vmax * dt)).abs() < 1e-12);

    let t1 = s.joints().get(Dof::Translation);
    s.tick(dt, cmd(Dof::Translation, -0.5)).unwrap();
    assert_eq!(s.history().last().unwrap().scale, 0.2);
    assert!((s.joints().get(Dof::Translation) - (t1 - 0.2 * 0.5 * vmax * dt)).abs() < 1e-12);

    // other DOFs hold while the operator drives one
    let before = s.joints();
    s.tick(dt, cmd(Dof::Bending, 1.0)).unwrap();
    let after = s.joints();
    for d in [Dof::Translation, Dof::Rotation, Dof::Sheath, Dof::Core, Dof::Jaw] {
        assert_eq!(after.get(d), before.get(d));
    }
}

#[test]
fn master_slave_moves_at_full_commanded_speed() {
    let mut s = master_slave_session(open_env());
    let vmax = s.config().max_vel(Dof::Rotation);
    let r0 = s.joints().get(Dof::Rotation);
    s.tick(0.02, cmd(Dof::Rotation, -0.25)).unwrap();
    assert_eq!(s.history().last().unwrap().scale, 1.0);
    assert!((s.joints().get(Dof::Rotation) - (r0 - 0.25 * vmax * 0.02)).abs() < 1e-12);
}

#[test]
fn disallowed_axis_is_rejected_without_side_effects() {
    for mut s in [copilot_session(), master_slave_session(open_env())] {
        s.tick(0.02, cmd(Dof::Translation, 0.3)).unwrap();
        let (j, t, it, h) = (s.joints(), s.total_time(), s.intervention_time(), s.history().len());
        let err = s.tick(0.02, cmd(Dof::Sheath, 0.5)).unwrap_err();
        assert!(matches!(err, CopilotError::DisallowedAxis { .. }));
        assert!(s.tick(0.02, cmd(Dof::Translation, 1.5)).is_err());
        assert_eq!(s.joints(), j);
        assert_eq!((s.total_time(), s.intervention_time(), s.history().len()), (t, it, h));
        assert_eq!(count(&s, EventKind::CommandRejected), 2);
    }
}

#[test]
fn time_accounting_is_exact() {
    let mut s = copilot_session();
    let dt = 0.02;
    for i in 0..150 {
        let c = if i % 3 == 0 { cmd(Dof::Rotation, 0.1) } else { None };
        s.tick(dt, c).unwrap();
    }
    assert!((s.total_time() - 150.0 * dt).abs() < 1e-9);
    assert!((s.intervention_time() - 50.0 * dt).abs() < 1e-9);
    assert!(s.intervention_time() <= s.total_time());
}

#[test]
fn replanning_from_the_start_reproduces_the_plan() {
    let mut s = copilot_session();
    let before = s.nominal().to_vec();
    s.end_intervention_replan().unwrap();
    assert_eq!(s.nominal(), &before[..]);
    assert_eq!(s.nominal_index(), 1);
    assert_eq!(count(&s, EventKind::Replan), 1);
}

#[test]
fn intervention_ends_after_idle_timeout_with_one_replan() {
    let mut s = copilot_session();
    let dt = s.config().dt();
    for _ in 0..10 {
        s.tick(dt, cmd(Dof::Translation, 1.0)).unwrap();
    }
    assert!(s.in_intervention());
    let j = s.joints();
    let idle_ticks = (s.config().idle_timeout / dt).ceil() as usize;
    for _ in 0..idle_ticks - 1 {
        s.tick(dt, None).unwrap();
        assert_eq!(s.joints(), j, "held while the operator may resume");
    }
    s.tick(dt, None).unwrap();
    assert!(!s.in_intervention());
    assert_eq!(count(&s, EventKind::InterventionStart), 1);
    assert_eq!(count(&s, EventKind::InterventionEnd), 1);
    assert_eq!(count(&s, EventKind::Replan), 1);
    assert_eq!(s.nominal()[0], j);
    s.tick(dt, None).unwrap();
    assert_ne!(s.joints(), j);
}

#[test]
fn session_phase_changes_follow_the_workflow() {
    let mut s = copilot_session();
    assert_eq!(s.phase(), Phase::Localization);
    assert!(s.set_phase(Phase::Anchoring).is_err());
    assert!(s.set_phase(Phase::Initialization).is_err());
    assert_eq!(count(&s, EventKind::PhaseRejected), 2);
    s.set_phase(Phase::Releasing).unwrap();
    // the plan only drives localization
    let j = s.joints();
    s.tick(0.02, None).unwrap();
    assert_eq!(s.joints(), j);
    s.tick(0.02, cmd(Dof::Sheath, 0.5)).unwrap();
    s.set_phase(Phase::Retraction).unwrap();
    assert!(s.tick(0.02, cmd(Dof::Bending, 0.5)).is_err());
}

#[test]
fn coupled_sheath_and_core_move_together() {
    let mut s = master_slave_session(open_env());
    s.set_phase(Phase::Releasing).unwrap();
    let c = Some(OperatorCommand {
        axis: ControlAxis::SheathCore,
        velocity_fraction: 1.0,
        timestamp: 0.0,
    });
    for _ in 0..5 {
        s.tick(0.02, c).unwrap();
    }
    let j = s.joints();
    assert!(j.get(Dof::Sheath) > 0.0);
    assert_eq!(j.get(Dof::Sheath), j.get(Dof::Core));
}

#[test]
fn copilot_needs_a_policy_and_map() {
    let r = init_session(None, None, open_env(), ControlMode::Copilot, Phase::Localization, CopilotConfig::default());
    assert!(matches!(r, Err(CopilotError::MissingArtifacts)));
    let mut s = master_slave_session(open_env());
    assert!(s.set_mode(ControlMode::Copilot).is_err());
    assert_eq!(s.mode(), ControlMode::MasterSlave);
}

#[test]
fn mode_switches_replan_or_drop_the_plan() {
    let mut s = copilot_session();
    s.set_mode(ControlMode::MasterSlave).unwrap();
    assert!(s.nominal().is_empty());
    let j = s.joints();
    s.tick(0.02, None).unwrap();
    assert_eq!(s.joints(), j);
    assert_eq!(count(&s, EventKind::ModeChange), 1);
}

#[test]
fn unreachable_threshold_never_intervenes() {
    let mut s = copilot_session();
    let profile = OperatorProfile {
        intervention_threshold: f64::INFINITY,
        ..Default::default()
    };
    let goal = *s.nominal().last().unwrap();
    let mut op = ScriptedOperator::new(profile, goal, s.env(), 1);
    let limits = LoopLimits {
        max_ticks: 300,
        ..Default::default()
    };
    run_closed_loop(&mut s, &mut op, &limits);
    assert_eq!(s.intervention_time(), 0.0);
    assert_eq!(count(&s, EventKind::InterventionStart), 0);
    assert!(s.total_time() > 0.0);
}

#[test]
fn ideal_master_slave_operator_reaches_the_target() {
    let (m, _) = synthesize_phantom(&PhantomSpec::default()).unwrap();
    let m = Arc::new(m);
    let start = JointState::zero().with(Dof::Translation, START_T);
    let goal = start.with_planning([60.0, 30.0, 20.0]);
    let rig = RigGeometry::new(*m.insertion_port(), 10.0);
    let tip = forward_kinematics(&goal, &rig).tip_pose();
    let target = ValveTarget::within(&m, tip.position - tip.axis * 8.0, tip.position + tip.axis * 4.0).unwrap();
    let env = Env::new(m, target, JointLimits::default(), rig, EnvConfig::default(), InitDistribution::fixed(start), 0).unwrap();
    let mut s = master_slave_session(env);
    let profile = OperatorProfile {
        reaction_delay: 0.0,
        error_bias: 0.0,
        noise: 0.0,
        ..Default::default()
    };
    let mut op = ScriptedOperator::new(profile, goal, s.env(), 0);
    let end = run_closed_loop(&mut s, &mut op, &LoopLimits::default());
    assert_eq!(end, LoopEnd::Reached);
    assert!(s.reached());
    assert_eq!(s.intervention_time(), s.total_time());
}

#[test]
fn operator_command_stream_is_seeded() {
    let run = |seed: u64| {
        let mut s = master_slave_session(open_env());
        let goal = s.joints().with_planning([80.0, 20.0, 30.0]);
        let mut op = ScriptedOperator::new(OperatorProfile::default(), goal, s.env(), seed);
        let limits = LoopLimits {
            max_ticks: 1500,
            ..Default::default()
        };
        run_closed_loop(&mut s, &mut op, &limits);
        s.history().iter().map(|r| r.command).collect::<Vec<_>>()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn delayed_operator_perceives_old_states() {
    let mut s = master_slave_session(open_env());
    let goal = s.joints().with_planning([80.0, 0.0, 0.0]);
    let profile = OperatorProfile {
        reaction_delay: 0.1,
        error_bias: 0.0,
        noise: 0.0,
        ..Default::default()
    };
    let mut op = ScriptedOperator::new(profile, goal, s.env(), 0);
    let dt = s.config().dt();
    for _ in 0..20 {
        let c = op.command(&s);
        s.tick(dt, c).unwrap();
    }
    let c = op.command(&s).unwrap();
    assert!((s.total_time() - c.timestamp - 0.1).abs() < 1e-9, "{} {}", s.total_time(), c.timestamp);
}

#[test]
fn events_serialize_one_per_line() {
    let mut s = copilot_session();
    s.tick(0.02, cmd(Dof::Translation, 0.2)).unwrap();
    let text = s.events_jsonl();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), s.events().len());
    for l in lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v.get("t").is_some() && v.get("kind").is_some());
    }
}
