use cathtwin_core::anatomy::{closest_point_on_triangle, icosphere, synthesize_phantom, HeartModel, PhantomSpec, ValveTarget};
use cathtwin_core::kinematics::{forward_kinematics, Dof, JointLimits, JointState, RigGeometry};
use cathtwin_core::rl::eval::{rollout, RolloutRecord};
use cathtwin_core::rl::sac::{train_sac, SacConfig};
use cathtwin_core::rl::*;
use nalgebra::Vector3;
use proptest::prelude::*;
use std::sync::{Arc, OnceLock};

fn phantom() -> &'static (Arc<HeartModel>, ValveTarget) {
    static CELL: OnceLock<(Arc<HeartModel>, ValveTarget)> = OnceLock::new();
    CELL.get_or_init(|| {
        let (m, t) = synthesize_phantom(&PhantomSpec::default()).unwrap();
        (Arc::new(m), t)
    })
}

fn phantom_env(cfg: EnvConfig, init: InitDistribution, seed: u64) -> Env {
    let (m, t) = phantom();
    let rig = RigGeometry::new(*m.insertion_port(), 10.0);
    Env::new(m.clone(), *t, JointLimits::default(), rig, cfg, init, seed).unwrap()
}

/// A roomy sphere where nothing near the port collides.
fn open_env(cfg: EnvConfig) -> Env {
    let m = HeartModel::from_mesh(icosphere(Vector3::zeros(), 500.0, 3), Vector3::z()).unwrap();
    let rig = RigGeometry::new(*m.insertion_port(), 10.0);
    let o = m.insertion_port().origin;
    let t = ValveTarget::new(o - Vector3::z() * 300.0, o - Vector3::z() * 320.0).unwrap();
    let init = InitDistribution::fixed(JointState::zero().with(Dof::Translation, 20.0));
    Env::new(Arc::new(m), t, JointLimits::default(), rig, cfg, init, 0).unwrap()
}

/// Winding-number containment and exhaustive wall distance, independent of the BVH.
fn inside_with_clearance(model: &HeartModel, p: &Vector3<f64>, margin: f64) -> bool {
    let mesh = model.mesh();
    let mut winding = 0.0;
    let mut best = f64::INFINITY;
    for i in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.triangle(i);
        best = best.min((closest_point_on_triangle(p, &a, &b, &c) - p).norm());
        let (a, b, c) = (a - p, b - p, c - p);
        let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
        let den = la * lb * lc + a.dot(&b) * lc + b.dot(&c) * la + c.dot(&a) * lb;
        winding += 2.0 * a.dot(&b.cross(&c)).atan2(den);
    }
    winding / (4.0 * std::f64::consts::PI) > 0.5 && best > margin
}

#[test]
fn zero_variance_init_returns_nominal() {
    let nominal = JointState::zero().with(Dof::Translation, 25.0).with(Dof::Rotation, 10.0);
    let mut env = phantom_env(EnvConfig::default(), InitDistribution::fixed(nominal), 3);
    for _ in 0..3 {
        env.reset().unwrap();
        assert_eq!(env.joints(), nominal);
    }
}

#[test]
fn same_seed_gives_same_resets() {
    let mut a = phantom_env(EnvConfig::default(), InitDistribution::default(), 42);
    let mut b = phantom_env(EnvConfig::default(), InitDistribution::default(), 42);
    for _ in 0..10 {
        assert_eq!(a.reset().unwrap(), b.reset().unwrap());
        assert_eq!(a.joints(), b.joints());
    }
}

#[test]
fn nominal_start_is_clear_of_the_wall() {
    let env = phantom_env(EnvConfig::default(), InitDistribution::default(), 0);
    let j = InitDistribution::default().nominal;
    let shape = forward_kinematics(&j, env.rig());
    let margin = env.config().wall_margin;
    for p in &shape.points {
        assert!(inside_with_clearance(env.model(), p, margin), "point {p:?}");
    }
    assert!(!env.collides(&j));
}

#[test]
fn zero_action_holds_joints() {
    let mut env = phantom_env(EnvConfig::default(), InitDistribution::default(), 1);
    env.reset().unwrap();
    let before = env.joints();
    let out = env.step([0.0; 3]).unwrap();
    assert_eq!(out.joints, before);
    assert_eq!(out.reward.total(), -50.0);
    assert_eq!(out.terminal, TerminalKind::Running);
}

#[test]
fn bending_past_limit_clamps_and_ends_episode() {
    let cfg = EnvConfig {
        action_scale: [8.0, 8.0, 500.0],
        ..Default::default()
    };
    let mut env = open_env(cfg);
    env.reset().unwrap();
    let out = env.step([0.0, 0.0, 1.0]).unwrap();
    assert_eq!(out.joints.bending, JointLimits::default().bending.max);
    assert_eq!(out.terminal, TerminalKind::MaxBend);
    assert_eq!(env.step([0.0; 3]), Err(EnvError::StepAfterTerminal));
}

#[test]
fn zero_actions_time_out_at_max_steps() {
    let cfg = EnvConfig {
        max_steps: 7,
        ..Default::default()
    };
    let mut env = open_env(cfg);
    env.reset().unwrap();
    for k in 1..=7 {
        let out = env.step([0.0; 3]).unwrap();
        let expect = if k < 7 { TerminalKind::Running } else { TerminalKind::Timeout };
        assert_eq!(out.terminal, expect, "step {k}");
    }
}

#[test]
fn rollout_replays_to_the_same_rewards() {
    let mut env = phantom_env(EnvConfig::default(), InitDistribution::default(), 5);
    let mut rng_actions = {
        let mut k = 0u32;
        move |_: &Env, _: &Observation| {
            k += 1;
            let f = |s: u32| ((k.wrapping_mul(2654435761).wrapping_add(s)) % 1000) as f64 / 500.0 - 1.0;
            [f(1), f(2), f(3)]
        }
    };
    for _ in 0..20 {
        env.reset().unwrap();
        let t = rollout(&mut rng_actions, &mut env).unwrap();
        assert!(t.steps.len() <= env.config().max_steps);
        // replay from the start state, recomputing each reward from forward kinematics
        let mut replay = phantom_env(EnvConfig::default(), InitDistribution::default(), 0);
        replay.reset_to(t.initial);
        let mut sum = 0.0;
        for s in &t.steps {
            let out = replay.step(s.action).unwrap();
            assert_eq!(out, s.outcome);
            let tip = forward_kinematics(&out.joints, replay.rig()).tip_pose();
            let r = reward(&tip, replay.target(), out.terminal, replay.config());
            let parts = r.step + r.obstacle + r.error + r.target;
            assert_eq!(r.total(), parts);
            if out.terminal == TerminalKind::Running {
                assert_eq!((r.obstacle, r.error, r.target), (0.0, 0.0, 0.0));
            }
            sum += r.total();
        }
        assert_eq!(sum, t.total_reward());
    }
}

#[test]
fn teleporting_stub_scores_perfectly() {
    let (m, _) = phantom();
    let start = JointState::zero().with(Dof::Translation, 20.0);
    let goal = start.with_planning([60.0, 30.0, 20.0]);
    let rig = RigGeometry::new(*m.insertion_port(), 10.0);
    let tip = forward_kinematics(&goal, &rig).tip_pose();
    let target = ValveTarget::within(m, tip.position - tip.axis * 8.0, tip.position + tip.axis * 4.0).unwrap();
    let cfg = EnvConfig {
        action_scale: [100.0, 180.0, 160.0],
        ..Default::default()
    };
    let mut env = Env::new(m.clone(), target, JointLimits::default(), rig, cfg, InitDistribution::fixed(start), 0).unwrap();
    let mut stub = |env: &Env, _: &Observation| {
        let (p, g) = (env.joints().planning(), goal.planning());
        std::array::from_fn(|k| (g[k] - p[k]) / env.config().action_scale[k])
    };
    let stats = evaluate_with(&mut stub, &mut env, 5, 9).unwrap();
    assert_eq!(stats.success_rate, 1.0);
    assert!(stats.position_max < 1e-9, "{}", stats.position_max);
    assert!(stats.orientation_max < 1e-6, "{}", stats.orientation_max);

    let one = evaluate_with(&mut stub, &mut env, 1, 9).unwrap();
    env.reseed(9);
    env.reset().unwrap();
    let t = rollout(&mut stub, &mut env).unwrap();
    assert_eq!(one.records, vec![RolloutRecord::from_trajectory(&t, &env)]);
    assert_eq!(one.position_std, 0.0);
}

#[test]
fn untrained_policy_gives_a_baseline_and_deterministic_rollouts() {
    let mut env = phantom_env(EnvConfig::default(), InitDistribution::default(), 0);
    let cfg = SacConfig {
        episodes: 0,
        ..Default::default()
    };
    let (policy, curves) = train_sac(&mut env, &cfg, 1).unwrap();
    assert!(curves.episodes.is_empty());
    let stats = evaluate(&policy, &mut env, 10, 2).unwrap();
    assert!((0.0..=1.0).contains(&stats.success_rate));
    assert!(stats.position_std >= 0.0 && stats.orientation_std >= 0.0);

    let mut fixed = phantom_env(EnvConfig::default(), InitDistribution::fixed(InitDistribution::default().nominal), 0);
    let run = |env: &mut Env| {
        env.reset().unwrap();
        rollout(&mut PolicyController::new(&policy, true, 0), env).unwrap()
    };
    assert_eq!(run(&mut fixed), run(&mut fixed));
}

#[test]
fn short_training_is_bit_reproducible() {
    let cfg = SacConfig {
        episodes: 6,
        warmup_steps: 20,
        batch_size: 16,
        ..Default::default()
    };
    let go = || {
        let mut env = phantom_env(EnvConfig::default(), InitDistribution::default(), 0);
        train_sac(&mut env, &cfg, 77).unwrap()
    };
    let (p1, c1) = go();
    let (p2, c2) = go();
    assert_eq!(c1.to_csv(), c2.to_csv());
    assert_eq!(p1, p2);
    assert!(p1.meta.updates > 0);
    assert!(p1.alpha() > 0.0);
    assert!(c1.to_csv().starts_with("episode,reward,length,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn joints_stay_within_limits(actions in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 1..30), seed in 0u64..1000) {
        let mut env = phantom_env(EnvConfig::default(), InitDistribution::default(), seed);
        env.reset().unwrap();
        for a in actions {
            let out = env.step(a).unwrap();
            prop_assert!(JointLimits::default().contains(&out.joints));
            prop_assert!(out.observation.is_finite());
            prop_assert!(out.observation.joints.iter().all(|v| v.abs() <= 1.0));
            if out.terminal.is_terminal() {
                break;
            }
        }
    }
}
