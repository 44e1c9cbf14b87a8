use cathtwin::bridge::{serve, BridgeCore};
use cathtwin::protocol::{ErrorCode, ServerMessage, StateMessage};
use cathtwin_core::anatomy::{icosphere, HeartModel, ValveTarget};
use cathtwin_core::copilot::*;
use cathtwin_core::kinematics::{Dof, JointLimits, JointState, RigGeometry};
use cathtwin_core::probmap::*;
use cathtwin_core::rl::*;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};
use tungstenite::Message;

fn open_env() -> Env {
    let m = HeartModel::from_mesh(icosphere(Vector3::zeros(), 500.0, 3), Vector3::z()).unwrap();
    let rig = RigGeometry::new(*m.insertion_port(), 10.0);
    let o = m.insertion_port().origin;
    let t = ValveTarget::new(o - Vector3::z() * 300.0, o - Vector3::z() * 320.0).unwrap();
    let init = InitDistribution::fixed(JointState::zero().with(Dof::Translation, 20.0));
    Env::new(Arc::new(m), t, JointLimits::default(), rig, EnvConfig::default(), init, 0).unwrap()
}

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

fn master_slave(phase: Phase) -> BridgeCore {
    let s = init_session(None, None, open_env(), ControlMode::MasterSlave, phase, CopilotConfig::default()).unwrap();
    BridgeCore::new(s, 25)
}

fn copilot(phase: Phase) -> BridgeCore {
    let policy = Policy::new(&[16, 16], 0.1, &mut ChaCha8Rng::seed_from_u64(4));
    let s = init_session(Some(policy), Some(cluster_map()), open_env(), ControlMode::Copilot, phase, CopilotConfig::default()).unwrap();
    BridgeCore::new(s, 25)
}

fn state_of(msgs: &[ServerMessage]) -> &StateMessage {
    match msgs.last() {
        Some(ServerMessage::State(s)) => s,
        other => panic!("expected a state last, got {other:?}"),
    }
}

/// The error reply; a rejected phase or mode change may be followed by its logged event.
fn error_code(msgs: &[ServerMessage]) -> ErrorCode {
    match msgs {
        [ServerMessage::Error { code, .. }, rest @ ..] if rest.iter().all(|m| matches!(m, ServerMessage::Event { .. })) => *code,
        other => panic!("expected an error, got {other:?}"),
    }
}

fn cmd(axis: &str, vf: f64, seq: u64) -> String {
    format!(r#"{{"v":1,"type":"cmd","axis":"{axis}","velocity_fraction":{vf},"seq":{seq}}}"#)
}

#[test]
fn held_command_moves_exactly_per_tick() {
    let mut b = master_slave(Phase::Localization);
    let cfg = CopilotConfig::default();
    let dt = cfg.dt();
    assert!(b.handle_text(&cmd("translation", 1.0, 7)).is_empty());
    let mut prev = b.session().joints().translation;
    for k in 0..10 {
        let out = b.tick();
        let s = state_of(&out);
        // applied on the first tick after receipt
        assert_eq!(s.ack, Some(7));
        let step = s.joints[0] - prev;
        let expect = 1.0 * cfg.max_vel(Dof::Translation) * s.scales.translation * dt;
        assert!((step - expect).abs() < 1e-12, "tick {k}: {step} vs {expect}");
        prev = s.joints[0];
        assert_eq!(&s.joints[1..], &[0.0; 5]);
    }
    // zero deflection releases at once
    b.handle_text(&cmd("translation", 0.0, 8));
    let s = state_of(&b.tick()).clone();
    assert_eq!(s.joints[0], prev);
    assert_eq!(s.ack, None);
}

#[test]
fn unrefreshed_command_expires() {
    let mut b = master_slave(Phase::Localization);
    b.handle_text(&cmd("bending", -0.5, 1));
    b.handle_text(&cmd("bending", 0.5, 2));
    let moving: Vec<f64> = (0..25).map(|_| state_of(&b.tick()).joints[3]).collect();
    assert!(moving.windows(2).all(|w| w[1] > w[0]), "latest command wins");
    let held = b.session().joints();
    for _ in 0..5 {
        b.tick();
    }
    assert_eq!(b.session().joints(), held);
}

#[test]
fn malformed_or_disallowed_messages_leave_state_unchanged() {
    let mut b = master_slave(Phase::Initialization);
    b.tick();
    let before = (b.session().state(), b.session().events().len(), b.session().history().len());
    let bad = [
        "{",
        r#"{"v":1,"type":"cmd","axis":"translation"}"#,
        r#"{"v":9,"type":"cmd","axis":"translation","velocity_fraction":1}"#,
        r#"{"v":1,"type":"warp","to":3}"#,
        r#"{"v":1,"type":"cmd","axis":"translation","velocity_fraction":1.5}"#,
        // bending is disabled until localization
        r#"{"v":1,"type":"cmd","axis":"bending","velocity_fraction":1}"#,
        r#"{"v":1,"type":"phase","phase":"anchoring"}"#,
        r#"{"v":1,"type":"mode","mode":"copilot"}"#,
    ];
    let codes: Vec<ErrorCode> = bad.iter().map(|t| error_code(&b.handle_text(t))).collect();
    assert_eq!(
        codes,
        [
            ErrorCode::Malformed,
            ErrorCode::Malformed,
            ErrorCode::UnsupportedVersion,
            ErrorCode::Malformed,
            ErrorCode::Rejected,
            ErrorCode::Rejected,
            ErrorCode::Rejected,
            ErrorCode::Rejected
        ]
    );
    let after = (b.session().state(), b.session().history().len());
    assert_eq!(after, (before.0, before.2));
    // only the rejected phase change is logged
    let kinds: Vec<EventKind> = b.session().events()[before.1..].iter().map(|e| e.kind).collect();
    assert_eq!(kinds, [EventKind::PhaseRejected]);
    // idle tick still holds
    let s = state_of(&b.tick()).clone();
    assert_eq!(s.joints, before.0.joints.to_array());
}

#[test]
fn phase_gating_end_to_end() {
    let mut b = master_slave(Phase::Initialization);
    assert_eq!(error_code(&b.handle_text(&cmd("bending", 1.0, 1))), ErrorCode::Rejected);
    let out = b.handle_text(r#"{"v":1,"type":"phase","phase":"localization"}"#);
    assert!(matches!(&out[..], [ServerMessage::Event { kind: EventKind::PhaseChange, .. }]), "{out:?}");
    assert!(b.handle_text(&cmd("bending", 1.0, 2)).is_empty());
    let s = state_of(&b.tick()).clone();
    assert!(s.joints[3] > 0.0);
    assert_eq!(s.phase, Phase::Localization);
    // a held bending command is dropped when the phase disables bending
    b.handle_text(r#"{"v":1,"type":"phase","phase":"releasing"}"#);
    let bend = b.session().joints().bending;
    b.tick();
    assert_eq!(b.session().joints().bending, bend);
    assert_eq!(error_code(&b.handle_text(&cmd("translation", 1.0, 3))), ErrorCode::Rejected);
    assert!(b.handle_text(&cmd("sheath_core", 1.0, 4)).is_empty());
    let s = state_of(&b.tick()).clone();
    assert!(s.joints[2] > 0.0 && s.joints[4] > 0.0);
    // no tick ever moved a DOF outside its phase
    for r in b.session().history() {
        if let Some(c) = r.command {
            assert!(r.phase.allows(c.axis));
        }
    }
}

#[test]
fn disconnect_holds_position() {
    let mut b = master_slave(Phase::Localization);
    b.handle_text(&cmd("translation", 1.0, 1));
    b.tick();
    b.disconnect();
    let j = b.session().joints();
    for _ in 0..10 {
        b.tick();
    }
    assert_eq!(b.session().joints(), j);
}

#[test]
fn copilot_advances_without_commands() {
    let mut b = copilot(Phase::Localization);
    let start = b.session().joints();
    for _ in 0..20 {
        let out = b.tick();
        assert_eq!(state_of(&out).mode, ControlMode::Copilot);
    }
    assert_ne!(b.session().joints(), start);
    assert_eq!(b.session().intervention_time(), 0.0);
}

fn read_until<F: Fn(&ServerMessage) -> bool>(ws: &mut tungstenite::WebSocket<tungstenite::stream::MaybeTlsStream<std::net::TcpStream>>, f: F) -> ServerMessage {
    loop {
        match ws.read().unwrap() {
            Message::Text(t) => {
                let m: ServerMessage = serde_json::from_str(&t).unwrap();
                if f(&m) {
                    return m;
                }
            }
            _ => continue,
        }
    }
}

#[test]
fn loopback_round_trip() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let server_stop = stop.clone();
    let server = std::thread::spawn(move || serve(listener, master_slave(Phase::Localization), server_stop).unwrap());

    let (mut ws, _) = tungstenite::connect(format!("ws://{addr}")).unwrap();
    let first = read_until(&mut ws, |m| matches!(m, ServerMessage::State(_)));
    let ServerMessage::State(first) = first else { unreachable!() };
    assert_eq!(first.v, 1);
    assert_eq!(first.phase, Phase::Localization);

    // malformed frame: error reply, nothing moves
    ws.send(Message::text("{\"v\":1,\"type\":\"cmd\"}")).unwrap();
    let e = read_until(&mut ws, |m| matches!(m, ServerMessage::Error { .. }));
    assert!(matches!(e, ServerMessage::Error { code: ErrorCode::Malformed, .. }));

    let mut latencies = Vec::new();
    for seq in 1..=5u64 {
        let sent = Instant::now();
        ws.send(Message::text(cmd("rotation", 1.0, seq))).unwrap();
        let m = read_until(&mut ws, |m| matches!(m, ServerMessage::State(s) if s.ack == Some(seq)));
        latencies.push(sent.elapsed());
        let ServerMessage::State(s) = m else { unreachable!() };
        assert!(s.joints[1] > 0.0);
    }
    let worst = latencies.iter().max().unwrap();
    eprintln!("command round trips: {latencies:?}");
    // a 50 Hz loop applies a command within a tick or two; allow for a loaded machine
    assert!(*worst < Duration::from_millis(500), "{worst:?}");

    ws.close(None).unwrap();
    while ws.read().is_ok() {}
    std::thread::sleep(Duration::from_millis(100));
    stop.store(true, Ordering::SeqCst);
    let core = server.join().unwrap();
    // after the drop the session kept ticking but held still
    let h = core.session().history();
    let last = h.last().unwrap();
    assert!(last.command.is_none());
    let tail = &h[h.len() - 3..];
    assert!(tail.iter().all(|r| r.joints == last.joints));
}
