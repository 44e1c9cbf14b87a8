//! The experiment stages behind each subcommand. Each stage has a pure part returning data
//! and a `run_*` wrapper that writes a run directory.

use cathtwin_core::anatomy::{synthesize_phantom, HeartModel, ValveTarget};
use cathtwin_core::copilot::operator::{planned_goal, run_closed_loop, LoopEnd, OperatorProfile, ScriptedOperator};
use cathtwin_core::copilot::{init_session, ControlMode, Phase, Session, TickRecord};
use cathtwin_core::kinematics::{
    fit_shape_model, forward_kinematics, generate_shape_dataset, JointState, RigGeometry, ShapeModel,
};
use cathtwin_core::metrics::{
    compare_groups, metrics_from_csv, metrics_to_csv, CameraPair, Comparison, IdealLine, RunMetrics,
};
use cathtwin_core::probmap::{build_probability_maps, sample_trajectories, DofPair, JointSampleSet, ProbabilityMap};
use cathtwin_core::rl::{evaluate, train_sac, Env, LocalizationStats, Policy, PolicyDoc, TrainingCurves};
use cathtwin_core::split_seed;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::store::{read_artifact, read_text, RunDir, RunRecord};

/// Operator seeds are `OPERATOR_SEED_BASE + i` for profile `i`.
pub const OPERATOR_SEED_BASE: u64 = 100;

fn invalid(path: &str, e: impl ToString) -> CliError {
    CliError::InvalidConfig {
        path: path.to_string(),
        message: e.to_string(),
    }
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// Rig and cameras, which need only the phantom layout, not its mesh.
#[derive(Debug, Clone, Copy)]
pub struct Geometry {
    pub rig: RigGeometry,
    pub cameras: CameraPair,
}

impl Geometry {
    pub fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        let layout = cfg.phantom.layout().map_err(|e| invalid("phantom", e))?;
        let r = &cfg.rig;
        let rig = RigGeometry {
            port: layout.port,
            passive_length: r.passive_length,
            active_length: r.active_length,
            sheath_gain: r.sheath_gain,
            core_gain: r.core_gain,
            min_exposed_length: r.min_exposed_length,
        };
        let cameras = match cfg.metrics.cameras {
            Some(c) => c,
            None => {
                let (lo, hi) = layout.bounds();
                CameraPair::for_bounds(lo, hi).map_err(|e| invalid("metrics.cameras", e))?
            }
        };
        Ok(Self { rig, cameras })
    }
}

/// The meshed phantom plus its geometry.
#[derive(Clone)]
pub struct World {
    pub model: Arc<HeartModel>,
    pub target: ValveTarget,
    pub geometry: Geometry,
}

impl World {
    pub fn build(cfg: &RunConfig) -> Result<Self, CliError> {
        let geometry = Geometry::new(cfg)?;
        let (model, target) = synthesize_phantom(&cfg.phantom).map_err(|e| invalid("phantom", e))?;
        Ok(Self {
            model: Arc::new(model),
            target,
            geometry,
        })
    }

    pub fn env(&self, cfg: &RunConfig, seed: u64) -> Result<Env, CliError> {
        Env::new(
            self.model.clone(),
            self.target,
            cfg.limits,
            self.geometry.rig,
            cfg.env,
            cfg.init,
            seed,
        )
        .map_err(|e| invalid("env", e))
    }
}

fn run_dir(cfg: &RunConfig, out: Option<&Path>, name: &str) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join(name))
}

pub fn run_phantom(cfg: &RunConfig, out: Option<&Path>) -> Result<RunRecord, CliError> {
    let world = World::build(cfg)?;
    let mut dir = RunDir::create(&run_dir(cfg, out, "phantom"), "phantom", cfg)?;
    dir.write("phantom.stl", &world.model.mesh().to_stl_binary())?;
    let target = json!({
        "p1": world.target.p1,
        "p2": world.target.p2,
        "port": world.model.insertion_port(),
    });
    dir.write("target.json", &to_json(&target))?;
    let (lo, hi) = world.model.bounds();
    dir.finish(json!({"triangles": world.model.mesh().triangles.len(), "bounds": [lo, hi]}))
}

pub fn fit_shape(cfg: &RunConfig) -> Result<ShapeModel, CliError> {
    let s = &cfg.shape_fit;
    let data = generate_shape_dataset(s.samples, cfg.seeds.shape, s.bending_range, cfg.rig.active_length)
        .map_err(|e| invalid("shape_fit", e))?;
    fit_shape_model(&data, &s.model).map_err(CliError::runtime)
}

pub fn run_fit_shape(cfg: &RunConfig, out: Option<&Path>) -> Result<RunRecord, CliError> {
    let model = fit_shape(cfg)?;
    let mut dir = RunDir::create(&run_dir(cfg, out, "shape"), "fit-shape", cfg)?;
    dir.write("shape_model.json", &to_json(&model.to_doc()))?;
    dir.write("fit_report.json", &to_json(&model.fit_report))?;
    let r = &model.fit_report;
    dir.finish(json!({
        "validation_mean_error": r.validation_mean_error,
        "validation_max_error": r.validation_max_error,
    }))
}

pub fn train(cfg: &RunConfig, world: &World) -> Result<(Policy, TrainingCurves), CliError> {
    let mut env = world.env(cfg, cfg.seeds.train)?;
    train_sac(&mut env, &cfg.sac, cfg.seeds.train).map_err(CliError::runtime)
}

pub fn run_train(cfg: &RunConfig, out: Option<&Path>) -> Result<RunRecord, CliError> {
    let world = World::build(cfg)?;
    let (policy, curves) = train(cfg, &world)?;
    let mut dir = RunDir::create(&run_dir(cfg, out, "train"), "train", cfg)?;
    dir.write("policy.json", &to_json(&policy.to_doc()))?;
    dir.write("curves.csv", curves.to_csv().as_bytes())?;
    let last = curves.episodes.len().saturating_sub(100);
    let tail = &curves.episodes[last..];
    let rate = tail.iter().filter(|e| e.terminal == cathtwin_core::rl::TerminalKind::Success).count() as f64
        / tail.len().max(1) as f64;
    dir.finish(json!({"episodes": curves.episodes.len(), "recent_success_rate": rate}))
}

pub fn load_policy(path: &Path) -> Result<(Policy, Vec<u8>), CliError> {
    let bytes = read_artifact(path)?;
    let bad = |m: String| CliError::MissingArtifact {
        path: path.display().to_string(),
        message: m,
    };
    let doc: PolicyDoc = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
    let policy = Policy::from_doc(&doc).map_err(|e| bad(e.to_string()))?;
    Ok((policy, bytes))
}

pub fn load_maps(path: &Path) -> Result<(ProbabilityMap, Vec<u8>), CliError> {
    let text = read_text(path)?;
    let map = ProbabilityMap::from_json(&text).map_err(|e| CliError::MissingArtifact {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok((map, text.into_bytes()))
}

pub fn evaluate_policy(cfg: &RunConfig, world: &World, policy: &Policy) -> Result<LocalizationStats, CliError> {
    let mut env = world.env(cfg, cfg.seeds.eval)?;
    evaluate(policy, &mut env, cfg.eval.rollouts, cfg.seeds.eval).map_err(CliError::runtime)
}

pub fn run_evaluate(cfg: &RunConfig, out: Option<&Path>) -> Result<RunRecord, CliError> {
    let (policy, bytes) = load_policy(&cfg.policy_path())?;
    let world = World::build(cfg)?;
    let stats = evaluate_policy(cfg, &world, &policy)?;
    let mut dir = RunDir::create(&run_dir(cfg, out, "evaluate"), "evaluate", cfg)?;
    dir.note_input("policy", &bytes);
    dir.write("evaluation.json", &to_json(&stats))?;
    dir.finish(json!({
        "success_rate": stats.success_rate,
        "position_mean": stats.position_mean,
        "position_max": stats.position_max,
        "orientation_mean": stats.orientation_mean,
        "orientation_max": stats.orientation_max,
    }))
}

pub fn build_maps(cfg: &RunConfig, world: &World, policy: &Policy) -> Result<(JointSampleSet, ProbabilityMap), CliError> {
    let m = &cfg.map;
    let mut env = world.env(cfg, cfg.seeds.sampling)?;
    let samples = sample_trajectories(policy, &mut env, m.rollouts, cfg.seeds.sampling, &m.sampling).map_err(CliError::runtime)?;
    let map = build_probability_maps(&samples, &m.fit, &cfg.limits, cfg.seeds.map_fit).map_err(CliError::runtime)?;
    Ok((samples, map))
}

pub fn run_probmap(cfg: &RunConfig, out: Option<&Path>) -> Result<RunRecord, CliError> {
    let (policy, bytes) = load_policy(&cfg.policy_path())?;
    let world = World::build(cfg)?;
    let (samples, map) = build_maps(cfg, &world, &policy)?;
    let mut dir = RunDir::create(&run_dir(cfg, out, "probmap"), "probmap", cfg)?;
    dir.note_input("policy", &bytes);
    dir.write("maps/probability_map.json", map.to_json().as_bytes())?;
    let mut rows = String::from("translation,rotation,bending\n");
    for r in &samples.rows {
        rows.push_str(&format!("{},{},{}\n", r[0], r[1], r[2]));
    }
    dir.write("samples.csv", rows.as_bytes())?;
    let n = cfg.map.fit.grid;
    dir.write("maps/tb_grid.csv", map.grid_csv(DofPair::Tb, n, n).as_bytes())?;
    dir.write("maps/rb_grid.csv", map.grid_csv(DofPair::Rb, n, n).as_bytes())?;
    dir.finish(json!({
        "rows": samples.rows.len(),
        "successes": samples.successes,
        "k_tb": map.tb.gmm.k(),
        "k_rb": map.rb.gmm.k(),
    }))
}

/// One scripted-operator session.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub label: String,
    pub end: LoopEnd,
    /// Every tick, preceded by the starting frame at t = 0.
    pub frames: Vec<TickRecord>,
    pub events_jsonl: String,
    pub metrics: RunMetrics,
}

pub fn mode_name(mode: ControlMode) -> &'static str {
    match mode {
        ControlMode::MasterSlave => "master_slave",
        ControlMode::Copilot => "copilot",
    }
}

/// Where the operators steer: the configured goal, else the end of the policy's plan.
pub fn resolve_goal(cfg: &RunConfig, world: &World, policy: Option<&Policy>) -> Result<JointState, CliError> {
    if let Some(g) = cfg.simulate.goal {
        return Ok(g);
    }
    let policy = policy.ok_or_else(|| CliError::MissingArtifact {
        path: cfg.policy_path().display().to_string(),
        message: "a policy is needed to plan the goal when simulate.goal is unset".into(),
    })?;
    let mut env = world.env(cfg, 0)?;
    planned_goal(policy, &mut env).ok_or_else(|| CliError::Runtime("the policy's plan from the nominal start does not reach the target".into()))
}

pub fn ideal_line(cfg: &RunConfig, geometry: &Geometry, goal: &JointState) -> Result<IdealLine, CliError> {
    let shape = forward_kinematics(goal, &geometry.rig);
    IdealLine::from_shape(&geometry.cameras, &shape, cfg.metrics.ideal_points).map_err(CliError::runtime)
}

/// Metrics from recorded frames. Times come from the frame timestamps: a frame's interval
/// counts as intervention when it carries a command.
pub fn metrics_from_frames(frames: &[TickRecord], geometry: &Geometry, ideal: &IdealLine) -> Result<RunMetrics, CliError> {
    let joints: Vec<JointState> = frames.iter().map(|f| f.joints).collect();
    let total = frames.last().map_or(0.0, |f| f.t) - frames.first().map_or(0.0, |f| f.t);
    let intervention = frames
        .windows(2)
        .filter(|w| w[1].command.is_some())
        .fold(0.0, |acc, w| acc + (w[1].t - w[0].t));
    RunMetrics::compute(&joints, &geometry.rig, &geometry.cameras, ideal, total, intervention).map_err(CliError::runtime)
}

fn start_frame(session: &Session) -> TickRecord {
    TickRecord {
        t: 0.0,
        joints: session.joints(),
        command: None,
        scale: 1.0,
        phase: session.phase(),
        collided: session.collided(),
    }
}

/// Run every seeded operator profile against a fresh localization session in `mode`.
/// Operator `i` uses the same profile and seed in either mode.
pub fn simulate_study(
    cfg: &RunConfig,
    world: &World,
    mode: ControlMode,
    policy: Option<&Policy>,
    map: Option<&ProbabilityMap>,
    goal: &JointState,
) -> Result<Vec<SimRun>, CliError> {
    let ideal = ideal_line(cfg, &world.geometry, goal)?;
    let profiles = OperatorProfile::seeded(cfg.simulate.operators, cfg.seeds.operators);
    let mut runs = Vec::with_capacity(profiles.len());
    for (i, profile) in profiles.into_iter().enumerate() {
        let env = world.env(cfg, split_seed(cfg.seeds.operators, i as u64))?;
        let (p, m) = match mode {
            ControlMode::Copilot => (policy.cloned(), map.cloned()),
            ControlMode::MasterSlave => (None, None),
        };
        let mut session = init_session(p, m, env, mode, Phase::Initialization, cfg.copilot).map_err(|e| match e {
            cathtwin_core::copilot::CopilotError::MissingArtifacts => CliError::MissingArtifact {
                path: cfg.maps_path().display().to_string(),
                message: "copilot mode needs a policy and probability maps".into(),
            },
            e => CliError::runtime(e),
        })?;
        session.set_phase(Phase::Localization).map_err(CliError::runtime)?;
        let mut op = ScriptedOperator::new(profile, *goal, session.env(), OPERATOR_SEED_BASE + i as u64);
        let first = start_frame(&session);
        let end = run_closed_loop(&mut session, &mut op, &cfg.simulate.limits);
        let mut frames = Vec::with_capacity(session.history().len() + 1);
        frames.push(first);
        frames.extend_from_slice(session.history());
        let metrics = metrics_from_frames(&frames, &world.geometry, &ideal)?;
        log::info!("{} operator {i}: {end:?} after {:.2} s", mode_name(mode), metrics.total_time);
        runs.push(SimRun {
            label: format!("{}_{i:02}", mode_name(mode)),
            end,
            frames,
            events_jsonl: session.events_jsonl(),
            metrics,
        });
    }
    Ok(runs)
}

pub fn frames_to_jsonl(frames: &[TickRecord]) -> String {
    let mut s = String::new();
    for f in frames {
        s.push_str(&serde_json::to_string(f).expect("serializable"));
        s.push('\n');
    }
    s
}

pub fn frames_from_jsonl(text: &str) -> Result<Vec<TickRecord>, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GoalDoc {
    goal: JointState,
}

pub fn run_simulate(cfg: &RunConfig, mode: ControlMode, out: Option<&Path>) -> Result<RunRecord, CliError> {
    let world = World::build(cfg)?;
    let needs_policy = mode == ControlMode::Copilot || cfg.simulate.goal.is_none();
    let policy = if needs_policy { Some(load_policy(&cfg.policy_path())?) } else { None };
    let map = if mode == ControlMode::Copilot { Some(load_maps(&cfg.maps_path())?) } else { None };
    let goal = resolve_goal(cfg, &world, policy.as_ref().map(|p| &p.0))?;
    let runs = simulate_study(cfg, &world, mode, policy.as_ref().map(|p| &p.0), map.as_ref().map(|m| &m.0), &goal)?;

    let name = format!("simulate_{}", mode_name(mode));
    let mut dir = RunDir::create(&run_dir(cfg, out, &name), &format!("simulate {}", mode_name(mode)), cfg)?;
    if let Some((_, bytes)) = &policy {
        dir.note_input("policy", bytes);
    }
    if let Some((_, bytes)) = &map {
        dir.note_input("maps", bytes);
    }
    dir.write("goal.json", &to_json(&GoalDoc { goal }))?;
    for r in &runs {
        dir.write(&format!("trajectories/{}.jsonl", r.label), frames_to_jsonl(&r.frames).as_bytes())?;
        dir.write(&format!("events/{}.jsonl", r.label), r.events_jsonl.as_bytes())?;
    }
    let rows: Vec<(String, RunMetrics)> = runs.iter().map(|r| (r.label.clone(), r.metrics)).collect();
    dir.write("metrics.csv", metrics_to_csv(&rows).as_bytes())?;
    let ends: Vec<_> = runs.iter().map(|r| json!({"run": r.label, "end": r.end})).collect();
    dir.finish(json!({"mode": mode, "runs": ends}))
}

/// Recompute the metric table of a simulate run directory from its own snapshot, goal and
/// trajectories.
pub fn metrics_for_run(run: &Path) -> Result<Vec<(String, RunMetrics)>, CliError> {
    let snapshot = read_text(&run.join("config.snapshot"))?;
    let cfg = RunConfig::from_toml(&snapshot)?;
    let geometry = Geometry::new(&cfg)?;
    let goal_path = run.join("goal.json");
    let goal: GoalDoc = serde_json::from_str(&read_text(&goal_path)?).map_err(|e| CliError::io(&goal_path, e))?;
    let ideal = ideal_line(&cfg, &geometry, &goal.goal)?;
    let traj_dir = run.join("trajectories");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&traj_dir)
        .map_err(|e| CliError::MissingArtifact {
            path: traj_dir.display().to_string(),
            message: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut rows = Vec::with_capacity(files.len());
    for f in files {
        let frames = frames_from_jsonl(&read_text(&f)?).map_err(|e| CliError::io(&f, e))?;
        let label = f.file_stem().expect("file name").to_string_lossy().into_owned();
        rows.push((label, metrics_from_frames(&frames, &geometry, &ideal)?));
    }
    Ok(rows)
}

pub fn run_metrics(cfg: &RunConfig, run: &Path, out: Option<&Path>) -> Result<(RunRecord, String), CliError> {
    let rows = metrics_for_run(run)?;
    let csv = metrics_to_csv(&rows);
    let mut dir = RunDir::create(&run_dir(cfg, out, "metrics"), "metrics", cfg)?;
    dir.note_input("config.snapshot", &read_artifact(&run.join("config.snapshot"))?);
    dir.note_input("goal", &read_artifact(&run.join("goal.json"))?);
    dir.write("metrics.csv", csv.as_bytes())?;
    let record = dir.finish(json!({"runs": rows.len()}))?;
    Ok((record, csv))
}

/// Per-metric group comparison of two metric tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub alpha: f64,
    pub metrics: Vec<MetricComparison>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    pub comparison: Option<Comparison>,
    pub error: Option<String>,
}

pub fn compare_tables(a: &[(String, RunMetrics)], b: &[(String, RunMetrics)], alpha: f64) -> CompareReport {
    type Getter = fn(&RunMetrics) -> Option<f64>;
    let columns: [(&str, Getter); 6] = [
        ("ae", |m| Some(m.ae)),
        ("ptl", |m| Some(m.ptl)),
        ("ttl", |m| Some(m.ttl)),
        ("me", |m| m.me),
        ("total_time", |m| Some(m.total_time)),
        ("intervention_time", |m| Some(m.intervention_time)),
    ];
    let metrics = columns
        .iter()
        .map(|(name, get)| {
            // runs with an undefined value drop out of that metric's comparison
            let xa: Vec<f64> = a.iter().filter_map(|(_, m)| get(m)).collect();
            let xb: Vec<f64> = b.iter().filter_map(|(_, m)| get(m)).collect();
            let (comparison, error) = match compare_groups(&xa, &xb, alpha) {
                Ok(c) => (Some(c), None),
                Err(e) => (None, Some(e.to_string())),
            };
            MetricComparison {
                metric: name.to_string(),
                comparison,
                error,
            }
        })
        .collect();
    CompareReport { alpha, metrics }
}

fn read_table(run: &Path) -> Result<(Vec<(String, RunMetrics)>, Vec<u8>), CliError> {
    let path = run.join("metrics.csv");
    let bytes = read_artifact(&path)?;
    let text = String::from_utf8_lossy(&bytes);
    let rows = metrics_from_csv(&text).map_err(|e| CliError::io(&path, e))?;
    Ok((rows, bytes))
}

pub fn run_compare(cfg: &RunConfig, a: &Path, b: &Path, out: Option<&Path>) -> Result<(RunRecord, CompareReport), CliError> {
    let (ta, ba) = read_table(a)?;
    let (tb, bb) = read_table(b)?;
    let report = compare_tables(&ta, &tb, cfg.metrics.alpha);
    let mut dir = RunDir::create(&run_dir(cfg, out, "compare"), "compare", cfg)?;
    dir.note_input("a", &ba);
    dir.note_input("b", &bb);
    dir.write("compare.json", &to_json(&report))?;
    let record = dir.finish(json!({"n_a": ta.len(), "n_b": tb.len()}))?;
    Ok((record, report))
}
