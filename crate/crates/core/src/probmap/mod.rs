//! Monte-Carlo visitation sampling, Gaussian-mixture probability maps over joint pairs,
//! and the density-ratio speed governor.

pub mod gmm;

pub use gmm::{bic_sweep, fit_gmm, fit_gmm_with_floor, Component, Gmm2D, GmmError};

use crate::kinematics::{Dof, JointLimits, JointState};
use crate::rl::eval::{rollout, PolicyController};
use crate::rl::{Env, EnvError, Policy, TerminalKind};
use crate::{split_seed, WEIGHTS_FORMAT_VERSION};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProbMapError {
    #[error("{pair:?} map: {source}")]
    Fit { pair: DofPair, source: GmmError },
    #[error("{0} is not a planning DOF")]
    NotPlanningDof(Dof),
    #[error("need at least one rollout")]
    NoRollouts,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("bad probability map document: {0}")]
    BadDocument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DofPair {
    /// (translation, bending)
    Tb,
    /// (rotation, bending)
    Rb,
}

impl DofPair {
    pub fn project(self, j: &JointState) -> [f64; 2] {
        match self {
            DofPair::Tb => [j.translation, j.bending],
            DofPair::Rb => [j.rotation, j.bending],
        }
    }

    pub fn dofs(self) -> (Dof, Dof) {
        match self {
            DofPair::Tb => (Dof::Translation, Dof::Bending),
            DofPair::Rb => (Dof::Rotation, Dof::Bending),
        }
    }

    /// Maps that contain `dof`.
    pub fn containing(dof: Dof) -> Result<&'static [DofPair], ProbMapError> {
        match dof {
            Dof::Translation => Ok(&[DofPair::Tb]),
            Dof::Rotation => Ok(&[DofPair::Rb]),
            Dof::Bending => Ok(&[DofPair::Tb, DofPair::Rb]),
            other => Err(ProbMapError::NotPlanningDof(other)),
        }
    }
}

/// Visited (translation, rotation, bending) states pooled over rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSampleSet {
    pub rows: Vec<[f64; 3]>,
    pub n_inits: usize,
    pub seed: u64,
    pub successful_only: bool,
    pub successes: usize,
    pub rollout_lengths: Vec<usize>,
}

impl JointSampleSet {
    pub fn pair_rows(&self, pair: DofPair) -> Vec<[f64; 2]> {
        self.rows
            .iter()
            .map(|r| match pair {
                DofPair::Tb => [r[0], r[2]],
                DofPair::Rb => [r[1], r[2]],
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleOptions {
    /// Keep only rollouts that end in success.
    pub successful_only: bool,
    /// Sample actions from the stochastic policy rather than its mean.
    pub stochastic: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            successful_only: false,
            stochastic: true,
        }
    }
}

/// Run `n_inits` rollouts and pool every visited state. Rollout `i` reseeds the env's init
/// stream and the action noise with `split_seed(seed, i)`, so rollouts are independent of
/// execution order and the pool is concatenated in rollout order.
pub fn sample_trajectories(
    policy: &Policy,
    env: &mut Env,
    n_inits: usize,
    seed: u64,
    opts: &SampleOptions,
) -> Result<JointSampleSet, ProbMapError> {
    if n_inits == 0 {
        return Err(ProbMapError::NoRollouts);
    }
    let mut set = JointSampleSet {
        rows: Vec::new(),
        n_inits,
        seed,
        successful_only: opts.successful_only,
        successes: 0,
        rollout_lengths: Vec::with_capacity(n_inits),
    };
    for i in 0..n_inits {
        let s = split_seed(seed, i as u64);
        env.reseed(s);
        env.reset()?;
        let mut ctl = PolicyController::new(policy, !opts.stochastic, s);
        let t = rollout(&mut ctl, env)?;
        let success = t.terminal() == TerminalKind::Success;
        set.successes += usize::from(success);
        set.rollout_lengths.push(t.steps.len());
        if success || !opts.successful_only {
            set.rows.extend(t.steps.iter().map(|s| s.outcome.joints.planning()));
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds2 {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Bounds2 {
    pub fn for_pair(pair: DofPair, limits: &JointLimits) -> Self {
        let (a, b) = pair.dofs();
        let (la, lb) = (limits.get(a), limits.get(b));
        Self {
            x: [la.min, la.max],
            y: [lb.min, lb.max],
        }
    }

    /// `n` evenly spaced values from lo to hi inclusive.
    pub fn axis(range: [f64; 2], n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![0.5 * (range[0] + range[1])];
        }
        (0..n)
            .map(|i| range[0] + (range[1] - range[0]) * i as f64 / (n - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMap {
    pub gmm: Gmm2D,
    pub bounds: Bounds2,
    /// Largest mixture density found; normalizes `density` to a peak of 1.
    pub density_max: f64,
}

impl PairMap {
    pub fn new(gmm: Gmm2D, bounds: Bounds2, grid: usize) -> Self {
        let density_max = estimate_density_max(&gmm, &bounds, grid);
        Self {
            gmm,
            bounds,
            density_max,
        }
    }

    pub fn log_density(&self, p: &[f64; 2]) -> f64 {
        (self.gmm.log_pdf(p) - self.density_max.ln()).min(0.0)
    }

    pub fn density(&self, p: &[f64; 2]) -> f64 {
        self.log_density(p).exp().clamp(0.0, 1.0)
    }
}

/// Max of the mixture density over a `grid`×`grid` lattice on `bounds`, the component means,
/// and the modes reached by hill-climbing from those means and the best lattice cells.
fn estimate_density_max(gmm: &Gmm2D, bounds: &Bounds2, grid: usize) -> f64 {
    let xs = Bounds2::axis(bounds.x, grid);
    let ys = Bounds2::axis(bounds.y, grid);
    let mut cells: Vec<(f64, [f64; 2])> = Vec::with_capacity(grid * grid);
    for &x in &xs {
        for &y in &ys {
            cells.push((gmm.pdf(&[x, y]), [x, y]));
        }
    }
    cells.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = cells.first().map_or(0.0, |c| c.0);
    let starts = cells
        .iter()
        .take(5)
        .map(|c| c.1)
        .chain(gmm.components.iter().map(|c| c.mean));
    for s in starts {
        best = best.max(gmm.pdf(&s));
        best = best.max(gmm.pdf(&gmm.climb(s, 200)));
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub k_tb: usize,
    pub k_rb: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub eig_floor: f64,
    pub grid: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            k_tb: 5,
            k_rb: 5,
            tol: 1e-6,
            max_iter: 500,
            eig_floor: gmm::DEFAULT_EIG_FLOOR,
            grid: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapProvenance {
    pub n_inits: usize,
    pub sample_seed: u64,
    pub fit_seed: u64,
    pub n_rows: usize,
    pub successful_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMap {
    pub format_version: u32,
    pub tb: PairMap,
    pub rb: PairMap,
    pub provenance: MapProvenance,
}

pub fn build_probability_maps(
    samples: &JointSampleSet,
    cfg: &MapConfig,
    limits: &JointLimits,
    seed: u64,
) -> Result<ProbabilityMap, ProbMapError> {
    let fit = |pair: DofPair, k: usize, s: u64| {
        let g = fit_gmm_with_floor(&samples.pair_rows(pair), k, cfg.tol, cfg.max_iter, s, cfg.eig_floor)
            .map_err(|source| ProbMapError::Fit { pair, source })?;
        Ok::<_, ProbMapError>(PairMap::new(g, Bounds2::for_pair(pair, limits), cfg.grid))
    };
    Ok(ProbabilityMap {
        format_version: WEIGHTS_FORMAT_VERSION,
        tb: fit(DofPair::Tb, cfg.k_tb, split_seed(seed, 0))?,
        rb: fit(DofPair::Rb, cfg.k_rb, split_seed(seed, 1))?,
        provenance: MapProvenance {
            n_inits: samples.n_inits,
            sample_seed: samples.seed,
            fit_seed: seed,
            n_rows: samples.rows.len(),
            successful_only: samples.successful_only,
        },
    })
}

impl ProbabilityMap {
    pub fn pair(&self, pair: DofPair) -> &PairMap {
        match pair {
            DofPair::Tb => &self.tb,
            DofPair::Rb => &self.rb,
        }
    }

    /// Normalized density in [0, 1].
    pub fn density(&self, pair: DofPair, p: [f64; 2]) -> f64 {
        self.pair(pair).density(&p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, ProbMapError> {
        let m: Self = serde_json::from_str(s).map_err(|e| ProbMapError::BadDocument(e.to_string()))?;
        if m.format_version != WEIGHTS_FORMAT_VERSION {
            return Err(ProbMapError::BadDocument(format!("unsupported version {}", m.format_version)));
        }
        for pm in [&m.tb, &m.rb] {
            let w: f64 = pm.gmm.components.iter().map(|c| c.weight).sum();
            if pm.gmm.components.is_empty() || (w - 1.0).abs() > 1e-9 || !(pm.density_max > 0.0) {
                return Err(ProbMapError::BadDocument("invalid mixture".into()));
            }
        }
        Ok(m)
    }

    /// `x,y,density` rows over an `nx`×`ny` lattice on the map's bounds.
    pub fn grid_csv(&self, pair: DofPair, nx: usize, ny: usize) -> String {
        let pm = self.pair(pair);
        let mut s = String::from("x,y,density\n");
        for x in Bounds2::axis(pm.bounds.x, nx) {
            for y in Bounds2::axis(pm.bounds.y, ny) {
                s.push_str(&format!("{x},{y},{}\n", pm.density(&[x, y])));
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GovernorConfig {
    pub floor: f64,
    /// Projection distance per planning DOF (mm, deg, deg).
    pub lookahead: [f64; 3],
}

impl Default for GovernorConfig {
    fn default() -> Self {
        Self {
            floor: 0.20,
            lookahead: [5.0, 5.0, 5.0],
        }
    }
}

/// Speed multipliers for the three planning DOFs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedScale {
    pub translation: f64,
    pub rotation: f64,
    pub bending: f64,
}

/// Governor scale for moving `dof` in the sign of `direction` from `current`: the ratio of
/// projected to current density, clamped to `[floor, 1]`. Moving toward equal or higher
/// density gives exactly 1. Bending takes the smaller of its two maps.
pub fn speed_scale(
    map: &ProbabilityMap,
    current: &JointState,
    dof: Dof,
    direction: f64,
    cfg: &GovernorConfig,
) -> Result<f64, ProbMapError> {
    let pairs = DofPair::containing(dof)?;
    let step = direction.signum() * cfg.lookahead[dof.planning_index().expect("planning DOF")];
    if direction == 0.0 || !step.is_finite() {
        return Ok(1.0);
    }
    let projected = current.with(dof, current.get(dof) + step);
    let mut scale: f64 = 1.0;
    for &pair in pairs {
        let pm = map.pair(pair);
        let l0 = pm.log_density(&pair.project(current));
        let l1 = pm.log_density(&pair.project(&projected));
        let s = if l1 >= l0 {
            1.0
        } else {
            (l1 - l0).exp().clamp(cfg.floor, 1.0)
        };
        scale = scale.min(s);
    }
    Ok(scale)
}

pub fn speed_scales(
    map: &ProbabilityMap,
    current: &JointState,
    direction: [f64; 3],
    cfg: &GovernorConfig,
) -> SpeedScale {
    let s = |dof, d| speed_scale(map, current, dof, d, cfg).expect("planning DOF");
    SpeedScale {
        translation: s(Dof::Translation, direction[0]),
        rotation: s(Dof::Rotation, direction[1]),
        bending: s(Dof::Bending, direction[2]),
    }
}
