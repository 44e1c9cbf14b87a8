//! Soft actor-critic: twin Q critics with Polyak-averaged targets, a tanh-squashed Gaussian
//! actor and automatic entropy-coefficient tuning.

use super::env::{Env, EnvError, Observation, TerminalKind};
use crate::nn::{Activation, Adam, Gradients, Mlp, MlpDoc, ScalarAdam};
use crate::WEIGHTS_FORMAT_VERSION;
use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const ACTION_DIM: usize = 3;
pub const OBS_DIM: usize = Observation::LEN;

/// Centerline coordinates arrive in mm; the networks see them in decimetres.
pub const OBS_COORD_SCALE: f64 = 0.01;

const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub episodes: usize,
    pub gamma: f64,
    pub tau: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub target_entropy: f64,
    pub initial_alpha: f64,
    /// Uniform-random environment steps collected before the actor takes over.
    pub warmup_steps: usize,
    pub updates_per_step: usize,
    /// Multiplier applied to environment rewards before they enter the critic targets.
    pub reward_scale: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            gamma: 0.99,
            tau: 0.005,
            replay_capacity: 100_000,
            batch_size: 256,
            hidden: vec![64, 64],
            learning_rate: 3e-4,
            target_entropy: -(ACTION_DIM as f64),
            initial_alpha: 0.1,
            warmup_steps: 1000,
            updates_per_step: 1,
            reward_scale: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SacError {
    #[error("invalid SAC config: {0}")]
    InvalidConfig(String),
    #[error("training diverged (non-finite loss) in episode {episode}")]
    Divergence { episode: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("bad policy document: {0}")]
    BadDocument(String),
}

impl SacConfig {
    pub fn validate(&self) -> Result<(), SacError> {
        let bad = |m: &str| Err(SacError::InvalidConfig(m.into()));
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return bad("need 0 < batch_size <= replay_capacity");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty and positive");
        }
        if !(self.learning_rate > 0.0 && self.initial_alpha > 0.0 && self.reward_scale > 0.0) {
            return bad("learning_rate, initial_alpha and reward_scale must be positive");
        }
        Ok(())
    }
}

pub fn features(obs: &Observation) -> [f64; OBS_DIM] {
    let mut v = obs.to_array();
    for x in &mut v[3..] {
        *x *= OBS_COORD_SCALE;
    }
    v
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Squashed-Gaussian sample: action, log-density and the pieces needed for gradients.
struct ActorSample {
    action: Array2<f64>,
    log_prob: Array1<f64>,
    /// Pre-squash noise.
    eps: Array2<f64>,
    std: Array2<f64>,
    /// Whether the raw log-std was inside the clamp (gradient passes).
    ls_active: Array2<bool>,
}

fn squash(out: &Array2<f64>, eps: Array2<f64>) -> ActorSample {
    let b = out.nrows();
    let mean = out.slice(s![.., ..ACTION_DIM]);
    let raw_ls = out.slice(s![.., ACTION_DIM..]);
    let ls = raw_ls.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
    let ls_active = raw_ls.mapv(|v| (LOG_STD_MIN..=LOG_STD_MAX).contains(&v));
    let std = ls.mapv(f64::exp);
    let u = &mean + &(&std * &eps);
    let action = u.mapv(f64::tanh);
    let mut log_prob = Array1::zeros(b);
    for i in 0..b {
        let mut lp = 0.0;
        for k in 0..ACTION_DIM {
            let uk = u[[i, k]];
            // log(1 - tanh(u)^2), computed without cancellation
            let log_det = 2.0 * (std::f64::consts::LN_2 - uk - softplus(-2.0 * uk));
            lp += -0.5 * eps[[i, k]] * eps[[i, k]] - ls[[i, k]] - HALF_LN_2PI - log_det;
        }
        log_prob[i] = lp;
    }
    ActorSample {
        action,
        log_prob,
        eps,
        std,
        ls_active,
    }
}

fn concat(obs: &Array2<f64>, act: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[obs.view(), act.view()]).expect("same batch size")
}

fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

/// One minibatch of transitions, rewards already scaled.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub act: Array2<f64>,
    pub rew: Array1<f64>,
    pub next_obs: Array2<f64>,
    pub done: Array1<f64>,
}

/// Fixed-capacity ring buffer of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    next: usize,
    obs: Vec<[f64; OBS_DIM]>,
    act: Vec<[f64; ACTION_DIM]>,
    rew: Vec<f64>,
    next_obs: Vec<[f64; OBS_DIM]>,
    done: Vec<bool>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            next: 0,
            obs: Vec::new(),
            act: Vec::new(),
            rew: Vec::new(),
            next_obs: Vec::new(),
            done: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn push(&mut self, obs: [f64; OBS_DIM], act: [f64; ACTION_DIM], rew: f64, next_obs: [f64; OBS_DIM], done: bool) {
        if self.obs.len() < self.capacity {
            self.obs.push(obs);
            self.act.push(act);
            self.rew.push(rew);
            self.next_obs.push(next_obs);
            self.done.push(done);
        } else {
            let i = self.next;
            self.obs[i] = obs;
            self.act[i] = act;
            self.rew[i] = rew;
            self.next_obs[i] = next_obs;
            self.done[i] = done;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Batch {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len())).collect();
        let rows = |src: &Vec<[f64; OBS_DIM]>| {
            Array2::from_shape_fn((n, OBS_DIM), |(r, c)| src[idx[r]][c])
        };
        Batch {
            obs: rows(&self.obs),
            act: Array2::from_shape_fn((n, ACTION_DIM), |(r, c)| self.act[idx[r]][c]),
            rew: Array1::from_shape_fn(n, |r| self.rew[idx[r]]),
            next_obs: rows(&self.next_obs),
            done: Array1::from_shape_fn(n, |r| if self.done[idx[r]] { 1.0 } else { 0.0 }),
        }
    }
}

/// Mean of `0.5·(Q(s,a) − y)²` and its parameter gradient.
pub fn critic_loss_and_grad(critic: &Mlp, batch: &Batch, y: &Array1<f64>) -> (f64, Gradients) {
    let b = batch.obs.nrows() as f64;
    let (q, cache) = critic.forward_cached(&concat(&batch.obs, &batch.act));
    let diff = &q.column(0) - y;
    let loss = 0.5 * diff.mapv(|d| d * d).sum() / b;
    let grad_out = (diff / b).insert_axis(Axis(1));
    let (g, _) = critic.backward(&cache, &grad_out);
    (loss, g)
}

/// Trained (or freshly initialised) agent.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    pub log_alpha: f64,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub episodes: usize,
    pub env_steps: usize,
    pub updates: usize,
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], initial_alpha: f64, rng: &mut R) -> Self {
        let sizes = |i: usize, o: usize| {
            let mut v = vec![i];
            v.extend_from_slice(hidden);
            v.push(o);
            v
        };
        let actor = Mlp::new(&sizes(OBS_DIM, 2 * ACTION_DIM), Activation::Relu, rng);
        let critic1 = Mlp::new(&sizes(OBS_DIM + ACTION_DIM, 1), Activation::Relu, rng);
        let critic2 = Mlp::new(&sizes(OBS_DIM + ACTION_DIM, 1), Activation::Relu, rng);
        Self {
            target1: critic1.clone(),
            target2: critic2.clone(),
            actor,
            critic1,
            critic2,
            log_alpha: initial_alpha.ln(),
            meta: TrainingMeta::default(),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// Squashed mean in deterministic mode, a squashed Gaussian draw otherwise. Always in
    /// [-1, 1]; the environment multiplies by its action scale.
    pub fn act<R: Rng + ?Sized>(&self, obs: &Observation, deterministic: bool, rng: &mut R) -> [f64; ACTION_DIM] {
        let x = Array2::from_shape_vec((1, OBS_DIM), features(obs).to_vec()).expect("shape");
        let out = self.actor.forward(&x);
        let mut a = [0.0; ACTION_DIM];
        if deterministic {
            for (k, v) in a.iter_mut().enumerate() {
                *v = out[[0, k]].tanh();
            }
        } else {
            let sample = squash(&out, normal_matrix(1, ACTION_DIM, rng));
            for (k, v) in a.iter_mut().enumerate() {
                *v = sample.action[[0, k]];
            }
        }
        a
    }

    /// Bootstrapped critic targets with fixed next-action noise.
    pub fn critic_targets(&self, batch: &Batch, eps_next: Array2<f64>, gamma: f64) -> Array1<f64> {
        let out = self.actor.forward(&batch.next_obs);
        let smp = squash(&out, eps_next);
        let x = concat(&batch.next_obs, &smp.action);
        let q1 = self.target1.forward(&x);
        let q2 = self.target2.forward(&x);
        let alpha = self.alpha();
        Array1::from_shape_fn(batch.rew.len(), |i| {
            let v = q1[[i, 0]].min(q2[[i, 0]]) - alpha * smp.log_prob[i];
            batch.rew[i] + gamma * (1.0 - batch.done[i]) * v
        })
    }

    /// Actor objective `mean(α·logπ(a|s) − min Q(s,a))` with fixed noise, its gradient, and
    /// the mean log-probability (for the temperature update).
    pub fn actor_loss_and_grad(&self, obs: &Array2<f64>, eps: Array2<f64>) -> (f64, Gradients, f64) {
        let b = obs.nrows();
        let bf = b as f64;
        let (out, cache) = self.actor.forward_cached(obs);
        let smp = squash(&out, eps);
        let x = concat(obs, &smp.action);
        let (q1, c1) = self.critic1.forward_cached(&x);
        let (q2, c2) = self.critic2.forward_cached(&x);
        let alpha = self.alpha();

        let mut loss = 0.0;
        let mut g1 = Array2::zeros((b, 1));
        let mut g2 = Array2::zeros((b, 1));
        for i in 0..b {
            let use1 = q1[[i, 0]] <= q2[[i, 0]];
            let q = if use1 { q1[[i, 0]] } else { q2[[i, 0]] };
            loss += alpha * smp.log_prob[i] - q;
            if use1 {
                g1[[i, 0]] = -1.0 / bf;
            } else {
                g2[[i, 0]] = -1.0 / bf;
            }
        }
        loss /= bf;
        let (_, dx1) = self.critic1.backward(&c1, &g1);
        let (_, dx2) = self.critic2.backward(&c2, &g2);
        let dq_da = &dx1.slice(s![.., OBS_DIM..]) + &dx2.slice(s![.., OBS_DIM..]);

        let mut grad_out = Array2::zeros((b, 2 * ACTION_DIM));
        for i in 0..b {
            for k in 0..ACTION_DIM {
                let a = smp.action[[i, k]];
                // d/du of the objective through tanh and the log-density correction
                let du = dq_da[[i, k]] * (1.0 - a * a) + alpha / bf * 2.0 * a;
                grad_out[[i, k]] = du;
                if smp.ls_active[[i, k]] {
                    let s_eps = smp.std[[i, k]] * smp.eps[[i, k]];
                    grad_out[[i, ACTION_DIM + k]] = du * s_eps - alpha / bf;
                }
            }
        }
        let (g, _) = self.actor.backward(&cache, &grad_out);
        (loss, g, smp.log_prob.mean().unwrap_or(0.0))
    }

    pub fn to_doc(&self) -> PolicyDoc {
        PolicyDoc {
            format_version: WEIGHTS_FORMAT_VERSION,
            kind: "sac_policy".into(),
            obs_coord_scale: OBS_COORD_SCALE,
            actor: self.actor.to_doc(),
            critic1: self.critic1.to_doc(),
            critic2: self.critic2.to_doc(),
            target1: self.target1.to_doc(),
            target2: self.target2.to_doc(),
            log_alpha: self.log_alpha,
            meta: self.meta.clone(),
        }
    }

    pub fn from_doc(doc: &PolicyDoc) -> Result<Self, SacError> {
        let bad = |m: String| SacError::BadDocument(m);
        if doc.format_version != WEIGHTS_FORMAT_VERSION || doc.kind != "sac_policy" {
            return Err(bad(format!("unsupported document {} v{}", doc.kind, doc.format_version)));
        }
        if doc.obs_coord_scale != OBS_COORD_SCALE {
            return Err(bad("observation scale mismatch".into()));
        }
        let net = |d: &MlpDoc, i: usize, o: usize| {
            let m = Mlp::from_doc(d).map_err(bad)?;
            if m.input_size() != i || m.output_size() != o {
                return Err(SacError::BadDocument(format!("network is {}→{}, expected {i}→{o}", m.input_size(), m.output_size())));
            }
            Ok(m)
        };
        Ok(Self {
            actor: net(&doc.actor, OBS_DIM, 2 * ACTION_DIM)?,
            critic1: net(&doc.critic1, OBS_DIM + ACTION_DIM, 1)?,
            critic2: net(&doc.critic2, OBS_DIM + ACTION_DIM, 1)?,
            target1: net(&doc.target1, OBS_DIM + ACTION_DIM, 1)?,
            target2: net(&doc.target2, OBS_DIM + ACTION_DIM, 1)?,
            log_alpha: doc.log_alpha,
            meta: doc.meta.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDoc {
    pub format_version: u32,
    pub kind: String,
    pub obs_coord_scale: f64,
    pub actor: MlpDoc,
    pub critic1: MlpDoc,
    pub critic2: MlpDoc,
    pub target1: MlpDoc,
    pub target2: MlpDoc,
    pub log_alpha: f64,
    pub meta: TrainingMeta,
}

/// Losses from one gradient update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
}

/// Mutable training state around a policy.
pub struct SacTrainer {
    pub policy: Policy,
    pub cfg: SacConfig,
    opt_actor: Adam,
    opt_c1: Adam,
    opt_c2: Adam,
    opt_alpha: ScalarAdam,
    pub buffer: ReplayBuffer,
    pub rng: ChaCha8Rng,
}

impl SacTrainer {
    pub fn new(cfg: SacConfig, seed: u64) -> Result<Self, SacError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut policy = Policy::new(&cfg.hidden, cfg.initial_alpha, &mut rng);
        policy.meta.seed = seed;
        Ok(Self {
            opt_actor: Adam::new(&policy.actor, cfg.learning_rate),
            opt_c1: Adam::new(&policy.critic1, cfg.learning_rate),
            opt_c2: Adam::new(&policy.critic2, cfg.learning_rate),
            opt_alpha: ScalarAdam::new(cfg.learning_rate),
            buffer: ReplayBuffer::new(cfg.replay_capacity),
            policy,
            cfg,
            rng,
        })
    }

    pub fn update(&mut self) -> UpdateStats {
        let b = self.cfg.batch_size;
        let batch = self.buffer.sample(b, &mut self.rng);
        let eps_next = normal_matrix(b, ACTION_DIM, &mut self.rng);
        let y = self.policy.critic_targets(&batch, eps_next, self.cfg.gamma);

        let (l1, g1) = critic_loss_and_grad(&self.policy.critic1, &batch, &y);
        let (l2, g2) = critic_loss_and_grad(&self.policy.critic2, &batch, &y);
        self.opt_c1.step(&mut self.policy.critic1, &g1);
        self.opt_c2.step(&mut self.policy.critic2, &g2);

        let eps = normal_matrix(b, ACTION_DIM, &mut self.rng);
        let (actor_loss, ga, mean_logp) = self.policy.actor_loss_and_grad(&batch.obs, eps);
        self.opt_actor.step(&mut self.policy.actor, &ga);

        // d/dlogα of −logα·(logπ + H̄)
        let g_alpha = -(mean_logp + self.cfg.target_entropy);
        self.opt_alpha.step(&mut self.policy.log_alpha, g_alpha);

        let tau = self.cfg.tau;
        self.policy.target1.soft_update_from(&self.policy.critic1, tau);
        self.policy.target2.soft_update_from(&self.policy.critic2, tau);
        self.policy.meta.updates += 1;
        UpdateStats {
            critic_loss: 0.5 * (l1 + l2),
            actor_loss,
            alpha: self.policy.alpha(),
        }
    }
}

/// One row per training episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub reward: f64,
    pub length: usize,
    pub terminal: TerminalKind,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingCurves {
    pub episodes: Vec<EpisodeRecord>,
}

impl TrainingCurves {
    pub fn rewards(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.reward).collect()
    }

    pub fn lengths(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.length as f64).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("episode,reward,length,terminal,critic_loss,actor_loss,alpha\n");
        for e in &self.episodes {
            let t = serde_json::to_value(e.terminal).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.episode, e.reward, e.length, t, e.critic_loss, e.actor_loss, e.alpha
            ));
        }
        s
    }
}

/// Trailing moving average; entry `i` averages episodes `i+1-window ..= i` (fewer at the start).
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= window {
            acc -= xs[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Train on `env` for `cfg.episodes` episodes. The environment's init stream is reseeded
/// from `seed` so that the whole run depends on `seed` alone.
pub fn train_sac(env: &mut Env, cfg: &SacConfig, seed: u64) -> Result<(Policy, TrainingCurves), SacError> {
    train_sac_with(env, cfg, seed, |_| {})
}

/// As `train_sac`, calling `on_episode` after every episode.
pub fn train_sac_with(
    env: &mut Env,
    cfg: &SacConfig,
    seed: u64,
    mut on_episode: impl FnMut(&EpisodeRecord),
) -> Result<(Policy, TrainingCurves), SacError> {
    let mut tr = SacTrainer::new(cfg.clone(), seed)?;
    env.reseed(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
    let mut curves = TrainingCurves::default();
    let mut total_steps = 0usize;
    for episode in 0..cfg.episodes {
        let mut obs = env.reset()?;
        let mut ep_reward = 0.0;
        let mut last = UpdateStats {
            alpha: tr.policy.alpha(),
            ..Default::default()
        };
        let mut n_updates = 0usize;
        let mut sums = UpdateStats::default();
        let terminal = loop {
            let action = if total_steps < cfg.warmup_steps {
                [0; ACTION_DIM].map(|_| tr.rng.random_range(-1.0..=1.0))
            } else {
                tr.policy.act(&obs, false, &mut tr.rng)
            };
            let out = env.step(action)?;
            total_steps += 1;
            ep_reward += out.reward.total();
            // a timeout truncates rather than ends the task, so it still bootstraps
            let done = out.terminal.is_terminal() && out.terminal != TerminalKind::Timeout;
            tr.buffer.push(
                features(&obs),
                action,
                out.reward.total() * cfg.reward_scale,
                features(&out.observation),
                done,
            );
            obs = out.observation;
            if total_steps >= cfg.warmup_steps && tr.buffer.len() >= cfg.batch_size {
                for _ in 0..cfg.updates_per_step {
                    last = tr.update();
                    if !(last.critic_loss.is_finite() && last.actor_loss.is_finite() && last.alpha.is_finite()) {
                        return Err(SacError::Divergence { episode });
                    }
                    sums.critic_loss += last.critic_loss;
                    sums.actor_loss += last.actor_loss;
                    n_updates += 1;
                }
            }
            if out.terminal.is_terminal() {
                break out.terminal;
            }
        };
        let k = n_updates.max(1) as f64;
        let rec = EpisodeRecord {
            episode,
            reward: ep_reward,
            length: env.steps(),
            terminal,
            critic_loss: sums.critic_loss / k,
            actor_loss: sums.actor_loss / k,
            alpha: last.alpha,
        };
        on_episode(&rec);
        curves.episodes.push(rec);
    }
    tr.policy.meta.episodes = cfg.episodes;
    tr.policy.meta.env_steps = total_steps;
    Ok((tr.policy, curves))
}
