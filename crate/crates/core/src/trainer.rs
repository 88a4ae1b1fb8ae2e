//! Episodic REINFORCE for one index network.
//!
//! Each batch freezes a context `(s0, λ = f_θ(s0), v_tpt, v_tsls)` and runs
//! `batch_size` episodes. Every episode starts from a random queue, samples
//! `a_t ~ Bernoulli(σ_m(f_θ(s_t) − λ))`, collects the discounted return `G_e`
//! of
//!
//! ```text
//! w_r·r_t + w_tpt·v_tpt + w_tsls·v_tsls − λ·a_t
//! ```
//!
//! and the summed score `h_e`. The network then takes one Adam ascent step
//! along `Σ_e (G_e − mean G)·h_e`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    derive_seed, CapacityTable, ChannelProcess, ChannelSpec, EnvError, RewardWeights,
    ServiceClass, ServiceClassSpec, UeRngs, UeSim, CQI_MAX, CQI_MIN,
};
use crate::metrics::{tpt_target, tpt_violated};
use crate::net::{action_prob, InputNorm, NetError, PolicyGradAccumulator, WhittleNetwork, DEFAULT_M};
use crate::oracle::TabularMdp;

/// Abort threshold on `max |θ|`.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: `{field}` {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("non-finite reward {reward} at step {step} of episode seed {seed}")]
    NonFiniteReward { step: usize, seed: u64, reward: f64 },
    #[error("training diverged in batch {batch}: {reason}")]
    Diverged {
        batch: usize,
        reason: String,
        last_good: Box<WhittleNetwork>,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> TrainError {
    TrainError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViolationReward {
    /// The batch's `v_tpt`, `v_tsls` enter every step's reward.
    #[default]
    Constant,
    /// Per-step violation indicators enter as penalties.
    Realized,
}

impl std::str::FromStr for ViolationReward {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(Self::Constant),
            "realized" => Ok(Self::Realized),
            _ => Err(format!("expected `constant` or `realized`, got `{s}`")),
        }
    }
}

/// Default learning rate per class.
pub fn default_lr(class: ServiceClass) -> f64 {
    match class {
        ServiceClass::Embb | ServiceClass::Xr => 0.1,
        ServiceClass::Urllc => 0.75,
        ServiceClass::Mmtc => 0.25,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub class: ServiceClass,
    #[serde(default = "d_episodes")]
    pub episodes_total: usize,
    #[serde(default = "d_episode_len")]
    pub episode_len: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Learning rate; the class default when absent.
    #[serde(default)]
    pub lr: Option<f64>,
    /// Scale the rate by `1/√(b+1)` at batch `b`.
    #[serde(default)]
    pub lr_decay: bool,
    #[serde(default = "d_m")]
    pub m: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    /// Reward weights; the class default when absent.
    #[serde(default)]
    pub weights: Option<RewardWeights>,
    /// Full class description; the class default when absent.
    #[serde(default)]
    pub service: Option<ServiceClassSpec>,
    #[serde(default)]
    pub channel: ChannelSpec,
    #[serde(default)]
    pub capacity: Option<CapacityTable>,
    #[serde(default = "d_high")]
    pub high_rbs: u32,
    #[serde(default = "d_low")]
    pub low_rbs: u32,
    /// Buffer range of random initial states and the buffer normalizer.
    #[serde(default = "d_max_queue_bytes")]
    pub max_queue_bytes: u64,
    #[serde(default)]
    pub reward_violations: ViolationReward,
    /// Pin `(v_tpt, v_tsls)` instead of drawing them per batch.
    #[serde(default)]
    pub fixed_violations: Option<[f64; 2]>,
    /// Train on this tabular model instead of the simulated UE.
    #[serde(default)]
    pub tabular: Option<TabularMdp>,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for episodes within a batch.
    #[serde(default = "d_jobs")]
    pub jobs: usize,
}

fn d_episodes() -> usize {
    20_000
}
fn d_episode_len() -> usize {
    5_000
}
fn d_batch() -> usize {
    20
}
fn d_m() -> f64 {
    DEFAULT_M
}
fn d_gamma() -> f64 {
    0.99
}
fn d_high() -> u32 {
    9
}
fn d_low() -> u32 {
    2
}
fn d_max_queue_bytes() -> u64 {
    50_000
}
fn d_jobs() -> usize {
    1
}

impl TrainConfig {
    pub fn new(class: ServiceClass) -> Self {
        Self {
            class,
            episodes_total: d_episodes(),
            episode_len: d_episode_len(),
            batch_size: d_batch(),
            lr: None,
            lr_decay: false,
            m: d_m(),
            gamma: d_gamma(),
            weights: None,
            service: None,
            channel: ChannelSpec::default(),
            capacity: None,
            high_rbs: d_high(),
            low_rbs: d_low(),
            max_queue_bytes: d_max_queue_bytes(),
            reward_violations: ViolationReward::Constant,
            fixed_violations: None,
            tabular: None,
            seed: 0,
            jobs: d_jobs(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| default_lr(self.class))
    }

    pub fn service_spec(&self) -> ServiceClassSpec {
        let mut spec = self
            .service
            .clone()
            .unwrap_or_else(|| self.class.default_spec());
        if let Some(w) = self.weights {
            spec.weights = w;
        }
        spec
    }

    pub fn weights(&self) -> RewardWeights {
        self.service_spec().weights
    }

    pub fn num_batches(&self) -> usize {
        self.episodes_total / self.batch_size.max(1)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if self.episodes_total < self.batch_size {
            return Err(invalid("episodes_total", "must cover at least one batch"));
        }
        if self.episode_len == 0 {
            return Err(invalid("episode_len", "must be at least 1"));
        }
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            return Err(invalid("lr", "must be positive"));
        }
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(invalid("m", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid("gamma", "must lie in [0, 1]"));
        }
        if self.jobs == 0 {
            return Err(invalid("jobs", "must be at least 1"));
        }
        if let Some(v) = self.fixed_violations {
            if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(invalid("fixed_violations", "entries must lie in [0, 1]"));
            }
        }
        let spec = self.service_spec();
        spec.validate()?;
        if spec.class != self.class {
            return Err(invalid("service", "class does not match `class`"));
        }
        if let Some(mdp) = &self.tabular {
            mdp.validate()
                .map_err(|e| invalid("tabular", e.to_string()))?;
        } else {
            self.channel.validate()?;
            if let Some(c) = &self.capacity {
                c.validate()?;
            }
            if self.high_rbs <= self.low_rbs {
                return Err(invalid("high_rbs", "must exceed low_rbs"));
            }
            if self.max_queue_bytes == 0 {
                return Err(invalid("max_queue_bytes", "must be positive"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Environments

/// Outcome of one training step, before weights and λ are applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvStep {
    pub service_reward: f64,
    pub tpt_violation: bool,
    pub tsls_violation: bool,
    pub tpt_mbps: f64,
}

/// Single-UE environment driven by the trainer.
pub trait TrainingEnv: Clone + Send + Sync {
    /// Random `[buffer, cqi, tsls]` used as the batch anchor state.
    fn sample_state<R: Rng>(&self, rng: &mut R) -> [f64; 3];
    /// Starts an episode from a random state; all randomness of the episode
    /// derives from `seed`.
    fn reset(&mut self, seed: u64);
    fn observe(&self) -> [f64; 3];
    fn step(&mut self, action: u8) -> EnvStep;
    fn input_norm(&self) -> InputNorm;
}

/// The tabular queue model as a training environment. Observations are
/// `[s, 15, 0]`.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    pub mdp: TabularMdp,
    state: usize,
    rng: ChaCha8Rng,
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp) -> Self {
        Self {
            mdp,
            state: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn state(&self) -> usize {
        self.state
    }

    /// Reseeds and starts from `state` instead of a random state.
    pub fn reset_to(&mut self, state: usize, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = state.min(self.mdp.max_queue);
    }
}

impl TrainingEnv for TabularEnv {
    fn sample_state<R: Rng>(&self, rng: &mut R) -> [f64; 3] {
        [rng.random_range(0..=self.mdp.max_queue) as f64, CQI_MAX as f64, 0.0]
    }

    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = self.rng.random_range(0..=self.mdp.max_queue);
    }

    fn observe(&self) -> [f64; 3] {
        [self.state as f64, CQI_MAX as f64, 0.0]
    }

    fn step(&mut self, action: u8) -> EnvStep {
        let a = action as usize;
        let s = self.state;
        let reward = self.mdp.reward(s, a, 0.0);
        let served = self.mdp.served(s, a);
        let [(base, _), (up, _)] = self.mdp.transitions(s, a);
        self.state = if self.rng.random::<f64>() < self.mdp.beta {
            up
        } else {
            base
        };
        EnvStep {
            service_reward: reward,
            tpt_violation: false,
            tsls_violation: false,
            tpt_mbps: served as f64,
        }
    }

    fn input_norm(&self) -> InputNorm {
        InputNorm::new(self.mdp.max_queue as f64, 1.0)
    }
}

/// One simulated UE with high/low grants of `high_rbs`/`low_rbs` RBs.
///
/// The service reward is the served bytes over the mean high-action capacity
/// at CQI 15, so a fully served high grant on the best channel earns about 1.
#[derive(Debug, Clone)]
pub struct SingleUeEnv {
    spec: ServiceClassSpec,
    capacity: CapacityTable,
    high_rbs: u32,
    low_rbs: u32,
    max_queue_bytes: u64,
    template: ChannelProcess,
    sim: UeSim,
}

impl SingleUeEnv {
    pub fn new(
        spec: ServiceClassSpec,
        channel: ChannelProcess,
        capacity: CapacityTable,
        high_rbs: u32,
        low_rbs: u32,
        max_queue_bytes: u64,
    ) -> Self {
        let sim = UeSim::new(spec.clone(), channel.clone(), UeRngs::new(0, 0));
        Self {
            spec,
            capacity,
            high_rbs,
            low_rbs,
            max_queue_bytes,
            template: channel,
            sim,
        }
    }

    /// Builds the environment described by a (non-tabular) config. Trace
    /// paths resolve against `base_dir`.
    pub fn from_config(cfg: &TrainConfig, base_dir: &Path) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[u64::MAX]));
        let channel = cfg.channel.build(base_dir, &mut rng)?;
        Ok(Self::new(
            cfg.service_spec(),
            channel,
            cfg.capacity.clone().unwrap_or_default(),
            cfg.high_rbs,
            cfg.low_rbs,
            cfg.max_queue_bytes,
        ))
    }

    pub fn sim(&self) -> &UeSim {
        &self.sim
    }
}

impl TrainingEnv for SingleUeEnv {
    fn sample_state<R: Rng>(&self, rng: &mut R) -> [f64; 3] {
        [
            rng.random_range(0..=self.max_queue_bytes) as f64,
            rng.random_range(CQI_MIN..=CQI_MAX) as f64,
            rng.random_range(0..=self.spec.tsls_bound_l) as f64,
        ]
    }

    fn reset(&mut self, seed: u64) {
        let mut rngs = UeRngs::new(seed, 0);
        let mut channel = self.template.clone();
        channel.restart(&mut rngs.channel);
        let buffer = rngs.traffic.random_range(0..=self.max_queue_bytes);
        self.sim = UeSim::new(self.spec.clone(), channel, rngs);
        self.sim.state.buffer_bytes = buffer;
    }

    fn observe(&self) -> [f64; 3] {
        let s = &self.sim.state;
        [s.buffer_bytes as f64, s.cqi as f64, s.tsls as f64]
    }

    fn step(&mut self, action: u8) -> EnvStep {
        let high = action == 1;
        let rbs = if high { self.high_rbs } else { self.low_rbs };
        let out = self.sim.step(rbs, high, &self.capacity);
        let high_mean = self.capacity.mean(out.cqi, self.high_rbs);
        let target = tpt_target(&out, self.spec.tpt_bound_b, high_mean);
        EnvStep {
            service_reward: out.served_bytes as f64 / self.capacity.mean(CQI_MAX, self.high_rbs),
            tpt_violation: tpt_violated(out.served_bytes, target),
            tsls_violation: self.sim.state.tsls > self.spec.tsls_bound_l,
            tpt_mbps: out.tpt_mbps(),
        }
    }

    fn input_norm(&self) -> InputNorm {
        InputNorm::new(self.max_queue_bytes as f64, self.spec.tsls_bound_l as f64)
    }
}

// ---------------------------------------------------------------------------
// Episodes

/// Frozen per-batch context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchContext {
    pub s0: [f64; 3],
    pub lambda: f64,
    pub v_tpt: f64,
    pub v_tsls: f64,
}

impl BatchContext {
    pub fn features(&self, obs: [f64; 3]) -> [f64; 5] {
        [obs[0], obs[1], obs[2], self.v_tpt, self.v_tsls]
    }
}

/// Draws `s0` and the violation features, then sets `λ = f_θ(s0)`.
pub fn sample_batch_context<E: TrainingEnv, R: Rng>(
    net: &WhittleNetwork,
    env: &E,
    fixed_violations: Option<[f64; 2]>,
    rng: &mut R,
) -> Result<BatchContext, TrainError> {
    let s0 = env.sample_state(rng);
    let [v_tpt, v_tsls] = match fixed_violations {
        Some(v) => v,
        None => [rng.random::<f64>(), rng.random::<f64>()],
    };
    let mut ctx = BatchContext {
        s0,
        lambda: 0.0,
        v_tpt,
        v_tsls,
    };
    ctx.lambda = net.forward(&ctx.features(s0))?;
    Ok(ctx)
}

/// Parameters of a rollout that do not change within a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutParams {
    pub episode_len: usize,
    pub gamma: f64,
    pub m: f64,
    pub weights: RewardWeights,
    pub reward_violations: ViolationReward,
}

impl RolloutParams {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            episode_len: cfg.episode_len,
            gamma: cfg.gamma,
            m: cfg.m,
            weights: cfg.weights(),
            reward_violations: cfg.reward_violations,
        }
    }

    /// Per-step reward of the relaxed objective.
    pub fn reward(&self, ctx: &BatchContext, step: &EnvStep, action: u8) -> f64 {
        let w = &self.weights;
        let violations = match self.reward_violations {
            ViolationReward::Constant => w.w_tpt * ctx.v_tpt + w.w_tsls * ctx.v_tsls,
            ViolationReward::Realized => {
                -(w.w_tpt * f64::from(u8::from(step.tpt_violation))
                    + w.w_tsls * f64::from(u8::from(step.tsls_violation)))
            }
        };
        w.w_r * step.service_reward + violations - ctx.lambda * action as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    /// Discounted return `G_e`.
    pub ret: f64,
    /// Summed score `h_e`.
    pub score: PolicyGradAccumulator,
    pub seed: u64,
    pub mean_tpt_mbps: f64,
}

/// Discounted return and mean throughput of one rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutStats {
    pub ret: f64,
    pub mean_tpt_mbps: f64,
}

/// Runs `params.episode_len` steps from the env's current state, choosing
/// actions with `choose(features)`. The env is not reset.
pub fn rollout<E, F>(
    env: &mut E,
    ctx: &BatchContext,
    params: &RolloutParams,
    seed: u64,
    mut choose: F,
) -> Result<RolloutStats, TrainError>
where
    E: TrainingEnv,
    F: FnMut(&[f64; 5]) -> Result<u8, TrainError>,
{
    let mut ret = 0.0;
    let mut discount = 1.0;
    let mut tpt = 0.0;
    for t in 0..params.episode_len {
        let x = ctx.features(env.observe());
        let action = choose(&x)?;
        let step = env.step(action);
        let r = params.reward(ctx, &step, action);
        if !r.is_finite() {
            return Err(TrainError::NonFiniteReward {
                step: t,
                seed,
                reward: r,
            });
        }
        ret += discount * r;
        discount *= params.gamma;
        tpt += step.tpt_mbps;
    }
    Ok(RolloutStats {
        ret,
        mean_tpt_mbps: tpt / params.episode_len.max(1) as f64,
    })
}

/// One training episode: reset from `seed`, sample actions from the network
/// and accumulate the score.
pub fn run_episode<E: TrainingEnv>(
    net: &WhittleNetwork,
    env: &mut E,
    ctx: &BatchContext,
    params: &RolloutParams,
    seed: u64,
) -> Result<EpisodeRecord, TrainError> {
    env.reset(derive_seed(seed, &[0]));
    let mut action_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let mut score = PolicyGradAccumulator::default();
    let stats = rollout(env, ctx, params, seed, |x| {
        let f = net.forward(x)?;
        let p = action_prob(f, ctx.lambda, params.m);
        let a = u8::from(action_rng.random::<f64>() < p);
        net.logprob_grad(x, ctx.lambda, params.m, a, &mut score)?;
        Ok(a)
    })?;
    if !score.is_finite() {
        return Err(TrainError::Diverged {
            batch: 0,
            reason: format!("non-finite score in episode seed {seed}"),
            last_good: Box::new(net.clone()),
        });
    }
    Ok(EpisodeRecord {
        ret: stats.ret,
        score,
        seed,
        mean_tpt_mbps: stats.mean_tpt_mbps,
    })
}

/// `Σ_e (G_e − Ḡ)·h_e`, summed in episode order.
pub fn batch_direction(records: &[EpisodeRecord]) -> Vec<f64> {
    let n = records.len().max(1) as f64;
    let mean = records.iter().map(|r| r.ret).sum::<f64>() / n;
    let mut dir = vec![0.0; crate::net::NUM_PARAMS];
    for r in records {
        let adv = r.ret - mean;
        for (d, g) in dir.iter_mut().zip(&r.score.grad) {
            *d += adv * g;
        }
    }
    dir
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub batch: usize,
    pub mean_return: f64,
    pub mean_tpt_mbps: f64,
    pub grad_norm: f64,
    pub lambda: f64,
}

/// Writes `batch,mean_return,mean_tpt_mbps,grad_norm` rows.
pub fn write_log_csv<W: std::io::Write>(log: &[BatchLog], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["batch", "mean_return", "mean_tpt_mbps", "grad_norm"])?;
    for b in log {
        w.write_record([
            b.batch.to_string(),
            b.mean_return.to_string(),
            b.mean_tpt_mbps.to_string(),
            b.grad_norm.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: WhittleNetwork,
    pub log: Vec<BatchLog>,
}

/// Mean change of the output when `v_tpt` (and separately `v_tsls`) rises by
/// 0.1, over random anchor states. Positive values mean more violation raises
/// the index.
pub fn violation_sensitivity<E: TrainingEnv>(
    net: &WhittleNetwork,
    env: &E,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut dt, mut dl) = (0.0, 0.0);
    for _ in 0..samples {
        let s = env.sample_state(&mut rng);
        let v1 = rng.random_range(0.0..0.9);
        let v2 = rng.random_range(0.0..0.9);
        let base = net.forward(&[s[0], s[1], s[2], v1, v2])?;
        dt += net.forward(&[s[0], s[1], s[2], v1 + 0.1, v2])? - base;
        dl += net.forward(&[s[0], s[1], s[2], v1, v2 + 0.1])? - base;
    }
    let n = samples.max(1) as f64;
    Ok((dt / n, dl / n))
}

/// Fresh network for `env`, seeded from the config.
pub fn init_network<E: TrainingEnv>(cfg: &TrainConfig, env: &E) -> WhittleNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[u64::MAX - 1]));
    WhittleNetwork::new(env.input_norm(), &mut rng).with_class(cfg.class)
}

/// Full training run. `on_batch` sees every log row as it is produced.
pub fn train<E: TrainingEnv>(
    cfg: &TrainConfig,
    env: &E,
    mut on_batch: impl FnMut(&BatchLog),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut net = init_network(cfg, env);
    let params = RolloutParams::from_config(cfg);
    let mut ctx_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| invalid("jobs", e.to_string()))?;
    let mut log = Vec::with_capacity(cfg.num_batches());

    for b in 0..cfg.num_batches() {
        let ctx = sample_batch_context(&net, env, cfg.fixed_violations, &mut ctx_rng)?;
        let seeds: Vec<u64> = (0..cfg.batch_size)
            .map(|e| derive_seed(cfg.seed, &[b as u64, e as u64]))
            .collect();
        let records = if cfg.jobs == 1 {
            seeds
                .iter()
                .map(|&s| run_episode(&net, &mut env.clone(), &ctx, &params, s))
                .collect::<Result<Vec<_>, _>>()
        } else {
            use rayon::prelude::*;
            let snapshot = &net;
            pool.install(|| {
                seeds
                    .par_iter()
                    .map(|&s| run_episode(snapshot, &mut env.clone(), &ctx, &params, s))
                    .collect::<Result<Vec<_>, _>>()
            })
        }
        .map_err(|e| match e {
            TrainError::Diverged {
                reason, last_good, ..
            } => TrainError::Diverged {
                batch: b,
                reason,
                last_good,
            },
            other => other,
        })?;

        let dir = batch_direction(&records);
        let grad_norm = dir.iter().map(|g| g * g).sum::<f64>().sqrt();
        let lr = if cfg.lr_decay {
            cfg.lr() / ((b + 1) as f64).sqrt()
        } else {
            cfg.lr()
        };
        let last_good = net.clone();
        if let Err(e) = net.adam_step(&dir, lr) {
            return Err(TrainError::Diverged {
                batch: b,
                reason: e.to_string(),
                last_good: Box::new(last_good),
            });
        }
        let max_abs = net.max_abs_param();
        if !(max_abs <= DIVERGENCE_LIMIT) {
            return Err(TrainError::Diverged {
                batch: b,
                reason: format!("max |theta| = {max_abs}"),
                last_good: Box::new(last_good),
            });
        }
        let n = records.len() as f64;
        let row = BatchLog {
            batch: b,
            mean_return: records.iter().map(|r| r.ret).sum::<f64>() / n,
            mean_tpt_mbps: records.iter().map(|r| r.mean_tpt_mbps).sum::<f64>() / n,
            grad_norm,
            lambda: ctx.lambda,
        };
        on_batch(&row);
        log.push(row);
    }
    Ok(TrainOutcome { net, log })
}
