//! Self-play actor-critic agent for sequential symbol recovery.
//!
//! An episode recovers `x_m, x_{m-1}, ..., x_1` one element per step. The
//! reward after step `l` is the negated cumulative metric of the partial
//! vector recovered so far. Three networks are trained from the recorded
//! transitions:
//!
//! * the actor, producing the action distribution `p̂_l`;
//! * the critic, regressing the bootstrapped return `r_l + γ^{m-l} q_{l+1}`;
//! * the state-value network, regressing the episode's final `-d(x_1^m)`
//!   from `[s_l; p̂_l]`.
//!
//! Rewards and returns are multiplied by `reward_scale` before entering any
//! loss because the critic and state-value heads end in `tanh`.
//!
//! Training runs in synchronous rounds: every worker plays its share of
//! episodes against the same parameter snapshot and computes local
//! gradients, the coordinator averages them in worker order and applies one
//! RMSProp step per network.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{
    self, softmax_backward, Activation, Gradients, Mlp, RmsPropState,
};
use crate::signal::{
    snr_to_noise_variance, stream_rng, ComplexChannelInstance, Constellation, PartialPath,
    RealSystem,
};

/// Floor applied to probabilities before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// Problem dimensions that fix every network shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentDims {
    /// Real transmit dimension.
    pub m: usize,
    /// Real receive dimension.
    pub n: usize,
    pub n_t: usize,
    /// Alphabet size `|Q|`.
    pub actions: usize,
}

impl AgentDims {
    pub fn new(n_t: usize, n_r: usize, constellation: &Constellation) -> Self {
        Self {
            m: constellation.real_dim(n_t),
            n: constellation.real_dim(n_r),
            n_t,
            actions: constellation.size(),
        }
    }

    pub fn of_system(sys: &RealSystem, n_t: usize) -> Self {
        Self { m: sys.m(), n: sys.n(), n_t, actions: sys.constellation().size() }
    }

    /// `4m + n + 2`.
    pub fn state_len(&self) -> usize {
        4 * self.m + self.n + 2
    }

    fn hidden(&self, activation: Activation) -> Vec<(usize, Activation)> {
        let mut layers = vec![(self.state_len(), activation)];
        layers.extend(std::iter::repeat_n((8 * self.n_t, activation), 5));
        layers
    }

    pub fn actor(&self) -> Mlp {
        let mut layers = self.hidden(Activation::Relu);
        layers.push((self.actions, Activation::Softmax));
        Mlp::new(self.state_len(), &layers)
    }

    pub fn critic(&self) -> Mlp {
        let mut layers = self.hidden(Activation::Tanh);
        layers.push((1, Activation::Tanh));
        Mlp::new(self.state_len(), &layers)
    }

    pub fn state_value(&self) -> Mlp {
        let mut layers = self.hidden(Activation::Tanh);
        layers.push((1, Activation::Tanh));
        Mlp::new(self.state_len() + self.actions, &layers)
    }
}

/// Policy and value evaluations used by the network-guided search.
pub trait SearchNetworks {
    /// `p̂` for a state vector.
    fn policy(&self, state: &[f64]) -> Result<Vec<f64>>;
    /// `u` for a state vector and the policy evaluated at it.
    fn state_value(&self, state: &[f64], policy: &[f64]) -> Result<f64>;
}

/// Actor, critic and state-value networks of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentNets {
    pub actor: Mlp,
    pub critic: Mlp,
    pub state_value: Mlp,
}

impl AgentNets {
    pub fn new(dims: AgentDims, seed: u64) -> Self {
        let mut actor = dims.actor();
        let mut critic = dims.critic();
        let mut state_value = dims.state_value();
        actor.init_weights(seed);
        critic.init_weights(seed.wrapping_add(1));
        state_value.init_weights(seed.wrapping_add(2));
        Self { actor, critic, state_value }
    }

    pub fn state_len(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn actions(&self) -> usize {
        self.actor.output_dim()
    }

    /// Checks the networks fit `dims`.
    pub fn check_dims(&self, dims: AgentDims) -> Result<()> {
        let expect = [
            (self.actor.input_dim(), dims.state_len()),
            (self.actor.output_dim(), dims.actions),
            (self.critic.input_dim(), dims.state_len()),
            (self.critic.output_dim(), 1),
            (self.state_value.input_dim(), dims.state_len() + dims.actions),
            (self.state_value.output_dim(), 1),
        ];
        for (actual, expected) in expect {
            if actual != expected {
                return Err(Error::Configuration(format!(
                    "checkpoint does not match the scenario: width {actual}, expected {expected}"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        nn::save_checkpoint(&[&self.actor, &self.critic, &self.state_value], path)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        nn::write_checkpoint(&[&self.actor, &self.critic, &self.state_value])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_nets(nn::read_checkpoint(bytes)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_nets(nn::load_checkpoint(path)?)
    }

    fn from_nets(nets: Vec<Mlp>) -> Result<Self> {
        let [actor, critic, state_value]: [Mlp; 3] = nets
            .try_into()
            .map_err(|v: Vec<Mlp>| Error::Format(format!("expected 3 networks, found {}", v.len())))?;
        Ok(Self { actor, critic, state_value })
    }
}

impl SearchNetworks for AgentNets {
    fn policy(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.actor.predict(state)
    }

    fn state_value(&self, state: &[f64], policy: &[f64]) -> Result<f64> {
        let input = value_input(state, policy);
        Ok(self.state_value.predict(&input)?[0])
    }
}

fn value_input(state: &[f64], policy: &[f64]) -> Vec<f64> {
    let mut input = Vec::with_capacity(state.len() + policy.len());
    input.extend_from_slice(state);
    input.extend_from_slice(policy);
    input
}

/// The MDP state `s_l`:
/// `[y; y'; Hᵀy'; χ_{m-l+1}^m; χ_{m-l+2}^m; b(x_{m-l+1}^m); d(x_{m-l+1}^m)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentStateVector(Vec<f64>);

impl AgentStateVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub fn build_state(sys: &RealSystem, path: &PartialPath) -> AgentStateVector {
    let m = sys.m();
    let x = path.zero_padded(m);
    build_state_from_parts(sys, &x, path.step(), path.last_branch(), path.cum_metric())
}

/// Same as [`build_state`] from a full-length buffer whose positions
/// `m-depth..m` hold the recovered symbols.
pub fn build_state_from_parts(
    sys: &RealSystem,
    x: &[f64],
    depth: usize,
    last_branch: f64,
    cum_metric: f64,
) -> AgentStateVector {
    let m = sys.m();
    let mut s = Vec::with_capacity(4 * m + sys.n() + 2);
    s.extend(sys.y().iter());
    s.extend(sys.y_prime().iter());
    s.extend(sys.ht_y_prime().iter());
    let start = s.len();
    s.resize(start + 2 * m, 0.0);
    for i in m - depth..m {
        s[start + i] = x[i];
    }
    // previous step: the most recent element is dropped
    for i in (m - depth + 1).min(m)..m {
        s[start + m + i] = x[i];
    }
    s.push(last_branch);
    s.push(cum_metric);
    AgentStateVector(s)
}

/// One self-play step `(s_l, a_l, r_l, s_{l+1})`. Rewards are raw, unscaled
/// negated metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: AgentStateVector,
    pub action: usize,
    pub reward: f64,
    pub next_state: AgentStateVector,
    pub step: usize,
    /// `-d(x_1^m)` of the whole episode.
    pub episode_return: f64,
}

pub type Episode = Vec<Transition>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Greedy,
}

/// Draws from `p̂` or takes its argmax (lowest index on ties).
pub fn sample_action(probs: &[f64], rng: &mut impl Rng, mode: ActionMode) -> usize {
    match mode {
        ActionMode::Greedy => argmax_first(probs),
        ActionMode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut last_positive = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    last_positive = i;
                }
                acc += p;
                if u < acc {
                    return i;
                }
            }
            last_positive
        }
    }
}

pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Plays one episode, choosing each action with `choose(p̂, step)`.
pub fn play_episode<N: SearchNetworks + ?Sized>(
    sys: &RealSystem,
    nets: &N,
    mut choose: impl FnMut(&[f64], usize) -> usize,
) -> Result<Episode> {
    let m = sys.m();
    let levels = sys.constellation().pam_levels();
    let mut path = PartialPath::new();
    let mut episode = Vec::with_capacity(m);
    let mut state = build_state(sys, &path);
    for step in 0..m {
        let probs = nets.policy(state.as_slice())?;
        let action = choose(&probs, step);
        path.push(sys, levels[action])?;
        let next_state = build_state(sys, &path);
        episode.push(Transition {
            state,
            action,
            reward: -path.cum_metric(),
            next_state: next_state.clone(),
            step,
            episode_return: 0.0,
        });
        state = next_state;
    }
    let total = -path.cum_metric();
    for t in &mut episode {
        t.episode_return = total;
    }
    Ok(episode)
}

/// Self-play episode with actions sampled from the actor.
pub fn self_play_episode<N: SearchNetworks + ?Sized>(
    sys: &RealSystem,
    nets: &N,
    rng: &mut impl Rng,
) -> Result<Episode> {
    play_episode(sys, nets, |p, _| sample_action(p, rng, ActionMode::Sample))
}

/// The plain DRL detector: greedy actor decisions step by step.
pub fn detect_greedy_drl<N: SearchNetworks + ?Sized>(sys: &RealSystem, nets: &N) -> Result<Vec<f64>> {
    let mut path = PartialPath::new();
    let levels = sys.constellation().pam_levels();
    for _ in 0..sys.m() {
        let probs = nets.policy(build_state(sys, &path).as_slice())?;
        path.push(sys, levels[argmax_first(&probs)])?;
    }
    Ok(path.suffix())
}

/// `r + γ^{m-l} q_{l+1} - q_l`, with `q_m = 0`.
pub fn td_error(reward: f64, q_l: f64, q_next: f64, gamma: f64, m: usize, step: usize) -> f64 {
    let bootstrap = if step + 1 >= m { 0.0 } else { q_next };
    reward + gamma.powi((m - step) as i32) * bootstrap - q_l
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Critic l2 coefficient.
    pub c1: f64,
    /// Entropy bonus weight.
    pub c2: f64,
    /// Actor l2 coefficient.
    pub c3: f64,
    /// State-value l2 coefficient.
    pub c4: f64,
    pub learning_rate: f64,
    pub workers: usize,
    pub episodes_per_update: usize,
    pub total_updates: usize,
    pub reward_scale: f64,
    /// Training SNRs, drawn uniformly per episode.
    pub snr_db: Vec<f64>,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults with `reward_scale = 1/(2n)`.
    pub fn for_receive_dim(n: usize) -> Self {
        Self {
            gamma: 0.95,
            c1: 1e-4,
            c2: 1.0,
            c3: 1e-4,
            c4: 1e-4,
            learning_rate: 1e-4,
            workers: 1,
            episodes_per_update: 32,
            total_updates: 1000,
            reward_scale: 1.0 / (2.0 * n as f64),
            snr_db: vec![10.0],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.9..=1.0).contains(&self.gamma) {
            return Err(Error::Configuration(format!("gamma {} outside [0.9, 1]", self.gamma)));
        }
        if self.workers == 0 {
            return Err(Error::Configuration("workers must be >= 1".into()));
        }
        if self.episodes_per_update < self.workers {
            return Err(Error::Configuration(
                "episodes_per_update must give every worker at least one episode".into(),
            ));
        }
        if !(self.reward_scale > 0.0) {
            return Err(Error::Configuration("reward_scale must be positive".into()));
        }
        if self.snr_db.is_empty() {
            return Err(Error::Configuration("training SNR list is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    pub grads: Gradients,
}

fn check_batch(batch: &[Episode]) -> Result<()> {
    if batch.is_empty() || batch.iter().any(|e| e.is_empty()) {
        return Err(Error::InvalidParameter("empty training batch".into()));
    }
    Ok(())
}

fn finish(mut loss: f64, mut grads: Gradients, net: &Mlp, coeff: f64, n: usize) -> Result<LossAndGrad> {
    let inv = 1.0 / n as f64;
    loss = loss * inv + coeff * net.squared_norm();
    grads.scale(inv);
    grads.add_l2(net, coeff);
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::TrainingDivergence { update: 0, what: format!("loss {loss}") });
    }
    Ok(LossAndGrad { loss, grads })
}

/// Critic outputs `q_l` for every step of an episode.
fn critic_values(critic: &Mlp, episode: &Episode) -> Result<Vec<f64>> {
    episode.iter().map(|t| Ok(critic.predict(t.state.as_slice())?[0])).collect()
}

/// Scaled TD errors of an episode under the current critic.
pub fn episode_td_errors(critic: &Mlp, episode: &Episode, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let m = episode.len();
    let q = critic_values(critic, episode)?;
    Ok(episode
        .iter()
        .map(|t| {
            let q_next = if t.step + 1 < m { q[t.step + 1] } else { 0.0 };
            td_error(t.reward * cfg.reward_scale, q[t.step], q_next, cfg.gamma, m, t.step)
        })
        .collect())
}

/// `(1/N) ΣΣ TD² + c₁||θ_c||²`; the bootstrap target is held constant.
pub fn critic_loss_and_grad(batch: &[Episode], nets: &AgentNets, cfg: &TrainConfig) -> Result<LossAndGrad> {
    check_batch(batch)?;
    let critic = &nets.critic;
    let mut grads = Gradients::zeros_like(critic);
    let mut loss = 0.0;
    for episode in batch {
        let m = episode.len();
        let q = critic_values(critic, episode)?;
        for t in episode {
            let (out, cache) = critic.forward(t.state.as_slice())?;
            let q_next = if t.step + 1 < m { q[t.step + 1] } else { 0.0 };
            let td = td_error(t.reward * cfg.reward_scale, out[0], q_next, cfg.gamma, m, t.step);
            loss += td * td;
            grads.add_scaled(&critic.backward(&cache, &[-2.0 * td])?, 1.0);
        }
    }
    finish(loss, grads, critic, cfg.c1, batch.len())
}

/// Cross-entropy `-Σ p_k log p̂_k` with the log clamp.
pub fn cross_entropy(target: &[f64], predicted: &[f64]) -> f64 {
    -target.iter().zip(predicted).map(|(p, q)| p * q.max(LOG_CLAMP).ln()).sum::<f64>()
}

/// `(1/N) ΣΣ (TD·CE(p, p̂) - c₂·CE(p̂, p̂)) + c₃||θ_a||²` with TD constant.
pub fn actor_loss_and_grad(batch: &[Episode], nets: &AgentNets, cfg: &TrainConfig) -> Result<LossAndGrad> {
    check_batch(batch)?;
    let actor = &nets.actor;
    let mut grads = Gradients::zeros_like(actor);
    let mut loss = 0.0;
    for episode in batch {
        let tds = episode_td_errors(&nets.critic, episode, cfg)?;
        for (t, &td) in episode.iter().zip(&tds) {
            let (p, cache) = actor.forward(t.state.as_slice())?;
            let mut one_hot = vec![0.0; p.len()];
            one_hot[t.action] = 1.0;
            loss += td * cross_entropy(&one_hot, &p) - cfg.c2 * cross_entropy(&p, &p);

            // d/dp of TD·(-log p_a) - c₂·(-Σ p log p)
            let grad_p: Vec<f64> = p
                .iter()
                .enumerate()
                .map(|(k, &pk)| {
                    let ce = if k == t.action && pk >= LOG_CLAMP { -td / pk } else { 0.0 };
                    let ent = if pk >= LOG_CLAMP { pk.ln() + 1.0 } else { LOG_CLAMP.ln() };
                    ce + cfg.c2 * ent
                })
                .collect();
            let logit_grad = softmax_backward(&p, &grad_p);
            grads.add_scaled(&actor.backward_from_logits(&cache, &logit_grad)?, 1.0);
        }
    }
    finish(loss, grads, actor, cfg.c3, batch.len())
}

/// `(1/N) ΣΣ (u_l - D)² + c₄||θ_s||²` on inputs `[s_l; p̂_l]`, `p̂_l` constant.
pub fn state_value_loss_and_grad(
    batch: &[Episode],
    nets: &AgentNets,
    cfg: &TrainConfig,
) -> Result<LossAndGrad> {
    check_batch(batch)?;
    let value = &nets.state_value;
    let mut grads = Gradients::zeros_like(value);
    let mut loss = 0.0;
    for episode in batch {
        for t in episode {
            let p = nets.actor.predict(t.state.as_slice())?;
            let (u, cache) = value.forward(&value_input(t.state.as_slice(), &p))?;
            let err = u[0] - t.episode_return * cfg.reward_scale;
            loss += err * err;
            grads.add_scaled(&value.backward(&cache, &[2.0 * err])?, 1.0);
        }
    }
    finish(loss, grads, value, cfg.c4, batch.len())
}

/// Where self-play instances come from: a base channel with per-episode
/// variation, and the SNRs to train at.
#[derive(Debug, Clone)]
pub struct TrainingScenario {
    pub channel: ComplexChannelInstance,
    pub constellation: Constellation,
}

/// Channel indices at or above this are reserved for training draws.
pub const TRAINING_CHANNEL_BASE: u64 = 1 << 63;

impl TrainingScenario {
    pub fn dims(&self) -> AgentDims {
        AgentDims::new(self.channel.n_t(), self.channel.n_r(), &self.constellation)
    }

    fn sample_system(&self, snr_db: &[f64], rng: &mut ChaCha8Rng) -> Result<RealSystem> {
        let snr = snr_db[rng.random_range(0..snr_db.len())];
        let sigma = snr_to_noise_variance(snr, self.channel.n_t(), self.constellation.symbol_energy());
        for _ in 0..100 {
            let j = TRAINING_CHANNEL_BASE | rng.random_range(1..TRAINING_CHANNEL_BASE);
            let h = self.channel.generate_varying_channel(j)?;
            match RealSystem::sample(&h, &self.constellation, sigma, rng) {
                Err(Error::DegenerateChannel { .. }) => continue,
                other => return other,
            }
        }
        Err(Error::Numerical("repeatedly drew degenerate training channels".into()))
    }
}

/// Gradients and losses of one worker's share of an update.
#[derive(Debug, Clone)]
pub struct WorkerResult {
    pub critic: LossAndGrad,
    pub actor: LossAndGrad,
    pub state_value: LossAndGrad,
    pub mean_return: f64,
}

/// Plays `episodes` self-play episodes against `nets` and computes all
/// three local gradients.
pub fn worker_round(
    nets: &AgentNets,
    scenario: &TrainingScenario,
    cfg: &TrainConfig,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<WorkerResult> {
    let mut batch = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let sys = scenario.sample_system(&cfg.snr_db, rng)?;
        batch.push(self_play_episode(&sys, nets, rng)?);
    }
    let mean_return = batch.iter().map(|e| e[0].episode_return).sum::<f64>() / episodes as f64;
    Ok(WorkerResult {
        critic: critic_loss_and_grad(&batch, nets, cfg)?,
        actor: actor_loss_and_grad(&batch, nets, cfg)?,
        state_value: state_value_loss_and_grad(&batch, nets, cfg)?,
        mean_return,
    })
}

/// RNG stream for worker `worker` in update `update`.
pub fn worker_rng(seed: u64, update: usize, worker: usize) -> ChaCha8Rng {
    stream_rng(seed, ((update as u64) << 16) | worker as u64)
}

/// Episodes assigned to each worker; the first `rem` workers get one extra.
pub fn worker_shares(episodes: usize, workers: usize) -> Vec<usize> {
    let base = episodes / workers;
    let rem = episodes % workers;
    (0..workers).map(|w| base + usize::from(w < rem)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateLog {
    pub update: usize,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub state_value_loss: f64,
    /// Mean raw `-d(x_1^m)` of the update's episodes.
    pub mean_return: f64,
    pub wall_clock_s: f64,
}

pub struct Optimizers {
    pub actor: RmsPropState,
    pub critic: RmsPropState,
    pub state_value: RmsPropState,
}

impl Optimizers {
    pub fn new(nets: &AgentNets, learning_rate: f64) -> Self {
        Self {
            actor: RmsPropState::new(&nets.actor, learning_rate),
            critic: RmsPropState::new(&nets.critic, learning_rate),
            state_value: RmsPropState::new(&nets.state_value, learning_rate),
        }
    }
}

/// Owns the global networks and performs synchronous update rounds.
pub struct Trainer {
    cfg: TrainConfig,
    scenario: TrainingScenario,
    nets: AgentNets,
    optimizers: Optimizers,
    update: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, scenario: TrainingScenario) -> Result<Self> {
        let nets = AgentNets::new(scenario.dims(), cfg.seed);
        Self::with_nets(cfg, scenario, nets)
    }

    pub fn with_nets(cfg: TrainConfig, scenario: TrainingScenario, mut nets: AgentNets) -> Result<Self> {
        cfg.validate()?;
        nets.check_dims(scenario.dims())?;
        nets.critic.l2_coeff = cfg.c1;
        nets.actor.l2_coeff = cfg.c3;
        nets.state_value.l2_coeff = cfg.c4;
        let optimizers = Optimizers::new(&nets, cfg.learning_rate);
        Ok(Self { cfg, scenario, nets, optimizers, update: 0, started: Instant::now() })
    }

    /// The current global networks; after a failed update these are the
    /// last good parameters.
    pub fn nets(&self) -> &AgentNets {
        &self.nets
    }

    pub fn into_nets(self) -> AgentNets {
        self.nets
    }

    pub fn updates_done(&self) -> usize {
        self.update
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn run_update(&mut self) -> Result<UpdateLog> {
        let update = self.update;
        let shares = worker_shares(self.cfg.episodes_per_update, self.cfg.workers);
        let nets = &self.nets;
        let scenario = &self.scenario;
        let cfg = &self.cfg;
        let results: Vec<WorkerResult> = shares
            .par_iter()
            .enumerate()
            .map(|(w, &episodes)| {
                let mut rng = worker_rng(cfg.seed, update, w);
                worker_round(nets, scenario, cfg, episodes, &mut rng)
            })
            .collect::<Result<_>>()
            .map_err(|e| relabel(e, update))?;

        let inv = 1.0 / results.len() as f64;
        let mut critic = Gradients::zeros_like(&self.nets.critic);
        let mut actor = Gradients::zeros_like(&self.nets.actor);
        let mut value = Gradients::zeros_like(&self.nets.state_value);
        let mut log = UpdateLog {
            update,
            critic_loss: 0.0,
            actor_loss: 0.0,
            state_value_loss: 0.0,
            mean_return: 0.0,
            wall_clock_s: 0.0,
        };
        for r in &results {
            critic.add_scaled(&r.critic.grads, inv);
            actor.add_scaled(&r.actor.grads, inv);
            value.add_scaled(&r.state_value.grads, inv);
            log.critic_loss += r.critic.loss * inv;
            log.actor_loss += r.actor.loss * inv;
            log.state_value_loss += r.state_value.loss * inv;
            log.mean_return += r.mean_return * inv;
        }
        let finite = [log.critic_loss, log.actor_loss, log.state_value_loss].iter().all(|v| v.is_finite())
            && critic.is_finite()
            && actor.is_finite()
            && value.is_finite();
        if !finite {
            return Err(Error::TrainingDivergence { update, what: "non-finite averaged loss".into() });
        }
        self.optimizers.critic.step(&mut self.nets.critic, &critic).map_err(|e| relabel(e, update))?;
        self.optimizers.actor.step(&mut self.nets.actor, &actor).map_err(|e| relabel(e, update))?;
        self.optimizers
            .state_value
            .step(&mut self.nets.state_value, &value)
            .map_err(|e| relabel(e, update))?;
        self.update += 1;
        log.wall_clock_s = self.started.elapsed().as_secs_f64();
        Ok(log)
    }
}

fn relabel(e: Error, update: usize) -> Error {
    match e {
        Error::TrainingDivergence { what, .. } => Error::TrainingDivergence { update, what },
        other => other,
    }
}

/// Runs `cfg.total_updates` synchronous rounds from freshly initialized
/// networks.
pub fn train(cfg: &TrainConfig, scenario: &TrainingScenario) -> Result<(AgentNets, Vec<UpdateLog>)> {
    let mut trainer = Trainer::new(cfg.clone(), scenario.clone())?;
    let mut logs = Vec::with_capacity(cfg.total_updates);
    for _ in 0..cfg.total_updates {
        logs.push(trainer.run_update()?);
    }
    Ok((trainer.into_nets(), logs))
}

pub const TRAINING_LOG_HEADER: &str =
    "update,critic_loss,actor_loss,state_value_loss,mean_return,wall_clock_s";

pub fn training_log_csv(logs: &[UpdateLog]) -> String {
    let mut out = String::from(TRAINING_LOG_HEADER);
    out.push('\n');
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            l.update, l.critic_loss, l.actor_loss, l.state_value_loss, l.mean_return, l.wall_clock_s
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{gaussian_matrix, path_metric};
    use nalgebra::{DMatrix, DVector};

    fn system(seed: u64, n_t: usize, c: &Constellation, sigma: f64) -> RealSystem {
        let mut rng = stream_rng(seed, 3);
        let h = gaussian_matrix(n_t, n_t, c.is_real(), &mut rng);
        RealSystem::sample(&h, c, sigma, &mut rng).unwrap()
    }

    #[test]
    fn state_layout() {
        let c = Constellation::bpsk();
        let sys = system(1, 8, &c, 0.5);
        let dims = AgentDims::new(8, 8, &c);
        assert_eq!(dims.state_len(), 42);
        let s0 = build_state(&sys, &PartialPath::new());
        assert_eq!(s0.len(), 42);
        assert!(s0.as_slice()[2 * 8 + 8..].iter().all(|v| *v == 0.0));
        assert_eq!(&s0.as_slice()[..8], sys.y().as_slice());

        let x = sys.x_true().unwrap().to_vec();
        let mut path = PartialPath::new();
        path.push(&sys, x[7]).unwrap();
        let s1 = build_state(&sys, &path);
        let chi = &s1.as_slice()[24..40];
        assert_eq!(&chi[..7], &[0.0; 7]);
        assert_eq!(chi[7], x[7]);
        assert!(chi[8..].iter().all(|v| *v == 0.0));

        path.push(&sys, x[6]).unwrap();
        let s2 = build_state(&sys, &path);
        let s = s2.as_slice();
        assert_eq!(&s[24..32], &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, x[6], x[7]]);
        assert_eq!(&s[32..40], &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, x[7]]);
        let d2 = path_metric(&sys, &[x[6], x[7]]).unwrap();
        let d1 = path_metric(&sys, &[x[7]]).unwrap();
        assert!((s[41] - d2).abs() < 1e-12);
        assert!((s[40] - (d2 - d1)).abs() < 1e-12);
    }

    #[test]
    fn value_input_width_for_qpsk() {
        let dims = AgentDims::new(8, 8, &Constellation::qpsk());
        // 4·16 + 16 + 2 + |Q| with m = n = 16, |Q| = 2
        assert_eq!(dims.state_value().input_dim(), 84);
        assert_eq!(dims.actor().layers().len(), 7);
        let widths: Vec<usize> = dims.critic().layers().iter().map(|l| l.out_dim()).collect();
        assert_eq!(widths, vec![82, 64, 64, 64, 64, 64, 1]);
    }

    #[test]
    fn td_examples() {
        assert!((td_error(-0.3, -0.25, 123.0, 0.95, 4, 3) + 0.05).abs() < 1e-15);
        // -1 + 0.95³·(-0.5) + 1.4
        assert!((td_error(-1.0, -1.4, -0.5, 0.95, 4, 1) + 0.0286875).abs() < 1e-12);
        assert_eq!(td_error(-1.0, -0.5, -0.25, 1.0, 3, 0), -1.0 - 0.25 + 0.5);
    }

    #[test]
    fn uniform_cross_entropy_and_entropy() {
        assert!((cross_entropy(&[1.0, 0.0], &[0.5, 0.5]) - 2f64.ln()).abs() < 1e-15);
        let p = [0.25; 4];
        assert!((cross_entropy(&p, &p) - 4f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[1.0, 0.0], &[0.0, 1.0]).is_finite());
    }

    #[test]
    fn sample_action_modes() {
        let mut rng = stream_rng(0, 0);
        assert_eq!(sample_action(&[1.0, 0.0], &mut rng, ActionMode::Greedy), 0);
        for _ in 0..100 {
            assert_eq!(sample_action(&[1.0, 0.0], &mut rng, ActionMode::Sample), 0);
        }
        assert_eq!(sample_action(&[0.5, 0.5], &mut rng, ActionMode::Greedy), 0);
    }

    #[test]
    fn episodes_telescope() {
        let c = Constellation::qpsk();
        let sys = system(2, 2, &c, 0.7);
        let nets = AgentNets::new(AgentDims::of_system(&sys, 2), 3);
        let mut rng = stream_rng(1, 1);
        let ep = self_play_episode(&sys, &nets, &mut rng).unwrap();
        assert_eq!(ep.len(), sys.m());
        let mut prev = 0.0;
        let levels = c.pam_levels();
        let mut path = PartialPath::new();
        for t in &ep {
            let b = branch_metric_of(&sys, &path, levels[t.action]);
            assert!((t.reward - (prev - b)).abs() < 1e-9);
            assert!(t.reward <= 0.0);
            prev = t.reward;
            path.push(&sys, levels[t.action]).unwrap();
            assert_eq!(t.next_state, build_state(&sys, &path));
        }
        assert_eq!(ep.last().unwrap().reward, ep[0].episode_return);
    }

    fn branch_metric_of(sys: &RealSystem, path: &PartialPath, v: f64) -> f64 {
        crate::signal::branch_metric(sys, path, v)
    }

    #[test]
    fn forced_true_path_on_noiseless_instance() {
        let c = Constellation::bpsk();
        let sys = system(5, 3, &c, 1e-30);
        let nets = AgentNets::new(AgentDims::of_system(&sys, 3), 1);
        let truth = sys.x_true().unwrap().to_vec();
        let ep = play_episode(&sys, &nets, |_, step| c.index_of(truth[2 - step]).unwrap()).unwrap();
        assert!(ep[0].episode_return.abs() < 1e-20);
    }

    #[test]
    fn single_step_critic_loss() {
        let sys = RealSystem::from_real(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.3),
            1.0,
            Constellation::bpsk(),
        )
        .unwrap();
        let nets = AgentNets::new(AgentDims { m: 1, n: 1, n_t: 1, actions: 2 }, 7);
        let ep = play_episode(&sys, &nets, |_, _| 1).unwrap();
        let cfg = TrainConfig { reward_scale: 1.0, ..TrainConfig::for_receive_dim(1) };
        let q0 = nets.critic.predict(ep[0].state.as_slice()).unwrap()[0];
        let r = ep[0].reward;
        assert!((r + 0.49).abs() < 1e-12);
        let out = critic_loss_and_grad(&[ep], &nets, &cfg).unwrap();
        let expected = (r - q0).powi(2) + cfg.c1 * nets.critic.squared_norm();
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn worker_shares_cover_all_episodes() {
        assert_eq!(worker_shares(10, 3), vec![4, 3, 3]);
        assert_eq!(worker_shares(12, 12), vec![1; 12]);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::for_receive_dim(4);
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { gamma: 0.5, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { workers: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { snr_db: vec![], ..ok }.validate().is_err());
    }
}
