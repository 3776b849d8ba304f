//! Parameter-shared continuous actor-critic with experience replay.
//!
//! Every follower acts through one shared actor; all transitions go into one
//! replay memory. Each environment step samples a minibatch, fits the critic to
//! one-step TD targets, and regresses the actor toward the executed actions of
//! only those tuples whose TD error is strictly positive.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::environment::{
    detect_collisions, roll_action_max, speed_action_max, Action, EnvConfig, FlockEnv, Observation,
};
use crate::error::{FlockError, Result};
use crate::networks::{
    action_to_output, actor_forward, normalize_inputs, NetworkConfig, NormBounds, PolicyNet,
    PolicyNetworks,
};
use crate::nn::{AdamConfig, AdamState, Parameterized};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Training episodes `M`.
    pub episodes: usize,
    /// Steps per episode `N_s`.
    pub steps_per_episode: usize,
    /// Minibatch size `N_b`.
    pub batch_size: usize,
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    /// Replay capacity `N`.
    pub replay_capacity: usize,
    /// Tuples required in replay before the first update.
    pub warmup: usize,
    pub sigma_start: f64,
    pub sigma_end: f64,
    /// Episodes over which sigma decays exponentially from start to end.
    pub sigma_decay_episodes: usize,
    /// Write a checkpoint every this many episodes (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    /// Multiplier applied to rewards before they enter replay. Positive scaling leaves
    /// the optimal policy unchanged but keeps critic targets near unit range.
    pub reward_scale: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            episodes: 30_000,
            steps_per_episode: 60,
            batch_size: 64,
            gamma: 0.95,
            lr_actor: 1e-3,
            lr_critic: 1e-4,
            replay_capacity: 100_000,
            warmup: 64,
            sigma_start: 0.5,
            sigma_end: 0.05,
            sigma_decay_episodes: 2000,
            checkpoint_every: 1000,
            reward_scale: 1.0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(FlockError::config("trainer.gamma", "must lie in (0, 1)"));
        }
        for (field, v) in [
            ("trainer.steps_per_episode", self.steps_per_episode),
            ("trainer.batch_size", self.batch_size),
            ("trainer.replay_capacity", self.replay_capacity),
        ] {
            if v == 0 {
                return Err(FlockError::config(field, "must be positive"));
            }
        }
        if self.batch_size > self.replay_capacity {
            return Err(FlockError::config("trainer.batch_size", "must not exceed replay_capacity"));
        }
        if self.warmup < self.batch_size {
            return Err(FlockError::config("trainer.warmup", "must be at least batch_size"));
        }
        for (field, v) in [("trainer.lr_actor", self.lr_actor), ("trainer.lr_critic", self.lr_critic)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FlockError::config(field, "must be positive"));
            }
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return Err(FlockError::config("trainer.reward_scale", "must be positive"));
        }
        if !(self.sigma_start >= self.sigma_end && self.sigma_end >= 0.0) {
            return Err(FlockError::config("trainer.sigma_end", "need sigma_start >= sigma_end >= 0"));
        }
        if self.sigma_end == 0.0 && self.sigma_start > 0.0 {
            return Err(FlockError::config("trainer.sigma_end", "exponential decay needs sigma_end > 0"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> ExplorationSchedule {
        ExplorationSchedule {
            start: self.sigma_start,
            end: self.sigma_end,
            decay_episodes: self.sigma_decay_episodes,
        }
    }
}

/// Exponential annealing of the exploration std, then constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExplorationSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_episodes: usize,
}

impl ExplorationSchedule {
    /// `sigma(e) = start * (end / start)^(min(e, E) / E)`, episodes counted from 0.
    pub fn sigma(&self, episode: usize) -> f64 {
        if self.decay_episodes == 0 || episode >= self.decay_episodes || self.start == self.end {
            return self.end;
        }
        let frac = episode as f64 / self.decay_episodes as f64;
        self.start * (self.end / self.start).powf(frac)
    }
}

/// Adds Gaussian noise with std `sigma` times each component's half-range, then clamps.
pub fn explore<T: Scalar, R: Rng + ?Sized>(action: Action<T>, sigma: f64, rng: &mut R) -> Action<T> {
    if sigma == 0.0 {
        return action;
    }
    let z_r: f64 = StandardNormal.sample(rng);
    let z_v: f64 = StandardNormal.sample(rng);
    Action::new(
        action.roll + roll_action_max::<T>() * T::lit(sigma * z_r),
        action.speed + speed_action_max::<T>() * T::lit(sigma * z_v),
    )
    .clamped()
}

/// One stored transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Experience<T> {
    pub state: Observation<T>,
    pub action: Action<T>,
    pub reward: T,
    pub next_state: Observation<T>,
}

/// Fixed-capacity FIFO ring of experiences.
#[derive(Clone, Debug)]
pub struct ReplayMemory<T> {
    capacity: usize,
    items: Vec<Experience<T>>,
    /// Slot the next push overwrites once full.
    head: usize,
    pushed: u64,
}

impl<T: Scalar> ReplayMemory<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayMemory {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            head: 0,
            pushed: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total pushes over the memory's lifetime.
    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, exp: Experience<T>) {
        if self.items.len() < self.capacity {
            self.items.push(exp);
        } else {
            self.items[self.head] = exp;
            self.head = (self.head + 1) % self.capacity;
        }
        self.pushed += 1;
    }

    /// Oldest-first iteration.
    pub fn iter(&self) -> impl Iterator<Item = &Experience<T>> {
        let (newer, older) = self.items.split_at(self.head);
        older.iter().chain(newer)
    }

    pub fn get(&self, i: usize) -> Option<&Experience<T>> {
        self.items.get(i)
    }

    /// `batch` distinct slots, uniformly at random (all slots if fewer are stored).
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        index::sample(rng, self.items.len(), batch.min(self.items.len())).into_vec()
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<&Experience<T>> {
        self.sample_indices(batch, rng).into_iter().map(|i| &self.items[i]).collect()
    }
}

/// `delta = r + gamma V(s') - V(s)`.
pub fn td_error<T: Scalar>(exp: &Experience<T>, critic: &PolicyNet<T>, gamma: T, bounds: &NormBounds) -> Result<T> {
    let v = critic.forward(&normalize_inputs(&exp.state, bounds))?[0];
    let v_next = critic.forward(&normalize_inputs(&exp.next_state, bounds))?[0];
    let delta = exp.reward + gamma * v_next - v;
    if !delta.is_finite() {
        return Err(FlockError::NonFinite("TD error"));
    }
    Ok(delta)
}

/// Indices with strictly positive TD error.
pub fn positive_td_filter<T: Scalar>(deltas: &[T]) -> Vec<usize> {
    deltas
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > T::zero())
        .map(|(i, _)| i)
        .collect()
}

/// Mean squared distance between stored actions and the actor's outputs, measured in
/// the actor's tanh units (each action component divided by its half-range).
pub fn actor_loss<T: Scalar>(actor: &PolicyNet<T>, batch: &[&Experience<T>], bounds: &NormBounds) -> Result<T> {
    if batch.is_empty() {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for exp in batch {
        let out = actor.forward(&normalize_inputs(&exp.state, bounds))?;
        let target = action_to_output(&exp.action);
        total += (out[0] - target[0]).powi(2) + (out[1] - target[1]).powi(2);
    }
    Ok(total / T::lit(batch.len() as f64))
}

/// One Adam step on [`actor_loss`] over `filtered`. Returns the pre-step loss, or
/// `None` without touching the actor when `filtered` is empty.
pub fn actor_update<T: Scalar>(
    actor: &mut PolicyNet<T>,
    opt: &mut AdamState<T>,
    filtered: &[&Experience<T>],
    bounds: &NormBounds,
) -> Result<Option<T>> {
    if filtered.is_empty() {
        return Ok(None);
    }
    actor.zero_grad();
    let scale = T::one() / T::lit(filtered.len() as f64);
    let two = T::lit(2.0);
    let mut total = T::zero();
    for exp in filtered {
        let trace = actor.forward_traced(&normalize_inputs(&exp.state, bounds))?;
        let out = trace.output();
        let target = action_to_output(&exp.action);
        let diff = [out[0] - target[0], out[1] - target[1]];
        total += diff[0] * diff[0] + diff[1] * diff[1];
        actor.backward(&trace, &[two * scale * diff[0], two * scale * diff[1]])?;
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(FlockError::NonFinite("actor loss"));
    }
    opt.step(actor)?;
    Ok(Some(loss))
}

/// Outcome of one critic step: pre-step loss and the pre-step TD errors of the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticStep<T> {
    pub loss: T,
    pub deltas: Vec<T>,
}

/// One Adam step on the mean squared TD error; targets `r + gamma V(s')` are held fixed.
pub fn critic_update<T: Scalar>(
    critic: &mut PolicyNet<T>,
    opt: &mut AdamState<T>,
    batch: &[&Experience<T>],
    gamma: T,
    bounds: &NormBounds,
) -> Result<CriticStep<T>> {
    critic.zero_grad();
    if batch.is_empty() {
        return Ok(CriticStep {
            loss: T::zero(),
            deltas: Vec::new(),
        });
    }
    let scale = T::one() / T::lit(batch.len() as f64);
    let mut deltas = Vec::with_capacity(batch.len());
    let mut traces = Vec::with_capacity(batch.len());
    for exp in batch {
        let v_next = critic.forward(&normalize_inputs(&exp.next_state, bounds))?[0];
        let trace = critic.forward_traced(&normalize_inputs(&exp.state, bounds))?;
        let delta = exp.reward + gamma * v_next - trace.output()[0];
        if !delta.is_finite() {
            return Err(FlockError::NonFinite("TD error"));
        }
        deltas.push(delta);
        traces.push(trace);
    }
    let two = T::lit(2.0);
    for (trace, &delta) in traces.iter().zip(&deltas) {
        critic.backward(trace, &[-two * scale * delta])?;
    }
    let loss = deltas.iter().map(|&d| d * d).sum::<T>() * scale;
    opt.step(critic)?;
    Ok(CriticStep { loss, deltas })
}

/// Action of one follower from its own observation only.
pub fn select_action<T: Scalar, R: Rng + ?Sized>(
    actor: &PolicyNet<T>,
    obs: &Observation<T>,
    bounds: &NormBounds,
    sigma: f64,
    rng: &mut R,
) -> Result<Action<T>> {
    let greedy = actor_forward(actor, &normalize_inputs(obs, bounds))?;
    Ok(explore(greedy, sigma, rng))
}

/// Per-episode training summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub n: usize,
    /// Mean per-follower per-step reward of the episode.
    pub g_avg: f64,
    /// Percent of (step, follower pair) samples closer than the collision threshold.
    pub collision_rate: f64,
    pub sigma: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub critic_updates: usize,
    pub actor_updates: usize,
    /// Share of sampled tuples whose TD error was positive.
    pub positive_td_fraction: f64,
    pub replay_len: usize,
}

/// Derives an independent RNG seed for `(stream, index)` from a master seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) mod streams {
    pub const NETWORK_INIT: u64 = 1;
    pub const LEARNER: u64 = 2;
    pub const EPISODE_ENV: u64 = 3;
    pub const EPISODE_DISTURBANCE: u64 = 4;
    pub const EVAL_ENV: u64 = 5;
    pub const EVAL_DISTURBANCE: u64 = 6;
}

/// Training state: shared networks, optimizers, replay and RNG streams.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: TrainerConfig,
    pub env: EnvConfig,
    pub bounds: NormBounds,
    pub networks: PolicyNetworks<T>,
    pub actor_opt: AdamState<T>,
    pub critic_opt: AdamState<T>,
    pub replay: ReplayMemory<T>,
    /// Episodes completed so far.
    pub episode: usize,
    pub seed: u64,
    learner_rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainerConfig, env: EnvConfig, network: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        env.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::NETWORK_INIT, 0));
        let networks = PolicyNetworks::init(network, &mut init_rng)?;
        let actor_opt = AdamState::new(AdamConfig::with_learning_rate(config.lr_actor), &networks.actor);
        let critic_opt = AdamState::new(AdamConfig::with_learning_rate(config.lr_critic), &networks.critic);
        Ok(Trainer {
            bounds: NormBounds::from_env(&env),
            replay: ReplayMemory::new(config.replay_capacity),
            learner_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::LEARNER, 0)),
            config,
            env,
            networks,
            actor_opt,
            critic_opt,
            episode: 0,
            seed,
        })
    }

    /// Rebuilds a trainer from restored networks and optimizer state. Replay starts empty.
    pub fn restore(
        config: TrainerConfig,
        env: EnvConfig,
        networks: PolicyNetworks<T>,
        actor_opt: AdamState<T>,
        critic_opt: AdamState<T>,
        episode: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        env.validate()?;
        let mut learner_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::LEARNER, 0));
        learner_rng.set_stream(episode as u64);
        Ok(Trainer {
            bounds: NormBounds::from_env(&env),
            replay: ReplayMemory::new(config.replay_capacity),
            learner_rng,
            config,
            env,
            networks,
            actor_opt,
            critic_opt,
            episode,
            seed,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.config.schedule().sigma(self.episode)
    }

    /// Fresh environment for training episode `episode`.
    pub fn episode_env(&self, episode: usize) -> Result<FlockEnv<T>> {
        FlockEnv::new(
            self.env.clone(),
            None,
            ChaCha8Rng::seed_from_u64(derive_seed(self.seed, streams::EPISODE_ENV, episode as u64)),
            derive_seed(self.seed, streams::EPISODE_DISTURBANCE, episode as u64),
        )
    }

    /// Samples a minibatch and performs the critic update and, if any tuple has a
    /// positive TD error, the actor update.
    pub fn update(&mut self) -> Result<UpdateStats<T>> {
        let gamma = T::lit(self.config.gamma);
        let idx = self.replay.sample_indices(self.config.batch_size, &mut self.learner_rng);
        let batch: Vec<&Experience<T>> = idx.iter().map(|&i| self.replay.items.get(i).expect("sampled index")).collect();
        let critic = critic_update(
            &mut self.networks.critic,
            &mut self.critic_opt,
            &batch,
            gamma,
            &self.bounds,
        )?;
        let keep = positive_td_filter(&critic.deltas);
        let filtered: Vec<&Experience<T>> = keep.iter().map(|&k| batch[k]).collect();
        let actor_loss = actor_update(&mut self.networks.actor, &mut self.actor_opt, &filtered, &self.bounds)?;
        Ok(UpdateStats {
            critic_loss: critic.loss,
            actor_loss,
            kept: keep.len(),
            sampled: batch.len(),
        })
    }

    /// Runs one training episode.
    pub fn run_episode(&mut self) -> Result<EpisodeMetrics> {
        let sigma = self.sigma();
        let mut env = self.episode_env(self.episode)?;
        let n = env.n_followers();
        let threshold = T::lit(self.env.reward.collision_threshold);
        let scale = T::lit(self.config.reward_scale);
        let mut obs = env.observe_all();
        let mut reward_sum = 0.0;
        let mut close_pairs = 0usize;
        let mut pair_samples = 0usize;
        let (mut critic_loss, mut critic_updates) = (0.0, 0usize);
        let (mut actor_loss, mut actor_updates) = (0.0, 0usize);
        let (mut kept, mut sampled) = (0usize, 0usize);

        for _ in 0..self.config.steps_per_episode {
            let actions = obs
                .iter()
                .map(|o| select_action(&self.networks.actor, o, &self.bounds, sigma, &mut self.learner_rng))
                .collect::<Result<Vec<_>>>()?;
            let transition = env.step(&actions)?;
            let states = env.world.follower_states();
            close_pairs += detect_collisions(&states, threshold).len();
            pair_samples += n * (n - 1) / 2;
            for (((s, a), r), s_next) in obs.into_iter().zip(actions).zip(&transition.rewards).zip(&transition.observations) {
                reward_sum += r.to_f64_lossy();
                self.replay.push(Experience {
                    state: s,
                    action: a,
                    reward: *r * scale,
                    next_state: s_next.clone(),
                });
            }
            obs = transition.observations;

            if self.replay.len() >= self.config.warmup {
                let stats = self.update().map_err(|e| FlockError::Diverged {
                    episode: self.episode,
                    reason: e.to_string(),
                })?;
                critic_loss += stats.critic_loss.to_f64_lossy();
                critic_updates += 1;
                kept += stats.kept;
                sampled += stats.sampled;
                if let Some(l) = stats.actor_loss {
                    actor_loss += l.to_f64_lossy();
                    actor_updates += 1;
                }
            }
        }

        let steps = self.config.steps_per_episode;
        let metrics = EpisodeMetrics {
            episode: self.episode,
            n,
            g_avg: reward_sum / (n * steps) as f64,
            collision_rate: if pair_samples == 0 {
                0.0
            } else {
                100.0 * close_pairs as f64 / pair_samples as f64
            },
            sigma,
            critic_loss: if critic_updates > 0 { critic_loss / critic_updates as f64 } else { 0.0 },
            actor_loss: if actor_updates > 0 { actor_loss / actor_updates as f64 } else { 0.0 },
            critic_updates,
            actor_updates,
            positive_td_fraction: if sampled > 0 { kept as f64 / sampled as f64 } else { 0.0 },
            replay_len: self.replay.len(),
        };
        self.episode += 1;
        Ok(metrics)
    }

    /// Runs until `config.episodes` episodes have completed, reporting each one.
    pub fn train(&mut self, mut on_episode: impl FnMut(&EpisodeMetrics, &Self) -> Result<()>) -> Result<()> {
        while self.episode < self.config.episodes {
            let m = self.run_episode()?;
            on_episode(&m, self)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateStats<T> {
    pub critic_loss: T,
    pub actor_loss: Option<T>,
    /// Tuples that passed the positive-TD filter.
    pub kept: usize,
    pub sampled: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{JointStateE, JointStateO};
    use crate::networks::{EmbeddingConfig, Head};
    use crate::nn::Dense;

    fn obs(x: f64) -> Observation<f64> {
        let mut s = [0.0; 9];
        s[0] = x;
        s[6] = 15.0;
        Observation {
            ego: JointStateE(s),
            others: JointStateO {
                rows: vec![[x, 1.0, 0.0, 0.0, 15.0]],
            },
        }
    }

    fn exp(x: f64, reward: f64) -> Experience<f64> {
        Experience {
            state: obs(x),
            action: Action::new(0.05, -0.3),
            reward,
            next_state: obs(x + 1.0),
        }
    }

    fn small_cfg() -> NetworkConfig {
        NetworkConfig {
            embedding: EmbeddingConfig {
                conv1_filters: 4,
                conv2_filters: 4,
                se_reduction: 2,
                ..Default::default()
            },
            ego_units: 4,
            hidden_units: vec![6],
        }
    }

    fn bounds() -> NormBounds {
        NormBounds::from_env(&EnvConfig::default())
    }

    /// Critic whose output is a constant bias (all weights zero).
    fn constant_critic(value: f64) -> PolicyNet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = PolicyNet::init(&small_cfg(), Head::Critic, &mut rng).unwrap();
        net.visit_params_mut("", &mut |_, v, _| v.iter_mut().for_each(|x| *x = 0.0));
        net.head.bias[0] = value;
        net
    }

    #[test]
    fn schedule_values() {
        let s = TrainerConfig::default().schedule();
        assert_eq!(s.sigma(0), 0.5);
        assert_eq!(s.sigma(2000), 0.05);
        assert_eq!(s.sigma(25_000), 0.05);
        assert!((s.sigma(1000) - 0.5 * 0.1f64.sqrt()).abs() < 1e-12);
        assert!((s.sigma(1000) - 0.158_113_883_008_418_98).abs() < 1e-12);
        for e in 0..2500 {
            assert!(s.sigma(e + 1) <= s.sigma(e));
        }
    }

    #[test]
    fn explore_identity_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Action::new(0.1, -0.5);
        assert_eq!(explore(a, 0.0, &mut rng), a);
        for _ in 0..1000 {
            assert!(explore(a, 3.0, &mut rng).in_bounds());
        }
    }

    #[test]
    fn td_error_arithmetic() {
        // V(s) = V(s') = c for a constant critic; check each example through the formula.
        let b = bounds();
        let critic = constant_critic(0.0);
        assert_eq!(td_error(&exp(1.0, 0.0), &critic, 0.95, &b).unwrap(), 0.0);
        let critic = constant_critic(-10.0);
        let d = td_error(&exp(1.0, -5.0), &critic, 0.95, &b).unwrap();
        assert!((d - (-5.0 + 0.95 * -10.0 + 10.0)).abs() < 1e-12);
        let d0 = td_error(&exp(1.0, -5.0), &critic, 0.0, &b).unwrap();
        assert!((d0 - (-5.0 + 10.0)).abs() < 1e-12);
    }

    #[test]
    fn td_error_mixed_values() {
        // r = -5, gamma = 0.95, V(s') = -10, V(s) = -12 -> -2.5, with V given by a
        // critic that reads the first ego input: V = 65 * w * s1_norm.
        let mut critic = constant_critic(0.0);
        critic.ego.weights.set(0, 0, 1.0);
        critic.hidden[0].weights.set(0, 0, 1.0);
        // V(s) = 65 * (s1 / 65) - 22 = s1 - 22 for s1 >= 0.
        critic.head.weights.set(0, 0, 65.0);
        critic.head.bias[0] = -22.0;
        let e = Experience {
            state: obs(10.0),
            action: Action::default(),
            reward: -5.0,
            next_state: obs(12.0),
        };
        let d = td_error(&e, &critic, 0.95, &bounds()).unwrap();
        assert!((d - (-2.5)).abs() < 1e-9, "{d}");
    }

    #[test]
    fn filter_is_strict() {
        assert_eq!(positive_td_filter(&[0.5, -0.2, 0.0]), vec![0]);
        assert!(positive_td_filter(&[-1.0, -0.1]).is_empty());
        assert_eq!(positive_td_filter(&[1.0, 2.0, 3.0]), vec![0, 1, 2]);
    }

    #[test]
    fn empty_filter_skips_actor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut actor = PolicyNet::<f64>::init(&small_cfg(), Head::Actor, &mut rng).unwrap();
        let mut opt = AdamState::new(AdamConfig::with_learning_rate(1e-3), &actor);
        let before = actor.clone();
        assert_eq!(actor_update(&mut actor, &mut opt, &[], &bounds()).unwrap(), None);
        assert_eq!(actor, before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn actor_at_target_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut actor = PolicyNet::<f64>::init(&small_cfg(), Head::Actor, &mut rng).unwrap();
        let b = bounds();
        let mut e = exp(3.0, -1.0);
        e.action = actor_forward(&actor, &normalize_inputs(&e.state, &b)).unwrap();
        let mut opt = AdamState::new(AdamConfig::with_learning_rate(1e-3), &actor);
        let before = actor.clone();
        let loss = actor_update(&mut actor, &mut opt, &[&e], &b).unwrap().unwrap();
        assert!(loss < 1e-28);
        let mut max_grad: f64 = 0.0;
        actor.visit_params_mut("", &mut |_, _, g| g.iter().for_each(|x| max_grad = max_grad.max(x.abs())));
        assert!(max_grad < 1e-12);
        let mut drift: f64 = 0.0;
        let mut a = Vec::new();
        before.visit_params("", &mut |_, _, v| a.extend_from_slice(v));
        let mut i = 0;
        actor.visit_params("", &mut |_, _, v| {
            for x in v {
                drift = drift.max((x - a[i]).abs());
                i += 1;
            }
        });
        assert!(drift < 1e-6);
    }

    #[test]
    fn actor_gradient_matches_hand_derivation() {
        // Single tuple, actor whose only live path is the head bias of the roll output:
        // out0 = tanh(b), loss = (tanh(b) - t0)^2 + (tanh(0) - t1)^2,
        // dloss/db = 2 (tanh(b) - t0) (1 - tanh(b)^2).
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut actor = PolicyNet::<f64>::init(&small_cfg(), Head::Actor, &mut rng).unwrap();
        actor.visit_params_mut("", &mut |_, v, _| v.iter_mut().for_each(|x| *x = 0.0));
        let b0 = 0.3;
        actor.head.bias[0] = b0;
        let e = exp(2.0, -1.0);
        let t0 = action_to_output(&e.action)[0];
        let mut opt = AdamState::new(AdamConfig::with_learning_rate(1e-3), &actor);
        actor_update(&mut actor, &mut opt, &[&e], &bounds()).unwrap();
        let expected = 2.0 * (b0.tanh() - t0) * (1.0 - b0.tanh().powi(2));
        assert!((actor.head.grad_bias[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn actor_loss_decreases_on_frozen_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut actor = PolicyNet::<f64>::init(&small_cfg(), Head::Actor, &mut rng).unwrap();
        let mut opt = AdamState::new(AdamConfig::with_learning_rate(1e-2), &actor);
        let batch: Vec<Experience<f64>> = (0..8).map(|i| exp(i as f64 * 7.0, -1.0)).collect();
        let refs: Vec<&Experience<f64>> = batch.iter().collect();
        let b = bounds();
        let first = actor_loss(&actor, &refs, &b).unwrap();
        for _ in 0..200 {
            actor_update(&mut actor, &mut opt, &refs, &b).unwrap();
        }
        let last = actor_loss(&actor, &refs, &b).unwrap();
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn critic_zero_delta_is_noop() {
        let mut critic = constant_critic(0.0);
        let mut opt = AdamState::new(AdamConfig::with_learning_rate(1e-3), &critic);
        let before = critic.clone();
        let e = exp(1.0, 0.0);
        let step = critic_update(&mut critic, &mut opt, &[&e, &e], 0.95, &bounds()).unwrap();
        assert_eq!(step.loss, 0.0);
        assert_eq!(critic.ego, before.ego);
        assert_eq!(critic.head.weights, before.head.weights);
        assert_eq!(critic.head.bias, before.head.bias);
    }

    #[test]
    fn critic_converges_to_geometric_fixed_point() {
        // Single state looping to itself with constant reward r: V* = r / (1 - gamma).
        let mut critic = constant_critic(0.0);
        let mut opt = AdamState::new(AdamConfig::with_learning_rate(0.05), &critic);
        let gamma = 0.9;
        let r = -1.0;
        let e = Experience {
            state: obs(5.0),
            action: Action::default(),
            reward: r,
            next_state: obs(5.0),
        };
        let b = bounds();
        for _ in 0..6000 {
            critic_update(&mut critic, &mut opt, &[&e], gamma, &b).unwrap();
        }
        let v = critic.forward(&normalize_inputs(&e.state, &b)).unwrap()[0];
        let target = r / (1.0 - gamma);
        assert!((v - target).abs() < 0.01 * target.abs(), "{v} vs {target}");
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut critic = PolicyNet::<f64>::init(&small_cfg(), Head::Critic, &mut rng).unwrap();
        let b = bounds();
        let batch = [exp(20.0, -3.0), exp(45.0, -0.5)];
        let refs: Vec<&Experience<f64>> = batch.iter().collect();
        let gamma = 0.95;
        // Targets are constants computed from the current parameters.
        let targets: Vec<f64> = refs
            .iter()
            .map(|e| e.reward + gamma * critic.forward(&normalize_inputs(&e.next_state, &b)).unwrap()[0])
            .collect();
        let loss = |c: &PolicyNet<f64>| {
            refs.iter()
                .zip(&targets)
                .map(|(e, y)| (y - c.forward(&normalize_inputs(&e.state, &b)).unwrap()[0]).powi(2))
                .sum::<f64>()
                / refs.len() as f64
        };
        let mut opt = AdamState::new(AdamConfig::with_learning_rate(1e-9), &critic);
        let probe = critic.clone();
        critic_update(&mut critic, &mut opt, &refs, gamma, &b).unwrap();
        let h = 1e-5;
        let check = |layer: &Dense<f64>, pick: fn(&mut PolicyNet<f64>) -> &mut Dense<f64>| {
            for i in 0..layer.weights.data().len() {
                let mut p = probe.clone();
                let w0 = pick(&mut p).weights.data()[i];
                pick(&mut p).weights.data_mut()[i] = w0 + h;
                let lp = loss(&p);
                pick(&mut p).weights.data_mut()[i] = w0 - h;
                let lm = loss(&p);
                let num = (lp - lm) / (2.0 * h);
                let a = layer.grad_weights.data()[i];
                assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-6) < 1e-4, "{a} vs {num}");
            }
        };
        check(&critic.head, |n| &mut n.head);
        check(&critic.ego, |n| &mut n.ego);
        check(&critic.embedding.conv1.kernel, |n| &mut n.embedding.conv1.kernel);
    }

    #[test]
    fn replay_fifo_and_capacity() {
        let mut mem = ReplayMemory::new(3);
        for i in 0..5 {
            mem.push(exp(i as f64, -(i as f64)));
            assert!(mem.len() <= 3);
        }
        let rewards: Vec<f64> = mem.iter().map(|e| e.reward).collect();
        assert_eq!(rewards, vec![-2.0, -3.0, -4.0]);
        assert_eq!(mem.total_pushed(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut idx = mem.sample_indices(3, &mut rng);
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn update_touches_only_its_network() {
        let env = EnvConfig {
            flock: crate::environment::FlockConfig {
                n_min: 3,
                n_max: 3,
                ..Default::default()
            },
            ..Default::default()
        };
        let cfg = TrainerConfig {
            episodes: 1,
            steps_per_episode: 5,
            batch_size: 8,
            warmup: 8,
            ..Default::default()
        };
        let mut t = Trainer::<f64>::new(cfg, env, &small_cfg(), 11).unwrap();
        t.run_episode().unwrap();
        let actor_before = t.networks.actor.clone();
        let critic_before = t.networks.critic.clone();
        // Critic update alone leaves the actor untouched.
        let batch: Vec<Experience<f64>> = t.replay.iter().take(8).cloned().collect();
        let refs: Vec<&Experience<f64>> = batch.iter().collect();
        let b = t.bounds;
        critic_update(&mut t.networks.critic, &mut t.critic_opt, &refs, 0.95, &b).unwrap();
        assert_eq!(t.networks.actor.ego.weights, actor_before.ego.weights);
        assert_ne!(t.networks.critic.ego.weights, critic_before.ego.weights);
        let critic_mid = t.networks.critic.clone();
        actor_update(&mut t.networks.actor, &mut t.actor_opt, &refs, &b).unwrap();
        assert_eq!(t.networks.critic.ego.weights, critic_mid.ego.weights);
        assert_eq!(t.networks.critic.head.bias, critic_mid.head.bias);
    }

    #[test]
    fn training_is_deterministic() {
        let env = EnvConfig {
            flock: crate::environment::FlockConfig {
                n_min: 2,
                n_max: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let cfg = TrainerConfig {
            episodes: 3,
            steps_per_episode: 10,
            batch_size: 16,
            warmup: 16,
            ..Default::default()
        };
        let run = || {
            let mut t = Trainer::<f64>::new(cfg.clone(), env.clone(), &small_cfg(), 42).unwrap();
            let mut out = Vec::new();
            t.train(|m, _| {
                out.push(m.clone());
                Ok(())
            })
            .unwrap();
            out
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), 3);
        assert_eq!(a, b);
    }
}
