//! The flocking MDP: state encodings, action maps, rewards and the episode world.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlockError, Result};
use crate::kinematics::{self, DisturbanceConfig, DisturbanceModel, KinematicsConfig, UavState};
use crate::scalar::{wrap_angle, Scalar};

/// Spawn attempts per follower before giving up.
pub const SPAWN_TRIES: usize = 1000;

/// Minimum spawn separation, as a multiple of the collision threshold.
pub const SPAWN_SPACING_FACTOR: f64 = 5.0;

/// Largest roll increment an action may request, `pi/18`.
pub fn roll_action_max<T: Scalar>() -> T {
    T::PI() / T::lit(18.0)
}

/// Largest speed increment an action may request, 1 m/s.
pub fn speed_action_max<T: Scalar>() -> T {
    T::one()
}

/// Ego-follower / leader joint state, components `s1..s9`.
///
/// `[rel_x, rel_y, heading_diff, ego_roll, leader_roll, leader_roll_cmd,
///   ego_speed, leader_speed, leader_speed_cmd]`, with the relative position
/// expressed in the leader's body frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JointStateE<T>(pub [T; 9]);

impl<T: Scalar> JointStateE<T> {
    pub fn distance(&self) -> T {
        self.0[0].hypot(self.0[1])
    }

    pub fn heading_diff(&self) -> T {
        self.0[2]
    }
}

/// Ego-follower / other-follower joint state: one 5-vector row per other follower,
/// `[rel_x, rel_y, heading_diff, roll, speed]` in the ego frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JointStateO<T> {
    pub rows: Vec<[T; 5]>,
}

impl<T: Scalar> JointStateO<T> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// What a single follower perceives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Observation<T> {
    pub ego: JointStateE<T>,
    pub others: JointStateO<T>,
}

/// Roll and speed increments.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Action<T> {
    pub roll: T,
    pub speed: T,
}

impl<T: Scalar> Action<T> {
    pub fn new(roll: T, speed: T) -> Self {
        Action { roll, speed }
    }

    pub fn in_bounds(&self) -> bool {
        self.roll.abs() <= roll_action_max() && self.speed.abs() <= speed_action_max()
    }

    /// Clamps both components to the action box.
    pub fn clamped(self) -> Self {
        let r = roll_action_max::<T>();
        let s = speed_action_max::<T>();
        Action {
            roll: self.roll.clamp_to(-r, r),
            speed: self.speed.clamp_to(-s, s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Inner radius of the desired annulus, m.
    pub d1: f64,
    /// Outer radius of the desired annulus, m.
    pub d2: f64,
    pub omega: f64,
    pub m: f64,
    /// Separation below which two followers count as colliding, m.
    pub collision_threshold: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            d1: 40.0,
            d2: 65.0,
            omega: 0.05,
            m: 2.0,
            collision_threshold: 2.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d1 > 0.0 && self.d1 < self.d2 && self.d2.is_finite()) {
            return Err(FlockError::config("reward.d1", "need 0 < d1 < d2"));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(FlockError::config("reward.omega", "must be positive"));
        }
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(FlockError::config("reward.m", "must be positive"));
        }
        if !(self.collision_threshold > 0.0 && self.collision_threshold < self.d1) {
            return Err(FlockError::config(
                "reward.collision_threshold",
                "must lie in (0, d1)",
            ));
        }
        Ok(())
    }
}

/// How the leader picks its setpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LeaderPolicy {
    /// Uniformly random actions from the action box.
    Random,
    /// Proportional heading control through a cyclic waypoint list.
    Waypoints {
        waypoints: Vec<[f64; 2]>,
        /// Roll command per radian of heading error.
        heading_gain: f64,
        /// Distance at which a waypoint counts as reached, m.
        capture_radius: f64,
        cruise_speed: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlockConfig {
    pub n_min: usize,
    pub n_max: usize,
    /// Spawn annulus around the leader, m.
    pub spawn_inner: f64,
    pub spawn_outer: f64,
    pub leader: LeaderPolicy,
}

impl Default for FlockConfig {
    fn default() -> Self {
        FlockConfig {
            n_min: 3,
            n_max: 10,
            spawn_inner: 40.0,
            spawn_outer: 65.0,
            leader: LeaderPolicy::Random,
        }
    }
}

impl FlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_min < 1 || self.n_min > self.n_max {
            return Err(FlockError::config("flock.n_min", "need 1 <= n_min <= n_max"));
        }
        if !(self.spawn_inner > 0.0 && self.spawn_inner <= self.spawn_outer) {
            return Err(FlockError::config(
                "flock.spawn_inner",
                "need 0 < spawn_inner <= spawn_outer",
            ));
        }
        if let LeaderPolicy::Waypoints {
            waypoints,
            heading_gain,
            capture_radius,
            ..
        } = &self.leader
        {
            if waypoints.is_empty() {
                return Err(FlockError::config("flock.leader.waypoints", "must not be empty"));
            }
            if !(*heading_gain > 0.0 && *capture_radius > 0.0) {
                return Err(FlockError::config(
                    "flock.leader",
                    "heading_gain and capture_radius must be positive",
                ));
            }
        }
        Ok(())
    }
}

/// Everything needed to simulate one episode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnvConfig {
    pub kinematics: KinematicsConfig,
    pub disturbance: DisturbanceConfig,
    pub reward: RewardConfig,
    pub flock: FlockConfig,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.kinematics.validate()?;
        self.disturbance.validate()?;
        self.reward.validate()?;
        self.flock.validate()
    }
}

/// Encodes the follower's pose relative to the leader, in the leader's frame.
pub fn encode_joint_e<T: Scalar>(
    ego: &UavState<T>,
    leader: &UavState<T>,
    leader_setpoints: (T, T),
) -> JointStateE<T> {
    let (sin_l, cos_l) = leader.psi.sin_cos();
    let dx = ego.x - leader.x;
    let dy = ego.y - leader.y;
    JointStateE([
        cos_l * dx + sin_l * dy,
        -sin_l * dx + cos_l * dy,
        wrap_angle(ego.psi - leader.psi),
        ego.phi,
        leader.phi,
        leader_setpoints.0,
        ego.v,
        leader.v,
        leader_setpoints.1,
    ])
}

/// Encodes the other followers relative to the ego, one row each, in the given order.
pub fn encode_joint_o<'a, T: Scalar>(
    ego: &UavState<T>,
    others: impl IntoIterator<Item = &'a UavState<T>>,
) -> JointStateO<T> {
    let (sin_e, cos_e) = ego.psi.sin_cos();
    let rows = others
        .into_iter()
        .map(|o| {
            let dx = o.x - ego.x;
            let dy = o.y - ego.y;
            [
                cos_e * dx + sin_e * dy,
                -sin_e * dx + cos_e * dy,
                wrap_angle(o.psi - ego.psi),
                o.phi,
                o.v,
            ]
        })
        .collect();
    JointStateO { rows }
}

/// Next roll setpoint `phi + a_r`, saturated at `+-roll_limit`.
pub fn apply_roll_action<T: Scalar>(phi: T, a_r: T, roll_limit: T) -> Result<T> {
    let max = roll_action_max::<T>();
    if !(a_r.abs() <= max) {
        return Err(FlockError::ActionOutOfRange {
            name: "roll",
            value: a_r.to_f64_lossy(),
            lo: -max.to_f64_lossy(),
            hi: max.to_f64_lossy(),
        });
    }
    let target = phi + a_r;
    Ok(if target > roll_limit {
        roll_limit
    } else if target < -roll_limit {
        -roll_limit
    } else {
        target
    })
}

/// Next airspeed setpoint `v + a_v`, saturated to `[v_min, v_max]`.
pub fn apply_velocity_action<T: Scalar>(v: T, a_v: T, v_min: T, v_max: T) -> Result<T> {
    let max = speed_action_max::<T>();
    if !(a_v.abs() <= max) {
        return Err(FlockError::ActionOutOfRange {
            name: "speed",
            value: a_v.to_f64_lossy(),
            lo: -max.to_f64_lossy(),
            hi: max.to_f64_lossy(),
        });
    }
    let target = v + a_v;
    Ok(if target > v_max {
        v_max
    } else if target < v_min {
        v_min
    } else {
        target
    })
}

/// Annulus deviation `d_e = max{m(d1 - rho), 0, rho - d2}`.
pub fn annulus_deviation<T: Scalar>(rho: T, cfg: &RewardConfig) -> T {
    let inner = T::lit(cfg.m) * (T::lit(cfg.d1) - rho);
    let outer = rho - T::lit(cfg.d2);
    inner.max(T::zero()).max(outer)
}

/// Leader-tracking term; zero only inside the annulus with matched heading.
pub fn flocking_reward<T: Scalar>(se: &JointStateE<T>, cfg: &RewardConfig) -> T {
    let d_e = annulus_deviation(se.distance(), cfg);
    let heading = T::lit(cfg.d1) * se.heading_diff().abs()
        / (T::PI() * (T::one() + T::lit(cfg.omega) * d_e));
    -d_e.max(heading)
}

/// Proximity penalty for one other-follower row.
pub fn collision_penalty<T: Scalar>(row: &[T; 5], cfg: &RewardConfig) -> T {
    let rho = row[0].hypot(row[1]);
    -(T::lit(cfg.m) * (T::lit(cfg.d1) - rho)).max(T::zero())
}

pub fn total_reward<T: Scalar>(se: &JointStateE<T>, so: &JointStateO<T>, cfg: &RewardConfig) -> T {
    so.rows
        .iter()
        .fold(flocking_reward(se, cfg), |acc, row| acc + collision_penalty(row, cfg))
}

/// All unordered pairs `(i, j)`, `i < j`, closer than `threshold`.
pub fn detect_collisions<T: Scalar>(followers: &[UavState<T>], threshold: T) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..followers.len() {
        for j in (i + 1)..followers.len() {
            if followers[i].distance_to(&followers[j]) < threshold {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Uniform sample from the action box.
pub fn sample_action<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> Action<T> {
    let u_r: f64 = rng.random_range(-1.0..=1.0);
    let u_v: f64 = rng.random_range(-1.0..=1.0);
    Action::new(roll_action_max::<T>() * T::lit(u_r), speed_action_max::<T>() * T::lit(u_v))
}

/// Scripted-leader progress through its waypoint list.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LeaderCursor {
    pub waypoint: usize,
}

/// Chooses the leader's next `(phi_d, v_d)`.
pub fn leader_step<T: Scalar, R: Rng + ?Sized>(
    policy: &LeaderPolicy,
    leader: &UavState<T>,
    cursor: &mut LeaderCursor,
    kin: &KinematicsConfig,
    rng: &mut R,
) -> Result<(T, T)> {
    let action = match policy {
        LeaderPolicy::Random => sample_action(rng),
        LeaderPolicy::Waypoints {
            waypoints,
            heading_gain,
            capture_radius,
            cruise_speed,
        } => {
            if waypoints.is_empty() {
                return Err(FlockError::EmptyWaypoints);
            }
            let idx = cursor.waypoint % waypoints.len();
            let [wx, wy] = waypoints[idx];
            let (dx, dy) = (T::lit(wx) - leader.x, T::lit(wy) - leader.y);
            if dx.hypot(dy) < T::lit(*capture_radius) {
                cursor.waypoint = (idx + 1) % waypoints.len();
            }
            let [wx, wy] = waypoints[cursor.waypoint % waypoints.len()];
            let bearing = (T::lit(wy) - leader.y).atan2(T::lit(wx) - leader.x);
            let err = wrap_angle(bearing - leader.psi);
            // Positive roll turns toward decreasing heading.
            let roll_limit = T::lit(kin.roll_limit);
            let desired = (-T::lit(*heading_gain) * err).clamp_to(-roll_limit, roll_limit);
            Action::new(desired - leader.phi, T::lit(*cruise_speed) - leader.v).clamped()
        }
    };
    Ok((
        apply_roll_action(leader.phi, action.roll, T::lit(kin.roll_limit))?,
        apply_velocity_action(leader.v, action.speed, T::lit(kin.v_min), T::lit(kin.v_max))?,
    ))
}

/// A follower and its stable identifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Follower<T> {
    pub id: usize,
    pub state: UavState<T>,
}

/// Leader plus followers at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct World<T> {
    pub leader: UavState<T>,
    /// Setpoints the leader is currently tracking.
    pub leader_command: (T, T),
    pub leader_cursor: LeaderCursor,
    pub followers: Vec<Follower<T>>,
    next_id: usize,
}

impl<T: Scalar> World<T> {
    pub fn follower_states(&self) -> Vec<UavState<T>> {
        self.followers.iter().map(|f| f.state).collect()
    }

    /// Observation of follower `index` (position in `followers`).
    pub fn observe(&self, index: usize) -> Observation<T> {
        let ego = &self.followers[index].state;
        Observation {
            ego: encode_joint_e(ego, &self.leader, self.leader_command),
            others: encode_joint_o(
                ego,
                self.followers
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != index)
                    .map(|(_, f)| &f.state),
            ),
        }
    }

    pub fn observe_all(&self) -> Vec<Observation<T>> {
        (0..self.followers.len()).map(|i| self.observe(i)).collect()
    }

    /// Adds `count` followers on the outer edge of the spawn annulus.
    pub fn add_followers<R: Rng + ?Sized>(&mut self, cfg: &EnvConfig, count: usize, rng: &mut R) -> Result<()> {
        let radius = cfg.flock.spawn_outer;
        for _ in 0..count {
            let state = self.place_follower(cfg, radius, radius, rng)?;
            self.push_follower(state);
        }
        Ok(())
    }

    fn push_follower(&mut self, state: UavState<T>) {
        self.followers.push(Follower { id: self.next_id, state });
        self.next_id += 1;
    }

    fn place_follower<R: Rng + ?Sized>(
        &self,
        cfg: &EnvConfig,
        inner: f64,
        outer: f64,
        rng: &mut R,
    ) -> Result<UavState<T>> {
        let spacing = cfg.reward.collision_threshold * SPAWN_SPACING_FACTOR;
        let kin = &cfg.kinematics;
        for _ in 0..SPAWN_TRIES {
            // Uniform in area over the annulus.
            let r2: f64 = rng.random_range(inner * inner..=outer * outer);
            let bearing: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let x = self.leader.x.to_f64_lossy() + r2.sqrt() * bearing.cos();
            let y = self.leader.y.to_f64_lossy() + r2.sqrt() * bearing.sin();
            let clear = self.followers.iter().all(|f| {
                (f.state.x.to_f64_lossy() - x).hypot(f.state.y.to_f64_lossy() - y) >= spacing
            });
            let heading: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let v: f64 = rng.random_range(kin.v_min..=kin.v_max);
            if clear {
                return Ok(UavState::new(T::lit(x), T::lit(y), T::lit(heading), T::zero(), T::lit(v)));
            }
        }
        Err(FlockError::SpawnFailed {
            index: self.followers.len(),
            tries: SPAWN_TRIES,
        })
    }
}

/// Builds a fresh world with `n` followers, or `n ~ U{n_min..n_max}` when `n` is `None`.
pub fn reset_episode<T: Scalar, R: Rng + ?Sized>(
    cfg: &EnvConfig,
    n: Option<usize>,
    rng: &mut R,
) -> Result<World<T>> {
    let kin = &cfg.kinematics;
    let n = match n {
        Some(n) => n,
        None => rng.random_range(cfg.flock.n_min..=cfg.flock.n_max),
    };
    let heading: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let v: f64 = rng.random_range(kin.v_min..=kin.v_max);
    let leader = UavState::new(T::zero(), T::zero(), T::lit(heading), T::zero(), T::lit(v));
    let mut world = World {
        leader,
        leader_command: (T::zero(), leader.v),
        leader_cursor: LeaderCursor::default(),
        followers: Vec::with_capacity(n),
        next_id: 0,
    };
    world.leader_command = leader_step(&cfg.flock.leader, &leader, &mut world.leader_cursor, kin, rng)?;
    for _ in 0..n {
        let state = world.place_follower(cfg, cfg.flock.spawn_inner, cfg.flock.spawn_outer, rng)?;
        world.push_follower(state);
    }
    Ok(world)
}

/// Result of advancing the world by one control period.
#[derive(Clone, Debug)]
pub struct Transition<T> {
    /// Post-step observation per follower, in follower order.
    pub observations: Vec<Observation<T>>,
    pub rewards: Vec<T>,
}

/// One episode's simulator: world, spawn/leader RNG and disturbance stream.
#[derive(Clone, Debug)]
pub struct FlockEnv<T> {
    pub cfg: EnvConfig,
    pub world: World<T>,
    rng: ChaCha8Rng,
    disturbance: DisturbanceModel,
}

impl<T: Scalar> FlockEnv<T> {
    /// Starts an episode. `rng` drives spawning and the leader; `disturbance_seed` the noise.
    pub fn new(cfg: EnvConfig, n: Option<usize>, mut rng: ChaCha8Rng, disturbance_seed: u64) -> Result<Self> {
        let world = reset_episode(&cfg, n, &mut rng)?;
        let disturbance = DisturbanceModel::new(&cfg.disturbance, disturbance_seed);
        Ok(FlockEnv {
            cfg,
            world,
            rng,
            disturbance,
        })
    }

    pub fn n_followers(&self) -> usize {
        self.world.followers.len()
    }

    pub fn observe_all(&self) -> Vec<Observation<T>> {
        self.world.observe_all()
    }

    pub fn add_followers(&mut self, count: usize) -> Result<()> {
        let cfg = self.cfg.clone();
        self.world.add_followers(&cfg, count, &mut self.rng)
    }

    /// Applies one action per follower, integrates every aircraft, then has the
    /// leader pick its next command and scores the resulting observations.
    pub fn step(&mut self, actions: &[Action<T>]) -> Result<Transition<T>> {
        if actions.len() != self.world.followers.len() {
            return Err(FlockError::Shape {
                context: "actions per follower",
                expected: self.world.followers.len(),
                actual: actions.len(),
            });
        }
        let kin = &self.cfg.kinematics;
        let roll_limit = T::lit(kin.roll_limit);
        let (v_min, v_max) = (T::lit(kin.v_min), T::lit(kin.v_max));

        let mut setpoints = Vec::with_capacity(actions.len());
        for (f, a) in self.world.followers.iter().zip(actions) {
            setpoints.push((
                apply_roll_action(f.state.phi, a.roll, roll_limit)?,
                apply_velocity_action(f.state.v, a.speed, v_min, v_max)?,
            ));
        }

        let (phi_l, v_l) = self.world.leader_command;
        self.world.leader = kinematics::step(kin, &self.world.leader, phi_l, v_l, &mut self.disturbance);
        for (f, &(phi_d, v_d)) in self.world.followers.iter_mut().zip(&setpoints) {
            f.state = kinematics::step(kin, &f.state, phi_d, v_d, &mut self.disturbance);
        }
        self.world.leader_command = leader_step(
            &self.cfg.flock.leader,
            &self.world.leader,
            &mut self.world.leader_cursor,
            kin,
            &mut self.rng,
        )?;

        let observations = self.world.observe_all();
        let rewards = observations
            .iter()
            .map(|o| total_reward(&o.ego, &o.others, &self.cfg.reward))
            .collect();
        Ok(Transition { observations, rewards })
    }
}
