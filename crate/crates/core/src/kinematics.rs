//! Planar fixed-wing kinematics with roll/airspeed setpoint tracking.
//!
//! The state evolves as
//!
//! ```text
//! x'   = v cos(psi) + eta_x
//! y'   = v sin(psi) + eta_y
//! psi' = -(g / v) tan(phi) + eta_psi
//! phi' = f_phi(phi, phi_d)
//! v'   = f_v(v, v_d)
//! ```
//!
//! where `f_phi` and `f_v` are rate-limited first-order lags toward the
//! commanded setpoints. One call to [`step`] advances a full control period
//! with explicit Euler sub-steps; the disturbance vector is drawn once per
//! control period and held across the sub-steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FlockError, Result};
use crate::scalar::{wrap_angle, Scalar};

/// Pose and airspeed of one aircraft.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UavState<T> {
    pub x: T,
    pub y: T,
    /// Heading, kept in `[-pi, pi)`.
    pub psi: T,
    /// Roll angle.
    pub phi: T,
    /// Airspeed.
    pub v: T,
}

impl<T: Scalar> UavState<T> {
    pub fn new(x: T, y: T, psi: T, phi: T, v: T) -> Self {
        UavState {
            x,
            y,
            psi: wrap_angle(psi),
            phi,
            v,
        }
    }

    pub fn distance_to(&self, other: &Self) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn cast<U: Scalar>(&self) -> UavState<U> {
        UavState {
            x: U::lit(self.x.to_f64_lossy()),
            y: U::lit(self.y.to_f64_lossy()),
            psi: U::lit(self.psi.to_f64_lossy()),
            phi: U::lit(self.phi.to_f64_lossy()),
            v: U::lit(self.v.to_f64_lossy()),
        }
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.psi.is_finite()
            && self.phi.is_finite()
            && self.v.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KinematicsConfig {
    /// Gravitational acceleration, m/s^2.
    pub gravity: f64,
    /// Roll response time constant, s.
    pub tau_roll: f64,
    /// Airspeed response time constant, s.
    pub tau_speed: f64,
    /// Roll rate limit, rad/s.
    pub roll_rate_max: f64,
    /// Longitudinal acceleration limit, m/s^2.
    pub accel_max: f64,
    /// Euler sub-step, s.
    pub dt: f64,
    /// Duration of one control step, s. Must be a whole number of sub-steps.
    pub control_period: f64,
    /// Roll setpoint bound `r_bd`, rad.
    pub roll_limit: f64,
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for KinematicsConfig {
    fn default() -> Self {
        KinematicsConfig {
            gravity: 9.8,
            tau_roll: 0.5,
            tau_speed: 1.0,
            roll_rate_max: std::f64::consts::FRAC_PI_6,
            accel_max: 2.0,
            dt: 0.1,
            control_period: 1.0,
            roll_limit: std::f64::consts::FRAC_PI_6,
            v_min: 12.0,
            v_max: 18.0,
        }
    }
}

impl KinematicsConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("kinematics.gravity", self.gravity),
            ("kinematics.tau_roll", self.tau_roll),
            ("kinematics.tau_speed", self.tau_speed),
            ("kinematics.roll_rate_max", self.roll_rate_max),
            ("kinematics.accel_max", self.accel_max),
            ("kinematics.dt", self.dt),
            ("kinematics.control_period", self.control_period),
            ("kinematics.roll_limit", self.roll_limit),
            ("kinematics.v_min", self.v_min),
        ];
        for (field, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(FlockError::config(field, format!("must be positive, got {value}")));
            }
        }
        if !(self.v_max.is_finite() && self.v_max > self.v_min) {
            return Err(FlockError::config("kinematics.v_max", "must exceed v_min"));
        }
        let ratio = self.control_period / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(FlockError::config(
                "kinematics.control_period",
                format!("must be an integer multiple of dt = {}", self.dt),
            ));
        }
        if self.dt > self.tau_roll || self.dt > self.tau_speed {
            return Err(FlockError::config(
                "kinematics.dt",
                "must not exceed the roll and speed time constants",
            ));
        }
        Ok(())
    }

    pub fn substeps(&self) -> usize {
        (self.control_period / self.dt).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceConfig {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_psi: f64,
    pub enabled: bool,
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        DisturbanceConfig {
            sigma_x: 0.5,
            sigma_y: 0.5,
            sigma_psi: 0.05,
            enabled: true,
        }
    }
}

impl DisturbanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("disturbance.sigma_x", self.sigma_x),
            ("disturbance.sigma_y", self.sigma_y),
            ("disturbance.sigma_psi", self.sigma_psi),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(FlockError::config(field, "must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn none() -> Self {
        DisturbanceConfig {
            sigma_x: 0.0,
            sigma_y: 0.0,
            sigma_psi: 0.0,
            enabled: false,
        }
    }
}

/// Gaussian disturbance source with its own RNG stream.
#[derive(Clone, Debug)]
pub struct DisturbanceModel {
    sigma: [f64; 3],
    rng: ChaCha8Rng,
}

impl DisturbanceModel {
    pub fn new(cfg: &DisturbanceConfig, seed: u64) -> Self {
        let sigma = if cfg.enabled {
            [cfg.sigma_x, cfg.sigma_y, cfg.sigma_psi]
        } else {
            [0.0; 3]
        };
        DisturbanceModel {
            sigma,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A model that always returns zero.
    pub fn disabled() -> Self {
        Self::new(&DisturbanceConfig::none(), 0)
    }

    pub fn is_zero(&self) -> bool {
        self.sigma.iter().all(|&s| s == 0.0)
    }

    /// Draws `(eta_x, eta_y, eta_psi)`. Does not touch the RNG when all sigmas are zero.
    pub fn sample<T: Scalar>(&mut self) -> [T; 3] {
        if self.is_zero() {
            return [T::zero(); 3];
        }
        let mut eta = [T::zero(); 3];
        for (e, &s) in eta.iter_mut().zip(&self.sigma) {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            *e = T::lit(z * s);
        }
        eta
    }
}

#[inline]
fn symmetric_clamp<T: Scalar>(x: T, bound: T) -> T {
    x.clamp_to(-bound, bound)
}

/// Time derivative `(x', y', psi', phi', v')` of the state under the given setpoints and disturbance.
pub fn derivative<T: Scalar>(
    cfg: &KinematicsConfig,
    state: &UavState<T>,
    phi_d: T,
    v_d: T,
    eta: [T; 3],
) -> Result<[T; 5]> {
    if state.v == T::zero() {
        return Err(FlockError::ZeroAirspeed);
    }
    let (sin_psi, cos_psi) = state.psi.sin_cos();
    let g = T::lit(cfg.gravity);
    let roll_rate = symmetric_clamp(
        (phi_d - state.phi) / T::lit(cfg.tau_roll),
        T::lit(cfg.roll_rate_max),
    );
    let accel = symmetric_clamp(
        (v_d - state.v) / T::lit(cfg.tau_speed),
        T::lit(cfg.accel_max),
    );
    Ok([
        state.v * cos_psi + eta[0],
        state.v * sin_psi + eta[1],
        -(g / state.v) * state.phi.tan() + eta[2],
        roll_rate,
        accel,
    ])
}

/// Advances one control period with an explicit disturbance vector.
pub fn step_with_eta<T: Scalar>(
    cfg: &KinematicsConfig,
    state: &UavState<T>,
    phi_d: T,
    v_d: T,
    eta: [T; 3],
) -> UavState<T> {
    let roll_limit = T::lit(cfg.roll_limit);
    let v_min = T::lit(cfg.v_min);
    let v_max = T::lit(cfg.v_max);
    let phi_d = symmetric_clamp(phi_d, roll_limit);
    let v_d = v_d.clamp_to(v_min, v_max);
    let dt = T::lit(cfg.dt);

    let mut s = *state;
    s.v = s.v.clamp_to(v_min, v_max);
    for _ in 0..cfg.substeps() {
        // v is kept inside [v_min, v_max] with v_min > 0, so this cannot fail.
        let d = derivative(cfg, &s, phi_d, v_d, eta).expect("airspeed bounded away from zero");
        s.x += dt * d[0];
        s.y += dt * d[1];
        s.psi = wrap_angle(s.psi + dt * d[2]);
        s.phi = symmetric_clamp(s.phi + dt * d[3], roll_limit);
        s.v = (s.v + dt * d[4]).clamp_to(v_min, v_max);
    }
    debug_assert!(s.is_finite());
    s
}

/// Advances one control period, drawing the disturbance from `disturbance`.
pub fn step<T: Scalar>(
    cfg: &KinematicsConfig,
    state: &UavState<T>,
    phi_d: T,
    v_d: T,
    disturbance: &mut DisturbanceModel,
) -> UavState<T> {
    let eta = disturbance.sample();
    step_with_eta(cfg, state, phi_d, v_d, eta)
}
