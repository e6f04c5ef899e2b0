//! Quadrotor translational and attitude dynamics driven by body-rate and
//! thrust-rate commands.
//!
//! Two plant variants share the same sub-stepped integrator:
//!
//! * the training model, where the commanded body rate acts on the attitude
//!   directly, and
//! * the validation model, where the actual body rate follows the command
//!   through a proportional rate loop and the rigid-body Euler equation.
//!
//! Attitude is propagated with the exponential map so the rotation matrix
//! stays on SO(3) without re-orthonormalization. Commands pass through a
//! [`DelayBuffer`] that releases them `delay` seconds after they were issued,
//! quantized to the internal sub-step.

use std::collections::VecDeque;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Body-rate saturation, rad/s.
pub const OMEGA_MAX: f64 = 4.0;
/// Thrust-rate saturation, N/s.
pub const LAMBDA_MAX: f64 = 20.0;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] on the antisymmetric part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Closed-form `exp([omega * dt]x)` (Rodrigues).
pub fn rotation_exp(omega: &Vector3<f64>, dt: f64) -> Matrix3<f64> {
    let phi = omega * dt;
    let theta2 = phi.norm_squared();
    let k = skew(&phi);
    let (a, b) = if theta2 < 1e-8 {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        let theta = theta2.sqrt();
        let half = (0.5 * theta).sin();
        (theta.sin() / theta, 2.0 * half * half / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Which plant equations drive the simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    #[default]
    Training,
    Validation,
}

/// Vehicle constants plus the two uncertain parameters (mass gain and delay).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysParams {
    /// Nominal mass m0, kg.
    pub nominal_mass: f64,
    /// Mass gain; the true mass is `alpha * nominal_mass`.
    pub alpha: f64,
    /// Control delay, s.
    pub delay: f64,
    /// Gravity vector, m/s^2 (world z points up, gravity is subtracted).
    pub gravity: [f64; 3],
    /// Inertia matrix, kg m^2, row-major. Validation model only.
    pub inertia: [[f64; 3]; 3],
    /// Low-level rate-loop gain, N m s/rad. Validation model only.
    pub rate_gain: f64,
    pub thrust_min: f64,
    pub thrust_max: f64,
    /// Internal integration step, s.
    pub substep: f64,
    /// Control period t_s, s. Must be an integer multiple of `substep`.
    pub control_period: f64,
}

impl Default for PhysParams {
    fn default() -> Self {
        Self {
            nominal_mass: 1.0,
            alpha: 1.0,
            delay: 0.0,
            gravity: [0.0, 0.0, 9.8],
            inertia: [[0.01, 0.0, 0.0], [0.0, 0.01, 0.0], [0.0, 0.0, 0.02]],
            rate_gain: 0.5,
            thrust_min: 0.0,
            thrust_max: 2.0 * 1.0 * 9.8,
            substep: 0.005,
            control_period: 0.05,
        }
    }
}

impl PhysParams {
    pub fn with_uncertainty(&self, alpha: f64, delay: f64) -> Self {
        Self {
            alpha,
            delay,
            ..self.clone()
        }
    }

    pub fn mass(&self) -> f64 {
        self.alpha * self.nominal_mass
    }

    pub fn gravity_vec(&self) -> Vector3<f64> {
        Vector3::from(self.gravity)
    }

    pub fn inertia_mat(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.inertia[i][j])
    }

    /// Thrust that balances gravity for the true mass.
    pub fn hover_thrust(&self) -> f64 {
        self.mass() * self.gravity_vec().norm()
    }

    pub fn substeps_per_period(&self) -> usize {
        (self.control_period / self.substep).round() as usize
    }

    /// Delay expressed in whole sub-steps.
    pub fn delay_substeps(&self) -> usize {
        (self.delay / self.substep).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("vehicle: {msg}")));
        if !(self.nominal_mass > 0.0) {
            return bad("nominal_mass must be > 0");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be > 0");
        }
        if !(self.delay >= 0.0) {
            return bad("delay must be >= 0");
        }
        if !(self.substep > 0.0) || !(self.control_period >= self.substep) {
            return bad("need 0 < substep <= control_period");
        }
        let ratio = self.control_period / self.substep;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return bad("control_period must be a multiple of substep");
        }
        if !(self.thrust_min >= 0.0) || !(self.thrust_max > self.thrust_min) {
            return bad("need 0 <= thrust_min < thrust_max");
        }
        if !(self.rate_gain > 0.0) {
            return bad("rate_gain must be > 0");
        }
        let j = self.inertia_mat();
        if (j - j.transpose()).norm() > 1e-12 {
            return bad("inertia must be symmetric");
        }
        let eig = SymmetricEigen::new(j);
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return bad("inertia must be positive definite");
        }
        Ok(())
    }
}

/// Body-rate setpoint and thrust rate issued by a controller.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Command {
    /// rad/s
    pub omega: Vector3<f64>,
    /// N/s
    pub lambda: f64,
}

impl Command {
    pub fn new(omega: Vector3<f64>, lambda: f64) -> Self {
        Self { omega, lambda }
    }

    pub fn hover() -> Self {
        Self::default()
    }

    /// Component-wise clip to the actuator limits. Non-finite entries become 0.
    pub fn saturate(&self, omega_max: f64, lambda_max: f64) -> Self {
        let clip = |x: f64, m: f64| if x.is_finite() { x.clamp(-m, m) } else { 0.0 };
        Self {
            omega: self.omega.map(|w| clip(w, omega_max)),
            lambda: clip(self.lambda, lambda_max),
        }
    }

    /// Maps a normalized action in [-1, 1]^4 to physical units.
    pub fn from_normalized(a: &[f64; 4], omega_max: f64, lambda_max: f64) -> Self {
        Self {
            omega: Vector3::new(a[0], a[1], a[2]) * omega_max,
            lambda: a[3] * lambda_max,
        }
    }

    pub fn to_normalized(&self, omega_max: f64, lambda_max: f64) -> [f64; 4] {
        [
            self.omega.x / omega_max,
            self.omega.y / omega_max,
            self.omega.z / omega_max,
            self.lambda / lambda_max,
        ]
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.omega.x, self.omega.y, self.omega.z, self.lambda]
    }
}

/// FIFO of commands stamped with the sub-step index at which they were issued.
///
/// A command issued at sub-step `n` becomes active at sub-step `n + d`, where
/// `d` is the quantized delay. Until the first command matures the hover
/// command (zero rate, zero thrust rate) is active.
#[derive(Clone, Debug)]
pub struct DelayBuffer {
    delay_substeps: usize,
    queue: VecDeque<(u64, Command)>,
    active: Command,
}

impl DelayBuffer {
    pub fn new(delay_substeps: usize) -> Self {
        Self {
            delay_substeps,
            queue: VecDeque::new(),
            active: Command::hover(),
        }
    }

    pub fn from_params(params: &PhysParams) -> Self {
        Self::new(params.delay_substeps())
    }

    pub fn delay_substeps(&self) -> usize {
        self.delay_substeps
    }

    pub fn push(&mut self, substep: u64, cmd: Command) {
        self.queue.push_back((substep, cmd));
    }

    /// Command in force during sub-step `substep`.
    pub fn active_at(&mut self, substep: u64) -> Command {
        let d = self.delay_substeps as u64;
        while let Some(&(stamp, cmd)) = self.queue.front() {
            if stamp + d <= substep {
                self.active = cmd;
                self.queue.pop_front();
            } else {
                break;
            }
        }
        self.active
    }

    /// Most recently matured command, without advancing time.
    pub fn current(&self) -> Command {
        self.active
    }
}

/// Physical state of the tracker.
#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// World-from-body rotation.
    pub attitude: Matrix3<f64>,
    /// Actual body rate. In the training model this is the active commanded rate.
    pub omega: Vector3<f64>,
    /// Total thrust, N.
    pub thrust: f64,
}

impl SimState {
    /// Level hover at `position` with thrust balancing the true mass.
    pub fn hover(position: Vector3<f64>, params: &PhysParams) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            attitude: Matrix3::identity(),
            omega: Vector3::zeros(),
            thrust: params
                .hover_thrust()
                .clamp(params.thrust_min, params.thrust_max),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|x| x.is_finite())
            && self.velocity.iter().all(|x| x.is_finite())
            && self.attitude.iter().all(|x| x.is_finite())
            && self.omega.iter().all(|x| x.is_finite())
            && self.thrust.is_finite()
    }

    /// Tracker acceleration p_ddot = R e3 f / m - g.
    pub fn acceleration(&self, params: &PhysParams) -> Vector3<f64> {
        self.attitude.column(2) * (self.thrust / params.mass()) - params.gravity_vec()
    }

    /// Frobenius norm of `R^T R - I`.
    pub fn orthogonality_error(&self) -> f64 {
        (self.attitude.transpose() * self.attitude - Matrix3::identity()).norm()
    }
}

/// Precomputed exact solution operators of the rate loop
/// `w_dot = -k J^-1 (w - w_cmd) + g` over one sub-step, with the gyroscopic
/// term `g` held at its value at the start of the sub-step.
#[derive(Clone, Debug)]
pub struct RateLoop {
    /// `exp(-k J^-1 dt)`
    decay: Matrix3<f64>,
    /// `(k J^-1 dt)^-1 (I - exp(-k J^-1 dt))`: maps the initial rate deviation to its
    /// mean over the sub-step.
    mean: Matrix3<f64>,
    /// `(k J^-1 dt)^-1 (I - mean)`: mean response to unit constant forcing, per `dt`.
    forced_mean: Matrix3<f64>,
    inertia: Matrix3<f64>,
    inertia_inv: Matrix3<f64>,
}

impl RateLoop {
    pub fn new(params: &PhysParams) -> Self {
        let j = params.inertia_mat();
        let eig = SymmetricEigen::new(j);
        let v = eig.eigenvectors;
        let dt = params.substep;
        let mut decay = Vector3::zeros();
        let mut mean = Vector3::zeros();
        let mut forced = Vector3::zeros();
        for i in 0..3 {
            let x = params.rate_gain * dt / eig.eigenvalues[i];
            decay[i] = (-x).exp();
            mean[i] = if x < 1e-8 { 1.0 - 0.5 * x } else { -(-x).exp_m1() / x };
            forced[i] = if x < 1e-4 {
                0.5 - x / 6.0 + x * x / 24.0
            } else {
                (1.0 - mean[i]) / x
            };
        }
        let inertia_inv = v * Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l)) * v.transpose();
        Self {
            decay: v * Matrix3::from_diagonal(&decay) * v.transpose(),
            mean: v * Matrix3::from_diagonal(&mean) * v.transpose(),
            forced_mean: v * Matrix3::from_diagonal(&forced) * v.transpose(),
            inertia: j,
            inertia_inv,
        }
    }
}

fn substep_translation(s: &mut SimState, thrust_next: f64, params: &PhysParams) {
    let dt = params.substep;
    // Thrust is linear in time over the sub-step (before clipping); use its mean.
    let thrust = 0.5 * (s.thrust + thrust_next);
    let acc = s.attitude.column(2) * (thrust / params.mass()) - params.gravity_vec();
    s.position += s.velocity * dt + acc * (0.5 * dt * dt);
    s.velocity += acc * dt;
    s.thrust = thrust_next;
}

fn next_thrust(s: &SimState, cmd: &Command, params: &PhysParams) -> f64 {
    (s.thrust + cmd.lambda * params.substep).clamp(params.thrust_min, params.thrust_max)
}

/// Advances the training model by one control period starting at global
/// sub-step index `substep`.
pub fn step_training_model(
    s: &SimState,
    buf: &mut DelayBuffer,
    params: &PhysParams,
    substep: u64,
) -> SimState {
    let mut next = s.clone();
    for i in 0..params.substeps_per_period() as u64 {
        let cmd = buf.active_at(substep + i);
        let f1 = next_thrust(&next, &cmd, params);
        substep_translation(&mut next, f1, params);
        next.attitude *= rotation_exp(&cmd.omega, params.substep);
        next.omega = cmd.omega;
    }
    next
}

/// Advances the validation model (rate loop + Euler equation) by one control
/// period starting at global sub-step index `substep`.
pub fn step_validation_model(
    s: &SimState,
    buf: &mut DelayBuffer,
    params: &PhysParams,
    rates: &RateLoop,
    substep: u64,
) -> SimState {
    let dt = params.substep;
    let mut next = s.clone();
    for i in 0..params.substeps_per_period() as u64 {
        let cmd = buf.active_at(substep + i);
        let f1 = next_thrust(&next, &cmd, params);
        substep_translation(&mut next, f1, params);

        let w0 = next.omega;
        let dev = w0 - cmd.omega;
        let gyro = -(rates.inertia_inv * w0.cross(&(rates.inertia * w0)));
        let w_mean = cmd.omega + rates.mean * dev + rates.forced_mean * gyro * dt;
        next.attitude *= rotation_exp(&w_mean, dt);
        next.omega = cmd.omega + rates.decay * dev + rates.mean * gyro * dt;
    }
    next
}

/// Target position expressed in the tracker body frame, `R^T (p_r - p)`.
pub fn output_y(s: &SimState, target_position: &Vector3<f64>) -> Vector3<f64> {
    s.attitude.transpose() * (target_position - s.position)
}

/// Analytic target motion at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetKinematics {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
}

/// Relative motion quantities used by the reward and the critic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeRates {
    /// Time derivative of `output_y`.
    pub y_dot: Vector3<f64>,
    /// `R^T (p_dot - p_r_dot)`
    pub velocity: Vector3<f64>,
    /// `R^T (p_ddot - p_r_ddot)`
    pub acceleration: Vector3<f64>,
}

pub fn relative_rates(s: &SimState, target: &TargetKinematics, params: &PhysParams) -> RelativeRates {
    let rt = s.attitude.transpose();
    let y = rt * (target.position - s.position);
    let y_dot = -s.omega.cross(&y) + rt * (target.velocity - s.velocity);
    RelativeRates {
        y_dot,
        velocity: rt * (s.velocity - target.velocity),
        acceleration: rt * (s.acceleration(params) - target.acceleration),
    }
}

/// A tracker plant: state, parameters, delay line and sub-step clock.
#[derive(Clone, Debug)]
pub struct Plant {
    state: SimState,
    params: PhysParams,
    variant: ModelVariant,
    buffer: DelayBuffer,
    rates: RateLoop,
    substep: u64,
}

impl Plant {
    pub fn new(params: PhysParams, variant: ModelVariant, state: SimState) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            buffer: DelayBuffer::from_params(&params),
            rates: RateLoop::new(&params),
            state,
            params,
            variant,
            substep: 0,
        })
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn params(&self) -> &PhysParams {
        &self.params
    }

    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn time(&self) -> f64 {
        self.substep as f64 * self.params.substep
    }

    /// Queues a command at the current time. Saturation is the caller's job.
    pub fn command(&mut self, cmd: Command) {
        self.buffer.push(self.substep, cmd);
    }

    /// Integrates one control period. A non-finite result is reported as a
    /// numeric fault and the state is left at the faulty value.
    pub fn advance(&mut self) -> Result<()> {
        self.state = match self.variant {
            ModelVariant::Training => {
                step_training_model(&self.state, &mut self.buffer, &self.params, self.substep)
            }
            ModelVariant::Validation => step_validation_model(
                &self.state,
                &mut self.buffer,
                &self.params,
                &self.rates,
                self.substep,
            ),
        };
        self.substep += self.params.substeps_per_period() as u64;
        if self.state.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "non-finite tracker state at t = {:.3} s",
                self.time()
            )))
        }
    }
}
