//! Model-based baseline: feedback linearization with per-axis LQG.
//!
//! The relative position `d = p_r - p` is reconstructed in the world frame
//! from the body-frame measurement and the ground-truth attitude. Each world
//! axis is a double integrator driven by the tracker acceleration whose state
//! a steady-state Kalman filter estimates; the unknown target motion enters as
//! process noise on the relative velocity. Optionally a random-walk
//! target-acceleration state is added and fed forward. The resulting
//! acceleration command is turned into a desired force; its magnitude drives the
//! thrust-rate loop and its direction, together with a heading that points
//! the body x axis at the target, drives a proportional attitude loop that
//! emits body-rate commands.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::controller::{Controller, Observation};
use crate::dynamics::{vee, Command, PhysParams};
use crate::error::{Error, Result};

const DARE_MAX_ITER: usize = 100_000;
const DARE_STEP_TOL: f64 = 1e-12;
const DARE_RESIDUAL_TOL: f64 = 1e-10;

/// Residual `A'PA - A'PB (R + B'PB)^-1 B'PA + Q - P`.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let s = r + b.transpose() * p * b;
    let s_inv = s.try_inverse()?;
    let atpb = a.transpose() * p * b;
    Some(a.transpose() * p * a - &atpb * s_inv * atpb.transpose() + q - p)
}

/// Solves the discrete algebraic Riccati equation by fixed-point iteration
/// from `P = Q`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Shape(format!(
            "dare: A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    for _ in 0..DARE_MAX_ITER {
        let s = r + &bt * &p * b;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::Config("dare: R + B'PB is singular".into()))?;
        let atpb = &at * &p * b;
        let mut next = &at * &p * a - &atpb * s_inv * atpb.transpose() + q;
        next = (&next + next.transpose()) * 0.5;
        let step = (&next - &p).abs().max();
        let scale = next.abs().max().max(1.0);
        p = next;
        if !step.is_finite() {
            break;
        }
        if step < DARE_STEP_TOL * scale {
            break;
        }
    }
    let residual = dare_residual(a, b, q, r, &p)
        .map(|m| m.norm())
        .unwrap_or(f64::INFINITY);
    if residual < DARE_RESIDUAL_TOL * p.norm().max(1.0) {
        Ok(p)
    } else {
        Err(Error::Config(format!(
            "dare did not converge: residual {residual:.3e}"
        )))
    }
}

/// LQR state-feedback gain `K = (R + B'PB)^-1 B'PA` for `u = -K x`.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = solve_dare(a, b, q, r)?;
    let s = r + b.transpose() * &p * b;
    let k = s
        .try_inverse()
        .ok_or_else(|| Error::Config("lqr: singular gain denominator".into()))?
        * b.transpose()
        * &p
        * a;
    Ok((k, p))
}

/// Steady-state Kalman filter gain for `x+ = A x + w`, `z = C x + v`.
///
/// Returns the measurement-update gain `L` (so the estimation error evolves
/// with `(I - L C) A`) and the steady-state prior covariance.
pub fn kalman_gain(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q_w: &DMatrix<f64>,
    r_v: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let sigma = solve_dare(&a.transpose(), &c.transpose(), q_w, r_v)?;
    let s = c * &sigma * c.transpose() + r_v;
    let l = &sigma
        * c.transpose()
        * s.try_inverse()
            .ok_or_else(|| Error::Config("kalman: singular innovation covariance".into()))?;
    Ok((l, sigma))
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Tunable weights and loop gains of the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqgConfig {
    /// LQR state weights on (relative position, relative velocity).
    pub q_pos: f64,
    pub q_vel: f64,
    /// LQR weight on the acceleration command.
    pub r_acc: f64,
    /// Process noise variances on (position, velocity, target acceleration).
    pub process_noise: [f64; 3],
    /// Measurement noise std, m. Usually equal to the episode noise level.
    pub meas_noise_std: f64,
    /// Estimate and feed forward the target acceleration. When off the
    /// filter is the plain two-state double integrator.
    pub target_accel_state: bool,
    /// Thrust loop gain k_f, 1/s.
    pub thrust_gain: f64,
    /// Attitude loop gain k_R, 1/s.
    pub attitude_gain: f64,
    /// Largest commanded tilt from vertical, rad.
    pub max_tilt: f64,
}

impl Default for LqgConfig {
    fn default() -> Self {
        Self {
            q_pos: 10.0,
            q_vel: 1.0,
            r_acc: 1.0,
            process_noise: [0.0, 0.5, 0.0],
            meas_noise_std: 0.003,
            target_accel_state: false,
            thrust_gain: 10.0,
            attitude_gain: 4.0,
            max_tilt: 1.0,
        }
    }
}

/// Per-axis discrete model and its precomputed gains.
#[derive(Clone, Debug, Serialize)]
pub struct LqgGains {
    pub period: f64,
    /// Filter state transition.
    #[serde(serialize_with = "ser_mat")]
    pub a: DMatrix<f64>,
    /// Tracker-acceleration input column of the filter model.
    #[serde(serialize_with = "ser_mat")]
    pub b: DMatrix<f64>,
    #[serde(serialize_with = "ser_mat")]
    pub c: DMatrix<f64>,
    /// Kalman measurement-update gain.
    #[serde(serialize_with = "ser_mat")]
    pub kalman: DMatrix<f64>,
    /// Steady-state prior covariance.
    #[serde(serialize_with = "ser_mat")]
    pub covariance: DMatrix<f64>,
    /// LQR gain on (position error, velocity).
    #[serde(serialize_with = "ser_mat")]
    pub lqr: DMatrix<f64>,
    #[serde(serialize_with = "ser_mat")]
    pub riccati: DMatrix<f64>,
    /// Controlled double integrator used for the LQR design.
    #[serde(skip)]
    pub a_ctrl: DMatrix<f64>,
    #[serde(skip)]
    pub b_ctrl: DMatrix<f64>,
    #[serde(skip)]
    pub q_ctrl: DMatrix<f64>,
    #[serde(skip)]
    pub r_ctrl: DMatrix<f64>,
}

fn ser_mat<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect();
    rows.serialize(s)
}

impl LqgGains {
    pub fn design(cfg: &LqgConfig, period: f64) -> Result<Self> {
        let t = period;
        let a_ctrl = DMatrix::from_row_slice(2, 2, &[1.0, t, 0.0, 1.0]);
        let b_ctrl = DMatrix::from_row_slice(2, 1, &[0.5 * t * t, t]);
        let q_ctrl = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![cfg.q_pos, cfg.q_vel]));
        let r_ctrl = DMatrix::from_element(1, 1, cfg.r_acc);
        let (lqr, riccati) = lqr_gain(&a_ctrl, &b_ctrl, &q_ctrl, &r_ctrl)?;

        let (a, b, c, q_w) = if cfg.target_accel_state {
            (
                DMatrix::from_row_slice(3, 3, &[1.0, t, 0.5 * t * t, 0.0, 1.0, t, 0.0, 0.0, 1.0]),
                DMatrix::from_row_slice(3, 1, &[-0.5 * t * t, -t, 0.0]),
                DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
                DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&cfg.process_noise)),
            )
        } else {
            (
                a_ctrl.clone(),
                -b_ctrl.clone(),
                DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
                DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&cfg.process_noise[..2])),
            )
        };
        let r_v = DMatrix::from_element(1, 1, cfg.meas_noise_std.powi(2).max(1e-12));
        let (kalman, covariance) = kalman_gain(&a, &c, &q_w, &r_v)?;
        Ok(Self {
            period,
            a,
            b,
            c,
            kalman,
            covariance,
            lqr,
            riccati,
            a_ctrl,
            b_ctrl,
            q_ctrl,
            r_ctrl,
        })
    }

    /// Spectral radii of the regulator `A - BK` and the estimator `(I - LC) A`.
    pub fn closed_loop_radii(&self) -> (f64, f64) {
        let reg = &self.a_ctrl - &self.b_ctrl * &self.lqr;
        let n = self.a.nrows();
        let est = (DMatrix::identity(n, n) - &self.kalman * &self.c) * &self.a;
        (spectral_radius(&reg), spectral_radius(&est))
    }

    /// Frobenius norms of the Riccati residuals for the regulator and the filter.
    /// Riccati residual norms relative to `max(1, |P|)` for the regulator and the filter.
    pub fn residuals(&self, cfg: &LqgConfig) -> (f64, f64) {
        let reg = dare_residual(&self.a_ctrl, &self.b_ctrl, &self.q_ctrl, &self.r_ctrl, &self.riccati)
            .map(|m| m.norm() / self.riccati.norm().max(1.0))
            .unwrap_or(f64::INFINITY);
        let n = self.a.nrows();
        let q_w = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&cfg.process_noise[..n]));
        let r_v = DMatrix::from_element(1, 1, cfg.meas_noise_std.powi(2).max(1e-12));
        let est = dare_residual(&self.a.transpose(), &self.c.transpose(), &q_w, &r_v, &self.covariance)
            .map(|m| m.norm() / self.covariance.norm().max(1.0))
            .unwrap_or(f64::INFINITY);
        (reg, est)
    }
}

/// Running state of the baseline controller.
#[derive(Clone, Debug)]
pub struct LqgController {
    cfg: LqgConfig,
    gains: LqgGains,
    nominal_mass: f64,
    gravity: Vector3<f64>,
    set_point: Vector3<f64>,
    omega_max: f64,
    lambda_max: f64,
    thrust_bounds: (f64, f64),
    /// Per-axis estimates, one column per world axis.
    estimate: Option<DMatrix<f64>>,
    prev_accel: Vector3<f64>,
    prev_thrust_dir: Vector3<f64>,
    prev_heading: f64,
}

impl LqgController {
    pub fn new(
        cfg: LqgConfig,
        vehicle: &PhysParams,
        set_point: Vector3<f64>,
        omega_max: f64,
        lambda_max: f64,
    ) -> Result<Self> {
        let gains = LqgGains::design(&cfg, vehicle.control_period)?;
        Ok(Self {
            cfg,
            gains,
            nominal_mass: vehicle.nominal_mass,
            gravity: vehicle.gravity_vec(),
            set_point,
            omega_max,
            lambda_max,
            thrust_bounds: (vehicle.thrust_min, vehicle.thrust_max),
            estimate: None,
            prev_accel: Vector3::zeros(),
            prev_thrust_dir: Vector3::z(),
            prev_heading: 0.0,
        })
    }

    pub fn gains(&self) -> &LqgGains {
        &self.gains
    }

    pub fn config(&self) -> &LqgConfig {
        &self.cfg
    }

    /// Tracker acceleration implied by thrust and attitude under the nominal mass.
    fn nominal_accel(&self, attitude: &Matrix3<f64>, thrust: f64) -> Vector3<f64> {
        attitude.column(2) * (thrust / self.nominal_mass) - self.gravity
    }

    /// Estimated world-frame relative position.
    pub fn relative_position(&self) -> Option<Vector3<f64>> {
        self.estimate
            .as_ref()
            .map(|x| Vector3::new(x[(0, 0)], x[(0, 1)], x[(0, 2)]))
    }

    /// One control step from a noisy body-frame measurement, the true
    /// attitude and the current thrust.
    pub fn step(&mut self, y_meas: &Vector3<f64>, attitude: &Matrix3<f64>, thrust: f64) -> Command {
        let z = attitude * y_meas;
        let accel_now = self.nominal_accel(attitude, thrust);
        let n = self.gains.a.nrows();
        let x = match self.estimate.take() {
            None => {
                let mut x = DMatrix::zeros(n, 3);
                for axis in 0..3 {
                    x[(0, axis)] = z[axis];
                }
                x
            }
            Some(x) => {
                let u = (self.prev_accel + accel_now) * 0.5;
                let u_row = DMatrix::from_row_slice(1, 3, u.as_slice());
                let prior = &self.gains.a * x + &self.gains.b * u_row;
                let z_row = DMatrix::from_row_slice(1, 3, z.as_slice());
                let innov = z_row - &self.gains.c * &prior;
                prior + &self.gains.kalman * innov
            }
        };
        self.prev_accel = accel_now;

        let d = Vector3::new(x[(0, 0)], x[(0, 1)], x[(0, 2)]);
        let d_dot = Vector3::new(x[(1, 0)], x[(1, 1)], x[(1, 2)]);
        let target_acc = if n == 3 {
            Vector3::new(x[(2, 0)], x[(2, 1)], x[(2, 2)])
        } else {
            Vector3::zeros()
        };
        self.estimate = Some(x);

        let x_ref = attitude * self.set_point;
        let k_pos = self.gains.lqr[(0, 0)];
        let k_vel = self.gains.lqr[(0, 1)];
        let mut acc_cmd = target_acc + (d - x_ref) * k_pos + d_dot * k_vel;

        // Keep the desired force inside a tilt cone and above a minimum lift.
        let g = self.gravity.norm();
        let min_lift = 0.2 * g;
        if acc_cmd.z + g < min_lift {
            acc_cmd.z = min_lift - g;
        }
        let vertical = acc_cmd.z + g;
        let horizontal = acc_cmd.xy().norm();
        let max_h = vertical * self.cfg.max_tilt.tan();
        if horizontal > max_h {
            let s = max_h / horizontal;
            acc_cmd.x *= s;
            acc_cmd.y *= s;
        }
        let force = (acc_cmd + self.gravity) * self.nominal_mass;
        let force_norm = force.norm();
        let b3 = if force_norm > 1e-9 {
            force / force_norm
        } else {
            self.prev_thrust_dir
        };
        self.prev_thrust_dir = b3;

        let thrust_des = force
            .dot(&attitude.column(2).into_owned())
            .clamp(self.thrust_bounds.0, self.thrust_bounds.1);
        let lambda = (self.cfg.thrust_gain * (thrust_des - thrust)).clamp(-self.lambda_max, self.lambda_max);

        let heading = if d.xy().norm() > 1e-3 {
            d.y.atan2(d.x)
        } else {
            self.prev_heading
        };
        self.prev_heading = heading;
        let b1c = Vector3::new(heading.cos(), heading.sin(), 0.0);
        let b2 = b3.cross(&b1c);
        let r_des = if b2.norm() > 1e-6 {
            let b2 = b2.normalize();
            Matrix3::from_columns(&[b2.cross(&b3), b2, b3])
        } else {
            *attitude
        };
        let att_err = vee(&((r_des.transpose() * attitude - attitude.transpose() * r_des) * 0.5));
        let omega = (-att_err * self.cfg.attitude_gain).map(|w| w.clamp(-self.omega_max, self.omega_max));
        Command::new(omega, lambda)
    }
}

impl Controller for LqgController {
    fn name(&self) -> &str {
        "lqg"
    }

    fn reset(&mut self) {
        self.estimate = None;
        self.prev_accel = Vector3::zeros();
        self.prev_thrust_dir = Vector3::z();
        self.prev_heading = 0.0;
    }

    fn act(&mut self, obs: &Observation<'_>) -> Command {
        self.step(&obs.measurement, &obs.attitude, obs.thrust)
    }
}
