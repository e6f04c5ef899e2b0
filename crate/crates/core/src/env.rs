//! The tracking episode: spawning, domain randomization, observations,
//! reward and termination.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    output_y, relative_rates, Command, ModelVariant, PhysParams, Plant, SimState,
    TargetKinematics, LAMBDA_MAX, OMEGA_MAX,
};
use crate::error::{Error, Result};
use crate::target::{sample_params, Interval, TrajKind, TrajParams, TrajRanges};

/// Length of the critic observation.
pub const CRITIC_OBS_DIM: usize = 9;
/// Length of the action vector.
pub const ACTION_DIM: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// Desired target position in the body frame, m.
    pub set_point: [f64; 3],
    /// Keep-out radius y_m, m.
    pub keep_out: f64,
    /// Measurement noise std sigma_w, m.
    pub obs_noise_std: f64,
    /// Spawn offset std sigma_s, m.
    pub spawn_noise_std: f64,
    /// Observation history length H; the actor sees H + 1 errors.
    pub history: usize,
    /// Steps per episode before timeout.
    pub max_steps: usize,
    pub alpha_range: Interval,
    /// s
    pub delay_range: Interval,
    pub collision_penalty: f64,
    pub k_v: f64,
    pub k_u: f64,
    pub beta: f64,
    /// rad/s
    pub omega_max: f64,
    /// N/s
    pub lambda_max: f64,
    /// Effort penalty on the action scaled by its bounds instead of raw units.
    pub normalized_effort: bool,
    /// Keep the noise sample of each measurement as it ages through the history.
    pub freeze_history_noise: bool,
    /// Error norm beyond which the episode is declared divergent, m.
    pub divergence_radius: f64,
    /// Probability that a training episode uses a fixed-point target.
    pub fixed_target_prob: f64,
    pub trajectory: TrajRanges,
    pub model: ModelVariant,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            set_point: [0.75, 0.0, 0.0],
            keep_out: 0.40,
            obs_noise_std: 0.003,
            spawn_noise_std: 0.10,
            history: 15,
            max_steps: 800,
            alpha_range: Interval::new(0.6, 1.4),
            delay_range: Interval::new(0.0, 0.050),
            collision_penalty: 10.0,
            k_v: 0.4,
            k_u: 0.4,
            beta: 1.0 / 3.0,
            omega_max: OMEGA_MAX,
            lambda_max: LAMBDA_MAX,
            normalized_effort: true,
            freeze_history_noise: false,
            divergence_radius: 100.0,
            fixed_target_prob: 0.1,
            trajectory: TrajRanges::default(),
            model: ModelVariant::Training,
        }
    }
}

impl EpisodeConfig {
    pub fn set_point_vec(&self) -> Vector3<f64> {
        Vector3::from(self.set_point)
    }

    pub fn actor_obs_dim(&self) -> usize {
        3 * (self.history + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("episode: {msg}")));
        self.alpha_range.validate("alpha_range")?;
        self.delay_range.validate("delay_range")?;
        self.trajectory.validate()?;
        if !(self.alpha_range.lo > 0.0) {
            return bad("alpha_range must be positive".into());
        }
        if !(self.delay_range.lo >= 0.0) {
            return bad("delay_range must be non-negative".into());
        }
        if !(self.keep_out >= 0.0) || !(self.keep_out < self.set_point_vec().norm()) {
            return bad(format!(
                "keep_out {} must be below the set-point distance {}",
                self.keep_out,
                self.set_point_vec().norm()
            ));
        }
        if !(self.obs_noise_std >= 0.0) || !(self.spawn_noise_std >= 0.0) {
            return bad("noise std must be >= 0".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be > 0".into());
        }
        if !(self.beta > 0.0) || !(self.k_v >= 0.0) || !(self.k_u >= 0.0) {
            return bad("need beta > 0 and k_v, k_u >= 0".into());
        }
        if !(self.omega_max > 0.0) || !(self.lambda_max > 0.0) {
            return bad("action bounds must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.fixed_target_prob) {
            return bad("fixed_target_prob must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn action_bounds(&self) -> [f64; ACTION_DIM] {
        [self.omega_max, self.omega_max, self.omega_max, self.lambda_max]
    }
}

/// Everything random about one episode except the measurement noise stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub alpha: f64,
    /// s, already quantized to the vehicle sub-step.
    pub delay: f64,
    /// Target trajectory with its origin at the spawn point.
    pub trajectory: TrajParams,
    /// Spawn perturbation w_s, m.
    pub spawn_offset: [f64; 3],
}

impl Scenario {
    /// Domain-randomized draw: alpha and delay uniform, trajectory kind
    /// fixed-point with `fixed_target_prob`, sinusoid otherwise.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, cfg: &EpisodeConfig, vehicle: &PhysParams) -> Result<Self> {
        let alpha = cfg.alpha_range.sample(rng);
        let delay = cfg.delay_range.sample(rng);
        let kind = if rng.random::<f64>() < cfg.fixed_target_prob {
            TrajKind::Fixed
        } else {
            TrajKind::Sinusoid
        };
        Self::with_uncertainty(rng, cfg, vehicle, alpha, delay, kind)
    }

    /// Draw with the plant parameters pinned.
    pub fn with_uncertainty<R: Rng + ?Sized>(
        rng: &mut R,
        cfg: &EpisodeConfig,
        vehicle: &PhysParams,
        alpha: f64,
        delay: f64,
        kind: TrajKind,
    ) -> Result<Self> {
        let traj = sample_params(rng, &cfg.trajectory, kind)?;
        let normal = Normal::new(0.0, cfg.spawn_noise_std)
            .map_err(|e| Error::Config(format!("spawn noise: {e}")))?;
        let spawn_offset = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
        let delay = (delay / vehicle.substep).round() * vehicle.substep;
        // Tracker starts at the origin, level: p_r(0) = p(0) + R(0) y_r + w_s.
        let origin = cfg.set_point_vec() + Vector3::from(spawn_offset);
        Ok(Self {
            alpha,
            delay,
            trajectory: traj.with_origin(origin),
            spawn_offset,
        })
    }
}

/// Why an episode stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Timeout,
    Collision,
    Divergence,
}

impl Status {
    pub fn is_done(self) -> bool {
        self != Status::Running
    }

    /// Terminal in the MDP sense: no bootstrapping past this step.
    pub fn is_terminal(self) -> bool {
        matches!(self, Status::Collision | Status::Divergence)
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    /// Flattened noisy error history, newest first.
    pub actor_obs: Vec<f64>,
    pub critic_obs: [f64; CRITIC_OBS_DIM],
    pub reward: f64,
    pub status: Status,
    /// Noise-free tracking error e(k).
    pub error: Vector3<f64>,
    /// Distance to target ||y(k)||.
    pub distance: f64,
}

/// Tracking reward. `u` must already be saturated.
pub fn compute_reward(
    e: &Vector3<f64>,
    y_dot: &Vector3<f64>,
    u: &Command,
    y_norm: f64,
    cfg: &EpisodeConfig,
) -> f64 {
    if y_norm <= cfg.keep_out {
        return -cfg.collision_penalty;
    }
    let r_e = e
        .iter()
        .map(|ej| (1.0 - ej.abs()).max(0.0))
        .product::<f64>()
        .powf(cfg.beta);
    let vy = y_dot.norm();
    let r_v = vy / (1.0 + vy);
    let un = if cfg.normalized_effort {
        let a = u.to_normalized(cfg.omega_max, cfg.lambda_max);
        a.iter().map(|x| x * x).sum::<f64>().sqrt()
    } else {
        let a = u.as_array();
        a.iter().map(|x| x * x).sum::<f64>().sqrt()
    };
    let r_u = un / (1.0 + un);
    r_e - cfg.k_v * r_v - cfg.k_u * r_u
}

/// Critic observation: error, relative velocity and relative acceleration in
/// the body frame.
pub fn build_critic_obs(
    s: &SimState,
    target: &TargetKinematics,
    params: &PhysParams,
    set_point: &Vector3<f64>,
) -> [f64; CRITIC_OBS_DIM] {
    let e = set_point - output_y(s, &target.position);
    let rr = relative_rates(s, target, params);
    let mut out = [0.0; CRITIC_OBS_DIM];
    out[..3].copy_from_slice(e.as_slice());
    out[3..6].copy_from_slice(rr.velocity.as_slice());
    out[6..].copy_from_slice(rr.acceleration.as_slice());
    out
}

/// One step of the episode log, suitable for JSON lines.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepLog {
    pub t: f64,
    pub p: [f64; 3],
    /// Row-major attitude.
    #[serde(rename = "R")]
    pub attitude: [f64; 9],
    pub p_r: [f64; 3],
    pub e: [f64; 3],
    pub y_norm: f64,
    /// Saturated command (omega_x, omega_y, omega_z, lambda).
    pub action: [f64; 4],
    pub reward: f64,
    pub done: Status,
}

/// A running episode.
#[derive(Clone, Debug)]
pub struct Episode {
    cfg: EpisodeConfig,
    plant: Plant,
    scenario: Scenario,
    noise_rng: ChaCha8Rng,
    /// True errors, newest first, length H + 1.
    errors: VecDeque<Vector3<f64>>,
    /// Noisy errors, newest first; only maintained when noise is frozen.
    noisy: VecDeque<Vector3<f64>>,
    actor_obs: Vec<f64>,
    step: usize,
    status: Status,
    last_error: Vector3<f64>,
}

fn attitude_row_major(r: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = r[(i, j)];
        }
    }
    out
}

impl Episode {
    /// Starts an episode for a given scenario. `noise_seed` drives the
    /// measurement noise stream only.
    pub fn start(
        cfg: &EpisodeConfig,
        vehicle: &PhysParams,
        scenario: Scenario,
        noise_seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let params = vehicle.with_uncertainty(scenario.alpha, scenario.delay);
        let state = SimState::hover(Vector3::zeros(), &params);
        let plant = Plant::new(params, cfg.model, state)?;
        let mut ep = Self {
            cfg: cfg.clone(),
            plant,
            scenario,
            noise_rng: ChaCha8Rng::seed_from_u64(noise_seed),
            errors: VecDeque::with_capacity(cfg.history + 1),
            noisy: VecDeque::with_capacity(cfg.history + 1),
            actor_obs: vec![0.0; cfg.actor_obs_dim()],
            step: 0,
            status: Status::Running,
            last_error: Vector3::zeros(),
        };
        let e0 = ep.true_error();
        ep.last_error = e0;
        // Prime the history with a single noisy reading of e(0).
        let w = ep.noise();
        for _ in 0..=cfg.history {
            ep.errors.push_back(e0);
            ep.noisy.push_back(e0 + w);
        }
        if ep.cfg.freeze_history_noise {
            ep.fill_obs_frozen();
        } else {
            for slot in 0..=cfg.history {
                ep.actor_obs[3 * slot..3 * slot + 3].copy_from_slice((e0 + w).as_slice());
            }
        }
        Ok(ep)
    }

    /// Domain-randomized reset: draws a scenario and a noise seed from `rng`.
    pub fn reset<R: Rng + ?Sized>(rng: &mut R, cfg: &EpisodeConfig, vehicle: &PhysParams) -> Result<Self> {
        let scenario = Scenario::sample(rng, cfg, vehicle)?;
        let noise_seed = rng.random();
        Self::start(cfg, vehicle, scenario, noise_seed)
    }

    fn noise(&mut self) -> Vector3<f64> {
        let s = self.cfg.obs_noise_std;
        if s == 0.0 {
            return Vector3::zeros();
        }
        let mut draw = || {
            let z: f64 = StandardNormal.sample(&mut self.noise_rng);
            s * z
        };
        Vector3::new(draw(), draw(), draw())
    }

    fn target_now(&self) -> TargetKinematics {
        self.scenario.trajectory.eval(self.plant.time())
    }

    fn true_error(&self) -> Vector3<f64> {
        self.cfg.set_point_vec() - output_y(self.plant.state(), &self.target_now().position)
    }

    fn fill_obs_frozen(&mut self) {
        for (slot, e) in self.noisy.iter().enumerate() {
            self.actor_obs[3 * slot..3 * slot + 3].copy_from_slice(e.as_slice());
        }
    }

    fn fill_obs_fresh(&mut self) {
        for slot in 0..self.errors.len() {
            let e = self.errors[slot] + self.noise();
            self.actor_obs[3 * slot..3 * slot + 3].copy_from_slice(e.as_slice());
        }
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn state(&self) -> &SimState {
        self.plant.state()
    }

    pub fn time(&self) -> f64 {
        self.plant.time()
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn target(&self) -> TargetKinematics {
        self.target_now()
    }

    /// Current noisy error history, newest first.
    pub fn actor_obs(&self) -> &[f64] {
        &self.actor_obs
    }

    /// Noisy body-frame relative position matching the newest observation entry.
    pub fn measurement(&self) -> Vector3<f64> {
        self.cfg.set_point_vec() - Vector3::new(self.actor_obs[0], self.actor_obs[1], self.actor_obs[2])
    }

    pub fn critic_obs(&self) -> [f64; CRITIC_OBS_DIM] {
        build_critic_obs(
            self.plant.state(),
            &self.target_now(),
            self.plant.params(),
            &self.cfg.set_point_vec(),
        )
    }

    /// Noise-free error at the current step.
    pub fn error(&self) -> Vector3<f64> {
        self.last_error
    }

    /// Applies `cmd` (saturated here) for one control period.
    pub fn step(&mut self, cmd: Command) -> Result<StepResult> {
        if self.status.is_done() {
            return Err(Error::Usage(format!(
                "step called on a finished episode ({:?})",
                self.status
            )));
        }
        let u = cmd.saturate(self.cfg.omega_max, self.cfg.lambda_max);
        self.plant.command(u);
        let fault = self.plant.advance().is_err();
        self.step += 1;

        let target = self.target_now();
        let y = output_y(self.plant.state(), &target.position);
        let e = self.cfg.set_point_vec() - y;
        let y_norm = y.norm();
        self.last_error = e;

        self.errors.pop_back();
        self.errors.push_front(e);
        if self.cfg.freeze_history_noise {
            let w = self.noise();
            self.noisy.pop_back();
            self.noisy.push_front(e + w);
            self.fill_obs_frozen();
        } else {
            self.fill_obs_fresh();
        }

        let finite = !fault && e.iter().all(|x| x.is_finite());
        let (status, reward) = if !finite || e.norm() > self.cfg.divergence_radius {
            (Status::Divergence, -self.cfg.collision_penalty)
        } else {
            let rr = relative_rates(self.plant.state(), &target, self.plant.params());
            let reward = compute_reward(&e, &rr.y_dot, &u, y_norm, &self.cfg);
            if y_norm <= self.cfg.keep_out {
                (Status::Collision, reward)
            } else if self.step >= self.cfg.max_steps {
                (Status::Timeout, reward)
            } else {
                (Status::Running, reward)
            }
        };
        self.status = status;

        let critic_obs = if finite {
            self.critic_obs()
        } else {
            [0.0; CRITIC_OBS_DIM]
        };
        let actor_obs = if finite {
            self.actor_obs.clone()
        } else {
            vec![0.0; self.actor_obs.len()]
        };
        Ok(StepResult {
            actor_obs,
            critic_obs,
            reward,
            status,
            error: e,
            distance: y_norm,
        })
    }

    /// Log record for the step just taken with command `cmd`.
    pub fn log_record(&self, cmd: &Command, result: &StepResult) -> StepLog {
        let s = self.plant.state();
        let u = cmd.saturate(self.cfg.omega_max, self.cfg.lambda_max);
        StepLog {
            t: self.time(),
            p: s.position.into(),
            attitude: attitude_row_major(&s.attitude),
            p_r: self.target_now().position.into(),
            e: result.error.into(),
            y_norm: result.distance,
            action: u.as_array(),
            reward: result.reward,
            done: result.status,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EpisodeConfig {
        EpisodeConfig::default()
    }

    #[test]
    fn reward_perfect_tracking_is_one() {
        let r = compute_reward(&Vector3::zeros(), &Vector3::zeros(), &Command::hover(), 0.75, &cfg());
        assert_eq!(r, 1.0);
    }

    #[test]
    fn reward_collision_is_minus_c() {
        let r = compute_reward(&Vector3::zeros(), &Vector3::zeros(), &Command::hover(), 0.39, &cfg());
        assert_eq!(r, -10.0);
    }

    #[test]
    fn reward_half_meter_error() {
        let r = compute_reward(
            &Vector3::new(0.5, 0.0, 0.0),
            &Vector3::zeros(),
            &Command::hover(),
            0.8,
            &cfg(),
        );
        assert!((r - 0.5f64.powf(1.0 / 3.0)).abs() < 1e-15);
        assert!((r - 0.7937).abs() < 1e-4);
    }

    #[test]
    fn reward_clips_large_error() {
        let c = cfg();
        let yd = Vector3::new(0.3, 0.0, -0.4);
        let u = Command::new(Vector3::new(1.0, 0.0, 0.0), 5.0);
        let r = compute_reward(&Vector3::new(0.0, 1.2, 0.0), &yd, &u, 2.0, &c);
        let r_v = 0.5 / 1.5;
        let un = (0.25f64.powi(2) + 0.25f64.powi(2)).sqrt();
        let r_u = un / (1.0 + un);
        assert!((r - (-0.4 * r_v - 0.4 * r_u)).abs() < 1e-15);
    }

    #[test]
    fn spawn_without_noise_has_zero_error() {
        let mut c = cfg();
        c.spawn_noise_std = 0.0;
        c.obs_noise_std = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = Episode::reset(&mut rng, &c, &PhysParams::default()).unwrap();
        assert_eq!(ep.error(), Vector3::zeros());
        assert!(ep.actor_obs().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hover_with_static_target_stays_at_set_point() {
        let mut c = cfg();
        c.obs_noise_std = 0.0;
        let vehicle = PhysParams::default();
        let scenario = Scenario {
            alpha: 1.0,
            delay: 0.0,
            trajectory: TrajParams::fixed(c.set_point_vec()),
            spawn_offset: [0.0; 3],
        };
        let mut ep = Episode::start(&c, &vehicle, scenario, 0).unwrap();
        for _ in 0..50 {
            let res = ep.step(Command::hover()).unwrap();
            assert!(res.error.norm() < 1e-12);
            assert!((res.reward - 1.0).abs() < 1e-9);
            assert_eq!(res.status, Status::Running);
        }
    }

    #[test]
    fn step_after_done_is_usage_error() {
        let mut c = cfg();
        c.max_steps = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ep = Episode::reset(&mut rng, &c, &PhysParams::default()).unwrap();
        ep.step(Command::hover()).unwrap();
        let res = ep.step(Command::hover()).unwrap();
        assert_eq!(res.status, Status::Timeout);
        assert!(matches!(ep.step(Command::hover()), Err(Error::Usage(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = cfg();
        c.keep_out = 0.8;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.alpha_range = Interval::new(1.4, 0.6);
        assert!(c.validate().is_err());
    }
}
