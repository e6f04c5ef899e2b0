//! Numerical self-tests runnable from the command line.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dynamics::{
    step_training_model, Command, DelayBuffer, PhysParams, SimState,
};
use crate::env::compute_reward;
use crate::error::Result;
use crate::lqg::LqgGains;
use crate::nnet::{Activation, ForwardCache, Mlp};
use crate::sac::{Batch, ReplayBuffer, Sac, SacConfig, Transition};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// Measured quantity.
    pub value: f64,
    /// Bound it is compared against (`value < threshold` passes).
    pub threshold: f64,
}

impl Check {
    fn below(name: &'static str, value: f64, threshold: f64) -> Self {
        Self {
            name,
            passed: value < threshold,
            value,
            threshold,
        }
    }

    /// `name  PASS  value=... threshold=... margin=...`
    pub fn line(&self) -> String {
        format!(
            "{:<20} {}  value={:.3e}  threshold={:.3e}  margin={:.3e}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.value,
            self.threshold,
            self.threshold - self.value
        )
    }
}

pub type GradFn = dyn Fn(&Mlp, &ForwardCache, &[f64]) -> Result<Vec<f64>>;

/// Analytic parameter gradient through `Mlp::backward`.
pub fn backprop_gradient(net: &Mlp, cache: &ForwardCache, out_grad: &[f64]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; net.num_params()];
    net.backward(cache, out_grad, &mut g, false)?;
    Ok(g)
}

/// Relative error between two derivative estimates. Values below `floor`
/// in magnitude are compared absolutely.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between `grad` and central differences of the
/// scalar loss `sum(w * net(x))` over every parameter.
pub fn gradient_check(net: &Mlp, x: &[f64], batch: usize, w: &[f64], grad: &GradFn, h: f64) -> Result<f64> {
    let loss = |n: &Mlp| -> Result<f64> {
        Ok(n.predict(x, batch)?.iter().zip(w).map(|(o, w)| o * w).sum())
    };
    let cache = net.forward(x, batch)?;
    let analytic = grad(net, &cache, w)?;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in 0..net.num_params() {
        let p0 = net.params()[i];
        probe.params_mut()[i] = p0 + h;
        let up = loss(&probe)?;
        probe.params_mut()[i] = p0 - h;
        let down = loss(&probe)?;
        probe.params_mut()[i] = p0;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * h), 1e-4));
    }
    Ok(worst)
}

/// Random network mixing every activation kind, with inputs.
pub fn random_net(seed: u64) -> (Mlp, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Mlp::new(
        &[5, 7, 6, 3],
        &[Activation::Relu, Activation::Tanh, Activation::Linear],
        1.0,
        &mut rng,
    )
    .expect("valid sizes");
    let batch = 4;
    let x: Vec<f64> = (0..5 * batch).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..3 * batch).map(|_| rng.random_range(-1.0..1.0)).collect();
    (net, x, w)
}

pub fn check_gradients(grad: &GradFn) -> Result<Check> {
    let (net, x, w) = random_net(17);
    let worst = gradient_check(&net, &x, 4, &w, grad, 1e-5)?;
    Ok(Check::below("nnet_gradients", worst, 1e-4))
}

/// Actor-loss gradient against finite differences with frozen noise.
pub fn check_actor_gradient() -> Result<Check> {
    let cfg = SacConfig {
        hidden: vec![10, 10],
        init_temperature: 0.2,
        actor_last_scale: 1.0,
        critic_obs_scale: vec![2.0, 0.5, 1.0],
        ..SacConfig::default()
    };
    let sac = Sac::new(cfg, 6, 3, 4, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let items: Vec<Transition> = (0..5)
        .map(|_| Transition {
            actor_obs: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
            critic_obs: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            action: vec![0.0; 4],
            reward: 0.0,
            next_actor_obs: vec![0.0; 6],
            next_critic_obs: vec![0.0; 3],
            terminal: false,
        })
        .collect();
    let batch = Batch::from_transitions(&items);
    let noise: Vec<f64> = (0..20).map(|_| rng.random_range(-1.5..1.5)).collect();
    let (_, grads, _) = sac.actor_loss_and_grad(&batch, &noise)?;
    let mut probe = sac.clone();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..grads.len() {
        let p0 = sac.actor.params()[i];
        probe.actor.params_mut()[i] = p0 + h;
        let up = probe.actor_loss_and_grad(&batch, &noise)?.0;
        probe.actor.params_mut()[i] = p0 - h;
        let down = probe.actor_loss_and_grad(&batch, &noise)?.0;
        probe.actor.params_mut()[i] = p0;
        worst = worst.max(rel_err(grads[i], (up - down) / (2.0 * h), 1e-4));
    }
    Ok(Check::below("actor_gradient", worst, 1e-3))
}

/// Orthogonality error after 800 control periods of tumbling.
pub fn check_so3_drift() -> Result<Check> {
    let params = PhysParams::default();
    let mut s = SimState::hover(Vector3::zeros(), &params);
    let mut buf = DelayBuffer::from_params(&params);
    let n = params.substeps_per_period();
    let mut sub = 0u64;
    for k in 0..800 {
        let t = k as f64 * params.control_period;
        let cmd = Command::new(Vector3::new(3.9 * t.sin(), -2.7 * (0.7 * t).cos(), 3.3), 0.0);
        buf.push(sub, cmd);
        for _ in 0..n {
            s = step_training_model(&s, &mut buf, &params, sub);
            sub += 1;
        }
    }
    Ok(Check::below("so3_drift", s.orthogonality_error(), 1e-9))
}

pub fn check_dare(cfg: &RunConfig) -> Result<Vec<Check>> {
    let gains = LqgGains::design(&cfg.lqg, cfg.vehicle.control_period)?;
    let (reg, est) = gains.residuals(&cfg.lqg);
    let (rho_reg, rho_est) = gains.closed_loop_radii();
    Ok(vec![
        Check::below("dare_lqr_residual", reg, 1e-10),
        Check::below("dare_kalman_residual", est, 1e-10),
        Check::below("lqr_spectral_radius", rho_reg, 1.0),
        Check::below("kf_spectral_radius", rho_est, 1.0),
    ])
}

/// Largest deviation, in binomial standard deviations, of item frequencies
/// when sampling 1e5 times from a 10-item buffer.
pub fn check_replay_uniformity() -> Result<Check> {
    let mut buf = ReplayBuffer::new(10, 1, 1, 1);
    for i in 0..10 {
        let x = i as f64;
        buf.push(&Transition {
            actor_obs: vec![x],
            critic_obs: vec![x],
            action: vec![x],
            reward: x,
            next_actor_obs: vec![x],
            next_critic_obs: vec![x],
            terminal: false,
        })?;
    }
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut counts = [0usize; 10];
    for i in buf.sample_indices(&mut rng, n) {
        counts[i] += 1;
    }
    let sigma = (n as f64 * 0.1 * 0.9).sqrt();
    let worst = counts
        .iter()
        .map(|&c| (c as f64 - 0.1 * n as f64).abs() / sigma)
        .fold(0.0, f64::max);
    Ok(Check::below("replay_uniformity", worst, 3.0))
}

pub fn check_reward_examples(cfg: &RunConfig) -> Check {
    let e = &cfg.episode;
    let z = Vector3::zeros();
    let hover = Command::hover();
    let cases = [
        (compute_reward(&z, &z, &hover, 0.75, e), 1.0),
        (compute_reward(&z, &z, &hover, 0.39, e), -e.collision_penalty),
        (
            compute_reward(&Vector3::new(0.5, 0.0, 0.0), &z, &hover, 0.75, e),
            0.5f64.powf(e.beta),
        ),
    ];
    let worst = cases.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Check {
        name: "reward_examples",
        passed: worst == 0.0,
        value: worst,
        threshold: f64::MIN_POSITIVE,
    }
}

pub fn run_all(cfg: &RunConfig) -> Result<Vec<Check>> {
    let mut out = vec![
        check_gradients(&backprop_gradient)?,
        check_actor_gradient()?,
        check_so3_drift()?,
    ];
    out.extend(check_dare(cfg)?);
    out.push(check_replay_uniformity()?);
    out.push(check_reward_examples(cfg));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pass() {
        for c in run_all(&RunConfig::default()).unwrap() {
            assert!(c.passed, "{}", c.line());
        }
    }

    #[test]
    fn injected_gradient_bug_is_caught() {
        let broken = |net: &Mlp, cache: &ForwardCache, w: &[f64]| -> Result<Vec<f64>> {
            let mut g = backprop_gradient(net, cache, w)?;
            g[3] *= 1.01;
            Ok(g)
        };
        let c = check_gradients(&broken).unwrap();
        assert!(!c.passed);
        assert!(c.line().starts_with("nnet_gradients"));
        assert!(c.line().contains("FAIL"));
    }
}
