//! Soft actor-critic with asymmetric observations.
//!
//! The actor reads the noisy error history and outputs a squashed Gaussian
//! over normalized actions in [-1, 1]^4. The twin critics read the
//! privileged critic observation concatenated with the action. Everything
//! the actor computes goes through `actor_obs` only.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::controller::{Controller, Observation};
use crate::dynamics::Command;
use crate::error::{Error, Result};
use crate::nnet::{log_one_minus_tanh_sq, Activation, Adam, Mlp, LOG_STD_MAX, LOG_STD_MIN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub lr: f64,
    /// Target-network averaging rate.
    pub tau: f64,
    pub target_entropy: f64,
    pub init_temperature: f64,
    /// Keep the temperature at `init_temperature`.
    pub fixed_temperature: bool,
    /// Gradient updates per collected environment step.
    pub updates_per_step: f64,
    /// Extra gradient updates credited per finished episode. Spends
    /// compute evenly over episodes rather than over environment steps.
    pub updates_per_episode: f64,
    /// Environment steps with uniform random actions before learning starts.
    pub warmup_steps: usize,
    pub num_envs: usize,
    pub replay_capacity: usize,
    pub hidden: Vec<usize>,
    /// Scale applied to the initial weights of the actor's output layer.
    pub actor_last_scale: f64,
    /// Initial bias of the log-std outputs. The default puts the initial
    /// entropy near `target_entropy`; with unit std the first sampled body
    /// rates average about 3 rad/s and tumble the vehicle.
    pub init_log_std: f64,
    /// Multiplies actor observations (m) before they enter the network.
    pub actor_obs_scale: f64,
    /// Per-entry multipliers for critic observations; empty means 1.
    pub critic_obs_scale: Vec<f64>,
    /// Scaled network inputs are clamped to `[-obs_clip, obs_clip]`; 0 disables.
    pub obs_clip: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 256,
            lr: 3e-4,
            tau: 0.005,
            target_entropy: -4.0,
            init_temperature: 0.1,
            fixed_temperature: false,
            updates_per_step: 1.0,
            updates_per_episode: 0.0,
            warmup_steps: 5000,
            num_envs: 8,
            replay_capacity: 1_000_000,
            hidden: vec![256, 256, 256],
            actor_last_scale: 0.01,
            init_log_std: -2.4,
            actor_obs_scale: 10.0,
            critic_obs_scale: vec![10.0, 10.0, 10.0, 3.0, 3.0, 3.0, 1.0, 1.0, 1.0],
            obs_clip: 10.0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("sac: {m}")));
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.num_envs == 0 || self.replay_capacity == 0 {
            return bad("batch_size, num_envs and replay_capacity must be > 0");
        }
        if !(self.lr > 0.0) || !(self.init_temperature > 0.0) {
            return bad("lr and init_temperature must be > 0");
        }
        if !(self.updates_per_step >= 0.0) || !self.updates_per_step.is_finite() {
            return bad("updates_per_step must be finite and >= 0");
        }
        if !(self.updates_per_episode >= 0.0) || !self.updates_per_episode.is_finite() {
            return bad("updates_per_episode must be finite and >= 0");
        }
        if !self.init_log_std.is_finite() || !self.actor_last_scale.is_finite() {
            return bad("init_log_std and actor_last_scale must be finite");
        }
        if !(self.actor_obs_scale > 0.0)
            || !self.actor_obs_scale.is_finite()
            || self.critic_obs_scale.iter().any(|x| !(*x > 0.0) || !x.is_finite())
        {
            return bad("observation scales must be finite and > 0");
        }
        if !(self.obs_clip >= 0.0) {
            return bad("obs_clip must be >= 0");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty and non-zero");
        }
        Ok(())
    }
}

/// One environment step as stored for learning. Actions are normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub actor_obs: Vec<f64>,
    pub critic_obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_actor_obs: Vec<f64>,
    pub next_critic_obs: Vec<f64>,
    /// Collision or divergence. Timeouts are not terminal.
    pub terminal: bool,
}

/// Row-major minibatch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub len: usize,
    pub actor_obs: Vec<f64>,
    pub critic_obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: Vec<f64>,
    pub next_actor_obs: Vec<f64>,
    pub next_critic_obs: Vec<f64>,
    pub terminal: Vec<bool>,
}

impl Batch {
    pub fn from_transitions(items: &[Transition]) -> Self {
        let mut b = Batch::default();
        for t in items {
            b.push(t);
        }
        b
    }

    fn push(&mut self, t: &Transition) {
        self.len += 1;
        self.actor_obs.extend_from_slice(&t.actor_obs);
        self.critic_obs.extend_from_slice(&t.critic_obs);
        self.action.extend_from_slice(&t.action);
        self.reward.push(t.reward);
        self.next_actor_obs.extend_from_slice(&t.next_actor_obs);
        self.next_critic_obs.extend_from_slice(&t.next_critic_obs);
        self.terminal.push(t.terminal);
    }
}

/// Fixed-capacity ring of transitions with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    dims: (usize, usize, usize),
    actor_obs: Vec<f64>,
    critic_obs: Vec<f64>,
    action: Vec<f64>,
    reward: Vec<f64>,
    next_actor_obs: Vec<f64>,
    next_critic_obs: Vec<f64>,
    terminal: Vec<bool>,
    cursor: usize,
    len: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, actor_dim: usize, critic_dim: usize, action_dim: usize) -> Self {
        Self {
            capacity,
            dims: (actor_dim, critic_dim, action_dim),
            actor_obs: Vec::new(),
            critic_obs: Vec::new(),
            action: Vec::new(),
            reward: Vec::new(),
            next_actor_obs: Vec::new(),
            next_critic_obs: Vec::new(),
            terminal: Vec::new(),
            cursor: 0,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        let (da, dc, du) = self.dims;
        if t.actor_obs.len() != da
            || t.next_actor_obs.len() != da
            || t.critic_obs.len() != dc
            || t.next_critic_obs.len() != dc
            || t.action.len() != du
        {
            return Err(Error::Shape(format!(
                "replay: transition shapes ({}, {}, {}, {}, {}) do not match ({da}, {dc}, {du})",
                t.actor_obs.len(),
                t.critic_obs.len(),
                t.action.len(),
                t.next_actor_obs.len(),
                t.next_critic_obs.len()
            )));
        }
        if !t.reward.is_finite() {
            return Err(Error::Numeric("replay: non-finite reward".into()));
        }
        if self.len < self.capacity {
            self.actor_obs.extend_from_slice(&t.actor_obs);
            self.critic_obs.extend_from_slice(&t.critic_obs);
            self.action.extend_from_slice(&t.action);
            self.reward.push(t.reward);
            self.next_actor_obs.extend_from_slice(&t.next_actor_obs);
            self.next_critic_obs.extend_from_slice(&t.next_critic_obs);
            self.terminal.push(t.terminal);
            self.len += 1;
        } else {
            let i = self.cursor;
            self.actor_obs[i * da..(i + 1) * da].copy_from_slice(&t.actor_obs);
            self.critic_obs[i * dc..(i + 1) * dc].copy_from_slice(&t.critic_obs);
            self.action[i * du..(i + 1) * du].copy_from_slice(&t.action);
            self.reward[i] = t.reward;
            self.next_actor_obs[i * da..(i + 1) * da].copy_from_slice(&t.next_actor_obs);
            self.next_critic_obs[i * dc..(i + 1) * dc].copy_from_slice(&t.next_critic_obs);
            self.terminal[i] = t.terminal;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// Stored item `i`, in storage order.
    pub fn get(&self, i: usize) -> Option<Transition> {
        if i >= self.len {
            return None;
        }
        let (da, dc, du) = self.dims;
        Some(Transition {
            actor_obs: self.actor_obs[i * da..(i + 1) * da].to_vec(),
            critic_obs: self.critic_obs[i * dc..(i + 1) * dc].to_vec(),
            action: self.action[i * du..(i + 1) * du].to_vec(),
            reward: self.reward[i],
            next_actor_obs: self.next_actor_obs[i * da..(i + 1) * da].to_vec(),
            next_critic_obs: self.next_critic_obs[i * dc..(i + 1) * dc].to_vec(),
            terminal: self.terminal[i],
        })
    }

    /// Uniform sample with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.len)).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Batch> {
        if self.len == 0 {
            return Err(Error::Usage("replay: cannot sample from an empty buffer".into()));
        }
        let (da, dc, du) = self.dims;
        let mut b = Batch {
            len: n,
            actor_obs: Vec::with_capacity(n * da),
            critic_obs: Vec::with_capacity(n * dc),
            action: Vec::with_capacity(n * du),
            reward: Vec::with_capacity(n),
            next_actor_obs: Vec::with_capacity(n * da),
            next_critic_obs: Vec::with_capacity(n * dc),
            terminal: Vec::with_capacity(n),
        };
        for i in self.sample_indices(rng, n) {
            b.actor_obs.extend_from_slice(&self.actor_obs[i * da..(i + 1) * da]);
            b.critic_obs.extend_from_slice(&self.critic_obs[i * dc..(i + 1) * dc]);
            b.action.extend_from_slice(&self.action[i * du..(i + 1) * du]);
            b.reward.push(self.reward[i]);
            b.next_actor_obs.extend_from_slice(&self.next_actor_obs[i * da..(i + 1) * da]);
            b.next_critic_obs.extend_from_slice(&self.next_critic_obs[i * dc..(i + 1) * dc]);
            b.terminal.push(self.terminal[i]);
        }
        Ok(b)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticStats {
    pub loss: [f64; 2],
    pub mean_q: f64,
    pub skipped: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ActorStats {
    pub loss: f64,
    pub mean_log_prob: f64,
    pub skipped: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub critic: CriticStats,
    pub actor: ActorStats,
    pub temperature: f64,
}

/// Squashed actions and log densities for a batch, given the actor output
/// and standard-normal noise. Returns (actions, log_probs, pre-squash z).
fn squash_batch(out: &[f64], noise: &[f64], batch: usize, adim: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut actions = vec![0.0; batch * adim];
    let mut z_all = vec![0.0; batch * adim];
    let mut logp = vec![0.0; batch];
    for b in 0..batch {
        let row = &out[b * 2 * adim..(b + 1) * 2 * adim];
        for i in 0..adim {
            let ls = row[adim + i].clamp(LOG_STD_MIN, LOG_STD_MAX);
            let xi = noise[b * adim + i];
            let z = row[i] + ls.exp() * xi;
            z_all[b * adim + i] = z;
            actions[b * adim + i] = z.tanh();
            logp[b] += -0.5 * xi * xi - ls - half_ln_2pi - log_one_minus_tanh_sq(z);
        }
    }
    (actions, logp, z_all)
}

/// Scales rows of width `scale.len()` elementwise and clamps to `clip` (0: no clamp).
fn scale_inputs(x: &[f64], scale: &[f64], clip: f64) -> Vec<f64> {
    x.chunks_exact(scale.len())
        .flat_map(|row| {
            row.iter().zip(scale).map(move |(v, s)| {
                let y = v * s;
                if clip > 0.0 {
                    y.clamp(-clip, clip)
                } else {
                    y
                }
            })
        })
        .collect()
}

fn concat_rows(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (da + db));
    for r in 0..n {
        out.extend_from_slice(&a[r * da..(r + 1) * da]);
        out.extend_from_slice(&b[r * db..(r + 1) * db]);
    }
    out
}

/// Learner state: networks, optimizers, temperature and the learner RNG.
#[derive(Clone, Debug)]
pub struct Sac {
    cfg: SacConfig,
    actor_dim: usize,
    critic_dim: usize,
    action_dim: usize,
    pub actor: Mlp,
    pub critics: [Mlp; 2],
    pub targets: [Mlp; 2],
    actor_opt: Adam,
    critic_opts: [Adam; 2],
    log_alpha: f64,
    alpha_opt: Adam,
    rng: ChaCha8Rng,
    updates: u64,
    faults: u64,
}

#[derive(Serialize, Deserialize)]
struct SacState {
    cfg: SacConfig,
    actor_dim: usize,
    critic_dim: usize,
    action_dim: usize,
    log_alpha: f64,
    updates: u64,
    faults: u64,
    rng: ChaCha8Rng,
}

impl Sac {
    pub fn new(cfg: SacConfig, actor_dim: usize, critic_dim: usize, action_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !cfg.critic_obs_scale.is_empty() && cfg.critic_obs_scale.len() != critic_dim {
            return Err(Error::Config(format!(
                "sac: critic_obs_scale has {} entries for {} critic inputs",
                cfg.critic_obs_scale.len(),
                critic_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut actor_sizes = vec![actor_dim];
        actor_sizes.extend(&cfg.hidden);
        actor_sizes.push(2 * action_dim);
        let mut critic_sizes = vec![critic_dim + action_dim];
        critic_sizes.extend(&cfg.hidden);
        critic_sizes.push(1);
        let mut acts = vec![Activation::Relu; cfg.hidden.len()];
        acts.push(Activation::Linear);
        let mut actor = Mlp::new(&actor_sizes, &acts, cfg.actor_last_scale, &mut rng)?;
        let last = actor.num_layers() - 1;
        let (_, bias) = actor.layer_mut(last);
        bias[action_dim..].fill(cfg.init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX));
        let c1 = Mlp::new(&critic_sizes, &acts, 1.0, &mut rng)?;
        let c2 = Mlp::new(&critic_sizes, &acts, 1.0, &mut rng)?;
        let alpha_opt = Adam::new(1, cfg.lr);
        Ok(Self {
            actor_opt: Adam::new(actor.num_params(), cfg.lr),
            critic_opts: [Adam::new(c1.num_params(), cfg.lr), Adam::new(c2.num_params(), cfg.lr)],
            targets: [c1.clone(), c2.clone()],
            critics: [c1, c2],
            actor,
            log_alpha: cfg.init_temperature.ln(),
            alpha_opt,
            rng,
            updates: 0,
            faults: 0,
            actor_dim,
            critic_dim,
            action_dim,
            cfg,
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.cfg
    }

    pub fn temperature(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn set_temperature(&mut self, alpha: f64) {
        self.log_alpha = alpha.ln();
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Updates skipped because of non-finite losses or gradients.
    pub fn faults(&self) -> u64 {
        self.faults
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn all_finite(&self) -> bool {
        self.actor.all_finite()
            && self.critics.iter().chain(&self.targets).all(Mlp::all_finite)
            && self.log_alpha.is_finite()
    }

    fn actor_input(&self, actor_obs: &[f64]) -> Vec<f64> {
        scale_inputs(actor_obs, &vec![self.cfg.actor_obs_scale; self.actor_dim], self.cfg.obs_clip)
    }

    fn critic_input(&self, critic_obs: &[f64]) -> Vec<f64> {
        if self.cfg.critic_obs_scale.is_empty() {
            scale_inputs(critic_obs, &vec![1.0; self.critic_dim], self.cfg.obs_clip)
        } else {
            scale_inputs(critic_obs, &self.cfg.critic_obs_scale, self.cfg.obs_clip)
        }
    }

    fn draw_noise(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(&mut self.rng)).collect()
    }

    /// Samples normalized actions for a batch of actor observations.
    pub fn sample_actions(&mut self, actor_obs: &[f64], batch: usize) -> Result<Vec<f64>> {
        let out = self.actor.predict(&self.actor_input(actor_obs), batch)?;
        let noise = self.draw_noise(batch * self.action_dim);
        Ok(squash_batch(&out, &noise, batch, self.action_dim).0)
    }

    /// `tanh(mean)` for a batch of actor observations.
    pub fn deterministic_actions(&self, actor_obs: &[f64], batch: usize) -> Result<Vec<f64>> {
        deterministic_actions(&self.actor, self.action_dim, &self.actor_input(actor_obs), batch)
    }

    fn q_min(&self, nets: &[Mlp; 2], critic_obs: &[f64], actions: &[f64], n: usize) -> Result<Vec<f64>> {
        let x = concat_rows(&self.critic_input(critic_obs), self.critic_dim, actions, self.action_dim, n);
        let q1 = nets[0].predict(&x, n)?;
        let q2 = nets[1].predict(&x, n)?;
        Ok(q1.iter().zip(&q2).map(|(a, b)| a.min(*b)).collect())
    }

    /// Bellman targets `r + gamma (1 - terminal) (min Qbar(o_c', a') - alpha log pi(a'|o'))`
    /// with `a'` drawn from the current actor using the given noise.
    pub fn bellman_targets(&self, batch: &Batch, noise: &[f64]) -> Result<Vec<f64>> {
        let n = batch.len;
        let out = self.actor.predict(&self.actor_input(&batch.next_actor_obs), n)?;
        let (a_next, logp, _) = squash_batch(&out, noise, n, self.action_dim);
        let q_next = self.q_min(&self.targets, &batch.next_critic_obs, &a_next, n)?;
        let alpha = self.temperature();
        Ok((0..n)
            .map(|i| {
                if batch.terminal[i] {
                    batch.reward[i]
                } else {
                    batch.reward[i] + self.cfg.gamma * (q_next[i] - alpha * logp[i])
                }
            })
            .collect())
    }

    /// Mean squared error of each critic against fixed targets.
    pub fn critic_losses(&self, batch: &Batch, targets: &[f64]) -> Result<[f64; 2]> {
        let x = concat_rows(
            &self.critic_input(&batch.critic_obs),
            self.critic_dim,
            &batch.action,
            self.action_dim,
            batch.len,
        );
        let mut losses = [0.0; 2];
        for (k, net) in self.critics.iter().enumerate() {
            let q = net.predict(&x, batch.len)?;
            losses[k] = q.iter().zip(targets).map(|(q, y)| (q - y).powi(2)).sum::<f64>() / batch.len as f64;
        }
        Ok(losses)
    }

    pub fn critic_update(&mut self, batch: &Batch) -> Result<CriticStats> {
        let n = batch.len;
        let noise = self.draw_noise(n * self.action_dim);
        let y = self.bellman_targets(batch, &noise)?;
        let x = concat_rows(&self.critic_input(&batch.critic_obs), self.critic_dim, &batch.action, self.action_dim, n);
        let mut stats = CriticStats::default();
        for k in 0..2 {
            let cache = self.critics[k].forward(&x, n)?;
            let q = cache.output();
            let loss = q.iter().zip(&y).map(|(q, y)| (q - y).powi(2)).sum::<f64>() / n as f64;
            stats.loss[k] = loss;
            if k == 0 {
                stats.mean_q = q.iter().sum::<f64>() / n as f64;
            }
            if !loss.is_finite() {
                self.faults += 1;
                stats.skipped = true;
                continue;
            }
            let grad_out: Vec<f64> = q.iter().zip(&y).map(|(q, y)| 2.0 * (q - y) / n as f64).collect();
            let mut grads = vec![0.0; self.critics[k].num_params()];
            self.critics[k].backward(&cache, &grad_out, &mut grads, false)?;
            if !self.critic_opts[k].step(self.critics[k].params_mut(), &grads)? {
                self.faults += 1;
                stats.skipped = true;
            }
        }
        Ok(stats)
    }

    /// Actor loss `mean(alpha log pi(a|o) - min Q(o_c, a))` and its gradient
    /// with respect to the actor parameters, for given reparameterization noise.
    pub fn actor_loss_and_grad(&self, batch: &Batch, noise: &[f64]) -> Result<(f64, Vec<f64>, f64)> {
        let n = batch.len;
        let ad = self.action_dim;
        let cache = self.actor.forward(&self.actor_input(&batch.actor_obs), n)?;
        let out = cache.output();
        let (actions, logp, z) = squash_batch(out, noise, n, ad);
        let x = concat_rows(&self.critic_input(&batch.critic_obs), self.critic_dim, &actions, ad, n);
        let c1 = self.critics[0].forward(&x, n)?;
        let c2 = self.critics[1].forward(&x, n)?;
        let (q1, q2) = (c1.output(), c2.output());
        let alpha = self.temperature();
        let inv_n = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut g1 = vec![0.0; n];
        let mut g2 = vec![0.0; n];
        for i in 0..n {
            let q = q1[i].min(q2[i]);
            loss += (alpha * logp[i] - q) * inv_n;
            if q1[i] <= q2[i] {
                g1[i] = -inv_n;
            } else {
                g2[i] = -inv_n;
            }
        }
        let dx1 = self.critics[0].input_gradient(&c1, &g1)?;
        let dx2 = self.critics[1].input_gradient(&c2, &g2)?;
        let width = self.critic_dim + ad;
        let mut out_grad = vec![0.0; n * 2 * ad];
        for b in 0..n {
            let row = &out[b * 2 * ad..(b + 1) * 2 * ad];
            for i in 0..ad {
                let col = b * width + self.critic_dim + i;
                let dq_da = dx1[col] + dx2[col];
                let t = actions[b * ad + i];
                // d/dz of alpha * (-log(1 - tanh^2 z)) is 2 alpha tanh z.
                let dz = dq_da * (1.0 - t * t) + alpha * inv_n * 2.0 * t;
                let raw_ls = row[ad + i];
                let ls = raw_ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
                out_grad[b * 2 * ad + i] = dz;
                let inside = raw_ls > LOG_STD_MIN && raw_ls < LOG_STD_MAX;
                out_grad[b * 2 * ad + ad + i] = if inside {
                    dz * ls.exp() * noise[b * ad + i] - alpha * inv_n
                } else {
                    0.0
                };
                debug_assert!((z[b * ad + i] - (row[i] + ls.exp() * noise[b * ad + i])).abs() < 1e-12);
            }
        }
        let mut grads = vec![0.0; self.actor.num_params()];
        self.actor.backward(&cache, &out_grad, &mut grads, false)?;
        let mean_logp = logp.iter().sum::<f64>() * inv_n;
        Ok((loss, grads, mean_logp))
    }

    pub fn actor_update(&mut self, batch: &Batch) -> Result<ActorStats> {
        let noise = self.draw_noise(batch.len * self.action_dim);
        let (loss, grads, mean_log_prob) = self.actor_loss_and_grad(batch, &noise)?;
        let mut stats = ActorStats {
            loss,
            mean_log_prob,
            skipped: false,
        };
        if !loss.is_finite() || !self.actor_opt.step(self.actor.params_mut(), &grads)? {
            self.faults += 1;
            stats.skipped = true;
        }
        Ok(stats)
    }

    /// Gradient of the temperature loss `-log_alpha (log pi + target)` with
    /// respect to `log_alpha`.
    pub fn temperature_gradient(&self, mean_log_prob: f64) -> f64 {
        -(mean_log_prob + self.cfg.target_entropy)
    }

    pub fn temperature_update(&mut self, mean_log_prob: f64) -> Result<f64> {
        if !self.cfg.fixed_temperature {
            let g = self.temperature_gradient(mean_log_prob);
            let mut p = [self.log_alpha];
            if !self.alpha_opt.step(&mut p, &[g])? {
                self.faults += 1;
            }
            self.log_alpha = p[0];
        }
        Ok(self.temperature())
    }

    /// One full update: critics, actor, temperature, then target averaging.
    pub fn update(&mut self, batch: &Batch) -> Result<UpdateStats> {
        let critic = self.critic_update(batch)?;
        let actor = self.actor_update(batch)?;
        let temperature = if actor.skipped {
            self.temperature()
        } else {
            self.temperature_update(actor.mean_log_prob)?
        };
        for k in 0..2 {
            let (src, dst) = (&self.critics[k], &mut self.targets[k]);
            dst.polyak_from(src, self.cfg.tau)?;
        }
        self.updates += 1;
        Ok(UpdateStats {
            critic,
            actor,
            temperature,
        })
    }

    pub fn policy(&self, obs_meta: PolicyMeta) -> Policy {
        Policy {
            actor: self.actor.clone(),
            meta: obs_meta,
        }
    }

    /// Writes every learner component into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.actor.save(&dir.join("actor.bin"))?;
        for k in 0..2 {
            self.critics[k].save(&dir.join(format!("critic{}.bin", k + 1)))?;
            self.targets[k].save(&dir.join(format!("target{}.bin", k + 1)))?;
            self.critic_opts[k].save(&dir.join(format!("critic{}.adam", k + 1)))?;
        }
        self.actor_opt.save(&dir.join("actor.adam"))?;
        self.alpha_opt.save(&dir.join("temperature.adam"))?;
        let state = SacState {
            cfg: self.cfg.clone(),
            actor_dim: self.actor_dim,
            critic_dim: self.critic_dim,
            action_dim: self.action_dim,
            log_alpha: self.log_alpha,
            updates: self.updates,
            faults: self.faults,
            rng: self.rng.clone(),
        };
        fs::write(dir.join("learner.json"), serde_json::to_string_pretty(&state)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("learner.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::checkpoint(&path, e.to_string()))?;
        let st: SacState = serde_json::from_str(&text).map_err(|e| Error::checkpoint(&path, e.to_string()))?;
        let load_net = |name: &str| Mlp::load(&dir.join(name));
        let load_adam = |name: &str| Adam::load(&dir.join(name));
        let actor = load_net("actor.bin")?;
        let critics = [load_net("critic1.bin")?, load_net("critic2.bin")?];
        let targets = [load_net("target1.bin")?, load_net("target2.bin")?];
        let actor_opt = load_adam("actor.adam")?;
        let critic_opts = [load_adam("critic1.adam")?, load_adam("critic2.adam")?];
        let alpha_opt = load_adam("temperature.adam")?;
        let shapes_ok = actor.input_dim() == st.actor_dim
            && actor.output_dim() == 2 * st.action_dim
            && critics.iter().chain(&targets).all(|c| {
                c.input_dim() == st.critic_dim + st.action_dim && c.same_shape(&critics[0])
            })
            && actor_opt.to_bytes().len() == Adam::new(actor.num_params(), 0.0).to_bytes().len()
            && critic_opts.iter().all(|o| o.to_bytes().len() == Adam::new(critics[0].num_params(), 0.0).to_bytes().len());
        if !shapes_ok {
            return Err(Error::checkpoint(dir, "network or optimizer shapes are inconsistent"));
        }
        Ok(Self {
            cfg: st.cfg,
            actor_dim: st.actor_dim,
            critic_dim: st.critic_dim,
            action_dim: st.action_dim,
            actor,
            critics,
            targets,
            actor_opt,
            critic_opts,
            log_alpha: st.log_alpha,
            alpha_opt,
            rng: st.rng,
            updates: st.updates,
            faults: st.faults,
        })
    }
}

fn deterministic_actions(actor: &Mlp, action_dim: usize, actor_obs: &[f64], batch: usize) -> Result<Vec<f64>> {
    let out = actor.predict(actor_obs, batch)?;
    Ok(out
        .chunks_exact(2 * action_dim)
        .flat_map(|row| row[..action_dim].iter().map(|m| m.tanh()))
        .collect())
}

/// Sidecar metadata written next to a policy file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    /// Physical action bounds (omega x, y, z in rad/s; lambda in N/s).
    pub bounds: [f64; 4],
    pub history: usize,
    pub actor_obs_dim: usize,
    /// Input scaling applied before the network, as in training.
    pub obs_scale: f64,
    pub obs_clip: f64,
    pub env_steps: u64,
    pub updates: u64,
}

/// Deployable actor. Contains no critic.
#[derive(Clone, Debug)]
pub struct Policy {
    pub actor: Mlp,
    pub meta: PolicyMeta,
}

impl Policy {
    pub fn bin_path(dir: &Path) -> PathBuf {
        dir.join("policy.bin")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.actor.save(&Self::bin_path(dir))?;
        fs::write(dir.join("policy.json"), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    /// Loads `policy.bin` and `policy.json` from `dir`, or from the directory
    /// containing `path` when a file is given.
    pub fn load(path: &Path) -> Result<Self> {
        let dir = if path.is_dir() {
            path.to_path_buf()
        } else {
            path.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        let actor = Mlp::load(&Self::bin_path(&dir))?;
        let meta_path = dir.join("policy.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::checkpoint(&meta_path, e.to_string()))?;
        let meta: PolicyMeta =
            serde_json::from_str(&text).map_err(|e| Error::checkpoint(&meta_path, e.to_string()))?;
        if meta.sizes != actor.sizes() || meta.actor_obs_dim != actor.input_dim() || actor.output_dim() != 8 {
            return Err(Error::checkpoint(&meta_path, "metadata does not match the network"));
        }
        Ok(Self { actor, meta })
    }

    /// Deterministic action `bounds * tanh(mean)`.
    pub fn command(&self, actor_obs: &[f64]) -> Result<Command> {
        let x = scale_inputs(actor_obs, &vec![self.meta.obs_scale; actor_obs.len()], self.meta.obs_clip);
        let a = deterministic_actions(&self.actor, 4, &x, 1)?;
        let b = self.meta.bounds;
        Ok(Command::new(nalgebra::Vector3::new(a[0] * b[0], a[1] * b[1], a[2] * b[2]), a[3] * b[3]))
    }
}

/// Runs a policy in the loop. A failed forward pass commands hover.
#[derive(Clone, Debug)]
pub struct PolicyController {
    policy: Policy,
}

impl PolicyController {
    pub fn new(policy: Policy) -> Self {
        Self { policy }
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }
}

impl Controller for PolicyController {
    fn name(&self) -> &str {
        "rl"
    }

    fn reset(&mut self) {}

    fn act(&mut self, obs: &Observation<'_>) -> Command {
        self.policy.command(obs.actor_obs).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> SacConfig {
        SacConfig {
            hidden: vec![8, 8],
            batch_size: 4,
            critic_obs_scale: vec![],
            ..SacConfig::default()
        }
    }

    fn transition(tag: f64, terminal: bool) -> Transition {
        Transition {
            actor_obs: vec![tag; 3],
            critic_obs: vec![tag; 2],
            action: vec![0.1 * tag; 4],
            reward: tag,
            next_actor_obs: vec![tag + 0.5; 3],
            next_critic_obs: vec![tag + 0.5; 2],
            terminal,
        }
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut buf = ReplayBuffer::new(3, 3, 2, 4);
        for i in 0..4 {
            buf.push(&transition(i as f64, false)).unwrap();
        }
        assert_eq!(buf.len(), 3);
        let rewards: Vec<f64> = (0..3).map(|i| buf.get(i).unwrap().reward).collect();
        assert!(!rewards.contains(&0.0));
        assert!(rewards.contains(&3.0));
    }

    #[test]
    fn single_item_sample() {
        let mut buf = ReplayBuffer::new(10, 3, 2, 4);
        let t = transition(2.0, true);
        buf.push(&t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(buf.sample(&mut rng, 1).unwrap(), Batch::from_transitions(&[t]));
    }

    #[test]
    fn replay_rejects_bad_shapes() {
        let mut buf = ReplayBuffer::new(10, 3, 2, 4);
        let mut t = transition(1.0, false);
        t.action.pop();
        assert!(matches!(buf.push(&t), Err(Error::Shape(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(buf.sample(&mut rng, 1).is_err());
    }

    #[test]
    fn terminal_target_is_reward() {
        let sac = Sac::new(tiny_cfg(), 3, 2, 4, 1).unwrap();
        let batch = Batch::from_transitions(&[transition(-10.0, true), transition(3.0, true)]);
        let y = sac.bellman_targets(&batch, &[0.3; 8]).unwrap();
        assert_eq!(y, vec![-10.0, 3.0]);
    }

    #[test]
    fn zero_discount_target_is_reward() {
        let cfg = SacConfig {
            gamma: 0.0,
            ..tiny_cfg()
        };
        let sac = Sac::new(cfg, 3, 2, 4, 1).unwrap();
        let batch = Batch::from_transitions(&[transition(0.7, false), transition(-0.2, false)]);
        let y = sac.bellman_targets(&batch, &[0.0; 8]).unwrap();
        assert_eq!(y, vec![0.7, -0.2]);
    }

    #[test]
    fn fixed_temperature_stays_put() {
        let cfg = SacConfig {
            fixed_temperature: true,
            init_temperature: 0.3,
            ..tiny_cfg()
        };
        let mut sac = Sac::new(cfg, 3, 2, 4, 1).unwrap();
        for _ in 0..10 {
            sac.temperature_update(5.0).unwrap();
        }
        assert!((sac.temperature() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn temperature_direction() {
        let mut sac = Sac::new(tiny_cfg(), 3, 2, 4, 1).unwrap();
        // Entropy above target: -log pi = 10 > -4.
        let before = sac.temperature();
        sac.temperature_update(-10.0).unwrap();
        assert!(sac.temperature() < before);
        // At the target the gradient vanishes.
        assert_eq!(sac.temperature_gradient(4.0), 0.0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut sac = Sac::new(tiny_cfg(), 3, 2, 4, 9).unwrap();
        let batch = Batch::from_transitions(&[transition(0.2, false), transition(-1.0, true)]);
        sac.update(&batch).unwrap();
        sac.save(dir.path()).unwrap();
        let mut loaded = Sac::load(dir.path()).unwrap();
        assert_eq!(loaded.actor, sac.actor);
        assert_eq!(loaded.critics, sac.critics);
        assert_eq!(loaded.targets, sac.targets);
        assert_eq!(loaded.temperature(), sac.temperature());
        // Identical continuation.
        let a = sac.update(&batch).unwrap();
        let b = loaded.update(&batch).unwrap();
        assert_eq!(a, b);
        assert_eq!(loaded.actor, sac.actor);
    }
}
