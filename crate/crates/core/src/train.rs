//! Lock-step training loop: parallel episodes feed one SAC learner.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Command, PhysParams};
use crate::env::{Episode, EpisodeConfig, Status, ACTION_DIM, CRITIC_OBS_DIM};
use crate::error::{Error, Result};
use crate::sac::{PolicyMeta, ReplayBuffer, Sac, SacConfig, Transition, UpdateStats};

pub const METRICS_HEADER: &str = "wall_time,env_steps,episodes,mean_ep_reward,mean_err_m,collision_rate";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Stop after this many finished episodes.
    pub episodes: u64,
    pub seed: u64,
    /// Finished episodes between metrics rows.
    pub log_every: u64,
    /// Finished episodes between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 80_000,
            seed: 0,
            log_every: 50,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.log_every == 0 {
            return Err(Error::Config("train: episodes and log_every must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub wall_time: f64,
    pub env_steps: u64,
    pub episodes: u64,
    pub mean_ep_reward: f64,
    pub mean_err_m: f64,
    pub collision_rate: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{:.3},{},{},{:.6},{:.6},{:.4}",
            self.wall_time, self.env_steps, self.episodes, self.mean_ep_reward, self.mean_err_m, self.collision_rate
        )
    }
}

#[derive(Clone, Debug, Default)]
struct Window {
    episodes: u64,
    reward: f64,
    err: f64,
    collisions: u64,
}

struct Slot {
    rng: ChaCha8Rng,
    episode: Episode,
    reward: f64,
    err_sum: f64,
    steps: u64,
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    env_steps: u64,
    episodes: u64,
    update_budget: f64,
    env_rngs: Vec<ChaCha8Rng>,
}

/// Training session writing into `out_dir`:
/// `metrics.csv`, `checkpoint/` (full learner) and `policy/` (actor only).
pub struct Trainer {
    episode_cfg: EpisodeConfig,
    vehicle: PhysParams,
    train_cfg: TrainConfig,
    agent: Sac,
    replay: ReplayBuffer,
    slots: Vec<Slot>,
    env_steps: u64,
    episodes: u64,
    update_budget: f64,
    last_update: Option<UpdateStats>,
    window: Window,
    out_dir: PathBuf,
    started: Instant,
}

fn env_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

impl Trainer {
    pub fn new(
        episode_cfg: EpisodeConfig,
        vehicle: PhysParams,
        sac_cfg: SacConfig,
        train_cfg: TrainConfig,
        out_dir: &Path,
    ) -> Result<Self> {
        episode_cfg.validate()?;
        vehicle.validate()?;
        train_cfg.validate()?;
        let agent = Sac::new(
            sac_cfg,
            episode_cfg.actor_obs_dim(),
            CRITIC_OBS_DIM,
            ACTION_DIM,
            train_cfg.seed,
        )?;
        let rngs = (0..agent.config().num_envs).map(|i| env_rng(train_cfg.seed, i)).collect();
        Self::assemble(episode_cfg, vehicle, train_cfg, agent, rngs, 0, 0, 0.0, out_dir)
    }

    /// Continues from `out_dir/checkpoint`. The replay buffer is not part of
    /// the checkpoint and refills with on-policy data before updates resume.
    pub fn resume(
        episode_cfg: EpisodeConfig,
        vehicle: PhysParams,
        train_cfg: TrainConfig,
        out_dir: &Path,
    ) -> Result<Self> {
        let dir = out_dir.join("checkpoint");
        let agent = Sac::load(&dir)?;
        let path = dir.join("trainer.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::checkpoint(&path, e.to_string()))?;
        let st: TrainerState = serde_json::from_str(&text).map_err(|e| Error::checkpoint(&path, e.to_string()))?;
        if st.env_rngs.len() != agent.config().num_envs {
            return Err(Error::checkpoint(&path, "environment count does not match the learner config"));
        }
        Self::assemble(
            episode_cfg,
            vehicle,
            train_cfg,
            agent,
            st.env_rngs,
            st.env_steps,
            st.episodes,
            st.update_budget,
            out_dir,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        episode_cfg: EpisodeConfig,
        vehicle: PhysParams,
        train_cfg: TrainConfig,
        agent: Sac,
        rngs: Vec<ChaCha8Rng>,
        env_steps: u64,
        episodes: u64,
        update_budget: f64,
        out_dir: &Path,
    ) -> Result<Self> {
        let mut slots = Vec::with_capacity(rngs.len());
        for mut rng in rngs {
            let episode = Episode::reset(&mut rng, &episode_cfg, &vehicle)?;
            slots.push(Slot {
                rng,
                episode,
                reward: 0.0,
                err_sum: 0.0,
                steps: 0,
            });
        }
        let replay = ReplayBuffer::new(
            agent.config().replay_capacity,
            episode_cfg.actor_obs_dim(),
            CRITIC_OBS_DIM,
            ACTION_DIM,
        );
        fs::create_dir_all(out_dir)?;
        let metrics = out_dir.join("metrics.csv");
        if !metrics.exists() {
            fs::write(&metrics, format!("{METRICS_HEADER}\n"))?;
        }
        Ok(Self {
            episode_cfg,
            vehicle,
            train_cfg,
            agent,
            replay,
            slots,
            env_steps,
            episodes,
            update_budget,
            last_update: None,
            window: Window::default(),
            out_dir: out_dir.to_path_buf(),
            started: Instant::now(),
        })
    }

    pub fn agent(&self) -> &Sac {
        &self.agent
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    /// Losses of the most recent gradient update.
    pub fn last_update(&self) -> Option<UpdateStats> {
        self.last_update
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    fn warming_up(&self) -> bool {
        self.agent.updates() == 0 && self.replay.len() < self.agent.config().warmup_steps
    }

    fn learning_ready(&self) -> bool {
        let cfg = self.agent.config();
        self.replay.len() >= cfg.warmup_steps.max(cfg.batch_size)
    }

    /// Advances every environment by one control step, then runs the
    /// gradient updates earned by the collected steps.
    pub fn round(&mut self, on_row: &mut dyn FnMut(&MetricsRow)) -> Result<()> {
        let n = self.slots.len();
        let obs_dim = self.episode_cfg.actor_obs_dim();
        let actions: Vec<f64> = if self.warming_up() {
            let rng = self.agent.rng_mut();
            (0..n * ACTION_DIM).map(|_| rng.random_range(-1.0..=1.0)).collect()
        } else {
            let mut obs = Vec::with_capacity(n * obs_dim);
            for s in &self.slots {
                obs.extend_from_slice(s.episode.actor_obs());
            }
            self.agent.sample_actions(&obs, n)?
        };
        let (wmax, lmax) = (self.episode_cfg.omega_max, self.episode_cfg.lambda_max);
        let mut finished = 0usize;
        for i in 0..n {
            let a: [f64; ACTION_DIM] = actions[i * ACTION_DIM..(i + 1) * ACTION_DIM].try_into().unwrap();
            let slot = &mut self.slots[i];
            let actor_obs = slot.episode.actor_obs().to_vec();
            let critic_obs = slot.episode.critic_obs().to_vec();
            let result = slot.episode.step(Command::from_normalized(&a, wmax, lmax))?;
            self.replay.push(&Transition {
                actor_obs,
                critic_obs,
                action: a.to_vec(),
                reward: result.reward,
                next_actor_obs: result.actor_obs.clone(),
                next_critic_obs: result.critic_obs.to_vec(),
                terminal: result.status.is_terminal(),
            })?;
            self.env_steps += 1;
            slot.reward += result.reward;
            slot.err_sum += result.error.norm();
            slot.steps += 1;
            if result.status.is_done() {
                self.window.episodes += 1;
                self.window.reward += slot.reward;
                self.window.err += slot.err_sum / slot.steps as f64;
                if result.status == Status::Collision {
                    self.window.collisions += 1;
                }
                self.episodes += 1;
                finished += 1;
                slot.episode = Episode::reset(&mut slot.rng, &self.episode_cfg, &self.vehicle)?;
                slot.reward = 0.0;
                slot.err_sum = 0.0;
                slot.steps = 0;
                if self.episodes % self.train_cfg.log_every == 0 {
                    let row = self.flush_metrics()?;
                    on_row(&row);
                }
                let every = self.train_cfg.checkpoint_every;
                if every > 0 && self.episodes % every == 0 {
                    self.save_checkpoint()?;
                }
            }
        }

        if self.learning_ready() {
            let cfg = self.agent.config();
            self.update_budget += cfg.updates_per_step * n as f64 + cfg.updates_per_episode * finished as f64;
            let batch_size = self.agent.config().batch_size;
            while self.update_budget >= 1.0 {
                let batch = self.replay.sample(self.agent.rng_mut(), batch_size)?;
                self.last_update = Some(self.agent.update(&batch)?);
                self.update_budget -= 1.0;
            }
            if !self.agent.all_finite() {
                let diag = self.out_dir.join("diagnostic");
                self.agent.save(&diag)?;
                return Err(Error::Numeric(format!(
                    "non-finite network parameters after {} updates; state written to {}",
                    self.agent.updates(),
                    diag.display()
                )));
            }
        }
        Ok(())
    }

    fn flush_metrics(&mut self) -> Result<MetricsRow> {
        let w = std::mem::take(&mut self.window);
        let k = w.episodes.max(1) as f64;
        let row = MetricsRow {
            wall_time: self.started.elapsed().as_secs_f64(),
            env_steps: self.env_steps,
            episodes: self.episodes,
            mean_ep_reward: w.reward / k,
            mean_err_m: w.err / k,
            collision_rate: w.collisions as f64 / k,
        };
        let mut f = fs::OpenOptions::new().append(true).open(self.out_dir.join("metrics.csv"))?;
        writeln!(f, "{}", row.csv())?;
        Ok(row)
    }

    pub fn policy_meta(&self) -> PolicyMeta {
        PolicyMeta {
            sizes: self.agent.actor.sizes().to_vec(),
            activations: self.agent.actor.activations().to_vec(),
            bounds: self.episode_cfg.action_bounds(),
            history: self.episode_cfg.history,
            actor_obs_dim: self.episode_cfg.actor_obs_dim(),
            obs_scale: self.agent.config().actor_obs_scale,
            obs_clip: self.agent.config().obs_clip,
            env_steps: self.env_steps,
            updates: self.agent.updates(),
        }
    }

    /// Writes `checkpoint/` and `policy/`.
    pub fn save_checkpoint(&self) -> Result<()> {
        let dir = self.out_dir.join("checkpoint");
        self.agent.save(&dir)?;
        let st = TrainerState {
            env_steps: self.env_steps,
            episodes: self.episodes,
            update_budget: self.update_budget,
            env_rngs: self.slots.iter().map(|s| s.rng.clone()).collect(),
        };
        fs::write(dir.join("trainer.json"), serde_json::to_string_pretty(&st)?)?;
        self.agent.policy(self.policy_meta()).save(&self.out_dir.join("policy"))
    }

    /// Trains until the configured episode count, then writes the final checkpoint.
    pub fn run(&mut self, on_row: &mut dyn FnMut(&MetricsRow)) -> Result<()> {
        while self.episodes < self.train_cfg.episodes {
            self.round(on_row)?;
        }
        self.save_checkpoint()
    }
}
