//! A short asymmetric SAC run with small networks. Writes metrics, a
//! checkpoint and the deployable policy under the given directory
//! (default `runs/example-train`).
use mavtrack::dynamics::PhysParams;
use mavtrack::env::EpisodeConfig;
use mavtrack::sac::SacConfig;
use mavtrack::train::{TrainConfig, Trainer};

fn main() -> mavtrack::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example-train".into());
    let sac = SacConfig {
        hidden: vec![64, 64],
        batch_size: 128,
        warmup_steps: 1000,
        num_envs: 4,
        ..SacConfig::default()
    };
    let train = TrainConfig {
        episodes: 60,
        seed: 7,
        log_every: 20,
        checkpoint_every: 0,
    };
    let mut trainer = Trainer::new(EpisodeConfig::default(), PhysParams::default(), sac, train, std::path::Path::new(&out))?;
    println!("wall_time,env_steps,episodes,mean_ep_reward,mean_err_m,collision_rate");
    trainer.run(&mut |row| println!("{}", row.csv()))?;
    println!("{} updates; policy in {out}/policy", trainer.agent().updates());
    Ok(())
}
