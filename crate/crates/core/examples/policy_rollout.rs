//! Flies a trained policy and the LQG baseline through the same scenario
//! and prints the error every second. Argument: policy directory
//! (default: the committed desk-scale policy).
use std::path::PathBuf;

use mavtrack::dynamics::PhysParams;
use mavtrack::env::EpisodeConfig;
use mavtrack::eval::{paired_scenario, run_episode, run_seed};
use mavtrack::lqg::{LqgConfig, LqgController};
use mavtrack::sac::{Policy, PolicyController};
use mavtrack::target::TrajKind;

fn main() -> mavtrack::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/desk/policy"));
    let policy = Policy::load(&dir)?;
    println!("policy {} trained for {} env steps", dir.display(), policy.meta.env_steps);
    let cfg = EpisodeConfig::default();
    let vehicle = PhysParams::default();
    let (alpha, delta_ms) = (1.0, 0.0);
    let (scenario, noise_seed) = paired_scenario(&cfg, &vehicle, alpha, delta_ms, TrajKind::Sinusoid, run_seed(3, alpha, delta_ms, 0))?;
    let mut rl = PolicyController::new(policy);
    let mut lqg = LqgController::new(LqgConfig::default(), &vehicle, cfg.set_point_vec(), cfg.omega_max, cfg.lambda_max)?;
    let a = run_episode(&mut rl, &cfg, &vehicle, scenario.clone(), noise_seed, false)?;
    let b = run_episode(&mut lqg, &cfg, &vehicle, scenario, noise_seed, false)?;
    println!("{:>5} {:>10} {:>10}", "t [s]", "rl [cm]", "lqg [cm]");
    for k in (0..cfg.max_steps).step_by(20) {
        let cm = |v: &[f64]| v.get(k).map(|e| format!("{:.2}", 100.0 * e)).unwrap_or_else(|| "-".into());
        println!("{:>5.1} {:>10} {:>10}", k as f64 * vehicle.control_period, cm(&a.errors), cm(&b.errors));
    }
    println!("rl: {:?} at {:.2} s, lqg: {:?} at {:.2} s", a.status, a.end_time(0.05), b.status, b.end_time(0.05));
    Ok(())
}
