//! One validation-model episode of the LQG baseline against a sinusoidal
//! target. Optional argument: path for a plot CSV.
use mavtrack::dynamics::PhysParams;
use mavtrack::env::EpisodeConfig;
use mavtrack::eval::{paired_scenario, plot_csv, run_episode, run_seed, summarize};
use mavtrack::lqg::{LqgConfig, LqgController};
use mavtrack::target::TrajKind;

fn main() -> mavtrack::Result<()> {
    let cfg = EpisodeConfig::default();
    let vehicle = PhysParams::default();
    for (alpha, delta_ms) in [(1.0, 0.0), (1.4, 50.0), (0.6, 50.0)] {
        let (scenario, noise_seed) = paired_scenario(&cfg, &vehicle, alpha, delta_ms, TrajKind::Sinusoid, run_seed(0, alpha, delta_ms, 0))?;
        let mut ctl = LqgController::new(LqgConfig::default(), &vehicle, cfg.set_point_vec(), cfg.omega_max, cfg.lambda_max)?;
        let log = run_episode(&mut ctl, &cfg, &vehicle, scenario, noise_seed, true)?;
        let (mean, std, _) = summarize(std::slice::from_ref(&log), 0.0, vehicle.control_period);
        let (steady, _, _) = summarize(std::slice::from_ref(&log), 5.0, vehicle.control_period);
        println!(
            "alpha {alpha:.1} delay {delta_ms:>2.0} ms: {:?} after {:.1} s, |e| mean {mean:.2} cm std {std:.2} cm, after 5 s {steady:.2} cm",
            log.status,
            log.end_time(vehicle.control_period)
        );
        if let Some(path) = std::env::args().nth(1) {
            if alpha == 1.0 {
                std::fs::write(&path, plot_csv(&log))?;
                println!("  wrote {path}");
            }
        }
    }
    Ok(())
}
