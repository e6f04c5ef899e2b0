//! A reduced robustness sweep (3 x 3 cells, 5 runs each) comparing the LQG
//! baseline with open-loop hovering. Pass a policy directory to add it.
use mavtrack::dynamics::PhysParams;
use mavtrack::env::EpisodeConfig;
use mavtrack::eval::{evaluate_grid, format_table, ControllerSpec, GridSpec};
use mavtrack::lqg::LqgConfig;
use mavtrack::sac::Policy;

fn main() -> mavtrack::Result<()> {
    let spec = GridSpec {
        alphas: vec![0.6, 1.0, 1.4],
        deltas_ms: vec![0.0, 20.0, 50.0],
        runs: 5,
        ..GridSpec::table2()
    };
    let mut controllers = vec![ControllerSpec::Lqg(LqgConfig::default()), ControllerSpec::Hover];
    if let Some(dir) = std::env::args().nth(1) {
        controllers.push(ControllerSpec::Policy(Box::new(Policy::load(std::path::Path::new(&dir))?)));
    }
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let results = evaluate_grid(&spec, &controllers, &EpisodeConfig::default(), &PhysParams::default(), workers, None, &|c| {
        eprintln!("  {} alpha {:.1} delay {:.0} ms done", c.controller, c.alpha, c.delta_ms)
    })?;
    print!("{}", format_table(&results));
    Ok(())
}
