use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mavtrack::config::RunConfig;
use mavtrack::env::Status;
use mavtrack::eval::{
    evaluate_grid, format_table, paired_scenario, plot_csv, run_episode, run_seed, tune_lqg, ControllerSpec,
    GridOutput, GridSpec,
};
use mavtrack::lqg::LqgGains;
use mavtrack::sac::Policy;
use mavtrack::target::TrajKind;
use mavtrack::train::Trainer;
use mavtrack::{selfcheck, Error, Result};

#[derive(Parser)]
#[command(name = "mavtrack", version, about = "Quadrotor target tracking: SAC training, LQG baseline, robustness grids")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set sac.lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a SAC policy with domain randomization.
    Train(TrainArgs),
    /// Evaluate controllers over an (alpha, delay) grid.
    Eval(EvalArgs),
    /// Run and log one episode.
    Simulate(SimArgs),
    /// Sweep the LQR weights on one cell and keep the best.
    TuneLqg(TuneArgs),
    /// Gradient, integrator, Riccati and sampling checks.
    Selfcheck(SelfArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    episodes: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel environments feeding the learner.
    #[arg(long)]
    envs: Option<usize>,
    /// Run directory (default: <output root>/train-seed<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from the checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    Lqg,
    Rl,
    Hover,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    /// 9 alphas x 6 delays, 20 runs per cell.
    Table2,
    /// The `eval` section of the config.
    Config,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Policy directory or policy.bin; implies `--controller rl`.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Controllers to compare on paired scenarios. Repeatable.
    #[arg(long, value_enum)]
    controller: Vec<Kind>,
    #[arg(long, value_enum, conflicts_with_all = ["alpha", "delta_ms"])]
    grid: Option<Grid>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "delta-ms")]
    delta_ms: Option<f64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Seconds excluded from the start of each run.
    #[arg(long = "skip-transient")]
    skip_transient: Option<f64>,
    /// Output directory (default: <output root>/eval).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "lqg")]
    controller: Kind,
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long = "delta-ms", default_value_t = 0.0)]
    delta_ms: f64,
    #[arg(long, default_value = "sinusoid")]
    kind: TrajKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON-lines step log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Plot CSV: time, positions, error.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "q-pos", value_delimiter = ',', default_values_t = [1.0, 3.0, 10.0, 30.0, 100.0])]
    q_pos: Vec<f64>,
    #[arg(long = "q-vel", value_delimiter = ',', default_values_t = [0.3, 1.0, 3.0, 10.0])]
    q_vel: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long = "delta-ms", default_value_t = 0.0)]
    delta_ms: f64,
    #[arg(long, default_value_t = 20)]
    runs: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Gains file (default: <output root>/lqg_gains.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelfArgs {
    #[command(flatten)]
    common: Common,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let base = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    base.with_overrides(&c.overrides)
}

fn load_policy(path: Option<&Path>) -> Result<Policy> {
    let path = path.ok_or_else(|| Error::Usage("the rl controller needs --policy".into()))?;
    Policy::load(path)
}

fn controller_spec(kind: Kind, cfg: &RunConfig, policy: Option<&Path>) -> Result<ControllerSpec> {
    Ok(match kind {
        Kind::Lqg => ControllerSpec::Lqg(cfg.lqg.clone()),
        Kind::Rl => ControllerSpec::Policy(Box::new(load_policy(policy)?)),
        Kind::Hover => ControllerSpec::Hover,
    })
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(n) = a.episodes {
        cfg.train.episodes = n;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = a.envs {
        cfg.sac.num_envs = n;
    }
    cfg.validate()?;
    let out = a
        .out
        .unwrap_or_else(|| cfg.output_root().join(format!("train-seed{}", cfg.train.seed)));
    let mut trainer = if a.resume {
        Trainer::resume(cfg.episode.clone(), cfg.vehicle.clone(), cfg.train.clone(), &out)?
    } else {
        Trainer::new(cfg.episode.clone(), cfg.vehicle.clone(), cfg.sac.clone(), cfg.train.clone(), &out)?
    };
    cfg.snapshot(&out)?;
    eprintln!("training into {} (config {})", out.display(), &cfg.hash()[..12]);
    trainer.run(&mut |r| {
        eprintln!(
            "ep {:>6}  steps {:>9}  reward {:>9.2}  err {:>7.3} m  collisions {:.2}",
            r.episodes, r.env_steps, r.mean_ep_reward, r.mean_err_m, r.collision_rate
        )
    })?;
    println!("{}", out.join("policy").display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    let mut spec = match a.grid {
        Some(Grid::Table2) => GridSpec::table2(),
        Some(Grid::Config) => cfg.eval.clone(),
        None if a.alpha.is_some() || a.delta_ms.is_some() => {
            GridSpec::single(a.alpha.unwrap_or(1.0), a.delta_ms.unwrap_or(0.0), cfg.eval.runs)
        }
        None => cfg.eval.clone(),
    };
    if let Some(r) = a.runs {
        spec.runs = r;
    }
    if let Some(s) = a.seed {
        spec.base_seed = s;
    }
    if let Some(t) = a.skip_transient {
        spec.skip_transient = t;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    spec.validate()?;
    cfg.eval = spec.clone();

    let mut kinds = Vec::new();
    if a.policy.is_some() {
        kinds.push(Kind::Rl);
    }
    for &k in &a.controller {
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    if kinds.is_empty() {
        kinds.push(Kind::Lqg);
    }
    let controllers = kinds
        .iter()
        .map(|&k| controller_spec(k, &cfg, a.policy.as_deref()))
        .collect::<Result<Vec<_>>>()?;

    for (al, d) in spec.extrapolated_cells(&cfg.episode) {
        eprintln!("note: cell alpha={al} delay={d} ms lies outside the training ranges");
    }
    let out = a.out.unwrap_or_else(|| cfg.output_root().join("eval"));
    fs::create_dir_all(&out)?;
    cfg.snapshot(&out)?;
    let csv = out.join("results.csv");
    let jsonl = out.join("episodes.jsonl");
    let results = evaluate_grid(
        &spec,
        &controllers,
        &cfg.episode,
        &cfg.vehicle,
        cfg.workers(),
        Some(GridOutput {
            results_csv: &csv,
            episodes_jsonl: Some(&jsonl),
        }),
        &|r| eprintln!("{}", r.csv()),
    )?;
    print!("{}", format_table(&results));
    println!("{}", csv.display());
    Ok(())
}

fn simulate(a: SimArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let spec = controller_spec(a.controller, &cfg, a.policy.as_deref())?;
    let mut ctl = spec.build(&cfg.episode, &cfg.vehicle)?;
    let seed = run_seed(a.seed, a.alpha, a.delta_ms, 0);
    let (scenario, noise_seed) = paired_scenario(&cfg.episode, &cfg.vehicle, a.alpha, a.delta_ms, a.kind, seed)?;
    let log = run_episode(ctl.as_mut(), &cfg.episode, &cfg.vehicle, scenario, noise_seed, true)?;

    if let Some(p) = &a.log {
        let mut text = String::new();
        for r in &log.records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        fs::write(p, text)?;
    }
    if let Some(p) = &a.plot {
        fs::write(p, plot_csv(&log))?;
    }

    let period = cfg.vehicle.control_period;
    let n = log.errors.len();
    let mean = 100.0 * log.errors.iter().sum::<f64>() / n as f64;
    let tail = &log.errors[n / 2..];
    let steady = 100.0 * tail.iter().sum::<f64>() / tail.len() as f64;
    println!(
        "{} alpha={} delay={} ms kind={}  steps={}  mean_err={:.2} cm  steady_err={:.2} cm",
        spec.name(),
        a.alpha,
        a.delta_ms,
        a.kind,
        log.steps,
        mean,
        steady
    );
    let t = log.end_time(period);
    match log.status {
        Status::Collision => println!("collision@{t:.2}"),
        Status::Divergence => println!("divergence@{t:.2}"),
        _ => println!("completed@{t:.2}"),
    }
    Ok(())
}

fn tune(a: TuneArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let mut spec = GridSpec::single(a.alpha, a.delta_ms, a.runs);
    spec.base_seed = a.seed.unwrap_or(cfg.eval.base_seed);
    let ranked = tune_lqg(&cfg.lqg, &a.q_pos, &a.q_vel, &spec, &cfg.episode, &cfg.vehicle)?;
    println!("{:>8} {:>8} {:>10} {:>10} {:>6}", "q_pos", "q_vel", "mean_cm", "std_cm", "fails");
    for r in &ranked {
        println!(
            "{:>8} {:>8} {:>10.3} {:>10.3} {:>6}",
            r.q_pos,
            r.q_vel,
            r.cell.mean_err_cm,
            r.cell.std_err_cm,
            r.cell.collisions + r.cell.divergences
        );
    }
    let best = &ranked[0];
    let lqg = mavtrack::lqg::LqgConfig {
        q_pos: best.q_pos,
        q_vel: best.q_vel,
        ..cfg.lqg.clone()
    };
    let gains = LqgGains::design(&lqg, cfg.vehicle.control_period)?;
    let doc = serde_json::json!({ "lqg": lqg, "gains": gains, "ranking": ranked });
    let out = a.out.unwrap_or_else(|| cfg.output_root().join("lqg_gains.json"));
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&out, serde_json::to_string_pretty(&doc)? + "\n")?;
    println!("{}", out.display());
    Ok(())
}

fn selfcheck(a: SelfArgs) -> Result<bool> {
    let cfg = load_config(&a.common)?;
    let checks = selfcheck::run_all(&cfg)?;
    for c in &checks {
        println!("{}", c.line());
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Train(a) => train(a).map(|_| true),
        Cmd::Eval(a) => eval(a).map(|_| true),
        Cmd::Simulate(a) => simulate(a).map(|_| true),
        Cmd::TuneLqg(a) => tune(a).map(|_| true),
        Cmd::Selfcheck(a) => selfcheck(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
