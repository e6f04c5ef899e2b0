//! Monte Carlo robustness sweeps over mass and delay uncertainty.
//!
//! Every (alpha, delta, run) triple derives its own seed, so all controllers
//! in a cell face the same trajectory, spawn offset and measurement noise.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{Controller, HoverController, Observation};
use crate::dynamics::{ModelVariant, PhysParams};
use crate::env::{Episode, EpisodeConfig, Scenario, Status, StepLog};
use crate::error::{Error, Result};
use crate::lqg::{LqgConfig, LqgController};
use crate::sac::{Policy, PolicyController};
use crate::target::TrajKind;

pub const RESULTS_HEADER: &str = "alpha,delta_ms,controller,runs,mean_err_cm,std_err_cm,collisions,divergences";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub alphas: Vec<f64>,
    pub deltas_ms: Vec<f64>,
    pub runs: usize,
    /// Run `r` of a cell uses `kinds[r % kinds.len()]`.
    pub kinds: Vec<TrajKind>,
    pub base_seed: u64,
    /// Seconds at the start of each run left out of the statistics.
    pub skip_transient: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::table2()
    }
}

impl GridSpec {
    /// 9 x 6 grid: alpha 0.6..1.4 in steps of 0.1, delay 0..50 ms in steps of 10.
    pub fn table2() -> Self {
        Self {
            alphas: (6..=14).map(|k| k as f64 / 10.0).collect(),
            deltas_ms: (0..=5).map(|k| 10.0 * k as f64).collect(),
            runs: 20,
            kinds: vec![TrajKind::Sinusoid],
            base_seed: 0,
            skip_transient: 0.0,
        }
    }

    pub fn single(alpha: f64, delta_ms: f64, runs: usize) -> Self {
        Self {
            alphas: vec![alpha],
            deltas_ms: vec![delta_ms],
            runs,
            ..Self::table2()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.deltas_ms.is_empty() || self.runs == 0 || self.kinds.is_empty() {
            return Err(Error::Config("grid: alphas, deltas, runs and kinds must be non-empty".into()));
        }
        if self.alphas.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(Error::Config("grid: alpha values must be positive".into()));
        }
        if self.deltas_ms.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::Config("grid: delay values must be >= 0".into()));
        }
        if !(self.skip_transient >= 0.0) {
            return Err(Error::Config("grid: skip_transient must be >= 0".into()));
        }
        Ok(())
    }

    /// Cells outside the training randomization ranges.
    pub fn extrapolated_cells(&self, cfg: &EpisodeConfig) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for &a in &self.alphas {
            for &d in &self.deltas_ms {
                if !cfg.alpha_range.contains(a) || !cfg.delay_range.contains(d / 1000.0) {
                    out.push((a, d));
                }
            }
        }
        out
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one run, independent of the controller under test.
pub fn run_seed(base_seed: u64, alpha: f64, delta_ms: f64, run: usize) -> u64 {
    let mut h = mix(base_seed);
    for word in [alpha.to_bits(), delta_ms.to_bits(), run as u64] {
        h = mix(h ^ word);
    }
    h
}

/// Scenario and measurement-noise seed for one run.
pub fn paired_scenario(
    cfg: &EpisodeConfig,
    vehicle: &PhysParams,
    alpha: f64,
    delta_ms: f64,
    kind: TrajKind,
    seed: u64,
) -> Result<(Scenario, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sc = Scenario::with_uncertainty(&mut rng, cfg, vehicle, alpha, delta_ms / 1000.0, kind)?;
    Ok((sc, mix(seed ^ 0x6E6F_6973_65)))
}

/// SHA-256 of the scenario's JSON form, hex-encoded.
pub fn scenario_hash(sc: &Scenario) -> String {
    let json = serde_json::to_string(sc).unwrap_or_default();
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Which controller to build for each worker.
#[derive(Clone, Debug)]
pub enum ControllerSpec {
    Lqg(LqgConfig),
    Policy(Box<Policy>),
    Hover,
}

impl ControllerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerSpec::Lqg(_) => "lqg",
            ControllerSpec::Policy(_) => "rl",
            ControllerSpec::Hover => "hover",
        }
    }

    pub fn build(&self, cfg: &EpisodeConfig, vehicle: &PhysParams) -> Result<Box<dyn Controller + Send>> {
        Ok(match self {
            ControllerSpec::Lqg(l) => Box::new(LqgController::new(
                l.clone(),
                vehicle,
                cfg.set_point_vec(),
                cfg.omega_max,
                cfg.lambda_max,
            )?),
            ControllerSpec::Policy(p) => {
                if p.meta.actor_obs_dim != cfg.actor_obs_dim() {
                    return Err(Error::Shape(format!(
                        "policy expects {} observation entries, episode config gives {}",
                        p.meta.actor_obs_dim,
                        cfg.actor_obs_dim()
                    )));
                }
                Box::new(PolicyController::new((**p).clone()))
            }
            ControllerSpec::Hover => Box::new(HoverController),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub controller: String,
    pub alpha: f64,
    pub delta_ms: f64,
    pub run: usize,
    pub seed: u64,
    pub scenario_hash: String,
    pub status: Status,
    pub steps: usize,
    /// ||e(k)|| per step, m.
    pub errors: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub records: Vec<StepLog>,
}

impl EpisodeLog {
    /// Time of the last step, s.
    pub fn end_time(&self, period: f64) -> f64 {
        self.steps as f64 * period
    }
}

/// One rollout on the validation model.
pub fn run_episode(
    controller: &mut dyn Controller,
    cfg: &EpisodeConfig,
    vehicle: &PhysParams,
    scenario: Scenario,
    noise_seed: u64,
    keep_records: bool,
) -> Result<EpisodeLog> {
    let cfg = EpisodeConfig {
        model: ModelVariant::Validation,
        ..cfg.clone()
    };
    let (alpha, delay) = (scenario.alpha, scenario.delay);
    let hash = scenario_hash(&scenario);
    let mut ep = Episode::start(&cfg, vehicle, scenario, noise_seed)?;
    controller.reset();
    let mut errors = Vec::with_capacity(cfg.max_steps);
    let mut records = Vec::new();
    loop {
        let state = ep.state();
        let obs = Observation {
            actor_obs: ep.actor_obs(),
            measurement: ep.measurement(),
            attitude: state.attitude,
            thrust: state.thrust,
        };
        let cmd = controller.act(&obs);
        let result = ep.step(cmd)?;
        errors.push(result.error.norm());
        if keep_records {
            records.push(ep.log_record(&cmd, &result));
        }
        if result.status.is_done() {
            return Ok(EpisodeLog {
                controller: controller.name().to_string(),
                alpha,
                delta_ms: delay * 1000.0,
                run: 0,
                seed: noise_seed,
                scenario_hash: hash,
                status: result.status,
                steps: ep.steps(),
                errors,
                records,
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub alpha: f64,
    pub delta_ms: f64,
    pub controller: String,
    pub runs: usize,
    pub mean_err_cm: f64,
    pub std_err_cm: f64,
    pub collisions: usize,
    pub divergences: usize,
    pub per_run_mean_cm: Vec<f64>,
}

impl CellResult {
    pub fn csv(&self) -> String {
        format!(
            "{:.1},{:.0},{},{},{:.4},{:.4},{},{}",
            self.alpha,
            self.delta_ms,
            self.controller,
            self.runs,
            self.mean_err_cm,
            self.std_err_cm,
            self.collisions,
            self.divergences
        )
    }

    pub fn collision_free_fraction(&self) -> f64 {
        1.0 - self.collisions as f64 / self.runs.max(1) as f64
    }
}

/// Pooled mean and population standard deviation of ||e|| over every step
/// of every run, in cm. Steps before `skip_transient` seconds are ignored.
pub fn summarize(logs: &[EpisodeLog], skip_transient: f64, period: f64) -> (f64, f64, Vec<f64>) {
    let skip = (skip_transient / period).round() as usize;
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    let mut per_run = Vec::with_capacity(logs.len());
    for log in logs {
        let kept = log.errors.get(skip..).unwrap_or(&[]);
        let (mut rs, mut rn) = (0.0, 0usize);
        for &e in kept {
            let cm = 100.0 * e;
            sum += cm;
            sq += cm * cm;
            rs += cm;
            n += 1;
            rn += 1;
        }
        per_run.push(if rn > 0 { rs / rn as f64 } else { f64::NAN });
    }
    if n == 0 {
        return (f64::NAN, f64::NAN, per_run);
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    (mean, var.sqrt(), per_run)
}

pub fn cell_result(logs: &[EpisodeLog], alpha: f64, delta_ms: f64, controller: &str, skip: f64, period: f64) -> CellResult {
    let (mean, std, per_run) = summarize(logs, skip, period);
    CellResult {
        alpha,
        delta_ms,
        controller: controller.to_string(),
        runs: logs.len(),
        mean_err_cm: mean,
        std_err_cm: std,
        collisions: logs.iter().filter(|l| l.status == Status::Collision).count(),
        divergences: logs.iter().filter(|l| l.status == Status::Divergence).count(),
        per_run_mean_cm: per_run,
    }
}

/// Runs every controller on every run of one cell.
pub fn evaluate_cell(
    spec: &GridSpec,
    alpha: f64,
    delta_ms: f64,
    controllers: &[ControllerSpec],
    cfg: &EpisodeConfig,
    vehicle: &PhysParams,
) -> Result<Vec<(CellResult, Vec<EpisodeLog>)>> {
    let mut built = controllers
        .iter()
        .map(|c| c.build(cfg, vehicle))
        .collect::<Result<Vec<_>>>()?;
    let mut logs: Vec<Vec<EpisodeLog>> = vec![Vec::with_capacity(spec.runs); controllers.len()];
    for run in 0..spec.runs {
        let seed = run_seed(spec.base_seed, alpha, delta_ms, run);
        let kind = spec.kinds[run % spec.kinds.len()];
        let (scenario, noise_seed) = paired_scenario(cfg, vehicle, alpha, delta_ms, kind, seed)?;
        for (k, ctl) in built.iter_mut().enumerate() {
            let mut log = run_episode(ctl.as_mut(), cfg, vehicle, scenario.clone(), noise_seed, false)?;
            log.run = run;
            log.alpha = alpha;
            log.delta_ms = delta_ms;
            logs[k].push(log);
        }
    }
    Ok(controllers
        .iter()
        .zip(logs)
        .map(|(c, l)| {
            let r = cell_result(&l, alpha, delta_ms, c.name(), spec.skip_transient, vehicle.control_period);
            (r, l)
        })
        .collect())
}

/// Output files of a grid evaluation.
pub struct GridOutput<'a> {
    /// Results CSV, rewritten with header and appended cell by cell.
    pub results_csv: &'a Path,
    /// Optional JSON-lines file with one episode summary per line.
    pub episodes_jsonl: Option<&'a Path>,
}

#[derive(Serialize)]
struct EpisodeSummary<'a> {
    controller: &'a str,
    alpha: f64,
    delta_ms: f64,
    run: usize,
    seed: u64,
    scenario_hash: &'a str,
    status: Status,
    steps: usize,
    mean_err_cm: f64,
}

/// Evaluates the full grid on up to `workers` threads. Cells are written in
/// grid order as soon as every earlier cell is done, so an interrupted run
/// leaves a valid prefix and a finished run is byte-identical across worker
/// counts.
pub fn evaluate_grid(
    spec: &GridSpec,
    controllers: &[ControllerSpec],
    cfg: &EpisodeConfig,
    vehicle: &PhysParams,
    workers: usize,
    out: Option<GridOutput<'_>>,
    progress: &(dyn Fn(&CellResult) + Sync),
) -> Result<Vec<CellResult>> {
    spec.validate()?;
    cfg.validate()?;
    if controllers.is_empty() {
        return Err(Error::Usage("no controller to evaluate".into()));
    }
    for c in controllers {
        c.build(cfg, vehicle)?;
    }
    let cells: Vec<(f64, f64)> = spec
        .alphas
        .iter()
        .flat_map(|&a| spec.deltas_ms.iter().map(move |&d| (a, d)))
        .collect();

    let mut files = match &out {
        Some(o) => {
            if let Some(dir) = o.results_csv.parent() {
                fs::create_dir_all(dir)?;
            }
            let mut csv = fs::File::create(o.results_csv)?;
            writeln!(csv, "{RESULTS_HEADER}")?;
            let jsonl = match o.episodes_jsonl {
                Some(p) => Some(fs::File::create(p)?),
                None => None,
            };
            Some((csv, jsonl))
        }
        None => None,
    };

    struct Shared {
        done: BTreeMap<usize, Vec<(CellResult, Vec<EpisodeLog>)>>,
        next_to_write: usize,
        results: Vec<CellResult>,
        error: Option<Error>,
    }
    let shared = Mutex::new(Shared {
        done: BTreeMap::new(),
        next_to_write: 0,
        results: Vec::new(),
        error: None,
    });
    let next_cell = AtomicUsize::new(0);
    let workers = workers.clamp(1, cells.len());

    let flush = |sh: &mut Shared, files: &mut Option<(fs::File, Option<fs::File>)>| -> Result<()> {
        while let Some(entries) = sh.done.remove(&sh.next_to_write) {
            for (res, logs) in entries {
                if let Some((csv, jsonl)) = files.as_mut() {
                    writeln!(csv, "{}", res.csv())?;
                    if let Some(j) = jsonl.as_mut() {
                        for (log, m) in logs.iter().zip(&res.per_run_mean_cm) {
                            let s = EpisodeSummary {
                                controller: &log.controller,
                                alpha: log.alpha,
                                delta_ms: log.delta_ms,
                                run: log.run,
                                seed: log.seed,
                                scenario_hash: &log.scenario_hash,
                                status: log.status,
                                steps: log.steps,
                                mean_err_cm: *m,
                            };
                            writeln!(j, "{}", serde_json::to_string(&s)?)?;
                        }
                    }
                }
                progress(&res);
                sh.results.push(res);
            }
            sh.next_to_write += 1;
        }
        if let Some((csv, _)) = files.as_mut() {
            csv.flush()?;
        }
        Ok(())
    };

    let files_lock = Mutex::new(files.take());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if shared.lock().map(|s| s.error.is_some()).unwrap_or(true) {
                    return;
                }
                let i = next_cell.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    return;
                }
                let (a, d) = cells[i];
                let outcome = evaluate_cell(spec, a, d, controllers, cfg, vehicle);
                let mut sh = shared.lock().unwrap();
                match outcome {
                    Ok(entries) => {
                        sh.done.insert(i, entries);
                        let mut f = files_lock.lock().unwrap();
                        if let Err(e) = flush(&mut sh, &mut f) {
                            sh.error = Some(e);
                        }
                    }
                    Err(e) => {
                        if sh.error.is_none() {
                            sh.error = Some(e);
                        }
                    }
                }
            });
        }
    });
    let sh = shared.into_inner().unwrap();
    match sh.error {
        Some(e) => Err(e),
        None => Ok(sh.results),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TuneResult {
    pub q_pos: f64,
    pub q_vel: f64,
    pub cell: CellResult,
}

/// Sweeps the LQR state weights on one cell (usually the nominal one) and
/// returns the candidates ordered by failures, then mean error.
pub fn tune_lqg(
    base: &LqgConfig,
    q_pos: &[f64],
    q_vel: &[f64],
    spec: &GridSpec,
    cfg: &EpisodeConfig,
    vehicle: &PhysParams,
) -> Result<Vec<TuneResult>> {
    spec.validate()?;
    let (alpha, delta_ms) = (spec.alphas[0], spec.deltas_ms[0]);
    let mut out = Vec::new();
    for &qp in q_pos {
        for &qv in q_vel {
            let lqg = LqgConfig {
                q_pos: qp,
                q_vel: qv,
                ..base.clone()
            };
            let mut cells = evaluate_cell(spec, alpha, delta_ms, &[ControllerSpec::Lqg(lqg)], cfg, vehicle)?;
            let (cell, _) = cells.remove(0);
            out.push(TuneResult { q_pos: qp, q_vel: qv, cell });
        }
    }
    out.sort_by(|a, b| {
        let fa = a.cell.collisions + a.cell.divergences;
        let fb = b.cell.collisions + b.cell.divergences;
        fa.cmp(&fb).then(a.cell.mean_err_cm.total_cmp(&b.cell.mean_err_cm))
    });
    Ok(out)
}

/// Mean error in cm laid out as one alpha-by-delay table per controller.
/// Failed runs are appended as `c<collisions>/d<divergences>`.
pub fn format_table(results: &[CellResult]) -> String {
    let mut controllers: Vec<&str> = Vec::new();
    let mut alphas: Vec<f64> = Vec::new();
    let mut deltas: Vec<f64> = Vec::new();
    for r in results {
        if !controllers.contains(&r.controller.as_str()) {
            controllers.push(&r.controller);
        }
        if !alphas.contains(&r.alpha) {
            alphas.push(r.alpha);
        }
        if !deltas.contains(&r.delta_ms) {
            deltas.push(r.delta_ms);
        }
    }
    let cell = |r: &CellResult| {
        let mut s = format!("{:.1}", r.mean_err_cm);
        if r.collisions + r.divergences > 0 {
            s.push_str(&format!(" c{}/d{}", r.collisions, r.divergences));
        }
        s
    };
    let width = results.iter().map(|r| cell(r).len()).max().unwrap_or(0).max(8);
    let mut out = String::new();
    for ctl in controllers {
        out.push_str(&format!("{ctl}: mean |e| [cm]\n{:>6}", "alpha"));
        for d in &deltas {
            out.push_str(&format!(" {:>width$}", format!("{d:.0} ms")));
        }
        out.push('\n');
        for a in &alphas {
            out.push_str(&format!("{a:>6.2}"));
            for d in &deltas {
                let r = results
                    .iter()
                    .find(|r| r.controller == ctl && r.alpha == *a && r.delta_ms == *d);
                out.push_str(&format!(" {:>width$}", r.map(cell).unwrap_or_else(|| "-".into())));
            }
            out.push('\n');
        }
    }
    out
}

/// Plot-ready series of one logged episode: time, tracker and target
/// positions, error and its norm.
pub fn plot_csv(log: &EpisodeLog) -> String {
    let mut s = String::from("t,px,py,pz,prx,pry,prz,ex,ey,ez,err_norm\n");
    for r in &log.records {
        let en = (r.e[0].powi(2) + r.e[1].powi(2) + r.e[2].powi(2)).sqrt();
        s.push_str(&format!(
            "{:.3},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.t, r.p[0], r.p[1], r.p[2], r.p_r[0], r.p_r[1], r.p_r[2], r.e[0], r.e[1], r.e[2], en
        ));
    }
    s
}
