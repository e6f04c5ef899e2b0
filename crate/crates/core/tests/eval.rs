use mavtrack::controller::Controller;
use mavtrack::dynamics::PhysParams;
use mavtrack::env::{EpisodeConfig, Scenario, Status};
use mavtrack::eval::{
    evaluate_cell, evaluate_grid, format_table, run_episode, run_seed, summarize, tune_lqg, ControllerSpec, GridOutput,
    GridSpec, RESULTS_HEADER,
};
use mavtrack::lqg::{LqgConfig, LqgController};
use mavtrack::target::{TrajKind, TrajParams};

fn short_cfg() -> EpisodeConfig {
    EpisodeConfig {
        max_steps: 200,
        ..EpisodeConfig::default()
    }
}

fn lqg() -> ControllerSpec {
    ControllerSpec::Lqg(LqgConfig::default())
}

#[test]
fn controllers_in_a_cell_see_the_same_scenarios() {
    let spec = GridSpec {
        kinds: vec![TrajKind::Sinusoid, TrajKind::Ramp],
        ..GridSpec::single(0.8, 20.0, 4)
    };
    let cells = evaluate_cell(&spec, 0.8, 20.0, &[lqg(), ControllerSpec::Hover], &short_cfg(), &PhysParams::default()).unwrap();
    let (a, b) = (&cells[0].1, &cells[1].1);
    assert_eq!(a.len(), 4);
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.scenario_hash, y.scenario_hash);
        assert_eq!(x.seed, y.seed);
        assert_eq!(x.run, y.run);
    }
    let distinct: std::collections::HashSet<_> = a.iter().map(|l| &l.scenario_hash).collect();
    assert_eq!(distinct.len(), 4);
}

#[test]
fn one_by_one_grid_equals_a_direct_rollout() {
    let cfg = short_cfg();
    let vehicle = PhysParams::default();
    let spec = GridSpec::single(1.0, 0.0, 1);
    let grid = evaluate_grid(&spec, &[lqg()], &cfg, &vehicle, 1, None, &|_| {}).unwrap();
    assert_eq!(grid.len(), 1);

    let seed = run_seed(spec.base_seed, 1.0, 0.0, 0);
    let (scenario, noise_seed) =
        mavtrack::eval::paired_scenario(&cfg, &vehicle, 1.0, 0.0, TrajKind::Sinusoid, seed).unwrap();
    let mut ctl = LqgController::new(LqgConfig::default(), &vehicle, cfg.set_point_vec(), cfg.omega_max, cfg.lambda_max).unwrap();
    let log = run_episode(&mut ctl, &cfg, &vehicle, scenario, noise_seed, false).unwrap();
    let (mean, std, per_run) = summarize(&[log], 0.0, vehicle.control_period);
    assert_eq!(grid[0].mean_err_cm, mean);
    assert_eq!(grid[0].std_err_cm, std);
    assert_eq!(grid[0].per_run_mean_cm, per_run);
}

#[test]
fn lqg_holds_a_static_target_at_the_set_point() {
    let cfg = EpisodeConfig::default();
    let vehicle = PhysParams::default();
    let scenario = Scenario {
        alpha: 1.0,
        delay: 0.0,
        trajectory: TrajParams::fixed(cfg.set_point_vec()),
        spawn_offset: [0.0; 3],
    };
    let mut ctl = LqgController::new(LqgConfig::default(), &vehicle, cfg.set_point_vec(), cfg.omega_max, cfg.lambda_max).unwrap();
    assert_eq!(ctl.name(), "lqg");
    let log = run_episode(&mut ctl, &cfg, &vehicle, scenario, 11, false).unwrap();
    assert_eq!(log.status, Status::Timeout);
    let (mean, _, _) = summarize(&[log], 2.0, vehicle.control_period);
    assert!(mean < 1.0, "mean after 2 s: {mean} cm");
}

#[test]
fn grid_output_is_identical_across_worker_counts() {
    let cfg = EpisodeConfig {
        max_steps: 60,
        ..EpisodeConfig::default()
    };
    let spec = GridSpec {
        alphas: vec![0.8, 1.2],
        deltas_ms: vec![0.0, 30.0],
        runs: 2,
        ..GridSpec::table2()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for workers in [1, 3] {
        let csv = dir.path().join(format!("r{workers}.csv"));
        let jsonl = dir.path().join(format!("e{workers}.jsonl"));
        let out = GridOutput {
            results_csv: &csv,
            episodes_jsonl: Some(&jsonl),
        };
        let res = evaluate_grid(&spec, &[lqg(), ControllerSpec::Hover], &cfg, &PhysParams::default(), workers, Some(out), &|_| {}).unwrap();
        assert_eq!(res.len(), 8);
        outputs.push((std::fs::read(&csv).unwrap(), std::fs::read(&jsonl).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs[0].0.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], RESULTS_HEADER);
    assert_eq!(lines.len(), 9);
    assert!(lines[1].starts_with("0.8,0,lqg,2,"));
    assert_eq!(String::from_utf8(outputs[0].1.clone()).unwrap().lines().count(), 16);
}

#[test]
fn table_has_one_row_per_alpha() {
    let cfg = EpisodeConfig {
        max_steps: 2,
        ..EpisodeConfig::default()
    };
    let spec = GridSpec {
        runs: 1,
        ..GridSpec::table2()
    };
    let res = evaluate_grid(&spec, &[ControllerSpec::Hover], &cfg, &PhysParams::default(), 1, None, &|_| {}).unwrap();
    assert_eq!(res.len(), 54);
    let table = format_table(&res);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2 + 9);
    assert_eq!(lines[1].split_whitespace().filter(|w| *w == "ms").count(), 6);
    assert!(lines[2].trim_start().starts_with("0.60"));
    assert!(lines[10].trim_start().starts_with("1.40"));
}

#[test]
fn extrapolated_cells_are_flagged() {
    let spec = GridSpec {
        alphas: vec![1.0, 1.6],
        deltas_ms: vec![0.0, 80.0],
        ..GridSpec::table2()
    };
    let flagged = spec.extrapolated_cells(&EpisodeConfig::default());
    assert_eq!(flagged, vec![(1.0, 80.0), (1.6, 0.0), (1.6, 80.0)]);
}

#[test]
fn tuning_ranks_every_candidate() {
    let spec = GridSpec::single(1.0, 0.0, 2);
    let ranked = tune_lqg(&LqgConfig::default(), &[1.0, 10.0], &[0.5, 1.0], &spec, &short_cfg(), &PhysParams::default()).unwrap();
    assert_eq!(ranked.len(), 4);
    for w in ranked.windows(2) {
        let fa = w[0].cell.collisions + w[0].cell.divergences;
        let fb = w[1].cell.collisions + w[1].cell.divergences;
        assert!(fa < fb || (fa == fb && w[0].cell.mean_err_cm <= w[1].cell.mean_err_cm));
    }
}

#[test]
fn policy_with_wrong_observation_size_is_rejected() {
    let cfg = EpisodeConfig::default();
    let small = EpisodeConfig {
        history: 3,
        ..cfg.clone()
    };
    let t = mavtrack::train::Trainer::new(
        small,
        PhysParams::default(),
        mavtrack::sac::SacConfig {
            hidden: vec![8],
            num_envs: 1,
            ..Default::default()
        },
        Default::default(),
        tempfile::tempdir().unwrap().path(),
    )
    .unwrap();
    let spec = ControllerSpec::Policy(Box::new(t.agent().policy(t.policy_meta())));
    assert!(matches!(spec.build(&cfg, &PhysParams::default()), Err(mavtrack::Error::Shape(_))));
}
