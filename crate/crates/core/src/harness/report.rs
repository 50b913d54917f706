//! CSV output and the benchmark suite.

use std::io::Write;

use super::config::{ExperimentConfig, PlannerKind};
use super::experiment::{make_scenario, run_experiment, RunMetrics, TickRecord, TrainedModels};
use crate::costs::Track;
use crate::error::{Error, Result};

pub const RESULTS_SCHEMA: &str = "ccmppi-results/1";
pub const TICKS_SCHEMA: &str = "ccmppi-ticks/1";

const RESULT_COLUMNS: [&str; 19] = [
    "row",
    "planner",
    "scenario",
    "track",
    "terrain",
    "seed",
    "success",
    "rmse",
    "rmse_std",
    "time_to_goal",
    "time_to_goal_std",
    "min_clearance",
    "mean_speed",
    "collisions",
    "lane_keeping",
    "ticks",
    "successes",
    "trials",
    "aborted",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Aggregate over the runs of one `(planner, scenario, track, terrain)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub planner: PlannerKind,
    pub scenario: &'static str,
    pub track: String,
    pub terrain: String,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub time_to_goal_mean: Option<f64>,
    pub time_to_goal_std: Option<f64>,
    pub collisions: usize,
    pub successes: usize,
    pub trials: usize,
    pub mean_speed: f64,
    pub lane_keeping: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups runs by cell, keeping the order in which cells first appear.
pub fn aggregate(runs: &[RunMetrics]) -> Vec<AggregateRow> {
    let mut keys: Vec<(PlannerKind, &'static str, String, String)> = Vec::new();
    for r in runs {
        let k = (r.planner, r.scenario, r.track.clone(), r.terrain.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(planner, scenario, track, terrain)| {
            let cell: Vec<&RunMetrics> = runs
                .iter()
                .filter(|r| r.planner == planner && r.scenario == scenario && r.track == track && r.terrain == terrain)
                .collect();
            let rmse: Vec<f64> = cell.iter().map(|r| r.rmse).collect();
            let ttg: Vec<f64> = cell.iter().filter_map(|r| r.time_to_goal).collect();
            let speeds: Vec<f64> = cell.iter().map(|r| r.mean_speed).collect();
            let keeping: Vec<f64> = cell.iter().filter_map(|r| r.lane_keeping).collect();
            let (rmse_mean, rmse_std) = mean_std(&rmse);
            let (t_mean, t_std) = mean_std(&ttg);
            AggregateRow {
                planner,
                scenario,
                track,
                terrain,
                rmse_mean,
                rmse_std,
                time_to_goal_mean: (!ttg.is_empty()).then_some(t_mean),
                time_to_goal_std: (!ttg.is_empty()).then_some(t_std),
                collisions: cell.iter().map(|r| r.collision_count).sum(),
                successes: cell.iter().filter(|r| r.success).count(),
                trials: cell.len(),
                mean_speed: mean_std(&speeds).0,
                lane_keeping: (!keeping.is_empty()).then(|| mean_std(&keeping).0),
            }
        })
        .collect()
}

/// Writes run rows followed by aggregate rows, under a header comment carrying the config hash.
pub fn write_results<W: Write>(
    mut out: W,
    config_hash: &str,
    runs: &[RunMetrics],
    aggregates: &[AggregateRow],
) -> Result<()> {
    writeln!(out, "# {RESULTS_SCHEMA} config_sha256={config_hash}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULT_COLUMNS)?;
    for r in runs {
        w.write_record([
            "run".to_string(),
            r.planner.to_string(),
            r.scenario.to_string(),
            r.track.clone(),
            r.terrain.clone(),
            r.seed.to_string(),
            r.success.to_string(),
            r.rmse.to_string(),
            String::new(),
            opt(r.time_to_goal),
            String::new(),
            opt(r.min_obstacle_clearance),
            r.mean_speed.to_string(),
            r.collision_count.to_string(),
            opt(r.lane_keeping),
            r.ticks.to_string(),
            (r.success as usize).to_string(),
            "1".to_string(),
            r.aborted.clone().unwrap_or_default(),
        ])?;
    }
    for a in aggregates {
        w.write_record([
            "aggregate".to_string(),
            a.planner.to_string(),
            a.scenario.to_string(),
            a.track.clone(),
            a.terrain.clone(),
            String::new(),
            String::new(),
            a.rmse_mean.to_string(),
            a.rmse_std.to_string(),
            opt(a.time_to_goal_mean),
            opt(a.time_to_goal_std),
            String::new(),
            a.mean_speed.to_string(),
            a.collisions.to_string(),
            opt(a.lane_keeping),
            String::new(),
            a.successes.to_string(),
            a.trials.to_string(),
            String::new(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-tick trajectory for external plotting.
pub fn write_ticks<W: Write>(mut out: W, config_hash: &str, ticks: &[TickRecord]) -> Result<()> {
    writeln!(out, "# {TICKS_SCHEMA} config_sha256={config_hash}")?;
    let mut w = csv::Writer::from_writer(out);
    let m = ticks.first().map(|t| t.diagnostics.terrain_weights.len()).unwrap_or(0);
    let mut header: Vec<String> = [
        "tick", "terrain", "x", "y", "theta", "v", "omega", "v_cmd", "omega_cmd", "best_cost", "mean_cost", "ess",
        "entropy", "nonfinite", "infeasible",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..m).map(|i| format!("w{i}")));
    w.write_record(&header)?;
    for t in ticks {
        let d = &t.diagnostics;
        let mut row = vec![
            t.tick.to_string(),
            t.terrain.to_string(),
            t.state.x.to_string(),
            t.state.y.to_string(),
            t.state.theta.to_string(),
            t.state.v.to_string(),
            t.state.omega.to_string(),
            t.command.v_ref.to_string(),
            t.command.omega_ref.to_string(),
            d.best_cost.to_string(),
            d.mean_cost.to_string(),
            d.effective_sample_size.to_string(),
            d.weight_entropy.to_string(),
            d.nonfinite_costs.to_string(),
            d.infeasible_steps.to_string(),
        ];
        row.extend(d.terrain_weights.iter().map(|w| w.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One planned run of the suite.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRun {
    pub planner: PlannerKind,
    pub scenario: &'static str,
    pub track: String,
    pub terrain: usize,
    pub seed: u64,
}

/// The full cross product of planners and scenarios described by `[bench]`,
/// ordered by scenario, track, terrain, seed and planner.
pub fn bench_plan(cfg: &ExperimentConfig) -> Vec<BenchRun> {
    let b = &cfg.bench;
    let mut runs = Vec::new();
    if b.planners.is_empty() {
        return runs;
    }
    for track in &b.tracks {
        for &terrain in &b.terrains {
            for &seed in &b.tracking_seeds {
                for &planner in &b.planners {
                    runs.push(BenchRun {
                        planner,
                        scenario: "tracking",
                        track: track.clone(),
                        terrain,
                        seed,
                    });
                }
            }
        }
    }
    let t = b.terrains.len();
    if t > 0 {
        let per = (b.avoidance_trials / t).max(1);
        for trial in 0..b.avoidance_trials {
            let terrain = b.terrains[(trial / per).min(t - 1)];
            for &planner in &b.planners {
                runs.push(BenchRun {
                    planner,
                    scenario: "avoidance",
                    track: String::new(),
                    terrain,
                    seed: cfg.seed.wrapping_add(trial as u64),
                });
            }
        }
    }
    runs
}

/// Runs the suite. A failing run is recorded as an aborted row and the suite continues.
pub fn benchmark_suite(cfg: &ExperimentConfig, models: &TrainedModels) -> Result<(Vec<RunMetrics>, Vec<AggregateRow>)> {
    let mut runs = Vec::new();
    for run in bench_plan(cfg) {
        let mut local = cfg.clone();
        if run.track == "square" {
            local.tracking.track = Track::square(cfg.bench.square_side, cfg.tracking.track.half_width)?;
        }
        let scenario = make_scenario(&local, run.scenario, run.seed)?.with_terrain(run.terrain);
        let metrics = match run_experiment(&local, models, run.planner, &scenario, run.seed) {
            Ok(out) => out.metrics,
            Err(e @ (Error::Config(_) | Error::Io(_))) => return Err(e),
            Err(e) => RunMetrics {
                planner: run.planner,
                scenario: run.scenario,
                track: run.track.clone(),
                terrain: cfg.terrains[run.terrain].name.clone(),
                seed: run.seed,
                rmse: f64::NAN,
                success: false,
                time_to_goal: None,
                min_obstacle_clearance: None,
                mean_speed: 0.0,
                collision_count: 0,
                lane_keeping: None,
                ticks: 0,
                aborted: Some(e.to_string()),
                latency: Default::default(),
            },
        };
        let mut metrics = metrics;
        if run.scenario == "tracking" {
            metrics.track = run.track.clone();
        }
        runs.push(metrics);
    }
    let aggregates = aggregate(&runs);
    Ok((runs, aggregates))
}
