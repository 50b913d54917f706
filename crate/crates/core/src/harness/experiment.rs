//! Closed-loop experiments against the synthetic terrain simulator.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, PlannerKind};
use super::scenario::Scenario;
use crate::costs::Track;
use crate::dynamics::{collect_transitions, fit_edd5, generate_shared_training_data, step_true_terrain, Edd5Params};
use crate::error::{invalid, Error, Result};
use crate::gp::TerrainGpEnsemble;
use crate::mppi::{Planner, PlannerModel, PlannerSetup, Task, TickDiagnostics};
use crate::types::{Control, RobotState, TerrainWeights};

/// Independent generator for one purpose within a run.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_TRUTH: u64 = 1;
const STREAM_SCENARIO: u64 = 2;
const STREAM_GP_DATA: u64 = 3;
const STREAM_EDD5: u64 = 16;

/// Every model a planner may need, built once per configuration.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub gp: Arc<TerrainGpEnsemble>,
    /// EDD5 fit per terrain.
    pub edd5: Vec<Edd5Params>,
    pub track_width: f64,
}

/// Trains (or loads) the GP ensemble and fits EDD5 per terrain, deterministically from the config.
pub fn train_models(cfg: &ExperimentConfig) -> Result<TrainedModels> {
    let t = &cfg.training;
    let gp = match &t.model_file {
        Some(path) => TerrainGpEnsemble::load(path)?,
        None => {
            let mut rng = derived_rng(t.seed, STREAM_GP_DATA);
            let data =
                generate_shared_training_data(&cfg.terrains, &cfg.nominal, &t.excitation, t.gp_points, &mut rng)?;
            TerrainGpEnsemble::train(&data.inputs, &data.outputs, &t.grid)?
        }
    };
    if gp.terrain_count() != cfg.terrains.len() {
        return Err(Error::Config(format!(
            "GP model covers {} terrains but the config lists {}",
            gp.terrain_count(),
            cfg.terrains.len()
        )));
    }
    let edd5 = cfg
        .terrains
        .iter()
        .enumerate()
        .map(|(i, profile)| {
            let mut rng = derived_rng(t.seed, STREAM_EDD5 + i as u64);
            let transitions = collect_transitions(profile, &t.excitation, cfg.nominal.dt, t.edd5_points, &mut rng);
            fit_edd5(&transitions, t.track_width, t.settle_ticks)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainedModels {
        gp: Arc::new(gp),
        edd5,
        track_width: t.track_width,
    })
}

/// Planner dynamics for a run; EDD5 uses the fit of the run's initial terrain.
pub fn planner_model(kind: PlannerKind, models: &TrainedModels, initial_terrain: usize) -> PlannerModel {
    match kind {
        PlannerKind::Gp => PlannerModel::Gp(models.gp.clone()),
        PlannerKind::Edd5 => PlannerModel::Edd5 {
            params: models.edd5[initial_terrain],
            track_width: models.track_width,
        },
        PlannerKind::Unicycle => PlannerModel::Unicycle,
    }
}

/// Per-tick latency summary [ms].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(ms: &[f64]) -> Self {
        if ms.is_empty() {
            return Self::default();
        }
        let mut s = ms.to_vec();
        s.sort_by(f64::total_cmp);
        let at = |q: f64| s[((s.len() - 1) as f64 * q).round() as usize];
        Self {
            median_ms: at(0.5),
            p95_ms: at(0.95),
            max_ms: s[s.len() - 1],
        }
    }
}

/// Outcome of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub planner: PlannerKind,
    pub scenario: &'static str,
    pub track: String,
    pub terrain: String,
    pub seed: u64,
    pub rmse: f64,
    pub success: bool,
    /// Reported only for successful avoidance runs.
    pub time_to_goal: Option<f64>,
    pub min_obstacle_clearance: Option<f64>,
    pub mean_speed: f64,
    pub collision_count: usize,
    /// Fraction of ticks inside the physical lane (tracking only).
    pub lane_keeping: Option<f64>,
    pub ticks: u64,
    pub aborted: Option<String>,
    /// Wall-clock timings; excluded from CSV output so results stay reproducible.
    pub latency: LatencyStats,
}

/// One closed-loop tick, for plotting and the switch-detection analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub tick: u64,
    pub terrain: usize,
    pub state: RobotState,
    pub command: Control,
    pub diagnostics: TickDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub ticks: Vec<TickRecord>,
}

/// Root-mean-square centerline distance of a path.
pub fn compute_rmse(path: &[Vector2<f64>], track: &Track) -> Result<f64> {
    if path.is_empty() {
        return Err(invalid("RMSE needs a non-empty path"));
    }
    let sum: f64 = path.iter().map(|p| track.centerline_distance(p).powi(2)).sum();
    Ok((sum / path.len() as f64).sqrt())
}

fn setup_for(cfg: &ExperimentConfig, model: PlannerModel, task: Task, seed: u64, initial: Control) -> PlannerSetup {
    let mut mppi = cfg.mppi;
    mppi.seed = seed;
    PlannerSetup {
        mppi,
        nominal: cfg.nominal,
        model,
        task,
        p_x: cfg.costs.p_x,
        solver: cfg.solver,
        initial_weights: TerrainWeights::uniform(cfg.terrains.len()),
        initial_control: initial,
    }
}

/// Builds the per-seed scenario the CLI and bench use.
pub fn make_scenario(cfg: &ExperimentConfig, kind: &str, seed: u64) -> Result<Scenario> {
    match kind {
        "tracking" => Scenario::tracking(&cfg.tracking, cfg.nominal.dt),
        "avoidance" => Scenario::avoidance(&cfg.avoidance, cfg.nominal.dt, &mut derived_rng(seed, STREAM_SCENARIO)),
        other => Err(invalid(format!("unknown scenario kind '{other}'"))),
    }
}

fn track_label(track: &Track) -> String {
    match track.centerline {
        crate::costs::Centerline::Circle { .. } => "circle".into(),
        crate::costs::Centerline::Polyline { .. } => "polyline".into(),
    }
}

/// Runs one closed-loop experiment. A non-finite state ends the run as an
/// aborted failure rather than an error.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    models: &TrainedModels,
    kind: PlannerKind,
    scenario: &Scenario,
    seed: u64,
) -> Result<RunOutput> {
    let dt = cfg.nominal.dt;
    let schedule = scenario.schedule();
    let initial_terrain = schedule.initial();
    if schedule.switches().iter().any(|(_, t)| *t >= cfg.terrains.len()) {
        return Err(Error::Config("scenario references an unknown terrain".into()));
    }
    let model = planner_model(kind, models, initial_terrain);
    let (task, mut state, max_ticks) = match scenario {
        Scenario::Tracking {
            track,
            v_desired,
            max_duration,
            ..
        } => {
            let (p, heading) = track.start_pose();
            (
                Task::Tracking {
                    track: track.clone(),
                    v_desired: *v_desired,
                    weights: cfg.costs.tracking,
                },
                RobotState::new(p.x, p.y, heading, 0.0, 0.0),
                (max_duration / dt).ceil() as u64,
            )
        }
        Scenario::Avoidance {
            start,
            start_heading,
            goal,
            obstacles,
            timeout,
            ..
        } => (
            Task::Avoidance {
                obstacles: obstacles.clone(),
                goal: *goal,
                weights: cfg.costs.avoidance,
                high_cost: cfg.costs.high_cost,
            },
            RobotState::new(start[0], start[1], *start_heading, 0.0, 0.0),
            (timeout / dt).ceil() as u64,
        ),
    };
    let v_desired = match scenario {
        Scenario::Tracking { v_desired, .. } | Scenario::Avoidance { v_desired, .. } => *v_desired,
    };
    let mut planner = Planner::new(setup_for(cfg, model, task, seed, Control::new(v_desired, 0.0)))?;
    let mut truth_rng = derived_rng(seed, STREAM_TRUTH);

    let mut ticks = Vec::new();
    let mut path = Vec::new();
    let mut latencies = Vec::new();
    let mut travelled = 0.0;
    let mut inside_lane = 0u64;
    let mut collisions = 0usize;
    let mut min_clearance = f64::INFINITY;
    let mut reached = false;
    let mut aborted = None;
    let mut in_collision = false;

    for tick in 0..max_ticks {
        let terrain = schedule.terrain_at(tick);
        let started = Instant::now();
        let (command, diagnostics) = match planner.plan_step(&state) {
            Ok(r) => r,
            Err(Error::Simulation(msg)) => {
                aborted = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        };
        latencies.push(started.elapsed().as_secs_f64() * 1e3);
        debug_assert!(planner.thresholds().margins.iter().all(|m| *m >= 0.0));
        let next = step_true_terrain(&state, &command, &cfg.terrains[terrain], &mut truth_rng, dt);
        ticks.push(TickRecord {
            tick,
            terrain,
            state,
            command,
            diagnostics,
        });
        if !next.is_finite() {
            aborted = Some(format!("non-finite state at tick {tick}"));
            break;
        }
        travelled += (next.position() - state.position()).norm();
        state = next;
        let xy = state.position();
        path.push(xy);
        match scenario {
            Scenario::Tracking { track, distance, .. } => {
                if track.centerline_distance(&xy) <= track.half_width {
                    inside_lane += 1;
                }
                if travelled >= *distance {
                    reached = true;
                    break;
                }
            }
            Scenario::Avoidance { goal, obstacles, .. } => {
                let clearance = obstacles
                    .iter()
                    .map(|o| o.signed_distance(&xy))
                    .fold(f64::INFINITY, f64::min);
                min_clearance = min_clearance.min(clearance);
                let colliding = clearance <= 0.0;
                if colliding && !in_collision {
                    collisions += 1;
                }
                in_collision = colliding;
                if (xy - goal.position_vec()).norm() <= goal.capture_radius {
                    reached = true;
                    break;
                }
            }
        }
    }

    let n_ticks = ticks.len() as u64;
    let elapsed = n_ticks as f64 * dt;
    let (rmse, track, lane_keeping) = match scenario {
        Scenario::Tracking { track, .. } => (
            if path.is_empty() { 0.0 } else { compute_rmse(&path, track)? },
            track_label(track),
            Some(if n_ticks > 0 { inside_lane as f64 / n_ticks as f64 } else { 0.0 }),
        ),
        Scenario::Avoidance { .. } => (0.0, String::new(), None),
    };
    let success = aborted.is_none()
        && reached
        && match scenario {
            Scenario::Tracking { .. } => true,
            Scenario::Avoidance { .. } => collisions == 0,
        };
    let is_avoid = matches!(scenario, Scenario::Avoidance { .. });
    let metrics = RunMetrics {
        planner: kind,
        scenario: scenario.kind(),
        track,
        terrain: cfg.terrains[initial_terrain].name.clone(),
        seed,
        rmse,
        success,
        time_to_goal: (success && is_avoid).then_some(elapsed),
        min_obstacle_clearance: (is_avoid && min_clearance.is_finite()).then_some(min_clearance),
        mean_speed: if elapsed > 0.0 { travelled / elapsed } else { 0.0 },
        collision_count: collisions,
        lane_keeping,
        ticks: n_ticks,
        aborted,
        latency: LatencyStats::from_samples(&latencies),
    };
    Ok(RunOutput { metrics, ticks })
}
