//! Stochastic MPPI: perturbation sampling, GP-corrected rollouts, softmax
//! weighting, control update, horizon shift and the constraint-tightening pass.

use std::sync::Arc;

use nalgebra::Matrix5;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{
    avoidance_cost_unchecked, tracking_cost_unchecked, AvoidanceWeights, CircleObstacle, GoalSpec, Track,
    TrackingWeights,
};
use crate::dynamics::{step_edd5, step_kinematic_unicycle, step_nominal, Edd5Params, NominalParams};
use crate::error::{invalid, Error, Result};
use crate::gp::{EnsembleScratch, PredictScratch, TerrainGpEnsemble, LANES};
use crate::terrain::{solve_weights, HistoryBuffer, WeightSolverConfig};
use crate::types::{BeliefState, Control, ControlBounds, ControlSequence, GaussianCorrection, RobotState, TerrainWeights};
use crate::uncertainty::{propagate_belief, tighten_lane_radius, tighten_obstacle_distance, QuantileTables};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MppiConfig {
    pub samples: usize,
    pub horizon: usize,
    pub lambda: f64,
    /// Diagonal of the sampling covariance `[(m/s)^2, (rad/s)^2]`.
    pub sigma_sim: [f64; 2],
    pub bounds: ControlBounds,
    pub seed: u64,
}

impl Default for MppiConfig {
    fn default() -> Self {
        Self {
            samples: 1024,
            horizon: 30,
            lambda: 0.1,
            sigma_sim: [0.3 * 0.3, 0.5 * 0.5],
            bounds: ControlBounds::default(),
            seed: 0,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.horizon == 0 {
            return Err(invalid("MPPI needs at least one sample and one horizon step"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.sigma_sim.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(invalid(format!("sampling variances must be non-negative: {:?}", self.sigma_sim)));
        }
        self.bounds.validate()
    }
}

/// Independent generator for one `(tick, sample)` pair.
pub fn sample_rng(seed: u64, tick: u64, sample: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tick.to_le_bytes());
    key[16..24].copy_from_slice(&sample.to_le_bytes());
    key[24..].copy_from_slice(b"ccmppi\0\0");
    ChaCha8Rng::from_seed(key)
}

fn fill_perturbation(cfg: &MppiConfig, rng: &mut ChaCha8Rng, out: &mut [Control]) {
    let (sv, sw) = (cfg.sigma_sim[0].sqrt(), cfg.sigma_sim[1].sqrt());
    for e in out.iter_mut() {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        *e = Control::new(sv * a, sw * b);
    }
}

/// Perturbation sequence of one sample at one tick.
pub fn sample_perturbation(cfg: &MppiConfig, tick: u64, sample: usize) -> Vec<Control> {
    let mut out = vec![Control::default(); cfg.horizon];
    fill_perturbation(cfg, &mut sample_rng(cfg.seed, tick, sample as u64), &mut out);
    out
}

/// All `S x N` perturbations of one tick.
pub fn sample_perturbations(cfg: &MppiConfig, tick: u64) -> Vec<Vec<Control>> {
    (0..cfg.samples).map(|s| sample_perturbation(cfg, tick, s)).collect()
}

/// Softmax weights with a min-cost baseline. Non-finite costs get weight 0;
/// the second value counts them. All weights are zero when no cost is finite.
pub fn trajectory_weights(costs: &[f64], lambda: f64) -> (Vec<f64>, usize) {
    let nonfinite = costs.iter().filter(|c| !c.is_finite()).count();
    let min = costs
        .iter()
        .copied()
        .filter(|c| c.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return (vec![0.0; costs.len()], nonfinite);
    }
    let mut w: Vec<f64> = costs
        .iter()
        .map(|&c| if c.is_finite() { (-(c - min) / lambda).exp() } else { 0.0 })
        .collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= sum);
    (w, nonfinite)
}

/// `u(k) <- clamp(u(k) + sum_s w_s eps_s(k))`, reduced in sample order.
pub fn update_controls(
    nominal: &ControlSequence,
    eps: &[Vec<Control>],
    w: &[f64],
    bounds: &ControlBounds,
) -> Result<ControlSequence> {
    if eps.len() != w.len() || eps.iter().any(|e| e.len() != nominal.horizon()) {
        return Err(invalid("perturbation tensor does not match weights and horizon"));
    }
    let mut out = nominal.controls().to_vec();
    for (e, &ws) in eps.iter().zip(w) {
        if ws == 0.0 {
            continue;
        }
        for (u, d) in out.iter_mut().zip(e) {
            u.v_ref += ws * d.v_ref;
            u.omega_ref += ws * d.omega_ref;
        }
    }
    ControlSequence::new(out, bounds)
}

/// Drops the first control and repeats the last.
pub fn shift_horizon(seq: &ControlSequence) -> ControlSequence {
    let mut out = seq.clone();
    let c = out.controls_mut();
    c.rotate_left(1);
    let n = c.len();
    if n > 1 {
        c[n - 1] = c[n - 2];
    }
    out
}

/// Dynamics the planner rolls out.
#[derive(Debug, Clone)]
pub enum PlannerModel {
    /// Nominal model plus the weighted terrain GP ensemble.
    Gp(Arc<TerrainGpEnsemble>),
    Edd5 { params: Edd5Params, track_width: f64 },
    Unicycle,
}

impl PlannerModel {
    pub fn name(&self) -> &'static str {
        match self {
            PlannerModel::Gp(_) => "gp",
            PlannerModel::Edd5 { .. } => "edd5",
            PlannerModel::Unicycle => "unicycle",
        }
    }

    fn validate(&self) -> Result<()> {
        if let PlannerModel::Edd5 { params, track_width } = self {
            step_edd5(&RobotState::default(), &Control::default(), params, *track_width, 0.05)?;
        }
        Ok(())
    }

    /// Mean step and the GP correction applied in it.
    #[inline]
    pub fn step(
        &self,
        s: &RobotState,
        u: &Control,
        weights: &TerrainWeights,
        nominal: &NominalParams,
        with_variance: bool,
        scratch: &mut EnsembleScratch,
    ) -> (RobotState, GaussianCorrection) {
        match self {
            PlannerModel::Gp(gp) => {
                let corr = gp.correction(&[s.v, s.omega, u.v_ref, u.omega_ref], weights, with_variance, scratch);
                let mut next = step_nominal(s, u, nominal);
                next.v += corr.mean[0];
                next.omega += corr.mean[1];
                (next, corr)
            }
            PlannerModel::Edd5 { params, track_width } => {
                // Parameters were validated at construction, so the ICR span is non-degenerate.
                let next = step_edd5(s, u, params, *track_width, nominal.dt).unwrap_or(*s);
                (next, GaussianCorrection::zero())
            }
            PlannerModel::Unicycle => (step_kinematic_unicycle(s, u, nominal.dt), GaussianCorrection::zero()),
        }
    }
}

/// Mean-only rollout. `states` receives `N + 1` entries, `corrections` `N`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_into(
    model: &PlannerModel,
    s0: &RobotState,
    controls: &[Control],
    weights: &TerrainWeights,
    nominal: &NominalParams,
    with_variance: bool,
    scratch: &mut EnsembleScratch,
    states: &mut Vec<RobotState>,
    corrections: &mut Vec<GaussianCorrection>,
) {
    states.clear();
    corrections.clear();
    states.push(*s0);
    let mut s = *s0;
    for u in controls {
        let (next, corr) = model.step(&s, u, weights, nominal, with_variance, scratch);
        states.push(next);
        corrections.push(corr);
        s = next;
    }
}

pub fn rollout(
    model: &PlannerModel,
    s0: &RobotState,
    seq: &ControlSequence,
    weights: &TerrainWeights,
    nominal: &NominalParams,
) -> (Vec<RobotState>, Vec<GaussianCorrection>) {
    let mut states = Vec::with_capacity(seq.horizon() + 1);
    let mut corrections = Vec::with_capacity(seq.horizon());
    rollout_into(
        model,
        s0,
        seq.controls(),
        weights,
        nominal,
        true,
        &mut EnsembleScratch::default(),
        &mut states,
        &mut corrections,
    );
    (states, corrections)
}

/// What the planner optimizes.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Tracking {
        track: Track,
        v_desired: f64,
        weights: TrackingWeights,
    },
    Avoidance {
        obstacles: Vec<CircleObstacle>,
        goal: GoalSpec,
        weights: AvoidanceWeights,
        high_cost: f64,
    },
}

impl Task {
    fn validate(&self) -> Result<()> {
        match self {
            Task::Tracking { track, weights, .. } => {
                track.validate()?;
                weights.validate()
            }
            Task::Avoidance {
                weights, high_cost, ..
            } => {
                if !(*high_cost > 0.0) {
                    return Err(invalid("high_cost must be positive"));
                }
                weights.validate()
            }
        }
    }

    fn wants_variance(&self) -> bool {
        match self {
            Task::Tracking { weights, .. } => weights.0[0] > 0.0,
            Task::Avoidance { weights, .. } => weights.0[0] > 0.0,
        }
    }

    fn obstacle_count(&self) -> usize {
        match self {
            Task::Tracking { .. } => 0,
            Task::Avoidance { obstacles, .. } => obstacles.len(),
        }
    }
}

/// Per-step tightened geometry published to the rollout workers.
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds {
    /// Tightened lane half-width per step (tracking only).
    pub r_bar: Vec<f64>,
    /// Obstacle inflation `d - d_bar`, row-major `N x obstacles`.
    pub margins: Vec<f64>,
    /// Propagated state covariance per step.
    pub covariances: Vec<Matrix5<f64>>,
    /// Steps whose tightened lane collapsed.
    pub infeasible_steps: usize,
}

impl Thresholds {
    /// Untightened geometry, used before any optimum exists.
    pub fn untightened(task: &Task, horizon: usize) -> Self {
        let r = match task {
            Task::Tracking { track, .. } => track.half_width,
            Task::Avoidance { .. } => 0.0,
        };
        Self {
            r_bar: match task {
                Task::Tracking { .. } => vec![r; horizon],
                Task::Avoidance { .. } => Vec::new(),
            },
            margins: vec![0.0; horizon * task.obstacle_count()],
            covariances: vec![Matrix5::zeros(); horizon],
            infeasible_steps: 0,
        }
    }
}

/// Propagates the belief along `seq` from `start` with zero initial covariance
/// and tightens the lane or obstacles at every step.
pub fn tightening_pass(
    model: &PlannerModel,
    start: &RobotState,
    seq: &ControlSequence,
    weights: &TerrainWeights,
    nominal: &NominalParams,
    q: &QuantileTables,
    task: &Task,
) -> Result<Thresholds> {
    let n = seq.horizon();
    let mut out = Thresholds::untightened(task, n);
    let mut scratch = EnsembleScratch::default();
    let mut belief = BeliefState::certain(*start);
    for (k, u) in seq.controls().iter().enumerate() {
        belief = match model {
            PlannerModel::Gp(_) => {
                let (_, corr) = model.step(&belief.mean, u, weights, nominal, true, &mut scratch);
                propagate_belief(&belief, u, &corr, nominal)
            }
            _ => {
                let (mean, _) = model.step(&belief.mean, u, weights, nominal, false, &mut scratch);
                BeliefState::certain(mean)
            }
        };
        out.covariances[k] = belief.cov;
        let cov_xy = belief.cov_xy();
        match task {
            Task::Tracking { track, .. } => {
                let r = tighten_lane_radius(track.half_width, &cov_xy, q)?;
                if r <= 0.0 {
                    out.infeasible_steps += 1;
                }
                out.r_bar[k] = r;
            }
            Task::Avoidance { obstacles, .. } => {
                let xy = belief.mean.position();
                for (o, obs) in obstacles.iter().enumerate() {
                    out.margins[k * obstacles.len() + o] = tighten_obstacle_distance(&xy, obs, &cov_xy, q).margin();
                }
            }
        }
    }
    Ok(out)
}

/// Everything needed to construct a [`Planner`].
#[derive(Debug, Clone)]
pub struct PlannerSetup {
    pub mppi: MppiConfig,
    pub nominal: NominalParams,
    pub model: PlannerModel,
    pub task: Task,
    pub p_x: f64,
    pub solver: WeightSolverConfig,
    pub initial_weights: TerrainWeights,
    pub initial_control: Control,
}

/// Per-tick planner diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TickDiagnostics {
    pub tick: u64,
    pub best_cost: f64,
    pub mean_cost: f64,
    pub effective_sample_size: f64,
    pub weight_entropy: f64,
    pub nonfinite_costs: usize,
    pub infeasible_steps: usize,
    pub terrain_weights: Vec<f64>,
}

/// Per-worker buffers for one block of [`LANES`] samples.
struct WorkerScratch {
    predict: PredictScratch,
    ensemble: EnsembleScratch,
    eps: Vec<Control>,
    controls: Vec<Vec<Control>>,
    v_sampled: Vec<Vec<f64>>,
    states: Vec<Vec<RobotState>>,
    corrections: Vec<Vec<GaussianCorrection>>,
    queries: Vec<[f64; 4]>,
    block: Vec<GaussianCorrection>,
}

impl WorkerScratch {
    fn new(n: usize) -> Self {
        Self {
            predict: PredictScratch::default(),
            ensemble: EnsembleScratch::default(),
            eps: vec![Control::default(); n],
            controls: vec![Vec::with_capacity(n); LANES],
            v_sampled: vec![Vec::with_capacity(n); LANES],
            states: vec![Vec::with_capacity(n + 1); LANES],
            corrections: vec![Vec::with_capacity(n); LANES],
            queries: Vec::with_capacity(LANES),
            block: vec![GaussianCorrection::zero(); LANES],
        }
    }
}

/// Receding-horizon planner state.
#[derive(Debug, Clone)]
pub struct Planner {
    cfg: MppiConfig,
    nominal: NominalParams,
    model: PlannerModel,
    task: Task,
    quantiles: QuantileTables,
    solver: WeightSolverConfig,
    sequence: ControlSequence,
    weights: TerrainWeights,
    thresholds: Thresholds,
    history: Option<HistoryBuffer>,
    last: Option<(RobotState, Control)>,
    tick: u64,
}

impl Planner {
    pub fn new(setup: PlannerSetup) -> Result<Self> {
        setup.mppi.validate()?;
        setup.nominal.validate()?;
        setup.task.validate()?;
        setup.solver.validate()?;
        setup.model.validate()?;
        let quantiles = QuantileTables::new(setup.p_x)?;
        let history = match &setup.model {
            PlannerModel::Gp(gp) => {
                if gp.terrain_count() != setup.initial_weights.len() {
                    return Err(invalid(format!(
                        "{} initial weights for {} terrain models",
                        setup.initial_weights.len(),
                        gp.terrain_count()
                    )));
                }
                Some(HistoryBuffer::new(setup.solver.history, gp.terrain_count())?)
            }
            _ => None,
        };
        let sequence = ControlSequence::constant(setup.initial_control, setup.mppi.horizon, &setup.mppi.bounds)?;
        Ok(Self {
            thresholds: Thresholds::untightened(&setup.task, setup.mppi.horizon),
            cfg: setup.mppi,
            nominal: setup.nominal,
            model: setup.model,
            task: setup.task,
            quantiles,
            solver: setup.solver,
            sequence,
            weights: setup.initial_weights,
            history,
            last: None,
            tick: 0,
        })
    }

    pub fn sequence(&self) -> &ControlSequence {
        &self.sequence
    }

    pub fn terrain_weights(&self) -> &TerrainWeights {
        &self.weights
    }

    pub fn thresholds(&self) -> &Thresholds {
        &self.thresholds
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn model(&self) -> &PlannerModel {
        &self.model
    }

    pub fn config(&self) -> &MppiConfig {
        &self.cfg
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    /// Cost of one rollout under the current thresholds.
    fn rollout_cost(&self, states: &[RobotState], corrections: &[GaussianCorrection], v_sampled: &[f64]) -> f64 {
        match &self.task {
            Task::Tracking {
                track,
                v_desired,
                weights,
            } => tracking_cost_unchecked(
                states,
                corrections,
                track,
                &self.thresholds.r_bar,
                *v_desired,
                v_sampled,
                weights,
            ),
            Task::Avoidance {
                obstacles,
                goal,
                weights,
                high_cost,
            } => avoidance_cost_unchecked(
                states,
                corrections,
                obstacles,
                &self.thresholds.margins,
                goal,
                weights,
                *high_cost,
            ),
        }
    }

    /// Cost of rolling out `seq` from `x0` with the current thresholds.
    pub fn sequence_cost(&self, x0: &RobotState, seq: &ControlSequence) -> f64 {
        let (states, corrections) = rollout(&self.model, x0, seq, &self.weights, &self.nominal);
        let v: Vec<f64> = seq.controls().iter().map(|u| u.v_ref).collect();
        self.rollout_cost(&states, &corrections, &v)
    }

    /// Samples and scores perturbed sequences. Returns each sample's cost and
    /// its effective (post-clamp) perturbation. Samples are rolled out in
    /// fixed blocks of [`LANES`] so the GP is queried for a whole block per
    /// step; block membership depends only on the sample index.
    fn evaluate_samples(&self, x0: &RobotState) -> Vec<(f64, Vec<Control>)> {
        let n = self.cfg.horizon;
        let with_variance = self.task.wants_variance();
        let bounds = self.cfg.bounds;
        let weighted = match &self.model {
            PlannerModel::Gp(gp) => Some(gp.weighted(&self.weights)),
            _ => None,
        };
        let samples = self.cfg.samples;
        let blocks: Vec<Vec<(f64, Vec<Control>)>> = (0..samples.div_ceil(LANES))
            .into_par_iter()
            .map_init(
                || WorkerScratch::new(n),
                |w, blk| {
                    let lo = blk * LANES;
                    let k = LANES.min(samples - lo);
                    for l in 0..k {
                        let mut rng = sample_rng(self.cfg.seed, self.tick, (lo + l) as u64);
                        fill_perturbation(&self.cfg, &mut rng, &mut w.eps);
                        w.controls[l].clear();
                        w.v_sampled[l].clear();
                        for (u, e) in self.sequence.controls().iter().zip(&w.eps) {
                            let c = bounds.clamp(Control::new(u.v_ref + e.v_ref, u.omega_ref + e.omega_ref));
                            w.controls[l].push(c);
                            w.v_sampled[l].push(c.v_ref);
                        }
                        w.states[l].clear();
                        w.states[l].push(*x0);
                        w.corrections[l].clear();
                    }
                    for t in 0..n {
                        match &weighted {
                            Some(we) => {
                                w.queries.clear();
                                for l in 0..k {
                                    let s = &w.states[l][t];
                                    let u = &w.controls[l][t];
                                    w.queries.push([s.v, s.omega, u.v_ref, u.omega_ref]);
                                }
                                we.correction_block(&w.queries, with_variance, &mut w.predict, &mut w.block);
                                for l in 0..k {
                                    let corr = w.block[l];
                                    let mut next = step_nominal(&w.states[l][t], &w.controls[l][t], &self.nominal);
                                    next.v += corr.mean[0];
                                    next.omega += corr.mean[1];
                                    w.states[l].push(next);
                                    w.corrections[l].push(corr);
                                }
                            }
                            None => {
                                for l in 0..k {
                                    let (next, corr) = self.model.step(
                                        &w.states[l][t],
                                        &w.controls[l][t],
                                        &self.weights,
                                        &self.nominal,
                                        with_variance,
                                        &mut w.ensemble,
                                    );
                                    w.states[l].push(next);
                                    w.corrections[l].push(corr);
                                }
                            }
                        }
                    }
                    (0..k)
                        .map(|l| {
                            let cost = self.rollout_cost(&w.states[l], &w.corrections[l], &w.v_sampled[l]);
                            let effective = w.controls[l]
                                .iter()
                                .zip(self.sequence.controls())
                                .map(|(c, u)| Control::new(c.v_ref - u.v_ref, c.omega_ref - u.omega_ref))
                                .collect();
                            (cost, effective)
                        })
                        .collect()
                },
            )
            .collect();
        blocks.into_iter().flatten().collect()
    }

    /// One control tick at measured state `x0`.
    pub fn plan_step(&mut self, x0: &RobotState) -> Result<(Control, TickDiagnostics)> {
        if !x0.is_finite() {
            return Err(Error::Simulation(format!("non-finite state {x0:?}")));
        }
        // Step 1: sample, roll out, weight, update.
        let results = self.evaluate_samples(x0);
        let costs: Vec<f64> = results.iter().map(|r| r.0).collect();
        let (w, nonfinite) = trajectory_weights(&costs, self.cfg.lambda);
        let eps: Vec<Vec<Control>> = results.into_iter().map(|r| r.1).collect();
        self.sequence = update_controls(&self.sequence, &eps, &w, &self.cfg.bounds)?;
        let command = self.sequence.first();
        self.sequence = shift_horizon(&self.sequence);

        let finite: Vec<f64> = costs.iter().copied().filter(|c| c.is_finite()).collect();
        let best_cost = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let mean_cost = if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let sum_sq: f64 = w.iter().map(|x| x * x).sum();
        let effective_sample_size = if sum_sq > 0.0 { 1.0 / sum_sq } else { 0.0 };
        let weight_entropy = -w.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();

        // Step 2: tighten along the shifted optimum, starting from the predicted next state.
        let mut scratch = EnsembleScratch::default();
        let (next_mean, _) = self
            .model
            .step(x0, &command, &self.weights, &self.nominal, false, &mut scratch);
        self.thresholds = tightening_pass(
            &self.model,
            &next_mean,
            &self.sequence,
            &self.weights,
            &self.nominal,
            &self.quantiles,
            &self.task,
        )?;

        // Step 3: terrain estimation from the newly measured velocities.
        if let (PlannerModel::Gp(gp), Some(history)) = (&self.model, self.history.as_mut()) {
            if let Some((prev_state, prev_control)) = self.last {
                let query = [prev_state.v, prev_state.omega, prev_control.v_ref, prev_control.omega_ref];
                let preds = gp.per_terrain_mean_prediction(&self.nominal, &query, &mut scratch);
                history.push_observation(nalgebra::Vector2::new(x0.v, x0.omega), &preds)?;
                self.weights = solve_weights(history, &self.weights, &self.solver)?.weights;
            }
        }
        self.last = Some((*x0, command));

        let diagnostics = TickDiagnostics {
            tick: self.tick,
            best_cost,
            mean_cost,
            effective_sample_size,
            weight_entropy,
            nonfinite_costs: nonfinite,
            infeasible_steps: self.thresholds.infeasible_steps,
            terrain_weights: self.weights.as_slice().to_vec(),
        };
        self.tick += 1;
        Ok((command, diagnostics))
    }
}
