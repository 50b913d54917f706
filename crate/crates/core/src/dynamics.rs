//! Motion models: the nominal dynamic unicycle with its Jacobian, the kinematic
//! baselines (unicycle, EDD5) and the synthetic terrain simulator used as ground truth.

use nalgebra::{Matrix2, Matrix5, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::types::{wrap, Control, ControlBounds, RobotState};

/// Below this yaw rate the arc update switches to its second-order Taylor expansion.
pub const SMALL_OMEGA: f64 = 1e-6;

/// First-order velocity lag parameters of the nominal model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NominalParams {
    pub tau_v: f64,
    pub tau_omega: f64,
    pub dt: f64,
}

impl Default for NominalParams {
    fn default() -> Self {
        Self {
            tau_v: 0.5,
            tau_omega: 0.35,
            dt: 0.05,
        }
    }
}

impl NominalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_v > 0.0 && self.tau_omega > 0.0) {
            return Err(invalid("nominal time constants must be positive"));
        }
        if !(self.dt > 0.0 && self.dt < self.tau_v.min(self.tau_omega)) {
            return Err(invalid(format!(
                "dt = {} must lie in (0, min(tau_v, tau_omega))",
                self.dt
            )));
        }
        Ok(())
    }
}

/// Parameters of a synthetic terrain used as the closed-loop ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerrainProfile {
    pub name: String,
    pub gain_v: f64,
    pub gain_omega: f64,
    pub tau_v_true: f64,
    pub tau_omega_true: f64,
    pub curvature_slip_c: f64,
    pub noise_std_v: f64,
    pub noise_std_omega: f64,
}

impl TerrainProfile {
    pub fn tile() -> Self {
        Self {
            name: "tile".into(),
            gain_v: 0.97,
            gain_omega: 0.97,
            tau_v_true: 0.45,
            tau_omega_true: 0.30,
            curvature_slip_c: 0.05,
            noise_std_v: 0.01,
            noise_std_omega: 0.01,
        }
    }

    pub fn asphalt() -> Self {
        Self {
            name: "asphalt".into(),
            gain_v: 0.92,
            gain_omega: 0.92,
            tau_v_true: 0.55,
            tau_omega_true: 0.40,
            curvature_slip_c: 0.15,
            noise_std_v: 0.02,
            noise_std_omega: 0.02,
        }
    }

    pub fn grass() -> Self {
        Self {
            name: "grass".into(),
            gain_v: 0.82,
            gain_omega: 0.82,
            tau_v_true: 0.70,
            tau_omega_true: 0.50,
            curvature_slip_c: 0.35,
            noise_std_v: 0.04,
            noise_std_omega: 0.04,
        }
    }

    /// A noiseless profile that reproduces the nominal model exactly.
    pub fn nominal_equivalent(p: &NominalParams) -> Self {
        Self {
            name: "nominal".into(),
            gain_v: 1.0,
            gain_omega: 1.0,
            tau_v_true: p.tau_v,
            tau_omega_true: p.tau_omega,
            curvature_slip_c: 0.0,
            noise_std_v: 0.0,
            noise_std_omega: 0.0,
        }
    }

    pub fn validate(&self, dt: f64) -> Result<()> {
        let gain_ok = |g: f64| g > 0.0 && g <= 1.2;
        if !gain_ok(self.gain_v) || !gain_ok(self.gain_omega) {
            return Err(invalid(format!("terrain '{}': gains must be in (0, 1.2]", self.name)));
        }
        if !(self.tau_v_true > dt && self.tau_omega_true > dt) {
            return Err(invalid(format!(
                "terrain '{}': time constants must exceed dt",
                self.name
            )));
        }
        if !(self.curvature_slip_c >= 0.0 && self.noise_std_v >= 0.0 && self.noise_std_omega >= 0.0)
        {
            return Err(invalid(format!(
                "terrain '{}': slip coefficient and noise must be non-negative",
                self.name
            )));
        }
        Ok(())
    }
}

/// Five-parameter extended differential drive model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edd5Params {
    pub alpha_l: f64,
    pub alpha_r: f64,
    pub x_icr: f64,
    pub y_icr_l: f64,
    pub y_icr_r: f64,
}

impl Edd5Params {
    /// No-slip parameters for a vehicle of the given track width.
    pub fn ideal(track_width: f64) -> Self {
        Self {
            alpha_l: 1.0,
            alpha_r: 1.0,
            x_icr: 0.0,
            y_icr_l: -track_width / 2.0,
            y_icr_r: track_width / 2.0,
        }
    }
}

/// Advances the pose along the arc traced by constant `(v, omega)` over `dt`.
#[inline]
pub(crate) fn arc_pose(x: f64, y: f64, theta: f64, v: f64, omega: f64, dt: f64) -> (f64, f64, f64) {
    let theta_next = theta + omega * dt;
    if omega.abs() < SMALL_OMEGA {
        let (s, c) = theta.sin_cos();
        let half = 0.5 * omega * dt;
        (
            x + v * dt * (c - half * s),
            y + v * dt * (s + half * c),
            wrap(theta_next),
        )
    } else {
        let (s0, c0) = theta.sin_cos();
        let (s1, c1) = theta_next.sin_cos();
        let r = v / omega;
        (x + r * (s1 - s0), y - r * (c1 - c0), wrap(theta_next))
    }
}

/// Nominal dynamic-unicycle step (no GP correction).
#[inline]
pub fn step_nominal(s: &RobotState, u: &Control, p: &NominalParams) -> RobotState {
    let (x, y, theta) = arc_pose(s.x, s.y, s.theta, s.v, s.omega, p.dt);
    RobotState {
        x,
        y,
        theta,
        v: s.v + (p.dt / p.tau_v) * (u.v_ref - s.v),
        omega: s.omega + (p.dt / p.tau_omega) * (u.omega_ref - s.omega),
    }
}

/// Nominal next-step velocities `(v', omega')` for a GP query `(v, omega, v_ref, omega_ref)`.
#[inline]
pub fn nominal_velocities(query: &[f64; 4], p: &NominalParams) -> Vector2<f64> {
    Vector2::new(
        query[0] + (p.dt / p.tau_v) * (query[2] - query[0]),
        query[1] + (p.dt / p.tau_omega) * (query[3] - query[1]),
    )
}

/// Jacobian of [`step_nominal`] with respect to the state, in `[X, Y, theta, v, omega]` order.
pub fn jacobian_nominal(s: &RobotState, _u: &Control, p: &NominalParams) -> Matrix5<f64> {
    let dt = p.dt;
    let (v, w, th) = (s.v, s.omega, s.theta);
    let mut j = Matrix5::identity();
    let (s0, c0) = th.sin_cos();
    if w.abs() < SMALL_OMEGA {
        let half = 0.5 * w * dt;
        j[(0, 2)] = -v * dt * (s0 + half * c0);
        j[(0, 3)] = dt * (c0 - half * s0);
        j[(0, 4)] = -0.5 * v * dt * dt * s0;
        j[(1, 2)] = v * dt * (c0 - half * s0);
        j[(1, 3)] = dt * (s0 + half * c0);
        j[(1, 4)] = 0.5 * v * dt * dt * c0;
    } else {
        let (s1, c1) = (th + w * dt).sin_cos();
        let ds = s1 - s0;
        let dc = c1 - c0;
        j[(0, 2)] = (v / w) * dc;
        j[(0, 3)] = ds / w;
        j[(0, 4)] = -(v / (w * w)) * ds + (v / w) * dt * c1;
        j[(1, 2)] = (v / w) * ds;
        j[(1, 3)] = -dc / w;
        j[(1, 4)] = (v / (w * w)) * dc + (v / w) * dt * s1;
    }
    j[(2, 4)] = dt;
    j[(3, 3)] = 1.0 - dt / p.tau_v;
    j[(4, 4)] = 1.0 - dt / p.tau_omega;
    j
}

/// Kinematic unicycle: velocities follow the commands instantly.
pub fn step_kinematic_unicycle(s: &RobotState, u: &Control, dt: f64) -> RobotState {
    let (x, y, theta) = arc_pose(s.x, s.y, s.theta, u.v_ref, u.omega_ref, dt);
    RobotState {
        x,
        y,
        theta,
        v: u.v_ref,
        omega: u.omega_ref,
    }
}

/// Body velocities `(v_x, v_y, omega)` produced by the EDD5 map for a command.
pub fn edd5_body_velocities(u: &Control, p: &Edd5Params, track_width: f64) -> Result<(f64, f64, f64)> {
    let span = p.y_icr_r - p.y_icr_l;
    if span <= 1e-6 {
        return Err(Error::DegenerateIcr(span));
    }
    let half = 0.5 * track_width;
    let wheel_l = p.alpha_l * (u.v_ref - u.omega_ref * half);
    let wheel_r = p.alpha_r * (u.v_ref + u.omega_ref * half);
    let vx = (wheel_r * p.y_icr_r - wheel_l * p.y_icr_l) / span;
    let omega = (wheel_r - wheel_l) / span;
    Ok((vx, p.x_icr * omega, omega))
}

/// Extended differential drive step including the lateral velocity component.
pub fn step_edd5(
    s: &RobotState,
    u: &Control,
    p: &Edd5Params,
    track_width: f64,
    dt: f64,
) -> Result<RobotState> {
    if track_width <= 0.0 {
        return Err(invalid("track width must be positive"));
    }
    let (vx, vy, omega) = edd5_body_velocities(u, p, track_width)?;
    let (mut x, mut y, theta) = arc_pose(s.x, s.y, s.theta, vx, omega, dt);
    if vy != 0.0 {
        let (sm, cm) = (s.theta + 0.5 * omega * dt).sin_cos();
        x -= vy * dt * sm;
        y += vy * dt * cm;
    }
    Ok(RobotState {
        x,
        y,
        theta,
        v: vx,
        omega,
    })
}

/// Noiseless part of the synthetic terrain step, shared with [`step_true_terrain`].
#[inline]
fn true_velocity_targets(s: &RobotState, u: &Control, t: &TerrainProfile, dt: f64) -> (f64, f64) {
    let omega_target = t.gain_omega * u.omega_ref / (1.0 + t.curvature_slip_c * s.v.abs());
    (
        s.v + (dt / t.tau_v_true) * (t.gain_v * u.v_ref - s.v),
        s.omega + (dt / t.tau_omega_true) * (omega_target - s.omega),
    )
}

/// Synthetic ground-truth step on a terrain.
pub fn step_true_terrain<R: Rng + ?Sized>(
    s: &RobotState,
    u: &Control,
    t: &TerrainProfile,
    rng: &mut R,
    dt: f64,
) -> RobotState {
    let (x, y, theta) = arc_pose(s.x, s.y, s.theta, s.v, s.omega, dt);
    let (v, omega) = true_velocity_targets(s, u, t, dt);
    let nv: f64 = rng.sample(StandardNormal);
    let nw: f64 = rng.sample(StandardNormal);
    RobotState {
        x,
        y,
        theta,
        v: v + t.noise_std_v * nv,
        omega: omega + t.noise_std_omega * nw,
    }
}

/// How the training excitation picks and holds commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExcitationConfig {
    pub bounds: ControlBounds,
    pub hold_min_ticks: usize,
    pub hold_max_ticks: usize,
    /// Record one transition every `stride` simulated ticks.
    pub stride: usize,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        Self {
            bounds: ControlBounds::default(),
            hold_min_ticks: 10,
            hold_max_ticks: 40,
            stride: 3,
        }
    }
}

impl ExcitationConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if self.hold_min_ticks == 0 || self.hold_min_ticks > self.hold_max_ticks || self.stride == 0 {
            return Err(invalid("excitation hold range and stride must be positive and ordered"));
        }
        Ok(())
    }
}

/// One recorded transition of the excited system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: RobotState,
    pub control: Control,
    pub next: RobotState,
    /// Ticks the current command had been held before this transition.
    pub held_ticks: usize,
}

impl Transition {
    pub fn gp_input(&self) -> [f64; 4] {
        [
            self.state.v,
            self.state.omega,
            self.control.v_ref,
            self.control.omega_ref,
        ]
    }
}

/// A GP training pair: input `(v, omega, v_ref, omega_ref)` and velocity residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingRecord {
    pub input: [f64; 4],
    pub residual: [f64; 2],
}

/// Drives the system with randomized persistent commands and hands every
/// recorded `(state, command, hold count)` to `record`, which returns the
/// state to continue from.
fn excite<R, F>(excitation: &ExcitationConfig, n_points: usize, rng: &mut R, mut advance: F)
where
    R: Rng + ?Sized,
    F: FnMut(&RobotState, &Control, usize, bool, &mut R) -> RobotState,
{
    let b = excitation.bounds;
    let mut state = RobotState::default();
    let mut recorded = 0;
    let mut tick = 0usize;
    while recorded < n_points {
        let u = Control::new(
            rng.random_range(b.min.v_ref..=b.max.v_ref),
            rng.random_range(b.min.omega_ref..=b.max.omega_ref),
        );
        let hold = rng.random_range(excitation.hold_min_ticks..=excitation.hold_max_ticks);
        for held in 0..hold {
            let record = tick % excitation.stride == 0 && recorded < n_points;
            state = advance(&state, &u, held, record, rng);
            if record {
                recorded += 1;
            }
            tick += 1;
        }
    }
}

/// Collects `n_points` transitions of one terrain under persistent random commands.
pub fn collect_transitions<R: Rng + ?Sized>(
    profile: &TerrainProfile,
    excitation: &ExcitationConfig,
    dt: f64,
    n_points: usize,
    rng: &mut R,
) -> Vec<Transition> {
    let mut out = Vec::with_capacity(n_points);
    excite(excitation, n_points, rng, |s, u, held, record, rng| {
        let next = step_true_terrain(s, u, profile, rng, dt);
        if record {
            out.push(Transition {
                state: *s,
                control: *u,
                next,
                held_ticks: held,
            });
        }
        next
    });
    out
}

/// Residual between measured and nominal next-step velocities.
pub fn residual(t: &Transition, nominal: &NominalParams) -> [f64; 2] {
    let nom = step_nominal(&t.state, &t.control, nominal);
    [t.next.v - nom.v, t.next.omega - nom.omega]
}

/// GP training data for one terrain.
pub fn generate_training_data<R: Rng + ?Sized>(
    profile: &TerrainProfile,
    nominal: &NominalParams,
    excitation: &ExcitationConfig,
    n_points: usize,
    rng: &mut R,
) -> Result<Vec<TrainingRecord>> {
    if n_points == 0 {
        return Err(invalid("n_points must be at least 1"));
    }
    excitation.validate()?;
    Ok(collect_transitions(profile, excitation, nominal.dt, n_points, rng)
        .iter()
        .map(|t| TrainingRecord {
            input: t.gp_input(),
            residual: residual(t, nominal),
        })
        .collect())
}

/// Shared-input training set: one input row per record, `2 M` residual columns
/// ordered `(dv_0, domega_0, dv_1, domega_1, ...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedTrainingData {
    pub inputs: Vec<[f64; 4]>,
    pub outputs: Vec<Vec<f64>>,
}

/// Builds a shared-input dataset across terrains.
///
/// The excitation evolves on a terrain picked at random per command hold, so the
/// inputs cover every terrain's operating region; at each recorded state every
/// terrain is stepped once from that same state to produce its residual.
pub fn generate_shared_training_data<R: Rng + ?Sized>(
    profiles: &[TerrainProfile],
    nominal: &NominalParams,
    excitation: &ExcitationConfig,
    n_points: usize,
    rng: &mut R,
) -> Result<SharedTrainingData> {
    if n_points == 0 || profiles.is_empty() {
        return Err(invalid("need at least one point and one terrain"));
    }
    excitation.validate()?;
    let dt = nominal.dt;
    let mut inputs = Vec::with_capacity(n_points);
    let mut outputs = Vec::with_capacity(n_points);
    let mut active = 0usize;
    excite(excitation, n_points, rng, |s, u, held, record, rng| {
        if held == 0 {
            active = rng.random_range(0..profiles.len());
        }
        if record {
            let nom = step_nominal(s, u, nominal);
            let mut row = Vec::with_capacity(2 * profiles.len());
            for p in profiles {
                let next = step_true_terrain(s, u, p, rng, dt);
                row.push(next.v - nom.v);
                row.push(next.omega - nom.omega);
            }
            inputs.push([s.v, s.omega, u.v_ref, u.omega_ref]);
            outputs.push(row);
        }
        step_true_terrain(s, u, &profiles[active], rng, dt)
    });
    Ok(SharedTrainingData { inputs, outputs })
}

/// Least-squares EDD5 fit from commanded and measured velocities.
///
/// Only transitions whose command had been held for at least `settle_ticks`
/// are used. The synthetic simulator has no lateral slip channel, so `x_icr`
/// is fixed at zero.
pub fn fit_edd5(transitions: &[Transition], track_width: f64, settle_ticks: usize) -> Result<Edd5Params> {
    if track_width <= 0.0 {
        return Err(invalid("track width must be positive"));
    }
    let half = 0.5 * track_width;
    // omega = a v_r - b v_l ;  v = c v_r + d v_l
    let mut g = Matrix2::<f64>::zeros();
    let mut rhs_w = Vector2::<f64>::zeros();
    let mut rhs_v = Vector2::<f64>::zeros();
    let mut used = 0usize;
    for t in transitions.iter().filter(|t| t.held_ticks >= settle_ticks) {
        let vr = t.control.v_ref + t.control.omega_ref * half;
        let vl = t.control.v_ref - t.control.omega_ref * half;
        let phi = Vector2::new(vr, vl);
        g += phi * phi.transpose();
        rhs_w += phi * t.next.omega;
        rhs_v += phi * t.next.v;
        used += 1;
    }
    if used < 2 {
        return Err(invalid(format!("EDD5 fit needs at least 2 settled samples, got {used}")));
    }
    let lu = g.lu();
    let (Some(w), Some(v)) = (lu.solve(&rhs_w), lu.solve(&rhs_v)) else {
        return Err(invalid("EDD5 normal equations are singular"));
    };
    let (a, b) = (w[0], -w[1]);
    let (c, d) = (v[0], v[1]);
    if a <= 0.0 || b <= 0.0 {
        return Err(invalid(format!("EDD5 fit produced non-positive wheel gains ({a}, {b})")));
    }
    let y_icr_r = c / a;
    let y_icr_l = -d / b;
    let span = y_icr_r - y_icr_l;
    if span <= 1e-6 {
        return Err(Error::DegenerateIcr(span));
    }
    Ok(Edd5Params {
        alpha_l: b * span,
        alpha_r: a * span,
        x_icr: 0.0,
        y_icr_l,
        y_icr_r,
    })
}
