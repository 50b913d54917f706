//! Shared state, control and belief types.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Matrix5, Vector2, Vector5};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Wraps an angle into the half-open interval (-pi, pi].
///
/// The boundary value -pi maps to +pi so every angle has exactly one representative.
pub fn wrap_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(invalid(format!("angle must be finite, got {a}")));
    }
    Ok(wrap(a))
}

#[inline]
pub(crate) fn wrap(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Planar robot state `[X, Y, theta, v, omega]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub omega: f64,
}

impl RobotState {
    pub fn new(x: f64, y: f64, theta: f64, v: f64, omega: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap(theta),
            v,
            omega,
        }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn to_vector(&self) -> Vector5<f64> {
        Vector5::new(self.x, self.y, self.theta, self.v, self.omega)
    }

    pub fn from_vector(v: &Vector5<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.theta.is_finite()
            && self.v.is_finite()
            && self.omega.is_finite()
    }
}

/// Commanded linear and angular velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    pub v_ref: f64,
    pub omega_ref: f64,
}

impl Control {
    pub const fn new(v_ref: f64, omega_ref: f64) -> Self {
        Self { v_ref, omega_ref }
    }
}

/// Box bounds on commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlBounds {
    pub min: Control,
    pub max: Control,
}

impl Default for ControlBounds {
    fn default() -> Self {
        Self {
            min: Control::new(-0.5, -2.0),
            max: Control::new(2.0, 2.0),
        }
    }
}

impl ControlBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.min.v_ref < self.max.v_ref && self.min.omega_ref < self.max.omega_ref) {
            return Err(invalid(format!("control bounds are empty: {self:?}")));
        }
        Ok(())
    }

    #[inline]
    pub fn clamp(&self, u: Control) -> Control {
        Control {
            v_ref: u.v_ref.clamp(self.min.v_ref, self.max.v_ref),
            omega_ref: u.omega_ref.clamp(self.min.omega_ref, self.max.omega_ref),
        }
    }

    pub fn contains(&self, u: Control) -> bool {
        (self.min.v_ref..=self.max.v_ref).contains(&u.v_ref)
            && (self.min.omega_ref..=self.max.omega_ref).contains(&u.omega_ref)
    }
}

/// The MPPI decision variable: `N` commands over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSequence {
    controls: Vec<Control>,
}

impl ControlSequence {
    /// Builds a sequence, clamping every element into `bounds`.
    pub fn new(controls: Vec<Control>, bounds: &ControlBounds) -> Result<Self> {
        if controls.is_empty() {
            return Err(invalid("control sequence must have at least one element"));
        }
        Ok(Self {
            controls: controls.into_iter().map(|u| bounds.clamp(u)).collect(),
        })
    }

    pub fn constant(u: Control, horizon: usize, bounds: &ControlBounds) -> Result<Self> {
        Self::new(vec![u; horizon], bounds)
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn controls(&self) -> &[Control] {
        &self.controls
    }

    pub fn first(&self) -> Control {
        self.controls[0]
    }

    pub(crate) fn controls_mut(&mut self) -> &mut [Control] {
        &mut self.controls
    }
}

/// Gaussian belief over the robot state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeliefState {
    pub mean: RobotState,
    pub cov: Matrix5<f64>,
}

impl BeliefState {
    pub fn certain(mean: RobotState) -> Self {
        Self {
            mean,
            cov: Matrix5::zeros(),
        }
    }

    /// XY block of the covariance.
    pub fn cov_xy(&self) -> Matrix2<f64> {
        self.cov.fixed_view::<2, 2>(0, 0).into_owned()
    }
}

/// Averages a matrix with its transpose.
pub(crate) fn symmetrize(m: &Matrix5<f64>) -> Matrix5<f64> {
    (m + m.transpose()) * 0.5
}

/// Weighted GP residual on `(v, omega)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianCorrection {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

impl GaussianCorrection {
    pub fn zero() -> Self {
        Self {
            mean: Vector2::zeros(),
            cov: Matrix2::zeros(),
        }
    }

    pub fn trace(&self) -> f64 {
        self.cov.trace()
    }
}

impl Default for GaussianCorrection {
    fn default() -> Self {
        Self::zero()
    }
}

/// Convex combination weights over `M` terrains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainWeights {
    w: Vec<f64>,
}

impl TerrainWeights {
    pub const SUM_TOL: f64 = 1e-9;

    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(invalid("terrain weights need at least one terrain"));
        }
        if w.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(invalid(format!("terrain weights outside [0, 1]: {w:?}")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(invalid(format!("terrain weights sum to {sum}, expected 1")));
        }
        Ok(Self { w })
    }

    pub fn uniform(m: usize) -> Self {
        assert!(m > 0, "uniform weights need at least one terrain");
        Self {
            w: vec![1.0 / m as f64; m],
        }
    }

    pub fn vertex(m: usize, i: usize) -> Self {
        assert!(i < m);
        let mut w = vec![0.0; m];
        w[i] = 1.0;
        Self { w }
    }

    /// Wraps a vector already produced by a simplex projection.
    pub(crate) fn from_projected(w: Vec<f64>) -> Self {
        debug_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        Self { w }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.w[i]
    }
}

/// World displacement `to - from` expressed in the body frame of `from`.
///
/// Returns `(longitudinal, lateral)`.
pub fn body_frame_displacement(from: &RobotState, to: &RobotState) -> (f64, f64) {
    let dx = to.x - from.x;
    let dy = to.y - from.y;
    let (s, c) = from.theta.sin_cos();
    (c * dx + s * dy, -s * dx + c * dy)
}
