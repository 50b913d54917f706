//! Belief propagation through the GP-corrected model and chance-constraint tightening.

use nalgebra::{Matrix2, Vector2};

use crate::costs::CircleObstacle;
use crate::dynamics::{jacobian_nominal, step_nominal, NominalParams};
use crate::error::{invalid, Result};
use crate::types::{symmetrize, BeliefState, Control, GaussianCorrection};

/// One EKF-style prediction step: mean through the nominal model plus the GP
/// mean residual, covariance through the Jacobian plus the GP variances on the
/// velocity states.
pub fn propagate_belief(
    b: &BeliefState,
    u: &Control,
    corr: &GaussianCorrection,
    p: &NominalParams,
) -> BeliefState {
    let mut mean = step_nominal(&b.mean, u, p);
    mean.v += corr.mean[0];
    mean.omega += corr.mean[1];
    let j = jacobian_nominal(&b.mean, u, p);
    let mut cov = j * b.cov * j.transpose();
    cov[(3, 3)] += corr.cov[(0, 0)];
    cov[(4, 4)] += corr.cov[(1, 1)];
    BeliefState {
        mean,
        cov: symmetrize(&cov),
    }
}

/// `chi^2_2(p) = -2 ln(1 - p)`.
pub fn chi2_quantile_2dof(p: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(invalid(format!("chi-squared quantile needs p in [0, 1), got {p}")));
    }
    Ok(-2.0 * (-p).ln_1p())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile: Acklam's rational approximation polished by one
/// Newton step on the CDF.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid(format!("normal quantile needs p in (0, 1), got {p}")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383_577_518_672_69e2,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (-p).ln_1p()).sqrt())
    };
    let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    Ok(x - (normal_cdf(x) - p) / density)
}

/// Quantiles derived from the chance-constraint probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileTables {
    pub p_x: f64,
    pub chi2_2: f64,
    pub z: f64,
}

impl QuantileTables {
    pub fn new(p_x: f64) -> Result<Self> {
        if !(p_x > 0.5 && p_x < 1.0) {
            return Err(invalid(format!("p_x must lie in (0.5, 1), got {p_x}")));
        }
        Ok(Self {
            p_x,
            chi2_2: chi2_quantile_2dof(p_x)?,
            z: normal_quantile(p_x)?,
        })
    }
}

/// Largest eigenvalue of a symmetric 2x2 matrix (off-diagonals averaged).
pub fn lambda_max_2x2(m: &Matrix2<f64>) -> f64 {
    let a = m[(0, 0)];
    let d = m[(1, 1)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let half_diff = 0.5 * (a - d);
    0.5 * (a + d) + half_diff.hypot(b)
}

/// `r - sqrt(chi2_2 * lambda_max(cov_xy))`. A non-positive result means the
/// lane is infeasible at this confidence; callers penalize rather than abort.
pub fn tighten_lane_radius(r: f64, cov_xy: &Matrix2<f64>, q: &QuantileTables) -> Result<f64> {
    if !(r > 0.0) {
        return Err(invalid(format!("lane half-width must be positive, got {r}")));
    }
    Ok(r - (q.chi2_2 * lambda_max_2x2(cov_xy).max(0.0)).sqrt())
}

/// Tightened signed distance to a circular obstacle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObstacleTightening {
    /// Physical signed distance, negative inside.
    pub d: f64,
    pub d_bar: f64,
    /// Unit vector from the robot toward the obstacle center.
    pub normal: Vector2<f64>,
    /// Robot exactly at the center; `normal` defaults to +x.
    pub degenerate: bool,
}

impl ObstacleTightening {
    pub fn collision_free(&self) -> bool {
        self.d_bar > 0.0
    }

    /// Amount the obstacle radius is inflated by.
    pub fn margin(&self) -> f64 {
        self.d - self.d_bar
    }
}

pub fn tighten_obstacle_distance(
    robot_xy: &Vector2<f64>,
    obstacle: &CircleObstacle,
    cov_xy: &Matrix2<f64>,
    q: &QuantileTables,
) -> ObstacleTightening {
    let to_center = obstacle.center_vec() - robot_xy;
    let dist = to_center.norm();
    let (normal, degenerate) = if dist > 0.0 {
        (to_center / dist, false)
    } else {
        (Vector2::new(1.0, 0.0), true)
    };
    let d = dist - obstacle.radius;
    let spread = (normal.transpose() * cov_xy * normal)[(0, 0)].max(0.0).sqrt();
    ObstacleTightening {
        d,
        d_bar: d - q.z * spread,
        normal,
        degenerate,
    }
}
