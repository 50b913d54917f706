//! Track geometry, obstacles and the two task costs (path tracking and obstacle avoidance).

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::types::{body_frame_displacement, GaussianCorrection, RobotState};

/// Lane centerline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Centerline {
    Circle { center: [f64; 2], radius: f64 },
    Polyline { points: Vec<[f64; 2]>, closed: bool },
}

/// A lane: centerline plus half-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Track {
    pub centerline: Centerline,
    pub half_width: f64,
}

fn closest_on_segment(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> (f64, Vector2<f64>) {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    let c = a + ab * t;
    ((p - c).norm(), c)
}

impl Track {
    pub fn new(centerline: Centerline, half_width: f64) -> Result<Self> {
        let t = Self {
            centerline,
            half_width,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn circle(center: [f64; 2], radius: f64, half_width: f64) -> Result<Self> {
        Self::new(Centerline::Circle { center, radius }, half_width)
    }

    /// Closed axis-aligned square with its lower-left corner at the origin.
    pub fn square(side: f64, half_width: f64) -> Result<Self> {
        Self::new(
            Centerline::Polyline {
                points: vec![[0.0, 0.0], [side, 0.0], [side, side], [0.0, side]],
                closed: true,
            },
            half_width,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(invalid(format!("half-width must be positive, got {}", self.half_width)));
        }
        match &self.centerline {
            Centerline::Circle { radius, .. } => {
                if !(*radius > 0.0 && radius.is_finite()) {
                    return Err(invalid(format!("circle radius must be positive, got {radius}")));
                }
            }
            Centerline::Polyline { points, .. } => {
                if points.len() < 2 {
                    return Err(invalid("polyline track needs at least 2 points"));
                }
                if points.windows(2).any(|w| w[0] == w[1]) {
                    return Err(invalid("consecutive polyline points must be distinct"));
                }
            }
        }
        Ok(())
    }

    fn segments(&self) -> impl Iterator<Item = (Vector2<f64>, Vector2<f64>)> + '_ {
        let (points, closed) = match &self.centerline {
            Centerline::Polyline { points, closed } => (points.as_slice(), *closed),
            Centerline::Circle { .. } => (&[][..], false),
        };
        let n = points.len();
        let count = if closed && n > 2 { n } else { n.saturating_sub(1) };
        (0..count).map(move |i| {
            let a = points[i];
            let b = points[(i + 1) % n];
            (Vector2::new(a[0], a[1]), Vector2::new(b[0], b[1]))
        })
    }

    /// Distance from `xy` to the nearest centerline point.
    pub fn centerline_distance(&self, xy: &Vector2<f64>) -> f64 {
        match &self.centerline {
            Centerline::Circle { center, radius } => {
                ((xy - Vector2::new(center[0], center[1])).norm() - radius).abs()
            }
            Centerline::Polyline { .. } => self
                .segments()
                .map(|(a, b)| closest_on_segment(xy, &a, &b).0)
                // Strict comparison keeps the lowest segment index on ties.
                .fold(f64::INFINITY, |best, d| if d < best { d } else { best }),
        }
    }

    /// A pose on the centerline facing along the lane (counter-clockwise for circles).
    pub fn start_pose(&self) -> (Vector2<f64>, f64) {
        match &self.centerline {
            Centerline::Circle { center, radius } => {
                (Vector2::new(center[0], center[1] - radius), 0.0)
            }
            Centerline::Polyline { points, .. } => {
                let a = Vector2::new(points[0][0], points[0][1]);
                let b = Vector2::new(points[1][0], points[1][1]);
                let d = b - a;
                (a, d.y.atan2(d.x))
            }
        }
    }
}

/// Normalized distance to the centerline: 0 on it, 1 on the boundary.
pub fn lane_deviation(track: &Track, xy: &Vector2<f64>) -> f64 {
    track.centerline_distance(xy) / track.half_width
}

/// True when `xy` is farther than `r_bar` from the centerline, or the
/// tightened lane has collapsed (`r_bar <= 0`). The boundary itself is inside.
pub fn lane_violation(track: &Track, xy: &Vector2<f64>, r_bar: f64) -> bool {
    r_bar <= 0.0 || track.centerline_distance(xy) > r_bar
}

pub const SLIP_EPS_LONG: f64 = 1e-3;

/// |lateral| / max(|longitudinal|, eps) of the body-frame displacement between consecutive states.
pub fn slip_ratio(prev: &RobotState, next: &RobotState) -> f64 {
    let (lon, lat) = body_frame_displacement(prev, next);
    lat.abs() / lon.abs().max(SLIP_EPS_LONG)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircleObstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl CircleObstacle {
    pub fn new(center: [f64; 2], radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) || !center.iter().all(|c| c.is_finite()) {
            return Err(invalid(format!("invalid obstacle at {center:?} radius {radius}")));
        }
        Ok(Self { center, radius })
    }

    pub fn center_vec(&self) -> Vector2<f64> {
        Vector2::new(self.center[0], self.center[1])
    }

    /// Physical signed distance, negative inside.
    pub fn signed_distance(&self, xy: &Vector2<f64>) -> f64 {
        (xy - self.center_vec()).norm() - self.radius
    }
}

fn check_unit(name: &str, w: &[f64]) -> Result<()> {
    if w.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(invalid(format!("{name} weights must lie in [0, 1]: {w:?}")));
    }
    Ok(())
}

/// `alpha_0..alpha_4`: covariance trace, lane deviation, slip, lane violation, speed shortfall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingWeights(pub [f64; 5]);

impl Default for TrackingWeights {
    fn default() -> Self {
        Self([0.1, 1.0, 0.3, 1.0, 0.2])
    }
}

impl TrackingWeights {
    pub fn validate(&self) -> Result<()> {
        check_unit("tracking", &self.0)
    }
}

/// `beta_0..beta_3`: covariance trace, collision, goal distance, terminal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AvoidanceWeights(pub [f64; 4]);

impl Default for AvoidanceWeights {
    fn default() -> Self {
        Self([0.1, 1.0, 0.5, 1.0])
    }
}

impl AvoidanceWeights {
    pub fn validate(&self) -> Result<()> {
        check_unit("avoidance", &self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalSpec {
    pub position: [f64; 2],
    pub capture_radius: f64,
}

impl GoalSpec {
    pub fn new(position: [f64; 2], capture_radius: f64) -> Result<Self> {
        if !(capture_radius > 0.0) {
            return Err(invalid("goal capture radius must be positive"));
        }
        Ok(Self {
            position,
            capture_radius,
        })
    }

    pub fn position_vec(&self) -> Vector2<f64> {
        Vector2::new(self.position[0], self.position[1])
    }
}

pub const DEFAULT_HIGH_COST: f64 = 1e4;

/// Per-step geometric decay of the lane-violation term.
const VIOLATION_DECAY: f64 = 0.9;

/// Path-tracking cost of one rollout.
///
/// `states` holds `N + 1` mean states starting at the current state; the
/// per-step terms are evaluated on `states[k + 1]`, slip on the transition
/// `states[k] -> states[k + 1]`.
pub fn tracking_cost(
    states: &[RobotState],
    corrections: &[GaussianCorrection],
    track: &Track,
    r_bar: &[f64],
    v_desired: f64,
    v_sampled: &[f64],
    w: &TrackingWeights,
) -> Result<f64> {
    let n = corrections.len();
    if states.len() != n + 1 || r_bar.len() != n || v_sampled.len() != n {
        return Err(invalid(format!(
            "rollout length mismatch: {} states, {} corrections, {} radii, {} speeds",
            states.len(),
            n,
            r_bar.len(),
            v_sampled.len()
        )));
    }
    Ok(tracking_cost_unchecked(states, corrections, track, r_bar, v_desired, v_sampled, w))
}

#[inline]
pub(crate) fn tracking_cost_unchecked(
    states: &[RobotState],
    corrections: &[GaussianCorrection],
    track: &Track,
    r_bar: &[f64],
    v_desired: f64,
    v_sampled: &[f64],
    w: &TrackingWeights,
) -> f64 {
    let [a0, a1, a2, a3, a4] = w.0;
    let mut total = 0.0;
    let mut decay = 1.0;
    for k in 0..corrections.len() {
        let s = &states[k + 1];
        let xy = s.position();
        let dist = track.centerline_distance(&xy);
        let violated = r_bar[k] <= 0.0 || dist > r_bar[k];
        total += a0 * corrections[k].trace()
            + a1 * dist / track.half_width
            + a2 * slip_ratio(&states[k], s)
            + a3 * decay * if violated { 1.0 } else { 0.0 }
            + a4 * (v_desired - v_sampled[k]).max(0.0);
        decay *= VIOLATION_DECAY;
    }
    total
}

/// Collision test against tightened obstacles; `margins[o]` is obstacle `o`'s
/// inflation at this step, so the check is `d(xy) - margin > 0`.
pub fn collision_indicator(xy: &Vector2<f64>, obstacles: &[CircleObstacle], margins: &[f64]) -> bool {
    obstacles
        .iter()
        .zip(margins)
        .any(|(o, m)| !(o.signed_distance(xy) - m > 0.0))
}

pub fn stage_goal_cost(xy: &Vector2<f64>, goal: &GoalSpec) -> f64 {
    (xy - goal.position_vec()).norm()
}

pub fn terminal_cost(final_xy: &Vector2<f64>, goal: &GoalSpec, high_cost: f64) -> f64 {
    if stage_goal_cost(final_xy, goal) <= goal.capture_radius {
        0.0
    } else {
        high_cost
    }
}

/// Obstacle-avoidance cost of one rollout. `margins` is row-major `N x obstacles`.
pub fn avoidance_cost(
    states: &[RobotState],
    corrections: &[GaussianCorrection],
    obstacles: &[CircleObstacle],
    margins: &[f64],
    goal: &GoalSpec,
    w: &AvoidanceWeights,
    high_cost: f64,
) -> Result<f64> {
    let n = corrections.len();
    if states.len() != n + 1 || margins.len() != n * obstacles.len() {
        return Err(invalid(format!(
            "rollout length mismatch: {} states, {} corrections, {} margins for {} obstacles",
            states.len(),
            n,
            margins.len(),
            obstacles.len()
        )));
    }
    Ok(avoidance_cost_unchecked(states, corrections, obstacles, margins, goal, w, high_cost))
}

#[inline]
pub(crate) fn avoidance_cost_unchecked(
    states: &[RobotState],
    corrections: &[GaussianCorrection],
    obstacles: &[CircleObstacle],
    margins: &[f64],
    goal: &GoalSpec,
    w: &AvoidanceWeights,
    high_cost: f64,
) -> f64 {
    let [b0, b1, b2, b3] = w.0;
    let m = obstacles.len();
    let mut total = 0.0;
    for k in 0..corrections.len() {
        let xy = states[k + 1].position();
        let hit = collision_indicator(&xy, obstacles, &margins[k * m..(k + 1) * m]);
        total += b0 * corrections[k].trace()
            + b1 * if hit { 1.0 } else { 0.0 }
            + b2 * stage_goal_cost(&xy, goal);
    }
    let last = states[states.len() - 1].position();
    total + b3 * terminal_cost(&last, goal, high_cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::arc_pose;
    use proptest::prelude::*;

    fn v(x: f64, y: f64) -> Vector2<f64> {
        Vector2::new(x, y)
    }

    #[test]
    fn lane_deviation_examples() {
        let t = Track::circle([0.0, 0.0], 10.0, 1.0).unwrap();
        assert_eq!(lane_deviation(&t, &v(10.0, 0.0)), 0.0);
        assert_eq!(lane_deviation(&t, &v(0.0, 11.0)), 1.0);
        assert!((lane_deviation(&t, &v(10.5, 0.0)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn polyline_distance_and_ties() {
        let t = Track::square(4.0, 0.5).unwrap();
        assert_eq!(t.centerline_distance(&v(2.0, 0.0)), 0.0);
        assert!((t.centerline_distance(&v(2.0, 0.3)) - 0.3).abs() < 1e-15);
        // Closing segment from (0,4) back to (0,0).
        assert!((t.centerline_distance(&v(-0.2, 2.0)) - 0.2).abs() < 1e-15);
        // Equidistant from two edges near a corner.
        assert!((t.centerline_distance(&v(3.5, 0.5)) - 0.5).abs() < 1e-15);
        assert!(Track::new(Centerline::Polyline { points: vec![[0.0, 0.0]], closed: false }, 1.0).is_err());
        assert!(Track::new(
            Centerline::Polyline { points: vec![[0.0, 0.0], [0.0, 0.0]], closed: false },
            1.0
        )
        .is_err());
        assert!(Track::circle([0.0, 0.0], 1.0, 0.0).is_err());
    }

    #[test]
    fn lane_violation_examples() {
        let t = Track::circle([0.0, 0.0], 10.0, 1.0).unwrap();
        assert!(!lane_violation(&t, &v(10.0, 0.0), 0.5));
        assert!(!lane_violation(&t, &v(10.5, 0.0), 0.5));
        assert!(lane_violation(&t, &v(10.7, 0.0), 0.5));
        assert!(lane_violation(&t, &v(10.0, 0.0), 0.0));
    }

    #[test]
    fn slip_examples() {
        let a = RobotState::new(0.0, 0.0, 0.0, 2.0, 0.0);
        let b = RobotState::new(0.1, 0.0, 0.0, 2.0, 0.0);
        assert_eq!(slip_ratio(&a, &b), 0.0);
        let (x, y, th) = arc_pose(0.0, 0.0, 0.0, 2.0, 1.0, 0.05);
        let c = RobotState::new(x, y, th, 2.0, 1.0);
        assert!((slip_ratio(&a, &c) - 0.025f64.tan()).abs() < 1e-12);
        assert_eq!(slip_ratio(&a, &a), 0.0);
    }

    fn straight(n: usize, y: f64) -> Vec<RobotState> {
        (0..=n)
            .map(|k| RobotState::new(0.1 * k as f64, y, 0.0, 2.0, 0.0))
            .collect()
    }

    fn straight_track() -> Track {
        Track::new(
            Centerline::Polyline {
                points: vec![[-10.0, 0.0], [100.0, 0.0]],
                closed: false,
            },
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn tracking_cost_examples() {
        let n = 20;
        let states = straight(n, 0.0);
        let corr = vec![GaussianCorrection::zero(); n];
        let r = vec![1.0; n];
        let vs = vec![2.0; n];
        let track = straight_track();
        assert_eq!(
            tracking_cost(&states, &corr, &track, &r, 2.0, &vs, &TrackingWeights([0.0; 5])).unwrap(),
            0.0
        );
        let w = TrackingWeights([0.1, 1.0, 0.0, 1.0, 0.2]);
        assert!(tracking_cost(&states, &corr, &track, &r, 2.0, &vs, &w).unwrap().abs() < 1e-12);
        assert!(tracking_cost(&states, &corr, &track, &r[1..], 2.0, &vs, &w).is_err());

        let only = TrackingWeights([0.0, 0.0, 0.0, 1.0, 0.0]);
        let mut early = r.clone();
        early[0] = -1.0;
        let mut late = r.clone();
        late[10] = -1.0;
        let c0 = tracking_cost(&states, &corr, &track, &early, 2.0, &vs, &only).unwrap();
        let c10 = tracking_cost(&states, &corr, &track, &late, 2.0, &vs, &only).unwrap();
        assert!((c10 / c0 - 0.9f64.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn goal_costs() {
        let g = GoalSpec::new([0.0, 0.0], 0.5).unwrap();
        assert_eq!(stage_goal_cost(&v(0.0, 0.0), &g), 0.0);
        assert_eq!(stage_goal_cost(&v(3.0, 4.0), &g), 5.0);
        let g2 = GoalSpec::new([10.0, 10.0], 0.5).unwrap();
        assert_eq!(stage_goal_cost(&v(13.0, 14.0), &g2), 5.0);
        assert_eq!(terminal_cost(&v(0.5, 0.0), &g, 1e4), 0.0);
        assert_eq!(terminal_cost(&v(0.6, 0.0), &g, 1e4), 1e4);
    }

    #[test]
    fn collision_examples() {
        let obs = vec![CircleObstacle::new([0.0, 0.0], 1.0).unwrap()];
        assert!(!collision_indicator(&v(0.0, 0.0), &[], &[]));
        assert!(collision_indicator(&v(0.5, 0.0), &obs, &[0.0]));
        assert!(!collision_indicator(&v(1.2, 0.0), &obs, &[0.0]));
        assert!(collision_indicator(&v(1.2, 0.0), &obs, &[0.3]));
    }

    #[test]
    fn avoidance_cost_examples() {
        let n = 10;
        let states = straight(n, 0.0);
        let corr = vec![GaussianCorrection::zero(); n];
        let goal = GoalSpec::new([5.0, 0.0], 0.5).unwrap();
        let none: Vec<CircleObstacle> = vec![];
        assert_eq!(
            avoidance_cost(&states, &corr, &none, &[], &goal, &AvoidanceWeights([0.0; 4]), 1e4).unwrap(),
            0.0
        );
        let w = AvoidanceWeights([0.1, 1.0, 0.5, 0.0]);
        let c = avoidance_cost(&states, &corr, &none, &[], &goal, &w, 1e4).unwrap();
        let expected: f64 = (1..=n).map(|k| 0.5 * (5.0 - 0.1 * k as f64)).sum();
        assert!((c - expected).abs() < 1e-12);

        let obs = vec![CircleObstacle::new([0.5, 0.0], 0.01).unwrap()];
        let margins = vec![0.0; n];
        let hit = avoidance_cost(&states, &corr, &obs, &margins, &goal, &w, 1e4).unwrap();
        assert!((hit - c - 1.0).abs() < 1e-12);
        assert!(avoidance_cost(&states, &corr, &obs, &margins[1..], &goal, &w, 1e4).is_err());
    }

    proptest! {
        #[test]
        fn costs_monotone_in_weights(
            ys in proptest::collection::vec(-1.5f64..1.5, 11),
            base in proptest::array::uniform5(0.0f64..0.5),
            bump in 0usize..5,
            shrink in 0.0f64..0.5,
        ) {
            let states: Vec<RobotState> = ys.iter().enumerate()
                .map(|(k, &y)| RobotState::new(0.1 * k as f64, y, 0.05 * k as f64, 1.5, 0.0)).collect();
            let corr = vec![GaussianCorrection { mean: Vector2::zeros(), cov: nalgebra::Matrix2::identity() * 0.01 }; 10];
            let track = straight_track();
            let r = vec![1.0; 10];
            let r_tight = vec![1.0 - shrink; 10];
            let vs = vec![1.0; 10];
            let w = TrackingWeights(base);
            let mut w2 = base;
            w2[bump] += 0.5;
            let c = tracking_cost(&states, &corr, &track, &r, 2.0, &vs, &w).unwrap();
            let c2 = tracking_cost(&states, &corr, &track, &r, 2.0, &vs, &TrackingWeights(w2)).unwrap();
            prop_assert!(c2 >= c);
            prop_assert!(c.is_finite());
            let ct = tracking_cost(&states, &corr, &track, &r_tight, 2.0, &vs, &w).unwrap();
            prop_assert!(ct >= c);

            let obs = vec![CircleObstacle::new([0.5, 0.2], 0.3).unwrap()];
            let goal = GoalSpec::new([3.0, 0.0], 0.3).unwrap();
            let aw = AvoidanceWeights([base[0], base[1], base[2], base[3]]);
            let mut aw2 = aw.0;
            aw2[bump % 4] += 0.5;
            let m0 = vec![0.0; 10];
            let m1 = vec![shrink; 10];
            let a = avoidance_cost(&states, &corr, &obs, &m0, &goal, &aw, 1e4).unwrap();
            let a2 = avoidance_cost(&states, &corr, &obs, &m0, &goal, &AvoidanceWeights(aw2), 1e4).unwrap();
            let at = avoidance_cost(&states, &corr, &obs, &m1, &goal, &aw, 1e4).unwrap();
            prop_assert!(a2 >= a && at >= a && a.is_finite());
        }

        #[test]
        fn circle_deviation_closed_form(x in -20.0f64..20.0, y in -20.0f64..20.0) {
            let t = Track::circle([1.0, -2.0], 7.0, 0.5).unwrap();
            let expected = ((x - 1.0).hypot(y + 2.0) - 7.0).abs() / 0.5;
            prop_assert!((lane_deviation(&t, &v(x, y)) - expected).abs() < 1e-12);
        }
    }
}
