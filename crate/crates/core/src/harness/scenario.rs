//! Scenario construction: terrain schedules and random obstacle fields.

use nalgebra::Vector2;
use rand::Rng;

use super::config::{AvoidanceConfig, ScheduleEntry, TrackingConfig};
use crate::costs::{CircleObstacle, GoalSpec, Track};
use crate::error::{invalid, Error, Result};

/// Terrain index per control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainSchedule {
    /// `(first tick, terrain)` pairs with strictly increasing ticks, starting at 0.
    switches: Vec<(u64, usize)>,
}

impl TerrainSchedule {
    /// Converts times to ticks; a switch at `time` takes effect at tick `round(time / dt)`.
    pub fn from_entries(entries: &[ScheduleEntry], dt: f64) -> Result<Self> {
        if entries.is_empty() || entries[0].time != 0.0 {
            return Err(invalid("terrain schedule must start at time 0"));
        }
        let switches: Vec<(u64, usize)> = entries
            .iter()
            .map(|e| ((e.time / dt).round() as u64, e.terrain))
            .collect();
        if switches.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(invalid("terrain schedule switches must map to distinct, increasing ticks"));
        }
        Ok(Self { switches })
    }

    pub fn constant(terrain: usize) -> Self {
        Self {
            switches: vec![(0, terrain)],
        }
    }

    pub fn terrain_at(&self, tick: u64) -> usize {
        self.switches
            .iter()
            .rev()
            .find(|(t, _)| *t <= tick)
            .map(|(_, i)| *i)
            .unwrap_or(self.switches[0].1)
    }

    pub fn initial(&self) -> usize {
        self.switches[0].1
    }

    pub fn switches(&self) -> &[(u64, usize)] {
        &self.switches
    }
}

pub const MAX_OBSTACLE_ATTEMPTS: usize = 10_000;

/// Samples `count` (at most 5) circles with centers in `region` and radii in
/// `radius_range`, each keeping `min_gap` of clearance from `start` and `goal`.
pub fn random_obstacle_field<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    region: [[f64; 2]; 2],
    radius_range: [f64; 2],
    start: [f64; 2],
    goal: [f64; 2],
    min_gap: f64,
) -> Result<Vec<CircleObstacle>> {
    if count > 5 {
        return Err(invalid(format!("at most 5 obstacles, got {count}")));
    }
    let start = Vector2::new(start[0], start[1]);
    let goal = Vector2::new(goal[0], goal[1]);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > MAX_OBSTACLE_ATTEMPTS {
            return Err(Error::ScenarioGeneration(format!(
                "could not place {count} obstacles in {MAX_OBSTACLE_ATTEMPTS} attempts"
            )));
        }
        let c = [
            rng.random_range(region[0][0]..=region[0][1]),
            rng.random_range(region[1][0]..=region[1][1]),
        ];
        let r = rng.random_range(radius_range[0]..=radius_range[1]);
        let o = CircleObstacle::new(c, r)?;
        if o.signed_distance(&start) >= min_gap && o.signed_distance(&goal) >= min_gap {
            out.push(o);
        }
    }
    Ok(out)
}

/// A fully specified run.
#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Tracking {
        track: Track,
        distance: f64,
        v_desired: f64,
        schedule: TerrainSchedule,
        max_duration: f64,
    },
    Avoidance {
        start: [f64; 2],
        start_heading: f64,
        goal: GoalSpec,
        obstacles: Vec<CircleObstacle>,
        v_desired: f64,
        schedule: TerrainSchedule,
        timeout: f64,
    },
}

impl Scenario {
    pub fn kind(&self) -> &'static str {
        match self {
            Scenario::Tracking { .. } => "tracking",
            Scenario::Avoidance { .. } => "avoidance",
        }
    }

    pub fn schedule(&self) -> &TerrainSchedule {
        match self {
            Scenario::Tracking { schedule, .. } | Scenario::Avoidance { schedule, .. } => schedule,
        }
    }

    pub fn tracking(cfg: &TrackingConfig, dt: f64) -> Result<Self> {
        Ok(Scenario::Tracking {
            track: cfg.track.clone(),
            distance: cfg.distance,
            v_desired: cfg.v_desired,
            schedule: TerrainSchedule::from_entries(&cfg.terrain_schedule, dt)?,
            max_duration: cfg.max_duration,
        })
    }

    /// Avoidance scenario with an obstacle field drawn from `rng`.
    pub fn avoidance<R: Rng + ?Sized>(cfg: &AvoidanceConfig, dt: f64, rng: &mut R) -> Result<Self> {
        let count = rng.random_range(cfg.min_obstacles..=cfg.max_obstacles);
        let obstacles = random_obstacle_field(
            rng,
            count,
            cfg.region,
            cfg.radius_range,
            cfg.start,
            cfg.goal.position,
            cfg.min_gap,
        )?;
        Ok(Scenario::Avoidance {
            start: cfg.start,
            start_heading: cfg.start_heading,
            goal: cfg.goal,
            obstacles,
            v_desired: cfg.v_desired,
            schedule: TerrainSchedule::from_entries(&cfg.terrain_schedule, dt)?,
            timeout: cfg.timeout,
        })
    }

    /// Same scenario with a single terrain for the whole run.
    pub fn with_terrain(mut self, terrain: usize) -> Self {
        match &mut self {
            Scenario::Tracking { schedule, .. } | Scenario::Avoidance { schedule, .. } => {
                *schedule = TerrainSchedule::constant(terrain);
            }
        }
        self
    }
}
