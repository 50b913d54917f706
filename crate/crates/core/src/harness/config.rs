//! Experiment configuration, loaded from a TOML file with unknown keys rejected.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::costs::{AvoidanceWeights, GoalSpec, Track, TrackingWeights, DEFAULT_HIGH_COST};
use crate::dynamics::{ExcitationConfig, NominalParams, TerrainProfile};
use crate::error::{Error, Result};
use crate::gp::HyperGrid;
use crate::mppi::MppiConfig;
use crate::terrain::WeightSolverConfig;

/// Which model the planner rolls out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerKind {
    Gp,
    Edd5,
    Unicycle,
}

impl PlannerKind {
    pub const ALL: [PlannerKind; 3] = [PlannerKind::Edd5, PlannerKind::Unicycle, PlannerKind::Gp];

    pub fn as_str(&self) -> &'static str {
        match self {
            PlannerKind::Gp => "gp",
            PlannerKind::Edd5 => "edd5",
            PlannerKind::Unicycle => "unicycle",
        }
    }
}

impl FromStr for PlannerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gp" => Ok(PlannerKind::Gp),
            "edd5" => Ok(PlannerKind::Edd5),
            "unicycle" => Ok(PlannerKind::Unicycle),
            other => Err(Error::Config(format!("unknown planner '{other}' (expected gp, edd5 or unicycle)"))),
        }
    }
}

impl std::fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Terrain active from `time` seconds onward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub time: f64,
    pub terrain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Shared GP training inputs (each carries one residual per terrain).
    pub gp_points: usize,
    pub excitation: ExcitationConfig,
    pub grid: HyperGrid,
    /// Transitions per terrain for the EDD5 fit.
    pub edd5_points: usize,
    pub settle_ticks: usize,
    pub track_width: f64,
    pub seed: u64,
    /// Load the GP ensemble from this file instead of training it.
    pub model_file: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            gp_points: 300,
            excitation: ExcitationConfig::default(),
            grid: HyperGrid::default(),
            edd5_points: 3000,
            settle_ticks: 20,
            track_width: 0.43,
            seed: 7,
            model_file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub tracking: TrackingWeights,
    pub avoidance: AvoidanceWeights,
    pub high_cost: f64,
    /// Chance-constraint probability.
    pub p_x: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            tracking: TrackingWeights::default(),
            avoidance: AvoidanceWeights::default(),
            high_cost: DEFAULT_HIGH_COST,
            p_x: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingConfig {
    pub track: Track,
    /// Distance budget of one run [m].
    pub distance: f64,
    pub v_desired: f64,
    pub terrain_schedule: Vec<ScheduleEntry>,
    /// Abort after this many seconds even if the distance was not covered.
    pub max_duration: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            track: Track::circle([0.0, 5.0], 5.0, 0.5).expect("valid default track"),
            distance: 100.0,
            v_desired: 2.0,
            terrain_schedule: vec![ScheduleEntry { time: 0.0, terrain: 0 }],
            max_duration: 200.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AvoidanceConfig {
    pub start: [f64; 2],
    pub start_heading: f64,
    pub goal: GoalSpec,
    pub min_obstacles: usize,
    pub max_obstacles: usize,
    /// Obstacle centers are drawn from `[x_min, x_max] x [y_min, y_max]`.
    pub region: [[f64; 2]; 2],
    pub radius_range: [f64; 2],
    /// Clearance kept between every obstacle and the start and goal points.
    pub min_gap: f64,
    pub v_desired: f64,
    pub timeout: f64,
    pub terrain_schedule: Vec<ScheduleEntry>,
}

impl Default for AvoidanceConfig {
    fn default() -> Self {
        Self {
            start: [0.0, 0.0],
            start_heading: 0.0,
            goal: GoalSpec {
                position: [10.0, 0.0],
                capture_radius: 0.3,
            },
            min_obstacles: 1,
            max_obstacles: 5,
            region: [[2.0, 8.0], [-2.0, 2.0]],
            radius_range: [0.3, 0.7],
            min_gap: 0.6,
            v_desired: 2.0,
            timeout: 20.0,
            terrain_schedule: vec![ScheduleEntry { time: 0.0, terrain: 0 }],
        }
    }
}

/// Which runs `bench` performs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub planners: Vec<PlannerKind>,
    pub terrains: Vec<usize>,
    /// Tracking track kinds: "circle" uses `[tracking].track`, "square" a square of `square_side`.
    pub tracks: Vec<String>,
    pub square_side: f64,
    pub tracking_seeds: Vec<u64>,
    /// Avoidance trials in total, split as evenly as possible across terrains.
    pub avoidance_trials: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            planners: PlannerKind::ALL.to_vec(),
            terrains: vec![0, 1, 2],
            tracks: vec!["circle".into()],
            square_side: 8.0,
            tracking_seeds: vec![1],
            avoidance_trials: 99,
        }
    }
}

/// Every tunable of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub planner: PlannerKind,
    pub seed: u64,
    pub nominal: NominalParams,
    pub terrains: Vec<TerrainProfile>,
    pub training: TrainingConfig,
    pub solver: WeightSolverConfig,
    pub mppi: MppiConfig,
    pub costs: CostConfig,
    pub tracking: TrackingConfig,
    pub avoidance: AvoidanceConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            planner: PlannerKind::Gp,
            seed: 0,
            nominal: NominalParams::default(),
            terrains: vec![TerrainProfile::tile(), TerrainProfile::asphalt(), TerrainProfile::grass()],
            training: TrainingConfig::default(),
            solver: WeightSolverConfig::default(),
            mppi: MppiConfig::default(),
            costs: CostConfig::default(),
            tracking: TrackingConfig::default(),
            avoidance: AvoidanceConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn check_schedule(name: &str, schedule: &[ScheduleEntry], terrains: usize) -> Result<()> {
    if schedule.is_empty() || schedule[0].time != 0.0 {
        return Err(Error::Config(format!("{name} terrain schedule must start at time 0")));
    }
    if schedule.windows(2).any(|w| !(w[1].time > w[0].time)) {
        return Err(Error::Config(format!("{name} terrain schedule times must be strictly increasing")));
    }
    if let Some(e) = schedule.iter().find(|e| e.terrain >= terrains) {
        return Err(Error::Config(format!("{name} schedule references terrain {} of {terrains}", e.terrain)));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization, tying result files to their configuration.
    pub fn hash_hex(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml_string()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        self.nominal.validate().map_err(cfg_err)?;
        if self.terrains.is_empty() {
            return Err(Error::Config("at least one terrain profile is required".into()));
        }
        for t in &self.terrains {
            t.validate(self.nominal.dt).map_err(cfg_err)?;
        }
        self.training.excitation.validate().map_err(cfg_err)?;
        if self.training.gp_points == 0 || self.training.edd5_points == 0 || self.training.track_width <= 0.0 {
            return Err(Error::Config("training sizes and track width must be positive".into()));
        }
        self.solver.validate().map_err(cfg_err)?;
        self.mppi.validate().map_err(cfg_err)?;
        self.costs.tracking.validate().map_err(cfg_err)?;
        self.costs.avoidance.validate().map_err(cfg_err)?;
        if !(self.costs.p_x > 0.5 && self.costs.p_x < 1.0) {
            return Err(Error::Config(format!("p_x must lie in (0.5, 1), got {}", self.costs.p_x)));
        }
        if !(self.costs.high_cost > 0.0) {
            return Err(Error::Config("high_cost must be positive".into()));
        }
        self.tracking.track.validate().map_err(cfg_err)?;
        if !(self.tracking.distance > 0.0 && self.tracking.max_duration > 0.0 && self.tracking.v_desired > 0.0) {
            return Err(Error::Config("tracking distance, duration and speed must be positive".into()));
        }
        check_schedule("tracking", &self.tracking.terrain_schedule, self.terrains.len())?;
        let a = &self.avoidance;
        check_schedule("avoidance", &a.terrain_schedule, self.terrains.len())?;
        if a.max_obstacles > 5 || a.min_obstacles > a.max_obstacles {
            return Err(Error::Config("obstacle counts must satisfy min <= max <= 5".into()));
        }
        if !(a.radius_range[0] > 0.0 && a.radius_range[0] <= a.radius_range[1]) {
            return Err(Error::Config("obstacle radius range must be positive and ordered".into()));
        }
        if !(a.region[0][0] <= a.region[0][1] && a.region[1][0] <= a.region[1][1]) {
            return Err(Error::Config("obstacle region bounds must be ordered".into()));
        }
        if !(a.goal.capture_radius > 0.0 && a.timeout > 0.0 && a.v_desired > 0.0 && a.min_gap >= 0.0) {
            return Err(Error::Config("avoidance goal radius, timeout, speed and gap must be positive".into()));
        }
        if let Some(t) = self.bench.terrains.iter().find(|&&t| t >= self.terrains.len()) {
            return Err(Error::Config(format!("bench references terrain {t} of {}", self.terrains.len())));
        }
        if let Some(t) = self.bench.tracks.iter().find(|t| t.as_str() != "circle" && t.as_str() != "square") {
            return Err(Error::Config(format!("unknown bench track '{t}' (expected circle or square)")));
        }
        if !(self.bench.square_side > 0.0) {
            return Err(Error::Config("square_side must be positive".into()));
        }
        Ok(())
    }
}
