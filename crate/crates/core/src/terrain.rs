//! Online terrain-weight estimation from a sliding history of measured and
//! per-terrain predicted velocities.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::types::TerrainWeights;

/// One history row: measured next-step `(v, omega)` and each terrain's prediction of it.
#[derive(Debug, Clone, PartialEq)]
struct HistoryRow {
    measured: Vector2<f64>,
    predicted: Vec<Vector2<f64>>,
}

/// FIFO buffer of the last `capacity` observations.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    capacity: usize,
    terrains: usize,
    rows: VecDeque<HistoryRow>,
}

impl HistoryBuffer {
    pub fn new(capacity: usize, terrains: usize) -> Result<Self> {
        if capacity == 0 || terrains == 0 {
            return Err(invalid("history buffer needs positive capacity and terrain count"));
        }
        Ok(Self {
            capacity,
            terrains,
            rows: VecDeque::with_capacity(capacity),
        })
    }

    pub fn push_observation(&mut self, measured: Vector2<f64>, per_terrain_pred: &[Vector2<f64>]) -> Result<()> {
        if per_terrain_pred.len() != self.terrains {
            return Err(invalid(format!(
                "expected {} terrain predictions, got {}",
                self.terrains,
                per_terrain_pred.len()
            )));
        }
        if self.rows.len() == self.capacity {
            self.rows.pop_front();
        }
        self.rows.push_back(HistoryRow {
            measured,
            predicted: per_terrain_pred.to_vec(),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn terrains(&self) -> usize {
        self.terrains
    }

    /// `Y_v`, `Y_omega` stacked into one column.
    pub fn measured(&self) -> DVector<f64> {
        let n = self.len();
        DVector::from_fn(2 * n, |r, _| {
            let row = &self.rows[r % n];
            row.measured[r / n]
        })
    }

    /// `F_v` over `F_omega`, one column per terrain.
    pub fn predictions(&self) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(2 * n, self.terrains, |r, j| self.rows[r % n].predicted[j][r / n])
    }

    pub fn measured_row(&self, i: usize) -> Vector2<f64> {
        self.rows[i].measured
    }

    pub fn predicted_row(&self, i: usize) -> &[Vector2<f64>] {
        &self.rows[i].predicted
    }
}

/// Euclidean projection onto the probability simplex (sort-and-threshold).
pub fn project_simplex(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() || z.iter().any(|x| !x.is_finite()) {
        return Err(invalid("simplex projection needs a finite, non-empty vector"));
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cumulative += s;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    let mut w: Vec<f64> = z.iter().map(|x| (x - theta).max(0.0)).collect();
    // Remove the rounding residue so the sum is 1 to machine precision.
    let sum: f64 = w.iter().sum();
    if sum > 0.0 {
        w.iter_mut().for_each(|x| *x /= sum);
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightSolverConfig {
    /// History length `H`.
    pub history: usize,
    /// L1 weight on departures from the previous estimate. Velocity errors are
    /// a few cm/s, so the data term per row is ~1e-3; much above 1e-2 the
    /// penalty pins the weights in place.
    pub gamma: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for WeightSolverConfig {
    fn default() -> Self {
        Self {
            history: 20,
            gamma: 0.01,
            max_iters: 200,
            tol: 1e-8,
        }
    }
}

impl WeightSolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history == 0 || !(self.gamma >= 0.0) || !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(invalid(format!("invalid weight solver config: {self:?}")));
        }
        Ok(())
    }
}

/// Solver output with its objective trace.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSolution {
    pub weights: TerrainWeights,
    pub objective: f64,
    /// Best objective after each iteration; non-increasing.
    pub history: Vec<f64>,
    /// The buffer was empty and `prev` was returned unchanged.
    pub empty_buffer: bool,
}

/// The weight problem reduced to its Gram form:
/// `c - 2 b.w + w.G w + gamma |w - prev|_1`.
struct Problem<'a> {
    gram: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
    gamma: f64,
    prev: &'a [f64],
}

impl Problem<'_> {
    fn objective(&self, w: &[f64]) -> f64 {
        let wv = DVector::from_column_slice(w);
        let quad = self.c - 2.0 * self.b.dot(&wv) + wv.dot(&(&self.gram * &wv));
        let l1: f64 = w.iter().zip(self.prev).map(|(a, p)| (a - p).abs()).sum();
        quad + self.gamma * l1
    }

    /// Subgradient, using 0 for the L1 term at `w_i == prev_i`.
    fn subgradient(&self, w: &[f64]) -> Vec<f64> {
        let wv = DVector::from_column_slice(w);
        let g = (&self.gram * &wv - &self.b) * 2.0;
        g.iter()
            .zip(w.iter().zip(self.prev))
            .map(|(gi, (wi, pi))| {
                let s = if wi > pi {
                    1.0
                } else if wi < pi {
                    -1.0
                } else {
                    0.0
                };
                gi + self.gamma * s
            })
            .collect()
    }

    /// Exact minimization along `e_i - e_j` (mass moved from `j` to `i`).
    fn pair_move(&self, w: &[f64], i: usize, j: usize) -> Option<f64> {
        let wv = DVector::from_column_slice(w);
        let grad = &self.gram * &wv - &self.b;
        let c1 = 2.0 * (grad[i] - grad[j]);
        let c2 = self.gram[(i, i)] + self.gram[(j, j)] - 2.0 * self.gram[(i, j)];
        let (lo, hi) = (-w[i], w[j]);
        if hi - lo <= 0.0 {
            return None;
        }
        let kink_i = self.prev[i] - w[i];
        let kink_j = w[j] - self.prev[j];
        let mut points = vec![lo, hi];
        for k in [kink_i, kink_j] {
            if k > lo && k < hi {
                points.push(k);
            }
        }
        points.sort_by(f64::total_cmp);
        let f = |t: f64| {
            c1 * t
                + c2 * t * t
                + self.gamma * ((w[i] + t - self.prev[i]).abs() + (w[j] - t - self.prev[j]).abs()
                    - (w[i] - self.prev[i]).abs()
                    - (w[j] - self.prev[j]).abs())
        };
        let mut candidates = points.clone();
        if c2 > 0.0 {
            for seg in points.windows(2) {
                let mid = 0.5 * (seg[0] + seg[1]);
                let slope = self.gamma
                    * ((w[i] + mid - self.prev[i]).signum() - (w[j] - mid - self.prev[j]).signum());
                let t = (-(c1 + slope) / (2.0 * c2)).clamp(seg[0], seg[1]);
                candidates.push(t);
            }
        }
        let (best_t, best_f) = candidates
            .into_iter()
            .map(|t| (t, f(t)))
            .fold((0.0, 0.0), |acc, c| if c.1 < acc.1 { c } else { acc });
        (best_f < 0.0).then_some(best_t)
    }
}

/// Simplex-constrained, L1-regularized least squares for the terrain weights.
///
/// Projected subgradient descent (step `a / (1 + t)`, halved while the
/// objective would increase, warm-started at `prev`), followed by exact
/// two-coordinate moves until no pair improves. Returns the best iterate.
pub fn solve_weights(buf: &HistoryBuffer, prev: &TerrainWeights, cfg: &WeightSolverConfig) -> Result<WeightSolution> {
    cfg.validate()?;
    let m = buf.terrains();
    if prev.len() != m {
        return Err(invalid(format!("prev has {} weights for {} terrains", prev.len(), m)));
    }
    if buf.is_empty() {
        return Ok(WeightSolution {
            weights: prev.clone(),
            objective: 0.0,
            history: Vec::new(),
            empty_buffer: true,
        });
    }
    let y = buf.measured();
    let f = buf.predictions();
    let problem = Problem {
        gram: f.transpose() * &f,
        b: f.transpose() * &y,
        c: y.dot(&y),
        gamma: cfg.gamma,
        prev: prev.as_slice(),
    };

    let mut w = prev.as_slice().to_vec();
    let mut best = problem.objective(&w);
    let mut history = Vec::with_capacity(cfg.max_iters + 1);
    // Step scale from the Lipschitz bound of the smooth part.
    let lipschitz = 2.0 * problem.gram.trace().max(f64::MIN_POSITIVE);
    let base_step = 1.0 / lipschitz;
    for t in 0..cfg.max_iters {
        let g = problem.subgradient(&w);
        let mut step = base_step / (1.0 + t as f64);
        let mut moved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - step * gi).collect();
            let trial = project_simplex(&trial)?;
            let value = problem.objective(&trial);
            if value <= best {
                let gain = best - value;
                w = trial;
                best = value;
                moved = gain > cfg.tol * best.abs().max(1.0);
                break;
            }
            step *= 0.5;
        }
        history.push(best);
        if !moved {
            break;
        }
    }

    // Exact pairwise polish; each accepted move strictly decreases the objective.
    for _ in 0..1000 {
        let mut improved = false;
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                if let Some(t) = problem.pair_move(&w, i, j) {
                    let mut trial = w.clone();
                    trial[i] = (trial[i] + t).max(0.0);
                    trial[j] = (trial[j] - t).max(0.0);
                    let trial = project_simplex(&trial)?;
                    let value = problem.objective(&trial);
                    if value < best {
                        w = trial;
                        best = value;
                        improved = true;
                    }
                }
            }
        }
        history.push(best);
        if !improved {
            break;
        }
    }

    Ok(WeightSolution {
        weights: TerrainWeights::from_projected(w),
        objective: best,
        history,
        empty_buffer: false,
    })
}

/// Objective of the weight problem at `w`, for diagnostics and tests.
pub fn weight_objective(buf: &HistoryBuffer, w: &[f64], prev: &[f64], gamma: f64) -> f64 {
    let y = buf.measured();
    let f = buf.predictions();
    let wv = DVector::from_column_slice(w);
    let residual = y - f * wv;
    let l1: f64 = w.iter().zip(prev).map(|(a, p)| (a - p).abs()).sum();
    residual.norm_squared() + gamma * l1
}
