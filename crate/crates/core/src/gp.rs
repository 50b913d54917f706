//! Exact Gaussian-process regression over 4-D velocity inputs.
//!
//! Outputs whose kernels differ only by signal variance (same lengthscales and
//! noise-to-signal ratio) share one Cholesky factor, one kernel vector and one
//! predictive-variance solve per query. The terrain ensemble stores the `2 M`
//! residual outputs of `M` terrains in a single model over shared inputs.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{nominal_velocities, NominalParams};
use crate::error::{invalid, Error, Result};
use crate::types::{GaussianCorrection, TerrainWeights};

pub const INPUT_DIM: usize = 4;

/// Squared-exponential ARD kernel hyperparameters for one output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub signal_var: f64,
    pub lengthscales: [f64; INPUT_DIM],
    pub noise_var: f64,
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(self.signal_var) || !ok(self.noise_var) || !self.lengthscales.iter().all(|&l| ok(l)) {
            return Err(invalid(format!("kernel parameters must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// `signal_var * exp(-0.5 * sum(((a - b) / l)^2))`.
pub fn kernel_eval(a: &[f64; INPUT_DIM], b: &[f64; INPUT_DIM], p: &KernelParams) -> f64 {
    let d2: f64 = (0..INPUT_DIM)
        .map(|d| {
            let z = (a[d] - b[d]) / p.lengthscales[d];
            z * z
        })
        .sum();
    p.signal_var * (-0.5 * d2).exp()
}

/// Posterior mean and variance of one output.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OutputPrediction {
    pub mean: f64,
    pub variance: f64,
}

/// Jitter ladder tried after a failed factorization.
const JITTERS: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Outputs sharing a unit-signal correlation matrix `R + ratio * I`.
#[derive(Debug, Clone)]
struct KernelGroup {
    inv_lengthscales: [f64; INPUT_DIM],
    jitter: f64,
    /// Training inputs scaled by the inverse lengthscales, one column per dimension.
    scaled: [Vec<f64>; INPUT_DIM],
    /// Row-major packed lower Cholesky factor of `R + (ratio + jitter) I`.
    chol: Vec<f64>,
    /// Dense row-major inverse of the factor (zero above the diagonal); only
    /// built for fitted models, where it turns the variance solve into a
    /// matrix product that vectorizes across queries.
    inv_chol: Vec<f64>,
}

/// Queries evaluated together by the blocked prediction kernel.
pub const LANES: usize = 8;
type Lanes = [f64; LANES];

/// `exp(x)` for `x <= 0`, written so that it vectorizes. Cody-Waite reduction
/// and a degree-12 Taylor polynomial; within 2 ulp of `f64::exp`.
#[inline(always)]
fn exp_nonpos(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let xc = x.max(-708.0);
    let t = xc * LOG2E + SHIFT;
    let k = t - SHIFT;
    let r = (xc - k * LN2_HI) - k * LN2_LO;
    let mut p: f64 = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p.mul_add(r, c);
    }
    let ki = t.to_bits().wrapping_sub(SHIFT.to_bits());
    let scale = f64::from_bits(ki.wrapping_add(1023) << 52);
    if x < -708.0 {
        0.0
    } else {
        p * scale
    }
}

#[inline]
fn row_start(i: usize) -> usize {
    i * (i + 1) / 2
}

impl KernelGroup {
    fn build(inputs: &[[f64; INPUT_DIM]], lengthscales: &[f64; INPUT_DIM], ratio: f64) -> Result<Self> {
        let inv_lengthscales = lengthscales.map(|l| 1.0 / l);
        let scaled: [Vec<f64>; INPUT_DIM] =
            std::array::from_fn(|d| inputs.iter().map(|x| x[d] * inv_lengthscales[d]).collect());
        let n = inputs.len();
        let mut corr = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            corr[(i, i)] = 1.0;
            for j in 0..i {
                let d2: f64 = (0..INPUT_DIM)
                    .map(|d| {
                        let z = scaled[d][i] - scaled[d][j];
                        z * z
                    })
                    .sum();
                let k = (-0.5 * d2).exp();
                corr[(i, j)] = k;
                corr[(j, i)] = k;
            }
        }
        let mut last_jitter = 0.0;
        for jitter in std::iter::once(0.0).chain(JITTERS) {
            last_jitter = jitter;
            let mut m = corr.clone();
            for i in 0..n {
                m[(i, i)] += ratio + jitter;
            }
            if let Some(chol) = factor_packed(m) {
                return Ok(Self {
                    inv_lengthscales,
                    jitter,
                    scaled,
                    chol,
                    inv_chol: Vec::new(),
                });
            }
        }
        Err(Error::Fit { max_jitter: last_jitter })
    }

    fn n(&self) -> usize {
        self.scaled[0].len()
    }

    fn build_inverse(&mut self) {
        let n = self.n();
        let mut inv = vec![0.0; n * n];
        for c in 0..n {
            inv[c * n + c] = 1.0 / self.chol[row_start(c) + c];
            for i in c + 1..n {
                let start = row_start(i);
                let mut acc = 0.0;
                for k in c..i {
                    acc += self.chol[start + k] * inv[k * n + c];
                }
                inv[i * n + c] = -acc / self.chol[start + i];
            }
        }
        self.inv_chol = inv;
    }

    /// Correlations of `LANES` queries with every training input, stored
    /// point-major: `out[i][b]` pairs point `i` with query `b`.
    #[inline]
    fn correlations_block(&self, zq: &[Lanes; INPUT_DIM], out: &mut [Lanes]) {
        let [s0, s1, s2, s3] = &self.scaled;
        for (i, o) in out.iter_mut().enumerate() {
            let (p0, p1, p2, p3) = (s0[i], s1[i], s2[i], s3[i]);
            for b in 0..LANES {
                let a = zq[0][b] - p0;
                let c = zq[1][b] - p1;
                let d = zq[2][b] - p2;
                let e = zq[3][b] - p3;
                o[b] = exp_nonpos(-0.5 * (a * a + c * c + d * d + e * e));
            }
        }
    }

    /// `||L^-1 r_b||^2` for each lane, with `corr` from [`Self::correlations_block`].
    #[inline]
    fn reductions_block(&self, corr: &[Lanes]) -> Lanes {
        const ROWS: usize = 4;
        let n = self.n();
        let mut q = [0.0; LANES];
        let mut i0 = 0;
        while i0 < n {
            let rows = ROWS.min(n - i0);
            let mut acc = [[0.0; LANES]; ROWS];
            let end = i0 + rows;
            if rows == ROWS {
                let w: [&[f64]; ROWS] = std::array::from_fn(|r| &self.inv_chol[(i0 + r) * n..(i0 + r) * n + end]);
                for j in 0..end {
                    let c = &corr[j];
                    for r in 0..ROWS {
                        let wr = w[r][j];
                        for b in 0..LANES {
                            acc[r][b] = wr.mul_add(c[b], acc[r][b]);
                        }
                    }
                }
            } else {
                for r in 0..rows {
                    let w = &self.inv_chol[(i0 + r) * n..(i0 + r) * n + end];
                    for (j, c) in corr[..end].iter().enumerate() {
                        for b in 0..LANES {
                            acc[r][b] = w[j].mul_add(c[b], acc[r][b]);
                        }
                    }
                }
            }
            for a in &acc[..rows] {
                for b in 0..LANES {
                    q[b] = a[b].mul_add(a[b], q[b]);
                }
            }
            i0 = end;
        }
        q
    }

    /// Solves `L x = b` in place.
    #[inline]
    fn forward_solve(&self, b: &mut [f64]) {
        for i in 0..b.len() {
            let start = row_start(i);
            let row = &self.chol[start..start + i];
            let dot: f64 = row.iter().zip(&b[..i]).map(|(l, x)| l * x).sum();
            b[i] = (b[i] - dot) / self.chol[start + i];
        }
    }

    fn backward_solve(&self, b: &mut [f64]) {
        let n = b.len();
        for i in (0..n).rev() {
            let mut acc = b[i];
            for k in i + 1..n {
                acc -= self.chol[row_start(k) + i] * b[k];
            }
            b[i] = acc / self.chol[row_start(i) + i];
        }
    }

    fn solve(&self, y: &[f64]) -> Vec<f64> {
        let mut x = y.to_vec();
        self.forward_solve(&mut x);
        self.backward_solve(&mut x);
        x
    }

    fn log_det(&self) -> f64 {
        (0..self.n()).map(|i| 2.0 * self.chol[row_start(i) + i].ln()).sum()
    }
}

/// Cholesky factorization returning the packed row-major lower factor, or
/// `None` when a pivot is not safely positive.
fn factor_packed(m: DMatrix<f64>) -> Option<Vec<f64>> {
    let n = m.nrows();
    let max_diag = (0..n).map(|i| m[(i, i)]).fold(0.0f64, f64::max);
    let floor = n as f64 * f64::EPSILON * max_diag;
    let l = m.cholesky()?.unpack();
    if (0..n).any(|i| !(l[(i, i)] * l[(i, i)] > floor)) {
        return None;
    }
    let mut packed = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..=i {
            packed.push(l[(i, j)]);
        }
    }
    Some(packed)
}

/// Reusable buffers for allocation-free prediction.
#[derive(Debug, Clone, Default)]
pub struct PredictScratch {
    corr: Vec<Lanes>,
}

/// A fitted multi-output exact GP over shared inputs.
#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Vec<[f64; INPUT_DIM]>,
    /// Training targets, one vector per output.
    targets: Vec<Vec<f64>>,
    kernels: Vec<KernelParams>,
    groups: Vec<KernelGroup>,
    output_group: Vec<usize>,
    /// `(K_j + noise_j I)^-1 y_j` per output.
    alphas: Vec<Vec<f64>>,
}

fn same_ratio(a: f64, b: f64) -> bool {
    (a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(b.abs())
}

impl GpModel {
    /// Fits the GP. `outputs[i]` holds every output's target for input row `i`.
    pub fn fit(
        inputs: &[[f64; INPUT_DIM]],
        outputs: &[Vec<f64>],
        kernels: &[KernelParams],
    ) -> Result<Self> {
        let n = inputs.len();
        if n == 0 {
            return Err(invalid("GP fit needs at least one input row"));
        }
        if outputs.len() != n {
            return Err(invalid(format!("{} input rows but {} output rows", n, outputs.len())));
        }
        if kernels.is_empty() {
            return Err(invalid("GP fit needs at least one output"));
        }
        for k in kernels {
            k.validate()?;
        }
        if inputs.iter().flatten().any(|x| !x.is_finite()) {
            return Err(invalid("GP inputs must be finite"));
        }
        for row in outputs {
            if row.len() != kernels.len() {
                return Err(invalid(format!(
                    "output row has {} columns, expected {}",
                    row.len(),
                    kernels.len()
                )));
            }
            if row.iter().any(|y| !y.is_finite()) {
                return Err(invalid("GP outputs must be finite"));
            }
        }

        let mut groups: Vec<KernelGroup> = Vec::new();
        let mut keys: Vec<([f64; INPUT_DIM], f64)> = Vec::new();
        let mut output_group = Vec::with_capacity(kernels.len());
        for k in kernels {
            let ratio = k.noise_var / k.signal_var;
            let found = keys
                .iter()
                .position(|(ls, r)| *ls == k.lengthscales && same_ratio(*r, ratio));
            let g = match found {
                Some(g) => g,
                None => {
                    groups.push(KernelGroup::build(inputs, &k.lengthscales, ratio)?);
                    keys.push((k.lengthscales, ratio));
                    groups.len() - 1
                }
            };
            output_group.push(g);
        }

        for g in &mut groups {
            g.build_inverse();
        }
        let targets: Vec<Vec<f64>> = (0..kernels.len())
            .map(|j| outputs.iter().map(|row| row[j]).collect())
            .collect();
        let alphas = targets
            .iter()
            .zip(kernels)
            .zip(&output_group)
            .map(|((y, k), &g)| {
                let mut a = groups[g].solve(y);
                a.iter_mut().for_each(|x| *x /= k.signal_var);
                a
            })
            .collect();

        Ok(Self {
            inputs: inputs.to_vec(),
            targets,
            kernels: kernels.to_vec(),
            groups,
            output_group,
            alphas,
        })
    }

    pub fn n_train(&self) -> usize {
        self.inputs.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.kernels.len()
    }

    pub fn kernels(&self) -> &[KernelParams] {
        &self.kernels
    }

    pub fn inputs(&self) -> &[[f64; INPUT_DIM]] {
        &self.inputs
    }

    pub fn alphas(&self) -> &[Vec<f64>] {
        &self.alphas
    }

    /// Number of distinct factorizations backing the outputs.
    pub fn n_kernel_groups(&self) -> usize {
        self.groups.len()
    }

    /// Jitter that had to be added to each group's diagonal (unit-signal scale).
    pub fn jitters(&self) -> Vec<f64> {
        self.groups.iter().map(|g| g.jitter).collect()
    }

    /// Dense lower Cholesky factor of `K_j + noise_j I` for output `j`.
    pub fn factor(&self, output: usize) -> DMatrix<f64> {
        let g = &self.groups[self.output_group[output]];
        let scale = self.kernels[output].signal_var.sqrt();
        let n = self.n_train();
        DMatrix::from_fn(n, n, |i, j| {
            if j <= i {
                scale * g.chol[row_start(i) + j]
            } else {
                0.0
            }
        })
    }

    pub fn predict(&self, query: &[f64; INPUT_DIM]) -> Vec<OutputPrediction> {
        let mut out = vec![OutputPrediction::default(); self.n_outputs()];
        self.predict_into(query, &mut PredictScratch::default(), &mut out);
        out
    }

    /// Allocation-free prediction into `out` (length `n_outputs`).
    pub fn predict_into(
        &self,
        query: &[f64; INPUT_DIM],
        scratch: &mut PredictScratch,
        out: &mut [OutputPrediction],
    ) {
        self.predict_impl(query, scratch, out, true);
    }

    /// Posterior means only; variances are left at zero.
    pub fn predict_mean_into(
        &self,
        query: &[f64; INPUT_DIM],
        scratch: &mut PredictScratch,
        out: &mut [OutputPrediction],
    ) {
        self.predict_impl(query, scratch, out, false);
    }

    fn predict_impl(
        &self,
        query: &[f64; INPUT_DIM],
        scratch: &mut PredictScratch,
        out: &mut [OutputPrediction],
        with_variance: bool,
    ) {
        debug_assert_eq!(out.len(), self.n_outputs());
        let mut block = vec![OutputPrediction::default(); LANES * self.n_outputs()];
        self.predict_block(std::slice::from_ref(query), scratch, &mut block, with_variance);
        out.copy_from_slice(&block[..self.n_outputs()]);
    }

    /// Scaled query coordinates for one group; unused lanes repeat the first query.
    fn lanes(group: &KernelGroup, queries: &[[f64; INPUT_DIM]]) -> [Lanes; INPUT_DIM] {
        std::array::from_fn(|d| {
            std::array::from_fn(|b| queries[b.min(queries.len() - 1)][d] * group.inv_lengthscales[d])
        })
    }

    /// Predicts up to [`LANES`] queries at once. `out[b * n_outputs + j]` holds
    /// output `j` of query `b`.
    pub fn predict_block(
        &self,
        queries: &[[f64; INPUT_DIM]],
        scratch: &mut PredictScratch,
        out: &mut [OutputPrediction],
        with_variance: bool,
    ) {
        assert!(!queries.is_empty() && queries.len() <= LANES);
        let m = self.n_outputs();
        scratch.corr.resize(self.n_train(), [0.0; LANES]);
        for (g, group) in self.groups.iter().enumerate() {
            group.correlations_block(&Self::lanes(group, queries), &mut scratch.corr);
            let q = if with_variance {
                group.reductions_block(&scratch.corr)
            } else {
                [1.0; LANES]
            };
            for j in (0..m).filter(|&j| self.output_group[j] == g) {
                let s = self.kernels[j].signal_var;
                let mut dot = [0.0; LANES];
                for (c, a) in scratch.corr.iter().zip(&self.alphas[j]) {
                    for b in 0..LANES {
                        dot[b] += c[b] * a;
                    }
                }
                for b in 0..queries.len() {
                    out[b * m + j] = OutputPrediction {
                        mean: s * dot[b],
                        variance: if with_variance {
                            (s * (1.0 - q[b])).max(0.0)
                        } else {
                            0.0
                        },
                    };
                }
            }
        }
    }

    /// Batched prediction, evaluated in parallel over rows.
    pub fn predict_batch(&self, queries: &[[f64; INPUT_DIM]]) -> Vec<Vec<OutputPrediction>> {
        queries
            .par_iter()
            .map_init(PredictScratch::default, |scratch, q| {
                let mut out = vec![OutputPrediction::default(); self.n_outputs()];
                self.predict_into(q, scratch, &mut out);
                out
            })
            .collect()
    }

    /// Log marginal likelihood summed over outputs.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.n_train() as f64;
        self.targets
            .iter()
            .enumerate()
            .map(|(j, y)| {
                let g = &self.groups[self.output_group[j]];
                let s = self.kernels[j].signal_var;
                let fit: f64 = y.iter().zip(&self.alphas[j]).map(|(a, b)| a * b).sum();
                -0.5 * fit - 0.5 * (g.log_det() + n * s.ln()) - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
            })
            .sum()
    }

    const MAGIC: &'static [u8; 8] = b"CCMPPIGP";
    const VERSION: u32 = 1;

    /// Writes inputs, targets and kernel parameters; [`GpModel::read_from`]
    /// refits from them, which reproduces the model bit for bit.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(self.n_train() as u64).to_le_bytes())?;
        w.write_all(&(self.n_outputs() as u64).to_le_bytes())?;
        let mut put = |x: f64| w.write_all(&x.to_le_bytes());
        for row in &self.inputs {
            for &x in row {
                put(x)?;
            }
        }
        for i in 0..self.n_train() {
            for t in &self.targets {
                put(t[i])?;
            }
        }
        for k in &self.kernels {
            put(k.signal_var)?;
            for &l in &k.lengthscales {
                put(l)?;
            }
            put(k.noise_var)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != Self::VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let n = next_u64(&mut r)? as usize;
        let n_out = next_u64(&mut r)? as usize;
        if n == 0 || n_out == 0 || n > 1 << 24 || n_out > 1 << 16 {
            return Err(Error::ModelFormat(format!("implausible sizes n={n}, outputs={n_out}")));
        }
        let f = |r: &mut R| -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let mut inputs = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row = [0.0; INPUT_DIM];
            for x in &mut row {
                *x = f(&mut r)?;
            }
            inputs.push(row);
        }
        let mut outputs = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row = Vec::with_capacity(n_out);
            for _ in 0..n_out {
                row.push(f(&mut r)?);
            }
            outputs.push(row);
        }
        let mut kernels = Vec::with_capacity(n_out);
        for _ in 0..n_out {
            let signal_var = f(&mut r)?;
            let mut lengthscales = [0.0; INPUT_DIM];
            for l in &mut lengthscales {
                *l = f(&mut r)?;
            }
            let noise_var = f(&mut r)?;
            kernels.push(KernelParams {
                signal_var,
                lengthscales,
                noise_var,
            });
        }
        Self::fit(&inputs, &outputs, &kernels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

/// Log-spaced hyperparameter grid. Every output shares the lengthscales and
/// the noise-to-signal ratio; each output's signal variance is set to its
/// closed-form maximum-likelihood value for the candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperGrid {
    /// Range of multipliers applied to each input dimension's standard deviation.
    pub lengthscale_scale: (f64, f64),
    pub lengthscale_steps: usize,
    pub noise_ratio: (f64, f64),
    pub noise_steps: usize,
    /// Re-search once on a finer grid around the best coarse point.
    pub refine: bool,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            lengthscale_scale: (0.25, 8.0),
            lengthscale_steps: 7,
            noise_ratio: (1e-4, 1.0),
            noise_steps: 5,
            refine: true,
        }
    }
}

fn log_space(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    if steps <= 1 {
        return vec![(lo * hi).sqrt()];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..steps)
        .map(|i| (a + (b - a) * i as f64 / (steps - 1) as f64).exp())
        .collect()
}

/// Result of the marginal-likelihood grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperSelection {
    pub kernels: Vec<KernelParams>,
    pub log_marginal_likelihood: f64,
}

/// Selects shared SE-ARD hyperparameters by maximizing the summed log marginal likelihood.
pub fn select_hyperparameters(
    inputs: &[[f64; INPUT_DIM]],
    outputs: &[Vec<f64>],
    grid: &HyperGrid,
) -> Result<HyperSelection> {
    let n = inputs.len();
    if n == 0 || outputs.len() != n {
        return Err(invalid("hyperparameter search needs matching, non-empty data"));
    }
    if !(grid.lengthscale_scale.0 > 0.0
        && grid.lengthscale_scale.0 <= grid.lengthscale_scale.1
        && grid.noise_ratio.0 > 0.0
        && grid.noise_ratio.0 <= grid.noise_ratio.1
        && grid.lengthscale_steps > 0
        && grid.noise_steps > 0)
    {
        return Err(invalid(format!("invalid hyperparameter grid: {grid:?}")));
    }
    let n_out = outputs[0].len();
    let base: [f64; INPUT_DIM] = std::array::from_fn(|d| {
        let mean = inputs.iter().map(|x| x[d]).sum::<f64>() / n as f64;
        let var = inputs.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > 1e-9 {
            sd
        } else {
            1.0
        }
    });
    let columns: Vec<Vec<f64>> = (0..n_out).map(|j| outputs.iter().map(|r| r[j]).collect()).collect();

    let evaluate = |scale: f64, ratio: f64| -> Option<(f64, Vec<KernelParams>)> {
        let lengthscales = base.map(|b| b * scale);
        let group = KernelGroup::build(inputs, &lengthscales, ratio).ok()?;
        let log_det = group.log_det();
        let mut total = 0.0;
        let mut kernels = Vec::with_capacity(n_out);
        for y in &columns {
            let beta = group.solve(y);
            let quad: f64 = y.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let signal_var = (quad / n as f64).max(1e-12);
            total += -0.5 * n as f64 * (1.0 + (2.0 * std::f64::consts::PI * signal_var).ln())
                - 0.5 * log_det;
            kernels.push(KernelParams {
                signal_var,
                lengthscales,
                noise_var: ratio * signal_var,
            });
        }
        Some((total, kernels))
    };

    let search = |scales: &[f64], ratios: &[f64]| {
        let candidates: Vec<(f64, f64)> = scales
            .iter()
            .flat_map(|&s| ratios.iter().map(move |&r| (s, r)))
            .collect();
        let scored: Vec<Option<(f64, Vec<KernelParams>, f64, f64)>> = candidates
            .par_iter()
            .map(|&(s, r)| evaluate(s, r).map(|(lml, k)| (lml, k, s, r)))
            .collect();
        // First strictly-better candidate wins, so ties resolve in grid order.
        scored.into_iter().flatten().fold(None, |best: Option<(f64, Vec<KernelParams>, f64, f64)>, c| {
            match &best {
                Some(b) if b.0 >= c.0 => best,
                _ => Some(c),
            }
        })
    };

    let scales = log_space(grid.lengthscale_scale.0, grid.lengthscale_scale.1, grid.lengthscale_steps);
    let ratios = log_space(grid.noise_ratio.0, grid.noise_ratio.1, grid.noise_steps);
    let Some(mut best) = search(&scales, &ratios) else {
        return Err(Error::Fit { max_jitter: JITTERS[JITTERS.len() - 1] });
    };
    if grid.refine {
        let step = |v: &[f64]| if v.len() > 1 { (v[1] / v[0]).ln() } else { 0.0 };
        let (ds, dr) = (step(&scales), step(&ratios));
        let around = |c: f64, d: f64| -> Vec<f64> {
            (-2..=2).map(|k| c * (0.25 * d * k as f64).exp()).collect()
        };
        if let Some(fine) = search(&around(best.2, ds), &around(best.3, dr)) {
            if fine.0 > best.0 {
                best = fine;
            }
        }
    }
    Ok(HyperSelection {
        kernels: best.1,
        log_marginal_likelihood: best.0,
    })
}

/// Weighted ensemble of per-terrain posteriors: mean `sum w_i m_i`, covariance `sum w_i^2 C_i`.
pub fn ensemble_combine(
    per_terrain: &[(Vector2<f64>, Matrix2<f64>)],
    weights: &[f64],
) -> Result<GaussianCorrection> {
    if per_terrain.is_empty() {
        return Err(invalid("ensemble needs at least one terrain"));
    }
    if weights.len() != per_terrain.len() {
        return Err(invalid(format!(
            "{} weights for {} terrains",
            weights.len(),
            per_terrain.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(-1e-6..=1.0 + 1e-6).contains(w)) || (sum - 1.0).abs() > 1e-6 {
        return Err(invalid(format!("weights {weights:?} are off the simplex")));
    }
    let mut out = GaussianCorrection::zero();
    for ((m, c), &w) in per_terrain.iter().zip(weights) {
        out.mean += m * w;
        out.cov += c * (w * w);
    }
    Ok(out)
}

/// Per-terrain residual GPs stored as one shared-input model with outputs
/// `(dv_0, domega_0, dv_1, domega_1, ...)`.
#[derive(Debug, Clone)]
pub struct TerrainGpEnsemble {
    model: GpModel,
    terrains: usize,
}

/// Scratch for [`TerrainGpEnsemble`] queries.
#[derive(Debug, Clone, Default)]
pub struct EnsembleScratch {
    gp: PredictScratch,
    outputs: Vec<OutputPrediction>,
}

/// A [`TerrainGpEnsemble`] with its weights folded into one mean weight
/// vector per velocity component. Built once per control tick.
#[derive(Debug, Clone)]
pub struct WeightedEnsemble<'a> {
    model: &'a GpModel,
    /// Per kernel group and component: `sum_i w_i s_j alpha_j`.
    alphas: Vec<[Vec<f64>; 2]>,
    /// Per kernel group and component: `sum_i w_i^2 s_j`.
    var_coef: Vec<[f64; 2]>,
}

impl WeightedEnsemble<'_> {
    /// Corrections for up to [`LANES`] queries, written to `out[..queries.len()]`.
    pub fn correction_block(
        &self,
        queries: &[[f64; INPUT_DIM]],
        with_variance: bool,
        scratch: &mut PredictScratch,
        out: &mut [GaussianCorrection],
    ) {
        assert!(!queries.is_empty() && queries.len() <= LANES);
        let m = self.model;
        scratch.corr.resize(m.n_train(), [0.0; LANES]);
        let mut mean = [[0.0; LANES]; 2];
        let mut var = [[0.0; LANES]; 2];
        for (g, group) in m.groups.iter().enumerate() {
            group.correlations_block(&GpModel::lanes(group, queries), &mut scratch.corr);
            for c in 0..2 {
                for (r, a) in scratch.corr.iter().zip(&self.alphas[g][c]) {
                    for b in 0..LANES {
                        mean[c][b] = r[b].mul_add(*a, mean[c][b]);
                    }
                }
            }
            if with_variance {
                let q = group.reductions_block(&scratch.corr);
                for c in 0..2 {
                    for b in 0..LANES {
                        var[c][b] += self.var_coef[g][c] * (1.0 - q[b]).max(0.0);
                    }
                }
            }
        }
        for (b, o) in out[..queries.len()].iter_mut().enumerate() {
            *o = GaussianCorrection {
                mean: Vector2::new(mean[0][b], mean[1][b]),
                cov: Matrix2::new(var[0][b], 0.0, 0.0, var[1][b]),
            };
        }
    }
}

impl TerrainGpEnsemble {
    pub fn new(model: GpModel) -> Result<Self> {
        if model.n_outputs() == 0 || model.n_outputs() % 2 != 0 {
            return Err(invalid(format!(
                "terrain ensemble needs 2 outputs per terrain, got {}",
                model.n_outputs()
            )));
        }
        let terrains = model.n_outputs() / 2;
        Ok(Self { model, terrains })
    }

    /// Trains the ensemble from a shared-input dataset with grid-searched hyperparameters.
    pub fn train(inputs: &[[f64; INPUT_DIM]], outputs: &[Vec<f64>], grid: &HyperGrid) -> Result<Self> {
        let sel = select_hyperparameters(inputs, outputs, grid)?;
        Self::new(GpModel::fit(inputs, outputs, &sel.kernels)?)
    }

    pub fn terrain_count(&self) -> usize {
        self.terrains
    }

    pub fn model(&self) -> &GpModel {
        &self.model
    }

    /// Per-terrain residual mean and diagonal covariance.
    pub fn per_terrain(&self, query: &[f64; INPUT_DIM]) -> Vec<(Vector2<f64>, Matrix2<f64>)> {
        let preds = self.model.predict(query);
        preds
            .chunks_exact(2)
            .map(|p| {
                (
                    Vector2::new(p[0].mean, p[1].mean),
                    Matrix2::new(p[0].variance, 0.0, 0.0, p[1].variance),
                )
            })
            .collect()
    }

    /// Collapses the terrain mixture for fixed `weights`.
    pub fn weighted(&self, weights: &TerrainWeights) -> WeightedEnsemble<'_> {
        debug_assert_eq!(weights.len(), self.terrains);
        let m = &self.model;
        let n = m.n_train();
        let mut alphas = vec![[vec![0.0; n], vec![0.0; n]]; m.groups.len()];
        let mut var_coef = vec![[0.0; 2]; m.groups.len()];
        for (t, &w) in weights.as_slice().iter().enumerate() {
            for c in 0..2 {
                let j = 2 * t + c;
                let g = m.output_group[j];
                let s = m.kernels[j].signal_var;
                for (acc, a) in alphas[g][c].iter_mut().zip(&m.alphas[j]) {
                    *acc += w * s * a;
                }
                var_coef[g][c] += w * w * s;
            }
        }
        WeightedEnsemble {
            model: m,
            alphas,
            var_coef,
        }
    }

    /// Weighted correction for a single query.
    pub fn correction(
        &self,
        query: &[f64; INPUT_DIM],
        weights: &TerrainWeights,
        with_variance: bool,
        scratch: &mut EnsembleScratch,
    ) -> GaussianCorrection {
        let mut out = [GaussianCorrection::zero()];
        self.weighted(weights)
            .correction_block(std::slice::from_ref(query), with_variance, &mut scratch.gp, &mut out);
        out[0]
    }

    /// Absolute next-step velocities predicted by each terrain: nominal plus GP mean residual.
    pub fn per_terrain_mean_prediction(
        &self,
        nominal: &NominalParams,
        query: &[f64; INPUT_DIM],
        scratch: &mut EnsembleScratch,
    ) -> Vec<Vector2<f64>> {
        scratch.outputs.resize(self.model.n_outputs(), OutputPrediction::default());
        self.model.predict_mean_into(query, &mut scratch.gp, &mut scratch.outputs);
        let base = nominal_velocities(query, nominal);
        scratch
            .outputs
            .chunks_exact(2)
            .map(|p| base + Vector2::new(p[0].mean, p[1].mean))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(GpModel::load(path)?)
    }
}
