//! Simulation of rating-matrix processes driven by decoupled coordinate SDEs.
//!
//! Two families are supported:
//!
//! * [`Family::Cir`]: every coordinate follows
//!   `dL = a (b - L) dt + σ √L dW`, discretized with the full-truncation Euler
//!   scheme, and the matrix is `R_t = exp(L_t)` (direct exponential mapping).
//! * [`Family::Gem`]: `dL = |Y|^a dt`, `dY = b dt + σ dW`, `Y_0 = 0`; the matrix
//!   is advanced by the geometric Euler-Maruyama step `R ← R · exp(ΔL)`.
//!
//! Each coordinate of each trajectory draws its Brownian increments from a
//! dedicated counter-based substream, so ensembles are bit-identical for a
//! given seed regardless of the thread count.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{coord_count, BasisIndex, ExpWorkspace, Matrix, TransitionMatrix};
use crate::rating_data::{MatrixSeries, RatingScale};
use crate::rng::{substream, Domain};
use crate::small;

/// Default number of Euler steps per year.
pub const DEFAULT_STEPS_PER_YEAR: u32 = 360;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Cir,
    Gem,
}

impl Family {
    /// Upper parameter bound used by default during calibration.
    pub fn default_upper_bound(self) -> f64 {
        match self {
            Family::Cir => 1.0,
            Family::Gem => 2.0,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Cir => "cir",
            Family::Gem => "gem",
        })
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cir" => Ok(Family::Cir),
            "gem" => Ok(Family::Gem),
            other => Err(Error::InvalidArgument(format!("unknown model family `{other}`"))),
        }
    }
}

/// Parameters of one coordinate SDE.
///
/// For CIR: `a` is the mean-reversion speed, `b` the mean-reversion level and
/// `sigma` the volatility. For gEM: `a` is the power, `b` the drift of the
/// driving process and `sigma` its volatility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordParams {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
}

/// A point of the non-negative parameter orthant, one triple per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    family: Family,
    dim: usize,
    coords: Vec<CoordParams>,
}

impl ModelParams {
    pub fn new(family: Family, dim: usize, coords: Vec<CoordParams>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidScale(format!("dimension {dim} < 2")));
        }
        if coords.len() != coord_count(dim) {
            return Err(Error::Shape(format!(
                "expected {} parameter triples, got {}",
                coord_count(dim),
                coords.len()
            )));
        }
        for (i, c) in coords.iter().enumerate() {
            for v in [c.a, c.b, c.sigma] {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "parameter {v} of coordinate {i} is not a finite non-negative number"
                    )));
                }
            }
        }
        Ok(Self { family, dim, coords })
    }

    /// Same triple for every coordinate.
    pub fn uniform(family: Family, dim: usize, triple: CoordParams) -> Result<Self> {
        Self::new(family, dim, vec![triple; coord_count(dim)])
    }

    /// Builds parameters from the stacked vector `[a_1..a_n, b_1..b_n, σ_1..σ_n]`.
    pub fn from_vector(family: Family, dim: usize, p: &[f64]) -> Result<Self> {
        let n = coord_count(dim);
        if p.len() != 3 * n {
            return Err(Error::Shape(format!("expected {} parameters, got {}", 3 * n, p.len())));
        }
        let coords = (0..n)
            .map(|i| CoordParams {
                a: p[i],
                b: p[n + i],
                sigma: p[2 * n + i],
            })
            .collect();
        Self::new(family, dim, coords)
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.coords.iter().map(|c| c.a).collect();
        v.extend(self.coords.iter().map(|c| c.b));
        v.extend(self.coords.iter().map(|c| c.sigma));
        v
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[CoordParams] {
        &self.coords
    }

    /// Rows of the "From-To, a, b, σ" parameter table.
    pub fn table(&self) -> Vec<ParamRow> {
        BasisIndex::all(self.dim)
            .zip(&self.coords)
            .map(|(idx, c)| ParamRow {
                from_to: idx.label(),
                a: c.a,
                b: c.b,
                sigma: c.sigma,
            })
            .collect()
    }

    pub fn from_table(family: Family, dim: usize, rows: &[ParamRow]) -> Result<Self> {
        let mut coords = vec![None; coord_count(dim)];
        for row in rows {
            let (from, to) = row
                .from_to
                .split_once('-')
                .and_then(|(f, t)| Some((f.trim().parse::<usize>().ok()?, t.trim().parse::<usize>().ok()?)))
                .ok_or_else(|| Error::InvalidArgument(format!("bad From-To label `{}`", row.from_to)))?;
            if from == 0 || to == 0 {
                return Err(Error::IndexOutOfRange(row.from_to.clone()));
            }
            let idx = BasisIndex::new(dim, from - 1, to - 1)?;
            coords[idx.flat] = Some(CoordParams {
                a: row.a,
                b: row.b,
                sigma: row.sigma,
            });
        }
        let coords = coords
            .into_iter()
            .enumerate()
            .map(|(i, c)| c.ok_or_else(|| Error::Shape(format!("missing parameters for coordinate {i}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(family, dim, coords)
    }

    /// Aligned text table in the "From-To a b σ" layout.
    pub fn format_table(&self) -> String {
        let mut s = format!("{:<8}{:>12}{:>12}{:>12}\n", "From-To", "a", "b", "sigma");
        for row in self.table() {
            s.push_str(&format!(
                "{:<8}{:>12.2e}{:>12.2e}{:>12.2e}\n",
                row.from_to, row.a, row.b, row.sigma
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    #[serde(rename = "From-To")]
    pub from_to: String,
    pub a: f64,
    pub b: f64,
    #[serde(rename = "sigma")]
    pub sigma: f64,
}

/// Time discretization, observation times and ensemble size.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationGrid {
    steps_per_year: u32,
    total_steps: usize,
    obs_steps: Vec<usize>,
    paths: usize,
    seed: u64,
}

impl SimulationGrid {
    /// Observation times snap to the nearest grid point; the horizon is the
    /// last observation time.
    pub fn new(steps_per_year: u32, observation_times: &[f64], paths: usize, seed: u64) -> Result<Self> {
        if steps_per_year == 0 {
            return Err(Error::InvalidArgument("steps per year must be positive".into()));
        }
        if paths == 0 {
            return Err(Error::InvalidArgument("need at least one trajectory".into()));
        }
        if observation_times.is_empty() {
            return Err(Error::InvalidArgument("no observation times".into()));
        }
        let mut obs_steps = Vec::with_capacity(observation_times.len());
        for &t in observation_times {
            if !t.is_finite() || t <= 0.0 {
                return Err(Error::InvalidArgument(format!("observation time {t} must be positive")));
            }
            let step = (t * steps_per_year as f64).round() as usize;
            if step == 0 || obs_steps.last().is_some_and(|&last| step <= last) {
                return Err(Error::InvalidArgument(format!(
                    "observation time {t} does not map to a distinct later grid point"
                )));
            }
            obs_steps.push(step);
        }
        Ok(Self {
            steps_per_year,
            total_steps: *obs_steps.last().expect("non-empty"),
            obs_steps,
            paths,
            seed,
        })
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps_per_year as f64
    }

    pub fn steps_per_year(&self) -> u32 {
        self.steps_per_year
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn obs_steps(&self) -> &[usize] {
        &self.obs_steps
    }

    /// Snapped observation times in years.
    pub fn obs_times(&self) -> Vec<f64> {
        self.obs_steps.iter().map(|&s| self.step_time(s)).collect()
    }

    pub fn step_time(&self, step: usize) -> f64 {
        step as f64 / self.steps_per_year as f64
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_paths(&self, paths: usize) -> Self {
        Self { paths, ..self.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Optional dense recording of trajectories for plotting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceOptions {
    /// Record every `every` steps, starting with step 0.
    pub every: usize,
    /// Number of leading trajectories to record.
    pub paths: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub steps: Vec<usize>,
    /// `matrices[w][i]` is trajectory `w` at `steps[i]`.
    pub matrices: Vec<Vec<TransitionMatrix>>,
    /// Coordinates `L^i` at the same points.
    pub coords: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub family: Family,
    pub grid: SimulationGrid,
    /// `matrices[w][k]` is trajectory `w` at observation `k`.
    pub matrices: Vec<Vec<TransitionMatrix>>,
    pub trace: Option<Trace>,
}

impl PathEnsemble {
    pub fn dim(&self) -> usize {
        self.matrices[0][0].dim()
    }

    pub fn obs_times(&self) -> Vec<f64> {
        self.grid.obs_times()
    }

    pub fn to_series(&self, scale: &RatingScale) -> Result<MatrixSeries> {
        if scale.dim() != self.dim() {
            return Err(Error::Shape("scale does not match ensemble dimension".into()));
        }
        MatrixSeries::new(scale.clone(), self.obs_times(), self.matrices.clone())
    }
}

/// Coordinate values `L^i` at the observation times, `values[w][k][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordSamples {
    pub obs_times: Vec<f64>,
    pub values: Vec<Vec<Vec<f64>>>,
}

fn coord_rngs(seed: u64, traj: usize, n: usize) -> Vec<ChaCha8Rng> {
    (0..n)
        .map(|c| substream(seed, Domain::Brownian, (traj * n + c) as u64))
        .collect()
}

/// Full-truncation Euler stepper for the CIR coordinates of one trajectory.
struct CirPath<'a> {
    params: &'a [CoordParams],
    rngs: Vec<ChaCha8Rng>,
    /// Unclamped scheme state; the process value is its positive part.
    state: Vec<f64>,
    dt: f64,
    sqrt_dt: f64,
}

impl<'a> CirPath<'a> {
    fn new(params: &'a ModelParams, grid: &SimulationGrid, traj: usize) -> Self {
        let n = params.coords.len();
        Self {
            params: &params.coords,
            rngs: coord_rngs(grid.seed, traj, n),
            state: vec![0.0; n],
            dt: grid.dt(),
            sqrt_dt: grid.dt().sqrt(),
        }
    }

    fn step(&mut self) {
        for ((x, p), rng) in self.state.iter_mut().zip(self.params).zip(&mut self.rngs) {
            let z: f64 = rng.sample(StandardNormal);
            let pos = x.max(0.0);
            *x += p.a * (p.b - pos) * self.dt + p.sigma * pos.sqrt() * self.sqrt_dt * z;
        }
    }

    fn values_into(&self, out: &mut [f64]) {
        for (o, x) in out.iter_mut().zip(&self.state) {
            *o = x.max(0.0);
        }
    }

    fn values(&self) -> Vec<f64> {
        self.state.iter().map(|x| x.max(0.0)).collect()
    }
}

/// Driving processes and accumulated coordinates of one gEM trajectory.
struct GemDriver<'a> {
    params: &'a [CoordParams],
    rngs: Vec<ChaCha8Rng>,
    driver: Vec<f64>,
    level: Vec<f64>,
    increment: Vec<f64>,
    dt: f64,
    sqrt_dt: f64,
}

impl<'a> GemDriver<'a> {
    fn new(params: &'a ModelParams, grid: &SimulationGrid, traj: usize) -> Self {
        assert_eq!(params.family, Family::Gem, "gEM stepper needs gEM parameters");
        let n = params.coords.len();
        Self {
            params: &params.coords,
            rngs: coord_rngs(grid.seed, traj, n),
            driver: vec![0.0; n],
            level: vec![0.0; n],
            increment: vec![0.0; n],
            dt: grid.dt(),
            sqrt_dt: grid.dt().sqrt(),
        }
    }

    /// Fills `increment` with `|Y^i|^{a_i} Δt` at the left end of the step and
    /// moves the drivers. Returns whether any increment is non-zero.
    fn advance(&mut self) -> bool {
        let mut nonzero = false;
        for i in 0..self.params.len() {
            let p = self.params[i];
            let inc = power_convention(self.driver[i].abs(), p.a) * self.dt;
            self.increment[i] = inc;
            self.level[i] += inc;
            nonzero |= inc != 0.0;
            let z: f64 = self.rngs[i].sample(StandardNormal);
            self.driver[i] += p.b * self.dt + p.sigma * self.sqrt_dt * z;
        }
        nonzero
    }
}

/// Geometric Euler-Maruyama stepper for one trajectory.
///
/// Each call to [`GemPath::step`] produces the factor `exp(ΔL)` with
/// `ΔL^i = |Y^i|^{a_i} Δt` evaluated at the left end of the step.
pub struct GemPath<'a> {
    inner: GemDriver<'a>,
    ws: ExpWorkspace,
}

impl<'a> GemPath<'a> {
    pub fn new(params: &'a ModelParams, grid: &SimulationGrid, traj: usize) -> Self {
        Self {
            inner: GemDriver::new(params, grid, traj),
            ws: ExpWorkspace::new(params.dim),
        }
    }

    /// Advances one step, writing `exp(ΔL)` into `factor`. Returns `false` when
    /// the increment is zero, in which case `factor` is left untouched.
    pub fn step(&mut self, factor: &mut Matrix) -> bool {
        let nonzero = self.inner.advance();
        if nonzero {
            self.ws.exp_coords_into(&self.inner.increment, factor);
        }
        nonzero
    }

    /// Accumulated coordinates `L^i`.
    pub fn level(&self) -> &[f64] {
        &self.inner.level
    }
}

/// `x^a` for `x >= 0` with the convention `0^0 = 1`.
pub fn power_convention(x: f64, a: f64) -> f64 {
    if a == 0.0 {
        1.0
    } else if x == 0.0 {
        0.0
    } else {
        x.powf(a)
    }
}

fn check_family(params: &ModelParams, family: Family) -> Result<()> {
    if params.family != family {
        return Err(Error::InvalidArgument(format!(
            "expected {family} parameters, got {}",
            params.family
        )));
    }
    Ok(())
}

/// CIR coordinate values at the observation times for every trajectory.
pub fn simulate_cir_coords(params: &ModelParams, grid: &SimulationGrid) -> Result<CoordSamples> {
    check_family(params, Family::Cir)?;
    let values = (0..grid.paths)
        .into_par_iter()
        .map(|w| {
            let mut path = CirPath::new(params, grid, w);
            let mut out = Vec::with_capacity(grid.obs_steps.len());
            let mut next = 0;
            for step in 1..=grid.total_steps {
                path.step();
                if grid.obs_steps[next] == step {
                    out.push(path.values());
                    next += 1;
                }
            }
            out
        })
        .collect();
    Ok(CoordSamples {
        obs_times: grid.obs_times(),
        values,
    })
}

/// Direct exponential model `R_t = exp(L_t)` with CIR coordinates.
pub fn simulate_direct(params: &ModelParams, grid: &SimulationGrid) -> Result<PathEnsemble> {
    simulate_direct_traced(params, grid, None)
}

pub fn simulate_direct_traced(
    params: &ModelParams,
    grid: &SimulationGrid,
    trace: Option<TraceOptions>,
) -> Result<PathEnsemble> {
    check_family(params, Family::Cir)?;
    let dim = params.dim;
    let results: Vec<_> = (0..grid.paths)
        .into_par_iter()
        .map(|w| {
            let mut path = CirPath::new(params, grid, w);
            let mut ws = ExpWorkspace::new(dim);
            let mut coords = vec![0.0; params.coords.len()];
            let tracing = trace.filter(|t| w < t.paths && t.every > 0);
            let mut traced = TraceBuffer::default();
            let mut out = Vec::with_capacity(grid.obs_steps.len());
            let mut next = 0;
            if tracing.is_some() {
                traced.push(0, TransitionMatrix::identity(dim), coords.clone());
            }
            for step in 1..=grid.total_steps {
                path.step();
                let observed = grid.obs_steps[next] == step;
                let recorded = tracing.is_some_and(|t| step % t.every == 0);
                if observed || recorded {
                    path.values_into(&mut coords);
                    let mut m = Matrix::zeros(dim, dim);
                    ws.exp_coords_into(&coords, &mut m);
                    let m = TransitionMatrix::from_trusted(m);
                    if recorded {
                        traced.push(step, m.clone(), coords.clone());
                    }
                    if observed {
                        out.push(m);
                        next += 1;
                    }
                }
            }
            (out, tracing.map(|_| traced))
        })
        .collect();
    Ok(assemble(Family::Cir, grid, results))
}

/// Geometric Euler-Maruyama model with monotone coordinates.
pub fn simulate_gem(params: &ModelParams, grid: &SimulationGrid) -> Result<PathEnsemble> {
    simulate_gem_traced(params, grid, None)
}

pub fn simulate_gem_traced(
    params: &ModelParams,
    grid: &SimulationGrid,
    trace: Option<TraceOptions>,
) -> Result<PathEnsemble> {
    check_family(params, Family::Gem)?;
    let results: Vec<_> = (0..grid.paths)
        .into_par_iter()
        .map(|w| {
            let tracing = trace.filter(|t| w < t.paths && t.every > 0);
            match params.dim {
                2 => gem_path_fixed::<2>(params, grid, w, tracing),
                3 => gem_path_fixed::<3>(params, grid, w, tracing),
                4 => gem_path_fixed::<4>(params, grid, w, tracing),
                5 => gem_path_fixed::<5>(params, grid, w, tracing),
                6 => gem_path_fixed::<6>(params, grid, w, tracing),
                7 => gem_path_fixed::<7>(params, grid, w, tracing),
                8 => gem_path_fixed::<8>(params, grid, w, tracing),
                _ => gem_path_dynamic(params, grid, w, tracing),
            }
        })
        .collect();
    Ok(assemble(Family::Gem, grid, results))
}

type PathOutput = (Vec<TransitionMatrix>, Option<TraceBuffer>);

fn gem_path_dynamic(params: &ModelParams, grid: &SimulationGrid, w: usize, tracing: Option<TraceOptions>) -> PathOutput {
    let dim = params.dim;
    let mut path = GemPath::new(params, grid, w);
    let mut r = Matrix::identity(dim, dim);
    let mut factor = Matrix::zeros(dim, dim);
    let mut tmp = Matrix::zeros(dim, dim);
    let mut traced = TraceBuffer::default();
    let mut out = Vec::with_capacity(grid.obs_steps.len());
    let mut next = 0;
    if tracing.is_some() {
        traced.push(0, TransitionMatrix::identity(dim), path.level().to_vec());
    }
    for step in 1..=grid.total_steps {
        if path.step(&mut factor) {
            tmp.gemm(1.0, &r, &factor, 0.0);
            std::mem::swap(&mut r, &mut tmp);
        }
        if tracing.is_some_and(|t| step % t.every == 0) {
            traced.push(step, TransitionMatrix::from_trusted(r.clone()), path.level().to_vec());
        }
        if grid.obs_steps[next] == step {
            out.push(TransitionMatrix::from_trusted(r.clone()));
            next += 1;
        }
    }
    (out, tracing.map(|_| traced))
}

/// Same scheme as [`gem_path_dynamic`] on stack matrices of size `N`.
fn gem_path_fixed<const N: usize>(
    params: &ModelParams,
    grid: &SimulationGrid,
    w: usize,
    tracing: Option<TraceOptions>,
) -> PathOutput {
    let mut driver = GemDriver::new(params, grid, w);
    let mut r = small::identity::<N>();
    let mut factor = [[0.0; N]; N];
    let mut traced = TraceBuffer::default();
    let mut out = Vec::with_capacity(grid.obs_steps.len());
    let mut next = 0;
    if tracing.is_some() {
        traced.push(0, TransitionMatrix::identity(N), driver.level.clone());
    }
    for step in 1..=grid.total_steps {
        if driver.advance() {
            small::exp_coords::<N>(&driver.increment, &mut factor);
            let prev = r;
            small::mul_into(1.0, &prev, &factor, &mut r);
        }
        if tracing.is_some_and(|t| step % t.every == 0) {
            traced.push(step, TransitionMatrix::from_trusted(small::to_matrix(&r)), driver.level.clone());
        }
        if grid.obs_steps[next] == step {
            out.push(TransitionMatrix::from_trusted(small::to_matrix(&r)));
            next += 1;
        }
    }
    (out, tracing.map(|_| traced))
}

/// Dispatches on the parameter family.
pub fn simulate(params: &ModelParams, grid: &SimulationGrid) -> Result<PathEnsemble> {
    simulate_traced(params, grid, None)
}

pub fn simulate_traced(
    params: &ModelParams,
    grid: &SimulationGrid,
    trace: Option<TraceOptions>,
) -> Result<PathEnsemble> {
    match params.family {
        Family::Cir => simulate_direct_traced(params, grid, trace),
        Family::Gem => simulate_gem_traced(params, grid, trace),
    }
}

/// Per-step factors `exp(ΔL)` of one gEM trajectory over the whole grid.
pub fn gem_step_factors(params: &ModelParams, grid: &SimulationGrid, traj: usize) -> Result<Vec<TransitionMatrix>> {
    check_family(params, Family::Gem)?;
    let dim = params.dim;
    let mut path = GemPath::new(params, grid, traj);
    let mut factors = Vec::with_capacity(grid.total_steps);
    let mut factor = Matrix::zeros(dim, dim);
    for _ in 0..grid.total_steps {
        if path.step(&mut factor) {
            factors.push(TransitionMatrix::from_trusted(factor.clone()));
        } else {
            factors.push(TransitionMatrix::identity(dim));
        }
    }
    Ok(factors)
}

#[derive(Default)]
struct TraceBuffer {
    steps: Vec<usize>,
    matrices: Vec<TransitionMatrix>,
    coords: Vec<Vec<f64>>,
}

impl TraceBuffer {
    fn push(&mut self, step: usize, m: TransitionMatrix, coords: Vec<f64>) {
        self.steps.push(step);
        self.matrices.push(m);
        self.coords.push(coords);
    }
}

fn assemble(
    family: Family,
    grid: &SimulationGrid,
    results: Vec<(Vec<TransitionMatrix>, Option<TraceBuffer>)>,
) -> PathEnsemble {
    let mut matrices = Vec::with_capacity(results.len());
    let mut trace: Option<Trace> = None;
    for (obs, tb) in results {
        matrices.push(obs);
        if let Some(tb) = tb {
            let t = trace.get_or_insert_with(|| Trace {
                steps: tb.steps.clone(),
                matrices: Vec::new(),
                coords: Vec::new(),
            });
            t.matrices.push(tb.matrices);
            t.coords.push(tb.coords);
        }
    }
    PathEnsemble {
        family,
        grid: grid.clone(),
        matrices,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cir(a: f64, b: f64, sigma: f64) -> ModelParams {
        ModelParams::uniform(Family::Cir, 2, CoordParams { a, b, sigma }).unwrap()
    }

    fn gem(a: f64, b: f64, sigma: f64) -> ModelParams {
        ModelParams::uniform(Family::Gem, 2, CoordParams { a, b, sigma }).unwrap()
    }

    #[test]
    fn parameter_vector_layout() {
        let p: Vec<f64> = (0..12).map(f64::from).collect();
        let m = ModelParams::from_vector(Family::Cir, 3, &p).unwrap();
        assert_eq!(m.coords()[1], CoordParams { a: 1.0, b: 5.0, sigma: 9.0 });
        assert_eq!(m.to_vector(), p);
        assert!(ModelParams::from_vector(Family::Cir, 3, &p[..11]).is_err());
        let mut neg = p.clone();
        neg[3] = -1.0;
        assert!(ModelParams::from_vector(Family::Cir, 3, &neg).is_err());
    }

    #[test]
    fn table_round_trip() {
        let p: Vec<f64> = (0..27).map(|i| i as f64 / 10.0).collect();
        let m = ModelParams::from_vector(Family::Gem, 4, &p).unwrap();
        let rows = m.table();
        assert_eq!(rows[3].from_to, "2-1");
        assert_eq!(ModelParams::from_table(Family::Gem, 4, &rows).unwrap(), m);
    }

    #[test]
    fn grid_snaps_observation_times() {
        let g = SimulationGrid::new(360, &[1.0 / 12.0, 0.25, 0.5, 1.0], 5, 1).unwrap();
        assert_eq!(g.obs_steps(), &[30, 90, 180, 360]);
        assert_eq!(g.total_steps(), 360);
        assert!(SimulationGrid::new(360, &[0.5, 0.5], 5, 1).is_err());
        assert!(SimulationGrid::new(360, &[0.0], 5, 1).is_err());
        assert!(SimulationGrid::new(360, &[1.0], 0, 1).is_err());
    }

    #[test]
    fn null_cir_dynamics_stay_at_zero() {
        let grid = SimulationGrid::new(360, &[0.5, 1.0], 3, 9).unwrap();
        let s = simulate_cir_coords(&cir(0.0, 0.0, 0.0), &grid).unwrap();
        assert!(s.values.iter().flatten().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_cir_follows_ode() {
        let (a, b) = (0.8, 0.3);
        let grid = SimulationGrid::new(360, &[0.25, 1.0], 1, 0).unwrap();
        let s = simulate_cir_coords(&cir(a, b, 0.0), &grid).unwrap();
        for (k, t) in [0.25, 1.0].iter().enumerate() {
            let exact = b * (1.0 - (-a * t).exp());
            // Euler error is O(dt)
            assert!((s.values[0][k][0] - exact).abs() < 2.0 * a * b / 360.0);
        }
    }

    #[test]
    fn cir_paths_are_non_negative() {
        let grid = SimulationGrid::new(52, &[0.5, 1.0, 2.0], 200, 3).unwrap();
        let s = simulate_cir_coords(&cir(0.5, 0.05, 1.5), &grid).unwrap();
        assert!(s.values.iter().flatten().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn direct_model_is_stochastic_and_starts_at_identity() {
        let grid = SimulationGrid::new(360, &[0.25, 1.0], 20, 5).unwrap();
        let p = ModelParams::uniform(Family::Cir, 4, CoordParams { a: 0.5, b: 0.1, sigma: 0.3 }).unwrap();
        let e = simulate_direct_traced(&p, &grid, Some(TraceOptions { every: 30, paths: 2 })).unwrap();
        let trace = e.trace.as_ref().unwrap();
        assert_eq!(trace.matrices.len(), 2);
        assert_eq!(trace.steps[0], 0);
        assert_eq!(trace.matrices[0][0], TransitionMatrix::identity(4));
        for m in e.matrices.iter().flatten() {
            assert!(TransitionMatrix::new(m.matrix().clone()).is_ok());
            assert!((0..4).all(|i| m[(i, i)] > 0.0));
        }
    }

    #[test]
    fn gem_power_convention() {
        assert_eq!(power_convention(0.0, 0.0), 1.0);
        assert_eq!(power_convention(0.0, 1.5), 0.0);
        assert_eq!(power_convention(4.0, 0.5), 2.0);
        // a = 0 with b = σ = 0 grows L at unit rate
        let grid = SimulationGrid::new(100, &[1.0], 1, 0).unwrap();
        let p = gem(0.0, 0.0, 0.0);
        let mut path = GemPath::new(&p, &grid, 0);
        let mut f = Matrix::zeros(2, 2);
        for _ in 0..100 {
            path.step(&mut f);
        }
        assert!((path.level()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn null_gem_dynamics_are_identity() {
        let grid = SimulationGrid::new(360, &[0.5, 1.0], 4, 2).unwrap();
        let p = ModelParams::uniform(Family::Gem, 4, CoordParams { a: 1.0, b: 0.0, sigma: 0.0 }).unwrap();
        let e = simulate_gem(&p, &grid).unwrap();
        assert!(e.matrices.iter().flatten().all(|m| *m == TransitionMatrix::identity(4)));
    }

    #[test]
    fn deterministic_gem_level_integral() {
        let (a, b) = (1.5, 0.4);
        let grid = SimulationGrid::new(360, &[1.0], 1, 0).unwrap();
        let p = gem(a, b, 0.0);
        let mut path = GemPath::new(&p, &grid, 0);
        let mut f = Matrix::zeros(2, 2);
        for _ in 0..360 {
            path.step(&mut f);
        }
        let exact = b.powf(a) / (a + 1.0);
        assert!((path.level()[0] - exact).abs() < 2.0 * b.powf(a) / 360.0);
    }

    #[test]
    fn family_mismatch_is_rejected() {
        let grid = SimulationGrid::new(12, &[1.0], 1, 0).unwrap();
        assert!(simulate_gem(&cir(0.1, 0.1, 0.1), &grid).is_err());
        assert!(simulate_direct(&gem(0.1, 0.1, 0.1), &grid).is_err());
    }

    #[test]
    fn fixed_and_dynamic_gem_paths_agree() {
        for dim in [2, 4, 9] {
            let n = coord_count(dim);
            let p: Vec<f64> = (0..3 * n).map(|i| 0.2 + 0.1 * (i % 7) as f64).collect();
            let params = ModelParams::from_vector(Family::Gem, dim, &p).unwrap();
            let grid = SimulationGrid::new(360, &[0.5, 1.0], 3, 5).unwrap();
            let fast = simulate_gem(&params, &grid).unwrap();
            for w in 0..3 {
                let (slow, _) = gem_path_dynamic(&params, &grid, w, None);
                for (a, b) in fast.matrices[w].iter().zip(&slow) {
                    let diff = (a.matrix() - b.matrix()).abs().max();
                    assert!(diff < 1e-12, "dim {dim}: {diff}");
                }
            }
        }
    }
}
