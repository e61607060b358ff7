//! Moment-matching calibration of the SDE parameters.
//!
//! The objective is evaluated under common random numbers: every evaluation
//! reuses the same master seed, so the map from parameters to residuals is
//! deterministic and finite differences see only the parameter change.
//! Minimization is a projected Levenberg-Marquardt method inside box bounds,
//! with parameters sitting on an active bound frozen for the step.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::coord_count;
use crate::moments::{estimate_moments, penalized_residuals, MomentSet, ObjectiveConfig};
use crate::rng::{substream, Domain};
use crate::sde::{simulate, Family, ModelParams, ParamRow, SimulationGrid, DEFAULT_STEPS_PER_YEAR};

pub const DEFAULT_MAX_ITER: usize = 200;
pub const DEFAULT_STEP_TOL: f64 = 1e-8;
pub const DEFAULT_OBJECTIVE_TOL: f64 = 1e-10;
pub const DEFAULT_FD_STEP: f64 = 1e-4;
pub const DEFAULT_STARTS: usize = 3;

/// Rejected trial steps allowed in one iteration before giving up.
const MAX_REJECTIONS: usize = 30;

/// A step covers at most this fraction of the distance to a bound, so the
/// iterates approach the boundary geometrically. Within one difference step
/// of the bound they may land on it.
const BOUNDARY_FRACTION: f64 = 0.5;

/// Elementwise box `lower <= p <= upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn uniform(len: usize, lower: f64, upper: f64) -> Self {
        Self {
            lower: vec![lower; len],
            upper: vec![upper; len],
        }
    }

    /// `[0, 1]` for CIR and `[0, 2]` for gEM on every parameter.
    pub fn default_for(family: Family, dim: usize) -> Self {
        Self::uniform(3 * coord_count(dim), 0.0, family.default_upper_bound())
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn project(&self, p: &mut [f64]) {
        for ((x, l), u) in p.iter_mut().zip(&self.lower).zip(&self.upper) {
            *x = x.clamp(*l, *u);
        }
    }

    fn validate(&self, len: usize) -> Result<()> {
        if self.lower.len() != len || self.upper.len() != len {
            return Err(Error::Shape(format!("bounds must have {len} entries")));
        }
        if self
            .lower
            .iter()
            .zip(&self.upper)
            .any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u))
        {
            return Err(Error::InvalidArgument("bounds must be finite with lower <= upper".into()));
        }
        Ok(())
    }
}

/// Everything that defines one calibration run.
#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    pub family: Family,
    pub dim: usize,
    pub objective: ObjectiveConfig,
    pub model_paths: usize,
    pub steps_per_year: u32,
    pub seed: u64,
    pub bounds: Option<Bounds>,
    /// First starting point; the bounds midpoint when absent.
    pub init: Option<Vec<f64>>,
    /// Total number of starts, extra ones drawn uniformly in the box.
    pub starts: usize,
    pub max_iter: usize,
    pub step_tol: f64,
    pub objective_tol: f64,
    /// Relative forward-difference step.
    pub fd_step: f64,
}

impl CalibrationConfig {
    pub fn new(family: Family, dim: usize) -> Self {
        Self {
            family,
            dim,
            objective: ObjectiveConfig::default(),
            model_paths: 1000,
            steps_per_year: DEFAULT_STEPS_PER_YEAR,
            seed: 0,
            bounds: None,
            init: None,
            starts: DEFAULT_STARTS,
            max_iter: DEFAULT_MAX_ITER,
            step_tol: DEFAULT_STEP_TOL,
            objective_tol: DEFAULT_OBJECTIVE_TOL,
            fd_step: DEFAULT_FD_STEP,
        }
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
            .clone()
            .unwrap_or_else(|| Bounds::default_for(self.family, self.dim))
    }
}

/// Why the optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    StepTolerance,
    ObjectiveTolerance,
    /// Projected gradient vanished, including an exact zero objective.
    Stationary,
    /// No decrease found even with heavy damping.
    NoProgress,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub params: ModelParams,
    pub objective: f64,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: Status,
    pub wall_time: Duration,
    pub seed: u64,
    pub model_paths: usize,
    pub target_samples: usize,
    pub steps_per_year: u32,
    /// Objective at the start that produced the result.
    pub initial_objective: f64,
}

#[derive(Serialize)]
struct ResultFile {
    family: Family,
    dim: usize,
    parameters: Vec<ParamRow>,
    objective: f64,
    initial_objective: f64,
    residuals: Vec<f64>,
    iterations: usize,
    evaluations: usize,
    status: Status,
    seed: u64,
    model_paths: usize,
    target_samples: usize,
    steps_per_year: u32,
}

#[derive(Deserialize)]
struct ParamsFile {
    family: Family,
    dim: usize,
    parameters: Vec<ParamRow>,
}

impl CalibrationResult {
    /// JSON without the wall time, so equal inputs give equal bytes.
    pub fn to_json(&self) -> Result<String> {
        let file = ResultFile {
            family: self.params.family(),
            dim: self.params.dim(),
            parameters: self.params.table(),
            objective: self.objective,
            initial_objective: self.initial_objective,
            residuals: self.residuals.clone(),
            iterations: self.iterations,
            evaluations: self.evaluations,
            status: self.status,
            seed: self.seed,
            model_paths: self.model_paths,
            target_samples: self.target_samples,
            steps_per_year: self.steps_per_year,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parameters stored by [`to_json`](Self::to_json). Only `family`, `dim`
    /// and `parameters` are read, so hand-written parameter files work too.
    pub fn params_from_json(text: &str) -> Result<ModelParams> {
        let file: ParamsFile = serde_json::from_str(text)?;
        ModelParams::from_table(file.family, file.dim, &file.parameters)
    }
}

/// The residual map of one calibration problem under common random numbers.
pub struct MomentProblem<'a> {
    family: Family,
    dim: usize,
    target: &'a MomentSet,
    config: &'a ObjectiveConfig,
    grid: SimulationGrid,
}

impl<'a> MomentProblem<'a> {
    pub fn new(
        family: Family,
        dim: usize,
        target: &'a MomentSet,
        config: &'a ObjectiveConfig,
        paths: usize,
        steps_per_year: u32,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if target.dim() != dim {
            return Err(Error::Shape(format!(
                "target moments are {0}x{0}, model is {dim}x{dim}",
                target.dim()
            )));
        }
        for &t in &config.times {
            if target.time_index(t).is_none() {
                return Err(Error::Shape(format!("target has no moments at time {t}")));
            }
        }
        let grid = SimulationGrid::new(steps_per_year, &config.times, paths, seed)?;
        Ok(Self {
            family,
            dim,
            target,
            config,
            grid,
        })
    }

    pub fn param_len(&self) -> usize {
        3 * coord_count(self.dim)
    }

    pub fn grid(&self) -> &SimulationGrid {
        &self.grid
    }

    pub fn residuals(&self, p: &[f64]) -> Result<Vec<f64>> {
        let params = ModelParams::from_vector(self.family, self.dim, p)?;
        let ens = simulate(&params, &self.grid)?;
        let model = estimate_moments(&ens.matrices, &self.config.times, self.config.order)?;
        penalized_residuals(&model, self.target, &ens.matrices, self.config)
    }

    pub fn objective(&self, p: &[f64]) -> Result<f64> {
        Ok(sum_sq(&self.residuals(p)?))
    }
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

/// Per-parameter step `h_i = rel · max(|p_i|, 1)`, taken backwards when the
/// forward point would leave the box.
pub fn fd_steps(p: &[f64], bounds: &Bounds, rel: f64) -> Vec<f64> {
    p.iter()
        .enumerate()
        .map(|(i, &x)| {
            let h = rel * x.abs().max(1.0);
            if x + h > bounds.upper[i] {
                -h
            } else {
                h
            }
        })
        .collect()
}

/// Forward-difference Jacobian `J[(r, i)] = ∂f_r/∂p_i` given `f0 = f(p)`.
pub fn finite_diff_jacobian<F>(f: &F, p: &[f64], f0: &[f64], steps: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let cols = (0..p.len())
        .into_par_iter()
        .map(|i| {
            let mut q = p.to_vec();
            q[i] += steps[i];
            let h = q[i] - p[i];
            let fi = f(&q)?;
            if fi.len() != f0.len() {
                return Err(Error::Shape("residual length changed between evaluations".into()));
            }
            Ok(fi.iter().zip(f0).map(|(a, b)| (a - b) / h).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut j = DMatrix::zeros(f0.len(), p.len());
    for (i, c) in cols.iter().enumerate() {
        j.column_mut(i).copy_from_slice(c);
    }
    Ok(j)
}

/// Central-difference Jacobian, used to check the forward scheme.
pub fn central_diff_jacobian<F>(f: &F, p: &[f64], steps: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let cols = (0..p.len())
        .into_par_iter()
        .map(|i| {
            let h = steps[i].abs();
            let mut plus = p.to_vec();
            let mut minus = p.to_vec();
            plus[i] += h;
            minus[i] -= h;
            let (a, b) = (f(&plus)?, f(&minus)?);
            Ok(a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * h)).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut j = DMatrix::zeros(cols.first().map_or(0, Vec::len), p.len());
    for (i, c) in cols.iter().enumerate() {
        j.column_mut(i).copy_from_slice(c);
    }
    Ok(j)
}

/// Settings of the bounded Levenberg-Marquardt minimizer.
#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iter: usize,
    pub step_tol: f64,
    pub objective_tol: f64,
    pub fd_step: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: DEFAULT_MAX_ITER,
            step_tol: DEFAULT_STEP_TOL,
            objective_tol: DEFAULT_OBJECTIVE_TOL,
            fd_step: DEFAULT_FD_STEP,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub params: Vec<f64>,
    pub residuals: Vec<f64>,
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: Status,
}

/// Minimizes `‖f(p)‖²` over the box. Accepted steps never increase the
/// objective and iterates never leave the box.
pub fn levenberg_marquardt<F>(f: &F, start: &[f64], bounds: &Bounds, options: &LmOptions) -> Result<LmOutcome>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let n = start.len();
    bounds.validate(n)?;
    let mut p = start.to_vec();
    bounds.project(&mut p);
    let mut r = f(&p)?;
    let mut value = sum_sq(&r);
    let mut evaluations = 1;
    if !value.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let initial = value;
    let mut mu: Option<f64> = None;
    let mut nu = 2.0;
    let mut iterations = 0;
    let mut status = Status::MaxIterations;

    while iterations < options.max_iter {
        if value == 0.0 {
            status = Status::Stationary;
            break;
        }
        iterations += 1;
        let steps = fd_steps(&p, bounds, options.fd_step);
        let jac = finite_diff_jacobian(f, &p, &r, &steps)?;
        evaluations += n;
        let rv = DVector::from_column_slice(&r);
        let g = jac.tr_mul(&rv);

        // Active set: at a bound with the gradient pushing outward.
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let at_lo = p[i] <= bounds.lower[i] && g[i] > 0.0;
                let at_hi = p[i] >= bounds.upper[i] && g[i] < 0.0;
                !(at_lo || at_hi)
            })
            .collect();
        if free.is_empty() || free.iter().all(|&i| g[i] == 0.0) {
            status = Status::Stationary;
            break;
        }
        let jf = jac.select_columns(&free);
        let a = jf.tr_mul(&jf);
        let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
        let max_diag = a.diagonal().max();
        let floor = (max_diag * 1e-12).max(f64::MIN_POSITIVE);
        let scale = DVector::from_iterator(free.len(), a.diagonal().iter().map(|d| d.max(floor)));
        let mu_now = mu.get_or_insert(1e-3);

        let mut accepted = None;
        for _ in 0..MAX_REJECTIONS {
            let mut damped = a.clone();
            for k in 0..free.len() {
                damped[(k, k)] += *mu_now * scale[k];
            }
            let Some(chol) = damped.cholesky() else {
                *mu_now *= nu;
                nu *= 2.0;
                continue;
            };
            let delta = chol.solve(&(-&gf));
            let mut trial = p.clone();
            for (k, &i) in free.iter().enumerate() {
                let (to_lo, to_hi) = (bounds.lower[i] - p[i], bounds.upper[i] - p[i]);
                let near = steps[i].abs();
                // Close to a bound the full step may land on it.
                let d = if delta[k] <= to_lo && -to_lo <= near {
                    to_lo
                } else if delta[k] >= to_hi && to_hi <= near {
                    to_hi
                } else {
                    delta[k].max(BOUNDARY_FRACTION * to_lo).min(BOUNDARY_FRACTION * to_hi)
                };
                trial[i] += d;
            }
            bounds.project(&mut trial);
            let step: Vec<f64> = trial.iter().zip(&p).map(|(a, b)| a - b).collect();
            let model = (&jac * DVector::from_column_slice(&step) + &rv).norm_squared();
            let predicted = value - model;
            let r_new = f(&trial)?;
            evaluations += 1;
            let v_new = sum_sq(&r_new);
            if v_new.is_finite() && v_new < value {
                let rho = if predicted > 0.0 { (value - v_new) / predicted } else { 1.0 };
                *mu_now *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                nu = 2.0;
                accepted = Some((trial, r_new, v_new, step));
                break;
            }
            *mu_now *= nu;
            nu *= 2.0;
        }

        let Some((trial, r_new, v_new, step)) = accepted else {
            status = Status::NoProgress;
            break;
        };
        let step_norm = step.iter().map(|s| s * s).sum::<f64>().sqrt();
        let p_norm = p.iter().map(|s| s * s).sum::<f64>().sqrt();
        let decrease = value - v_new;
        p = trial;
        r = r_new;
        value = v_new;
        if step_norm <= options.step_tol * (p_norm + options.step_tol) {
            status = Status::StepTolerance;
            break;
        }
        if decrease <= options.objective_tol * (value + decrease) {
            status = Status::ObjectiveTolerance;
            break;
        }
    }

    Ok(LmOutcome {
        params: p,
        residuals: r,
        objective: value,
        initial_objective: initial,
        iterations,
        evaluations,
        status,
    })
}

/// Starting points: the given one (or the midpoint), then uniform draws.
pub fn starting_points(bounds: &Bounds, init: Option<&[f64]>, starts: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut out = vec![init.map_or_else(|| bounds.midpoint(), <[f64]>::to_vec)];
    for s in 1..starts.max(1) {
        let mut rng = substream(seed, Domain::MultiStart, s as u64);
        out.push(
            bounds
                .lower
                .iter()
                .zip(&bounds.upper)
                .map(|(l, u)| l + (u - l) * rng.random::<f64>())
                .collect(),
        );
    }
    out
}

/// Fits model parameters to the target moments.
pub fn calibrate(target: &MomentSet, config: &CalibrationConfig) -> Result<CalibrationResult> {
    let clock = Instant::now();
    let problem = MomentProblem::new(
        config.family,
        config.dim,
        target,
        &config.objective,
        config.model_paths,
        config.steps_per_year,
        config.seed,
    )?;
    let bounds = config.bounds();
    bounds.validate(problem.param_len())?;
    if let Some(init) = &config.init {
        if init.len() != problem.param_len() {
            return Err(Error::Shape(format!(
                "initial guess has {} entries, expected {}",
                init.len(),
                problem.param_len()
            )));
        }
    }
    let options = LmOptions {
        max_iter: config.max_iter,
        step_tol: config.step_tol,
        objective_tol: config.objective_tol,
        fd_step: config.fd_step,
    };
    let f = |p: &[f64]| problem.residuals(p);
    let starts = starting_points(&bounds, config.init.as_deref(), config.starts, config.seed);
    let mut best: Option<LmOutcome> = None;
    let mut evaluations = 0;
    for start in &starts {
        let out = levenberg_marquardt(&f, start, &bounds, &options)?;
        evaluations += out.evaluations;
        if best.as_ref().is_none_or(|b| out.objective < b.objective) {
            best = Some(out);
        }
    }
    let best = best.expect("at least one start");
    Ok(CalibrationResult {
        params: ModelParams::from_vector(config.family, config.dim, &best.params)?,
        objective: best.objective,
        residuals: best.residuals,
        iterations: best.iterations,
        evaluations,
        status: best.status,
        wall_time: clock.elapsed(),
        seed: config.seed,
        model_paths: config.model_paths,
        target_samples: target.samples,
        steps_per_year: config.steps_per_year,
        initial_objective: best.initial_objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(p: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![p[0] - 0.3, 2.0 * (p[1] - 0.7), p[0] * p[1] - 0.21])
    }

    #[test]
    fn solves_interior_least_squares() {
        let b = Bounds::uniform(2, 0.0, 1.0);
        let out = levenberg_marquardt(&quadratic, &[0.9, 0.1], &b, &LmOptions::default()).unwrap();
        assert!(out.objective < 1e-14, "{out:?}");
        assert!((out.params[0] - 0.3).abs() < 1e-6);
        assert!((out.params[1] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn respects_active_bound() {
        let f = |p: &[f64]| -> Result<Vec<f64>> { Ok(vec![p[0] + 1.0, p[1] - 0.5]) };
        let b = Bounds::uniform(2, 0.0, 1.0);
        let out = levenberg_marquardt(&f, &[0.5, 0.5], &b, &LmOptions::default()).unwrap();
        assert_eq!(out.params[0], 0.0);
        assert!((out.params[1] - 0.5).abs() < 1e-8);
        assert!((out.objective - 1.0).abs() < 1e-12);
    }

    #[test]
    fn objective_never_increases() {
        let f = |p: &[f64]| -> Result<Vec<f64>> {
            Ok(vec![10.0 * (p[1] - p[0] * p[0]), 1.0 - p[0]])
        };
        let b = Bounds::uniform(2, -2.0, 2.0);
        let mut last = f64::INFINITY;
        for iters in 1..20 {
            let o = LmOptions { max_iter: iters, ..Default::default() };
            let out = levenberg_marquardt(&f, &[-1.2, 1.0], &b, &o).unwrap();
            assert!(out.objective <= out.initial_objective);
            assert!(out.objective <= last + 1e-15);
            last = out.objective;
        }
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let f = |_: &[f64]| -> Result<Vec<f64>> { Ok(vec![f64::NAN]) };
        let b = Bounds::uniform(1, 0.0, 1.0);
        assert!(matches!(
            levenberg_marquardt(&f, &[0.5], &b, &LmOptions::default()),
            Err(Error::NonFiniteObjective)
        ));
    }

    #[test]
    fn forward_step_flips_at_upper_bound() {
        let b = Bounds::uniform(2, 0.0, 1.0);
        let h = fd_steps(&[1.0, 0.2], &b, 1e-4);
        assert_eq!(h, vec![-1e-4, 1e-4]);
    }

    #[test]
    fn starts_are_deterministic_and_inside() {
        let b = Bounds::uniform(5, 0.0, 2.0);
        let a = starting_points(&b, None, 3, 9);
        assert_eq!(a, starting_points(&b, None, 3, 9));
        assert_eq!(a[0], vec![1.0; 5]);
        assert!(a.iter().flatten().all(|x| (0.0..=2.0).contains(x)));
    }
}
