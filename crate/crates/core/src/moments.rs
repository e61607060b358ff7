//! Entrywise moment estimators of matrix ensembles and the weighted
//! moment-matching objective.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{Matrix, TransitionMatrix};

/// Two times closer than this are considered equal.
pub const TIME_TOL: f64 = 1e-9;

/// Entrywise moment matrices per observation time.
///
/// `moments[t][0]` is the mean, `moments[t][1]` the unbiased variance
/// (divisor `M - 1`) and `moments[t][k-1]` for `k >= 3` the `k`-th central
/// moment with divisor `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    pub times: Vec<f64>,
    pub order: usize,
    pub samples: usize,
    pub moments: Vec<Vec<Matrix>>,
}

#[derive(Serialize, Deserialize)]
struct MomentFile {
    times: Vec<f64>,
    order: usize,
    samples: usize,
    /// `moments[t][k]` as row lists.
    moments: Vec<Vec<Vec<Vec<f64>>>>,
}

impl MomentSet {
    pub fn dim(&self) -> usize {
        self.moments[0][0].nrows()
    }

    pub fn mean(&self, time: usize) -> &Matrix {
        &self.moments[time][0]
    }

    pub fn get(&self, time: usize, order: usize) -> &Matrix {
        &self.moments[time][order - 1]
    }

    /// Index of `t` among the stored times.
    pub fn time_index(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|s| (s - t).abs() <= TIME_TOL)
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        let file = MomentFile {
            times: self.times.clone(),
            order: self.order,
            samples: self.samples,
            moments: self
                .moments
                .iter()
                .map(|per_time| {
                    per_time
                        .iter()
                        .map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect())
                        .collect()
                })
                .collect(),
        };
        serde_json::to_writer(out, &file)?;
        Ok(())
    }

    pub fn read_json<R: Read>(source: R) -> Result<Self> {
        let file: MomentFile = serde_json::from_reader(source)?;
        if file.order == 0 || file.times.is_empty() || file.moments.len() != file.times.len() {
            return Err(Error::Shape("moment file times/order do not match its data".into()));
        }
        let mut moments = Vec::with_capacity(file.moments.len());
        let mut dim = None;
        for per_time in file.moments {
            if per_time.len() != file.order {
                return Err(Error::Shape("moment file order does not match its data".into()));
            }
            let mut mats = Vec::with_capacity(per_time.len());
            for rows in per_time {
                let k = rows.len();
                if k < 2 || rows.iter().any(|r| r.len() != k) || dim.is_some_and(|d| d != k) {
                    return Err(Error::Shape("moment matrices must be square and equally sized".into()));
                }
                dim = Some(k);
                mats.push(Matrix::from_fn(k, k, |i, j| rows[i][j]));
            }
            moments.push(mats);
        }
        Ok(Self {
            times: file.times,
            order: file.order,
            samples: file.samples,
            moments,
        })
    }
}

/// Moments up to `order` of `samples[w][t]` at every time index.
pub fn estimate_moments(samples: &[Vec<TransitionMatrix>], times: &[f64], order: usize) -> Result<MomentSet> {
    let m = samples.len();
    if order == 0 {
        return Err(Error::InvalidArgument("moment order must be at least 1".into()));
    }
    if m == 0 || (order >= 2 && m < 2) {
        return Err(Error::TooFewSamples(m));
    }
    if samples.iter().any(|s| s.len() != times.len()) {
        return Err(Error::Shape("every sample needs one matrix per time".into()));
    }
    let k = samples[0][0].dim();
    let mut moments = Vec::with_capacity(times.len());
    for t in 0..times.len() {
        let mut mean = Matrix::zeros(k, k);
        for s in samples {
            if s[t].dim() != k {
                return Err(Error::Shape("matrices of different dimensions".into()));
            }
            mean += s[t].matrix();
        }
        mean /= m as f64;
        let mut central = vec![Matrix::zeros(k, k); order.saturating_sub(1)];
        for s in samples {
            let x = s[t].matrix();
            for (idx, (&v, &mu)) in x.iter().zip(mean.iter()).enumerate() {
                let d = v - mu;
                let mut p = d;
                for c in central.iter_mut() {
                    p *= d;
                    c.as_mut_slice()[idx] += p;
                }
            }
        }
        let mut per_time = Vec::with_capacity(order);
        per_time.push(mean);
        for (i, mut c) in central.into_iter().enumerate() {
            let divisor = if i == 0 { (m - 1) as f64 } else { m as f64 };
            c /= divisor;
            per_time.push(c);
        }
        moments.push(per_time);
    }
    Ok(MomentSet {
        times: times.to_vec(),
        order,
        samples: m,
        moments,
    })
}

/// Weights, observation times and the optional penalty of the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub order: usize,
    pub weights: Vec<f64>,
    pub times: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Reference matrices at `times`, needed when `lambda2 > 0`.
    pub reference: Option<Vec<TransitionMatrix>>,
}

impl Default for ObjectiveConfig {
    /// Four moments at one year with the variance weighted by ten.
    fn default() -> Self {
        Self {
            order: 4,
            weights: vec![1.0, 10.0, 1.0, 1.0],
            times: vec![1.0],
            lambda1: 1.0,
            lambda2: 0.0,
            reference: None,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::InvalidArgument("moment order must be at least 1".into()));
        }
        if self.weights.len() != self.order {
            return Err(Error::InvalidArgument(format!(
                "{} weights given for {} moments",
                self.weights.len(),
                self.order
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) || self.weights.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidArgument(
                "weights must be non-negative with at least one positive".into(),
            ));
        }
        if self.times.is_empty() {
            return Err(Error::InvalidArgument("no objective times".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidArgument("penalty weights must be non-negative".into()));
        }
        if self.lambda2 > 0.0 {
            match &self.reference {
                None => return Err(Error::MissingReference),
                Some(r) if r.len() != self.times.len() => {
                    return Err(Error::Shape("reference series needs one matrix per time".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Number of moment residuals for dimension `dim`.
    pub fn residual_len(&self, dim: usize) -> usize {
        self.times.len() * self.order * (dim - 1) * dim
    }
}

/// Residual vector `f^n` and its squared norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub vector: Vec<f64>,
    pub value: f64,
}

/// Stacked `w_k · vec(μ_k^model(t) - μ_k^target(t))`, orders inner and
/// times outer; `vec` is column-major over the first `K - 1` rows.
pub fn objective(model: &MomentSet, target: &MomentSet, config: &ObjectiveConfig) -> Result<Residual> {
    config.validate()?;
    let vector = moment_residuals(model, target, config)?;
    let value = vector.iter().map(|r| r * r).sum();
    Ok(Residual { vector, value })
}

fn moment_residuals(model: &MomentSet, target: &MomentSet, config: &ObjectiveConfig) -> Result<Vec<f64>> {
    let k = model.dim();
    if target.dim() != k {
        return Err(Error::Shape(format!(
            "model is {k}x{k} but target is {0}x{0}",
            target.dim()
        )));
    }
    if model.order < config.order || target.order < config.order {
        return Err(Error::Shape(format!(
            "objective needs {} moments, model has {} and target {}",
            config.order, model.order, target.order
        )));
    }
    let mut out = Vec::with_capacity(config.residual_len(k));
    for &t in &config.times {
        let (mi, ti) = match (model.time_index(t), target.time_index(t)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Shape(format!("time {t} missing from model or target moments"))),
        };
        for (order, &w) in (1..=config.order).zip(&config.weights) {
            let a = model.get(mi, order);
            let b = target.get(ti, order);
            for j in 0..k {
                for i in 0..k - 1 {
                    out.push(w * (a[(i, j)] - b[(i, j)]));
                }
            }
        }
    }
    Ok(out)
}

/// Residuals whose squared norm is the penalized objective
/// `λ1 ‖f^n‖² + λ2 (1/M) Σ_w Σ_t ‖R_w(t) - R^H(t)‖_F²`.
///
/// `paths[w][t]` must be the model matrices at `config.times`.
pub fn penalized_residuals(
    model: &MomentSet,
    target: &MomentSet,
    paths: &[Vec<TransitionMatrix>],
    config: &ObjectiveConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    let scale1 = config.lambda1.sqrt();
    let mut out: Vec<f64> = if config.lambda1 > 0.0 {
        moment_residuals(model, target, config)?
            .into_iter()
            .map(|r| scale1 * r)
            .collect()
    } else {
        Vec::new()
    };
    if config.lambda2 > 0.0 {
        let reference = config.reference.as_ref().ok_or(Error::MissingReference)?;
        if paths.is_empty() {
            return Err(Error::TooFewSamples(0));
        }
        let scale2 = (config.lambda2 / paths.len() as f64).sqrt();
        for path in paths {
            if path.len() != reference.len() {
                return Err(Error::Shape("paths need one matrix per objective time".into()));
            }
            for (r, h) in path.iter().zip(reference) {
                if r.dim() != h.dim() {
                    return Err(Error::Shape("reference dimension mismatch".into()));
                }
                out.extend(r.iter().zip(h.iter()).map(|(x, y)| scale2 * (x - y)));
            }
        }
    }
    Ok(out)
}

/// Scalar penalized objective.
pub fn penalized_objective(
    model: &MomentSet,
    target: &MomentSet,
    paths: &[Vec<TransitionMatrix>],
    config: &ObjectiveConfig,
) -> Result<f64> {
    Ok(penalized_residuals(model, target, paths, config)?
        .iter()
        .map(|r| r * r)
        .sum())
}
