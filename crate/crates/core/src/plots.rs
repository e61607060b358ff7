//! Plot-ready data: entry histograms with method-of-moments beta fits and
//! sampled trajectories. Rendering is left to external tools.

use std::io::Write;

use statrs::distribution::{Beta, Continuous};

use crate::error::{Error, Result};
use crate::lie::TransitionMatrix;
use crate::rating_data::MatrixSeries;
use crate::sde::{SimulationGrid, Trace};

pub const BETA_CURVE_POINTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaFit {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaFit {
    /// Matches mean `m` and variance `v`; `None` unless `0 < m < 1` and
    /// `0 < v < m(1 - m)`.
    pub fn from_moments(m: f64, v: f64) -> Option<Self> {
        // Rounding noise of a constant sample counts as zero variance.
        if !(m > 0.0 && m < 1.0 && v > 1e-14 * m * (1.0 - m)) {
            return None;
        }
        let common = m * (1.0 - m) / v - 1.0;
        if common <= 0.0 {
            return None;
        }
        Some(Self {
            alpha: m * common,
            beta: (1.0 - m) * common,
        })
    }

    /// Fit to samples, using the unbiased variance.
    pub fn from_samples(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n < 2 {
            return None;
        }
        let m = values.iter().sum::<f64>() / n as f64;
        let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        Self::from_moments(m, v)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        Beta::new(self.alpha, self.beta).map_or(f64::NAN, |d| d.pdf(x))
    }

    /// `points` evenly spaced `(x, density)` pairs on `[lo, hi]`.
    pub fn curve(&self, lo: f64, hi: f64, points: usize) -> Vec<(f64, f64)> {
        let points = points.max(2);
        (0..points)
            .map(|i| {
                let x = lo + (hi - lo) * i as f64 / (points - 1) as f64;
                (x, self.pdf(x))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over the sample range; the last bin is closed.
    pub fn new(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 || values.is_empty() {
            return Err(Error::InvalidArgument("histogram needs values and at least one bin".into()));
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            hi = lo + 1e-12;
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Histogram and beta fit of one matrix entry at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryPanel {
    pub time: f64,
    pub from: usize,
    pub to: usize,
    pub histogram: Histogram,
    pub fit: Option<BetaFit>,
}

impl EntryPanel {
    pub fn label(&self) -> String {
        format!("{}-{}", self.from + 1, self.to + 1)
    }
}

/// One panel per time and per off-diagonal entry of the non-default rows.
pub fn entry_panels(series: &MatrixSeries, bins: usize) -> Result<Vec<EntryPanel>> {
    let k = series.scale.dim();
    let mut out = Vec::new();
    for (t, &time) in series.times.iter().enumerate() {
        for from in 0..k - 1 {
            for to in (0..k).filter(|&j| j != from) {
                let values: Vec<f64> = series.at_time(t).map(|m| m[(from, to)]).collect();
                out.push(EntryPanel {
                    time,
                    from,
                    to,
                    histogram: Histogram::new(&values, bins)?,
                    fit: BetaFit::from_samples(&values),
                });
            }
        }
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Long format: one row per bin with the fitted beta parameters repeated.
/// Entries are written as 1-based `i-j`.
pub fn write_histogram_csv<W: Write>(panels: &[EntryPanel], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "entry", "bin_lo", "bin_hi", "count", "density", "alpha", "beta"])
        .map_err(csv_err)?;
    for p in panels {
        let entry = p.label();
        let total = p.histogram.total() as f64;
        let (a, b) = p
            .fit
            .map_or((String::new(), String::new()), |f| (f.alpha.to_string(), f.beta.to_string()));
        for (i, &c) in p.histogram.counts.iter().enumerate() {
            let (lo, hi) = (p.histogram.edges[i], p.histogram.edges[i + 1]);
            let density = c as f64 / (total * (hi - lo));
            w.write_record([
                p.time.to_string(),
                entry.clone(),
                lo.to_string(),
                hi.to_string(),
                c.to_string(),
                density.to_string(),
                a.clone(),
                b.clone(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Fitted beta densities over each panel's histogram range.
pub fn write_beta_curve_csv<W: Write>(panels: &[EntryPanel], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "entry", "x", "density"]).map_err(csv_err)?;
    for p in panels {
        let Some(fit) = p.fit else { continue };
        let entry = p.label();
        let lo = p.histogram.edges[0];
        let hi = *p.histogram.edges.last().expect("edges");
        for (x, d) in fit.curve(lo, hi, BETA_CURVE_POINTS) {
            w.write_record([p.time.to_string(), entry.clone(), x.to_string(), d.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Entry `(from, to)` of traced trajectories: time, ensemble mean, then one
/// column per recorded path.
pub fn write_trajectory_csv<W: Write>(
    grid: &SimulationGrid,
    trace: &Trace,
    from: usize,
    to: usize,
    out: W,
) -> Result<()> {
    let dim = trace
        .matrices
        .first()
        .and_then(|p| p.first())
        .map(TransitionMatrix::dim)
        .ok_or_else(|| Error::InvalidArgument("trace holds no trajectories".into()))?;
    if from >= dim || to >= dim {
        return Err(Error::IndexOutOfRange(format!("entry ({from}, {to}) outside {dim}x{dim}")));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["time".to_string(), "mean".to_string()];
    header.extend((0..trace.matrices.len()).map(|p| format!("path_{p}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, &step) in trace.steps.iter().enumerate() {
        let values: Vec<f64> = trace.matrices.iter().map(|p| p[i][(from, to)]).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let mut row = vec![grid.step_time(step).to_string(), mean.to_string()];
        row.extend(values.iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_fit_recovers_moments() {
        let (a, b) = (2.0, 30.0);
        let m = a / (a + b);
        let v = a * b / ((a + b) * (a + b) * (a + b + 1.0));
        let f = BetaFit::from_moments(m, v).unwrap();
        assert!((f.alpha - a).abs() < 1e-10);
        assert!((f.beta - b).abs() < 1e-10);
    }

    #[test]
    fn uniform_moments_give_flat_beta() {
        let f = BetaFit::from_moments(0.5, 1.0 / 12.0).unwrap();
        assert!((f.alpha - 1.0).abs() < 1e-12);
        assert!((f.beta - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_fits_are_none() {
        assert!(BetaFit::from_moments(0.0, 0.1).is_none());
        assert!(BetaFit::from_moments(0.5, 0.0).is_none());
        assert!(BetaFit::from_moments(0.5, 0.3).is_none());
        assert!(BetaFit::from_samples(&[0.2, 0.2, 0.2]).is_none());
    }

    #[test]
    fn curve_integrates_to_about_one() {
        let f = BetaFit { alpha: 2.0, beta: 5.0 };
        let c = f.curve(0.0, 1.0, BETA_CURVE_POINTS);
        assert_eq!(c.len(), 200);
        let h = 1.0 / 199.0;
        let integral: f64 = c.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * h).sum();
        assert!((integral - 1.0).abs() < 1e-3, "{integral}");
    }

    #[test]
    fn histogram_counts_everything() {
        let h = Histogram::new(&[0.0, 0.1, 0.5, 1.0, 1.0], 4).unwrap();
        assert_eq!(h.counts, vec![2, 0, 1, 2]);
        assert_eq!(h.total(), 5);
        assert_eq!(h.edges.len(), 5);
        let flat = Histogram::new(&[0.3, 0.3], 3).unwrap();
        assert_eq!(flat.total(), 2);
    }
}
