//! Bootstrap synthesis of multi-time target series from per-span pools of
//! estimated matrices.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lie::TransitionMatrix;
use crate::moments::{estimate_moments, MomentSet};
use crate::rating_data::{MatrixSeries, RatingScale};
use crate::rng::{substream, Domain};
use crate::validator::check_series;

/// Redraws allowed per sample when filtering on increasing rating spread.
pub const DEFAULT_RETRY_CAP: usize = 10_000;

/// Matrices estimated over windows of one length.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    /// Window length in years.
    pub time: f64,
    pub matrices: Vec<TransitionMatrix>,
}

impl Pool {
    /// Pools from single-time series, e.g. the per-span output of estimation.
    pub fn from_series(series: &MatrixSeries) -> Result<Self> {
        if series.times.len() != 1 {
            return Err(Error::Shape(format!(
                "pool series must have exactly one time, got {}",
                series.times.len()
            )));
        }
        Ok(Self {
            time: series.times[0],
            matrices: series.samples.iter().map(|s| s[0].clone()).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapOptions {
    pub samples: usize,
    pub seed: u64,
    /// Keep only samples with non-increasing diagonals over time.
    pub filter_irs: bool,
    pub retry_cap: usize,
}

impl BootstrapOptions {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self {
            samples,
            seed,
            filter_irs: false,
            retry_cap: DEFAULT_RETRY_CAP,
        }
    }
}

/// Number of distinct series the pools can produce.
pub fn combination_count(pools: &[Pool]) -> u128 {
    pools.iter().map(|p| p.matrices.len() as u128).product()
}

fn check_pools(pools: &[Pool]) -> Result<usize> {
    let first = pools
        .first()
        .ok_or_else(|| Error::InvalidArgument("no pools given".into()))?;
    if let Some(p) = pools.iter().find(|p| p.matrices.is_empty()) {
        return Err(Error::InvalidArgument(format!("pool at time {} is empty", p.time)));
    }
    if pools.windows(2).any(|w| w[0].time >= w[1].time) {
        return Err(Error::InvalidArgument("pool times must be strictly increasing".into()));
    }
    let k = first.matrices[0].dim();
    if pools.iter().flat_map(|p| &p.matrices).any(|m| m.dim() != k) {
        return Err(Error::Shape("pools mix matrix dimensions".into()));
    }
    Ok(k)
}

/// Draws `samples` series, sample `w` picking one matrix per pool uniformly
/// with replacement from its own random stream.
pub fn bootstrap_series(pools: &[Pool], scale: &RatingScale, options: &BootstrapOptions) -> Result<MatrixSeries> {
    let k = check_pools(pools)?;
    if k != scale.dim() {
        return Err(Error::Shape(format!(
            "scale has {} labels but matrices are {k}x{k}",
            scale.dim()
        )));
    }
    if options.samples == 0 {
        return Err(Error::TooFewSamples(0));
    }
    let samples = (0..options.samples)
        .into_par_iter()
        .map(|w| draw_sample(pools, options, w))
        .collect::<Result<Vec<_>>>()?;
    MatrixSeries::new(
        scale.clone(),
        pools.iter().map(|p| p.time).collect(),
        samples,
    )
}

fn draw_sample(pools: &[Pool], options: &BootstrapOptions, w: usize) -> Result<Vec<TransitionMatrix>> {
    let mut rng = substream(options.seed, Domain::Bootstrap, w as u64);
    let attempts = if options.filter_irs { options.retry_cap.max(1) } else { 1 };
    for _ in 0..attempts {
        let sample: Vec<TransitionMatrix> = pools
            .iter()
            .map(|p| p.matrices[rng.random_range(0..p.matrices.len())].clone())
            .collect();
        if !options.filter_irs || check_series(sample.iter().map(|m| m.matrix())).iter().all(|f| f.irs) {
            return Ok(sample);
        }
    }
    Err(Error::RetryCapExceeded(options.retry_cap))
}

/// Target moments of a bootstrapped series.
pub fn summarize_targets(series: &MatrixSeries, order: usize) -> Result<MomentSet> {
    estimate_moments(&series.samples, &series.times, order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(p: f64) -> TransitionMatrix {
        TransitionMatrix::from_rows(&[vec![p, 1.0 - p], vec![0.0, 1.0]]).unwrap()
    }

    fn scale() -> RatingScale {
        RatingScale::new(["A", "D"]).unwrap()
    }

    fn pools() -> Vec<Pool> {
        vec![
            Pool { time: 0.5, matrices: vec![two_state(0.9), two_state(0.8)] },
            Pool { time: 1.0, matrices: vec![two_state(0.85), two_state(0.7), two_state(0.95)] },
        ]
    }

    #[test]
    fn counts_combinations() {
        assert_eq!(combination_count(&pools()), 6);
    }

    #[test]
    fn same_seed_same_samples() {
        let opts = BootstrapOptions::new(50, 11);
        let a = bootstrap_series(&pools(), &scale(), &opts).unwrap();
        let b = bootstrap_series(&pools(), &scale(), &opts).unwrap();
        assert_eq!(a, b);
        let c = bootstrap_series(&pools(), &scale(), &BootstrapOptions::new(50, 12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn irs_filter_rejects_increasing_diagonals() {
        let mut opts = BootstrapOptions::new(200, 3);
        opts.filter_irs = true;
        let s = bootstrap_series(&pools(), &scale(), &opts).unwrap();
        for sample in &s.samples {
            assert!(sample[0][(0, 0)] >= sample[1][(0, 0)]);
        }
        assert!(s.samples.iter().any(|x| x[1][(0, 0)] == 0.85));
    }

    #[test]
    fn impossible_filter_hits_retry_cap() {
        let p = vec![
            Pool { time: 0.5, matrices: vec![two_state(0.5)] },
            Pool { time: 1.0, matrices: vec![two_state(0.9)] },
        ];
        let mut opts = BootstrapOptions::new(3, 1);
        opts.filter_irs = true;
        opts.retry_cap = 20;
        assert!(matches!(bootstrap_series(&p, &scale(), &opts), Err(Error::RetryCapExceeded(20))));
    }

    #[test]
    fn rejects_bad_pools() {
        let mut p = pools();
        p[1].time = 0.5;
        assert!(bootstrap_series(&p, &scale(), &BootstrapOptions::new(5, 1)).is_err());
        let mut p = pools();
        p[0].matrices.clear();
        assert!(bootstrap_series(&p, &scale(), &BootstrapOptions::new(5, 1)).is_err());
    }
}
