use statrs::distribution::{ChiSquared, ContinuousCDF};

use rating_sde::rating_data::RatingScale;
use rating_sde::synth::{bootstrap_series, combination_count, BootstrapOptions, Pool};
use rating_sde::TransitionMatrix;

/// Pool whose matrices carry their own index in entry `(0, 1)`.
fn tagged_pool(time: f64, size: usize) -> Pool {
    let matrices = (0..size)
        .map(|i| {
            let x = (i + 1) as f64 / 1000.0;
            TransitionMatrix::from_rows(&[vec![1.0 - x, x], vec![0.0, 1.0]]).unwrap()
        })
        .collect();
    Pool { time, matrices }
}

fn tag(m: &TransitionMatrix) -> usize {
    (m[(0, 1)] * 1000.0).round() as usize - 1
}

fn scale() -> RatingScale {
    RatingScale::new(["A", "D"]).unwrap()
}

fn chi_square_p(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn window_pools_give_the_expected_combination_count() {
    let pools: Vec<Pool> = [(1.0 / 12.0, 108), (0.25, 36), (0.5, 18), (1.0, 9)]
        .into_iter()
        .map(|(t, n)| tagged_pool(t, n))
        .collect();
    assert_eq!(combination_count(&pools), 629_856);
}

#[test]
fn every_combination_of_two_by_four_pools_is_drawn_uniformly() {
    let pools: Vec<Pool> = [0.25, 0.5, 0.75, 1.0].into_iter().map(|t| tagged_pool(t, 2)).collect();
    assert_eq!(combination_count(&pools), 16);
    let series = bootstrap_series(&pools, &scale(), &BootstrapOptions::new(16_000, 3)).unwrap();
    let mut counts = vec![0usize; 16];
    for s in &series.samples {
        let code = s.iter().fold(0, |acc, m| acc * 2 + tag(m));
        counts[code] += 1;
    }
    assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    let p = chi_square_p(&counts);
    assert!(p > 0.001, "p = {p}, counts {counts:?}");
}

#[test]
fn marginals_are_uniform_over_each_pool() {
    let pools: Vec<Pool> = [(1.0 / 12.0, 108), (0.25, 36), (0.5, 18), (1.0, 9)]
        .into_iter()
        .map(|(t, n)| tagged_pool(t, n))
        .collect();
    let series = bootstrap_series(&pools, &scale(), &BootstrapOptions::new(20_000, 9)).unwrap();
    for (t, pool) in pools.iter().enumerate() {
        let mut counts = vec![0usize; pool.matrices.len()];
        for m in series.at_time(t) {
            counts[tag(m)] += 1;
        }
        let p = chi_square_p(&counts);
        assert!(p > 0.001, "time {t}: p = {p}");
    }
}

#[test]
fn seeds_and_thread_counts_do_not_change_draws() {
    let pools: Vec<Pool> = [0.25, 1.0].into_iter().map(|t| tagged_pool(t, 7)).collect();
    let opts = BootstrapOptions::new(500, 42);
    let a = bootstrap_series(&pools, &scale(), &opts).unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = single.install(|| bootstrap_series(&pools, &scale(), &opts).unwrap());
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}
