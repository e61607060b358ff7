use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rating_sde::lie::{coord_count, GeneratorElement};
use rating_sde::moments::{estimate_moments, objective, ObjectiveConfig};
use rating_sde::TransitionMatrix;

fn random_samples(rng: &mut ChaCha8Rng, m: usize, times: usize, dim: usize) -> Vec<Vec<TransitionMatrix>> {
    (0..m)
        .map(|_| {
            (0..times)
                .map(|_| {
                    let coords = (0..coord_count(dim)).map(|_| rng.random_range(0.0..0.5)).collect();
                    GeneratorElement::new(dim, coords).unwrap().exp()
                })
                .collect()
        })
        .collect()
}

/// Entry-by-entry loops: the mean, the unbiased variance and the higher
/// central moments with divisor `M`.
fn naive_moment(samples: &[Vec<TransitionMatrix>], t: usize, order: usize, i: usize, j: usize) -> f64 {
    let m = samples.len() as f64;
    let mut mean = 0.0;
    for s in samples {
        mean += s[t][(i, j)];
    }
    mean /= m;
    if order == 1 {
        return mean;
    }
    let mut acc = 0.0;
    for s in samples {
        acc += (s[t][(i, j)] - mean).powi(order as i32);
    }
    if order == 2 {
        acc / (m - 1.0)
    } else {
        acc / m
    }
}

#[test]
fn matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let dim = rng.random_range(2..=5);
        let m = rng.random_range(2..=30);
        let times = rng.random_range(1..=3);
        let samples = random_samples(&mut rng, m, times, dim);
        let ts: Vec<f64> = (1..=times).map(|t| t as f64 / 4.0).collect();
        let set = estimate_moments(&samples, &ts, 5).unwrap();
        for t in 0..times {
            for order in 1..=5 {
                for i in 0..dim {
                    for j in 0..dim {
                        let want = naive_moment(&samples, t, order, i, j);
                        let got = set.get(t, order)[(i, j)];
                        assert!((got - want).abs() < 1e-12, "t={t} k={order} ({i},{j}): {got} vs {want}");
                    }
                }
            }
        }
    }
}

#[test]
fn objective_ignores_sample_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random_samples(&mut rng, 40, 1, 4);
    let b = random_samples(&mut rng, 40, 1, 4);
    let mut shuffled = a.clone();
    shuffled.reverse();
    shuffled.swap(3, 17);
    let cfg = ObjectiveConfig::default();
    let target = estimate_moments(&b, &[1.0], 4).unwrap();
    let x = objective(&estimate_moments(&a, &[1.0], 4).unwrap(), &target, &cfg).unwrap();
    let y = objective(&estimate_moments(&shuffled, &[1.0], 4).unwrap(), &target, &cfg).unwrap();
    assert!((x.value - y.value).abs() <= 1e-15 * x.value.max(1.0));
}

#[test]
fn scaling_weights_scales_objective_quadratically() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = estimate_moments(&random_samples(&mut rng, 30, 1, 3), &[1.0], 4).unwrap();
    let b = estimate_moments(&random_samples(&mut rng, 30, 1, 3), &[1.0], 4).unwrap();
    let cfg = ObjectiveConfig::default();
    let mut scaled = cfg.clone();
    let c = 3.5;
    scaled.weights.iter_mut().for_each(|w| *w *= c);
    let x = objective(&a, &b, &cfg).unwrap().value;
    let y = objective(&a, &b, &scaled).unwrap().value;
    assert!((y - c * c * x).abs() < 1e-12 * y);
}
