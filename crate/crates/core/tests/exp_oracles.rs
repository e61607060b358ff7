use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rating_sde::lie::{coord_count, GeneratorElement};

/// Plain Taylor sum of `terms` terms, no scaling.
fn taylor(l: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
    let n = l.nrows();
    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..terms {
        term = &term * l / k as f64;
        sum += &term;
    }
    sum
}

fn random_element(rng: &mut ChaCha8Rng, dim: usize, hi: f64) -> GeneratorElement {
    let coords = (0..coord_count(dim)).map(|_| rng.random_range(0.0..=hi)).collect();
    GeneratorElement::new(dim, coords).unwrap()
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

#[test]
fn small_generators_match_the_taylor_series() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 500 {
        let dim = rng.random_range(2..=6);
        let el = random_element(&mut rng, dim, 0.4);
        let l = el.realize();
        if inf_norm(&l) > 1.0 {
            continue;
        }
        let diff = (el.exp().matrix() - taylor(&l, 50)).abs().max();
        assert!(diff < 1e-10, "dim {dim}: {diff}");
        checked += 1;
    }
}

#[test]
fn large_generators_match_pade_exponential() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let dim = rng.random_range(2..=8);
        let el = random_element(&mut rng, dim, 5.0);
        let oracle = el.realize().exp();
        let diff = (el.exp().matrix() - oracle).abs().max();
        assert!(diff < 1e-9, "dim {dim}: {diff}");
    }
}

#[test]
fn exp_is_a_homomorphism_on_commuting_multiples() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let el = random_element(&mut rng, 4, 2.0);
        let half = el.combine(0.5, &GeneratorElement::zero(4), 0.0).unwrap();
        let twice = half.exp().compose(&half.exp());
        assert!((twice.matrix() - el.exp().matrix()).abs().max() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn exponentials_are_stochastic_with_absorbing_default(
        dim in 2usize..=7,
        raw in prop::collection::vec(0.0f64..=5.0, 36),
    ) {
        let coords = raw[..coord_count(dim)].to_vec();
        let p = GeneratorElement::new(dim, coords).unwrap().exp();
        for i in 0..dim {
            let row = p.matrix().row(i);
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
        for j in 0..dim {
            let expected = if j == dim - 1 { 1.0 } else { 0.0 };
            prop_assert_eq!(p.matrix()[(dim - 1, j)], expected);
        }
    }
}
