use chrono::{Days, NaiveDate};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rating_sde::aalen_johansen::{estimate, estimate_grid, GridOptions};
use rating_sde::rating_data::{RatingEvent, RatingHistory, RatingScale};

const DAYS: u64 = 60;

fn base() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).unwrap()
}

/// Up to 10 entities and 20 events over a short period. Entities stop after
/// reaching the default state.
fn random_history(rng: &mut ChaCha8Rng, k: usize) -> (RatingHistory, Vec<Vec<(NaiveDate, usize)>>) {
    let entities = rng.random_range(1..=10);
    let mut budget = 20usize;
    let mut raw = Vec::new();
    let mut events = Vec::new();
    for e in 0..entities {
        if budget == 0 {
            break;
        }
        let n = rng.random_range(1..=budget.min(5));
        budget -= n;
        let mut days: Vec<u64> = (0..n).map(|_| rng.random_range(0..DAYS)).collect();
        days.sort_unstable();
        days.dedup();
        let mut path = Vec::new();
        let mut rating = rng.random_range(0..k - 1);
        for (i, &d) in days.iter().enumerate() {
            if i > 0 {
                rating = rng.random_range(0..k);
            }
            let date = base() + Days::new(d);
            path.push((date, rating));
            events.push(RatingEvent {
                entity_id: format!("e{e}"),
                date,
                rating,
            });
            if rating == k - 1 {
                break;
            }
        }
        raw.push(path);
    }
    let scale = RatingScale::new((0..k).map(|i| format!("R{i}"))).unwrap();
    (RatingHistory::from_events(scale, events).unwrap(), raw)
}

/// Walks every calendar day in `(start, end]`, counting transitions and the
/// at-risk population from the raw event lists.
fn brute_force(raw: &[Vec<(NaiveDate, usize)>], k: usize, start: NaiveDate, end: NaiveDate) -> DMatrix<f64> {
    let mut p = DMatrix::identity(k, k);
    let mut day = start + Days::new(1);
    while day <= end {
        let mut counts = DMatrix::<f64>::zeros(k, k);
        let mut at_risk = vec![0.0; k];
        for path in raw {
            let (first, last) = (path[0].0, path[path.len() - 1].0);
            if day <= first || day > last {
                continue;
            }
            let mut held = path[0].1;
            for &(d, r) in path {
                if d < day {
                    held = r;
                }
            }
            at_risk[held] += 1.0;
            for &(d, r) in path {
                if d == day && r != held {
                    counts[(held, r)] += 1.0;
                }
            }
        }
        let mut factor = DMatrix::identity(k, k);
        for i in 0..k {
            for j in 0..k {
                if i != j && counts[(i, j)] > 0.0 {
                    factor[(i, j)] += counts[(i, j)] / at_risk[i];
                    factor[(i, i)] -= counts[(i, j)] / at_risk[i];
                }
            }
        }
        p *= factor;
        day = day + Days::new(1);
    }
    p
}

#[test]
fn matches_brute_force_on_random_histories() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..50 {
        let k = rng.random_range(2..=5);
        let (history, raw) = random_history(&mut rng, k);
        let start = base() + Days::new(rng.random_range(0..10));
        let end = start + Days::new(rng.random_range(10..DAYS));
        let got = estimate(&history, start, end).unwrap();
        let want = brute_force(&raw, k, start, end);
        let diff = (got.matrix() - &want).abs().max();
        assert!(diff < 1e-12, "case {case}: {diff}\n{got:?}\n{want}");
        for i in 0..k {
            let row = got.matrix().row(i);
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(got.matrix()[(k - 1, k - 1)], 1.0);
    }
}

#[test]
fn one_tile_per_window_length_per_period() {
    let scale = RatingScale::abcd();
    let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).unwrap();
    let events = [("x", d(2011, 1, 1), 0), ("x", d(2015, 5, 3), 1), ("x", d(2019, 12, 31), 1)]
        .into_iter()
        .map(|(id, date, rating)| RatingEvent {
            entity_id: id.into(),
            date,
            rating,
        });
    let history = RatingHistory::from_events(scale, events).unwrap();
    let pools = estimate_grid(&history, &GridOptions::new(d(2011, 1, 1))).unwrap();
    let sizes: Vec<usize> = pools.iter().map(|p| p.len()).collect();
    assert_eq!(sizes, [108, 36, 18, 9]);
}
