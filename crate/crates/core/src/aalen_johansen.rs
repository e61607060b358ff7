//! Aalen-Johansen product-limit estimation of transition matrices with an
//! absorbing default state.

use std::collections::BTreeMap;

use chrono::{Months, NaiveDate};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lie::{Matrix, TransitionMatrix};
use crate::rating_data::{months_to_years, MatrixSeries, RatingHistory};

/// The estimated generator increment at one jump date.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpIncrement {
    pub date: NaiveDate,
    /// `counts[(i, j)]` is the number of `i -> j` transitions on `date`.
    pub counts: Matrix,
    /// Entities rated `i` immediately before `date`.
    pub at_risk: Vec<usize>,
    pub delta_a: Matrix,
}

/// Generator increments for every jump date in the half-open window
/// `(start, end]`, in chronological order.
pub fn count_transitions(
    history: &RatingHistory,
    start: NaiveDate,
    end: NaiveDate,
) -> Result<Vec<JumpIncrement>> {
    if start >= end {
        return Err(Error::InvalidArgument(format!(
            "window start {start} is not before end {end}"
        )));
    }
    let k = history.scale.dim();
    let mut jumps: BTreeMap<NaiveDate, Matrix> = BTreeMap::new();
    for entity in &history.entities {
        for pair in entity.events.windows(2) {
            let ((_, from), (date, to)) = (pair[0], pair[1]);
            if from != to && date > start && date <= end {
                jumps.entry(date).or_insert_with(|| Matrix::zeros(k, k))[(from, to)] += 1.0;
            }
        }
    }

    let mut increments = Vec::with_capacity(jumps.len());
    for (date, counts) in jumps {
        let mut at_risk = vec![0usize; k];
        for entity in &history.entities {
            if let Some(r) = entity.rating_before(date) {
                at_risk[r] += 1;
            }
        }
        let mut delta_a = Matrix::zeros(k, k);
        for i in 0..k - 1 {
            let leaving: f64 = counts.row(i).sum();
            if leaving == 0.0 {
                continue;
            }
            let y = at_risk[i] as f64;
            assert!(leaving <= y, "more transitions out of state {i} than entities at risk");
            for j in 0..k {
                if j != i {
                    delta_a[(i, j)] = counts[(i, j)] / y;
                }
            }
            delta_a[(i, i)] = -leaving / y;
        }
        increments.push(JumpIncrement {
            date,
            counts,
            at_risk,
            delta_a,
        });
    }
    Ok(increments)
}

/// `P(start, end) = Π (I + ΔA(T_k))` over the jump dates in `(start, end]`.
pub fn estimate(history: &RatingHistory, start: NaiveDate, end: NaiveDate) -> Result<TransitionMatrix> {
    let k = history.scale.dim();
    let increments = count_transitions(history, start, end)?;
    let mut p = Matrix::identity(k, k);
    for inc in &increments {
        let factor = Matrix::identity(k, k) + &inc.delta_a;
        p = &p * factor;
    }
    TransitionMatrix::new(p)
}

/// Layout of the estimation windows.
#[derive(Debug, Clone)]
pub struct GridOptions {
    pub start: NaiveDate,
    /// Last observed day of the data period; defaults to the last event date.
    pub end: Option<NaiveDate>,
    pub spans: Vec<u32>,
    /// Non-overlapping tiles when set, otherwise windows start every month.
    pub disjoint: bool,
}

impl GridOptions {
    pub fn new(start: NaiveDate) -> Self {
        Self {
            start,
            end: None,
            spans: vec![1, 3, 6, 12],
            disjoint: true,
        }
    }
}

/// Estimated matrices for one window length.
#[derive(Debug, Clone)]
pub struct SpanPool {
    pub span_months: u32,
    pub windows: Vec<(NaiveDate, NaiveDate)>,
    pub matrices: Vec<TransitionMatrix>,
}

impl SpanPool {
    /// One single-time sample per window, at time `span/12` years.
    pub fn to_series(&self, history: &RatingHistory) -> MatrixSeries {
        MatrixSeries {
            scale: history.scale.clone(),
            times: vec![months_to_years(self.span_months)],
            samples: self.matrices.iter().map(|m| vec![m.clone()]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}

/// Windows `(s, s + span]` with `s = start + k·step` that fit into a data
/// period whose last observed day is `last_day`.
pub fn tile_windows(start: NaiveDate, last_day: NaiveDate, span: u32, step: u32) -> Vec<(NaiveDate, NaiveDate)> {
    let limit = last_day.succ_opt().unwrap_or(last_day);
    let mut out = Vec::new();
    let mut offset = 0u32;
    while let (Some(s), Some(e)) = (
        start.checked_add_months(Months::new(offset)),
        start.checked_add_months(Months::new(offset + span)),
    ) {
        if e > limit {
            break;
        }
        out.push((s, e));
        offset += step;
    }
    out
}

/// Estimates one pool of matrices per span over the data period.
pub fn estimate_grid(history: &RatingHistory, options: &GridOptions) -> Result<Vec<SpanPool>> {
    if options.spans.is_empty() || options.spans.contains(&0) {
        return Err(Error::InvalidArgument("spans must be non-empty and positive".into()));
    }
    let end = match options.end.or_else(|| history.last_date()) {
        Some(e) => e,
        None => return Err(Error::PeriodTooShort { span: options.spans[0] }),
    };
    options
        .spans
        .iter()
        .map(|&span| {
            let step = if options.disjoint { span } else { 1 };
            let windows = tile_windows(options.start, end, span, step);
            if windows.is_empty() {
                return Err(Error::PeriodTooShort { span });
            }
            let matrices = windows
                .par_iter()
                .map(|&(s, e)| estimate(history, s, e))
                .collect::<Result<Vec<_>>>()?;
            Ok(SpanPool {
                span_months: span,
                windows,
                matrices,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rating_data::{parse_history, RatingScale};

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn two_entities() -> RatingHistory {
        let csv = "entity_id,date,rating\n\
                   e1,2011-01-01,A\ne1,2011-03-01,B\ne1,2011-12-31,B\n\
                   e2,2011-01-01,A\ne2,2011-06-01,A\ne2,2011-12-31,A\n";
        parse_history(csv.as_bytes(), RatingScale::abcd()).unwrap()
    }

    #[test]
    fn single_increment_hand_count() {
        let h = two_entities();
        let inc = count_transitions(&h, d(2011, 1, 1), d(2011, 12, 31)).unwrap();
        assert_eq!(inc.len(), 1);
        let inc = &inc[0];
        assert_eq!(inc.date, d(2011, 3, 1));
        assert_eq!(inc.counts[(0, 1)], 1.0);
        assert_eq!(inc.at_risk[0], 2);
        let row: Vec<f64> = inc.delta_a.row(0).iter().copied().collect();
        assert_eq!(row, vec![-0.5, 0.5, 0.0, 0.0]);
        assert!(inc.delta_a.row(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_factor_product() {
        let h = two_entities();
        let p = estimate(&h, d(2011, 1, 1), d(2011, 12, 31)).unwrap();
        let row: Vec<f64> = p.row(0).iter().copied().collect();
        assert_eq!(row, vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(p[(1, 1)], 1.0);
    }

    #[test]
    fn empty_window_is_identity() {
        let h = two_entities();
        assert!(count_transitions(&h, d(2011, 4, 1), d(2011, 5, 1)).unwrap().is_empty());
        assert_eq!(estimate(&h, d(2011, 4, 1), d(2011, 5, 1)).unwrap(), TransitionMatrix::identity(4));
    }

    #[test]
    fn confirmations_are_not_transitions() {
        let csv = "entity_id,date,rating\ne1,2011-01-01,B\ne1,2011-02-01,B\ne1,2011-03-01,B\n";
        let h = parse_history(csv.as_bytes(), RatingScale::abcd()).unwrap();
        assert!(count_transitions(&h, d(2010, 1, 1), d(2012, 1, 1)).unwrap().is_empty());
    }

    #[test]
    fn rejects_reversed_window() {
        let h = two_entities();
        assert!(count_transitions(&h, d(2011, 5, 1), d(2011, 5, 1)).is_err());
    }

    #[test]
    fn tiling_arithmetic() {
        let w = tile_windows(d(2011, 1, 1), d(2011, 12, 31), 6, 6);
        assert_eq!(w, vec![(d(2011, 1, 1), d(2011, 7, 1)), (d(2011, 7, 1), d(2012, 1, 1))]);
        assert_eq!(tile_windows(d(2011, 1, 1), d(2011, 12, 31), 12, 12).len(), 1);
        assert!(tile_windows(d(2011, 1, 1), d(2011, 12, 30), 12, 12).is_empty());
        let end = d(2019, 12, 31);
        let counts: Vec<usize> = [1, 3, 6, 12]
            .iter()
            .map(|&s| tile_windows(d(2011, 1, 1), end, s, s).len())
            .collect();
        assert_eq!(counts, vec![108, 36, 18, 9]);
        assert_eq!(tile_windows(d(2011, 1, 1), end, 12, 1).len(), 97);
    }

    #[test]
    fn grid_errors_on_short_period() {
        let h = two_entities();
        let mut opts = GridOptions::new(d(2011, 1, 1));
        opts.spans = vec![24];
        assert!(matches!(estimate_grid(&h, &opts), Err(Error::PeriodTooShort { span: 24 })));
    }
}
