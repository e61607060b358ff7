//! Synthetic rating histories from a continuous-time Markov chain with
//! yearly intensity shocks, entries and withdrawals.

use chrono::{Datelike, Days, NaiveDate};
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::error::{Error, Result};
use crate::lie::Matrix;
use crate::rating_data::{RatingEvent, RatingHistory, RatingScale};
use crate::rng::{substream, Domain};

const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Debug, Clone)]
pub struct DemoConfig {
    pub start: NaiveDate,
    /// Last observed day; active entities get a confirmation on it.
    pub end: NaiveDate,
    pub initial_entities: usize,
    /// Expected new entities per year.
    pub entry_rate: f64,
    /// Withdrawal intensity per entity and year.
    pub withdrawal_rate: f64,
    /// Volatility of the yearly log-normal intensity multiplier.
    pub shock_vol: f64,
    /// Yearly generator over the scale, last row zero.
    pub generator: Matrix,
    /// Rating distribution of new entities over the non-default states.
    pub entry_mix: Vec<f64>,
    pub seed: u64,
}

impl DemoConfig {
    /// Four grades A, B, C, D from 2011-01-01 to 2019-12-31.
    pub fn abcd(seed: u64) -> Self {
        #[rustfmt::skip]
        let generator = Matrix::from_row_slice(4, 4, &[
            -0.064,  0.060,  0.0035, 0.0005,
             0.0095, -0.0335, 0.022,  0.002,
             0.0005, 0.050,  -0.2005, 0.150,
             0.0,    0.0,    0.0,    0.0,
        ]);
        Self {
            start: NaiveDate::from_ymd_opt(2011, 1, 1).expect("valid date"),
            end: NaiveDate::from_ymd_opt(2019, 12, 31).expect("valid date"),
            initial_entities: 1000,
            entry_rate: 80.0,
            withdrawal_rate: 0.04,
            shock_vol: 0.35,
            generator,
            entry_mix: vec![0.3, 0.45, 0.25],
            seed,
        }
    }

    fn validate(&self, scale: &RatingScale) -> Result<()> {
        let k = scale.dim();
        if self.generator.nrows() != k || self.generator.ncols() != k {
            return Err(Error::Shape(format!("generator must be {k}x{k}")));
        }
        for i in 0..k {
            let row = self.generator.row(i);
            let off_ok = (0..k).all(|j| j == i || row[j] >= 0.0);
            if !off_ok || row.sum().abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "generator row {i} must have non-negative off-diagonals and sum to zero"
                )));
            }
        }
        if self.generator.row(k - 1).iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidArgument("default row of the generator must be zero".into()));
        }
        if self.entry_mix.len() != k - 1 || self.entry_mix.iter().any(|&w| w < 0.0) || self.entry_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument("entry mix needs one non-negative weight per non-default grade".into()));
        }
        if self.end <= self.start {
            return Err(Error::InvalidArgument("demo period is empty".into()));
        }
        if !(self.entry_rate >= 0.0 && self.withdrawal_rate >= 0.0 && self.shock_vol >= 0.0) {
            return Err(Error::InvalidArgument("rates and volatility must be non-negative".into()));
        }
        Ok(())
    }
}

/// Simulates a history on `scale`. Each entity uses its own random stream.
pub fn demo_history(scale: &RatingScale, config: &DemoConfig) -> Result<RatingHistory> {
    config.validate(scale)?;
    let k = scale.dim();
    let horizon = (config.end - config.start).num_days() as f64 + 1.0;
    let years = (config.end.year() - config.start.year() + 1) as usize;

    let mut rng = substream(config.seed, Domain::DemoHistory, 0);
    let shocks: Vec<f64> = (0..years)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (config.shock_vol * z - 0.5 * config.shock_vol * config.shock_vol).exp()
        })
        .collect();

    let mut entries: Vec<f64> = vec![0.0; config.initial_entities];
    if config.entry_rate > 0.0 {
        let gap = Exp::new(config.entry_rate / DAYS_PER_YEAR).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut t = 0.0;
        loop {
            t += gap.sample(&mut rng);
            if t >= horizon {
                break;
            }
            entries.push(t.floor());
        }
    }

    let mut events = Vec::new();
    for (n, &entry_day) in entries.iter().enumerate() {
        let mut rng = substream(config.seed, Domain::DemoHistory, n as u64 + 1);
        let id = format!("E{:05}", n + 1);
        let total: f64 = config.entry_mix.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut state = k - 2;
        for (i, w) in config.entry_mix.iter().enumerate() {
            if u < *w {
                state = i;
                break;
            }
            u -= w;
        }
        let date_of = |day: f64| config.start + Days::new(day as u64);
        events.push(RatingEvent { entity_id: id.clone(), date: date_of(entry_day), rating: state });

        let withdraw = if config.withdrawal_rate > 0.0 {
            entry_day + Exp::new(config.withdrawal_rate / DAYS_PER_YEAR)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?
                .sample(&mut rng)
        } else {
            f64::INFINITY
        };
        let stop = withdraw.min(horizon);
        let mut t = entry_day;
        let mut last_day = entry_day;
        while state != k - 1 {
            // Intensities are constant within a calendar year.
            let year = date_of(t.floor()).year() - config.start.year();
            let shock = shocks[year as usize];
            let out_rate = -config.generator[(state, state)] * shock / DAYS_PER_YEAR;
            let year_end = NaiveDate::from_ymd_opt(config.start.year() + year + 1, 1, 1).expect("valid date");
            let boundary = ((year_end - config.start).num_days() as f64).min(stop);
            let wait = if out_rate > 0.0 { -rng.random::<f64>().ln() / out_rate } else { f64::INFINITY };
            if t + wait >= boundary {
                t = boundary;
                if t >= stop {
                    break;
                }
                continue;
            }
            t += wait;
            let mut u = rng.random::<f64>() * -config.generator[(state, state)];
            let mut next = k - 1;
            for j in (0..k).filter(|&j| j != state) {
                let q = config.generator[(state, j)];
                if u < q {
                    next = j;
                    break;
                }
                u -= q;
            }
            state = next;
            last_day = t.floor();
            events.push(RatingEvent { entity_id: id.clone(), date: date_of(last_day), rating: state });
        }
        if state != k - 1 {
            let close = (stop.min(horizon - 1.0)).floor();
            if close > last_day || (close == last_day && close > entry_day) {
                events.push(RatingEvent { entity_id: id, date: date_of(close), rating: state });
            }
        }
    }
    RatingHistory::from_events(scale.clone(), events)
}
