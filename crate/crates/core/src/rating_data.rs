//! Rating scales, per-entity rating histories and matrix-series files.

use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{Matrix, TransitionMatrix};

/// Largest tolerated deviation of an ingested row sum from one.
pub const INGEST_ROW_SUM_TOL: f64 = 0.01;
/// Entries below this are rejected as corrupt.
pub const INGEST_NEGATIVE_TOL: f64 = -1e-9;
/// Rows already this close to one are left untouched on ingestion, so that a
/// written series parses back bit-identically.
const RENORMALIZE_EPS: f64 = 1e-12;

/// Ordered rating labels, best first; the last label is the absorbing default.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct RatingScale {
    labels: Vec<String>,
}

impl RatingScale {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::InvalidScale("need at least two ratings".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if l.trim().is_empty() {
                return Err(Error::InvalidScale("empty rating label".into()));
            }
            if labels[..i].contains(l) {
                return Err(Error::InvalidScale(format!("duplicate label `{l}`")));
            }
        }
        Ok(Self { labels })
    }

    /// The four-state scale A, B, C, D.
    pub fn abcd() -> Self {
        Self::new(["A", "B", "C", "D"]).expect("valid scale")
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn default_index(&self) -> usize {
        self.labels.len() - 1
    }
}

impl TryFrom<Vec<String>> for RatingScale {
    type Error = Error;
    fn try_from(labels: Vec<String>) -> Result<Self> {
        Self::new(labels)
    }
}

impl From<RatingScale> for Vec<String> {
    fn from(s: RatingScale) -> Self {
        s.labels
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingEvent {
    pub entity_id: String,
    pub date: NaiveDate,
    /// 0-based index into the scale.
    pub rating: usize,
}

/// Date-sorted events of a single entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityHistory {
    pub id: String,
    pub events: Vec<(NaiveDate, usize)>,
}

impl EntityHistory {
    /// Rating held just before `date`, if the entity is under observation then.
    ///
    /// An entity is observed on `(first event, last event]`; ratings are
    /// right-continuous step functions of the event dates.
    pub fn rating_before(&self, date: NaiveDate) -> Option<usize> {
        let first = self.events.first()?;
        let last = self.events.last()?;
        if date <= first.0 || date > last.0 {
            return None;
        }
        let idx = self.events.partition_point(|(d, _)| *d < date);
        Some(self.events[idx - 1].1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingHistory {
    pub scale: RatingScale,
    pub entities: Vec<EntityHistory>,
}

impl RatingHistory {
    /// Builds a history from events in file order, enforcing the invariants.
    ///
    /// Same-day events of one entity collapse to the last one in order.
    pub fn from_events(scale: RatingScale, events: impl IntoIterator<Item = RatingEvent>) -> Result<Self> {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut entities: Vec<EntityHistory> = Vec::new();
        let default = scale.default_index();
        for (n, ev) in events.into_iter().enumerate() {
            if ev.rating >= scale.dim() {
                return Err(Error::UnknownRating {
                    line: n + 1,
                    label: ev.rating.to_string(),
                });
            }
            push_event(&mut index, &mut entities, default, &scale, ev, n + 1)?;
        }
        Ok(Self { scale, entities })
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn event_count(&self) -> usize {
        self.entities.iter().map(|e| e.events.len()).sum()
    }

    pub fn first_date(&self) -> Option<NaiveDate> {
        self.entities.iter().filter_map(|e| e.events.first().map(|x| x.0)).min()
    }

    pub fn last_date(&self) -> Option<NaiveDate> {
        self.entities.iter().filter_map(|e| e.events.last().map(|x| x.0)).max()
    }

    /// Writes the history as `entity_id,date,rating` CSV.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["entity_id", "date", "rating"]).map_err(csv_io)?;
        for e in &self.entities {
            for (d, r) in &e.events {
                w.write_record([e.id.as_str(), &d.format("%Y-%m-%d").to_string(), &self.scale.labels()[*r]])
                    .map_err(csv_io)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn push_event(
    index: &mut HashMap<String, usize>,
    entities: &mut Vec<EntityHistory>,
    default: usize,
    scale: &RatingScale,
    ev: RatingEvent,
    line: usize,
) -> Result<()> {
    let slot = *index.entry(ev.entity_id.clone()).or_insert_with(|| {
        entities.push(EntityHistory {
            id: ev.entity_id.clone(),
            events: Vec::new(),
        });
        entities.len() - 1
    });
    let hist = &mut entities[slot];
    if let Some(&(last_date, last_rating)) = hist.events.last() {
        if last_rating == default && ev.rating != default {
            return Err(Error::RatingAfterDefault {
                line,
                entity: ev.entity_id,
                label: scale.labels()[ev.rating].clone(),
            });
        }
        if ev.date < last_date {
            return Err(Error::NonMonotoneDates {
                line,
                entity: ev.entity_id,
                date: ev.date,
            });
        }
        if ev.date == last_date {
            hist.events.last_mut().expect("non-empty").1 = ev.rating;
            return Ok(());
        }
    }
    hist.events.push((ev.date, ev.rating));
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Parses `entity_id,date,rating` CSV into a history on `scale`.
pub fn parse_history<R: Read>(source: R, scale: RatingScale) -> Result<RatingHistory> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let header = reader.headers().map_err(|e| Error::MalformedRow {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != ["entity_id", "date", "rating"] {
        return Err(Error::MalformedRow {
            line: 1,
            message: format!("expected header `entity_id,date,rating`, got `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut index = HashMap::new();
    let mut entities = Vec::new();
    let default = scale.default_index();
    for record in reader.records() {
        let record = record.map_err(|e| Error::MalformedRow {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 3 {
            return Err(Error::MalformedRow {
                line,
                message: format!("expected 3 fields, got {}", record.len()),
            });
        }
        let entity_id = record[0].to_string();
        if entity_id.is_empty() {
            return Err(Error::MalformedRow {
                line,
                message: "empty entity_id".into(),
            });
        }
        let date = NaiveDate::parse_from_str(&record[1], "%Y-%m-%d").map_err(|e| Error::MalformedRow {
            line,
            message: format!("bad date `{}`: {e}", &record[1]),
        })?;
        let rating = scale.index_of(&record[2]).ok_or_else(|| Error::UnknownRating {
            line,
            label: record[2].to_string(),
        })?;
        push_event(
            &mut index,
            &mut entities,
            default,
            &scale,
            RatingEvent { entity_id, date, rating },
            line,
        )?;
    }
    Ok(RatingHistory { scale, entities })
}

/// Month count to year fraction.
pub fn months_to_years(months: u32) -> f64 {
    months as f64 / 12.0
}

/// Samples of transition-matrix time series on a common time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSeries {
    pub scale: RatingScale,
    /// Observation times in years, strictly increasing and positive.
    pub times: Vec<f64>,
    /// `samples[w][k]` is the matrix of sample `w` at `times[k]`.
    pub samples: Vec<Vec<TransitionMatrix>>,
}

#[derive(Serialize, Deserialize)]
struct SeriesFile {
    labels: Vec<String>,
    times: Vec<f64>,
    samples: Vec<Vec<Vec<Vec<f64>>>>,
}

impl MatrixSeries {
    pub fn new(scale: RatingScale, times: Vec<f64>, samples: Vec<Vec<TransitionMatrix>>) -> Result<Self> {
        validate_times(&times)?;
        for (w, s) in samples.iter().enumerate() {
            if s.len() != times.len() {
                return Err(Error::Shape(format!(
                    "sample {w} has {} matrices for {} times",
                    s.len(),
                    times.len()
                )));
            }
            if let Some(m) = s.iter().find(|m| m.dim() != scale.dim()) {
                return Err(Error::Shape(format!(
                    "sample {w} holds a {}x{} matrix for {} ratings",
                    m.dim(),
                    m.dim(),
                    scale.dim()
                )));
            }
        }
        Ok(Self { scale, times, samples })
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    /// Matrices of all samples at time index `k`.
    pub fn at_time(&self, k: usize) -> impl Iterator<Item = &TransitionMatrix> + '_ {
        self.samples.iter().map(move |s| &s[k])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, &self.to_file())?;
        Ok(())
    }

    fn to_file(&self) -> SeriesFile {
        SeriesFile {
            labels: self.scale.labels().to_vec(),
            times: self.times.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| s.iter().map(TransitionMatrix::rows).collect())
                .collect(),
        }
    }
}

fn validate_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::Shape("no observation times".into()));
    }
    if times.iter().any(|t| !t.is_finite() || *t <= 0.0) {
        return Err(Error::InvalidArgument("observation times must be positive".into()));
    }
    if times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("observation times must be strictly increasing".into()));
    }
    Ok(())
}

/// Parses the matrix-series JSON format, validating every matrix and
/// renormalizing rows that are within tolerance of one.
pub fn parse_matrix_series<R: Read>(source: R) -> Result<MatrixSeries> {
    let file: SeriesFile = serde_json::from_reader(source)?;
    let scale = RatingScale::new(file.labels)?;
    validate_times(&file.times)?;
    let k = scale.dim();
    let mut samples = Vec::with_capacity(file.samples.len());
    for (w, sample) in file.samples.into_iter().enumerate() {
        if sample.len() != file.times.len() {
            return Err(Error::Shape(format!(
                "sample {w} has {} matrices for {} times",
                sample.len(),
                file.times.len()
            )));
        }
        let mut mats = Vec::with_capacity(sample.len());
        for (t, rows) in sample.into_iter().enumerate() {
            mats.push(ingest_matrix(&rows, k, w, t)?);
        }
        samples.push(mats);
    }
    Ok(MatrixSeries {
        scale,
        times: file.times,
        samples,
    })
}

fn ingest_matrix(rows: &[Vec<f64>], k: usize, sample: usize, time: usize) -> Result<TransitionMatrix> {
    if rows.len() != k || rows.iter().any(|r| r.len() != k) {
        return Err(Error::Shape(format!(
            "sample {sample}, time {time}: expected a {k}x{k} matrix"
        )));
    }
    let mut m = Matrix::from_fn(k, k, |i, j| rows[i][j]);
    for i in 0..k {
        let mut sum = 0.0;
        for j in 0..k {
            let v = m[(i, j)];
            if !v.is_finite() || v < INGEST_NEGATIVE_TOL {
                return Err(Error::NegativeEntry {
                    sample,
                    time,
                    row: i,
                    col: j,
                    value: v,
                });
            }
            sum += v;
        }
        if (sum - 1.0).abs() > INGEST_ROW_SUM_TOL {
            return Err(Error::RowSum {
                sample,
                time,
                row: i,
                sum,
                tol: INGEST_ROW_SUM_TOL,
            });
        }
    }
    for j in 0..k {
        let target = if j + 1 == k { 1.0 } else { 0.0 };
        if (m[(k - 1, j)] - target).abs() > INGEST_ROW_SUM_TOL {
            return Err(Error::Shape(format!(
                "sample {sample}, time {time}: last row is not absorbing"
            )));
        }
        m[(k - 1, j)] = target;
    }
    for v in m.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let needs_norm = m
        .row_iter()
        .any(|r| (r.sum() - 1.0).abs() > RENORMALIZE_EPS);
    if needs_norm {
        for i in 0..k {
            let s: f64 = m.row(i).sum();
            if (s - 1.0).abs() > RENORMALIZE_EPS {
                let mut row = m.row_mut(i);
                row /= s;
            }
        }
    }
    TransitionMatrix::new(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RatingHistory> {
        parse_history(text.as_bytes(), RatingScale::abcd())
    }

    #[test]
    fn parses_two_events() {
        let h = parse("entity_id,date,rating\ne1,2011-01-01,A\ne1,2011-06-01,B\n").unwrap();
        assert_eq!(h.entity_count(), 1);
        assert_eq!(h.entities[0].events.len(), 2);
        assert_eq!(h.entities[0].events[1].1, 1);
    }

    #[test]
    fn rejects_rating_after_default() {
        let err = parse("entity_id,date,rating\ne1,2011-01-01,D\ne1,2011-02-01,A\n").unwrap_err();
        assert!(matches!(err, Error::RatingAfterDefault { line: 3, .. }), "{err}");
    }

    #[test]
    fn empty_history() {
        let h = parse("entity_id,date,rating\n").unwrap();
        assert_eq!(h.entity_count(), 0);
    }

    #[test]
    fn reports_bad_rows_with_line_numbers() {
        let err = parse("entity_id,date,rating\ne1,2011-01-01,A\ne1,2011-13-01,A\n").unwrap_err();
        assert!(matches!(err, Error::MalformedRow { line: 3, .. }), "{err}");
        let err = parse("entity_id,date,rating\ne1,2011-01-01,Z\n").unwrap_err();
        assert!(matches!(err, Error::UnknownRating { line: 2, .. }), "{err}");
        let err = parse("entity_id,date,rating\ne1,2011-02-01,A\ne1,2011-01-01,B\n").unwrap_err();
        assert!(matches!(err, Error::NonMonotoneDates { line: 3, .. }), "{err}");
        let err = parse("id,date,rating\n").unwrap_err();
        assert!(matches!(err, Error::MalformedRow { line: 1, .. }), "{err}");
    }

    #[test]
    fn same_day_events_keep_the_last() {
        let h = parse("entity_id,date,rating\ne1,2011-01-01,A\ne1,2011-01-01,B\n").unwrap();
        assert_eq!(h.entities[0].events, vec![(NaiveDate::from_ymd_opt(2011, 1, 1).unwrap(), 1)]);
    }

    #[test]
    fn default_repeated_is_fine() {
        let h = parse("entity_id,date,rating\ne1,2011-01-01,C\ne1,2011-02-01,D\ne1,2011-03-01,D\n").unwrap();
        assert_eq!(h.entities[0].events.len(), 3);
    }

    #[test]
    fn rating_before_is_right_continuous() {
        let h = parse("entity_id,date,rating\ne1,2011-01-01,A\ne1,2011-06-01,B\ne1,2011-09-01,B\n").unwrap();
        let e = &h.entities[0];
        let d = |m, day| NaiveDate::from_ymd_opt(2011, m, day).unwrap();
        assert_eq!(e.rating_before(d(1, 1)), None);
        assert_eq!(e.rating_before(d(3, 1)), Some(0));
        assert_eq!(e.rating_before(d(6, 1)), Some(0));
        assert_eq!(e.rating_before(d(6, 2)), Some(1));
        assert_eq!(e.rating_before(d(9, 1)), Some(1));
        assert_eq!(e.rating_before(d(9, 2)), None);
    }

    const TABLE_ONE: &str = r#"[[0.9395,0.0566,0.0037,2.7804e-04],[0.0092,0.9680,0.0211,0.0017],[6.2064e-04,0.0440,0.8154,0.1400],[0,0,0,1]]"#;

    #[test]
    fn ingests_table_one_matrix() {
        let json = format!(r#"{{"labels":["A","B","C","D"],"times":[1.0],"samples":[[{TABLE_ONE}]]}}"#);
        let s = parse_matrix_series(json.as_bytes()).unwrap();
        let m = &s.samples[0][0];
        for i in 0..4 {
            assert!((m.row(i).sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_row_sum_violation() {
        let json = r#"{"labels":["A","B"],"times":[1.0],"samples":[[[[0.9,0.05],[0,1]]]]}"#;
        assert!(matches!(parse_matrix_series(json.as_bytes()), Err(Error::RowSum { .. })));
    }

    #[test]
    fn rejects_negative_and_shape() {
        let json = r#"{"labels":["A","B"],"times":[1.0],"samples":[[[[1.1,-0.1],[0,1]]]]}"#;
        assert!(matches!(parse_matrix_series(json.as_bytes()), Err(Error::NegativeEntry { .. })));
        let json = r#"{"labels":["A","B","C"],"times":[1.0],"samples":[[[[1,0],[0,1]]]]}"#;
        assert!(matches!(parse_matrix_series(json.as_bytes()), Err(Error::Shape(_))));
        let json = r#"{"labels":["A","B"],"times":[1.0, 0.5],"samples":[]}"#;
        assert!(parse_matrix_series(json.as_bytes()).is_err());
    }

    #[test]
    fn accepts_identity_series() {
        let json = r#"{"labels":["A","B","D"],"times":[0.25,1.0],"samples":[[[[1,0,0],[0,1,0],[0,0,1]],[[1,0,0],[0,1,0],[0,0,1]]]]}"#;
        let s = parse_matrix_series(json.as_bytes()).unwrap();
        assert_eq!(s.samples[0][1], TransitionMatrix::identity(3));
    }

    #[test]
    fn renormalizes_near_stochastic_rows() {
        let json = r#"{"labels":["A","B"],"times":[1.0],"samples":[[[[0.9,0.105],[0,1]]]]}"#;
        let s = parse_matrix_series(json.as_bytes()).unwrap();
        let m = &s.samples[0][0];
        assert!((m[(0, 0)] - 0.9 / 1.005).abs() < 1e-15);
        assert!((m.row(0).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn months_are_twelfths() {
        assert_eq!(months_to_years(12), 1.0);
        assert_eq!(months_to_years(3), 0.25);
    }
}
