//! Rating-matrix properties and percentage tables over ensembles.
//!
//! * sDD: strongly diagonal dominant, `R_ii >= Σ_{j≠i} R_ij` for every row.
//! * dML: downgrading more likely, upper triangle sum >= lower triangle sum.
//! * mDC: monotone default column, `R_1K <= R_2K <= ... <= R_KK`.
//! * iRS: increasing rating spread, diagonals non-increasing between
//!   consecutive observation times (the first time is compared against the
//!   identity).
//!
//! All inequalities are non-strict. A sample satisfies a row-wise property
//! only if every row does.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::lie::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MatrixFlags {
    pub sdd: bool,
    pub dml: bool,
    pub mdc: bool,
}

pub fn check_matrix(r: &Matrix) -> MatrixFlags {
    let k = r.nrows();
    let sdd = (0..k).all(|i| {
        let off: f64 = (0..k).filter(|&j| j != i).map(|j| r[(i, j)]).sum();
        r[(i, i)] >= off
    });
    let mut upper = 0.0;
    let mut lower = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i < j {
                upper += r[(i, j)];
            } else if i > j {
                lower += r[(i, j)];
            }
        }
    }
    let mdc = (1..k).all(|i| r[(i - 1, k - 1)] <= r[(i, k - 1)]);
    MatrixFlags {
        sdd,
        dml: upper >= lower,
        mdc,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StepFlags {
    pub matrix: MatrixFlags,
    pub irs: bool,
}

/// Flags for every time of one sample.
pub fn check_series<'a, I>(sample: I) -> Vec<StepFlags>
where
    I: IntoIterator<Item = &'a Matrix>,
{
    let mut prev: Option<&Matrix> = None;
    sample
        .into_iter()
        .map(|r| {
            let k = r.nrows();
            let irs = (0..k).all(|i| {
                let before = prev.map_or(1.0, |p| p[(i, i)]);
                before >= r[(i, i)]
            });
            prev = Some(r);
            StepFlags {
                matrix: check_matrix(r),
                irs,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyRow {
    pub time: f64,
    pub sdd: f64,
    pub dml: f64,
    pub mdc: f64,
    pub irs: f64,
    /// Average sum of the non-absorbing rows.
    pub avg_row_sum: f64,
}

impl PropertyRow {
    pub fn months(&self) -> f64 {
        self.time * 12.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyReport {
    pub samples: usize,
    pub rows: Vec<PropertyRow>,
}

/// Percentages of samples satisfying each property at each time.
pub fn report<S, M>(samples: &[S], times: &[f64]) -> PropertyReport
where
    S: AsRef<[M]>,
    M: AsRef<Matrix>,
{
    let n = samples.len();
    let mut counts = vec![[0usize; 4]; times.len()];
    let mut row_sums = vec![0.0; times.len()];
    for s in samples {
        let flags = check_series(s.as_ref().iter().map(AsRef::as_ref));
        for (t, f) in flags.iter().enumerate() {
            let c = &mut counts[t];
            c[0] += f.matrix.sdd as usize;
            c[1] += f.matrix.dml as usize;
            c[2] += f.matrix.mdc as usize;
            c[3] += f.irs as usize;
        }
        for (t, m) in s.as_ref().iter().enumerate() {
            let m = m.as_ref();
            let k = m.nrows();
            row_sums[t] += (0..k - 1).map(|i| m.row(i).sum()).sum::<f64>() / (k - 1) as f64;
        }
    }
    let pct = |c: usize| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 };
    let rows = times
        .iter()
        .zip(counts.iter().zip(&row_sums))
        .map(|(&time, (c, &rs))| PropertyRow {
            time,
            sdd: pct(c[0]),
            dml: pct(c[1]),
            mdc: pct(c[2]),
            irs: pct(c[3]),
            avg_row_sum: if n == 0 { 0.0 } else { rs / n as f64 },
        })
        .collect();
    PropertyReport { samples: n, rows }
}

impl PropertyReport {
    /// Aligned text table with one line per time in months.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>8} {:>9} {:>9} {:>9} {:>9} {:>10}",
            "months", "sDD %", "dML %", "mDC %", "iRS %", "row sums"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>8} {:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>10.4}",
                format_months(r.months()),
                r.sdd,
                r.dml,
                r.mdc,
                r.irs,
                r.avg_row_sum
            );
        }
        s
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["months", "sdd", "dml", "mdc", "irs", "avg_row_sum"])
            .map_err(std::io::Error::other)?;
        for r in &self.rows {
            w.write_record([
                format_months(r.months()),
                r.sdd.to_string(),
                r.dml.to_string(),
                r.mdc.to_string(),
                r.irs.to_string(),
                r.avg_row_sum.to_string(),
            ])
            .map_err(std::io::Error::other)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn format_months(m: f64) -> String {
    if (m - m.round()).abs() < 1e-9 {
        format!("{}", m.round() as i64)
    } else {
        format!("{m:.3}")
    }
}
