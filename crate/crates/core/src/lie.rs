//! The cone of rating generators, its coordinates and the exponential map
//! into stochastic matrices with an absorbing last state.
//!
//! A generator of dimension `K` has `(K-1)^2` free coordinates, one per
//! basis matrix `E_ij - E_ii` with `i < K-1` (0-based) and `j != i`. The last
//! row is identically zero so that every exponential keeps the last state
//! absorbing.

use std::fmt;
use std::ops::Deref;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Row-sum tolerance accepted for a [`TransitionMatrix`].
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Negative entries of an exponential above this threshold are rounding
/// noise and get clamped to zero; anything below is a bug.
pub const CLAMP_TOL: f64 = 1e-12;

/// Default truncation order of [`dexp_inv`].
pub const DEFAULT_DEXP_ORDER: usize = 12;

/// Number of free coordinates for a rating scale with `dim` states.
pub fn coord_count(dim: usize) -> usize {
    (dim - 1) * (dim - 1)
}

/// Position of the basis matrix `E_ij - E_ii` in the flat coordinate vector.
///
/// All indices are 0-based; `flat` runs row-major over `(from, to)` with the
/// diagonal skipped, so for `K = 4` the order is 1-2, 1-3, 1-4, 2-1, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BasisIndex {
    pub flat: usize,
    pub from: usize,
    pub to: usize,
}

impl BasisIndex {
    pub fn new(dim: usize, from: usize, to: usize) -> Result<Self> {
        if dim < 2 || from + 1 >= dim || to >= dim || from == to {
            return Err(Error::IndexOutOfRange(format!(
                "basis ({from},{to}) for dimension {dim}"
            )));
        }
        let col = if to < from { to } else { to - 1 };
        Ok(Self {
            flat: from * (dim - 1) + col,
            from,
            to,
        })
    }

    pub fn from_flat(dim: usize, flat: usize) -> Result<Self> {
        if dim < 2 || flat >= coord_count(dim) {
            return Err(Error::IndexOutOfRange(format!(
                "flat index {flat} for dimension {dim}"
            )));
        }
        let from = flat / (dim - 1);
        let r = flat % (dim - 1);
        let to = if r < from { r } else { r + 1 };
        Ok(Self { flat, from, to })
    }

    /// Iterates over all basis indices in flat order.
    pub fn all(dim: usize) -> impl Iterator<Item = BasisIndex> {
        (0..coord_count(dim)).map(move |f| Self::from_flat(dim, f).expect("flat index in range"))
    }

    /// 1-based "from-to" label, e.g. `1-2`.
    pub fn label(&self) -> String {
        format!("{}-{}", self.from + 1, self.to + 1)
    }
}

impl fmt::Display for BasisIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.from + 1, self.to + 1)
    }
}

/// An element of the generator cone, stored by its non-negative coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorElement {
    dim: usize,
    coords: Vec<f64>,
}

impl GeneratorElement {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidScale(format!("dimension {dim} < 2")));
        }
        if coords.len() != coord_count(dim) {
            return Err(Error::Shape(format!(
                "expected {} coordinates for dimension {dim}, got {}",
                coord_count(dim),
                coords.len()
            )));
        }
        if let Some(c) = coords.iter().find(|c| !c.is_finite() || **c < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "generator coordinate {c} is not a finite non-negative number"
            )));
        }
        Ok(Self { dim, coords })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            coords: vec![0.0; coord_count(dim)],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// `Σ coords_i · (E_ij - E_ii)`.
    pub fn realize(&self) -> Matrix {
        let mut m = Matrix::zeros(self.dim, self.dim);
        realize_into(self.dim, &self.coords, &mut m);
        m
    }

    /// Non-negative linear combination `alpha·self + beta·other`.
    pub fn combine(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::Shape("generator dimensions differ".into()));
        }
        let coords = self
            .coords
            .iter()
            .zip(&other.coords)
            .map(|(x, y)| alpha * x + beta * y)
            .collect();
        Self::new(self.dim, coords)
    }

    pub fn exp(&self) -> TransitionMatrix {
        let mut ws = ExpWorkspace::new(self.dim);
        let mut out = Matrix::zeros(self.dim, self.dim);
        ws.exp_coords_into(&self.coords, &mut out);
        TransitionMatrix(out)
    }
}

/// Writes the realized generator for `coords` into `out` (overwriting it).
pub fn realize_into(dim: usize, coords: &[f64], out: &mut Matrix) {
    debug_assert_eq!(coords.len(), coord_count(dim));
    out.fill(0.0);
    for (flat, &c) in coords.iter().enumerate() {
        let from = flat / (dim - 1);
        let r = flat % (dim - 1);
        let to = if r < from { r } else { r + 1 };
        out[(from, to)] += c;
        out[(from, from)] -= c;
    }
}

/// A row-stochastic matrix whose last row is the last unit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix(Matrix);

impl TransitionMatrix {
    pub fn identity(dim: usize) -> Self {
        Self(Matrix::identity(dim, dim))
    }

    /// Validates the invariants: square, entries in `[0, 1]`, rows summing to
    /// one within [`ROW_SUM_TOL`], last row exactly the last unit vector.
    pub fn new(m: Matrix) -> Result<Self> {
        check_stochastic(&m)?;
        Ok(Self(m))
    }

    /// Wraps a matrix known to satisfy the invariants by construction.
    pub(crate) fn from_trusted(m: Matrix) -> Self {
        debug_assert!(check_stochastic(&m).is_ok(), "{m}");
        Self(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("matrix is not square".into()));
        }
        Self::new(Matrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.0.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    /// Composition `self · other`, again a transition matrix.
    pub fn compose(&self, other: &Self) -> Self {
        let mut m = &self.0 * &other.0;
        normalize_rows(&mut m);
        Self(m)
    }
}

impl Deref for TransitionMatrix {
    type Target = Matrix;
    fn deref(&self) -> &Matrix {
        &self.0
    }
}

impl AsRef<Matrix> for TransitionMatrix {
    fn as_ref(&self) -> &Matrix {
        &self.0
    }
}

fn check_stochastic(m: &Matrix) -> Result<()> {
    let n = m.nrows();
    if n < 2 || m.ncols() != n {
        return Err(Error::Shape(format!(
            "transition matrix must be square with K >= 2, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..n {
            let v = m[(i, j)];
            if !(0.0..=1.0 + ROW_SUM_TOL).contains(&v) {
                return Err(Error::Invariant(format!("entry ({i},{j}) = {v} outside [0,1]")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Invariant(format!("row {i} sums to {sum}")));
        }
    }
    for j in 0..n {
        let expected = if j + 1 == n { 1.0 } else { 0.0 };
        if m[(n - 1, j)] != expected {
            return Err(Error::Invariant("last row is not absorbing".into()));
        }
    }
    Ok(())
}

/// Divides every row by its sum.
pub(crate) fn normalize_rows(m: &mut Matrix) {
    for mut row in m.row_iter_mut() {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row /= s;
        }
    }
}

/// Scratch buffers for repeated exponentials of the same dimension.
///
/// The exponential is computed by uniformization: with `q = max |L_ii|` the
/// shifted matrix `B = L/2^s + (q/2^s) I` is entrywise non-negative, so
/// `exp(L/2^s) = e^{-q/2^s} Σ B^k/k!` is a sum of non-negative terms. The
/// scaling `s` keeps `q/2^s <= 0.5`, after which the result is squared `s`
/// times. Non-negativity therefore holds exactly in floating point.
#[derive(Debug, Clone)]
pub struct ExpWorkspace {
    dim: usize,
    shifted: Matrix,
    term: Matrix,
    tmp: Matrix,
}

impl ExpWorkspace {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            shifted: Matrix::zeros(dim, dim),
            term: Matrix::zeros(dim, dim),
            tmp: Matrix::zeros(dim, dim),
        }
    }

    /// `out = exp(realize(coords))`, with clamping, renormalization and an
    /// exactly absorbing last row.
    pub fn exp_coords_into(&mut self, coords: &[f64], out: &mut Matrix) {
        realize_into(self.dim, coords, &mut self.shifted);
        self.exp_realized_into(out);
    }

    /// Exponential of the generator currently held in `self.shifted`.
    fn exp_realized_into(&mut self, out: &mut Matrix) {
        let n = self.dim;
        let q = (0..n).map(|i| -self.shifted[(i, i)]).fold(0.0_f64, f64::max);
        assert!(q.is_finite(), "non-finite generator");
        let mut squarings = 0u32;
        let mut scale = 1.0;
        while q * scale > 0.5 {
            scale *= 0.5;
            squarings += 1;
        }
        let shift = q * scale;
        self.shifted.scale_mut(scale);
        for i in 0..n {
            self.shifted[(i, i)] += shift;
        }

        // Σ_k B^k / k!, all terms non-negative; row sums of B^k/k! equal
        // shift^k/k!, which bounds the remaining tail.
        out.fill_with_identity();
        self.term.fill_with_identity();
        let mut k = 1.0;
        let mut term_mass = 1.0;
        while term_mass > 1e-18 {
            self.tmp.gemm(1.0 / k, &self.term, &self.shifted, 0.0);
            std::mem::swap(&mut self.term, &mut self.tmp);
            *out += &self.term;
            term_mass *= shift / k;
            k += 1.0;
            if k > 60.0 {
                break;
            }
        }
        out.scale_mut((-shift).exp());
        for _ in 0..squarings {
            self.tmp.gemm(1.0, out, out, 0.0);
            std::mem::swap(out, &mut self.tmp);
        }
        finish_stochastic(out);
    }
}

/// Clamps rounding-level negatives, renormalizes rows and pins the last row.
fn finish_stochastic(m: &mut Matrix) {
    let n = m.nrows();
    for v in m.iter_mut() {
        if *v < 0.0 {
            assert!(*v > -CLAMP_TOL, "exponential produced entry {v}");
            *v = 0.0;
        }
    }
    normalize_rows(m);
    for j in 0..n {
        m[(n - 1, j)] = if j + 1 == n { 1.0 } else { 0.0 };
    }
}

/// Adjoint action `ad_L(H) = LH - HL`.
pub fn ad(l: &Matrix, h: &Matrix) -> Matrix {
    l * h - h * l
}

/// Truncated series `Σ_{k=0}^{order} ad_{-L}^k(H) / (k+1)!`.
pub fn dexp_inv(l: &Matrix, h: &Matrix, order: usize) -> Matrix {
    let neg_l = -l;
    let mut power = h.clone();
    let mut acc = h.clone();
    let mut factorial = 1.0;
    for k in 1..=order {
        power = ad(&neg_l, &power);
        factorial *= (k + 1) as f64;
        acc += &power / factorial;
    }
    acc
}
