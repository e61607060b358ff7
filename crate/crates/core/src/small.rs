//! Fixed-size kernels for the per-step work of the gEM scheme. They mirror
//! [`crate::lie::ExpWorkspace`] on stack arrays so the compiler can unroll
//! the small products.

use crate::lie::{Matrix, CLAMP_TOL};

/// Row-major `N x N` matrix.
pub(crate) type Square<const N: usize> = [[f64; N]; N];

pub(crate) fn identity<const N: usize>() -> Square<N> {
    let mut m = [[0.0; N]; N];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

/// `out = alpha · a · b`.
#[inline(always)]
pub(crate) fn mul_into<const N: usize>(alpha: f64, a: &Square<N>, b: &Square<N>, out: &mut Square<N>) {
    for i in 0..N {
        let mut row = [0.0; N];
        for k in 0..N {
            let aik = a[i][k];
            for j in 0..N {
                row[j] += aik * b[k][j];
            }
        }
        for j in 0..N {
            out[i][j] = alpha * row[j];
        }
    }
}

/// Exponential of the generator with coordinates `coords`, by the same
/// uniformized series with scaling and squaring as the dynamic version.
pub(crate) fn exp_coords<const N: usize>(coords: &[f64], out: &mut Square<N>) {
    debug_assert_eq!(coords.len(), (N - 1) * (N - 1));
    let mut b = [[0.0; N]; N];
    for (flat, &c) in coords.iter().enumerate() {
        let from = flat / (N - 1);
        let r = flat % (N - 1);
        let to = if r < from { r } else { r + 1 };
        b[from][to] += c;
        b[from][from] -= c;
    }
    let q = (0..N).map(|i| -b[i][i]).fold(0.0_f64, f64::max);
    assert!(q.is_finite(), "non-finite generator");
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while q * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let shift = q * scale;
    for (i, row) in b.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v *= scale;
        }
        row[i] += shift;
    }

    *out = identity();
    let mut term = identity::<N>();
    let mut next = [[0.0; N]; N];
    let mut k = 1.0;
    let mut term_mass = 1.0;
    while term_mass > 1e-18 {
        mul_into(1.0 / k, &term, &b, &mut next);
        term = next;
        for i in 0..N {
            for j in 0..N {
                out[i][j] += term[i][j];
            }
        }
        term_mass *= shift / k;
        k += 1.0;
        if k > 60.0 {
            break;
        }
    }
    let damp = (-shift).exp();
    for row in out.iter_mut() {
        for v in row.iter_mut() {
            *v *= damp;
        }
    }
    for _ in 0..squarings {
        let cur = *out;
        mul_into(1.0, &cur, &cur, out);
    }
    finish_stochastic(out);
}

/// Clamps rounding-level negatives, renormalizes rows and pins the last row.
pub(crate) fn finish_stochastic<const N: usize>(m: &mut Square<N>) {
    for row in m.iter_mut() {
        let mut s = 0.0;
        for v in row.iter_mut() {
            if *v < 0.0 {
                assert!(*v > -CLAMP_TOL, "exponential produced entry {v}");
                *v = 0.0;
            }
            s += *v;
        }
        if s > 0.0 {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
    }
    m[N - 1] = [0.0; N];
    m[N - 1][N - 1] = 1.0;
}

pub(crate) fn to_matrix<const N: usize>(m: &Square<N>) -> Matrix {
    Matrix::from_fn(N, N, |i, j| m[i][j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::ExpWorkspace;

    fn check<const N: usize>(scale: f64) {
        let coords: Vec<f64> = (0..(N - 1) * (N - 1)).map(|i| scale * (1.0 + (i * 7 % 5) as f64)).collect();
        let mut fixed = [[0.0; N]; N];
        exp_coords::<N>(&coords, &mut fixed);
        let mut dynamic = Matrix::zeros(N, N);
        ExpWorkspace::new(N).exp_coords_into(&coords, &mut dynamic);
        let diff = (to_matrix(&fixed) - dynamic).abs().max();
        assert!(diff < 1e-14, "N={N} scale={scale} diff={diff}");
    }

    #[test]
    fn matches_dynamic_exponential() {
        for s in [0.0, 1e-4, 0.05, 0.7, 3.0] {
            check::<2>(s);
            check::<3>(s);
            check::<4>(s);
            check::<6>(s);
            check::<8>(s);
        }
    }

    #[test]
    fn product_matches_nalgebra() {
        let a: Square<3> = [[0.5, 0.25, 0.25], [0.1, 0.8, 0.1], [0.0, 0.0, 1.0]];
        let mut out = [[0.0; 3]; 3];
        mul_into(2.0, &a, &a, &mut out);
        let m = to_matrix(&a);
        let expected = (&m * &m) * 2.0;
        assert!((to_matrix(&out) - expected).abs().max() < 1e-15);
    }
}
