//! Dense symmetric positive-definite helpers (row-major storage).

/// In-place lower Cholesky factor of the `n x n` matrix `a`. Returns `false`
/// when a non-positive pivot appears. Only the lower triangle is read.
pub(crate) fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let row_j = j * n;
        let mut diag = a[row_j + j];
        for k in 0..j {
            diag -= a[row_j + k] * a[row_j + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return false;
        }
        let ljj = diag.sqrt();
        a[row_j + j] = ljj;
        for i in (j + 1)..n {
            let row_i = i * n;
            let mut s = a[row_i + j];
            for k in 0..j {
                s -= a[row_i + k] * a[row_j + k];
            }
            a[row_i + j] = s / ljj;
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            a[i * n + j] = 0.0;
        }
    }
    true
}

/// Solves `L L^T x = b` given the lower factor.
pub(crate) fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        let row = i * n;
        let mut s = y[i];
        for k in 0..i {
            s -= l[row + k] * y[k];
        }
        y[i] = s / l[row + i];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

/// `max_i |(A x - b)_i|` for a full symmetric `a`.
pub(crate) fn residual_inf(a: &[f64], n: usize, x: &[f64], b: &[f64]) -> f64 {
    (0..n)
        .map(|i| {
            let row = &a[i * n..(i + 1) * n];
            let ax: f64 = row.iter().zip(x).map(|(p, q)| p * q).sum();
            (ax - b[i]).abs()
        })
        .fold(0.0, f64::max)
}
