//! Small dense linear-algebra helpers shared by the solvers: SPD solves with
//! a ridge fallback, rank-revealing column pruning, and sample moments.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot threshold for rank-revealing pruning.
pub const PRUNE_TOL: f64 = 1e-10;
/// Ridge added to a singular Gram matrix before giving up.
pub const RIDGE: f64 = 1e-8;

/// Solve the normal equations `(X'WX) b = X'Wz` for weighted least squares.
/// Tries a Cholesky factorization first; on failure retries once with a
/// scaled ridge on the diagonal. Returns the solution and whether the ridge
/// was used.
pub fn solve_gram(gram: &DMatrix<f64>, rhs: &DVector<f64>, context: &str) -> Result<(DVector<f64>, bool)> {
    if let Some(chol) = gram.clone().cholesky() {
        return Ok((chol.solve(rhs), false));
    }
    let p = gram.nrows();
    let scale = gram.diagonal().iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1.0);
    let mut ridged = gram.clone();
    for i in 0..p {
        ridged[(i, i)] += RIDGE * scale;
    }
    match ridged.cholesky() {
        Some(chol) => Ok((chol.solve(rhs), true)),
        None => Err(Error::SingularDesign { context: context.to_string() }),
    }
}

/// Ordinary least squares of `y` on the columns of `x` (no implicit intercept;
/// include a ones column if wanted). Ridge fallback as in [`solve_gram`].
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let gram = x.transpose() * x;
    let rhs = x.transpose() * y;
    Ok(solve_gram(&gram, &rhs, context)?.0)
}

/// Rank-revealing selection of regressor columns.
///
/// Columns are centered, then a column-pivoted QR keeps columns whose pivot
/// magnitude is at least `PRUNE_TOL` times the largest pivot. Centering makes
/// columns collinear with the intercept (constants) prunable too. Returns the
/// kept column indices in their original order.
pub fn prune_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let n = x.nrows();
    let q = x.ncols();
    if q == 0 || n == 0 {
        return Vec::new();
    }
    let mut centered = x.clone();
    for j in 0..q {
        let mean = centered.column(j).sum() / n as f64;
        for i in 0..n {
            centered[(i, j)] -= mean;
        }
    }
    let qr = centered.col_piv_qr();
    let r = qr.r();
    let perm = qr.p();
    let rank_dim = r.nrows().min(r.ncols());
    let mut max_pivot = 0.0f64;
    for i in 0..rank_dim {
        max_pivot = max_pivot.max(r[(i, i)].abs());
    }
    if max_pivot <= 0.0 {
        return Vec::new();
    }
    // permutation maps original column perm_indices[i] to position i
    let mut keep = vec![false; q];
    let inv = permutation_order(perm, q);
    for (pos, &orig) in inv.iter().enumerate() {
        if pos < rank_dim && r[(pos, pos)].abs() >= PRUNE_TOL * max_pivot {
            keep[orig] = true;
        }
    }
    (0..q).filter(|&j| keep[j]).collect()
}

fn permutation_order(perm: &nalgebra::PermutationSequence<nalgebra::Dyn>, q: usize) -> Vec<usize> {
    // apply the recorded sequence to the identity ordering to learn which
    // original column lands in each pivot position
    let mut cols = DMatrix::<f64>::zeros(1, q);
    for j in 0..q {
        cols[(0, j)] = j as f64;
    }
    perm.permute_columns(&mut cols);
    (0..q).map(|j| cols[(0, j)] as usize).collect()
}

/// Select the listed columns of `x` into a new matrix.
pub fn select_columns(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    let n = x.nrows();
    let mut out = DMatrix::zeros(n, cols.len());
    for (jj, &j) in cols.iter().enumerate() {
        out.set_column(jj, &x.column(j));
    }
    out
}

/// Mean of a slice.
pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with n-1 denominator; 0 for fewer than two points.
pub fn sample_var(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Sample covariance with n-1 denominator; 0 for fewer than two points.
pub fn sample_cov(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    debug_assert_eq!(n, b.len());
    if n < 2 {
        return 0.0;
    }
    let ma = mean(a);
    let mb = mean(b);
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1) as f64
}
