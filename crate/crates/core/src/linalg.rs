//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{LiaoError, Result};

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Sum of absolute entries.
pub fn entry_sum(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

/// Largest absolute entry strictly below the diagonal.
pub fn below_diagonal_max(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..m.ncols() {
        for i in (j + 1)..m.nrows() {
            worst = worst.max(m[(i, j)].abs());
        }
    }
    worst
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Thin QR by twice-iterated modified Gram-Schmidt with a strictly positive
/// diagonal in `R`. Fails if a column is (numerically) dependent on the earlier ones.
pub fn gram_schmidt(a: &DMatrix<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, k) = a.shape();
    let mut q = a.clone();
    let mut r = DMatrix::zeros(k, k);
    for j in 0..k {
        let scale = a.column(j).norm();
        for _pass in 0..2 {
            for i in 0..j {
                let proj = q.column(i).dot(&q.column(j));
                r[(i, j)] += proj;
                let qi = q.column(i).clone_owned();
                q.column_mut(j).axpy(-proj, &qi, 1.0);
            }
        }
        let norm = q.column(j).norm();
        if !(norm > 1e-300) || norm <= 1e-14 * scale {
            return None;
        }
        r[(j, j)] = norm;
        q.column_mut(j).scale_mut(1.0 / norm);
    }
    debug_assert_eq!(q.nrows(), n);
    Some((q, r))
}

/// Principal square root of an upper-triangular matrix with positive diagonal.
pub fn triangular_sqrt(t: &DMatrix<f64>) -> DMatrix<f64> {
    let n = t.nrows();
    let mut u = DMatrix::zeros(n, n);
    for i in 0..n {
        u[(i, i)] = t[(i, i)].sqrt();
    }
    for d in 1..n {
        for i in 0..(n - d) {
            let j = i + d;
            let mut s = t[(i, j)];
            for k in (i + 1)..j {
                s -= u[(i, k)] * u[(k, j)];
            }
            u[(i, j)] = s / (u[(i, i)] + u[(j, j)]);
        }
    }
    u
}

/// Logarithm of an upper-triangular matrix with positive diagonal by inverse
/// scaling and squaring: square roots until within 1/2 of the identity, then
/// the Mercator series. The diagonal is returned as exact scalar logarithms.
pub fn triangular_log(t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = t.nrows();
    if (0..n).any(|i| !(t[(i, i)] > 0.0)) {
        return Err(LiaoError::Inconsistent(
            "triangular factor with non-positive diagonal".into(),
        ));
    }
    let id = DMatrix::<f64>::identity(n, n);
    let mut m = t.clone();
    let mut squarings = 0;
    while (&m - &id).norm() >= 0.5 {
        m = triangular_sqrt(&m);
        squarings += 1;
        if squarings > 60 {
            return Err(LiaoError::Inconsistent("matrix logarithm failed to converge".into()));
        }
    }
    let x = &m - &id;
    let mut power = x.clone();
    let mut out = x.clone();
    for k in 2..200 {
        power = &power * &x;
        let term = &power / k as f64;
        if k % 2 == 0 {
            out -= &term;
        } else {
            out += &term;
        }
        if term.norm() < 1e-18 * (1.0 + out.norm()) {
            break;
        }
    }
    out *= 2f64.powi(squarings);
    for i in 0..n {
        out[(i, i)] = t[(i, i)].ln();
        for j in 0..i {
            out[(i, j)] = 0.0;
        }
    }
    Ok(out)
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
