//! Small dense linear-algebra helpers shared by the geometry and certificate code.

use nalgebra::{DMatrix, DVector};

/// Relative threshold below which singular values are treated as zero.
pub const RANK_TOL: f64 = 1e-10;

/// Matrix whose columns are the given vectors.
pub fn columns(vectors: &[&DVector<f64>], rows: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, vectors.len());
    for (j, v) in vectors.iter().enumerate() {
        m.set_column(j, v);
    }
    m
}

/// Numerical rank of `m` using singular values relative to the largest one.
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.singular_values();
    let top = sv.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * top).count()
}

/// Minimum-norm least-squares solution of `m x = b`.
pub fn lstsq(m: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if m.ncols() == 0 {
        return DVector::zeros(0);
    }
    let svd = m.clone().svd(true, true);
    let top = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = (RANK_TOL * top).max(f64::MIN_POSITIVE);
    svd.solve(b, eps)
        .unwrap_or_else(|_| DVector::zeros(m.ncols()))
}

/// Result of a nonnegative least-squares solve.
#[derive(Debug, Clone)]
pub struct Nnls {
    pub x: DVector<f64>,
    pub residual: f64,
}

/// Lawson-Hanson active-set NNLS: minimize ‖A x − b‖ subject to x ≥ 0.
///
/// Columns of `a` are the generators. Ties in the entering index are broken
/// towards the lowest index so the result is deterministic.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Nnls {
    let q = a.ncols();
    let mut x = DVector::zeros(q);
    if q == 0 {
        return Nnls {
            x,
            residual: b.norm(),
        };
    }
    let scale = 1.0 + a.norm() * b.norm();
    let tol = 1e-13 * scale;
    let mut passive = vec![false; q];
    let max_outer = 3 * q + 10;

    for _ in 0..max_outer {
        let w = a.transpose() * (b - a * &x);
        let mut enter = None;
        let mut best = tol;
        for j in 0..q {
            if !passive[j] && w[j] > best {
                best = w[j];
                enter = Some(j);
            }
        }
        let Some(j) = enter else { break };
        passive[j] = true;

        let mut inner = 0;
        loop {
            inner += 1;
            let idx: Vec<usize> = (0..q).filter(|&i| passive[i]).collect();
            let sub = a.select_columns(&idx);
            let sol = lstsq(&sub, b);
            let mut z = DVector::zeros(q);
            for (k, &i) in idx.iter().enumerate() {
                z[i] = sol[k];
            }
            if idx.iter().all(|&i| z[i] > 0.0) || inner > 3 * q + 10 {
                x = z;
                break;
            }
            let mut alpha = f64::INFINITY;
            for &i in &idx {
                if z[i] <= 0.0 {
                    let step = x[i] / (x[i] - z[i]);
                    if step < alpha {
                        alpha = step;
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            x += (z - &x) * alpha;
            for &i in &idx {
                if x[i] <= 1e-15 * scale {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let residual = (a * &x - b).norm();
    Nnls { x, residual }
}
