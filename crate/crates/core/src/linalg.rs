//! Small dense kernels: cyclic Jacobi for symmetric matrices, one-sided
//! Jacobi singular values, Householder least squares and Cholesky solves.
//!
//! Sizes here are tiny (3x3 tensors, 6-column design matrices), so
//! everything works on fixed-size arrays or short vectors.

use crate::scalar::Real;

/// Result of a symmetric Jacobi run. Eigenvalues are in the order the
/// rotations leave them (unsorted); `vectors[r][c]` holds component `r` of
/// eigenvector `c`.
#[derive(Debug, Clone, Copy)]
pub struct SymmetricEigen<T, const N: usize> {
    pub values: [T; N],
    pub vectors: [[T; N]; N],
    pub sweeps: usize,
}

fn frobenius<T: Real, const N: usize>(a: &[[T; N]; N]) -> T {
    a.iter().flatten().map(|&x| x * x).sum::<T>().sqrt()
}

fn off_diagonal<T: Real, const N: usize>(a: &[[T; N]; N]) -> T {
    let mut acc = T::zero();
    for (p, row) in a.iter().enumerate() {
        for (q, &x) in row.iter().enumerate() {
            if p != q {
                acc = acc + x * x;
            }
        }
    }
    acc.sqrt()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Stops once the off-diagonal Frobenius norm drops below
/// `rel_tol * ||A||_F` (never below a few ulps of the scalar type) or after
/// `max_sweeps` full sweeps.
pub fn jacobi_symmetric<T: Real, const N: usize>(
    mut a: [[T; N]; N],
    rel_tol: T,
    max_sweeps: usize,
) -> SymmetricEigen<T, N> {
    let mut v = [[T::zero(); N]; N];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = T::one();
    }
    let scale = frobenius(&a);
    let floor = T::epsilon() * T::lit(4.0);
    let tol = if rel_tol > floor { rel_tol } else { floor } * scale;

    let mut sweeps = 0;
    while sweeps < max_sweeps && scale > T::zero() && off_diagonal(&a) > tol {
        sweeps += 1;
        for p in 0..N {
            for q in (p + 1)..N {
                let apq = a[p][q];
                if apq == T::zero() {
                    continue;
                }
                let tau = (a[q][q] - a[p][p]) / (T::lit(2.0) * apq);
                let t = if tau >= T::zero() {
                    T::one() / (tau + (T::one() + tau * tau).sqrt())
                } else {
                    -T::one() / (-tau + (T::one() + tau * tau).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (akp, akq) = (row[p], row[q]);
                    row[p] = c * akp - s * akq;
                    row[q] = s * akp + c * akq;
                }
                for k in 0..N {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                a[p][q] = T::zero();
                a[q][p] = T::zero();
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut values = [T::zero(); N];
    for (i, val) in values.iter_mut().enumerate() {
        *val = a[i][i];
    }
    SymmetricEigen {
        values,
        vectors: v,
        sweeps,
    }
}

/// Singular values (descending) of an `m x N` matrix given by rows, using
/// one-sided Jacobi rotations. Accurate for tiny singular values, unlike
/// eigenvalues of the normal matrix.
pub fn singular_values<T: Real, const N: usize>(rows: &[[T; N]]) -> [T; N] {
    let m = rows.len();
    // column-major copy
    let mut cols: Vec<Vec<T>> = (0..N).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
    let eps = T::epsilon();
    for _ in 0..60 {
        let mut rotated = false;
        for p in 0..N {
            for q in (p + 1)..N {
                let mut alpha = T::zero();
                let mut beta = T::zero();
                let mut gamma = T::zero();
                for i in 0..m {
                    alpha = alpha + cols[p][i] * cols[p][i];
                    beta = beta + cols[q][i] * cols[q][i];
                    gamma = gamma + cols[p][i] * cols[q][i];
                }
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = if zeta >= T::zero() {
                    T::one() / (zeta + (T::one() + zeta * zeta).sqrt())
                } else {
                    -T::one() / (-zeta + (T::one() + zeta * zeta).sqrt())
                };
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                for i in 0..m {
                    let (up, uq) = (cols[p][i], cols[q][i]);
                    cols[p][i] = c * up - s * uq;
                    cols[q][i] = s * up + c * uq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv = [T::zero(); N];
    for (j, s) in sv.iter_mut().enumerate() {
        *s = cols[j].iter().map(|&x| x * x).sum::<T>().sqrt();
    }
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    sv
}

/// Least-squares solution of `rows * x ~= rhs` via Householder QR.
///
/// Returns `None` when a diagonal entry of R vanishes. Rank must be checked
/// by the caller beforehand for a meaningful error.
pub fn lstsq_qr<T: Real, const N: usize>(rows: &[[T; N]], rhs: &[T]) -> Option<[T; N]> {
    let m = rows.len();
    if m < N || rhs.len() != m {
        return None;
    }
    let mut a: Vec<[T; N]> = rows.to_vec();
    let mut b: Vec<T> = rhs.to_vec();
    for k in 0..N {
        let norm = (k..m).map(|i| a[i][k] * a[i][k]).sum::<T>().sqrt();
        if norm == T::zero() {
            return None;
        }
        let alpha = if a[k][k] > T::zero() { -norm } else { norm };
        // v = x - alpha e1, stored in place of column k
        let mut v: Vec<T> = (k..m).map(|i| a[i][k]).collect();
        v[0] = v[0] - alpha;
        let vnorm2 = v.iter().map(|&x| x * x).sum::<T>();
        if vnorm2 > T::zero() {
            for j in k..N {
                let dot = (k..m).map(|i| v[i - k] * a[i][j]).sum::<T>();
                let f = T::lit(2.0) * dot / vnorm2;
                for i in k..m {
                    a[i][j] = a[i][j] - f * v[i - k];
                }
            }
            let dot = (k..m).map(|i| v[i - k] * b[i]).sum::<T>();
            let f = T::lit(2.0) * dot / vnorm2;
            for i in k..m {
                b[i] = b[i] - f * v[i - k];
            }
        }
    }
    let mut x = [T::zero(); N];
    for k in (0..N).rev() {
        let mut acc = b[k];
        for j in (k + 1)..N {
            acc = acc - a[k][j] * x[j];
        }
        if a[k][k] == T::zero() {
            return None;
        }
        x[k] = acc / a[k][k];
    }
    Some(x)
}

/// Solves `A x = b` for symmetric positive definite `A`. `None` if the
/// factorization breaks down.
pub fn cholesky_solve<T: Real, const N: usize>(a: &[[T; N]; N], b: &[T; N]) -> Option<[T; N]> {
    let mut l = [[T::zero(); N]; N];
    for i in 0..N {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum = sum - l[i][k] * l[j][k];
            }
            if i == j {
                if !(sum > T::zero()) {
                    return None;
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    let mut y = [T::zero(); N];
    for i in 0..N {
        let mut sum = b[i];
        for k in 0..i {
            sum = sum - l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = [T::zero(); N];
    for i in (0..N).rev() {
        let mut sum = y[i];
        for k in (i + 1)..N {
            sum = sum - l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    Some(x)
}
