//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Complex, DMatrix, DVector};

use crate::scalar::Scalar;

pub type C64 = Complex<f64>;

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// Singular values in descending order (empty for an empty matrix).
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv
}

pub fn numerical_rank(a: &DMatrix<f64>, tol: f64) -> usize {
    singular_values(a).iter().filter(|&&s| s > tol).count()
}

/// Orthonormal basis (columns) of the column space of `a`.
pub fn range_basis(a: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = a.nrows();
    if a.ncols() == 0 || n == 0 {
        return DMatrix::zeros(n, 0);
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.unwrap();
    let cols: Vec<DVector<f64>> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > tol)
        .map(|(i, _)| u.column(i).into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Orthonormal basis (columns) of the null space of `a`.
pub fn null_basis(a: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // pad to a square system so that the full right singular basis is returned
    let rows = a.nrows().max(n);
    let mut padded = DMatrix::zeros(rows, n);
    padded.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.unwrap();
    let cols: Vec<DVector<f64>> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s <= tol)
        .map(|(i, _)| vt.row(i).transpose().into_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Moore–Penrose pseudo-inverse with relative cutoff.
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DMatrix::zeros(a.ncols(), a.nrows());
    }
    let smax = singular_values(a).first().copied().unwrap_or(0.0);
    a.clone()
        .pseudo_inverse(smax * 1e-13)
        .expect("svd-based pseudo-inverse")
}

/// Unit vector spanning the (assumed one-dimensional) null space of a
/// complex square matrix.
pub fn complex_null_vector(a: &DMatrix<C64>) -> DVector<C64> {
    let svd = a.clone().svd(false, true);
    let vt = svd.v_t.unwrap();
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, s)| if *s < acc.1 { (i, *s) } else { acc });
    vt.row(imin).adjoint().into_owned()
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|v| C64::new(v, 0.0))
}

/// Eigenvalues of a real square matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<C64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    m.complex_eigenvalues().iter().copied().collect()
}

/// Derivative of a simple eigenvalue `lambda` of `m` along the direction `dm`.
pub fn eigenvalue_derivative(m: &DMatrix<f64>, lambda: C64, dm: &DMatrix<f64>) -> C64 {
    let n = m.nrows();
    let mc = to_complex(m);
    let shift = DMatrix::<C64>::identity(n, n) * lambda;
    let r = complex_null_vector(&(&mc - &shift));
    let l = complex_null_vector(&(mc.transpose() - shift));
    let dmc = to_complex(dm);
    let num = (l.transpose() * dmc * &r)[(0, 0)];
    let den = (l.transpose() * &r)[(0, 0)];
    num / den
}

/// Solves `A X = B` in place for small dense row-major systems over any
/// scalar (Gaussian elimination, partial pivoting on the real part).
/// `a` is `n × n`, `b` is `n × k`; returns `false` on a zero pivot.
pub fn solve_small<U: Scalar>(a: &mut [U], b: &mut [U], n: usize, k: usize) -> bool {
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].value().abs().total_cmp(&a[j * n + col].value().abs()))
            .unwrap();
        if a[piv * n + col].value() == 0.0 {
            return false;
        }
        if piv != col {
            for j in 0..n {
                a.swap(piv * n + j, col * n + j);
            }
            for j in 0..k {
                b.swap(piv * k + j, col * k + j);
            }
        }
        let d = a[col * n + col];
        for i in col + 1..n {
            let f = a[i * n + col] / d;
            if f.value() == 0.0 && f.is_zero() {
                continue;
            }
            for j in col..n {
                let t = a[col * n + j];
                a[i * n + j] = a[i * n + j] - f * t;
            }
            for j in 0..k {
                let t = b[col * k + j];
                b[i * k + j] = b[i * k + j] - f * t;
            }
        }
    }
    for col in (0..n).rev() {
        let d = a[col * n + col];
        for j in 0..k {
            let mut acc = b[col * k + j];
            for c in col + 1..n {
                acc = acc - a[col * n + c] * b[c * k + j];
            }
            b[col * k + j] = acc / d;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_and_range_are_complementary() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let nb = null_basis(&a, 1e-12);
        assert_eq!(nb.ncols(), 1);
        assert!(max_abs(&(&a * &nb)) < 1e-14);
        assert_eq!(range_basis(&a, 1e-12).ncols(), 2);
    }

    #[test]
    fn eigenvalue_derivative_of_symmetric_matrix() {
        // d/dt eig(diag(1,2) + t E11) at eigenvalue 1 is 1
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let mut e = DMatrix::zeros(2, 2);
        e[(0, 0)] = 1.0;
        let d = eigenvalue_derivative(&m, C64::new(1.0, 0.0), &e);
        assert!((d - C64::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn small_solver_matches_inverse() {
        let mut a = vec![0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0];
        let mut b: Vec<f64> = vec![1.0, 2.0, 3.0];
        assert!(solve_small(&mut a, &mut b, 3, 1));
        let m = DMatrix::from_row_slice(3, 3, &[0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0]);
        let x = m.try_inverse().unwrap() * DVector::from_vec(vec![1.0, 2.0, 3.0]);
        for i in 0..3 {
            assert!((b[i] - x[i]).abs() < 1e-14);
        }
    }
}
