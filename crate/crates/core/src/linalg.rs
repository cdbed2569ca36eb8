//! Small dense linear-algebra helpers shared by the kernels.

use nalgebra::{Complex, SymmetricEigen};

use crate::{Matrix, Vector};

/// Largest eigenvalue of the symmetric part of `m`.
pub fn sym_max_eigenvalue(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    let s = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(s)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn sym_min_eigenvalue(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let s = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(s)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Eigenvalues of a general real square matrix.
pub fn eigenvalues(a: &Matrix) -> Vec<Complex<f64>> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    a.clone().complex_eigenvalues().iter().copied().collect()
}

/// Largest real part over the spectrum of `a`.
pub fn spectral_abscissa(a: &Matrix) -> f64 {
    eigenvalues(a).iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_symmetric(m: &Matrix, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = 1.0 + m.amax();
    (m - m.transpose()).amax() <= tol * scale
}

/// Cholesky factor `L` (lower) of a symmetric PSD matrix with a relative pivot
/// threshold. Returns `None` when a pivot falls below `rel_tol * max(diag)`.
pub fn cholesky_thresholded(g: &Matrix, rel_tol: f64) -> Option<Matrix> {
    let k = g.nrows();
    let scale = (0..k).map(|i| g[(i, i)].abs()).fold(0.0, f64::max);
    if k == 0 {
        return Some(Matrix::zeros(0, 0));
    }
    let thresh = rel_tol * scale.max(f64::MIN_POSITIVE);
    let mut l = Matrix::zeros(k, k);
    for j in 0..k {
        let mut d = g[(j, j)];
        for p in 0..j {
            d -= l[(j, p)] * l[(j, p)];
        }
        if d <= thresh {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..k {
            let mut v = g[(i, j)];
            for p in 0..j {
                v -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = v / d;
        }
    }
    Some(l)
}

/// Solves `L Lᵀ x = rhs` given the lower factor.
pub fn cholesky_solve(l: &Matrix, rhs: &Vector) -> Vector {
    let k = l.nrows();
    let mut y = rhs.clone();
    for i in 0..k {
        let mut v = y[i];
        for p in 0..i {
            v -= l[(i, p)] * y[p];
        }
        y[i] = v / l[(i, i)];
    }
    for i in (0..k).rev() {
        let mut v = y[i];
        for p in (i + 1)..k {
            v -= l[(p, i)] * y[p];
        }
        y[i] = v / l[(i, i)];
    }
    y
}

/// `(x - y)ᵀ M (x - y)`.
pub fn quad_form_diff(m: &Matrix, x: &Vector, y: &Vector) -> f64 {
    let d = x - y;
    let v = d.dot(&(m * &d));
    v.max(0.0)
}

/// Orthonormal basis of the orthogonal complement of `normal` in ℝⁿ.
pub fn hyperplane_basis(normal: &Vector) -> Vec<Vector> {
    let n = normal.len();
    let nn = normal.norm();
    let mut basis: Vec<Vector> = Vec::with_capacity(n.saturating_sub(1));
    let unit = if nn > 0.0 { normal / nn } else { normal.clone() };
    for i in 0..n {
        let mut v = Vector::zeros(n);
        v[i] = 1.0;
        v -= &unit * unit.dot(&v);
        for b in &basis {
            let c = b.dot(&v);
            v -= b * c;
        }
        let len = v.norm();
        if len > 1e-8 {
            basis.push(v / len);
        }
        if basis.len() + 1 == n {
            break;
        }
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_rejects_paired_rows() {
        // Gram matrix of rows (0,1) and (0,-1).
        let g = Matrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!(cholesky_thresholded(&g, 1e-12).is_none());
        let g = Matrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let l = cholesky_thresholded(&g, 1e-12).unwrap();
        let x = cholesky_solve(&l, &Vector::from_vec(vec![1.0, 2.0]));
        let r = &g * &x - Vector::from_vec(vec![1.0, 2.0]);
        assert!(r.norm() < 1e-12);
    }

    #[test]
    fn hyperplane_basis_is_orthonormal() {
        let n = Vector::from_vec(vec![1.0, 2.0, -1.0]);
        let b = hyperplane_basis(&n);
        assert_eq!(b.len(), 2);
        for u in &b {
            assert!((u.norm() - 1.0).abs() < 1e-12);
            assert!(u.dot(&n).abs() < 1e-12);
        }
        assert!(b[0].dot(&b[1]).abs() < 1e-12);
    }

    #[test]
    fn spectral_abscissa_of_diagonal() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![-1.0, -3.0]));
        assert!((spectral_abscissa(&a) + 1.0).abs() < 1e-12);
    }
}
