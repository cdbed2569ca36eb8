//! Projection of a point onto a halfspace polytope in a quadratic metric.
//!
//! Solves `min (y - p)ᵀ M (y - p)  s.t.  H y ≤ h` for symmetric positive
//! definite `M`. Small problems (at most [`ENUMERATION_LIMIT`] rows) are solved
//! exactly by enumerating candidate active sets of size at most `n`: every
//! feasible equality-constrained minimizer is a candidate and the smallest one
//! is the global optimum, because the true optimum is the minimizer over its
//! own active set. Larger problems use accelerated projected gradient on the
//! dual followed by an exact solve on the detected active set.

use crate::linalg::{cholesky_solve, cholesky_thresholded};
use crate::model::Polytope;
use crate::{Matrix, Vector};

/// Row count up to which active sets are enumerated exhaustively.
pub const ENUMERATION_LIMIT: usize = 8;

const FEAS_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-11;

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub point: Vector,
    /// Squared metric distance `(y - p)ᵀ M (y - p)`.
    pub value_sq: f64,
}

impl Projection {
    pub fn distance(&self) -> f64 {
        self.value_sq.sqrt()
    }
}

/// Precomputed inverse of the metric, reused across many projections.
#[derive(Clone, Debug)]
pub struct MetricInverse {
    m: Matrix,
    m_inv: Matrix,
}

impl MetricInverse {
    pub fn new(m: &Matrix) -> Self {
        let m_inv = m
            .clone()
            .try_inverse()
            .unwrap_or_else(|| Matrix::identity(m.nrows(), m.ncols()));
        MetricInverse { m: m.clone(), m_inv }
    }

    pub fn metric(&self) -> &Matrix {
        &self.m
    }
}

fn row_violation(poly: &Polytope, i: usize, y: &Vector) -> f64 {
    let row = poly.row(i);
    let lhs = row.dot(y);
    let scale = 1.0 + poly.rhs()[i].abs() + row.norm() * y.norm();
    (lhs - poly.rhs()[i]) / scale
}

fn feasible(poly: &Polytope, y: &Vector) -> bool {
    (0..poly.nrows()).all(|i| row_violation(poly, i, y) <= FEAS_TOL)
}

/// Equality-constrained minimizer on rows `active`, if the rows are
/// independent.
fn solve_active(minv: &MetricInverse, p: &Vector, poly: &Polytope, active: &[usize]) -> Option<Vector> {
    let k = active.len();
    let n = p.len();
    let mut hs = Matrix::zeros(k, n);
    let mut rhs = Vector::zeros(k);
    for (r, &i) in active.iter().enumerate() {
        hs.set_row(r, &poly.row(i).transpose());
        rhs[r] = poly.row(i).dot(p) - poly.rhs()[i];
    }
    let hminv = &hs * &minv.m_inv;
    let gram = &hminv * hs.transpose();
    let l = cholesky_thresholded(&gram, PIVOT_TOL)?;
    let lambda = cholesky_solve(&l, &rhs);
    Some(p - hminv.transpose() * lambda)
}

fn value_sq(m: &Matrix, p: &Vector, y: &Vector) -> f64 {
    let d = y - p;
    d.dot(&(m * &d)).max(0.0)
}

fn for_each_subset(m: usize, max_size: usize, mut f: impl FnMut(&[usize])) {
    for size in 1..=max_size.min(m) {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            f(&idx);
            let Some(pos) = (0..size).rev().find(|&i| idx[i] < m - size + i) else {
                break;
            };
            idx[pos] += 1;
            for q in (pos + 1)..size {
                idx[q] = idx[q - 1] + 1;
            }
        }
    }
}

/// Projects `p` onto `poly` in the metric `M`. Returns `None` when the
/// polytope is empty.
pub fn project(minv: &MetricInverse, p: &Vector, poly: &Polytope) -> Option<Projection> {
    if poly.nrows() == 0 || poly.contains_exact(p) {
        return Some(Projection {
            point: p.clone(),
            value_sq: 0.0,
        });
    }
    if poly.nrows() <= ENUMERATION_LIMIT {
        project_enumerate(minv, p, poly)
    } else {
        project_dual(minv, p, poly)
    }
}

/// Convenience wrapper building the metric inverse on the fly.
pub fn project_with(m: &Matrix, p: &Vector, poly: &Polytope) -> Option<Projection> {
    project(&MetricInverse::new(m), p, poly)
}

fn project_enumerate(minv: &MetricInverse, p: &Vector, poly: &Polytope) -> Option<Projection> {
    let n = p.len();
    let mut best: Option<Projection> = None;
    if feasible(poly, p) {
        best = Some(Projection {
            point: p.clone(),
            value_sq: 0.0,
        });
    }
    for_each_subset(poly.nrows(), n, |active| {
        if let Some(y) = solve_active(minv, p, poly, active) {
            if feasible(poly, &y) {
                let v = value_sq(&minv.m, p, &y);
                if best.as_ref().is_none_or(|b| v < b.value_sq) {
                    best = Some(Projection { point: y, value_sq: v });
                }
            }
        }
    });
    best
}

fn project_dual(minv: &MetricInverse, p: &Vector, poly: &Polytope) -> Option<Projection> {
    let hm = poly.matrix();
    let h = poly.rhs();
    let m = hm.nrows();
    // y(λ) = p - M⁻¹ Hᵀ λ / 2 ; dual gradient = H y(λ) - h
    let k = hm * &minv.m_inv * hm.transpose() * 0.5;
    let lip = crate::linalg::sym_max_eigenvalue(&k).max(1e-12);
    let step = 1.0 / lip;
    let primal = |lam: &Vector| -> Vector { p - (&minv.m_inv * hm.transpose() * lam) * 0.5 };
    let mut lam = Vector::zeros(m);
    let mut prev = lam.clone();
    let mut z = lam.clone();
    let mut t = 1.0f64;
    for _ in 0..20_000 {
        let y = primal(&z);
        let grad = hm * &y - h;
        let next = (&z + grad * step).map(|v| v.max(0.0));
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        z = &next + (&next - &prev) * ((t - 1.0) / t_next);
        prev = next;
        t = t_next;
        if (&prev - &lam).amax() < 1e-14 * (1.0 + prev.amax()) {
            break;
        }
        lam = prev.clone();
    }
    let y = primal(&prev);
    let active: Vec<usize> = (0..m).filter(|&i| prev[i] > 1e-12).collect();
    if !active.is_empty() && active.len() <= p.len() {
        if let Some(yp) = solve_active(minv, p, poly, &active) {
            if feasible(poly, &yp) {
                let v = value_sq(&minv.m, p, &yp);
                return Some(Projection { point: yp, value_sq: v });
            }
        }
    }
    let worst = (0..m)
        .map(|i| row_violation(poly, i, &y))
        .fold(f64::NEG_INFINITY, f64::max);
    if worst > 1e-7 {
        return None;
    }
    let v = value_sq(&minv.m, p, &y);
    Some(Projection { point: y, value_sq: v })
}
