//! Quadratic bisimulation functions and the distance kernels built on them.

use thiserror::Error;

use crate::linalg::{hyperplane_basis, quad_form_diff, spectral_abscissa, sym_max_eigenvalue, sym_min_eigenvalue};
use crate::model::{AffineMap, HybridAutomaton, LocationId, Polytope, VerificationConfig};
use crate::qp::{project, MetricInverse};
use crate::search::minimize_on_grid;
use crate::simulate::TrajectorySegment;
use crate::{Matrix, Vector};

#[derive(Debug, Error)]
pub enum BisimError {
    #[error("location `{location}`: no quadratic bisimulation metric constructed; supply M manually")]
    NotHurwitz { location: String },
    #[error("location `{location}`: supplied metric is not a bisimulation function (needs M ≻ 0 and AᵀM + MA ⪯ 0)")]
    InvalidMetric { location: String },
}

/// Solves `AᵀM + MA = -Q` for `M` with `A` Hurwitz.
pub fn solve_lyapunov(a: &Matrix, q: &Matrix) -> Result<Matrix, BisimError> {
    let n = a.nrows();
    if spectral_abscissa(a) >= 0.0 {
        return Err(BisimError::NotHurwitz {
            location: String::new(),
        });
    }
    let eye = Matrix::identity(n, n);
    let at = a.transpose();
    let k = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = Vector::from_iterator(n * n, q.iter().map(|v| -v));
    let sol = k.lu().solve(&rhs).ok_or(BisimError::NotHurwitz {
        location: String::new(),
    })?;
    let m = Matrix::from_column_slice(n, n, sol.as_slice());
    Ok((&m + m.transpose()) * 0.5)
}

/// `M ≻ 0` and `λ_max(AᵀM + MA) ≤ tol`.
pub fn check_bisimulation(m: &Matrix, a: &Matrix, tol: f64) -> bool {
    if sym_min_eigenvalue(m) <= 0.0 {
        return false;
    }
    let lyap = a.transpose() * m + m * a;
    sym_max_eigenvalue(&lyap) <= tol
}

/// `√((x - y)ᵀ M (x - y))`.
pub fn phi(m: &Matrix, x: &Vector, y: &Vector) -> f64 {
    quad_form_diff(m, x, y).sqrt()
}

#[derive(Clone, Debug)]
pub struct QuadraticBisimFunction {
    pub location: LocationId,
    pub m: Matrix,
    minv: MetricInverse,
}

impl QuadraticBisimFunction {
    pub fn new(location: LocationId, m: Matrix) -> Self {
        let minv = MetricInverse::new(&m);
        QuadraticBisimFunction { location, m, minv }
    }

    pub fn phi(&self, x: &Vector, y: &Vector) -> f64 {
        phi(&self.m, x, y)
    }

    pub fn inverse(&self) -> &MetricInverse {
        &self.minv
    }
}

/// One bisimulation function per location.
#[derive(Clone, Debug)]
pub struct Metrics {
    functions: Vec<QuadraticBisimFunction>,
}

impl Metrics {
    /// Uses each location's supplied metric, else the Lyapunov solution with
    /// `Q = I`. Non-Hurwitz locations fall back to `M = I` when `A + Aᵀ ⪯ 0`.
    pub fn from_automaton(h: &HybridAutomaton, cfg: &VerificationConfig) -> Result<Metrics, BisimError> {
        let n = h.dimension;
        let mut functions = Vec::with_capacity(h.locations.len());
        for (i, loc) in h.locations.iter().enumerate() {
            let m = match &loc.metric {
                Some(m) => {
                    if !check_bisimulation(m, &loc.a, cfg.dist_tol) {
                        return Err(BisimError::InvalidMetric {
                            location: loc.id.clone(),
                        });
                    }
                    m.clone()
                }
                None => match solve_lyapunov(&loc.a, &Matrix::identity(n, n)) {
                    Ok(m) => m,
                    Err(_) => {
                        let eye = Matrix::identity(n, n);
                        if check_bisimulation(&eye, &loc.a, cfg.dist_tol) {
                            eye
                        } else {
                            return Err(BisimError::NotHurwitz {
                                location: loc.id.clone(),
                            });
                        }
                    }
                },
            };
            functions.push(QuadraticBisimFunction::new(LocationId(i), m));
        }
        Ok(Metrics { functions })
    }

    pub fn get(&self, id: LocationId) -> &QuadraticBisimFunction {
        &self.functions[id.0]
    }

    pub fn all(&self) -> &[QuadraticBisimFunction] {
        &self.functions
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceResult {
    pub value: f64,
    pub witness_time: Option<f64>,
    pub witness_point: Option<Vector>,
}

impl DistanceResult {
    pub fn infinite() -> Self {
        DistanceResult {
            value: f64::INFINITY,
            witness_time: None,
            witness_point: None,
        }
    }

    pub fn at_time(mut self, t: f64) -> Self {
        self.witness_time = Some(t);
        self
    }
}

/// Exact φ-distance from `p` to the polytope. `+∞` for an empty polytope.
pub fn dist_point_to_polytope(minv: &MetricInverse, p: &Vector, poly: &Polytope) -> DistanceResult {
    match project(minv, p, poly) {
        Some(pr) => DistanceResult {
            value: pr.distance(),
            witness_time: None,
            witness_point: Some(pr.point),
        },
        None => DistanceResult::infinite(),
    }
}

/// Reset preimage of an open φ-ball: `{y | φ'(R y + s, c) < γ'}`.
#[derive(Clone, Debug)]
pub struct BallPreimage {
    pub reset: AffineMap,
    pub center: Vector,
    pub metric: Matrix,
    pub radius: f64,
}

impl BallPreimage {
    pub fn value_sq(&self, y: &Vector) -> f64 {
        quad_form_diff(&self.metric, &self.reset.apply(y), &self.center)
    }

    pub fn contains(&self, y: &Vector) -> bool {
        self.radius > 0.0 && self.value_sq(y) < self.radius * self.radius
    }
}

/// A guard together with the hyperplane carrying it.
#[derive(Clone, Copy, Debug)]
pub struct GuardGeometry<'a> {
    pub guard: &'a Polytope,
    pub normal: &'a Vector,
}

/// Closed intervals of `s` with `lo ≤ s ≤ hi` and `s ∉ (e0, e1)`.
fn carve(lo: f64, hi: f64, hole: Option<(f64, f64)>) -> Vec<(f64, f64)> {
    match hole {
        None => vec![(lo, hi)],
        Some((e0, e1)) => {
            let mut out = Vec::new();
            if lo <= e0.min(hi) {
                out.push((lo, e0.min(hi)));
            }
            if e1.max(lo) <= hi {
                out.push((e1.max(lo), hi));
            }
            out
        }
    }
}

/// Minimum of `φ(p, y)²` over `y = y0 + s u` inside the guard and outside
/// the hole. Exact: the feasible set is at most two intervals and the
/// objective is a convex quadratic in `s`.
fn line_minimum(
    m: &Matrix,
    p: &Vector,
    guard: &Polytope,
    hole: &BallPreimage,
    y0: &Vector,
    u: &Vector,
) -> Option<(f64, Vector)> {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for i in 0..guard.nrows() {
        let a = guard.row(i);
        let c1 = a.dot(u);
        let c0 = a.dot(y0) - guard.rhs()[i];
        let tol = 1e-12 * (1.0 + a.norm()) * (1.0 + y0.norm());
        if c1.abs() <= 1e-14 * a.norm().max(1e-300) {
            if c0 > tol.max(1e-9 * (1.0 + a.norm())) {
                return None;
            }
        } else if c1 > 0.0 {
            hi = hi.min(-c0 / c1);
        } else {
            lo = lo.max(-c0 / c1);
        }
    }
    if lo > hi {
        if lo - hi <= 1e-9 * (1.0 + lo.abs()) {
            let mid = 0.5 * (lo + hi);
            lo = mid;
            hi = mid;
        } else {
            return None;
        }
    }
    let r2 = hole.radius * hole.radius;
    let w1 = &hole.reset.matrix * u;
    let w0 = hole.reset.apply(y0) - &hole.center;
    let mw1 = &hole.metric * &w1;
    let alpha = w1.dot(&mw1);
    let beta = w0.dot(&mw1);
    let kappa = w0.dot(&(&hole.metric * &w0));
    let excluded = if hole.radius <= 0.0 {
        None
    } else if alpha <= 1e-15 * (1.0 + kappa.abs()) {
        if beta.abs() <= 1e-15 {
            (kappa < r2).then_some((f64::NEG_INFINITY, f64::INFINITY))
        } else {
            let root = (r2 - kappa) / (2.0 * beta);
            if beta > 0.0 {
                Some((f64::NEG_INFINITY, root))
            } else {
                Some((root, f64::INFINITY))
            }
        }
    } else {
        let disc = beta * beta - alpha * (kappa - r2);
        if disc <= 0.0 {
            None
        } else {
            let sq = disc.sqrt();
            Some(((-beta - sq) / alpha, (-beta + sq) / alpha))
        }
    };
    let d0 = y0 - p;
    let mu = m * u;
    let a2 = u.dot(&mu);
    let b2 = d0.dot(&mu);
    let s_star = if a2 > 0.0 { -b2 / a2 } else { 0.0 };
    let mut best: Option<(f64, Vector)> = None;
    for (a, b) in carve(lo, hi, excluded) {
        if a == f64::NEG_INFINITY && b == f64::INFINITY && excluded == Some((a, b)) {
            continue;
        }
        let s = s_star.clamp(a, b);
        if !s.is_finite() {
            continue;
        }
        let y = y0 + u * s;
        let val = quad_form_diff(m, p, &y);
        if best.as_ref().is_none_or(|(bv, _)| val < *bv) {
            best = Some((val, y));
        }
    }
    best
}

/// Deterministic unit directions in the span of `basis`.
fn probe_directions(basis: &[Vector]) -> Vec<Vector> {
    let mut out = Vec::new();
    for (i, b) in basis.iter().enumerate() {
        out.push(b.clone());
        for c in &basis[i + 1..] {
            out.push((b + c).normalize());
            out.push((b - c).normalize());
        }
    }
    // Additional quasi-random directions (additive recurrence).
    let golden = 0.618_033_988_749_894_9f64;
    for j in 1..=48u32 {
        let mut d = Vector::zeros(basis[0].len());
        for (i, b) in basis.iter().enumerate() {
            let frac = (j as f64 * golden * (i as f64 + 1.0).sqrt()).fract();
            d += b * (2.0 * frac - 1.0);
        }
        if d.norm() > 1e-9 {
            out.push(d.normalize());
        }
    }
    out
}

/// φ-distance from `p` to `guard \ hole`. The hole is open, so its boundary
/// belongs to the closure of the remainder.
pub fn dist_point_to_guard_minus_hole(
    minv: &MetricInverse,
    p: &Vector,
    geom: GuardGeometry<'_>,
    hole: Option<&BallPreimage>,
) -> DistanceResult {
    let base = dist_point_to_polytope(minv, p, geom.guard);
    let Some(hole) = hole else {
        return base;
    };
    let Some(proj) = base.witness_point.clone() else {
        return base;
    };
    if !hole.contains(&proj) {
        return base;
    }
    let m = minv.metric();
    let basis = hyperplane_basis(geom.normal);
    if basis.is_empty() {
        // One-dimensional state: the guard is a point inside the hole.
        return DistanceResult::infinite();
    }
    let dirs = if basis.len() == 1 {
        vec![basis[0].clone()]
    } else {
        probe_directions(&basis)
    };
    let mut best: Option<(f64, Vector)> = None;
    for u in &dirs {
        if let Some((v, y)) = line_minimum(m, p, geom.guard, hole, &proj, u) {
            if best.as_ref().is_none_or(|(bv, _)| v < *bv) {
                best = Some((v, y));
            }
        }
    }
    match best {
        Some((v, y)) => DistanceResult {
            value: v.max(0.0).sqrt(),
            witness_time: None,
            witness_point: Some(y),
        },
        None => DistanceResult::infinite(),
    }
}

/// Infimum over `t ∈ [lo, hi]` of `dist(ξ(t))`: grid evaluation anchored at the
/// segment's anchor, refined by golden-section search to `event_tol`.
pub fn min_over_window(
    seg: &TrajectorySegment,
    lo: f64,
    hi: f64,
    dist: &dyn Fn(&Vector) -> DistanceResult,
    cfg: &VerificationConfig,
) -> DistanceResult {
    if !(lo <= hi) {
        return DistanceResult::infinite();
    }
    let f = |t: f64| dist(&seg.state_at(t)).value;
    let (t, v) = minimize_on_grid(f, lo, hi, seg.anchor_time, cfg.time_grid_dt, cfg.event_tol, 0.0);
    if !v.is_finite() {
        return DistanceResult::infinite();
    }
    let mut r = dist(&seg.state_at(t));
    r.witness_time = Some(t);
    r
}

/// Minimum φ-distance from the segment over a time window to a polytope.
pub fn min_dist_over_window(
    seg: &TrajectorySegment,
    lo: f64,
    hi: f64,
    target: &Polytope,
    q: &QuadraticBisimFunction,
    cfg: &VerificationConfig,
) -> DistanceResult {
    min_over_window(seg, lo, hi, &|x| dist_point_to_polytope(q.inverse(), x, target), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{load_document, InitialSet};
    use crate::simulate::{simulate, AffineFlow};
    use proptest::prelude::*;

    const THREE_LOCATION: &str = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../models/three_location.toml"));

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec())
    }

    fn diag(xs: &[f64]) -> Matrix {
        Matrix::from_diagonal(&v(xs))
    }

    #[test]
    fn lyapunov_diagonal_closed_form() {
        let m = solve_lyapunov(&diag(&[-1.0, -2.0]), &Matrix::identity(2, 2)).unwrap();
        assert!((m - diag(&[0.5, 0.25])).amax() < 1e-12);
        let m = solve_lyapunov(&(-Matrix::identity(2, 2)), &Matrix::identity(2, 2)).unwrap();
        assert!((m - Matrix::identity(2, 2) * 0.5).amax() < 1e-12);
        assert!(solve_lyapunov(&diag(&[0.0, -1.0]), &Matrix::identity(2, 2)).is_err());
    }

    #[test]
    fn lyapunov_residual_general() {
        let a = Matrix::from_row_slice(3, 3, &[-1.0, 2.0, 0.0, -2.0, -1.0, 0.5, 0.0, 0.0, -0.3]);
        let q = Matrix::identity(3, 3);
        let m = solve_lyapunov(&a, &q).unwrap();
        let res = a.transpose() * &m + &m * &a + &q;
        assert!(res.norm() < 1e-9);
        assert!(sym_min_eigenvalue(&m) > 0.0);
    }

    #[test]
    fn bisimulation_checks() {
        let eye = Matrix::identity(2, 2);
        assert!(check_bisimulation(&eye, &diag(&[-1.0, -3.0]), 1e-9));
        assert!(!check_bisimulation(&eye, &diag(&[1.0, -1.0]), 1e-9));
        assert!(check_bisimulation(&diag(&[0.5, 0.25]), &diag(&[-1.0, -2.0]), 1e-9));
    }

    #[test]
    fn phi_examples() {
        let eye = Matrix::identity(2, 2);
        assert_eq!(phi(&eye, &v(&[0.0, 0.0]), &v(&[3.0, 4.0])), 5.0);
        assert_eq!(phi(&diag(&[2.0, 1.0]), &v(&[0.3, 0.1]), &v(&[0.3, 0.1])), 0.0);
        assert!((phi(&diag(&[2.0, 1.0]), &v(&[1.0, 0.0]), &v(&[0.0, 0.0])) - 2f64.sqrt()).abs() < 1e-15);
    }

    fn ray_x1_eq_1() -> Polytope {
        Polytope::new(
            Matrix::from_row_slice(3, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, -1.0]),
            v(&[1.0, -1.0, -1.0]),
        )
    }

    fn ray_x2_eq_1() -> Polytope {
        Polytope::new(
            Matrix::from_row_slice(3, 2, &[0.0, 1.0, 0.0, -1.0, -1.0, 0.0]),
            v(&[1.0, -1.0, -1.0]),
        )
    }

    #[test]
    fn point_to_polytope_examples() {
        let eye = MetricInverse::new(&Matrix::identity(2, 2));
        let r = dist_point_to_polytope(&eye, &v(&[1.25, 1.9]), &ray_x1_eq_1());
        assert!((r.value - 0.25).abs() < 1e-12);
        assert!((r.witness_point.unwrap() - v(&[1.0, 1.9])).norm() < 1e-12);
        let r = dist_point_to_polytope(&eye, &v(&[0.0, 2.0]), &ray_x2_eq_1());
        assert!((r.value - 2f64.sqrt()).abs() < 1e-12);
        let empty = Polytope::new(Matrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]), v(&[0.0, -1.0]));
        assert_eq!(
            dist_point_to_polytope(&eye, &v(&[0.0, 0.0]), &empty).value,
            f64::INFINITY
        );
    }

    #[test]
    fn window_minimum_hits_guard() {
        let doc = load_document(THREE_LOCATION).unwrap();
        let h = &doc.automaton;
        let tr = simulate(h, h.initial_location, &v(&[1.25, 1.9]), 0.0, 0.5, &doc.config).unwrap();
        let seg = &tr.segments[0];
        let q = QuadraticBisimFunction::new(seg.location, Matrix::identity(2, 2));
        let r = min_dist_over_window(seg, seg.t0, seg.t_end, &ray_x2_eq_1(), &q, &doc.config);
        assert!(r.value < 1e-8);
        assert!((r.witness_time.unwrap() - 1.9f64.ln() / 3.0).abs() < 1e-6);
        let empty = Polytope::new(Matrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]), v(&[0.0, -1.0]));
        let r = min_dist_over_window(seg, seg.t0, seg.t_end, &empty, &q, &doc.config);
        assert_eq!(r.value, f64::INFINITY);
        let r = min_dist_over_window(seg, 0.3, 0.2, &ray_x2_eq_1(), &q, &doc.config);
        assert_eq!(r.value, f64::INFINITY);
    }

    #[test]
    fn window_minimum_point_target() {
        let doc = load_document(THREE_LOCATION).unwrap();
        let mut h = doc.automaton.clone();
        h.locations[0].a = -Matrix::identity(2, 2);
        h.initial = InitialSet::Point(v(&[2.0, 0.0]));
        let tr = simulate(&h, LocationId(0), &v(&[2.0, 0.0]), 0.0, 2f64.ln(), &doc.config).unwrap();
        let point = Polytope::from_box(&v(&[1.0, 0.0]), &v(&[1.0, 0.0]));
        let q = QuadraticBisimFunction::new(LocationId(0), Matrix::identity(2, 2));
        let seg = &tr.segments[0];
        let r = min_dist_over_window(seg, seg.t0, seg.t_end, &point, &q, &doc.config);
        assert!(r.value < 1e-8);
        assert!((r.witness_time.unwrap() - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn allowed_part_carves_guard() {
        // Guard {x2 = 1, x1 >= 1}, Euclidean hole around (1.0092, 1) of radius 0.1613.
        let eye = Matrix::identity(2, 2);
        let minv = MetricInverse::new(&eye);
        let guard = ray_x2_eq_1();
        let normal = v(&[0.0, -1.0]);
        let hole = BallPreimage {
            reset: AffineMap::identity(2),
            center: v(&[1.0092, 1.0]),
            metric: eye.clone(),
            radius: 0.1613,
        };
        let geom = GuardGeometry {
            guard: &guard,
            normal: &normal,
        };
        let r = dist_point_to_guard_minus_hole(&minv, &v(&[1.05, 1.3]), geom, Some(&hole));
        let edge = v(&[1.0092 + 0.1613, 1.0]);
        let want = (edge - v(&[1.05, 1.3])).norm();
        assert!((r.value - want).abs() < 1e-12, "{} vs {}", r.value, want);
        let zero_hole = BallPreimage {
            radius: 0.0,
            ..hole.clone()
        };
        let r = dist_point_to_guard_minus_hole(&minv, &v(&[1.05, 1.3]), geom, Some(&zero_hole));
        assert!((r.value - 0.3).abs() < 1e-12);
        // hole far away leaves the guard distance unchanged
        let far = BallPreimage {
            center: v(&[9.0, 9.0]),
            ..hole
        };
        let r = dist_point_to_guard_minus_hole(&minv, &v(&[1.05, 1.3]), geom, Some(&far));
        assert!((r.value - 0.3).abs() < 1e-12);
    }

    #[test]
    fn hole_in_three_dimensions() {
        // Guard: plane x3 = 0, hole: unit ball at origin. Distance from (0,0,0.5)
        // to the plane minus the disc is sqrt(1 + 0.25).
        let eye = Matrix::identity(3, 3);
        let minv = MetricInverse::new(&eye);
        let guard = Polytope::new(
            Matrix::from_row_slice(2, 3, &[0.0, 0.0, 1.0, 0.0, 0.0, -1.0]),
            v(&[0.0, 0.0]),
        );
        let normal = v(&[0.0, 0.0, 1.0]);
        let hole = BallPreimage {
            reset: AffineMap::identity(3),
            center: v(&[0.0, 0.0, 0.0]),
            metric: eye.clone(),
            radius: 1.0,
        };
        let geom = GuardGeometry {
            guard: &guard,
            normal: &normal,
        };
        let r = dist_point_to_guard_minus_hole(&minv, &v(&[0.0, 0.0, 0.5]), geom, Some(&hole));
        assert!((r.value - 1.25f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn default_metrics_of_three_location_model() {
        let doc = load_document(THREE_LOCATION).unwrap();
        let ms = Metrics::from_automaton(&doc.automaton, &doc.config).unwrap();
        assert!((ms.get(LocationId(0)).m.clone() - diag(&[0.5, 0.25])).amax() < 1e-12);
        assert!((ms.get(LocationId(1)).m.clone() - diag(&[0.25, 0.5])).amax() < 1e-12);
        assert!((ms.get(LocationId(2)).m.clone() - diag(&[0.5, 1.0 / 6.0])).amax() < 1e-12);
    }

    proptest! {
        #[test]
        fn phi_is_non_increasing_along_pairs(
            a11 in -3.0f64..-0.1, a12 in -1.0f64..1.0, a21 in -1.0f64..1.0, a22 in -3.0f64..-0.1,
            x1 in -2.0f64..2.0, x2 in -2.0f64..2.0, y1 in -2.0f64..2.0, y2 in -2.0f64..2.0,
        ) {
            let a = Matrix::from_row_slice(2, 2, &[a11, a12, a21, a22]);
            prop_assume!(spectral_abscissa(&a) < -1e-3);
            let m = solve_lyapunov(&a, &Matrix::identity(2, 2)).unwrap();
            prop_assert!(check_bisimulation(&m, &a, 1e-9));
            let fl = AffineFlow::new(&a, &v(&[0.3, -0.2]));
            let (mut x, mut y) = (v(&[x1, x2]), v(&[y1, y2]));
            let mut prev = phi(&m, &x, &y);
            for _ in 0..50 {
                x = fl.advance(&x, 0.02);
                y = fl.advance(&y, 0.02);
                let cur = phi(&m, &x, &y);
                prop_assert!(cur <= prev + 1e-9);
                prev = cur;
            }
        }

        #[test]
        fn projection_matches_grid_oracle(
            cx in -1.0f64..1.0, cy in -1.0f64..1.0, w in 0.1f64..1.0, hgt in 0.1f64..1.0,
            px in -2.0f64..2.0, py in -2.0f64..2.0, m12 in -0.4f64..0.4,
        ) {
            let poly = Polytope::from_box(&v(&[cx, cy]), &v(&[cx + w, cy + hgt]));
            let m = Matrix::from_row_slice(2, 2, &[1.0, m12, m12, 0.8]);
            let minv = MetricInverse::new(&m);
            let p = v(&[px, py]);
            let r = dist_point_to_polytope(&minv, &p, &poly);
            let y = r.witness_point.clone().unwrap();
            prop_assert!(poly.contains(&y, 1e-9));
            prop_assert!((phi(&m, &p, &y) - r.value).abs() < 1e-9);
            // boundary sampling oracle
            let mut best = f64::INFINITY;
            if poly.contains_exact(&p) { best = 0.0; }
            let k = 400;
            for i in 0..=k {
                let s = i as f64 / k as f64;
                for q in [v(&[cx + s * w, cy]), v(&[cx + s * w, cy + hgt]), v(&[cx, cy + s * hgt]), v(&[cx + w, cy + s * hgt])] {
                    best = best.min(phi(&m, &p, &q));
                }
            }
            prop_assert!(r.value <= best + 1e-12);
            prop_assert!(best - r.value < 2e-3);
        }
    }
}
