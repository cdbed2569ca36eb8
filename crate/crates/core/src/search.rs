//! One-dimensional search helpers: golden-section minimization and bisection.

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Minimizes `f` on `[a, b]` assuming a single local minimum inside. Stops
/// when the bracket is narrower than `tol`. Returns the best point seen,
/// including the two endpoints.
pub fn golden_section(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> (f64, f64) {
    let (mut lo, mut hi) = if a <= b { (a, b) } else { (b, a) };
    let fa = f(lo);
    let fb = f(hi);
    let mut best = if fb < fa { (hi, fb) } else { (lo, fa) };
    if hi - lo <= tol {
        return best;
    }
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
        if f1 < best.1 {
            best = (x1, f1);
        }
        if f2 < best.1 {
            best = (x2, f2);
        }
    }
    best
}

/// Shrinks `[lo, hi]` with `pred(lo) == false` and `pred(hi) == true` to a
/// bracket narrower than `tol`.
pub fn bisect(mut pred: impl FnMut(f64) -> bool, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (lo, hi)
}

/// Uniform grid over `[a, b]` with spacing at most `dt`, anchored at `anchor`:
/// interior points are `anchor + k dt`, endpoints always included.
pub fn anchored_grid(a: f64, b: f64, anchor: f64, dt: f64) -> Vec<f64> {
    let mut out = vec![a];
    if b <= a {
        return out;
    }
    let k0 = ((a - anchor) / dt).floor() as i64 + 1;
    let mut k = k0;
    loop {
        let t = anchor + k as f64 * dt;
        if t >= b {
            break;
        }
        if t > a {
            out.push(t);
        }
        k += 1;
    }
    out.push(b);
    out
}

/// Global minimum of `f` over `[a, b]`: evaluates on an anchored grid, then
/// refines every grid-local minimum by golden-section search to `tol`.
/// Returns `(t*, f(t*))`. Stops early once a value `<= stop_below` is seen.
pub fn minimize_on_grid(
    mut f: impl FnMut(f64) -> f64,
    a: f64,
    b: f64,
    anchor: f64,
    dt: f64,
    tol: f64,
    stop_below: f64,
) -> (f64, f64) {
    let ts = anchored_grid(a, b, anchor, dt);
    let mut vals = Vec::with_capacity(ts.len());
    let mut best = (ts[0], f64::INFINITY);
    for &t in &ts {
        let v = f(t);
        if v < best.1 {
            best = (t, v);
        }
        vals.push(v);
        if v <= stop_below {
            return best;
        }
    }
    let m = ts.len();
    if m == 1 {
        return best;
    }
    for i in 0..m {
        let left_ok = i == 0 || vals[i] <= vals[i - 1];
        let right_ok = i + 1 == m || vals[i] <= vals[i + 1];
        if !(left_ok && right_ok) || !vals[i].is_finite() {
            continue;
        }
        let lo = ts[i.saturating_sub(1)];
        let hi = ts[(i + 1).min(m - 1)];
        let (t, v) = golden_section(&mut f, lo, hi, tol);
        if v < best.1 {
            best = (t, v);
        }
        if best.1 <= stop_below {
            break;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_finds_parabola_vertex() {
        let (x, fx) = golden_section(|x| (x - 0.3).powi(2) + 1.0, 0.0, 1.0, 1e-10);
        assert!((x - 0.3).abs() < 1e-8);
        assert!((fx - 1.0).abs() < 1e-15);
    }

    #[test]
    fn golden_keeps_endpoint_minimum() {
        let (x, _) = golden_section(|x| x, 2.0, 3.0, 1e-9);
        assert_eq!(x, 2.0);
    }

    #[test]
    fn bisect_brackets_threshold() {
        let (lo, hi) = bisect(|x| x * x >= 2.0, 0.0, 2.0, 1e-12);
        assert!(lo * lo < 2.0 && hi * hi >= 2.0);
        assert!((lo - std::f64::consts::SQRT_2).abs() < 1e-11);
    }

    #[test]
    fn grid_minimum_is_refined() {
        let (t, v) = minimize_on_grid(|t| (t - 0.12345).abs(), 0.0, 1.0, 0.0, 0.01, 1e-10, -1.0);
        assert!((t - 0.12345).abs() < 1e-9);
        assert!(v < 1e-9);
    }

    #[test]
    fn grid_is_anchored_and_closed() {
        let g = anchored_grid(0.25, 0.5, 0.0, 0.1);
        assert_eq!(g.first(), Some(&0.25));
        assert_eq!(g.last(), Some(&0.5));
        assert!((g[1] - 0.3).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(anchored_grid(1.0, 1.0, 0.0, 0.1), vec![1.0]);
    }
}
