//! `plotdata`: turns a finished run directory into CSV layers for plotting.
//!
//! Geometry layers (guards, unsafe polygons, ellipses) are planar and are
//! only emitted for two-dimensional models. Trajectory polylines are emitted
//! in any dimension.

use std::path::Path;

use anyhow::Context as _;
use safehood_core::model::load_document;
use safehood_core::{Metrics, Polytope};

use crate::output::Manifest;
use crate::{Fail, EXIT_INVALID};

const ELLIPSE_POINTS: usize = 64;
const MARGIN: f64 = 1.0;
const TOL: f64 = 1e-9;

type P2 = [f64; 2];

#[derive(Debug, Default, PartialEq, Eq)]
pub struct LayerCounts {
    pub trajectories: usize,
    pub guards: usize,
    pub unsafe_sets: usize,
    pub ellipses: usize,
}

pub fn cmd_plotdata(run: &Path) -> Result<u8, Fail> {
    let manifest = Manifest::read(run).map_err(|e| Fail {
        code: EXIT_INVALID,
        message: format!("{} is not a completed run: {e:#}", run.display()),
    })?;
    let counts = export(run, &manifest)?;
    println!("trajectory polylines = {}", counts.trajectories);
    println!("guard segments = {}", counts.guards);
    println!("unsafe polygons = {}", counts.unsafe_sets);
    println!("ellipses = {}", counts.ellipses);
    Ok(0)
}

struct Polyline {
    segment: usize,
    location: String,
    points: Vec<Vec<f64>>,
}

fn read_polylines(path: &Path) -> anyhow::Result<Vec<Polyline>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let n = r.headers()?.len() - 4;
    let mut out: Vec<Polyline> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let segment: usize = rec[0].parse()?;
        let x = (0..n)
            .map(|i| rec[3 + i].parse::<f64>())
            .collect::<Result<Vec<_>, _>>()?;
        match out.last_mut() {
            Some(p) if p.segment == segment => p.points.push(x),
            _ => out.push(Polyline {
                segment,
                location: rec[1].to_string(),
                points: vec![x],
            }),
        }
    }
    Ok(out)
}

struct Ball {
    location: usize,
    center: Vec<f64>,
    radius: f64,
}

fn read_balls(path: &Path) -> anyhow::Result<Vec<Ball>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let n = r.headers()?.len() - 4;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(Ball {
            location: rec[0].parse()?,
            center: (0..n).map(|i| rec[1 + i].parse::<f64>()).collect::<Result<_, _>>()?,
            radius: rec[1 + n].parse()?,
        });
    }
    Ok(out)
}

fn export(run: &Path, manifest: &Manifest) -> anyhow::Result<LayerCounts> {
    let text =
        std::fs::read_to_string(&manifest.model).with_context(|| format!("reading {}", manifest.model.display()))?;
    let mut doc = load_document(&text)?;
    if let Some(v) = manifest.overrides.get("t_end") {
        doc.config.t_end = v.parse()?;
    }
    let h = &doc.automaton;
    let has = |name: &str| manifest.artifacts.iter().any(|a| a == name);
    let dir = run.join("plot");
    std::fs::create_dir_all(&dir)?;
    let mut counts = LayerCounts::default();

    let polylines = if has("trajectory.csv") {
        read_polylines(&run.join("trajectory.csv"))?
    } else {
        Vec::new()
    };
    let mut w = csv::Writer::from_path(dir.join("trajectories.csv"))?;
    let mut header = vec!["polyline".to_string(), "location".into()];
    header.extend((1..=h.dimension).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (k, p) in polylines.iter().enumerate() {
        for x in &p.points {
            let mut row = vec![k.to_string(), p.location.clone()];
            row.extend(x.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    counts.trajectories = polylines.len();

    let balls = if has("neighborhoods.csv") {
        read_balls(&run.join("neighborhoods.csv"))?
    } else {
        Vec::new()
    };
    if h.dimension != 2 || !has("neighborhoods.csv") {
        return Ok(counts);
    }

    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let points = polylines
        .iter()
        .flat_map(|p| p.points.iter())
        .chain(balls.iter().map(|b| &b.center));
    for x in points {
        for i in 0..2 {
            lo[i] = lo[i].min(x[i]);
            hi[i] = hi[i].max(x[i]);
        }
    }
    if !lo[0].is_finite() {
        let (a, b) = h.initial.bounds();
        lo = [a[0], a[1]];
        hi = [b[0], b[1]];
    }
    let bbox = [[lo[0] - MARGIN, lo[1] - MARGIN], [hi[0] + MARGIN, hi[1] + MARGIN]];

    let mut w = csv::Writer::from_path(dir.join("guards.csv"))?;
    w.write_record(["guard", "event", "x1", "x2"])?;
    for ev in &h.events {
        let normal = h.location(ev.source).invariant.row(ev.facet);
        let rhs = h.location(ev.source).invariant.rhs()[ev.facet];
        if let Some([a, b]) = guard_segment(&ev.guard, [normal[0], normal[1]], rhs, &bbox) {
            for p in [a, b] {
                w.write_record([
                    counts.guards.to_string(),
                    ev.name.clone(),
                    p[0].to_string(),
                    p[1].to_string(),
                ])?;
            }
            counts.guards += 1;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("unsafe.csv"))?;
    w.write_record(["polygon", "x1", "x2"])?;
    let mut seen: Vec<&Polytope> = Vec::new();
    for poly in h.unsafe_sets.iter().flatten() {
        if seen.contains(&poly) {
            continue;
        }
        seen.push(poly);
        let ring = clip_box(poly, &bbox);
        if ring.len() < 3 {
            continue;
        }
        for p in &ring {
            w.write_record([counts.unsafe_sets.to_string(), p[0].to_string(), p[1].to_string()])?;
        }
        counts.unsafe_sets += 1;
    }
    w.flush()?;

    let metrics = Metrics::from_automaton(h, &doc.config)?;
    let mut w = csv::Writer::from_path(dir.join("ellipses.csv"))?;
    w.write_record(["ellipse", "location", "x1", "x2"])?;
    for b in &balls {
        if !(b.radius > 0.0 && b.radius.is_finite()) {
            continue;
        }
        let loc = safehood_core::LocationId(b.location);
        let m = &metrics.get(loc).m;
        let name = &h.location(loc).id;
        for p in ellipse(
            [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]],
            [b.center[0], b.center[1]],
            b.radius,
        ) {
            w.write_record([
                counts.ellipses.to_string(),
                name.clone(),
                p[0].to_string(),
                p[1].to_string(),
            ])?;
        }
        counts.ellipses += 1;
    }
    w.flush()?;
    Ok(counts)
}

/// The guard as a segment of its facet line `n·x = rhs`, clipped to `bbox`.
fn guard_segment(guard: &Polytope, n: P2, rhs: f64, bbox: &[P2; 2]) -> Option<[P2; 2]> {
    let nn = n[0] * n[0] + n[1] * n[1];
    if nn == 0.0 {
        return None;
    }
    let p0 = [n[0] * rhs / nn, n[1] * rhs / nn];
    let d = [-n[1], n[0]];
    let (mut s_lo, mut s_hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut cut = |row: P2, b: f64| -> bool {
        let slope = row[0] * d[0] + row[1] * d[1];
        let slack = b - (row[0] * p0[0] + row[1] * p0[1]);
        let tol = TOL * (1.0 + row[0].hypot(row[1]));
        if slope.abs() <= 1e-14 {
            return slack >= -tol;
        }
        let s = slack / slope;
        if slope > 0.0 {
            s_hi = s_hi.min(s + tol / slope);
        } else {
            s_lo = s_lo.max(s + tol / slope);
        }
        true
    };
    for i in 0..guard.nrows() {
        let r = guard.row(i);
        if !cut([r[0], r[1]], guard.rhs()[i]) {
            return None;
        }
    }
    for (row, b) in box_rows(bbox) {
        cut(row, b);
    }
    if s_lo >= s_hi {
        return None;
    }
    let at = |s: f64| [p0[0] + s * d[0], p0[1] + s * d[1]];
    Some([at(s_lo), at(s_hi)])
}

fn box_rows(bbox: &[P2; 2]) -> [(P2, f64); 4] {
    [
        ([1.0, 0.0], bbox[1][0]),
        ([-1.0, 0.0], -bbox[0][0]),
        ([0.0, 1.0], bbox[1][1]),
        ([0.0, -1.0], -bbox[0][1]),
    ]
}

/// Sutherland-Hodgman clipping of the box rectangle by every halfspace.
fn clip_box(poly: &Polytope, bbox: &[P2; 2]) -> Vec<P2> {
    let mut ring = vec![
        [bbox[0][0], bbox[0][1]],
        [bbox[1][0], bbox[0][1]],
        [bbox[1][0], bbox[1][1]],
        [bbox[0][0], bbox[1][1]],
    ];
    for i in 0..poly.nrows() {
        let r = poly.row(i);
        let (a, b) = ([r[0], r[1]], poly.rhs()[i]);
        let val = |p: &P2| a[0] * p[0] + a[1] * p[1] - b;
        let mut next = Vec::with_capacity(ring.len() + 1);
        for k in 0..ring.len() {
            let p = ring[k];
            let q = ring[(k + 1) % ring.len()];
            let (vp, vq) = (val(&p), val(&q));
            if vp <= 0.0 {
                next.push(p);
            }
            if (vp < 0.0 && vq > 0.0) || (vp > 0.0 && vq < 0.0) {
                let t = vp / (vp - vq);
                next.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
        ring = next;
        if ring.is_empty() {
            break;
        }
    }
    ring
}

/// Boundary of `{x | (x - c)ᵀ M (x - c) = r²}`, closed (first point repeated).
fn ellipse(m: [[f64; 2]; 2], c: P2, r: f64) -> Vec<P2> {
    // M = L Lᵀ; boundary points are c + r L⁻ᵀ u for unit u.
    let l11 = m[0][0].sqrt();
    let l21 = m[1][0] / l11;
    let l22 = (m[1][1] - l21 * l21).max(0.0).sqrt();
    (0..=ELLIPSE_POINTS)
        .map(|k| {
            let th = std::f64::consts::TAU * (k % ELLIPSE_POINTS) as f64 / ELLIPSE_POINTS as f64;
            let (u1, u2) = (th.cos(), th.sin());
            // solve Lᵀ v = u
            let v2 = u2 / l22;
            let v1 = (u1 - l21 * v2) / l11;
            [c[0] + r * v1, c[1] + r * v2]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use safehood_core::{Matrix, Vector};

    fn unit_box() -> [P2; 2] {
        [[-5.0, -5.0], [5.0, 5.0]]
    }

    #[test]
    fn ellipse_points_lie_on_the_level_set() {
        let m = [[2.0, 0.5], [0.5, 1.0]];
        for p in ellipse(m, [1.0, -1.0], 0.3) {
            let d = [p[0] - 1.0, p[1] + 1.0];
            let q = m[0][0] * d[0] * d[0] + 2.0 * m[0][1] * d[0] * d[1] + m[1][1] * d[1] * d[1];
            assert!((q.sqrt() - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn guard_on_horizontal_facet_is_clipped() {
        // x2 = 1, x1 >= 1
        let g = Polytope::new(
            Matrix::from_row_slice(3, 2, &[0.0, 1.0, 0.0, -1.0, -1.0, 0.0]),
            Vector::from_vec(vec![1.0, -1.0, -1.0]),
        );
        let [a, b] = guard_segment(&g, [0.0, -1.0], -1.0, &unit_box()).unwrap();
        let (x_lo, x_hi) = (a[0].min(b[0]), a[0].max(b[0]));
        assert!((a[1] - 1.0).abs() < 1e-12 && (b[1] - 1.0).abs() < 1e-12);
        assert!((x_lo - 1.0).abs() < 1e-6 && (x_hi - 5.0).abs() < 1e-6);
    }

    #[test]
    fn guard_outside_box_is_dropped() {
        let g = Polytope::new(
            Matrix::from_row_slice(1, 2, &[-1.0, 0.0]),
            Vector::from_vec(vec![-10.0]),
        );
        assert!(guard_segment(&g, [0.0, 1.0], 0.0, &unit_box()).is_none());
    }

    #[test]
    fn box_clip_keeps_inner_box() {
        let p = Polytope::from_box(&Vector::from_vec(vec![0.2, 0.2]), &Vector::from_vec(vec![0.4, 0.4]));
        let ring = clip_box(&p, &unit_box());
        assert_eq!(ring.len(), 4);
        for q in ring {
            assert!((0.2 - 1e-12..=0.4 + 1e-12).contains(&q[0]));
            assert!((0.2 - 1e-12..=0.4 + 1e-12).contains(&q[1]));
        }
    }
}
