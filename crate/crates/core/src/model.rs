//! Hybrid automaton data model, model-file parsing and assumption checks.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qp::{project_with, MetricInverse};
use crate::{Matrix, Vector};

/// Geometric slack used when checking guard placement and disjointness.
pub const GEOMETRY_TOL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{field}: expected {expected} entries, got {got}")]
    Dimension { field: String, expected: usize, got: usize },
    #[error("{field}: unknown location id `{id}`")]
    UnknownLocation { field: String, id: String },
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LocationId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventId(pub usize);

impl fmt::Display for LocationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Halfspace polytope `{x | H x ≤ h}`. Equalities are stored as two opposite
/// inequalities. Zero rows means the whole space.
#[derive(Clone, Debug, PartialEq)]
pub struct Polytope {
    h_mat: Matrix,
    h_vec: Vector,
}

impl Polytope {
    pub fn new(h_mat: Matrix, h_vec: Vector) -> Self {
        assert_eq!(h_mat.nrows(), h_vec.len(), "row count mismatch");
        Polytope { h_mat, h_vec }
    }

    pub fn whole_space(n: usize) -> Self {
        Polytope::new(Matrix::zeros(0, n), Vector::zeros(0))
    }

    pub fn from_box(lo: &Vector, hi: &Vector) -> Self {
        let n = lo.len();
        let mut h = Matrix::zeros(2 * n, n);
        let mut r = Vector::zeros(2 * n);
        for i in 0..n {
            h[(2 * i, i)] = 1.0;
            r[2 * i] = hi[i];
            h[(2 * i + 1, i)] = -1.0;
            r[2 * i + 1] = -lo[i];
        }
        Polytope::new(h, r)
    }

    pub fn dim(&self) -> usize {
        self.h_mat.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.h_mat.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.h_mat
    }

    pub fn rhs(&self) -> &Vector {
        &self.h_vec
    }

    pub fn row(&self, i: usize) -> Vector {
        self.h_mat.row(i).transpose()
    }

    /// `H x ≤ h` with no slack at all.
    pub fn contains_exact(&self, x: &Vector) -> bool {
        (0..self.nrows()).all(|i| self.h_mat.row(i).transpose().dot(x) <= self.h_vec[i])
    }

    /// Membership with a slack scaled by each row norm.
    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        (0..self.nrows()).all(|i| {
            let row = self.row(i);
            row.dot(x) - self.h_vec[i] <= tol * (1.0 + row.norm())
        })
    }

    /// Signed slack `H_i x - h_i` of a single row.
    pub fn row_value(&self, i: usize, x: &Vector) -> f64 {
        self.h_mat.row(i).transpose().dot(x) - self.h_vec[i]
    }

    pub fn with_row(&self, row: &Vector, rhs: f64) -> Polytope {
        let m = self.nrows();
        let mut h = self.h_mat.clone().insert_row(m, 0.0);
        h.set_row(m, &row.transpose());
        let mut r = self.h_vec.clone().insert_row(m, 0.0);
        r[m] = rhs;
        Polytope::new(h, r)
    }

    pub fn intersect(&self, other: &Polytope) -> Polytope {
        let mut out = self.clone();
        for i in 0..other.nrows() {
            out = out.with_row(&other.row(i), other.h_vec[i]);
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        if self.nrows() == 0 {
            return false;
        }
        let n = self.dim();
        project_with(&Matrix::identity(n, n), &Vector::zeros(n), self).is_none()
    }

    /// Index pairs `(i, j)` of rows forming an equality `H_i = -H_j, h_i = -h_j`.
    pub fn equality_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.nrows() {
            for j in (i + 1)..self.nrows() {
                let s = self.row(i) + self.row(j);
                if s.amax() <= 1e-12 * (1.0 + self.row(i).amax())
                    && (self.h_vec[i] + self.h_vec[j]).abs() <= 1e-12 * (1.0 + self.h_vec[i].abs())
                {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Tightens every non-equality row by `eps` (scaled by the row norm).
    /// Empty result means the polytope has no relative interior beyond `eps`.
    pub fn shrink_inequalities(&self, eps: f64) -> Polytope {
        let eq: Vec<usize> = self.equality_pairs().into_iter().flat_map(|(i, j)| [i, j]).collect();
        let mut r = self.h_vec.clone();
        for i in 0..self.nrows() {
            if !eq.contains(&i) {
                r[i] -= eps * self.row(i).norm();
            }
        }
        Polytope::new(self.h_mat.clone(), r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    pub matrix: Matrix,
    pub offset: Vector,
}

impl AffineMap {
    pub fn identity(n: usize) -> Self {
        AffineMap {
            matrix: Matrix::identity(n, n),
            offset: Vector::zeros(n),
        }
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        &self.matrix * x + &self.offset
    }
}

#[derive(Clone, Debug)]
pub struct Location {
    pub id: String,
    pub a: Matrix,
    pub b: Vector,
    pub invariant: Polytope,
    /// User-supplied bisimulation metric overriding the Lyapunov default.
    pub metric: Option<Matrix>,
    /// Invariant has empty interior (detected at load time).
    pub degenerate_invariant: bool,
}

impl Location {
    pub fn vector_field(&self, x: &Vector) -> Vector {
        &self.a * x + &self.b
    }
}

#[derive(Clone, Debug)]
pub struct EventDef {
    pub name: String,
    pub source: LocationId,
    pub target: LocationId,
    pub guard: Polytope,
    /// Invariant row of the source location whose boundary carries the guard.
    pub facet: usize,
    pub reset: AffineMap,
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitialSet {
    Point(Vector),
    Box { lo: Vector, hi: Vector },
}

impl InitialSet {
    pub fn bounds(&self) -> (Vector, Vector) {
        match self {
            InitialSet::Point(p) => (p.clone(), p.clone()),
            InitialSet::Box { lo, hi } => (lo.clone(), hi.clone()),
        }
    }

    pub fn center(&self) -> Vector {
        let (lo, hi) = self.bounds();
        (lo + hi) * 0.5
    }
}

#[derive(Clone, Debug)]
pub struct HybridAutomaton {
    pub dimension: usize,
    pub locations: Vec<Location>,
    pub events: Vec<EventDef>,
    pub initial_location: LocationId,
    pub initial: InitialSet,
    /// Unsafe polytopes per location, indexed by `LocationId`.
    pub unsafe_sets: Vec<Vec<Polytope>>,
}

impl HybridAutomaton {
    pub fn location(&self, id: LocationId) -> &Location {
        &self.locations[id.0]
    }

    pub fn event(&self, id: EventId) -> &EventDef {
        &self.events[id.0]
    }

    pub fn location_by_name(&self, name: &str) -> Option<LocationId> {
        self.locations.iter().position(|l| l.id == name).map(LocationId)
    }

    pub fn events_from(&self, loc: LocationId) -> impl Iterator<Item = (EventId, &EventDef)> {
        self.events
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.source == loc)
            .map(|(i, e)| (EventId(i), e))
    }

    pub fn unsafe_in(&self, loc: LocationId) -> &[Polytope] {
        &self.unsafe_sets[loc.0]
    }

    /// Closure of the active part of a guard: guard points where the flow
    /// does not point back into the invariant across the guard's facet.
    /// `None` when no point of the guard has outward flow.
    pub fn active_guard(&self, id: EventId) -> Option<Polytope> {
        let ev = self.event(id);
        let loc = self.location(ev.source);
        let normal = loc.invariant.row(ev.facet);
        // outward component nᵀ(A y + b) ≥ 0  ⇔  -(nᵀA) y ≤ nᵀb
        let row = -(loc.a.transpose() * &normal);
        let rhs = normal.dot(&loc.b);
        if row.amax() <= 1e-14 {
            return if rhs > 0.0 { Some(ev.guard.clone()) } else { None };
        }
        let g = ev.guard.with_row(&row, rhs);
        if g.is_empty() {
            None
        } else {
            Some(g)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationConfig {
    pub d_thr: f64,
    pub tau_maxlead: f64,
    pub tau_maxlag: f64,
    pub alpha: f64,
    pub t_end: f64,
    pub event_tol: f64,
    pub dist_tol: f64,
    pub time_grid_dt: f64,
    pub max_recursion_depth: usize,
    pub coverage_max_depth: usize,
    pub radius_cap: f64,
    pub max_events: usize,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        VerificationConfig {
            d_thr: 0.0,
            tau_maxlead: 0.1,
            tau_maxlag: 0.1,
            alpha: 0.9,
            t_end: 1.0,
            event_tol: 1e-9,
            dist_tol: 1e-9,
            time_grid_dt: 1e-3,
            max_recursion_depth: 8,
            coverage_max_depth: 8,
            radius_cap: 1e6,
            max_events: 10_000,
        }
    }
}

impl VerificationConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field: &str, reason: &str| {
            Err(ModelError::Invalid {
                field: format!("config.{field}"),
                reason: reason.to_string(),
            })
        };
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha", "must lie in (0, 1)");
        }
        for (name, v) in [
            ("event_tol", self.event_tol),
            ("dist_tol", self.dist_tol),
            ("time_grid_dt", self.time_grid_dt),
            ("radius_cap", self.radius_cap),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, "must be positive");
            }
        }
        for (name, v) in [
            ("tau_maxlead", self.tau_maxlead),
            ("tau_maxlag", self.tau_maxlag),
            ("d_thr", self.d_thr),
            ("t_end", self.t_end),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, "must be non-negative");
            }
        }
        Ok(())
    }
}

/// A parsed model file: the automaton plus its verification settings.
#[derive(Clone, Debug)]
pub struct ModelDocument {
    pub automaton: HybridAutomaton,
    pub config: VerificationConfig,
}

// ---------------------------------------------------------------------------
// File schema

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolytope {
    #[serde(rename = "H", default)]
    h_mat: Vec<f64>,
    #[serde(default)]
    h: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLocation {
    id: String,
    #[serde(rename = "A")]
    a: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<Vec<f64>>,
    #[serde(default)]
    invariant: RawPolytope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metric: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReset {
    #[serde(rename = "R")]
    r: Vec<f64>,
    #[serde(default)]
    s: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    source: String,
    target: String,
    guard: RawPolytope,
    facet: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reset: Option<RawReset>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUnsafe {
    location: String,
    #[serde(rename = "H")]
    h_mat: Vec<f64>,
    h: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    location: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    point: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lo: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hi: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d_thr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau_maxlead: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau_maxlag: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    event_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dist_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time_grid_dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_recursion_depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coverage_max_depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    radius_cap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_events: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDocument {
    dimension: usize,
    locations: Vec<RawLocation>,
    #[serde(default)]
    events: Vec<RawEvent>,
    #[serde(rename = "unsafe", default)]
    unsafe_sets: Vec<RawUnsafe>,
    initial: RawInitial,
    #[serde(default)]
    config: RawConfig,
}

fn check_len(field: &str, v: &[f64], expected: usize) -> Result<(), ModelError> {
    if v.len() != expected {
        return Err(ModelError::Dimension {
            field: field.to_string(),
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

fn square(field: &str, v: &[f64], n: usize) -> Result<Matrix, ModelError> {
    check_len(field, v, n * n)?;
    Ok(Matrix::from_row_slice(n, n, v))
}

fn vector(field: &str, v: &[f64], n: usize) -> Result<Vector, ModelError> {
    check_len(field, v, n)?;
    Ok(Vector::from_column_slice(v))
}

fn polytope(field: &str, h_mat: &[f64], h: &[f64], n: usize) -> Result<Polytope, ModelError> {
    let m = h.len();
    check_len(&format!("{field}.H"), h_mat, m * n)?;
    Ok(Polytope::new(
        Matrix::from_row_slice(m, n, h_mat),
        Vector::from_column_slice(h),
    ))
}

fn lookup(names: &[String], field: &str, id: &str) -> Result<LocationId, ModelError> {
    names
        .iter()
        .position(|n| n == id)
        .map(LocationId)
        .ok_or_else(|| ModelError::UnknownLocation {
            field: field.to_string(),
            id: id.to_string(),
        })
}

fn flatten(m: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn raw_polytope(p: &Polytope) -> RawPolytope {
    RawPolytope {
        h_mat: flatten(p.matrix()),
        h: p.rhs().iter().copied().collect(),
    }
}

/// Parses a model document (TOML). See `models/three_location.toml` for the
/// reference layout.
pub fn load_document(text: &str) -> Result<ModelDocument, ModelError> {
    let raw: RawDocument = toml::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
    let n = raw.dimension;
    if n == 0 {
        return Err(ModelError::Invalid {
            field: "dimension".into(),
            reason: "must be positive".into(),
        });
    }
    if raw.locations.is_empty() {
        return Err(ModelError::Invalid {
            field: "locations".into(),
            reason: "at least one location is required".into(),
        });
    }
    let names: Vec<String> = raw.locations.iter().map(|l| l.id.clone()).collect();
    for (i, name) in names.iter().enumerate() {
        if names[..i].contains(name) {
            return Err(ModelError::Invalid {
                field: format!("locations[{i}].id"),
                reason: format!("duplicate id `{name}`"),
            });
        }
    }

    let mut locations = Vec::with_capacity(raw.locations.len());
    for (i, rl) in raw.locations.iter().enumerate() {
        let f = format!("locations[{i}]");
        let a = square(&format!("{f}.A"), &rl.a, n)?;
        let b = match &rl.b {
            Some(b) => vector(&format!("{f}.b"), b, n)?,
            None => Vector::zeros(n),
        };
        let invariant = polytope(&format!("{f}.invariant"), &rl.invariant.h_mat, &rl.invariant.h, n)?;
        if invariant.is_empty() {
            return Err(ModelError::Invalid {
                field: format!("{f}.invariant"),
                reason: "invariant is empty".into(),
            });
        }
        let metric = match &rl.metric {
            Some(m) => Some(square(&format!("{f}.metric"), m, n)?),
            None => None,
        };
        let degenerate_invariant = invariant.nrows() > 0 && invariant.shrink_inequalities(GEOMETRY_TOL).is_empty();
        locations.push(Location {
            id: rl.id.clone(),
            a,
            b,
            invariant,
            metric,
            degenerate_invariant,
        });
    }

    let mut events = Vec::with_capacity(raw.events.len());
    for (i, re) in raw.events.iter().enumerate() {
        let f = format!("events[{i}]");
        let source = lookup(&names, &format!("{f}.source"), &re.source)?;
        let target = lookup(&names, &format!("{f}.target"), &re.target)?;
        let guard = polytope(&format!("{f}.guard"), &re.guard.h_mat, &re.guard.h, n)?;
        if re.facet >= locations[source.0].invariant.nrows() {
            return Err(ModelError::Invalid {
                field: format!("{f}.facet"),
                reason: format!(
                    "facet {} out of range: invariant of `{}` has {} rows",
                    re.facet,
                    re.source,
                    locations[source.0].invariant.nrows()
                ),
            });
        }
        let reset = match &re.reset {
            Some(r) => AffineMap {
                matrix: square(&format!("{f}.reset.R"), &r.r, n)?,
                offset: match &r.s {
                    Some(s) => vector(&format!("{f}.reset.s"), s, n)?,
                    None => Vector::zeros(n),
                },
            },
            None => AffineMap::identity(n),
        };
        events.push(EventDef {
            name: re.name.clone().unwrap_or_else(|| format!("e{i}")),
            source,
            target,
            guard,
            facet: re.facet,
            reset,
        });
    }

    let mut unsafe_sets = vec![Vec::new(); locations.len()];
    for (i, ru) in raw.unsafe_sets.iter().enumerate() {
        let f = format!("unsafe[{i}]");
        let loc = lookup(&names, &format!("{f}.location"), &ru.location)?;
        unsafe_sets[loc.0].push(polytope(&f, &ru.h_mat, &ru.h, n)?);
    }

    let initial_location = lookup(&names, "initial.location", &raw.initial.location)?;
    let initial = match (&raw.initial.point, &raw.initial.lo, &raw.initial.hi) {
        (Some(p), None, None) => InitialSet::Point(vector("initial.point", p, n)?),
        (None, Some(lo), Some(hi)) => {
            let lo = vector("initial.lo", lo, n)?;
            let hi = vector("initial.hi", hi, n)?;
            if (0..n).any(|i| lo[i] > hi[i]) {
                return Err(ModelError::Invalid {
                    field: "initial".into(),
                    reason: "lo must not exceed hi".into(),
                });
            }
            InitialSet::Box { lo, hi }
        }
        _ => {
            return Err(ModelError::Invalid {
                field: "initial".into(),
                reason: "give either `point` or both `lo` and `hi`".into(),
            })
        }
    };

    let automaton = HybridAutomaton {
        dimension: n,
        locations,
        events,
        initial_location,
        initial,
        unsafe_sets,
    };

    let d = VerificationConfig::default();
    let rc = &raw.config;
    let d_thr = match rc.d_thr {
        Some(v) => v,
        None => default_d_thr(&automaton),
    };
    let config = VerificationConfig {
        d_thr,
        tau_maxlead: rc.tau_maxlead.unwrap_or(d.tau_maxlead),
        tau_maxlag: rc.tau_maxlag.unwrap_or(d.tau_maxlag),
        alpha: rc.alpha.unwrap_or(d.alpha),
        t_end: rc.t_end.unwrap_or(d.t_end),
        event_tol: rc.event_tol.unwrap_or(d.event_tol),
        dist_tol: rc.dist_tol.unwrap_or(d.dist_tol),
        time_grid_dt: rc.time_grid_dt.unwrap_or(d.time_grid_dt),
        max_recursion_depth: rc.max_recursion_depth.unwrap_or(d.max_recursion_depth),
        coverage_max_depth: rc.coverage_max_depth.unwrap_or(d.coverage_max_depth),
        radius_cap: rc.radius_cap.unwrap_or(d.radius_cap),
        max_events: rc.max_events.unwrap_or(d.max_events),
    };
    config.validate()?;
    Ok(ModelDocument { automaton, config })
}

/// Parses a model document and returns only the automaton.
pub fn load_model(text: &str) -> Result<HybridAutomaton, ModelError> {
    load_document(text).map(|d| d.automaton)
}

/// Default proximity threshold: a fifth of the initial set's diameter in the
/// initial location's metric (Euclidean when no metric can be built).
pub fn default_d_thr(h: &HybridAutomaton) -> f64 {
    let (lo, hi) = h.initial.bounds();
    let diag = hi - lo;
    let loc = h.location(h.initial_location);
    let m = match &loc.metric {
        Some(m) => m.clone(),
        None => crate::bisim::solve_lyapunov(&loc.a, &Matrix::identity(h.dimension, h.dimension))
            .unwrap_or_else(|_| Matrix::identity(h.dimension, h.dimension)),
    };
    0.2 * diag.dot(&(m * &diag)).max(0.0).sqrt()
}

/// Serializes a document back to the TOML schema accepted by [`load_document`].
pub fn to_toml_string(doc: &ModelDocument) -> String {
    let h = &doc.automaton;
    let name = |id: LocationId| h.location(id).id.clone();
    let raw = RawDocument {
        dimension: h.dimension,
        locations: h
            .locations
            .iter()
            .map(|l| RawLocation {
                id: l.id.clone(),
                a: flatten(&l.a),
                b: Some(l.b.iter().copied().collect()),
                invariant: raw_polytope(&l.invariant),
                metric: l.metric.as_ref().map(flatten),
            })
            .collect(),
        events: h
            .events
            .iter()
            .map(|e| RawEvent {
                name: Some(e.name.clone()),
                source: name(e.source),
                target: name(e.target),
                guard: raw_polytope(&e.guard),
                facet: e.facet,
                reset: Some(RawReset {
                    r: flatten(&e.reset.matrix),
                    s: Some(e.reset.offset.iter().copied().collect()),
                }),
            })
            .collect(),
        unsafe_sets: h
            .unsafe_sets
            .iter()
            .enumerate()
            .flat_map(|(i, ps)| {
                ps.iter().map(move |p| RawUnsafe {
                    location: h.locations[i].id.clone(),
                    h_mat: flatten(p.matrix()),
                    h: p.rhs().iter().copied().collect(),
                })
            })
            .collect(),
        initial: match &h.initial {
            InitialSet::Point(p) => RawInitial {
                location: name(h.initial_location),
                point: Some(p.iter().copied().collect()),
                lo: None,
                hi: None,
            },
            InitialSet::Box { lo, hi } => RawInitial {
                location: name(h.initial_location),
                point: None,
                lo: Some(lo.iter().copied().collect()),
                hi: Some(hi.iter().copied().collect()),
            },
        },
        config: {
            let c = &doc.config;
            RawConfig {
                d_thr: Some(c.d_thr),
                tau_maxlead: Some(c.tau_maxlead),
                tau_maxlag: Some(c.tau_maxlag),
                alpha: Some(c.alpha),
                t_end: Some(c.t_end),
                event_tol: Some(c.event_tol),
                dist_tol: Some(c.dist_tol),
                time_grid_dt: Some(c.time_grid_dt),
                max_recursion_depth: Some(c.max_recursion_depth),
                coverage_max_depth: Some(c.coverage_max_depth),
                radius_cap: Some(c.radius_cap),
                max_events: Some(c.max_events),
            }
        },
    };
    toml::to_string(&raw).expect("model document serializes")
}

// ---------------------------------------------------------------------------
// Model checks

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiagnosticKind {
    GuardsOverlap,
    GuardNotOnFacet,
    GuardOutsideInvariant,
    DegenerateInvariant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub message: String,
}

fn slab_violated(guard: &Polytope, normal: &Vector, rhs: f64, above: bool) -> bool {
    // Is {y ∈ guard | nᵀy ≥ rhs + tol} (above) or {nᵀy ≤ rhs - tol} nonempty?
    let tol = GEOMETRY_TOL * (1.0 + normal.norm());
    let probe = if above {
        guard.with_row(&(-normal), -(rhs + tol))
    } else {
        guard.with_row(normal, rhs - tol)
    };
    !probe.is_empty()
}

/// Guards on the same facet overlap when their intersection keeps a relative
/// interior after tightening every inequality by the geometric tolerance.
/// Guards on different facets can only meet on a lower-dimensional face.
pub fn guards_overlap(a: &EventDef, b: &EventDef) -> bool {
    if a.source != b.source || a.facet != b.facet {
        return false;
    }
    let inter = a.guard.intersect(&b.guard);
    !inter.shrink_inequalities(GEOMETRY_TOL).is_empty()
}

/// Checks guard placement and pairwise disjointness. Affine dynamics always
/// admit unique global solutions and affine resets are continuous, so those
/// assumptions hold by construction.
pub fn validate_assumptions(h: &HybridAutomaton) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for loc in &h.locations {
        if loc.degenerate_invariant {
            out.push(Diagnostic {
                kind: DiagnosticKind::DegenerateInvariant,
                message: format!("invariant of `{}` has empty interior", loc.id),
            });
        }
    }
    for ev in &h.events {
        let inv = &h.location(ev.source).invariant;
        let normal = inv.row(ev.facet);
        let rhs = inv.rhs()[ev.facet];
        if slab_violated(&ev.guard, &normal, rhs, true) || slab_violated(&ev.guard, &normal, rhs, false) {
            out.push(Diagnostic {
                kind: DiagnosticKind::GuardNotOnFacet,
                message: format!(
                    "guard of event `{}` is not on facet {} of `{}`",
                    ev.name,
                    ev.facet,
                    h.location(ev.source).id
                ),
            });
        }
        for j in 0..inv.nrows() {
            if j != ev.facet && slab_violated(&ev.guard, &inv.row(j), inv.rhs()[j], true) {
                out.push(Diagnostic {
                    kind: DiagnosticKind::GuardOutsideInvariant,
                    message: format!(
                        "guard of event `{}` leaves the invariant of `{}` across row {j}",
                        ev.name,
                        h.location(ev.source).id
                    ),
                });
                break;
            }
        }
    }
    for (i, a) in h.events.iter().enumerate() {
        for b in &h.events[i + 1..] {
            if guards_overlap(a, b) {
                out.push(Diagnostic {
                    kind: DiagnosticKind::GuardsOverlap,
                    message: format!("guards of `{}` and `{}` overlap", a.name, b.name),
                });
            }
        }
    }
    out
}

/// Euclidean distance-based containment with a metric, used by tests and
/// diagnostics.
pub fn distance_to(poly: &Polytope, x: &Vector) -> f64 {
    let n = x.len();
    crate::qp::project(&MetricInverse::new(&Matrix::identity(n, n)), x, poly)
        .map(|p| p.distance())
        .unwrap_or(f64::INFINITY)
}
