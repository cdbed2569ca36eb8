//! Robust neighborhoods: avoided sets, raw radii, shrinking for event-time
//! lag, recursion from the last segment to the first, and criticality.

use serde::{Deserialize, Serialize};

use crate::bisim::{
    dist_point_to_guard_minus_hole, dist_point_to_polytope, min_over_window, BallPreimage, DistanceResult,
    GuardGeometry, Metrics, QuadraticBisimFunction,
};
use crate::interval::Interval;
use crate::model::{EventId, HybridAutomaton, LocationId, Polytope, VerificationConfig};
use crate::search::{anchored_grid, bisect, golden_section};
use crate::simulate::{extend_segment, HybridTrajectory, TerminalStatus, TrajectorySegment};
use crate::{Matrix, Vector};

/// Shared read-only state for neighborhood computations.
pub struct Context<'a> {
    pub h: &'a HybridAutomaton,
    pub metrics: &'a Metrics,
    pub cfg: &'a VerificationConfig,
    active: Vec<Option<Polytope>>,
    normals: Vec<Vector>,
}

impl<'a> Context<'a> {
    pub fn new(h: &'a HybridAutomaton, metrics: &'a Metrics, cfg: &'a VerificationConfig) -> Self {
        let active = (0..h.events.len()).map(|i| h.active_guard(EventId(i))).collect();
        let normals = h
            .events
            .iter()
            .map(|e| h.location(e.source).invariant.row(e.facet))
            .collect();
        Context {
            h,
            metrics,
            cfg,
            active,
            normals,
        }
    }

    /// Active part of the guard, `None` if no guard point has outward flow.
    pub fn active_guard(&self, id: EventId) -> Option<&Polytope> {
        self.active[id.0].as_ref()
    }

    pub fn facet_normal(&self, id: EventId) -> &Vector {
        &self.normals[id.0]
    }

    pub fn metric(&self, loc: LocationId) -> &QuadraticBisimFunction {
        self.metrics.get(loc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighborhoodKind {
    Robust,
    Safe,
}

/// Open ball `{x | φ(center, x) < radius}` in the location's metric.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Neighborhood {
    pub location: LocationId,
    pub center: Vector,
    pub radius: f64,
    pub metric: Matrix,
    pub kind: NeighborhoodKind,
}

impl Neighborhood {
    pub fn contains(&self, x: &Vector) -> bool {
        crate::bisim::phi(&self.metric, &self.center, x) < self.radius
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriticalityClass {
    Noncritical,
    GuardCritical,
    UnsafeCritical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type", content = "index")]
pub enum Component {
    Unsafe(usize),
    Guard(usize),
}

/// The avoided-set component attaining a radius, with its witness.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub component: Component,
    pub value: f64,
    pub time: Option<f64>,
    pub point: Option<Vector>,
}

/// Allowed part of a guard: reset preimage of the next ball. `None` when the
/// next radius is zero (empty allowed part).
pub fn allowed_guard_part(h: &HybridAutomaton, event: EventId, next: &Neighborhood) -> Option<BallPreimage> {
    if !(next.radius > 0.0) {
        return None;
    }
    Some(BallPreimage {
        reset: h.event(event).reset.clone(),
        center: next.center.clone(),
        metric: next.metric.clone(),
        radius: next.radius,
    })
}

/// A guard in the avoided set. `hole` is carved out at all times; each
/// `windowed` hole only on its closed time window.
#[derive(Clone, Debug)]
pub struct GuardComponent {
    pub event: EventId,
    pub hole: Option<BallPreimage>,
    pub windowed: Vec<(Interval, BallPreimage)>,
}

impl GuardComponent {
    pub fn full(event: EventId) -> Self {
        GuardComponent {
            event,
            hole: None,
            windowed: Vec::new(),
        }
    }

    fn hole_at(&self, t: f64) -> Option<&BallPreimage> {
        self.windowed
            .iter()
            .find(|(iv, _)| iv.contains(t))
            .map(|(_, b)| b)
            .or(self.hole.as_ref())
    }
}

/// Avoided set of one location: unsafe polytopes plus guards with holes.
#[derive(Clone, Debug)]
pub struct AvoidedSet {
    pub location: LocationId,
    pub unsafe_sets: Vec<Polytope>,
    pub guards: Vec<GuardComponent>,
}

impl AvoidedSet {
    /// Unsafe sets and every guard of the location, all in full.
    pub fn full(h: &HybridAutomaton, loc: LocationId) -> Self {
        AvoidedSet {
            location: loc,
            unsafe_sets: h.unsafe_in(loc).to_vec(),
            guards: h.events_from(loc).map(|(id, _)| GuardComponent::full(id)).collect(),
        }
    }
}

/// φ-distance from `x` to a guard with an optional hole.
pub fn guard_distance(
    ctx: &Context<'_>,
    loc: LocationId,
    event: EventId,
    hole: Option<&BallPreimage>,
    x: &Vector,
) -> DistanceResult {
    let Some(active) = ctx.active_guard(event) else {
        return DistanceResult::infinite();
    };
    let geom = GuardGeometry {
        guard: active,
        normal: ctx.facet_normal(event),
    };
    dist_point_to_guard_minus_hole(ctx.metric(loc).inverse(), x, geom, hole)
}

/// Minimum over `[lo, hi]` of the distance to one unsafe polytope.
pub fn unsafe_min(ctx: &Context<'_>, seg: &TrajectorySegment, lo: f64, hi: f64, poly: &Polytope) -> DistanceResult {
    let minv = ctx.metric(seg.location).inverse();
    min_over_window(seg, lo, hi, &|x| dist_point_to_polytope(minv, x, poly), ctx.cfg)
}

/// Minimum over `[lo, hi]` of the distance to a guard with a fixed hole.
pub fn guard_min(
    ctx: &Context<'_>,
    seg: &TrajectorySegment,
    lo: f64,
    hi: f64,
    event: EventId,
    hole: Option<&BallPreimage>,
) -> DistanceResult {
    if ctx.active_guard(event).is_none() {
        return DistanceResult::infinite();
    }
    min_over_window(
        seg,
        lo,
        hi,
        &|x| guard_distance(ctx, seg.location, event, hole, x),
        ctx.cfg,
    )
}

/// Infimum of the distance to the unsafe part of the avoided set over the
/// whole segment, with the attaining component.
pub fn unsafe_radius(ctx: &Context<'_>, seg: &TrajectorySegment, avoided: &AvoidedSet) -> (f64, Option<Bottleneck>) {
    let mut best = (f64::INFINITY, None);
    for (i, poly) in avoided.unsafe_sets.iter().enumerate() {
        let r = unsafe_min(ctx, seg, seg.t0, seg.t_end, poly);
        if r.value < best.0 {
            best = (
                r.value,
                Some(Bottleneck {
                    component: Component::Unsafe(i),
                    value: r.value,
                    time: r.witness_time,
                    point: r.witness_point,
                }),
            );
        }
    }
    best
}

/// Raw robust radius `γ_a`: the smallest distance from the segment to any
/// avoided component over the segment's time span.
pub fn robust_radius_raw(
    ctx: &Context<'_>,
    seg: &TrajectorySegment,
    avoided: &AvoidedSet,
) -> (f64, Option<Bottleneck>) {
    let (mut value, mut bottleneck) = unsafe_radius(ctx, seg, avoided);
    for g in &avoided.guards {
        let r = guard_min(ctx, seg, seg.t0, seg.t_end, g.event, g.hole.as_ref());
        if r.value < value {
            value = r.value;
            bottleneck = Some(Bottleneck {
                component: Component::Guard(g.event.0),
                value: r.value,
                time: r.witness_time,
                point: r.witness_point,
            });
        }
    }
    (value, bottleneck)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkRecord {
    pub input: f64,
    pub output: f64,
    pub tau_lag: f64,
    /// `γ̃(τ_lag)`; never below `output`.
    pub gamma_tilde_at_lag: f64,
}

struct ExtensionProfile<'s> {
    ext: &'s TrajectorySegment,
    ts: Vec<f64>,
    /// Prefix minimum of the avoided-set distance at each grid point.
    avoid_prefix: Vec<f64>,
    /// Prefix maximum of the distance to the invariant at each grid point.
    inv_prefix: Vec<f64>,
}

fn phi_speed(q: &QuadraticBisimFunction, seg: &TrajectorySegment, t: f64) -> f64 {
    let v = seg.velocity_at(t);
    v.dot(&(&q.m * &v)).max(0.0).sqrt()
}

/// Minimum of `f` on `[a, b]` from endpoint values, refined by golden-section
/// search unless the speed bound rules out a dip below `floor`.
fn step_min(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fb: f64, speed: f64, floor: f64, tol: f64) -> f64 {
    let lo = fa.min(fb);
    if lo - speed * (b - a) * 0.5 >= floor || b <= a {
        return lo;
    }
    lo.min(golden_section(f, a, b, tol).1)
}

fn avoided_distance_at(ctx: &Context<'_>, avoided: &AvoidedSet, t: f64, x: &Vector) -> f64 {
    let loc = avoided.location;
    let minv = ctx.metric(loc).inverse();
    let mut d = f64::INFINITY;
    for poly in &avoided.unsafe_sets {
        d = d.min(dist_point_to_polytope(minv, x, poly).value);
    }
    for g in &avoided.guards {
        d = d.min(guard_distance(ctx, loc, g.event, g.hole_at(t), x).value);
    }
    d
}

fn invariant_distance(ctx: &Context<'_>, loc: LocationId, x: &Vector) -> f64 {
    dist_point_to_polytope(ctx.metric(loc).inverse(), x, &ctx.h.location(loc).invariant).value
}

impl<'s> ExtensionProfile<'s> {
    fn build(ctx: &Context<'_>, ext: &'s TrajectorySegment, avoided: &AvoidedSet, gamma: f64) -> Self {
        let cfg = ctx.cfg;
        let q = ctx.metric(ext.location);
        let mut ts = anchored_grid(ext.t0, ext.t_end, ext.anchor_time, cfg.time_grid_dt);
        for g in &avoided.guards {
            for (iv, _) in &g.windowed {
                for t in [iv.lo, iv.hi] {
                    if t > ext.t0 && t < ext.t_end {
                        ts.push(t);
                    }
                }
            }
        }
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let loc = ext.location;
        let xs: Vec<Vector> = ts.iter().map(|&t| ext.state_at(t)).collect();
        let speeds: Vec<f64> = ts.iter().map(|&t| phi_speed(q, ext, t)).collect();
        let mut avoid_prefix = Vec::with_capacity(ts.len());
        let mut inv_prefix = Vec::with_capacity(ts.len());
        let mut run_min = avoided_distance_at(ctx, avoided, ts[0], &xs[0]);
        let mut run_max = invariant_distance(ctx, loc, &xs[0]);
        avoid_prefix.push(run_min);
        inv_prefix.push(run_max);
        for k in 1..ts.len() {
            let (a, b) = (ts[k - 1], ts[k]);
            let mid = 0.5 * (a + b);
            // Each step lies on one side of every window edge; evaluate the
            // step with the hole rule of its midpoint, plus both edge rules.
            let f = |t: f64| {
                let x = ext.state_at(t);
                let mut d = f64::INFINITY;
                let minv = ctx.metric(loc).inverse();
                for poly in &avoided.unsafe_sets {
                    d = d.min(dist_point_to_polytope(minv, &x, poly).value);
                }
                for g in &avoided.guards {
                    d = d.min(guard_distance(ctx, loc, g.event, g.hole_at(mid), &x).value);
                }
                d
            };
            let fa = f(a);
            let fb = f(b);
            let speed = 2.0 * speeds[k - 1].max(speeds[k]) + 1e-12;
            let floor = run_min.min(gamma);
            let m = step_min(&f, a, b, fa, fb, speed, floor, cfg.event_tol);
            let at_b = avoided_distance_at(ctx, avoided, b, &xs[k]);
            run_min = run_min.min(m).min(at_b);
            run_max = run_max.max(invariant_distance(ctx, loc, &xs[k]));
            avoid_prefix.push(run_min);
            inv_prefix.push(run_max);
        }
        ExtensionProfile {
            ext,
            ts,
            avoid_prefix,
            inv_prefix,
        }
    }

    /// `(γ̃, dⁱⁿᵛ)` at an arbitrary time inside step `k` (between `ts[k-1]`
    /// and `ts[k]`).
    fn eval_in_step(&self, ctx: &Context<'_>, avoided: &AvoidedSet, gamma: f64, k: usize, t: f64) -> (f64, f64) {
        let a = self.ts[k - 1];
        let loc = self.ext.location;
        let mid = 0.5 * (a + t);
        let f = |s: f64| {
            let x = self.ext.state_at(s);
            let minv = ctx.metric(loc).inverse();
            let mut d = f64::INFINITY;
            for poly in &avoided.unsafe_sets {
                d = d.min(dist_point_to_polytope(minv, &x, poly).value);
            }
            for g in &avoided.guards {
                d = d.min(guard_distance(ctx, loc, g.event, g.hole_at(mid), &x).value);
            }
            d
        };
        let xt = self.ext.state_at(t);
        let piece = f(a).min(f(t)).min(golden_section(&f, a, t, ctx.cfg.event_tol).1);
        let piece = piece.min(avoided_distance_at(ctx, avoided, t, &xt));
        let gt = gamma.min(self.avoid_prefix[k - 1]).min(piece);
        let dinv = self.inv_prefix[k - 1].max(invariant_distance(ctx, loc, &xt));
        (gt, dinv)
    }
}

/// Shrinks `gamma` so that every trajectory from the shrunk ball leaves the
/// invariant within `τ_lag ≤ τ_maxlag` of the nominal exit without reaching
/// the avoided set on the way.
pub fn shrinking(ctx: &Context<'_>, seg: &TrajectorySegment, gamma: f64, avoided: &AvoidedSet) -> ShrinkRecord {
    if !(gamma > 0.0) {
        return ShrinkRecord {
            input: gamma.max(0.0),
            output: 0.0,
            tau_lag: 0.0,
            gamma_tilde_at_lag: 0.0,
        };
    }
    let cfg = ctx.cfg;
    let ext = extend_segment(seg, cfg.tau_maxlag, cfg.time_grid_dt);
    let prof = ExtensionProfile::build(ctx, &ext, avoided, gamma);
    let t_end = seg.t_end;
    let gt = |k: usize| gamma.min(prof.avoid_prefix[k]);
    let first = (0..prof.ts.len()).find(|&k| gt(k) <= prof.inv_prefix[k]);
    let last = prof.ts.len() - 1;
    match first {
        None => ShrinkRecord {
            input: gamma,
            output: prof.inv_prefix[last].min(gamma),
            tau_lag: prof.ts[last] - t_end,
            gamma_tilde_at_lag: gt(last),
        },
        Some(0) => ShrinkRecord {
            input: gamma,
            output: prof.inv_prefix[0].min(gt(0)),
            tau_lag: 0.0,
            gamma_tilde_at_lag: gt(0),
        },
        Some(k) => {
            let pred = |t: f64| {
                let (g, d) = prof.eval_in_step(ctx, avoided, gamma, k, t);
                g <= d
            };
            let (lo, _) = bisect(pred, prof.ts[k - 1], prof.ts[k], cfg.event_tol);
            let (g_lo, d_lo) = if lo <= prof.ts[k - 1] {
                (gt(k - 1), prof.inv_prefix[k - 1])
            } else {
                prof.eval_in_step(ctx, avoided, gamma, k, lo)
            };
            ShrinkRecord {
                input: gamma,
                output: d_lo.min(g_lo),
                tau_lag: lo - t_end,
                gamma_tilde_at_lag: g_lo,
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegmentRadius {
    pub location: LocationId,
    /// Radius before shrinking and capping.
    pub raw: f64,
    pub radius: f64,
    pub unsafe_distance: f64,
    pub bottleneck: Option<Bottleneck>,
    pub shrink: Option<ShrinkRecord>,
}

#[derive(Clone, Debug)]
pub struct RobustResult {
    pub neighborhoods: Vec<Neighborhood>,
    pub segments: Vec<SegmentRadius>,
    pub tau_lead: f64,
    pub tau_lag: Vec<f64>,
    pub class: CriticalityClass,
}

impl RobustResult {
    pub fn radii(&self) -> Vec<f64> {
        self.neighborhoods.iter().map(|n| n.radius).collect()
    }

    pub fn root(&self) -> &Neighborhood {
        &self.neighborhoods[0]
    }
}

/// Avoided set of segment `i` with the triggered guard's allowed part taken
/// from `next` (the neighborhood of segment `i + 1`).
pub fn segment_avoided_set(ctx: &Context<'_>, seg: &TrajectorySegment, next: Option<&Neighborhood>) -> AvoidedSet {
    let mut avoided = AvoidedSet::full(ctx.h, seg.location);
    if let (Some(exit), Some(next)) = (&seg.exit, next) {
        for g in &mut avoided.guards {
            if g.event == exit.event {
                g.hole = allowed_guard_part(ctx.h, exit.event, next);
            }
        }
    }
    avoided
}

/// Caps the radius and applies shrinking when the segment ends with an event.
pub fn finish_radius(
    ctx: &Context<'_>,
    seg: &TrajectorySegment,
    raw: f64,
    avoided: &AvoidedSet,
) -> (f64, Option<ShrinkRecord>) {
    let capped = raw.min(ctx.cfg.radius_cap).max(0.0);
    if seg.exit.is_some() {
        let s = shrinking(ctx, seg, capped, avoided);
        (s.output, Some(s))
    } else {
        (capped, None)
    }
}

/// Robust neighborhoods of every segment, computed from the last segment to
/// the first. Non-horizon trajectories get zero radii.
pub fn robust_neighborhood(ctx: &Context<'_>, traj: &HybridTrajectory) -> RobustResult {
    let n = traj.segments.len();
    let mut neighborhoods: Vec<Option<Neighborhood>> = vec![None; n];
    let mut segments: Vec<Option<SegmentRadius>> = vec![None; n];
    let blocked = traj.status == TerminalStatus::Blocked;
    for i in (0..n).rev() {
        let seg = &traj.segments[i];
        let q = ctx.metric(seg.location);
        let next = neighborhoods.get(i + 1).and_then(|o| o.as_ref());
        let avoided = segment_avoided_set(ctx, seg, next);
        let (raw, bottleneck) = robust_radius_raw(ctx, seg, &avoided);
        let (du, _) = unsafe_radius(ctx, seg, &avoided);
        let (radius, shrink) = if blocked {
            (0.0, None)
        } else {
            finish_radius(ctx, seg, raw, &avoided)
        };
        neighborhoods[i] = Some(Neighborhood {
            location: seg.location,
            center: seg.start_state(),
            radius,
            metric: q.m.clone(),
            kind: NeighborhoodKind::Robust,
        });
        segments[i] = Some(SegmentRadius {
            location: seg.location,
            raw,
            radius,
            unsafe_distance: du,
            bottleneck,
            shrink,
        });
    }
    let neighborhoods: Vec<Neighborhood> = neighborhoods.into_iter().map(Option::unwrap).collect();
    let segments: Vec<SegmentRadius> = segments.into_iter().map(Option::unwrap).collect();
    let class = classify_trajectory(&segments, ctx.cfg.dist_tol);
    RobustResult {
        tau_lag: segments
            .iter()
            .map(|s| s.shrink.as_ref().map_or(0.0, |r| r.tau_lag))
            .collect(),
        tau_lead: ctx.cfg.tau_maxlead,
        neighborhoods,
        segments,
        class,
    }
}

/// Noncritical when every raw radius is positive; otherwise unsafe-critical
/// if some segment reaches the unsafe closure, guard-critical if not.
pub fn classify_trajectory(segments: &[SegmentRadius], tol: f64) -> CriticalityClass {
    if segments.iter().any(|s| s.unsafe_distance <= tol) {
        return CriticalityClass::UnsafeCritical;
    }
    if segments.iter().all(|s| s.raw > tol) {
        CriticalityClass::Noncritical
    } else {
        CriticalityClass::GuardCritical
    }
}
