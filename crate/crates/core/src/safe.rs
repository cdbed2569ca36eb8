//! Safe neighborhoods. Around each close approach of the nominal trajectory
//! to a guard it does not trigger (a pivot), a branch trajectory is simulated
//! through that guard and its own safe neighborhood defines an allowed part
//! of the guard for a short time window. The certified ball only guarantees
//! safety; trajectories from it may follow any path of the event tree.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::bisim::{phi, BallPreimage, Metrics};
use crate::interval::{Interval, IntervalSet};
use crate::linalg::{cholesky_thresholded, sym_max_eigenvalue};
use crate::model::{EventId, HybridAutomaton, LocationId, VerificationConfig};
use crate::robust::{
    allowed_guard_part, finish_radius, guard_distance, guard_min, unsafe_radius, AvoidedSet, Context, Neighborhood,
    NeighborhoodKind, ShrinkRecord,
};
use crate::search::{anchored_grid, golden_section};
use crate::simulate::{simulate, HybridTrajectory, TerminalStatus, TrajectorySegment};
use crate::{Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SafeDiagnosticKind {
    RecursionDepthExceeded,
    BranchBlocked,
    SimulationError,
    WindowFallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafeDiagnostic {
    pub kind: SafeDiagnosticKind,
    pub location: LocationId,
    pub time: f64,
    pub depth: usize,
}

/// One proximal guard of a pivot and the branch simulated through it.
#[derive(Clone, Debug)]
pub struct ProximalBranch {
    pub event: EventId,
    /// Closest guard point to the nominal state at the pivot time.
    pub proximal_state: Vector,
    pub reset_state: Vector,
    pub child: Arc<SafeNode>,
    /// Largest φ-radius around the proximal state that maps into the child ball.
    pub preimage_radius: f64,
    pub hole: Option<BallPreimage>,
}

#[derive(Clone, Debug)]
pub struct Pivot {
    pub time: f64,
    /// `[t - τ_lead, t + τ_lag]` as accepted by the window search.
    pub window: Interval,
    /// The window minus all earlier windows.
    pub effective: IntervalSet,
    pub branches: Vec<ProximalBranch>,
    pub distance: f64,
    /// The window condition failed at the pivot itself: no allowed part.
    pub fallback: bool,
}

#[derive(Clone, Debug)]
pub struct SafeSegment {
    pub location: LocationId,
    pub unsafe_distance: f64,
    pub proximity: f64,
    pub guard_distance: f64,
    pub pivots: Vec<Pivot>,
    /// `min(dᵘ, dᵍ, d⁽¹⁾, …)` before capping and shrinking.
    pub raw: f64,
    pub radius: f64,
    pub shrink: Option<ShrinkRecord>,
    /// Allowed part of the triggered guard, from the next segment's ball.
    pub triggered_hole: Option<BallPreimage>,
}

/// Result of one safe-neighborhood computation, including its branches.
#[derive(Clone, Debug)]
pub struct SafeNode {
    pub location: LocationId,
    pub x0: Vector,
    pub t0: f64,
    pub t_end: f64,
    pub depth: usize,
    pub trajectory: Option<HybridTrajectory>,
    pub segments: Vec<SafeSegment>,
    pub neighborhoods: Vec<Neighborhood>,
    pub diagnostics: Vec<SafeDiagnostic>,
}

impl SafeNode {
    pub fn radius(&self) -> f64 {
        self.neighborhoods.first().map_or(0.0, |n| n.radius)
    }

    pub fn radii(&self) -> Vec<f64> {
        self.neighborhoods.iter().map(|n| n.radius).collect()
    }

    pub fn root(&self) -> &Neighborhood {
        &self.neighborhoods[0]
    }

    /// Diagnostics of this node and all of its branches.
    pub fn all_diagnostics(&self) -> Vec<SafeDiagnostic> {
        let mut out = self.diagnostics.clone();
        for s in &self.segments {
            for p in &s.pivots {
                for b in &p.branches {
                    out.extend(b.child.all_diagnostics());
                }
            }
        }
        out
    }
}

type NodeKey = (usize, Vec<u64>, u64, u64);

/// Safe-neighborhood solver with a per-solver cache of branch results.
pub struct SafeSolver<'a> {
    ctx: Context<'a>,
    cache: Mutex<HashMap<NodeKey, Arc<SafeNode>>>,
    simulations: AtomicUsize,
}

impl<'a> SafeSolver<'a> {
    pub fn new(h: &'a HybridAutomaton, metrics: &'a Metrics, cfg: &'a VerificationConfig) -> Self {
        SafeSolver {
            ctx: Context::new(h, metrics, cfg),
            cache: Mutex::new(HashMap::new()),
            simulations: AtomicUsize::new(0),
        }
    }

    pub fn context(&self) -> &Context<'a> {
        &self.ctx
    }

    /// Number of trajectories simulated so far, branches included.
    pub fn simulations(&self) -> usize {
        self.simulations.load(Ordering::Relaxed)
    }

    /// Safe neighborhoods of every segment of the trajectory from `(loc, x0)`
    /// over `[t0, t_end]`.
    pub fn solve(&self, loc: LocationId, x0: &Vector, t0: f64, t_end: f64) -> Arc<SafeNode> {
        self.node(loc, x0, t0, t_end, 0)
    }

    fn node(&self, loc: LocationId, x0: &Vector, t0: f64, t_end: f64, depth: usize) -> Arc<SafeNode> {
        let key: NodeKey = (
            loc.0,
            x0.iter().map(|v| v.to_bits()).collect(),
            t0.to_bits(),
            t_end.to_bits(),
        );
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            if hit.depth <= depth {
                return hit.clone();
            }
        }
        let node = Arc::new(self.compute(loc, x0, t0, t_end, depth));
        self.cache
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| node.clone())
            .clone()
    }

    fn zero_node(
        &self,
        loc: LocationId,
        x0: &Vector,
        t0: f64,
        t_end: f64,
        depth: usize,
        traj: Option<HybridTrajectory>,
        kind: SafeDiagnosticKind,
    ) -> SafeNode {
        let q = self.ctx.metric(loc);
        let segs = traj.as_ref().map_or(1, |t| t.segments.len());
        let neighborhoods = (0..segs)
            .map(|i| {
                let (l, c) = match &traj {
                    Some(t) => (t.segments[i].location, t.segments[i].start_state()),
                    None => (loc, x0.clone()),
                };
                Neighborhood {
                    location: l,
                    center: c,
                    radius: 0.0,
                    metric: if l == loc {
                        q.m.clone()
                    } else {
                        self.ctx.metric(l).m.clone()
                    },
                    kind: NeighborhoodKind::Safe,
                }
            })
            .collect();
        SafeNode {
            location: loc,
            x0: x0.clone(),
            t0,
            t_end,
            depth,
            trajectory: traj,
            segments: Vec::new(),
            neighborhoods,
            diagnostics: vec![SafeDiagnostic {
                kind,
                location: loc,
                time: t0,
                depth,
            }],
        }
    }

    fn compute(&self, loc: LocationId, x0: &Vector, t0: f64, t_end: f64, depth: usize) -> SafeNode {
        let ctx = &self.ctx;
        self.simulations.fetch_add(1, Ordering::Relaxed);
        let traj = match simulate(ctx.h, loc, x0, t0, t_end, ctx.cfg) {
            Ok(t) => t,
            Err(_) => return self.zero_node(loc, x0, t0, t_end, depth, None, SafeDiagnosticKind::SimulationError),
        };
        if depth > ctx.cfg.max_recursion_depth {
            return self.zero_node(
                loc,
                x0,
                t0,
                t_end,
                depth,
                Some(traj),
                SafeDiagnosticKind::RecursionDepthExceeded,
            );
        }
        if traj.status == TerminalStatus::Blocked {
            return self.zero_node(loc, x0, t0, t_end, depth, Some(traj), SafeDiagnosticKind::BranchBlocked);
        }
        let n = traj.segments.len();
        let mut segments: Vec<Option<SafeSegment>> = vec![None; n];
        let mut neighborhoods: Vec<Option<Neighborhood>> = vec![None; n];
        let mut diagnostics = Vec::new();
        for i in (0..n).rev() {
            let seg = &traj.segments[i];
            let next = neighborhoods.get(i + 1).and_then(|o| o.as_ref());
            let s = self.segment(seg, next, t_end, depth, &mut diagnostics);
            neighborhoods[i] = Some(Neighborhood {
                location: seg.location,
                center: seg.start_state(),
                radius: s.radius,
                metric: ctx.metric(seg.location).m.clone(),
                kind: NeighborhoodKind::Safe,
            });
            segments[i] = Some(s);
        }
        SafeNode {
            location: loc,
            x0: x0.clone(),
            t0,
            t_end,
            depth,
            trajectory: Some(traj),
            segments: segments.into_iter().map(Option::unwrap).collect(),
            neighborhoods: neighborhoods.into_iter().map(Option::unwrap).collect(),
            diagnostics,
        }
    }

    fn segment(
        &self,
        seg: &TrajectorySegment,
        next: Option<&Neighborhood>,
        horizon: f64,
        depth: usize,
        diagnostics: &mut Vec<SafeDiagnostic>,
    ) -> SafeSegment {
        let ctx = &self.ctx;
        let cfg = ctx.cfg;
        let loc = seg.location;
        let base = AvoidedSet::full(ctx.h, loc);
        let (du, _) = unsafe_radius(ctx, seg, &base);
        let triggered = seg.exit.as_ref().map(|e| e.event);
        let triggered_hole = match (triggered, next) {
            (Some(ev), Some(nb)) => allowed_guard_part(ctx.h, ev, nb),
            _ => None,
        };
        let virtual_guards: Vec<EventId> = ctx
            .h
            .events_from(loc)
            .map(|(id, _)| id)
            .filter(|&id| Some(id) != triggered && ctx.active_guard(id).is_some())
            .collect();
        let d_i = du.min(cfg.d_thr);
        let pivots = if d_i > 0.0 && !virtual_guards.is_empty() {
            self.pivots(
                seg,
                &virtual_guards,
                triggered,
                triggered_hole.as_ref(),
                d_i,
                horizon,
                depth,
                diagnostics,
            )
        } else {
            Vec::new()
        };

        let mut windows = IntervalSet::empty();
        for p in &pivots {
            windows.union_with(p.window);
        }
        let span = IntervalSet::from_interval(Interval::new(seg.t0, seg.t_end));
        let open_part = span.minus(&windows);
        let mut dg = f64::INFINITY;
        for piece in open_part.parts() {
            if let Some(ev) = triggered {
                dg = dg.min(guard_min(ctx, seg, piece.lo, piece.hi, ev, triggered_hole.as_ref()).value);
            }
            for &g in &virtual_guards {
                dg = dg.min(guard_min(ctx, seg, piece.lo, piece.hi, g, None).value);
            }
        }
        let mut raw = du.min(dg);
        for p in &pivots {
            raw = raw.min(p.distance);
        }

        let mut avoided = base;
        for g in &mut avoided.guards {
            if Some(g.event) == triggered {
                g.hole = triggered_hole.clone();
            }
            for p in &pivots {
                if p.fallback {
                    continue;
                }
                for b in &p.branches {
                    if b.event == g.event {
                        if let Some(hole) = &b.hole {
                            for piece in p.effective.parts() {
                                g.windowed.push((*piece, hole.clone()));
                            }
                        }
                    }
                }
            }
        }
        let (radius, shrink) = finish_radius(ctx, seg, raw, &avoided);
        SafeSegment {
            location: loc,
            unsafe_distance: du,
            proximity: d_i,
            guard_distance: dg,
            pivots,
            raw,
            radius,
            shrink,
            triggered_hole,
        }
    }

    fn min_virtual_distance(&self, loc: LocationId, guards: &[EventId], x: &Vector) -> f64 {
        guards
            .iter()
            .map(|&g| guard_distance(&self.ctx, loc, g, None, x).value)
            .fold(f64::INFINITY, f64::min)
    }

    /// Virtual guards within `d` of the state.
    fn proximal_guards(&self, loc: LocationId, guards: &[EventId], x: &Vector, d: f64) -> Vec<EventId> {
        proximal_guards(&self.ctx, loc, guards, x, d)
    }

    fn pivots(
        &self,
        seg: &TrajectorySegment,
        virtual_guards: &[EventId],
        triggered: Option<EventId>,
        triggered_hole: Option<&BallPreimage>,
        d_i: f64,
        horizon: f64,
        depth: usize,
        diagnostics: &mut Vec<SafeDiagnostic>,
    ) -> Vec<Pivot> {
        let ctx = &self.ctx;
        let cfg = ctx.cfg;
        let loc = seg.location;
        let q = ctx.metric(loc);
        let ts = anchored_grid(seg.t0, seg.t_end, seg.anchor_time, cfg.time_grid_dt);
        let dist: Vec<f64> = ts
            .iter()
            .map(|&t| self.min_virtual_distance(loc, virtual_guards, &seg.state_at(t)))
            .collect();
        let mut proximal: Vec<usize> = (0..ts.len()).filter(|&k| dist[k] <= d_i).collect();
        let mut pivots: Vec<Pivot> = Vec::new();
        let mut used = IntervalSet::empty();
        let mut prev = f64::INFINITY;
        let lag_limit = if seg.exit.is_some() {
            seg.t_end + cfg.tau_maxlag
        } else {
            seg.t_end.min(horizon)
        };
        while !proximal.is_empty() {
            let d_set = proximal.iter().map(|&k| dist[k]).fold(f64::INFINITY, f64::min);
            if prev <= d_set {
                break;
            }
            let k_star = *proximal.iter().rev().find(|&&k| dist[k] == d_set).expect("nonempty");
            let lo = ts[k_star.saturating_sub(1)];
            let hi = ts[(k_star + 1).min(ts.len() - 1)];
            let (mut t_p, v_p) = golden_section(
                |t| self.min_virtual_distance(loc, virtual_guards, &seg.state_at(t)),
                lo,
                hi,
                cfg.event_tol,
            );
            if v_p > dist[k_star] {
                t_p = ts[k_star];
            }
            let x_p = seg.state_at(t_p);
            let g_c = self.proximal_guards(loc, virtual_guards, &x_p, d_i);
            let mut branches = Vec::new();
            for &g in &g_c {
                let ev = ctx.h.event(g);
                let y_g = proximal_state(ctx, loc, g, &x_p);
                let reset = ev.reset.apply(&y_g);
                let child = self.node(ev.target, &reset, t_p, horizon, depth + 1);
                let child_nb = child.root().clone();
                let hole = allowed_guard_part(ctx.h, g, &child_nb);
                let rho = preimage_radius(&q.m, &ev.reset.matrix, &child_nb.metric, child_nb.radius);
                branches.push(ProximalBranch {
                    event: g,
                    proximal_state: y_g,
                    reset_state: reset,
                    child,
                    preimage_radius: rho,
                    hole,
                });
            }
            let ok = |tau: f64| self.window_condition(seg, virtual_guards, &g_c, &branches, tau, d_i);
            let (window, fallback) = if ok(t_p) {
                let lo = grow_window(t_p, cfg.tau_maxlead, cfg.time_grid_dt, seg.t0, -1.0, &ok);
                let hi = grow_window(t_p, cfg.tau_maxlag, cfg.time_grid_dt, lag_limit, 1.0, &ok);
                (Interval::new(lo, hi), false)
            } else {
                diagnostics.push(SafeDiagnostic {
                    kind: SafeDiagnosticKind::WindowFallback,
                    location: loc,
                    time: t_p,
                    depth,
                });
                (Interval::new(t_p, t_p), true)
            };
            let effective = IntervalSet::from_interval(window).minus(&used);
            let mut d_k = f64::INFINITY;
            for piece in effective.parts() {
                let lo = piece.lo.max(seg.t0);
                let hi = piece.hi.min(seg.t_end);
                if lo > hi {
                    continue;
                }
                if let Some(ev) = triggered {
                    d_k = d_k.min(guard_min(ctx, seg, lo, hi, ev, triggered_hole).value);
                }
                for &g in virtual_guards {
                    let hole = if fallback {
                        None
                    } else {
                        branches.iter().find(|b| b.event == g).and_then(|b| b.hole.as_ref())
                    };
                    d_k = d_k.min(guard_min(ctx, seg, lo, hi, g, hole).value);
                }
            }
            used.union_with(window);
            proximal.retain(|&k| k != k_star && !window.contains(ts[k]));
            pivots.push(Pivot {
                time: t_p,
                window,
                effective,
                branches,
                distance: d_k,
                fallback,
            });
            prev = d_k;
        }
        pivots
    }

    /// Both window conditions at time `tau`: the proximal guards stay within
    /// the pivot's set, and every proximal state maps into its branch ball
    /// with an `α` margin.
    fn window_condition(
        &self,
        seg: &TrajectorySegment,
        virtual_guards: &[EventId],
        g_c: &[EventId],
        branches: &[ProximalBranch],
        tau: f64,
        d_i: f64,
    ) -> bool {
        let ctx = &self.ctx;
        let loc = seg.location;
        let q = ctx.metric(loc);
        let x = seg.state_at(tau);
        let g_tau = self.proximal_guards(loc, virtual_guards, &x, d_i);
        for g in &g_tau {
            if !g_c.contains(g) {
                return false;
            }
            let Some(b) = branches.iter().find(|b| b.event == *g) else {
                return false;
            };
            let Some(hole) = &b.hole else {
                return false;
            };
            let y_tau = proximal_state(ctx, loc, *g, &x);
            if !hole.contains(&y_tau) {
                return false;
            }
            if phi(&q.m, &y_tau, &b.proximal_state) > ctx.cfg.alpha * b.preimage_radius {
                return false;
            }
        }
        true
    }
}

/// Moves away from `t_p` in `dir` by steps of `dt` while `ok` holds, up to
/// `max` away and never past `limit`. Returns the last accepted time.
fn grow_window(t_p: f64, max: f64, dt: f64, limit: f64, dir: f64, ok: &dyn Fn(f64) -> bool) -> f64 {
    let steps = (max / dt).ceil() as usize;
    let mut last = t_p;
    for k in 1..=steps {
        let mut t = t_p + dir * (k as f64 * dt).min(max);
        if dir * (t - limit) > 0.0 {
            t = limit;
        }
        if dir * (t - last) <= 0.0 || !ok(t) {
            break;
        }
        last = t;
    }
    last
}

/// Guards among `guards` within `d` of `x` (active parts, location metric).
pub fn proximal_guards(ctx: &Context<'_>, loc: LocationId, guards: &[EventId], x: &Vector, d: f64) -> Vec<EventId> {
    guards
        .iter()
        .copied()
        .filter(|&g| guard_distance(ctx, loc, g, None, x).value <= d)
        .collect()
}

/// Closest point to `x` on the closure of the guard. The projection is a
/// strictly convex problem, so the minimizer is unique.
pub fn proximal_state(ctx: &Context<'_>, loc: LocationId, event: EventId, x: &Vector) -> Vector {
    let guard = ctx.active_guard(event).unwrap_or(&ctx.h.event(event).guard);
    crate::qp::project(ctx.metric(loc).inverse(), x, guard)
        .map(|p| p.point)
        .unwrap_or_else(|| x.clone())
}

/// Largest `ρ` with `φ(y, y_g) < ρ ⇒ φ'(R y, R y_g) < γ'`:
/// `ρ = γ' / √λ_max(L⁻¹ Rᵀ M' R L⁻ᵀ)` where `M = L Lᵀ`.
pub fn preimage_radius(m: &Matrix, r: &Matrix, m_next: &Matrix, radius: f64) -> f64 {
    if !(radius > 0.0) {
        return 0.0;
    }
    let Some(l) = cholesky_thresholded(m, 1e-14) else {
        return 0.0;
    };
    let Some(l_inv) = l.try_inverse() else {
        return 0.0;
    };
    let k = &l_inv * r.transpose() * m_next * r * l_inv.transpose();
    let lam = sym_max_eigenvalue(&k);
    if lam <= 0.0 {
        f64::INFINITY
    } else {
        radius / lam.sqrt()
    }
}

/// Safe neighborhood of the initial state.
pub fn safe_neighborhood(
    h: &HybridAutomaton,
    metrics: &Metrics,
    cfg: &VerificationConfig,
    loc: LocationId,
    x0: &Vector,
    t0: f64,
    t_end: f64,
) -> Neighborhood {
    SafeSolver::new(h, metrics, cfg)
        .solve(loc, x0, t0, t_end)
        .root()
        .clone()
}

#[derive(Debug, thiserror::Error)]
pub enum BasicCaseError {
    #[error("basic case needs exactly one guard in the location, no unsafe set there, and no guards in the target")]
    Structure,
    #[error("the nominal trajectory triggers an event; use the general computation")]
    EventTriggered,
}

/// The single-guard special case, computed directly: one closest approach,
/// one branch, and a fixed window of `[t* - τ_maxlead, t* + τ_maxlag]`.
pub fn safe_neighborhood_basic(
    ctx: &Context<'_>,
    loc: LocationId,
    x0: &Vector,
    t0: f64,
    t_end: f64,
) -> Result<Neighborhood, BasicCaseError> {
    let h = ctx.h;
    let cfg = ctx.cfg;
    let events: Vec<_> = h.events_from(loc).collect();
    if events.len() != 1 || !h.unsafe_in(loc).is_empty() {
        return Err(BasicCaseError::Structure);
    }
    let (g, ev) = events[0];
    if h.events_from(ev.target).next().is_some() {
        return Err(BasicCaseError::Structure);
    }
    let traj = simulate(h, loc, x0, t0, t_end, cfg).map_err(|_| BasicCaseError::Structure)?;
    if !traj.events.is_empty() {
        return Err(BasicCaseError::EventTriggered);
    }
    let seg = &traj.segments[0];
    let q = ctx.metric(loc);
    let full = guard_min(ctx, seg, seg.t0, seg.t_end, g, None);
    let nb = |radius: f64| Neighborhood {
        location: loc,
        center: x0.clone(),
        radius: radius.min(cfg.radius_cap),
        metric: q.m.clone(),
        kind: NeighborhoodKind::Safe,
    };
    if full.value > cfg.d_thr {
        return Ok(nb(full.value));
    }
    let t_star = full.witness_time.unwrap_or(seg.t0);
    let y_star = full.witness_point.clone().unwrap_or_else(|| seg.state_at(t_star));
    let reset = ev.reset.apply(&y_star);
    let branch = simulate(h, ev.target, &reset, t_star, t_end, cfg).map_err(|_| BasicCaseError::Structure)?;
    let branch_seg = &branch.segments[0];
    let (gamma_next, _) = unsafe_radius(ctx, branch_seg, &AvoidedSet::full(h, ev.target));
    let next = Neighborhood {
        location: ev.target,
        center: reset,
        radius: gamma_next,
        metric: ctx.metric(ev.target).m.clone(),
        kind: NeighborhoodKind::Safe,
    };
    let hole = allowed_guard_part(h, g, &next);
    let delta = Interval::new(t_star - cfg.tau_maxlead, t_star + cfg.tau_maxlag);
    let span = IntervalSet::from_interval(Interval::new(seg.t0, seg.t_end));
    let outside = span.minus(&IntervalSet::from_interval(delta));
    let mut gamma = f64::INFINITY;
    for piece in outside.parts() {
        gamma = gamma.min(guard_min(ctx, seg, piece.lo, piece.hi, g, None).value);
    }
    let lo = delta.lo.max(seg.t0);
    let hi = delta.hi.min(seg.t_end);
    gamma = gamma.min(guard_min(ctx, seg, lo, hi, g, hole.as_ref()).value);
    Ok(nb(gamma))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeKind {
    Triggered,
    Virtual,
}

#[derive(Clone, Debug)]
pub struct TreeEdge {
    pub event: EventId,
    pub kind: EdgeKind,
    pub time: f64,
    pub trigger_state: Vector,
    pub child: EventTreeNode,
}

/// Triggered and virtual events of a nominal trajectory and its branches.
#[derive(Clone, Debug)]
pub struct EventTreeNode {
    pub location: LocationId,
    pub entry_state: Vector,
    pub entry_time: f64,
    pub edges: Vec<TreeEdge>,
}

impl EventTreeNode {
    /// True if `events` can be followed from this node along tree edges.
    pub fn admits(&self, events: &[EventId]) -> bool {
        let Some((first, rest)) = events.split_first() else {
            return true;
        };
        self.edges.iter().any(|e| e.event == *first && e.child.admits(rest))
    }

    pub fn count_nodes(&self) -> usize {
        1 + self.edges.iter().map(|e| e.child.count_nodes()).sum::<usize>()
    }

    pub fn count_edges(&self, kind: EdgeKind) -> usize {
        self.edges
            .iter()
            .map(|e| usize::from(e.kind == kind) + e.child.count_edges(kind))
            .sum()
    }
}

/// Event tree of a safe-neighborhood computation.
pub fn build_event_tree(node: &SafeNode) -> EventTreeNode {
    fn from_segment(node: &SafeNode, i: usize) -> EventTreeNode {
        let traj = node.trajectory.as_ref().expect("trajectory");
        let seg = &traj.segments[i];
        let mut edges = Vec::new();
        if let Some(safe_seg) = node.segments.get(i) {
            for p in &safe_seg.pivots {
                for b in &p.branches {
                    edges.push(TreeEdge {
                        event: b.event,
                        kind: EdgeKind::Virtual,
                        time: p.time,
                        trigger_state: b.proximal_state.clone(),
                        child: build_event_tree(&b.child),
                    });
                }
            }
        }
        if let Some(exit) = &seg.exit {
            if i + 1 < traj.segments.len() {
                edges.push(TreeEdge {
                    event: exit.event,
                    kind: EdgeKind::Triggered,
                    time: exit.time,
                    trigger_state: exit.point.clone(),
                    child: from_segment(node, i + 1),
                });
            }
        }
        EventTreeNode {
            location: seg.location,
            entry_state: seg.start_state(),
            entry_time: seg.t0,
            edges,
        }
    }
    match &node.trajectory {
        Some(_) => from_segment(node, 0),
        None => EventTreeNode {
            location: node.location,
            entry_state: node.x0.clone(),
            entry_time: node.t0,
            edges: Vec::new(),
        },
    }
}

/// A branch of the enlarged reachable set, started from a critical state.
#[derive(Clone, Debug)]
pub struct ReachBranch {
    pub event: EventId,
    pub time: f64,
    pub critical_state: Vector,
    pub reach: EnlargedReach,
}

/// Nominal trajectory plus branches through every guard it touches without
/// triggering, recursively up to the recursion depth.
#[derive(Clone, Debug)]
pub struct EnlargedReach {
    pub root: HybridTrajectory,
    pub branches: Vec<ReachBranch>,
}

impl EnlargedReach {
    pub fn branch_count(&self) -> usize {
        self.branches.iter().map(|b| 1 + b.reach.branch_count()).sum()
    }

    /// Smallest Euclidean distance from any trajectory in the set to the
    /// unsafe set of its location.
    pub fn unsafe_distance(&self, h: &HybridAutomaton, cfg: &VerificationConfig) -> f64 {
        let n = h.dimension;
        let minv = crate::qp::MetricInverse::new(&Matrix::identity(n, n));
        let mut best = f64::INFINITY;
        for seg in &self.root.segments {
            for poly in h.unsafe_in(seg.location) {
                let r = crate::bisim::min_over_window(
                    seg,
                    seg.t0,
                    seg.t_end,
                    &|x| crate::bisim::dist_point_to_polytope(&minv, x, poly),
                    cfg,
                );
                best = best.min(r.value);
            }
        }
        for b in &self.branches {
            best = best.min(b.reach.unsafe_distance(h, cfg));
        }
        best
    }
}

/// Enlarged reachable set of `x0` over `[t0, t_end]`.
pub fn enlarged_reach(
    ctx: &Context<'_>,
    loc: LocationId,
    x0: &Vector,
    t0: f64,
    t_end: f64,
) -> Result<EnlargedReach, crate::simulate::SimError> {
    enlarged_reach_at(ctx, loc, x0, t0, t_end, 0)
}

fn enlarged_reach_at(
    ctx: &Context<'_>,
    loc: LocationId,
    x0: &Vector,
    t0: f64,
    t_end: f64,
    depth: usize,
) -> Result<EnlargedReach, crate::simulate::SimError> {
    let cfg = ctx.cfg;
    let root = simulate(ctx.h, loc, x0, t0, t_end, cfg)?;
    let mut branches = Vec::new();
    if depth < cfg.max_recursion_depth {
        for seg in &root.segments {
            let triggered = seg.exit.as_ref().map(|e| e.event);
            for (g, ev) in ctx.h.events_from(seg.location) {
                if Some(g) == triggered || ctx.active_guard(g).is_none() {
                    continue;
                }
                let r = guard_min(ctx, seg, seg.t0, seg.t_end, g, None);
                if r.value > cfg.dist_tol {
                    continue;
                }
                let t = r.witness_time.unwrap_or(seg.t0);
                let y = r.witness_point.clone().unwrap_or_else(|| seg.state_at(t));
                let reset = ev.reset.apply(&y);
                let reach = enlarged_reach_at(ctx, ev.target, &reset, t, t_end, depth + 1)?;
                branches.push(ReachBranch {
                    event: g,
                    time: t,
                    critical_state: y,
                    reach,
                });
            }
        }
    }
    Ok(EnlargedReach { root, branches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{load_document, ModelDocument};
    use crate::robust::robust_neighborhood;

    const THREE_LOCATION: &str = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../models/three_location.toml"));
    const BASIC: &str = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../models/basic_case.toml"));

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec())
    }

    fn setup(text: &str) -> (ModelDocument, Metrics) {
        let doc = load_document(text).unwrap();
        let ms = Metrics::from_automaton(&doc.automaton, &doc.config).unwrap();
        (doc, ms)
    }

    #[test]
    fn example_safe_radius_beats_robust() {
        let (doc, ms) = setup(THREE_LOCATION);
        let h = &doc.automaton;
        let solver = SafeSolver::new(h, &ms, &doc.config);
        let node = solver.solve(h.initial_location, &v(&[1.25, 1.9]), 0.0, 0.5);
        let traj = simulate(h, h.initial_location, &v(&[1.25, 1.9]), 0.0, 0.5, &doc.config).unwrap();
        let robust = robust_neighborhood(solver.context(), &traj);
        let s = node.radii();
        let r = robust.radii();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1], r[1]);
        assert!(s[0] >= 5.0 * r[0], "safe {s:?} robust {r:?}");
        let tree = build_event_tree(&node);
        assert_eq!(tree.count_edges(EdgeKind::Triggered), 1);
        assert!(tree.count_edges(EdgeKind::Virtual) >= 1);
    }

    #[test]
    fn zero_threshold_reproduces_robust() {
        let (mut doc, ms) = setup(THREE_LOCATION);
        doc.config.d_thr = 0.0;
        let h = &doc.automaton;
        let solver = SafeSolver::new(h, &ms, &doc.config);
        let node = solver.solve(h.initial_location, &v(&[1.25, 1.9]), 0.0, 0.5);
        let robust = robust_neighborhood(solver.context(), node.trajectory.as_ref().unwrap());
        assert_eq!(node.radii(), robust.radii());
        assert_eq!(build_event_tree(&node).count_edges(EdgeKind::Virtual), 0);
    }

    #[test]
    fn proximal_state_examples() {
        let (doc, _) = setup(THREE_LOCATION);
        let mut h = doc.automaton.clone();
        for loc in &mut h.locations {
            loc.metric = Some(Matrix::identity(2, 2));
            loc.a = -Matrix::identity(2, 2);
        }
        let ms = Metrics::from_automaton(&h, &doc.config).unwrap();
        let ctx = Context::new(&h, &ms, &doc.config);
        let y = proximal_state(&ctx, LocationId(2), EventId(1), &v(&[1.25, 1.9]));
        assert!((y - v(&[1.0, 1.9])).norm() < 1e-12);
        let y = proximal_state(&ctx, LocationId(2), EventId(0), &v(&[0.5, 0.2]));
        assert!((y - v(&[1.0, 1.0])).norm() < 1e-12);
        let y = proximal_state(&ctx, LocationId(2), EventId(0), &v(&[1.5, 1.0]));
        assert!((y - v(&[1.5, 1.0])).norm() < 1e-12);
        let all = [EventId(0), EventId(1)];
        assert!(proximal_guards(&ctx, LocationId(2), &all, &v(&[1.25, 1.9]), 0.01).is_empty());
        assert_eq!(
            proximal_guards(&ctx, LocationId(2), &all, &v(&[1.25, 1.9]), f64::INFINITY).len(),
            2
        );
    }

    #[test]
    fn preimage_radius_identity() {
        let eye = Matrix::identity(2, 2);
        assert!((preimage_radius(&eye, &eye, &eye, 0.3) - 0.3).abs() < 1e-15);
        let m = Matrix::from_diagonal(&v(&[0.5, 0.25]));
        let m2 = Matrix::from_diagonal(&v(&[2.0, 1.0]));
        // φ' = 2 φ on every direction
        assert!((preimage_radius(&m, &eye, &m2, 0.4) - 0.2).abs() < 1e-12);
        assert_eq!(preimage_radius(&m, &eye, &m2, 0.0), 0.0);
    }

    #[test]
    fn basic_case_beats_plain_guard_distance() {
        let (doc, ms) = setup(BASIC);
        let h = &doc.automaton;
        let ctx = Context::new(h, &ms, &doc.config);
        let x0 = h.initial.center();
        let nb = safe_neighborhood_basic(&ctx, h.initial_location, &x0, 0.0, doc.config.t_end).unwrap();
        let traj = simulate(h, h.initial_location, &x0, 0.0, doc.config.t_end, &doc.config).unwrap();
        let robust = robust_neighborhood(&ctx, &traj);
        assert!(
            nb.radius > robust.radii()[0] * 1.5,
            "{} vs {}",
            nb.radius,
            robust.radii()[0]
        );
        let general = SafeSolver::new(h, &ms, &doc.config).solve(h.initial_location, &x0, 0.0, doc.config.t_end);
        assert!(general.radius() >= robust.radii()[0]);
        let tree = build_event_tree(&general);
        assert!(tree.count_edges(EdgeKind::Virtual) >= 1);
        assert_eq!(tree.count_edges(EdgeKind::Triggered), 0);
    }

    #[test]
    fn basic_case_refuses_other_structures() {
        let (doc, ms) = setup(THREE_LOCATION);
        let h = &doc.automaton;
        let ctx = Context::new(h, &ms, &doc.config);
        assert!(safe_neighborhood_basic(&ctx, LocationId(2), &v(&[1.25, 1.9]), 0.0, 0.5).is_err());
    }

    #[test]
    fn enlarged_reach_of_noncritical_is_root_only() {
        let (doc, ms) = setup(THREE_LOCATION);
        let ctx = Context::new(&doc.automaton, &ms, &doc.config);
        let r = enlarged_reach(&ctx, LocationId(2), &v(&[1.25, 1.9]), 0.0, 0.5).unwrap();
        assert_eq!(r.branch_count(), 0);
    }

    #[test]
    fn enlarged_reach_branches_at_corner() {
        let (doc, ms) = setup(THREE_LOCATION);
        let ctx = Context::new(&doc.automaton, &ms, &doc.config);
        let x0 = v(&[1.9f64.powf(1.0 / 3.0), 1.9]);
        let r = enlarged_reach(&ctx, LocationId(2), &x0, 0.0, 0.5).unwrap();
        assert_eq!(r.branches.len(), 1);
    }
}
