//! Verification of a box of initial states by recursive subdivision. Each box
//! is certified by the neighborhood of its center when the ball contains all
//! of its corners; otherwise it is split in half along its longest axis.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bisim::{phi, Metrics};
use crate::model::{HybridAutomaton, LocationId, VerificationConfig};
use crate::robust::{classify_trajectory, robust_neighborhood, Context, CriticalityClass, Neighborhood};
use crate::safe::SafeSolver;
use crate::simulate::{simulate, HybridTrajectory, SimError, TerminalStatus, UnsafeHit};
use crate::{Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Robust,
    Safe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    VerifiedSafe,
    Falsified,
    Inconclusive,
}

#[derive(Debug, thiserror::Error)]
pub enum CoverError {
    #[error("initial box is not contained in the invariant of the initial location")]
    OutsideInvariant,
    #[error("initial box has dimension {got}, model has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("initial box has lo > hi")]
    Inverted,
}

/// One certified (or not) subdivision box.
#[derive(Clone, Debug, Serialize)]
pub struct Sample {
    pub state: Vector,
    pub lo: Vector,
    pub hi: Vector,
    pub depth: usize,
    pub neighborhood: Neighborhood,
    pub class: CriticalityClass,
    pub covered: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CoverageReport {
    pub mode: Mode,
    pub verdict: Verdict,
    pub covered_fraction: f64,
    /// Covered fraction once all boxes up to each depth were processed.
    pub fraction_by_depth: Vec<f64>,
    pub samples: Vec<Sample>,
    pub counterexample: Option<HybridTrajectory>,
    pub simulations: usize,
    /// Not serialized, so that reports stay reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

struct BoxResult {
    sample: Sample,
    root: HybridTrajectory,
    simulations: usize,
}

/// Returns the trajectory as a counterexample if it enters an unsafe set.
pub fn falsify_check(traj: &HybridTrajectory) -> Option<(&HybridTrajectory, &UnsafeHit)> {
    traj.unsafe_hit.as_ref().map(|hit| (traj, hit))
}

/// Largest `φ(center, corner)` over the corners of the box.
pub fn box_radius(m: &Matrix, lo: &Vector, hi: &Vector) -> f64 {
    let n = lo.len();
    let center = (lo + hi) * 0.5;
    let free: Vec<usize> = (0..n).filter(|&j| hi[j] > lo[j]).collect();
    let mut best: f64 = 0.0;
    for mask in 0u64..(1u64 << free.len()) {
        let mut corner = center.clone();
        for (bit, &j) in free.iter().enumerate() {
            corner[j] = if mask >> bit & 1 == 1 { hi[j] } else { lo[j] };
        }
        best = best.max(phi(m, &center, &corner));
    }
    best
}

fn split_axis(m: &Matrix, lo: &Vector, hi: &Vector) -> Option<usize> {
    (0..lo.len())
        .filter(|&j| hi[j] > lo[j])
        .map(|j| (j, (hi[j] - lo[j]) * m[(j, j)].max(0.0).sqrt()))
        .fold(None, |acc: Option<(usize, f64)>, (j, w)| match acc {
            Some((_, bw)) if bw >= w => acc,
            _ => Some((j, w)),
        })
        .map(|(j, _)| j)
}

fn certify(
    h: &HybridAutomaton,
    metrics: &Metrics,
    cfg: &VerificationConfig,
    mode: Mode,
    loc: LocationId,
    lo: &Vector,
    hi: &Vector,
    depth: usize,
) -> Result<BoxResult, SimError> {
    let ctx = Context::new(h, metrics, cfg);
    let center = (lo + hi) * 0.5;
    let (root, neighborhood, class, simulations) = match mode {
        Mode::Robust => {
            let traj = simulate(h, loc, &center, 0.0, cfg.t_end, cfg)?;
            let r = robust_neighborhood(&ctx, &traj);
            let class = classify_trajectory(&r.segments, cfg.dist_tol);
            (traj, r.neighborhoods[0].clone(), class, 1)
        }
        Mode::Safe => {
            let solver = SafeSolver::new(h, metrics, cfg);
            let node = solver.solve(loc, &center, 0.0, cfg.t_end);
            let traj = match &node.trajectory {
                Some(t) => t.clone(),
                None => simulate(h, loc, &center, 0.0, cfg.t_end, cfg)?,
            };
            let r = robust_neighborhood(&ctx, &traj);
            let class = classify_trajectory(&r.segments, cfg.dist_tol);
            (traj, node.root().clone(), class, solver.simulations())
        }
    };
    let covered = box_radius(&neighborhood.metric, lo, hi) < neighborhood.radius;
    Ok(BoxResult {
        sample: Sample {
            state: center,
            lo: lo.clone(),
            hi: hi.clone(),
            depth,
            neighborhood,
            class,
            covered,
        },
        root,
        simulations,
    })
}

/// Verifies the box `[lo, hi]` of initial states in the initial location.
pub fn cover_initial_set(
    h: &HybridAutomaton,
    lo: &Vector,
    hi: &Vector,
    mode: Mode,
    metrics: &Metrics,
    cfg: &VerificationConfig,
) -> Result<CoverageReport, CoverError> {
    let start = Instant::now();
    let n = h.dimension;
    if lo.len() != n || hi.len() != n {
        return Err(CoverError::Dimension {
            expected: n,
            got: lo.len(),
        });
    }
    if (0..n).any(|j| lo[j] > hi[j]) {
        return Err(CoverError::Inverted);
    }
    let loc = h.initial_location;
    let inv = &h.location(loc).invariant;
    let free: Vec<usize> = (0..n).filter(|&j| hi[j] > lo[j]).collect();
    for mask in 0u64..(1u64 << free.len()) {
        let mut corner = lo.clone();
        for (bit, &j) in free.iter().enumerate() {
            if mask >> bit & 1 == 1 {
                corner[j] = hi[j];
            }
        }
        if !inv.contains(&corner, crate::model::GEOMETRY_TOL) {
            return Err(CoverError::OutsideInvariant);
        }
    }

    let m = metrics.get(loc).m.clone();
    let mut level: Vec<(Vector, Vector)> = vec![(lo.clone(), hi.clone())];
    let mut samples = Vec::new();
    let mut fraction = 0.0;
    let mut fraction_by_depth = Vec::new();
    let mut simulations = 0;
    let mut counterexample = None;
    let mut exhausted = false;
    for depth in 0..=cfg.coverage_max_depth {
        if level.is_empty() {
            break;
        }
        let results: Vec<Result<BoxResult, SimError>> = level
            .par_iter()
            .map(|(l, u)| certify(h, metrics, cfg, mode, loc, l, u, depth))
            .collect();
        let mut next = Vec::new();
        for res in results {
            let r = match res {
                Ok(r) => r,
                Err(_) => {
                    exhausted = true;
                    continue;
                }
            };
            simulations += r.simulations;
            if counterexample.is_none() && r.root.status == TerminalStatus::UnsafeHit {
                counterexample = Some(r.root.clone());
            }
            if r.sample.covered {
                fraction += 0.5f64.powi(depth as i32);
            } else if depth < cfg.coverage_max_depth {
                match split_axis(&m, &r.sample.lo, &r.sample.hi) {
                    Some(j) => {
                        let mid = 0.5 * (r.sample.lo[j] + r.sample.hi[j]);
                        let mut u1 = r.sample.hi.clone();
                        u1[j] = mid;
                        let mut l2 = r.sample.lo.clone();
                        l2[j] = mid;
                        next.push((r.sample.lo.clone(), u1));
                        next.push((l2, r.sample.hi.clone()));
                    }
                    None => exhausted = true,
                }
            } else {
                exhausted = true;
            }
            samples.push(r.sample);
        }
        fraction_by_depth.push(fraction.min(1.0));
        if counterexample.is_some() {
            break;
        }
        level = next;
    }
    let covered_fraction = fraction.min(1.0);
    let verdict = if counterexample.is_some() {
        Verdict::Falsified
    } else if !exhausted && (1.0 - covered_fraction).abs() <= 1e-9 {
        Verdict::VerifiedSafe
    } else {
        Verdict::Inconclusive
    };
    Ok(CoverageReport {
        mode,
        verdict,
        covered_fraction,
        fraction_by_depth,
        samples,
        counterexample,
        simulations,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::load_document;
    use rand::{Rng, SeedableRng};

    const THREE_LOCATION: &str = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../models/three_location.toml"));

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec())
    }

    #[test]
    fn point_is_verified_with_one_sample() {
        let doc = load_document(THREE_LOCATION).unwrap();
        let ms = Metrics::from_automaton(&doc.automaton, &doc.config).unwrap();
        let p = v(&[1.25, 1.9]);
        for mode in [Mode::Robust, Mode::Safe] {
            let r = cover_initial_set(&doc.automaton, &p, &p, mode, &ms, &doc.config).unwrap();
            assert_eq!(r.verdict, Verdict::VerifiedSafe);
            assert_eq!(r.samples.len(), 1);
            assert!((r.covered_fraction - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn box_outside_invariant_is_rejected() {
        let doc = load_document(THREE_LOCATION).unwrap();
        let ms = Metrics::from_automaton(&doc.automaton, &doc.config).unwrap();
        let r = cover_initial_set(
            &doc.automaton,
            &v(&[0.9, 1.5]),
            &v(&[1.1, 1.6]),
            Mode::Robust,
            &ms,
            &doc.config,
        );
        assert!(matches!(r, Err(CoverError::OutsideInvariant)));
    }

    #[test]
    fn unsafe_box_is_falsified() {
        let mut doc = load_document(THREE_LOCATION).unwrap();
        let unsafe_l3 = crate::model::Polytope::from_box(&v(&[1.3, 1.3]), &v(&[1.6, 1.6]));
        doc.automaton.unsafe_sets[2].push(unsafe_l3);
        let ms = Metrics::from_automaton(&doc.automaton, &doc.config).unwrap();
        let r = cover_initial_set(
            &doc.automaton,
            &v(&[1.4, 1.4]),
            &v(&[1.5, 1.5]),
            Mode::Safe,
            &ms,
            &doc.config,
        )
        .unwrap();
        assert_eq!(r.verdict, Verdict::Falsified);
        let cex = r.counterexample.unwrap();
        assert_eq!(cex.status, TerminalStatus::UnsafeHit);
        assert!(falsify_check(&cex).is_some());
    }

    #[test]
    fn nominal_has_no_counterexample() {
        let doc = load_document(THREE_LOCATION).unwrap();
        let traj = simulate(&doc.automaton, LocationId(2), &v(&[1.25, 1.9]), 0.0, 0.5, &doc.config).unwrap();
        assert!(falsify_check(&traj).is_none());
    }

    #[test]
    fn covered_boxes_lie_inside_their_balls() {
        let mut doc = load_document(THREE_LOCATION).unwrap();
        doc.config.coverage_max_depth = 4;
        let ms = Metrics::from_automaton(&doc.automaton, &doc.config).unwrap();
        let lo = v(&[1.2, 1.85]);
        let hi = v(&[1.3, 1.95]);
        let robust = cover_initial_set(&doc.automaton, &lo, &hi, Mode::Robust, &ms, &doc.config).unwrap();
        let safe = cover_initial_set(&doc.automaton, &lo, &hi, Mode::Safe, &ms, &doc.config).unwrap();
        assert!(safe.covered_fraction >= robust.covered_fraction);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for s in robust.samples.iter().chain(&safe.samples).filter(|s| s.covered) {
            for _ in 0..1000 {
                let x = Vector::from_fn(2, |j, _| rng.random_range(s.lo[j]..=s.hi[j]));
                assert!(s.neighborhood.contains(&x));
            }
        }
    }

    #[test]
    fn reports_are_deterministic() {
        let mut doc = load_document(THREE_LOCATION).unwrap();
        doc.config.coverage_max_depth = 3;
        let ms = Metrics::from_automaton(&doc.automaton, &doc.config).unwrap();
        let lo = v(&[1.2, 1.85]);
        let hi = v(&[1.3, 1.95]);
        let a = cover_initial_set(&doc.automaton, &lo, &hi, Mode::Safe, &ms, &doc.config).unwrap();
        let b = cover_initial_set(&doc.automaton, &lo, &hi, Mode::Safe, &ms, &doc.config).unwrap();
        assert_eq!(a.covered_fraction, b.covered_fraction);
        assert_eq!(a.fraction_by_depth, b.fraction_by_depth);
        let ra: Vec<f64> = a.samples.iter().map(|s| s.neighborhood.radius).collect();
        let rb: Vec<f64> = b.samples.iter().map(|s| s.neighborhood.radius).collect();
        assert_eq!(ra, rb);
    }

    #[test]
    fn box_radius_of_unit_square() {
        let m = Matrix::identity(2, 2);
        assert!((box_radius(&m, &v(&[0.0, 0.0]), &v(&[2.0, 2.0])) - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(box_radius(&m, &v(&[1.0, 1.0]), &v(&[1.0, 1.0])), 0.0);
        assert_eq!(
            split_axis(
                &Matrix::from_diagonal(&v(&[1.0, 9.0])),
                &v(&[0.0, 0.0]),
                &v(&[2.0, 1.0])
            ),
            Some(1)
        );
    }
}
