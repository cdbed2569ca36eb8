//! Finite unions of closed time intervals.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn len(&self) -> f64 {
        (self.hi - self.lo).max(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.hi < self.lo
    }

    pub fn contains(&self, t: f64) -> bool {
        self.lo <= t && t <= self.hi
    }
}

/// Sorted, pairwise disjoint closed intervals. Differences keep the closure
/// of the remainder, so infima over a difference never miss boundary times.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    parts: Vec<Interval>,
}

impl IntervalSet {
    pub fn empty() -> Self {
        IntervalSet { parts: Vec::new() }
    }

    pub fn from_interval(iv: Interval) -> Self {
        if iv.is_empty() {
            Self::empty()
        } else {
            IntervalSet { parts: vec![iv] }
        }
    }

    pub fn parts(&self) -> &[Interval] {
        &self.parts
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn measure(&self) -> f64 {
        self.parts.iter().map(Interval::len).sum()
    }

    pub fn contains(&self, t: f64) -> bool {
        self.parts.iter().any(|p| p.contains(t))
    }

    pub fn union_with(&mut self, iv: Interval) {
        if iv.is_empty() {
            return;
        }
        self.parts.push(iv);
        self.parts.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        let mut merged: Vec<Interval> = Vec::with_capacity(self.parts.len());
        for p in self.parts.drain(..) {
            match merged.last_mut() {
                Some(last) if p.lo <= last.hi => last.hi = last.hi.max(p.hi),
                _ => merged.push(p),
            }
        }
        self.parts = merged;
    }

    /// Closure of `self \ other`. Degenerate leftovers of zero length are
    /// dropped unless they were already points in `self`.
    pub fn minus(&self, other: &IntervalSet) -> IntervalSet {
        let mut out = Vec::new();
        for p in &self.parts {
            let mut pieces = vec![*p];
            for q in &other.parts {
                let mut next = Vec::new();
                for r in pieces {
                    if q.hi < r.lo || q.lo > r.hi {
                        next.push(r);
                        continue;
                    }
                    if q.lo > r.lo {
                        next.push(Interval::new(r.lo, q.lo));
                    }
                    if q.hi < r.hi {
                        next.push(Interval::new(q.hi, r.hi));
                    }
                }
                pieces = next;
            }
            out.extend(pieces);
        }
        IntervalSet { parts: out }
    }
}
