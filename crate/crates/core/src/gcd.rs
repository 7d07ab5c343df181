//! Generalized Cauchy direction.
//!
//! Given a descent direction `d` at `p`, the box part of the path
//! `t ↦ d_PL(t)` is `t·d` with every coordinate frozen at its bound once it
//! reaches it, while the manifold part is `t·d_M`. The model
//! `q(t) = m(d_PL(t))` is a convex quadratic on each segment between
//! consecutive breakpoints. The segments are scanned in order with a min-heap
//! and the first local minimizer `t_*` is located; `d_PL(t_*)` is returned
//! together with a cap for the subsequent line search.
//!
//! Per segment only three Hessian values are needed,
//! `⟨e_b, H[Z]⟩`, `⟨e_b, H[d̂]⟩` and `⟨e_b, H[e_b]⟩`, which the
//! [`SegmentState`] provides in `O(μ²)` from running coefficient vectors.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use nalgebra::DVector;

use crate::geometry::{BoxBounds, Geometry, ProductPoint, ProductTangent};
use crate::memory::LbfgsMemory;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GcdStatus {
    /// A finite box breakpoint exists; the line search is capped at `t_max`.
    FoundLimited,
    /// No box coordinate can reach a bound; `t_max = ∞`.
    FoundUnlimited,
    /// Degenerate model (`f' = 0`, `f'' = 0` or no decrease); the memory
    /// should be discarded.
    NotFound,
}

#[derive(Clone, Debug)]
pub struct GcdOutcome {
    pub direction: ProductTangent,
    pub status: GcdStatus,
    /// `-1` for `NotFound`, `+∞` for `FoundUnlimited`, otherwise `≥ 1`.
    pub t_max: f64,
    /// `t_*`, the path parameter of the returned direction (0 for `NotFound`).
    pub t_star: f64,
}

impl GcdOutcome {
    fn not_found(d: &ProductTangent) -> Self {
        Self {
            direction: ProductTangent::zeros_like(d),
            status: GcdStatus::NotFound,
            t_max: -1.0,
            t_star: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Breakpoint {
    time: f64,
    /// `None` marks the manifold step cap.
    index: Option<usize>,
}

impl Eq for Breakpoint {}

impl Ord for Breakpoint {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then_with(|| self.index.cmp(&other.index))
    }
}

impl PartialOrd for Breakpoint {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Breakpoint times of every box coordinate plus a min-heap over the strictly
/// positive finite ones.
#[derive(Clone, Debug)]
pub struct BreakpointSet {
    times: Vec<f64>,
    heap: BinaryHeap<Reverse<Breakpoint>>,
    has_finite: bool,
}

impl BreakpointSet {
    /// Travel time `t_i` until coordinate `i` of `p + t·d` meets the bound it
    /// moves towards; `+∞` when `d_i = 0` or that bound is infinite.
    pub fn new(bounds: &BoxBounds, p: &DVector<f64>, d: &DVector<f64>) -> Self {
        let times: Vec<f64> = (0..p.len())
            .map(|i| {
                let di = d[i];
                if di < 0.0 {
                    (bounds.lower()[i] - p[i]) / di
                } else if di > 0.0 {
                    (bounds.upper()[i] - p[i]) / di
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        let heap: BinaryHeap<_> = times
            .iter()
            .enumerate()
            .filter(|(_, &t)| t > 0.0 && t.is_finite())
            .map(|(i, &t)| Reverse(Breakpoint { time: t, index: Some(i) }))
            .collect();
        let has_finite = !heap.is_empty();
        Self { times, heap, has_finite }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Whether some box coordinate reaches a bound at a finite positive time.
    pub fn has_finite(&self) -> bool {
        self.has_finite
    }

    /// Adds the manifold cap, reported by [`BreakpointSet::pop_min`] with index `None`.
    pub fn push_sentinel(&mut self, t_manifold_max: f64) {
        self.heap.push(Reverse(Breakpoint {
            time: t_manifold_max,
            index: None,
        }));
    }

    pub fn pop_min(&mut self) -> Option<(f64, Option<usize>)> {
        self.heap.pop().map(|Reverse(b)| (b.time, b.index))
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    /// Smallest positive breakpoint time, `+∞` if none.
    pub fn min_positive(&self) -> f64 {
        self.times
            .iter()
            .copied()
            .filter(|&t| t > 0.0)
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn compute_breakpoints(bounds: &BoxBounds, p: &DVector<f64>, d: &DVector<f64>) -> BreakpointSet {
    BreakpointSet::new(bounds, p, d)
}

/// Running coefficients `p_y = W_y d̂`, `p_s = W_s d̂`, `c_y = W_y Z`,
/// `c_s = W_s Z` of the current segment direction `d̂` and segment start `Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentState {
    pub c_s: DVector<f64>,
    pub c_y: DVector<f64>,
    pub p_s: DVector<f64>,
    pub p_y: DVector<f64>,
}

impl SegmentState {
    pub fn init(mem: &LbfgsMemory, geom: &Geometry, p: &ProductPoint, d: &ProductTangent) -> Self {
        let m = mem.len();
        Self {
            c_s: DVector::zeros(m),
            c_y: DVector::zeros(m),
            p_s: mem.coeff_s(geom, p, d),
            p_y: mem.coeff_y(geom, p, d),
        }
    }

    /// Moves to the breakpoint of coordinate `b` at time `t` after a segment
    /// of length `dt` and returns `(⟨e_b, H[Z]⟩, ⟨e_b, H[d̂]⟩)` where `Z` is
    /// the path point at `t` and `d̂` the direction of the finished segment.
    /// Afterwards `d̂` no longer moves coordinate `b`.
    pub fn advance(&mut self, mem: &LbfgsMemory, t: f64, dt: f64, b: usize, d_b: f64) -> (f64, f64) {
        self.c_y.axpy(dt, &self.p_y, 1.0);
        self.c_s.axpy(dt, &self.p_s, 1.0);
        let (xi_y, xi_s) = mem.basis_coeffs(b);
        let v1 = mem.quad_form_hw(t * d_b, &xi_y, &xi_s, &self.c_y, &self.c_s);
        let v2 = mem.quad_form_hw(d_b, &xi_y, &xi_s, &self.p_y, &self.p_s);
        self.p_y.axpy(-d_b, &xi_y, 1.0);
        self.p_s.axpy(-d_b, &xi_s, 1.0);
        (v1, v2)
    }
}

/// Segment transition record: after passing the breakpoint of `index` at
/// `time`, the model on the next segment has slope `f1` and curvature `f2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentTrace {
    pub time: f64,
    pub index: usize,
    pub f1: f64,
    pub f2: f64,
}

/// Generalized Cauchy direction along `d` (a descent direction at `p` whose
/// box part does not point out of active bounds).
pub fn generalized_cauchy_direction(
    geom: &Geometry,
    p: &ProductPoint,
    grad: &ProductTangent,
    d: &ProductTangent,
    mem: &LbfgsMemory,
    t_manifold_max: f64,
) -> GcdOutcome {
    run(geom, p, grad, d, mem, t_manifold_max, None)
}

/// Same as [`generalized_cauchy_direction`], also recording every segment transition.
pub fn generalized_cauchy_direction_traced(
    geom: &Geometry,
    p: &ProductPoint,
    grad: &ProductTangent,
    d: &ProductTangent,
    mem: &LbfgsMemory,
    t_manifold_max: f64,
) -> (GcdOutcome, Vec<SegmentTrace>) {
    let mut trace = Vec::new();
    let out = run(geom, p, grad, d, mem, t_manifold_max, Some(&mut trace));
    (out, trace)
}

fn run(
    geom: &Geometry,
    p: &ProductPoint,
    grad: &ProductTangent,
    d: &ProductTangent,
    mem: &LbfgsMemory,
    t_manifold_max: f64,
    mut trace: Option<&mut Vec<SegmentTrace>>,
) -> GcdOutcome {
    let bounds = geom.bounds();
    let mut breakpoints = BreakpointSet::new(bounds, &p.euclidean, &d.euclidean);
    let limited = breakpoints.has_finite();
    breakpoints.push_sentinel(t_manifold_max);

    let mut f1 = geom.inner(p, grad, d);
    let mut f2 = mem.pairing(geom, p, d, d);
    if f1 == 0.0 || f2 <= 0.0 {
        return GcdOutcome::not_found(d);
    }
    let mut dt_min = -f1 / f2;
    let mut t_old = 0.0;
    let (mut t, mut b) = breakpoints.pop_min().expect("sentinel is always present");
    let mut dt = t;
    let mut state = SegmentState::init(mem, geom, p, d);

    while dt_min > dt {
        let Some(bi) = b else { break };
        let d_b = d.euclidean[bi];
        let g_b = grad.euclidean[bi];
        let (v1, v2) = state.advance(mem, t, dt, bi, d_b);
        let (xi_y, xi_s) = mem.basis_coeffs(bi);
        let e_h_e = mem.quad_form_hw(1.0, &xi_y, &xi_s, &xi_y, &xi_s);
        f1 += dt * f2 - d_b * (g_b + v1);
        f2 += -2.0 * d_b * v2 + d_b * d_b * e_h_e;
        t_old = t;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(SegmentTrace { time: t, index: bi, f1, f2 });
        }
        if f1 == 0.0 || f2 <= 0.0 {
            dt_min = 0.0;
            break;
        }
        dt_min = -f1 / f2;
        match breakpoints.pop_min() {
            Some((tn, bn)) => {
                t = tn;
                b = bn;
                dt = t - t_old;
            }
            None => break,
        }
    }
    let t_star = t_old + dt_min.max(0.0);
    if !(t_star > 0.0) {
        return GcdOutcome::not_found(d);
    }

    let mut direction = d.scale(t_star);
    let times = breakpoints.times();
    for (i, &ti) in times.iter().enumerate() {
        // frozen coordinates sit exactly on their bound
        if ti <= t_star {
            direction.euclidean[i] = if d.euclidean[i] > 0.0 {
                bounds.upper()[i] - p.euclidean[i]
            } else {
                bounds.lower()[i] - p.euclidean[i]
            };
        }
    }

    if limited {
        let t_ni = t_manifold_max.min(breakpoints.min_positive());
        GcdOutcome {
            direction,
            status: GcdStatus::FoundLimited,
            t_max: (t_ni / t_star).max(1.0),
            t_star,
        }
    } else {
        GcdOutcome {
            direction,
            status: GcdStatus::FoundUnlimited,
            t_max: f64::INFINITY,
            t_star,
        }
    }
}
