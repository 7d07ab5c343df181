//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlbfgsb::gcd::{generalized_cauchy_direction, GcdStatus};
use rlbfgsb::{BoxBounds, Geometry, LbfgsMemory, ProductPoint, ProductTangent, Problem};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense `θI` followed by the BFGS recursion
/// `H ← H − H s sᵀ H / sᵀHs + y yᵀ / yᵀs` over the stored pairs, oldest first.
pub fn dense_hessian(mem: &LbfgsMemory, n: usize) -> DMatrix<f64> {
    let mut h = DMatrix::identity(n, n) * mem.theta();
    for pr in mem.pairs() {
        let s = &pr.s.euclidean;
        let y = &pr.y.euclidean;
        let hs = &h * s;
        let shs = s.dot(&hs);
        h = &h - &hs * hs.transpose() / shs + y * y.transpose() / y.dot(s);
    }
    h
}

/// Dense inverse recursion `B ← (I − ρ s yᵀ) B (I − ρ y sᵀ) + ρ s sᵀ` from `B₀ = I/θ`.
pub fn dense_inverse(mem: &LbfgsMemory, n: usize) -> DMatrix<f64> {
    let mut b = DMatrix::identity(n, n) / mem.theta();
    let id = DMatrix::<f64>::identity(n, n);
    for pr in mem.pairs() {
        let s = &pr.s.euclidean;
        let y = &pr.y.euclidean;
        let rho = 1.0 / y.dot(s);
        let left = &id - s * y.transpose() * rho;
        b = &left * &b * left.transpose() + s * s.transpose() * rho;
    }
    b
}

pub fn vec_tangent(v: &DVector<f64>) -> ProductTangent {
    ProductTangent::euclidean_only(v.clone())
}

pub fn random_vec<R: Rng>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// Random symmetric positive definite matrix with eigenvalues in roughly `[0.1, 5]`.
pub fn random_spd<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &g.transpose() * &g + DMatrix::identity(n, n) * 0.1
}

/// Box-only memory filled with `count` curvature pairs `y = A s + noise`.
pub fn random_memory<R: Rng>(n: usize, capacity: usize, count: usize, rng: &mut R) -> LbfgsMemory {
    let geom = Geometry::box_only(BoxBounds::unbounded(n));
    let p = ProductPoint::euclidean_only(DVector::zeros(n));
    let a = random_spd(n, rng);
    let mut mem = LbfgsMemory::new(capacity, 1e-8).unwrap();
    for _ in 0..count {
        let s = random_vec(n, rng);
        let y = &a * &s + random_vec(n, rng) * 0.01;
        mem.push_pair(&geom, &p, vec_tangent(&s), vec_tangent(&y));
    }
    mem
}

/// A box with about 30% infinite bounds and a feasible point inside,
/// occasionally sitting exactly on a finite bound.
pub fn random_box<R: Rng>(n: usize, rng: &mut R) -> (BoxBounds, DVector<f64>) {
    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    let mut x = DVector::zeros(n);
    for i in 0..n {
        let l = if rng.random_bool(0.3) { f64::NEG_INFINITY } else { -rng.random_range(0.05..2.0) };
        let u = if rng.random_bool(0.3) { f64::INFINITY } else { rng.random_range(0.05..2.0) };
        x[i] = match rng.random_range(0..10) {
            0 if l.is_finite() => l,
            1 if u.is_finite() => u,
            _ => rng.random_range(l.max(-2.0)..u.min(2.0)),
        };
        lower.push(l);
        upper.push(u);
    }
    (BoxBounds::new(lower, upper).unwrap(), x)
}

/// Box part of the piecewise-linear path: `t·d` with each coordinate frozen
/// once it reaches its bound.
pub fn path_point(bounds: &BoxBounds, x: &DVector<f64>, d: &DVector<f64>, t: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let moved = x[i] + t * d[i];
        moved.clamp(bounds.lower()[i], bounds.upper()[i]) - x[i]
    })
}

/// `q(t) = gᵀz + ½ zᵀHz` at `z = path_point(t)`.
pub fn path_model(
    bounds: &BoxBounds,
    x: &DVector<f64>,
    d: &DVector<f64>,
    g: &DVector<f64>,
    h: &DMatrix<f64>,
    t: f64,
) -> f64 {
    let z = path_point(bounds, x, d, t);
    g.dot(&z) + 0.5 * z.dot(&(h * &z))
}

/// Minimum of `f` over `[a, b]` by golden-section search.
pub fn golden_section<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let t = 0.5 * (a + b);
    (t, f(t))
}

/// Central difference of `t ↦ f(R_p(t·v))`.
pub fn directional_fd<P: Problem>(prob: &P, p: &ProductPoint, v: &ProductTangent, h: f64) -> f64 {
    let geom = prob.geometry();
    let plus = geom.retract(p, &v.scale(h));
    let minus = geom.retract(p, &v.scale(-h));
    (prob.cost(&plus) - prob.cost(&minus)) / (2.0 * h)
}

/// Point strictly inside the box part (so ± steps stay feasible) with a
/// random manifold component.
pub fn interior_point<R: Rng>(geom: &Geometry, rng: &mut R) -> ProductPoint {
    let mut p = geom.random_point(rng);
    let b = geom.bounds();
    for i in 0..p.euclidean.len() {
        let (l, u) = (b.lower()[i], b.upper()[i]);
        let (lo, hi) = (l.max(-5.0), u.min(5.0));
        let margin = 0.05 * (hi - lo);
        p.euclidean[i] = rng.random_range(lo + margin..hi - margin);
    }
    p
}

/// One pass/fail line for the acceptance log.
pub fn report(id: &str, pass: bool, detail: impl std::fmt::Display) -> bool {
    println!("{} criterion {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

/// Projected gradient descent with Armijo backtracking, run until `budget`
/// has elapsed. Returns the final cost.
pub fn projected_gradient_baseline<P: Problem>(prob: &P, p0: ProductPoint, budget: std::time::Duration) -> f64 {
    let geom = prob.geometry();
    let start = std::time::Instant::now();
    let mut p = p0;
    let mut f = prob.cost(&p);
    let mut step = 1.0;
    while start.elapsed() < budget {
        let g = prob.gradient(&p);
        let d = geom.project_tangent_cone(&p, &-&g);
        let slope = -d.norm().powi(2);
        if slope == 0.0 {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let q = geom.retract_feasible(&p, &d.scale(step));
            let fq = prob.cost(&q);
            if fq <= f + 1e-4 * step * slope {
                p = q;
                f = fq;
                accepted = true;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    f
}

/// Largest sine of the angle between a column of `estimate` and its matched
/// column of `truth`, minimized over column permutations (signs ignored).
pub fn basis_distance(truth: &DMatrix<f64>, estimate: &DMatrix<f64>) -> f64 {
    let r = truth.ncols();
    let cos = (truth.transpose() * estimate).map(f64::abs);
    let mut perm: Vec<usize> = (0..r).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let worst = (0..r)
            .map(|j| (1.0 - cos[(p[j], j)].min(1.0).powi(2)).sqrt())
            .fold(0.0, f64::max);
        best = best.min(worst);
    });
    best
}

fn permute(v: &mut Vec<usize>, k: usize, visit: &mut dyn FnMut(&[usize])) {
    if k == v.len() {
        visit(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, visit);
        v.swap(k, i);
    }
}

pub fn workspace_file(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// A random box-only GCD instance whose initial direction is the cone
/// projection of the quasi-Newton step.
pub struct Case {
    pub geom: Geometry,
    pub p: ProductPoint,
    pub g: DVector<f64>,
    pub d: DVector<f64>,
    pub mem: LbfgsMemory,
}

pub fn random_case(seed: u64) -> Case {
    let mut rng = rng(seed);
    let n = rng.random_range(1..=6);
    let mu = rng.random_range(1..=4);
    let count = rng.random_range(0..=mu + 1);
    let (bounds, x) = random_box(n, &mut rng);
    let mem = random_memory(n, mu, count, &mut rng);
    let geom = Geometry::box_only(bounds);
    let p = ProductPoint::euclidean_only(x);
    let g = random_vec(n, &mut rng) * 2.0;
    let d = -mem.apply_inverse(&geom, &p, &vec_tangent(&g));
    let d = geom.project_tangent_cone(&p, &d).euclidean;
    Case { geom, p, g, d, mem }
}

/// Positive finite breakpoints of the path, sorted, plus the horizon past
/// which the model only rises: beyond the last breakpoint it is one convex
/// quadratic along the remaining free directions.
fn path_breaks(case: &Case, h: &DMatrix<f64>) -> (Vec<f64>, f64) {
    let b = case.geom.bounds();
    let x = &case.p.euclidean;
    let mut times: Vec<f64> = (0..x.len())
        .filter_map(|i| {
            let t = if case.d[i] < 0.0 {
                (b.lower()[i] - x[i]) / case.d[i]
            } else if case.d[i] > 0.0 {
                (b.upper()[i] - x[i]) / case.d[i]
            } else {
                f64::INFINITY
            };
            (t.is_finite() && t > 0.0).then_some(t)
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let last = times.last().copied().unwrap_or(0.0);
    let z = path_point(b, x, &case.d, last);
    let d_tail = DVector::from_fn(x.len(), |i, _| {
        let moved = x[i] + (last + 1.0) * case.d[i];
        if moved < b.lower()[i] || moved > b.upper()[i] { 0.0 } else { case.d[i] }
    });
    let f1 = (&case.g + h * &z).dot(&d_tail);
    let f2 = d_tail.dot(&(h * &d_tail));
    let tail = if f2 > 0.0 { (-f1 / f2).max(0.0) } else { 0.0 };
    (times, 1.5 * (last + tail) + 1e-3)
}

fn path_horizon(case: &Case, h: &DMatrix<f64>) -> f64 {
    path_breaks(case, h).1
}

const GRID: usize = 10_000;

/// First local minimizer of the directly evaluated path model. On each
/// segment between breakpoints the model is an exact quadratic, so three
/// evaluations determine its slope and curvature; the scan stops at the
/// first segment whose quadratic bottoms out before the next breakpoint.
pub fn first_basin_minimum(case: &Case) -> f64 {
    let h = dense_hessian(&case.mem, case.g.len());
    let q = |t: f64| path_model(case.geom.bounds(), &case.p.euclidean, &case.d, &case.g, &h, t);
    let (times, horizon) = path_breaks(case, &h);
    let mut a = 0.0;
    for b in times.into_iter().chain(std::iter::once(horizon)) {
        if b - a <= 1e-9 * (1.0 + a) {
            continue;
        }
        let w = b - a;
        let (qa, qm, qb) = (q(a), q(a + 0.5 * w), q(b));
        let slope = (4.0 * qm - 3.0 * qa - qb) / w;
        let curvature = 4.0 * (qa - 2.0 * qm + qb) / (w * w);
        if slope >= 0.0 {
            return qa;
        }
        if curvature > 0.0 && -slope / curvature < w {
            let t = a - slope / curvature;
            return q(t).min(qa);
        }
        a = b;
    }
    q(a)
}

/// Global minimum of the path model over the whole grid, refined locally.
pub fn global_grid_minimum(case: &Case) -> f64 {
    let h = dense_hessian(&case.mem, case.g.len());
    let q = |t: f64| path_model(case.geom.bounds(), &case.p.euclidean, &case.d, &case.g, &h, t);
    let dt = path_horizon(case, &h) / GRID as f64;
    let best = (0..=GRID)
        .map(|k| (k as f64 * dt, q(k as f64 * dt)))
        .fold((0.0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let refined = golden_section(q, (best.0 - dt).max(0.0), best.0 + dt, 80);
    refined.1.min(best.1)
}

pub fn gcd_model_value(case: &Case) -> Option<(f64, GcdStatus)> {
    let g = vec_tangent(&case.g);
    let d = vec_tangent(&case.d);
    let out = generalized_cauchy_direction(&case.geom, &case.p, &g, &d, &case.mem, f64::INFINITY);
    if out.status == GcdStatus::NotFound {
        return None;
    }
    let h = dense_hessian(&case.mem, case.g.len());
    let z = &out.direction.euclidean;
    Some((case.g.dot(z) + 0.5 * z.dot(&(&h * z)), out.status))
}

/// Worst normalized mismatch between `⟨grad, v⟩` and a central difference
/// through the retraction, over `v = grad` and three random unit tangents.
pub fn gradient_error<P: Problem>(prob: &P, p: &ProductPoint, seed: u64) -> f64 {
    let geom = prob.geometry();
    let mut rng = rng(seed);
    let g = prob.gradient(p);
    assert!(geom.tangency_residual(p, &g) <= 1e-10);
    let mut dirs = vec![g.scale(1.0 / g.norm())];
    dirs.extend((0..3).map(|_| geom.random_tangent(p, &mut rng)));
    dirs.iter()
        .map(|v| {
            let fd = directional_fd(prob, p, v, 1e-6);
            let an = geom.inner(p, &g, v);
            (fd - an).abs() / (g.norm() * v.norm()).max(1e-12)
        })
        .fold(0.0, f64::max)
}
