//! Outer iteration: quasi-Newton direction, generalized Cauchy direction,
//! capped line search, memory transport and update.

use crate::error::{Error, Result};
use crate::gcd::{generalized_cauchy_direction, GcdOutcome, GcdStatus};
use crate::geometry::{Geometry, ProductPoint, ProductTangent};
use crate::linesearch::{armijo_capped, LineSearchConfig};
use crate::memory::{make_pair, LbfgsMemory, PushOutcome, ThetaRule, DEFAULT_CURVATURE_EPS};
use crate::problems::Problem;

/// Multiple of `ε_mach·max(|f|, 1)` below which a failed line search counts as
/// stagnation rather than failure.
const ROUNDOFF_FACTOR: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    pub memory_capacity: usize,
    pub pg_tolerance: f64,
    /// Stop when `f_prev − f ≤ factor·ε_mach·max(|f_prev|, |f|, 1)`; zero disables the test.
    pub cost_change_factor: f64,
    pub max_iterations: usize,
    pub curvature_eps: f64,
    pub theta_rule: ThetaRule,
    pub line_search: LineSearchConfig,
    pub direction: DirectionRule,
}

/// How the quasi-Newton direction fed to the Cauchy search is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DirectionRule {
    /// `−(ZᵀHZ)⁻¹Zᵀ grad` on the coordinates not held at a bound by the
    /// gradient; identical to `−B grad` when no bound is binding, and always
    /// a descent direction.
    #[default]
    Reduced,
    /// `−B grad` with outward components at active bounds zeroed.
    Projected,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            memory_capacity: 10,
            pg_tolerance: 1e-6,
            cost_change_factor: 1000.0,
            max_iterations: 1000,
            curvature_eps: DEFAULT_CURVATURE_EPS,
            theta_rule: ThetaRule::Classical,
            line_search: LineSearchConfig::default(),
            direction: DirectionRule::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Termination {
    PgTolerance,
    CostStagnation,
    MaxIterations,
    LineSearchFailure,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::PgTolerance => "pg_tolerance",
            Termination::CostStagnation => "cost_stagnation",
            Termination::MaxIterations => "max_iterations",
            Termination::LineSearchFailure => "line_search_failure",
        }
    }
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct SolverResult {
    pub point: ProductPoint,
    pub cost: f64,
    pub pg_norm: f64,
    pub iterations: usize,
    pub cost_evals: usize,
    pub grad_evals: usize,
    pub termination: Termination,
    /// Cost at the start point followed by the cost after every iteration.
    pub cost_history: Vec<f64>,
}

/// What happened in one call to [`Solver::step`].
#[derive(Clone, Debug)]
pub struct StepReport {
    pub previous_cost: f64,
    pub cost: f64,
    pub alpha: f64,
    pub gcd_status: GcdStatus,
    /// The memory was discarded and the step fell back to steepest descent.
    pub restarted: bool,
    pub pair_outcome: PushOutcome,
}

#[derive(Clone, Debug)]
pub enum StepOutcome {
    Continue(StepReport),
    Stop(Termination),
}

/// `‖Proj(p, −grad)‖`, the stationarity measure.
pub fn projected_gradient_norm(geom: &Geometry, p: &ProductPoint, grad: &ProductTangent) -> f64 {
    let pg = geom.project_tangent_cone(p, &-grad);
    geom.norm(p, &pg)
}

pub struct Solver<'a, P: Problem + ?Sized> {
    problem: &'a P,
    options: SolverOptions,
    point: ProductPoint,
    grad: ProductTangent,
    cost: f64,
    pg_norm: f64,
    memory: LbfgsMemory,
    iteration: usize,
    cost_evals: usize,
    grad_evals: usize,
    history: Vec<f64>,
}

impl<'a, P: Problem + ?Sized> Solver<'a, P> {
    pub fn new(problem: &'a P, p0: ProductPoint, options: SolverOptions) -> Result<Self> {
        let geom = problem.geometry();
        geom.check_point(&p0, 1e-8)?;
        let memory = LbfgsMemory::new(options.memory_capacity, options.curvature_eps)?
            .with_theta_rule(options.theta_rule);
        let cost = problem.cost(&p0);
        let grad = problem.gradient(&p0);
        geom.check_tangent(&p0, &grad)?;
        if !cost.is_finite() {
            return Err(Error::InvalidArgument(format!("cost at start point is {cost}")));
        }
        if grad.euclidean.iter().chain(grad.manifold.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("gradient at start point is not finite".into()));
        }
        let pg_norm = projected_gradient_norm(geom, &p0, &grad);
        Ok(Self {
            problem,
            options,
            point: p0,
            grad,
            cost,
            pg_norm,
            memory,
            iteration: 0,
            cost_evals: 1,
            grad_evals: 1,
            history: vec![cost],
        })
    }

    pub fn point(&self) -> &ProductPoint {
        &self.point
    }

    pub fn gradient(&self) -> &ProductTangent {
        &self.grad
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    pub fn pg_norm(&self) -> f64 {
        self.pg_norm
    }

    pub fn memory(&self) -> &LbfgsMemory {
        &self.memory
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn cost_evals(&self) -> usize {
        self.cost_evals
    }

    pub fn grad_evals(&self) -> usize {
        self.grad_evals
    }

    fn steepest_descent(&self) -> GcdOutcome {
        let geom = self.problem.geometry();
        let d = geom.project_tangent_cone(&self.point, &-&self.grad);
        generalized_cauchy_direction(geom, &self.point, &self.grad, &d, &self.memory, geom.max_stepsize(&self.point))
    }

    fn quasi_newton_direction(&self) -> ProductTangent {
        let geom = self.problem.geometry();
        let p = &self.point;
        if self.options.direction == DirectionRule::Reduced {
            let (lower, upper) = (geom.bounds().lower(), geom.bounds().upper());
            let fixed: Vec<bool> = p
                .euclidean
                .iter()
                .zip(self.grad.euclidean.iter())
                .enumerate()
                .map(|(i, (&x, &g))| (x == lower[i] && g > 0.0) || (x == upper[i] && g < 0.0))
                .collect();
            if fixed.iter().any(|&f| f) {
                if let Some(v) = self.memory.apply_reduced_inverse(geom, p, &self.grad, &fixed) {
                    return -v;
                }
            }
        }
        -self.memory.apply_inverse(geom, p, &self.grad)
    }

    /// Performs one iteration.
    pub fn step(&mut self) -> StepOutcome {
        let geom = self.problem.geometry();
        let p = &self.point;
        let t_cap = geom.max_stepsize(p);

        let mut restarted = false;
        let mut gcd = {
            let d = self.quasi_newton_direction();
            let d = geom.project_tangent_cone(p, &d);
            generalized_cauchy_direction(geom, p, &self.grad, &d, &self.memory, t_cap)
        };
        if gcd.status == GcdStatus::NotFound {
            self.memory.reset();
            restarted = true;
            gcd = self.steepest_descent();
            if gcd.status == GcdStatus::NotFound {
                return StepOutcome::Stop(Termination::PgTolerance);
            }
        }

        let problem = self.problem;
        let mut cost_evals = 0;
        let mut cost_fn = |q: &ProductPoint| {
            cost_evals += 1;
            problem.cost(q)
        };
        let p = &self.point;
        let search = |gcd: &GcdOutcome, cost_fn: &mut dyn FnMut(&ProductPoint) -> f64| {
            let slope = geom.inner(p, &self.grad, &gcd.direction);
            armijo_capped(cost_fn, geom, p, &gcd.direction, self.cost, slope, gcd.t_max, &self.options.line_search)
        };
        let mut ls = search(&gcd, &mut cost_fn);
        if ls.is_err() && !(restarted || self.memory.is_empty()) {
            self.memory.reset();
            restarted = true;
            gcd = self.steepest_descent();
            if gcd.status != GcdStatus::NotFound {
                ls = search(&gcd, &mut cost_fn);
            }
        }
        self.cost_evals += cost_evals;
        let Ok(ls) = ls else {
            // A first-order decrease this small cannot be resolved in the cost.
            let predicted = -geom.inner(p, &self.grad, &gcd.direction);
            let floor = ROUNDOFF_FACTOR * f64::EPSILON * self.cost.abs().max(1.0);
            return StepOutcome::Stop(if predicted <= floor {
                Termination::CostStagnation
            } else {
                Termination::LineSearchFailure
            });
        };

        let step = gcd.direction.scale(ls.alpha);
        let p_new = ls.point;
        let grad_new = self.problem.gradient(&p_new);
        self.grad_evals += 1;

        self.memory.transport(geom, &self.point, &step, &p_new);
        let (s, y) = make_pair(geom, &self.point, &step, &p_new, &self.grad, &grad_new, 1.0);
        let pair_outcome = self.memory.push_pair(geom, &p_new, s, y);

        let previous_cost = self.cost;
        self.point = p_new;
        self.grad = grad_new;
        self.cost = ls.cost;
        self.pg_norm = projected_gradient_norm(geom, &self.point, &self.grad);
        self.iteration += 1;
        self.history.push(self.cost);

        StepOutcome::Continue(StepReport {
            previous_cost,
            cost: self.cost,
            alpha: ls.alpha,
            gcd_status: gcd.status,
            restarted,
            pair_outcome,
        })
    }

    fn stagnated(&self, previous: f64, current: f64) -> bool {
        let factor = self.options.cost_change_factor;
        factor > 0.0
            && previous - current
                <= factor * f64::EPSILON * previous.abs().max(current.abs()).max(1.0)
    }

    /// Iterates until a termination test fires.
    pub fn run(mut self) -> SolverResult {
        let termination = loop {
            if self.pg_norm <= self.options.pg_tolerance {
                break Termination::PgTolerance;
            }
            if self.iteration >= self.options.max_iterations {
                break Termination::MaxIterations;
            }
            match self.step() {
                StepOutcome::Stop(t) => break t,
                StepOutcome::Continue(r) => {
                    if self.pg_norm > self.options.pg_tolerance && self.stagnated(r.previous_cost, r.cost) {
                        break Termination::CostStagnation;
                    }
                }
            }
        };
        SolverResult {
            point: self.point,
            cost: self.cost,
            pg_norm: self.pg_norm,
            iterations: self.iteration,
            cost_evals: self.cost_evals,
            grad_evals: self.grad_evals,
            termination,
            cost_history: self.history,
        }
    }
}

/// Minimizes `problem` from the feasible start point `p0`.
pub fn solve<P: Problem + ?Sized>(problem: &P, p0: ProductPoint, options: &SolverOptions) -> Result<SolverResult> {
    Ok(Solver::new(problem, p0, options.clone())?.run())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BoxBounds, ManifoldKind};
    use crate::problems::FnProblem;
    use nalgebra::{DMatrix, DVector};

    fn scalar_problem(
        lower: f64,
        upper: f64,
        f: fn(f64) -> f64,
        df: fn(f64) -> f64,
    ) -> FnProblem<impl Fn(&ProductPoint) -> f64, impl Fn(&ProductPoint) -> ProductTangent> {
        FnProblem::new(
            "scalar",
            Geometry::box_only(BoxBounds::uniform(1, lower, upper).unwrap()),
            move |p: &ProductPoint| f(p.euclidean[0]),
            move |p: &ProductPoint| ProductTangent::from_slice(&[df(p.euclidean[0])]),
        )
    }

    #[test]
    fn pg_norm_cases() {
        let g = Geometry::new(BoxBounds::uniform(1, 0.0, 1.0).unwrap(), ManifoldKind::Sphere(2));
        let man = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let grad = ProductTangent::new(DVector::from_element(1, 3.0), DMatrix::from_column_slice(2, 1, &[0.0, 4.0]));
        let interior = ProductPoint::new(DVector::from_element(1, 0.5), man.clone());
        assert_eq!(projected_gradient_norm(&g, &interior, &grad), 5.0);
        let at_lower = ProductPoint::new(DVector::from_element(1, 0.0), man);
        assert_eq!(projected_gradient_norm(&g, &at_lower, &grad), 4.0);
    }

    #[test]
    fn quadratic_reaches_minimum_in_one_step() {
        let prob = scalar_problem(-1.0, 1.0, |x| x * x, |x| 2.0 * x);
        let mut solver = Solver::new(&prob, ProductPoint::from_slice(&[0.5]), SolverOptions::default()).unwrap();
        assert!(matches!(solver.step(), StepOutcome::Continue(_)));
        assert!(solver.point().euclidean[0].abs() <= 1e-8);
    }

    #[test]
    fn linear_cost_hits_lower_bound() {
        let prob = scalar_problem(0.0, 1.0, |x| x, |_| 1.0);
        let mut solver = Solver::new(&prob, ProductPoint::from_slice(&[0.5]), SolverOptions::default()).unwrap();
        assert!(matches!(solver.step(), StepOutcome::Continue(_)));
        assert_eq!(solver.point().euclidean[0], 0.0);
        assert_eq!(solver.pg_norm(), 0.0);
        let res = solve(&prob, ProductPoint::from_slice(&[0.5]), &SolverOptions::default()).unwrap();
        assert_eq!(res.termination, Termination::PgTolerance);
        assert_eq!(res.iterations, 1);
    }

    #[test]
    fn rejects_infeasible_start() {
        let prob = scalar_problem(0.0, 1.0, |x| x, |_| 1.0);
        assert!(matches!(
            solve(&prob, ProductPoint::from_slice(&[2.0]), &SolverOptions::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn rejects_non_finite_start_cost() {
        let prob = scalar_problem(0.0, 1.0, |x| x.ln(), |x| 1.0 / x);
        assert!(matches!(
            solve(&prob, ProductPoint::from_slice(&[0.0]), &SolverOptions::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn rayleigh_quotient_on_sphere() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let a2 = a.clone();
        let prob = FnProblem::new(
            "rayleigh",
            Geometry::manifold_only(ManifoldKind::Sphere(3)),
            move |p: &ProductPoint| (p.manifold.transpose() * &a * &p.manifold)[(0, 0)],
            move |p: &ProductPoint| {
                let ap = &a2 * &p.manifold;
                let c = p.manifold.dot(&ap);
                ProductTangent::new(DVector::zeros(0), (ap - &p.manifold * c) * 2.0)
            },
        );
        let start = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 1.0]) / 3f64.sqrt();
        let opts = SolverOptions { pg_tolerance: 1e-10, ..Default::default() };
        let res = solve(&prob, ProductPoint::new(DVector::zeros(0), start), &opts).unwrap();
        assert!((res.cost - 1.0).abs() < 1e-8, "cost {}", res.cost);
        assert!(res.point.manifold[(0, 0)].abs() > 1.0 - 1e-8);
    }
}
