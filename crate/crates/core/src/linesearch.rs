//! Armijo backtracking confined to `(0, t_max]`.

use crate::geometry::{Geometry, ProductPoint, ProductTangent};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearchConfig {
    pub armijo_c1: f64,
    pub contraction: f64,
    pub expansion: f64,
    pub max_evals: usize,
}

impl Default for LineSearchConfig {
    fn default() -> Self {
        Self {
            armijo_c1: 1e-4,
            contraction: 0.5,
            expansion: 2.0,
            max_evals: 60,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LineSearchOutcome {
    pub alpha: f64,
    pub cost: f64,
    /// `retract(p, alpha·d)` with the box part clipped into the bounds.
    pub point: ProductPoint,
    pub evals: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearchFailure {
    pub evals: usize,
    pub last_alpha: f64,
}

/// Finds `α ∈ (0, t_max]` with `f(retr(p, α d)) ≤ f0 + c1·α·slope`.
///
/// The first trial is `α = min(1, t_max)`. If it is accepted and the step is
/// uncapped (`t_max = ∞`), the step is doubled while the Armijo condition
/// holds and the cost keeps decreasing. Otherwise it is contracted until the
/// condition holds or `max_evals` is exhausted.
#[allow(clippy::too_many_arguments)]
pub fn armijo_capped<F>(
    cost: &mut F,
    geom: &Geometry,
    p: &ProductPoint,
    d: &ProductTangent,
    f0: f64,
    slope: f64,
    t_max: f64,
    cfg: &LineSearchConfig,
) -> Result<LineSearchOutcome, LineSearchFailure>
where
    F: FnMut(&ProductPoint) -> f64 + ?Sized,
{
    let mut evals = 0;
    if !(slope < 0.0) || !(t_max > 0.0) {
        return Err(LineSearchFailure { evals, last_alpha: 0.0 });
    }
    let armijo = |alpha: f64, f: f64| f.is_finite() && f <= f0 + cfg.armijo_c1 * alpha * slope;

    let mut alpha = t_max.min(1.0);
    let (mut point, mut f) = loop {
        let trial = geom.retract_feasible(p, &d.scale(alpha));
        let f = cost(&trial);
        evals += 1;
        if armijo(alpha, f) {
            break (trial, f);
        }
        if evals >= cfg.max_evals {
            return Err(LineSearchFailure { evals, last_alpha: alpha });
        }
        alpha *= cfg.contraction;
    };

    if evals == 1 && t_max == f64::INFINITY {
        while evals < cfg.max_evals {
            let next = alpha * cfg.expansion;
            if next > t_max {
                break;
            }
            let trial = geom.retract_feasible(p, &d.scale(next));
            let fn_ = cost(&trial);
            evals += 1;
            if armijo(next, fn_) && fn_ < f {
                alpha = next;
                f = fn_;
                point = trial;
            } else {
                break;
            }
        }
    }
    Ok(LineSearchOutcome { alpha, cost: f, point, evals })
}
