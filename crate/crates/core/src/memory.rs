//! Limited-memory BFGS operator on the tangent spaces of a product geometry.
//!
//! The Hessian approximation is kept in compact form
//!
//! ```text
//! ⟨X, H[Y]⟩ = θ⟨X, Y⟩ − [W_y X; W_s X]ᵀ M [W_y Y; W_s Y]
//! W_y X = [⟨y_i, X⟩]_i,   W_s X = θ[⟨s_i, X⟩]_i
//! M = [[−D, Lᵀ], [L, Q]]⁻¹,  D = diag⟨s_i, y_i⟩,  Q = θ[⟨s_i, s_j⟩],
//! L_ij = ⟨s_i, y_j⟩ for i > j
//! ```
//!
//! and its inverse is applied with the two-loop recursion. Pairs are stored
//! oldest first and live in the tangent space of the current iterate; the
//! solver transports them whenever the iterate moves.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{Geometry, ProductPoint, ProductTangent};

/// Default admission threshold in `⟨s, y⟩ ≥ ε‖y‖²`.
pub const DEFAULT_CURVATURE_EPS: f64 = 1e-8;

/// Condition number above which the Schur complement block counts as singular.
const MAX_CONDITION: f64 = 1e14;

#[derive(Clone, Debug)]
pub struct MemoryPair {
    pub s: ProductTangent,
    pub y: ProductTangent,
    /// `⟨s, y⟩ = 1/ρ`
    pub sy: f64,
}

/// How the initial scaling `θ` is derived from the newest pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ThetaRule {
    /// `θ = ⟨y, y⟩ / ⟨s, y⟩`
    #[default]
    Classical,
    /// `θ = ⟨y, y⟩² / ⟨s, y⟩`
    SquaredNormOverSy,
}

/// Result of offering a new pair to the memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PushOutcome {
    Accepted,
    /// Failed the curvature test; memory unchanged.
    Rejected,
    /// The middle matrix became numerically singular and the memory was cleared.
    Reset,
}

/// Result of moving the memory to a new tangent space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransportOutcome {
    pub discarded: usize,
    pub reset: bool,
}

/// Raised by [`LbfgsMemory::assemble_middle`] when the block system cannot be
/// inverted reliably. The caller is expected to clear the memory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SingularMiddle {
    pub condition: f64,
}

#[derive(Clone, Debug)]
pub struct LbfgsMemory {
    pairs: VecDeque<MemoryPair>,
    capacity: usize,
    theta: f64,
    middle: DMatrix<f64>,
    curvature_eps: f64,
    theta_rule: ThetaRule,
}

/// Builds the new pair after a step `step` from `p_old` to `p_new`:
/// `s = T(step)`, `y = grad_new / β − T(grad_old)`.
pub fn make_pair(
    geom: &Geometry,
    p_old: &ProductPoint,
    step: &ProductTangent,
    p_new: &ProductPoint,
    grad_old: &ProductTangent,
    grad_new: &ProductTangent,
    beta: f64,
) -> (ProductTangent, ProductTangent) {
    let s = geom.vector_transport_to(p_old, step, p_new, step);
    let mut y = grad_new.scale(1.0 / beta);
    y.axpy(-1.0, &geom.vector_transport_to(p_old, step, p_new, grad_old));
    (s, y)
}

impl LbfgsMemory {
    pub fn new(capacity: usize, curvature_eps: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("memory capacity must be at least 1".into()));
        }
        if !(curvature_eps > 0.0) {
            return Err(Error::InvalidArgument("curvature_eps must be positive".into()));
        }
        Ok(Self {
            pairs: VecDeque::with_capacity(capacity),
            capacity,
            theta: 1.0,
            middle: DMatrix::zeros(0, 0),
            curvature_eps,
            theta_rule: ThetaRule::Classical,
        })
    }

    pub fn with_theta_rule(mut self, rule: ThetaRule) -> Self {
        self.theta_rule = rule;
        self
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn curvature_eps(&self) -> f64 {
        self.curvature_eps
    }

    pub fn middle(&self) -> &DMatrix<f64> {
        &self.middle
    }

    pub fn pairs(&self) -> impl ExactSizeIterator<Item = &MemoryPair> {
        self.pairs.iter()
    }

    /// Drops every pair; `θ = 1`.
    pub fn reset(&mut self) {
        self.pairs.clear();
        self.theta = 1.0;
        self.middle = DMatrix::zeros(0, 0);
    }

    fn admissible(&self, sy: f64, yy: f64) -> bool {
        sy > 0.0 && sy >= self.curvature_eps * yy
    }

    /// Offers `(s, y)`, both tangent at `p`. Rejected pairs leave the memory
    /// unchanged; accepted ones evict the oldest pair when full.
    pub fn push_pair(
        &mut self,
        geom: &Geometry,
        p: &ProductPoint,
        s: ProductTangent,
        y: ProductTangent,
    ) -> PushOutcome {
        let sy = geom.inner(p, &s, &y);
        let yy = geom.inner(p, &y, &y);
        if !self.admissible(sy, yy) {
            return PushOutcome::Rejected;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back(MemoryPair { s, y, sy });
        if self.refresh(geom, p).is_err() {
            self.reset();
            return PushOutcome::Reset;
        }
        PushOutcome::Accepted
    }

    /// Transports every pair along `step` (tangent at `p_old`) into the
    /// tangent space at `p_new = retract(p_old, step)` and drops pairs that
    /// fail the curvature test afterwards.
    pub fn transport(
        &mut self,
        geom: &Geometry,
        p_old: &ProductPoint,
        step: &ProductTangent,
        p_new: &ProductPoint,
    ) -> TransportOutcome {
        let before = self.pairs.len();
        let moved: VecDeque<MemoryPair> = self
            .pairs
            .drain(..)
            .map(|pair| {
                let s = geom.vector_transport_to(p_old, step, p_new, &pair.s);
                let y = geom.vector_transport_to(p_old, step, p_new, &pair.y);
                let sy = geom.inner(p_new, &s, &y);
                MemoryPair { s, y, sy }
            })
            .collect();
        self.pairs = moved
            .into_iter()
            .filter(|pair| self.admissible(pair.sy, geom.inner(p_new, &pair.y, &pair.y)))
            .collect();
        let discarded = before - self.pairs.len();
        let reset = self.refresh(geom, p_new).is_err();
        if reset {
            self.reset();
        }
        TransportOutcome { discarded, reset }
    }

    fn refresh(&mut self, geom: &Geometry, p: &ProductPoint) -> std::result::Result<(), SingularMiddle> {
        self.theta = match self.pairs.back() {
            None => 1.0,
            Some(last) => {
                let yy = geom.inner(p, &last.y, &last.y);
                match self.theta_rule {
                    ThetaRule::Classical => yy / last.sy,
                    ThetaRule::SquaredNormOverSy => yy * yy / last.sy,
                }
            }
        };
        self.middle = self.assemble_middle(geom, p)?;
        Ok(())
    }

    /// Inverse of `[[−D, Lᵀ], [L, Q]]` through the Schur complement
    /// `S = Q + L D⁻¹ Lᵀ`; only the `μ × μ` matrix `S` is factorized.
    pub fn assemble_middle(
        &self,
        geom: &Geometry,
        p: &ProductPoint,
    ) -> std::result::Result<DMatrix<f64>, SingularMiddle> {
        let m = self.pairs.len();
        if m == 0 {
            return Ok(DMatrix::zeros(0, 0));
        }
        let d_inv = DVector::from_iterator(m, self.pairs.iter().map(|pr| 1.0 / pr.sy));
        let mut q = DMatrix::zeros(m, m);
        let mut l = DMatrix::zeros(m, m);
        for (i, pi) in self.pairs.iter().enumerate() {
            for (j, pj) in self.pairs.iter().enumerate() {
                if j <= i {
                    let v = self.theta * geom.inner(p, &pi.s, &pj.s);
                    q[(i, j)] = v;
                    q[(j, i)] = v;
                }
                if i > j {
                    l[(i, j)] = geom.inner(p, &pi.s, &pj.y);
                }
            }
        }
        // L D⁻¹ scales column j by 1/D_jj.
        let mut l_dinv = l.clone();
        for j in 0..m {
            l_dinv.column_mut(j).scale_mut(d_inv[j]);
        }
        let schur = &q + &l_dinv * l.transpose();

        let eig = schur.clone().symmetric_eigen();
        let (lo, hi) = eig
            .eigenvalues
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(SingularMiddle { condition });
        }
        let schur_inv = schur
            .cholesky()
            .ok_or(SingularMiddle { condition })?
            .inverse();

        let dinv_lt = l_dinv.transpose(); // D⁻¹ Lᵀ
        let upper_right = &dinv_lt * &schur_inv;
        let mut upper_left = &upper_right * &l_dinv;
        for i in 0..m {
            upper_left[(i, i)] -= d_inv[i];
        }
        let lower_left = upper_right.transpose();

        let mut out = DMatrix::zeros(2 * m, 2 * m);
        out.view_mut((0, 0), (m, m)).copy_from(&upper_left);
        out.view_mut((0, m), (m, m)).copy_from(&upper_right);
        out.view_mut((m, 0), (m, m)).copy_from(&lower_left);
        out.view_mut((m, m), (m, m)).copy_from(&schur_inv);
        Ok(out)
    }

    /// The block matrix `[[−D, Lᵀ], [L, Q]]` itself.
    pub fn block_matrix(&self, geom: &Geometry, p: &ProductPoint) -> DMatrix<f64> {
        let m = self.pairs.len();
        let mut out = DMatrix::zeros(2 * m, 2 * m);
        for (i, pi) in self.pairs.iter().enumerate() {
            out[(i, i)] = -pi.sy;
            for (j, pj) in self.pairs.iter().enumerate() {
                out[(m + i, m + j)] = self.theta * geom.inner(p, &pi.s, &pj.s);
                if i > j {
                    let v = geom.inner(p, &pi.s, &pj.y);
                    out[(m + i, j)] = v;
                    out[(j, m + i)] = v;
                }
            }
        }
        out
    }

    /// `[⟨y_i, X⟩]_i`
    pub fn coeff_y(&self, geom: &Geometry, p: &ProductPoint, x: &ProductTangent) -> DVector<f64> {
        DVector::from_iterator(self.pairs.len(), self.pairs.iter().map(|pr| geom.inner(p, &pr.y, x)))
    }

    /// `θ[⟨s_i, X⟩]_i`
    pub fn coeff_s(&self, geom: &Geometry, p: &ProductPoint, x: &ProductTangent) -> DVector<f64> {
        DVector::from_iterator(
            self.pairs.len(),
            self.pairs.iter().map(|pr| self.theta * geom.inner(p, &pr.s, x)),
        )
    }

    /// `θ ξ − [cy_x; cs_x]ᵀ M [cy_y; cs_y]`
    pub fn quad_form_hw(
        &self,
        xi: f64,
        cy_x: &DVector<f64>,
        cs_x: &DVector<f64>,
        cy_y: &DVector<f64>,
        cs_y: &DVector<f64>,
    ) -> f64 {
        let m = self.pairs.len();
        if m == 0 {
            return self.theta * xi;
        }
        let (m11, m12) = (self.middle.view((0, 0), (m, m)), self.middle.view((0, m), (m, m)));
        let (m21, m22) = (self.middle.view((m, 0), (m, m)), self.middle.view((m, m), (m, m)));
        let top = m11 * cy_y + m12 * cs_y;
        let bottom = m21 * cy_y + m22 * cs_y;
        self.theta * xi - (cy_x.dot(&top) + cs_x.dot(&bottom))
    }

    /// `⟨X, H[Y]⟩`
    pub fn pairing(
        &self,
        geom: &Geometry,
        p: &ProductPoint,
        x: &ProductTangent,
        y: &ProductTangent,
    ) -> f64 {
        self.quad_form_hw(
            geom.inner(p, x, y),
            &self.coeff_y(geom, p, x),
            &self.coeff_s(geom, p, x),
            &self.coeff_y(geom, p, y),
            &self.coeff_s(geom, p, y),
        )
    }

    /// Box components `([y_{i,b}]_i, θ[s_{i,b}]_i)` of the stored pairs, i.e.
    /// the coefficients of the basis tangent `e_b`.
    pub fn basis_coeffs(&self, b: usize) -> (DVector<f64>, DVector<f64>) {
        let m = self.pairs.len();
        (
            DVector::from_iterator(m, self.pairs.iter().map(|pr| pr.y.euclidean[b])),
            DVector::from_iterator(m, self.pairs.iter().map(|pr| self.theta * pr.s.euclidean[b])),
        )
    }

    /// `⟨e_b, H[e_b]⟩` for box coordinate `b` (zero-based).
    pub fn basis_diag(&self, geom: &Geometry, b: usize) -> Result<f64> {
        if b >= geom.box_dim() {
            return Err(Error::InvalidArgument(format!(
                "box index {b} out of range for {} coordinates",
                geom.box_dim()
            )));
        }
        let (xi_y, xi_s) = self.basis_coeffs(b);
        Ok(self.quad_form_hw(1.0, &xi_y, &xi_s, &xi_y, &xi_s))
    }

    /// Applies the inverse approximation `B = H⁻¹` by the two-loop recursion.
    pub fn apply_inverse(&self, geom: &Geometry, p: &ProductPoint, x: &ProductTangent) -> ProductTangent {
        let mut q = x.clone();
        let mut alpha = vec![0.0; self.pairs.len()];
        for (i, pr) in self.pairs.iter().enumerate().rev() {
            alpha[i] = geom.inner(p, &pr.s, &q) / pr.sy;
            q.axpy(-alpha[i], &pr.y);
        }
        let mut r = q.scale(1.0 / self.theta);
        for (i, pr) in self.pairs.iter().enumerate() {
            let beta = geom.inner(p, &pr.y, &r) / pr.sy;
            r.axpy(alpha[i] - beta, &pr.s);
        }
        r
    }

    /// Applies the inverse of `H` restricted to the subspace where the box
    /// coordinates flagged in `fixed` are zero: `Z (ZᵀHZ)⁻¹ Zᵀ x`.
    ///
    /// Uses the Woodbury identity on the compact form,
    /// `(θI − W M Wᵀ)⁻¹ = I/θ + W (I − M WᵀW/θ)⁻¹ M Wᵀ / θ²`, with `W` the
    /// pair vectors with fixed coordinates removed. Returns `None` when the
    /// small `2μ × 2μ` system is singular.
    pub fn apply_reduced_inverse(
        &self,
        geom: &Geometry,
        p: &ProductPoint,
        x: &ProductTangent,
        fixed: &[bool],
    ) -> Option<ProductTangent> {
        let restrict = |v: &ProductTangent, scale: f64| {
            let mut out = v.scale(scale);
            for (e, &f) in out.euclidean.iter_mut().zip(fixed) {
                if f {
                    *e = 0.0;
                }
            }
            out
        };
        let r = restrict(x, 1.0);
        let m = self.pairs.len();
        if m == 0 {
            return Some(r.scale(1.0 / self.theta));
        }
        let w: Vec<ProductTangent> = self
            .pairs
            .iter()
            .map(|pr| restrict(&pr.y, 1.0))
            .chain(self.pairs.iter().map(|pr| restrict(&pr.s, self.theta)))
            .collect();
        let c = DVector::from_iterator(2 * m, w.iter().map(|wj| geom.inner(p, wj, &r)));
        let mut gram = DMatrix::zeros(2 * m, 2 * m);
        for i in 0..2 * m {
            for j in 0..=i {
                let v = geom.inner(p, &w[i], &w[j]);
                gram[(i, j)] = v;
                gram[(j, i)] = v;
            }
        }
        let n = DMatrix::identity(2 * m, 2 * m) - &self.middle * &gram / self.theta;
        let z = n.lu().solve(&(&self.middle * c))?;
        if z.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut out = r.scale(1.0 / self.theta);
        let inv_theta2 = 1.0 / (self.theta * self.theta);
        for (wj, zj) in w.iter().zip(z.iter()) {
            out.axpy(zj * inv_theta2, wj);
        }
        Some(out)
    }
}
