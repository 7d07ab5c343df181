//! Product geometry `D × M` of a box `D = [l_1, u_1] × … × [l_n, u_n]` and a
//! Riemannian manifold `M`.
//!
//! Points and tangent vectors are stored as a dense Euclidean vector plus a
//! dense matrix for the manifold part:
//!
//! | manifold                | point                         | tangent at `p`             |
//! |-------------------------|-------------------------------|----------------------------|
//! | none                    | `0 × 0`                       | `0 × 0`                    |
//! | `Sphere(m)`             | `m × 1`, unit norm            | `pᵀX = 0`                  |
//! | `SpecialOrthogonal(r)`  | `r × r`, `QᵀQ = I`, `det = 1` | `QᵀX` skew-symmetric       |
//! | `Stiefel { k, r }`      | `k × r`, `W Wᵀ = I_k`         | `X Wᵀ` skew-symmetric      |
//!
//! All manifold parts use the metric inherited from the ambient Frobenius
//! inner product. The sphere uses its exact exponential map, logarithm and
//! parallel transport. The orthogonal groups use the QR retraction, its exact
//! inverse and transport by projection onto the target tangent space.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Lower and upper bounds of the box part. Infinite entries are allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::InvalidArgument(format!(
                "bound lengths differ: {} lower vs {} upper",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || l == f64::INFINITY || u == f64::NEG_INFINITY || l > u {
                return Err(Error::InvalidArgument(format!(
                    "invalid bounds at index {i}: [{l}, {u}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `n` coordinates without bounds.
    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    /// `n` coordinates sharing the same interval.
    pub fn uniform(n: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; n], vec![upper; n])
    }

    pub fn empty() -> Self {
        Self::unbounded(0)
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Clips every component of `x` into `[l_i, u_i]`.
    pub fn clamp(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(&v, (&l, &u))| v.max(l).min(u)),
        )
    }

    /// Clips `x` into the box and moves coordinates lying within a few
    /// rounding errors of a finite bound exactly onto it.
    pub fn clamp_and_snap(&self, x: &DVector<f64>) -> DVector<f64> {
        let snap = |v: f64, b: f64| b.is_finite() && (v - b).abs() <= 8.0 * f64::EPSILON * b.abs().max(1.0);
        DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .map(|(&v, (&l, &u))| {
                    let v = v.max(l).min(u);
                    if snap(v, l) {
                        l
                    } else if snap(v, u) {
                        u
                    } else {
                        v
                    }
                }),
        )
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.len()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&v, (&l, &u))| l <= v && v <= u)
    }

    /// Largest bound breach of `x`; zero for feasible points.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&v, (&l, &u))| (l - v).max(v - u).max(0.0))
            .fold(0.0, f64::max)
    }
}

/// Clips `x` into the box.
pub fn clamp_to_box(bounds: &BoxBounds, x: &DVector<f64>) -> DVector<f64> {
    bounds.clamp(x)
}

/// The manifold factor of a product geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifoldKind {
    None,
    /// Unit sphere embedded in `R^m`; the argument is the ambient dimension.
    Sphere(usize),
    /// Rotation matrices of size `r × r`.
    SpecialOrthogonal(usize),
    /// `k × r` matrices with orthonormal rows.
    Stiefel { k: usize, r: usize },
}

impl ManifoldKind {
    /// Shape of the matrix storing points and tangents.
    pub fn shape(&self) -> (usize, usize) {
        match *self {
            ManifoldKind::None => (0, 0),
            ManifoldKind::Sphere(m) => (m, 1),
            ManifoldKind::SpecialOrthogonal(r) => (r, r),
            ManifoldKind::Stiefel { k, r } => (k, r),
        }
    }

    /// Intrinsic dimension.
    pub fn dim(&self) -> usize {
        match *self {
            ManifoldKind::None => 0,
            ManifoldKind::Sphere(m) => m.saturating_sub(1),
            ManifoldKind::SpecialOrthogonal(r) => r * r.saturating_sub(1) / 2,
            ManifoldKind::Stiefel { k, r } => r * k - k * (k + 1) / 2,
        }
    }
}

/// A point `(p_D, p_M)` of the product.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductPoint {
    pub euclidean: DVector<f64>,
    pub manifold: DMatrix<f64>,
}

impl ProductPoint {
    pub fn new(euclidean: DVector<f64>, manifold: DMatrix<f64>) -> Self {
        Self { euclidean, manifold }
    }

    pub fn euclidean_only(euclidean: DVector<f64>) -> Self {
        Self {
            euclidean,
            manifold: DMatrix::zeros(0, 0),
        }
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self::euclidean_only(DVector::from_column_slice(x))
    }
}

/// A tangent vector `(X_D, X_M)` at some base point.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductTangent {
    pub euclidean: DVector<f64>,
    pub manifold: DMatrix<f64>,
}

impl ProductTangent {
    pub fn new(euclidean: DVector<f64>, manifold: DMatrix<f64>) -> Self {
        Self { euclidean, manifold }
    }

    pub fn euclidean_only(euclidean: DVector<f64>) -> Self {
        Self {
            euclidean,
            manifold: DMatrix::zeros(0, 0),
        }
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self::euclidean_only(DVector::from_column_slice(x))
    }

    pub fn zeros_like(other: &ProductTangent) -> Self {
        Self {
            euclidean: DVector::zeros(other.euclidean.len()),
            manifold: DMatrix::zeros(other.manifold.nrows(), other.manifold.ncols()),
        }
    }

    pub fn scale(&self, a: f64) -> Self {
        Self {
            euclidean: &self.euclidean * a,
            manifold: &self.manifold * a,
        }
    }

    /// `self += a · other`
    pub fn axpy(&mut self, a: f64, other: &ProductTangent) {
        self.euclidean.axpy(a, &other.euclidean, 1.0);
        self.manifold += &other.manifold * a;
    }

    /// Euclidean inner product of the stacked coefficients. Equals the product
    /// metric for every geometry in this crate.
    pub fn dot(&self, other: &ProductTangent) -> f64 {
        self.euclidean.dot(&other.euclidean) + self.manifold.dot(&other.manifold)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.euclidean.iter().chain(self.manifold.iter()).all(|&v| v == 0.0)
    }
}

impl Add for &ProductTangent {
    type Output = ProductTangent;
    fn add(self, rhs: &ProductTangent) -> ProductTangent {
        ProductTangent {
            euclidean: &self.euclidean + &rhs.euclidean,
            manifold: &self.manifold + &rhs.manifold,
        }
    }
}

impl Sub for &ProductTangent {
    type Output = ProductTangent;
    fn sub(self, rhs: &ProductTangent) -> ProductTangent {
        ProductTangent {
            euclidean: &self.euclidean - &rhs.euclidean,
            manifold: &self.manifold - &rhs.manifold,
        }
    }
}

impl Neg for &ProductTangent {
    type Output = ProductTangent;
    fn neg(self) -> ProductTangent {
        self.scale(-1.0)
    }
}

impl Neg for ProductTangent {
    type Output = ProductTangent;
    fn neg(self) -> ProductTangent {
        ProductTangent {
            euclidean: -self.euclidean,
            manifold: -self.manifold,
        }
    }
}

impl Mul<f64> for &ProductTangent {
    type Output = ProductTangent;
    fn mul(self, a: f64) -> ProductTangent {
        self.scale(a)
    }
}

/// The product `D × M`.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    bounds: BoxBounds,
    manifold: ManifoldKind,
}

impl Geometry {
    pub fn new(bounds: BoxBounds, manifold: ManifoldKind) -> Self {
        Self { bounds, manifold }
    }

    pub fn box_only(bounds: BoxBounds) -> Self {
        Self::new(bounds, ManifoldKind::None)
    }

    pub fn manifold_only(manifold: ManifoldKind) -> Self {
        Self::new(BoxBounds::empty(), manifold)
    }

    pub fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }

    pub fn manifold(&self) -> ManifoldKind {
        self.manifold
    }

    /// Number of box coordinates.
    pub fn box_dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn dim(&self) -> usize {
        self.bounds.len() + self.manifold.dim()
    }

    fn check_shapes(&self, what: &str, e: &DVector<f64>, m: &DMatrix<f64>) -> Result<()> {
        let (rows, cols) = self.manifold.shape();
        if e.len() != self.bounds.len() || m.nrows() != rows || m.ncols() != cols {
            return Err(Error::InvalidArgument(format!(
                "{what} has shape ({}, {}×{}), expected ({}, {rows}×{cols})",
                e.len(),
                m.nrows(),
                m.ncols(),
                self.bounds.len()
            )));
        }
        Ok(())
    }

    /// Checks shape, box feasibility and manifold membership (within `tol`).
    pub fn check_point(&self, p: &ProductPoint, tol: f64) -> Result<()> {
        self.check_shapes("point", &p.euclidean, &p.manifold)?;
        if !self.bounds.contains(&p.euclidean) {
            return Err(Error::InvalidArgument(format!(
                "point violates bounds by {}",
                self.bounds.violation(&p.euclidean)
            )));
        }
        let res = self.membership_residual(p);
        if !(res <= tol) {
            return Err(Error::InvalidArgument(format!(
                "manifold part is off the manifold (residual {res:e})"
            )));
        }
        Ok(())
    }

    pub fn check_tangent(&self, p: &ProductPoint, x: &ProductTangent) -> Result<()> {
        self.check_shapes("point", &p.euclidean, &p.manifold)?;
        self.check_shapes("tangent", &x.euclidean, &x.manifold)
    }

    /// Product metric `X_D·Y_D + ⟨X_M, Y_M⟩_{p_M}`.
    pub fn inner(&self, _p: &ProductPoint, x: &ProductTangent, y: &ProductTangent) -> f64 {
        debug_assert_eq!(x.euclidean.len(), y.euclidean.len());
        debug_assert_eq!(x.manifold.shape(), y.manifold.shape());
        x.dot(y)
    }

    /// Same as [`Geometry::inner`] with a shape check.
    pub fn try_inner(&self, p: &ProductPoint, x: &ProductTangent, y: &ProductTangent) -> Result<f64> {
        self.check_tangent(p, x)?;
        self.check_tangent(p, y)?;
        Ok(self.inner(p, x, y))
    }

    pub fn norm(&self, p: &ProductPoint, x: &ProductTangent) -> f64 {
        self.inner(p, x, x).sqrt()
    }

    pub fn zero_tangent(&self, _p: &ProductPoint) -> ProductTangent {
        let (r, c) = self.manifold.shape();
        ProductTangent::new(DVector::zeros(self.bounds.len()), DMatrix::zeros(r, c))
    }

    /// Box part `p_D + X_D`, manifold part by the retraction of `M`.
    pub fn retract(&self, p: &ProductPoint, x: &ProductTangent) -> ProductPoint {
        let euclidean = &p.euclidean + &x.euclidean;
        let manifold = match self.manifold {
            ManifoldKind::None => DMatrix::zeros(0, 0),
            ManifoldKind::Sphere(_) => sphere_exp(&p.manifold, &x.manifold),
            ManifoldKind::SpecialOrthogonal(_) => q_factor(&(&p.manifold + &x.manifold)),
            ManifoldKind::Stiefel { .. } => {
                q_factor(&(&p.manifold + &x.manifold).transpose()).transpose()
            }
        };
        ProductPoint { euclidean, manifold }
    }

    /// Retraction followed by [`BoxBounds::clamp_and_snap`] on the box part.
    /// When `p_D + X_D` is feasible in exact arithmetic this only removes
    /// rounding error, and coordinates meant to land on a bound land on it.
    pub fn retract_feasible(&self, p: &ProductPoint, x: &ProductTangent) -> ProductPoint {
        let mut q = self.retract(p, x);
        q.euclidean = self.bounds.clamp_and_snap(&q.euclidean);
        q
    }

    /// Inverse of [`Geometry::retract`].
    pub fn inverse_retract(&self, p: &ProductPoint, q: &ProductPoint) -> Result<ProductTangent> {
        let euclidean = &q.euclidean - &p.euclidean;
        let manifold = match self.manifold {
            ManifoldKind::None => DMatrix::zeros(0, 0),
            ManifoldKind::Sphere(_) => sphere_log(&p.manifold, &q.manifold)?,
            ManifoldKind::SpecialOrthogonal(_) => inverse_q_factor(&p.manifold, &q.manifold)?,
            ManifoldKind::Stiefel { .. } => {
                inverse_q_factor(&p.manifold.transpose(), &q.manifold.transpose())?.transpose()
            }
        };
        Ok(ProductTangent { euclidean, manifold })
    }

    /// Transports `v` from `T_p` to `T_q` with `q = retract(p, x)`.
    pub fn vector_transport(
        &self,
        p: &ProductPoint,
        x: &ProductTangent,
        v: &ProductTangent,
    ) -> ProductTangent {
        let q = self.retract(p, x);
        self.vector_transport_to(p, x, &q, v)
    }

    /// Like [`Geometry::vector_transport`] with the target point `q` precomputed.
    pub fn vector_transport_to(
        &self,
        p: &ProductPoint,
        x: &ProductTangent,
        q: &ProductPoint,
        v: &ProductTangent,
    ) -> ProductTangent {
        let manifold = match self.manifold {
            ManifoldKind::None => DMatrix::zeros(0, 0),
            ManifoldKind::Sphere(_) => {
                sphere_parallel_transport(&p.manifold, &x.manifold, &q.manifold, &v.manifold)
            }
            ManifoldKind::SpecialOrthogonal(_) => project_cols(&q.manifold, &v.manifold),
            ManifoldKind::Stiefel { .. } => project_rows(&q.manifold, &v.manifold),
        };
        ProductTangent {
            euclidean: v.euclidean.clone(),
            manifold,
        }
    }

    /// Projection onto the tangent cone: zeroes box components that point out
    /// of an active bound. The manifold part is left untouched.
    pub fn project_tangent_cone(&self, p: &ProductPoint, x: &ProductTangent) -> ProductTangent {
        let lower = self.bounds.lower();
        let upper = self.bounds.upper();
        let euclidean = DVector::from_iterator(
            x.euclidean.len(),
            x.euclidean.iter().enumerate().map(|(i, &v)| {
                let pi = p.euclidean[i];
                if (pi == lower[i] && v < 0.0) || (pi == upper[i] && v > 0.0) {
                    0.0
                } else {
                    v
                }
            }),
        );
        ProductTangent {
            euclidean,
            manifold: x.manifold.clone(),
        }
    }

    /// Orthogonal projection of an ambient vector onto `T_p`. The box part
    /// passes through unchanged; use it to turn a Euclidean gradient into the
    /// Riemannian one.
    pub fn project_to_tangent(&self, p: &ProductPoint, ambient: &ProductTangent) -> ProductTangent {
        let manifold = match self.manifold {
            ManifoldKind::None => DMatrix::zeros(0, 0),
            ManifoldKind::Sphere(_) => {
                let a = p.manifold.dot(&ambient.manifold);
                &ambient.manifold - &p.manifold * a
            }
            ManifoldKind::SpecialOrthogonal(_) => project_cols(&p.manifold, &ambient.manifold),
            ManifoldKind::Stiefel { .. } => project_rows(&p.manifold, &ambient.manifold),
        };
        ProductTangent {
            euclidean: ambient.euclidean.clone(),
            manifold,
        }
    }

    /// Cap on the path parameter along the manifold part.
    pub fn max_stepsize(&self, _p: &ProductPoint) -> f64 {
        match self.manifold {
            ManifoldKind::None => f64::INFINITY,
            ManifoldKind::Sphere(_)
            | ManifoldKind::SpecialOrthogonal(_)
            | ManifoldKind::Stiefel { .. } => PI,
        }
    }

    /// Distance of the manifold part from the manifold (max-abs entry of the
    /// orthonormality defect; unit-norm defect on the sphere).
    pub fn membership_residual(&self, p: &ProductPoint) -> f64 {
        let m = &p.manifold;
        match self.manifold {
            ManifoldKind::None => 0.0,
            ManifoldKind::Sphere(_) => (m.norm() - 1.0).abs(),
            ManifoldKind::SpecialOrthogonal(r) => {
                let defect = max_abs(&(m.transpose() * m - DMatrix::identity(r, r)));
                defect.max((m.determinant() - 1.0).abs())
            }
            ManifoldKind::Stiefel { k, .. } => {
                max_abs(&(m * m.transpose() - DMatrix::identity(k, k)))
            }
        }
    }

    /// Size of the violation of the tangency constraint of `x` at `p`.
    pub fn tangency_residual(&self, p: &ProductPoint, x: &ProductTangent) -> f64 {
        let (pm, xm) = (&p.manifold, &x.manifold);
        match self.manifold {
            ManifoldKind::None => 0.0,
            ManifoldKind::Sphere(_) => pm.dot(xm).abs(),
            ManifoldKind::SpecialOrthogonal(_) => max_abs(&sym(&(pm.transpose() * xm))),
            ManifoldKind::Stiefel { .. } => max_abs(&sym(&(xm * pm.transpose()))),
        }
    }

    /// Clips the box part into the bounds.
    pub fn clamp_point(&self, p: &ProductPoint) -> ProductPoint {
        ProductPoint {
            euclidean: self.bounds.clamp(&p.euclidean),
            manifold: p.manifold.clone(),
        }
    }

    /// Random feasible point. Finite intervals are sampled uniformly;
    /// half-infinite or infinite ones from a unit normal offset.
    pub fn random_point<R: Rng + ?Sized>(&self, rng: &mut R) -> ProductPoint {
        let euclidean = DVector::from_iterator(
            self.bounds.len(),
            self.bounds
                .lower()
                .iter()
                .zip(self.bounds.upper())
                .map(|(&l, &u)| {
                    let z: f64 = rng.sample(StandardNormal);
                    match (l.is_finite(), u.is_finite()) {
                        (true, true) => l + (u - l) * rng.random::<f64>(),
                        (true, false) => l + z.abs(),
                        (false, true) => u - z.abs(),
                        (false, false) => z,
                    }
                }),
        );
        let manifold = match self.manifold {
            ManifoldKind::None => DMatrix::zeros(0, 0),
            ManifoldKind::Sphere(m) => {
                let v = gaussian_matrix(m, 1, rng);
                let n = v.norm();
                v / n
            }
            ManifoldKind::SpecialOrthogonal(r) => random_rotation(r, rng),
            ManifoldKind::Stiefel { k, r } => q_factor(&gaussian_matrix(r, k, rng)).transpose(),
        };
        ProductPoint { euclidean, manifold }
    }

    /// Random tangent at `p` with unit norm (zero if the geometry is empty).
    pub fn random_tangent<R: Rng + ?Sized>(&self, p: &ProductPoint, rng: &mut R) -> ProductTangent {
        let (r, c) = self.manifold.shape();
        let ambient = ProductTangent::new(
            DVector::from_iterator(self.bounds.len(), (0..self.bounds.len()).map(|_| rng.sample(StandardNormal))),
            gaussian_matrix(r, c, rng),
        );
        let x = self.project_to_tangent(p, &ambient);
        let n = x.norm();
        if n > 0.0 {
            x.scale(1.0 / n)
        } else {
            x
        }
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Uniformly distributed rotation of size `r × r`.
pub fn random_rotation<R: Rng + ?Sized>(r: usize, rng: &mut R) -> DMatrix<f64> {
    let mut q = q_factor(&gaussian_matrix(r, r, rng));
    if r > 0 && q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

/// Q factor of the thin QR decomposition of `a` (`n × k`, `n ≥ k`), with the
/// signs fixed so that `R` has a nonnegative diagonal.
pub(crate) fn q_factor(a: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = a.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Tangent projection at `p` with orthonormal columns: `Z − p sym(pᵀZ)`.
fn project_cols(p: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    z - p * sym(&(p.transpose() * z))
}

/// Tangent projection at `w` with orthonormal rows: `Z − sym(Z wᵀ) w`.
fn project_rows(w: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    z - sym(&(z * w.transpose())) * w
}

/// Inverts the QR retraction for orthonormal-column frames.
///
/// With `q R = p + X` and `pᵀX` skew, `M = pᵀq` satisfies
/// `M R + (M R)ᵀ = 2 I`. That is a square linear system in the `k(k+1)/2`
/// entries of the upper-triangular `R`; `X = q R − p`.
fn inverse_q_factor(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = p.ncols();
    let m = p.transpose() * q;
    let idx = |i: usize, j: usize| j * (j + 1) / 2 + i; // i <= j, column-packed upper triangle
    let size = k * (k + 1) / 2;
    let mut a = DMatrix::<f64>::zeros(size, size);
    let mut rhs = DVector::<f64>::zeros(size);
    let mut row = 0;
    for b in 0..k {
        for c in 0..=b {
            // (M R)_{cb} + (M R)_{bc}
            for i in 0..=b {
                a[(row, idx(i, b))] += m[(c, i)];
            }
            for i in 0..=c {
                a[(row, idx(i, c))] += m[(b, i)];
            }
            rhs[row] = if b == c { 2.0 } else { 0.0 };
            row += 1;
        }
    }
    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::DegenerateInput("inverse QR retraction system is singular".into()))?;
    let mut r = DMatrix::<f64>::zeros(k, k);
    for j in 0..k {
        for i in 0..=j {
            r[(i, j)] = sol[idx(i, j)];
        }
    }
    if (0..k).any(|i| !(r[(i, i)] > 0.0)) {
        return Err(Error::DegenerateInput(
            "target point lies outside the invertibility region of the QR retraction".into(),
        ));
    }
    Ok(q * r - p)
}

fn sphere_exp(p: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let theta = x.norm();
    if theta == 0.0 {
        return p.clone();
    }
    let q = p * theta.cos() + x * (theta.sin() / theta);
    let n = q.norm();
    q / n
}

fn sphere_log(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let c = p.dot(q);
    let v = q - p * c;
    let s = v.norm();
    if s <= 1e-14 {
        if c > 0.0 {
            return Ok(DMatrix::zeros(p.nrows(), p.ncols()));
        }
        return Err(Error::DegenerateInput(
            "antipodal points have no unique logarithm".into(),
        ));
    }
    let theta = s.atan2(c);
    Ok(v * (theta / s))
}

/// Parallel transport along the great circle `t ↦ exp_p(t x)` to `q = exp_p(x)`.
fn sphere_parallel_transport(
    p: &DMatrix<f64>,
    x: &DMatrix<f64>,
    q: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> DMatrix<f64> {
    let theta = x.norm();
    let out = if theta == 0.0 {
        v.clone()
    } else {
        let u = x / theta;
        let a = u.dot(v);
        v + &u * (a * (theta.cos() - 1.0)) - p * (a * theta.sin())
    };
    // remove rounding drift out of T_q
    let c = q.dot(&out);
    out - q * c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sphere3() -> Geometry {
        Geometry::manifold_only(ManifoldKind::Sphere(3))
    }

    fn e(i: usize, n: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, 1);
        m[(i, 0)] = 1.0;
        m
    }

    fn rot2(a: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[a.cos(), -a.sin(), a.sin(), a.cos()])
    }

    #[test]
    fn bounds_reject_inverted_interval() {
        assert!(BoxBounds::new(vec![1.0], vec![0.0]).is_err());
        assert!(BoxBounds::new(vec![0.0], vec![0.0, 1.0]).is_err());
        assert!(BoxBounds::new(vec![f64::INFINITY], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn inner_box_only() {
        let g = Geometry::box_only(BoxBounds::unbounded(2));
        let p = ProductPoint::from_slice(&[0.0, 0.0]);
        let x = ProductTangent::from_slice(&[1.0, 2.0]);
        let y = ProductTangent::from_slice(&[3.0, -1.0]);
        assert_eq!(g.inner(&p, &x, &y), 1.0);
    }

    #[test]
    fn inner_rejects_shape_mismatch() {
        let g = Geometry::box_only(BoxBounds::unbounded(2));
        let p = ProductPoint::from_slice(&[0.0, 0.0]);
        let x = ProductTangent::from_slice(&[1.0, 2.0]);
        let y = ProductTangent::from_slice(&[3.0]);
        assert!(matches!(g.try_inner(&p, &x, &y), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn inner_sphere_unit_tangent() {
        let g = sphere3();
        let p = ProductPoint::new(DVector::zeros(0), e(0, 3));
        let x = ProductTangent::new(DVector::zeros(0), e(1, 3));
        assert_eq!(g.inner(&p, &x, &x), 1.0);
    }

    #[test]
    fn inner_product_is_sum_of_parts() {
        let g = Geometry::new(BoxBounds::unbounded(3), ManifoldKind::Stiefel { k: 2, r: 4 });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = g.random_point(&mut rng);
        let x = g.random_tangent(&p, &mut rng);
        let y = g.random_tangent(&p, &mut rng);
        let mut expected = 0.0;
        for i in 0..3 {
            expected += x.euclidean[i] * y.euclidean[i];
        }
        for i in 0..2 {
            for j in 0..4 {
                expected += x.manifold[(i, j)] * y.manifold[(i, j)];
            }
        }
        assert!((g.inner(&p, &x, &y) - expected).abs() < 1e-14);
    }

    #[test]
    fn retract_box_translation() {
        let g = Geometry::box_only(BoxBounds::uniform(1, 0.0, 1.0).unwrap());
        let q = g.retract(&ProductPoint::from_slice(&[0.5]), &ProductTangent::from_slice(&[0.25]));
        assert_eq!(q.euclidean[0], 0.75);
    }

    #[test]
    fn retract_sphere_quarter_circle() {
        let g = sphere3();
        let p = ProductPoint::new(DVector::zeros(0), e(0, 3));
        let x = ProductTangent::new(DVector::zeros(0), e(1, 3) * (PI / 2.0));
        let q = g.retract(&p, &x);
        assert!((q.manifold - e(1, 3)).norm() < 1e-12);
    }

    #[test]
    fn retract_so2_close_to_exponential() {
        let g = Geometry::manifold_only(ManifoldKind::SpecialOrthogonal(2));
        let a = PI / 4.0;
        let p = ProductPoint::new(DVector::zeros(0), DMatrix::identity(2, 2));
        let x = ProductTangent::new(DVector::zeros(0), DMatrix::from_row_slice(2, 2, &[0.0, -a, a, 0.0]));
        let q = g.retract(&p, &x);
        assert!(g.membership_residual(&q) < 1e-12);
        // QR retraction of I + X is exactly the rotation by atan(a); it agrees
        // with exp(X) = rot(a) only to first order in a.
        assert!((&q.manifold - rot2(a.atan())).norm() < 1e-12);
        let dist = (&q.manifold - rot2(a)).norm();
        let expected = 2.0 * 2f64.sqrt() * ((a - a.atan()) / 2.0).sin();
        assert!((dist - expected).abs() < 1e-12);
        for small in [1e-2, 1e-3] {
            let x = ProductTangent::new(
                DVector::zeros(0),
                DMatrix::from_row_slice(2, 2, &[0.0, -small, small, 0.0]),
            );
            let d = (g.retract(&p, &x).manifold - rot2(small)).norm();
            assert!(d <= small.powi(3), "retraction not second-order accurate: {d}");
        }
    }

    #[test]
    fn inverse_retract_box_and_sphere() {
        let g = Geometry::box_only(BoxBounds::unbounded(1));
        let x = g
            .inverse_retract(&ProductPoint::from_slice(&[0.0]), &ProductPoint::from_slice(&[1.0]))
            .unwrap();
        assert_eq!(x.euclidean[0], 1.0);

        let g = sphere3();
        let p = ProductPoint::new(DVector::zeros(0), e(0, 3));
        let q = ProductPoint::new(DVector::zeros(0), e(1, 3));
        let x = g.inverse_retract(&p, &q).unwrap();
        assert!((x.manifold - e(1, 3) * (PI / 2.0)).norm() < 1e-10);
    }

    #[test]
    fn inverse_retract_sphere_antipodal_fails() {
        let g = sphere3();
        let p = ProductPoint::new(DVector::zeros(0), e(0, 3));
        let q = ProductPoint::new(DVector::zeros(0), -e(0, 3));
        assert!(matches!(g.inverse_retract(&p, &q), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn inverse_retract_so3_round_trip() {
        let g = Geometry::manifold_only(ManifoldKind::SpecialOrthogonal(3));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let p = g.random_point(&mut rng);
            let x = g.random_tangent(&p, &mut rng).scale(0.7);
            let q = g.retract(&p, &x);
            let back = g.inverse_retract(&p, &q).unwrap();
            let q2 = g.retract(&p, &back);
            assert!((&q2.manifold - &q.manifold).norm() < 1e-8);
            assert!((&back - &x).norm() < 1e-8);
        }
    }

    #[test]
    fn transport_box_is_identity() {
        let g = Geometry::box_only(BoxBounds::unbounded(2));
        let p = ProductPoint::from_slice(&[0.0, 1.0]);
        let x = ProductTangent::from_slice(&[1.0, 1.0]);
        let v = ProductTangent::from_slice(&[2.0, -3.0]);
        assert_eq!(g.vector_transport(&p, &x, &v), v);
    }

    #[test]
    fn transport_sphere_quarter_circle() {
        let g = sphere3();
        let p = ProductPoint::new(DVector::zeros(0), e(0, 3));
        let x = ProductTangent::new(DVector::zeros(0), e(1, 3) * (PI / 2.0));
        let v = ProductTangent::new(DVector::zeros(0), e(1, 3));
        let w = g.vector_transport(&p, &x, &v);
        assert!((w.manifold + e(0, 3)).norm() < 1e-12);
    }

    #[test]
    fn transport_stiefel_is_tangent() {
        let g = Geometry::manifold_only(ManifoldKind::Stiefel { k: 2, r: 5 });
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = g.random_point(&mut rng);
        let x = g.random_tangent(&p, &mut rng);
        let v = g.random_tangent(&p, &mut rng);
        let q = g.retract(&p, &x);
        let w = g.vector_transport_to(&p, &x, &q, &v);
        assert!(g.tangency_residual(&q, &w) < 1e-10);
    }

    #[test]
    fn tangent_cone_projection_cases() {
        let g = Geometry::box_only(BoxBounds::uniform(1, 0.0, 1.0).unwrap());
        let at_lower = ProductPoint::from_slice(&[0.0]);
        let y = g.project_tangent_cone(&at_lower, &ProductTangent::from_slice(&[-1.0]));
        assert_eq!(y.euclidean[0], 0.0);
        let at_upper = ProductPoint::from_slice(&[1.0]);
        let y = g.project_tangent_cone(&at_upper, &ProductTangent::from_slice(&[2.0]));
        assert_eq!(y.euclidean[0], 0.0);
        let inside = ProductPoint::from_slice(&[0.3]);
        let x = ProductTangent::from_slice(&[-7.0]);
        assert_eq!(g.project_tangent_cone(&inside, &x), x);
    }

    #[test]
    fn max_stepsize_rules() {
        let b = Geometry::box_only(BoxBounds::unbounded(2));
        assert_eq!(b.max_stepsize(&ProductPoint::from_slice(&[0.0, 0.0])), f64::INFINITY);
        let s = sphere3();
        let p = ProductPoint::new(DVector::zeros(0), e(0, 3));
        assert_eq!(s.max_stepsize(&p), PI);
        let bs = Geometry::new(BoxBounds::unbounded(1), ManifoldKind::Sphere(3));
        let p = ProductPoint::new(DVector::zeros(1), e(0, 3));
        assert_eq!(bs.max_stepsize(&p), PI);
    }

    #[test]
    fn clamp_examples() {
        let b = BoxBounds::uniform(1, 0.0, 1.0).unwrap();
        assert_eq!(clamp_to_box(&b, &DVector::from_element(1, -2.0))[0], 0.0);
        assert_eq!(clamp_to_box(&b, &DVector::from_element(1, 0.4))[0], 0.4);
        assert_eq!(clamp_to_box(&b, &DVector::from_element(1, 5.0))[0], 1.0);
    }

    #[test]
    fn check_point_catches_infeasible() {
        let g = Geometry::box_only(BoxBounds::uniform(1, 0.0, 1.0).unwrap());
        assert!(g.check_point(&ProductPoint::from_slice(&[2.0]), 1e-10).is_err());
        assert!(g.check_point(&ProductPoint::from_slice(&[0.5]), 1e-10).is_ok());
    }

    #[test]
    fn random_rotation_has_unit_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for r in 2..6 {
            let q = random_rotation(r, &mut rng);
            assert!((q.determinant() - 1.0).abs() < 1e-12);
        }
    }
}
