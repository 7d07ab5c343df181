//! Amplitude-limited blind source separation.
//!
//! Unknowns are the sources `S` (k×n, entries in `[−A, A]`, stored column-major
//! in the box part) and the demixing matrix `W ∈ St(k, r)`. The cost is
//! `½‖S − WX‖² − λ Σ log cosh(S_ij)`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Problem;
use crate::error::{Error, Result};
use crate::geometry::{q_factor, BoxBounds, Geometry, ManifoldKind, ProductPoint, ProductTangent};

#[derive(Clone, Debug, PartialEq)]
pub struct BssInstance {
    /// Observed mixtures, r×n.
    pub x: DMatrix<f64>,
    pub lambda: f64,
    pub amplitude: f64,
    pub k: usize,
    /// Ground-truth sources (k×n) when the instance was synthesized.
    pub sources: Option<DMatrix<f64>>,
    /// Ground-truth mixing matrix (r×k, orthonormal columns) when synthesized.
    pub mixing: Option<DMatrix<f64>>,
}

impl BssInstance {
    pub fn new(x: DMatrix<f64>, k: usize, lambda: f64, amplitude: f64) -> Result<Self> {
        if k == 0 || k > x.nrows() || x.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "need 0 < k ≤ r and n > 0, got k={k}, X {}×{}",
                x.nrows(),
                x.ncols()
            )));
        }
        if !(lambda >= 0.0) || !(amplitude > 0.0) || !amplitude.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda={lambda}, amplitude={amplitude}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("X contains non-finite entries".into()));
        }
        Ok(Self { x, lambda, amplitude, k, sources: None, mixing: None })
    }

    pub fn r(&self) -> usize {
        self.x.nrows()
    }

    pub fn n(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Clone, Debug)]
pub struct BssProblem {
    instance: BssInstance,
    geometry: Geometry,
    name: String,
}

pub fn bss_problem(instance: BssInstance) -> BssProblem {
    let (k, r, n) = (instance.k, instance.r(), instance.n());
    let bounds = BoxBounds::uniform(k * n, -instance.amplitude, instance.amplitude)
        .expect("amplitude validated by BssInstance::new");
    let geometry = Geometry::new(bounds, ManifoldKind::Stiefel { k, r });
    BssProblem { instance, geometry, name: "BSS".into() }
}

impl BssProblem {
    pub fn instance(&self) -> &BssInstance {
        &self.instance
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn sources<'a>(&self, p: &'a ProductPoint) -> nalgebra::DMatrixView<'a, f64> {
        nalgebra::DMatrixView::from_slice(p.euclidean.as_slice(), self.instance.k, self.instance.n())
    }

    /// `W₀` a random Stiefel point, `S₀ = clip(W₀X)`.
    pub fn start_point<R: Rng + ?Sized>(&self, rng: &mut R) -> ProductPoint {
        let w = self.geometry.random_point(rng).manifold;
        let s = (&w * &self.instance.x).map(|v| v.clamp(-self.instance.amplitude, self.instance.amplitude));
        ProductPoint::new(nalgebra::DVector::from_column_slice(s.as_slice()), w)
    }

    fn residual(&self, p: &ProductPoint) -> DMatrix<f64> {
        self.sources(p) - &p.manifold * &self.instance.x
    }
}

/// `log cosh` without overflow.
fn log_cosh(s: f64) -> f64 {
    let a = s.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

impl Problem for BssProblem {
    fn name(&self) -> &str {
        &self.name
    }

    fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    fn cost(&self, p: &ProductPoint) -> f64 {
        let penalty: f64 = p.euclidean.iter().map(|&s| log_cosh(s)).sum();
        0.5 * self.residual(p).norm_squared() - self.instance.lambda * penalty
    }

    fn gradient(&self, p: &ProductPoint) -> ProductTangent {
        let res = self.residual(p);
        let lambda = self.instance.lambda;
        let gs = nalgebra::DVector::from_iterator(
            res.len(),
            res.iter().zip(p.euclidean.iter()).map(|(&r, &s)| r - lambda * s.tanh()),
        );
        let gw = -(&res * self.instance.x.transpose());
        let g = ProductTangent { euclidean: gs, manifold: gw };
        self.geometry.project_to_tangent(p, &g)
    }
}

/// Parameters for a random BSS instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthBss {
    pub k: usize,
    pub r: usize,
    pub n: usize,
    pub amplitude: f64,
    pub lambda: f64,
    /// Standard deviation of the additive Gaussian noise on X.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthBss {
    fn default() -> Self {
        Self { k: 3, r: 3, n: 50, amplitude: 1.0, lambda: 0.1, noise: 0.01, seed: 0 }
    }
}

impl SynthBss {
    pub fn generate(&self) -> Result<BssInstance> {
        let &SynthBss { k, r, n, amplitude, lambda, noise, seed } = self;
        if k == 0 || r == 0 || n == 0 || k > r {
            return Err(Error::InvalidArgument(format!("need 0 < k ≤ r and n > 0, got k={k} r={r} n={n}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sources = DMatrix::from_fn(k, n, |_, _| rng.random_range(-amplitude..=amplitude));
        let g = DMatrix::from_fn(r, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mixing = q_factor(&g);
        let mut x = &mixing * &sources;
        if noise > 0.0 {
            x.iter_mut().for_each(|v| *v += noise * rng.sample::<f64, _>(StandardNormal));
        }
        let mut inst = BssInstance::new(x, k, lambda, amplitude)?;
        inst.sources = Some(sources);
        inst.mixing = Some(mixing);
        Ok(inst)
    }
}

/// Random instance with `λ = 0.1` and noise level 0.01.
pub fn synth_bss(k: usize, r: usize, n: usize, amplitude: f64, seed: u64) -> Result<BssInstance> {
    SynthBss { k, r, n, amplitude, seed, ..Default::default() }.generate()
}
