//! Objective functions with analytic Riemannian gradients.

mod bss;
mod cpc;
mod euclidean;

pub use bss::{bss_problem, synth_bss, BssInstance, BssProblem, SynthBss};
pub use cpc::{cpc_problem, load_class_csv, synth_cpc, CpcInstance, CpcProblem, SynthCpc};
pub use euclidean::{euclidean_suite, Benchmark, BenchmarkProblem};

use crate::geometry::{Geometry, ProductPoint, ProductTangent};

/// A smooth cost on a product geometry.
pub trait Problem: Send + Sync {
    fn name(&self) -> &str;

    fn geometry(&self) -> &Geometry;

    fn cost(&self, p: &ProductPoint) -> f64;

    /// Riemannian gradient, tangent at `p`.
    fn gradient(&self, p: &ProductPoint) -> ProductTangent;

    /// Known optimal value, if any.
    fn reference_objective(&self) -> Option<f64> {
        None
    }
}

impl<T: Problem + ?Sized> Problem for &T {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn geometry(&self) -> &Geometry {
        (**self).geometry()
    }
    fn cost(&self, p: &ProductPoint) -> f64 {
        (**self).cost(p)
    }
    fn gradient(&self, p: &ProductPoint) -> ProductTangent {
        (**self).gradient(p)
    }
    fn reference_objective(&self) -> Option<f64> {
        (**self).reference_objective()
    }
}

/// Problem assembled from a pair of closures.
pub struct FnProblem<F, G> {
    name: String,
    geometry: Geometry,
    cost: F,
    gradient: G,
    reference: Option<f64>,
}

impl<F, G> FnProblem<F, G>
where
    F: Fn(&ProductPoint) -> f64 + Send + Sync,
    G: Fn(&ProductPoint) -> ProductTangent + Send + Sync,
{
    pub fn new(name: impl Into<String>, geometry: Geometry, cost: F, gradient: G) -> Self {
        Self {
            name: name.into(),
            geometry,
            cost,
            gradient,
            reference: None,
        }
    }

    pub fn with_reference(mut self, value: f64) -> Self {
        self.reference = Some(value);
        self
    }
}

impl<F, G> Problem for FnProblem<F, G>
where
    F: Fn(&ProductPoint) -> f64 + Send + Sync,
    G: Fn(&ProductPoint) -> ProductTangent + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }
    fn geometry(&self) -> &Geometry {
        &self.geometry
    }
    fn cost(&self, p: &ProductPoint) -> f64 {
        (self.cost)(p)
    }
    fn gradient(&self, p: &ProductPoint) -> ProductTangent {
        (self.gradient)(p)
    }
    fn reference_objective(&self) -> Option<f64> {
        self.reference
    }
}

/// Wraps a problem and counts cost and gradient calls.
pub struct Counting<P> {
    inner: P,
    costs: std::sync::atomic::AtomicUsize,
    grads: std::sync::atomic::AtomicUsize,
}

impl<P: Problem> Counting<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            costs: Default::default(),
            grads: Default::default(),
        }
    }

    pub fn cost_calls(&self) -> usize {
        self.costs.load(std::sync::atomic::Ordering::Relaxed)
    }

    pub fn gradient_calls(&self) -> usize {
        self.grads.load(std::sync::atomic::Ordering::Relaxed)
    }
}

impl<P: Problem> Problem for Counting<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn geometry(&self) -> &Geometry {
        self.inner.geometry()
    }
    fn cost(&self, p: &ProductPoint) -> f64 {
        self.costs.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.inner.cost(p)
    }
    fn gradient(&self, p: &ProductPoint) -> ProductTangent {
        self.grads.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.inner.gradient(p)
    }
    fn reference_objective(&self) -> Option<f64> {
        self.inner.reference_objective()
    }
}
