//! Small bound-constrained test functions (Branin, six-hump camel and three
//! Hock–Schittkowski problems plus Colville).

use std::f64::consts::PI;

use nalgebra::DVector;

use super::Problem;
use crate::geometry::{BoxBounds, Geometry, ProductPoint, ProductTangent};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Benchmark {
    Branin,
    Camel6,
    Hs4,
    Hs5,
    Hs38,
    Hs45,
}

impl Benchmark {
    pub const ALL: [Benchmark; 6] = [
        Benchmark::Branin,
        Benchmark::Camel6,
        Benchmark::Hs38,
        Benchmark::Hs4,
        Benchmark::Hs45,
        Benchmark::Hs5,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Benchmark::Branin => "BRANIN",
            Benchmark::Camel6 => "CAMEL6",
            Benchmark::Hs4 => "HS4",
            Benchmark::Hs5 => "HS5",
            Benchmark::Hs38 => "HS38",
            Benchmark::Hs45 => "HS45",
        }
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let inf = f64::INFINITY;
        match self {
            Benchmark::Branin => (vec![-5.0, 0.0], vec![10.0, 15.0]),
            Benchmark::Camel6 => (vec![-3.0, -1.5], vec![3.0, 1.5]),
            Benchmark::Hs4 => (vec![1.0, 0.0], vec![inf, inf]),
            Benchmark::Hs5 => (vec![-1.5, -3.0], vec![4.0, 3.0]),
            Benchmark::Hs38 => (vec![-10.0; 4], vec![10.0; 4]),
            Benchmark::Hs45 => (vec![0.0; 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]),
        }
    }

    /// Standard starting point.
    pub fn start(&self) -> Vec<f64> {
        match self {
            Benchmark::Branin => vec![2.5, 7.5],
            Benchmark::Camel6 => vec![1.1, 1.1],
            Benchmark::Hs4 => vec![1.125, 0.125],
            Benchmark::Hs5 => vec![0.0, 0.0],
            Benchmark::Hs38 => vec![-3.0, -1.0, -3.0, -1.0],
            Benchmark::Hs45 => vec![0.5, 1.0, 1.5, 2.0, 2.5],
        }
    }

    /// Optimal objective value as listed in published benchmark tables.
    pub fn reference(&self) -> f64 {
        match self {
            Benchmark::Branin => 0.3979,
            Benchmark::Camel6 => -1.032,
            Benchmark::Hs4 => 2.667,
            Benchmark::Hs5 => -1.913,
            Benchmark::Hs38 => 0.0,
            Benchmark::Hs45 => 1.0,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Benchmark::Branin => {
                let (a, b, c, r, s, t) = branin_consts();
                let u = x[1] - b * x[0] * x[0] + c * x[0] - r;
                a * u * u + s * (1.0 - t) * x[0].cos() + s
            }
            Benchmark::Camel6 => {
                let (x1, x2) = (x[0], x[1]);
                (4.0 - 2.1 * x1 * x1 + x1.powi(4) / 3.0) * x1 * x1 + x1 * x2 + (-4.0 + 4.0 * x2 * x2) * x2 * x2
            }
            Benchmark::Hs4 => (x[0] + 1.0).powi(3) / 3.0 + x[1],
            Benchmark::Hs5 => {
                (x[0] + x[1]).sin() + (x[0] - x[1]).powi(2) - 1.5 * x[0] + 2.5 * x[1] + 1.0
            }
            Benchmark::Hs38 => {
                let (x1, x2, x3, x4) = (x[0], x[1], x[2], x[3]);
                100.0 * (x2 - x1 * x1).powi(2)
                    + (1.0 - x1).powi(2)
                    + 90.0 * (x4 - x3 * x3).powi(2)
                    + (1.0 - x3).powi(2)
                    + 10.1 * ((x2 - 1.0).powi(2) + (x4 - 1.0).powi(2))
                    + 19.8 * (x2 - 1.0) * (x4 - 1.0)
            }
            Benchmark::Hs45 => 2.0 - x.iter().product::<f64>() / 120.0,
        }
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Benchmark::Branin => {
                let (a, b, c, r, s, t) = branin_consts();
                let u = x[1] - b * x[0] * x[0] + c * x[0] - r;
                vec![
                    2.0 * a * u * (c - 2.0 * b * x[0]) - s * (1.0 - t) * x[0].sin(),
                    2.0 * a * u,
                ]
            }
            Benchmark::Camel6 => {
                let (x1, x2) = (x[0], x[1]);
                vec![
                    8.0 * x1 - 8.4 * x1.powi(3) + 2.0 * x1.powi(5) + x2,
                    x1 - 8.0 * x2 + 16.0 * x2.powi(3),
                ]
            }
            Benchmark::Hs4 => vec![(x[0] + 1.0).powi(2), 1.0],
            Benchmark::Hs5 => {
                let c = (x[0] + x[1]).cos();
                let diff = 2.0 * (x[0] - x[1]);
                vec![c + diff - 1.5, c - diff + 2.5]
            }
            Benchmark::Hs38 => {
                let (x1, x2, x3, x4) = (x[0], x[1], x[2], x[3]);
                vec![
                    -400.0 * x1 * (x2 - x1 * x1) - 2.0 * (1.0 - x1),
                    200.0 * (x2 - x1 * x1) + 20.2 * (x2 - 1.0) + 19.8 * (x4 - 1.0),
                    -360.0 * x3 * (x4 - x3 * x3) - 2.0 * (1.0 - x3),
                    180.0 * (x4 - x3 * x3) + 20.2 * (x4 - 1.0) + 19.8 * (x2 - 1.0),
                ]
            }
            Benchmark::Hs45 => (0..x.len())
                .map(|i| {
                    let others: f64 = x.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).product();
                    -others / 120.0
                })
                .collect(),
        }
    }
}

fn branin_consts() -> (f64, f64, f64, f64, f64, f64) {
    (1.0, 5.1 / (4.0 * PI * PI), 5.0 / PI, 6.0, 10.0, 1.0 / (8.0 * PI))
}

#[derive(Clone, Debug)]
pub struct BenchmarkProblem {
    kind: Benchmark,
    geometry: Geometry,
}

impl BenchmarkProblem {
    pub fn new(kind: Benchmark) -> Self {
        let (l, u) = kind.bounds();
        let geometry = Geometry::box_only(BoxBounds::new(l, u).expect("static bounds are valid"));
        Self { kind, geometry }
    }

    pub fn kind(&self) -> Benchmark {
        self.kind
    }

    pub fn start_point(&self) -> ProductPoint {
        ProductPoint::from_slice(&self.kind.start())
    }
}

impl Problem for BenchmarkProblem {
    fn name(&self) -> &str {
        self.kind.name()
    }
    fn geometry(&self) -> &Geometry {
        &self.geometry
    }
    fn cost(&self, p: &ProductPoint) -> f64 {
        self.kind.value(p.euclidean.as_slice())
    }
    fn gradient(&self, p: &ProductPoint) -> ProductTangent {
        ProductTangent::euclidean_only(DVector::from_vec(self.kind.grad(p.euclidean.as_slice())))
    }
    fn reference_objective(&self) -> Option<f64> {
        Some(self.kind.reference())
    }
}

/// The six Euclidean benchmarks in alphabetical order.
pub fn euclidean_suite() -> Vec<BenchmarkProblem> {
    Benchmark::ALL.iter().map(|&k| BenchmarkProblem::new(k)).collect()
}
