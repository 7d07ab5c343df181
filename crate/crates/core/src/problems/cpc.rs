//! Common principal components with bounded variances.
//!
//! Unknowns are the per-class variances `D_i` (diagonals stored class after
//! class in the box part, each entry in `[d_min, d_max]`) and the shared
//! rotation `Q ∈ SO(r)`. The cost is
//! `Σ_i n_i (log det D_i + tr(D_i⁻¹ QᵀS_iQ))`.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Problem;
use crate::error::{Error, Result};
use crate::geometry::{random_rotation, BoxBounds, Geometry, ManifoldKind, ProductPoint, ProductTangent};

pub const DEFAULT_D_MIN: f64 = 0.1;
pub const DEFAULT_D_MAX: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct CpcInstance {
    pub covariances: Vec<DMatrix<f64>>,
    pub weights: Vec<f64>,
    pub d_min: f64,
    pub d_max: f64,
    /// Class labels in order of first appearance, when loaded from data.
    pub labels: Vec<String>,
    /// Planted rotation and per-class variances, when synthesized that way.
    pub planted_q: Option<DMatrix<f64>>,
    pub planted_diagonals: Option<Vec<DVector<f64>>>,
}

impl CpcInstance {
    pub fn new(covariances: Vec<DMatrix<f64>>, weights: Vec<f64>, d_min: f64, d_max: f64) -> Result<Self> {
        if covariances.is_empty() || covariances.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} covariances but {} weights",
                covariances.len(),
                weights.len()
            )));
        }
        let r = covariances[0].nrows();
        if r < 2 {
            return Err(Error::InvalidArgument(format!("need r ≥ 2, got {r}")));
        }
        for (i, s) in covariances.iter().enumerate() {
            if s.shape() != (r, r) {
                return Err(Error::InvalidArgument(format!("S_{i} is {:?}, expected {r}×{r}", s.shape())));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("S_{i} has non-finite entries")));
            }
            let asym = (s - s.transpose()).amax();
            if asym > 1e-10 {
                return Err(Error::InvalidArgument(format!("S_{i} is not symmetric (max |S − Sᵀ| = {asym:e})")));
            }
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument("class weights must be positive".into()));
        }
        if !(0.0 < d_min && d_min < d_max && d_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("need 0 < d_min < d_max, got {d_min}, {d_max}")));
        }
        Ok(Self {
            covariances,
            weights,
            d_min,
            d_max,
            labels: Vec::new(),
            planted_q: None,
            planted_diagonals: None,
        })
    }

    pub fn r(&self) -> usize {
        self.covariances[0].nrows()
    }

    pub fn classes(&self) -> usize {
        self.covariances.len()
    }
}

#[derive(Clone, Debug)]
pub struct CpcProblem {
    instance: CpcInstance,
    geometry: Geometry,
    name: String,
}

pub fn cpc_problem(instance: CpcInstance) -> CpcProblem {
    let r = instance.r();
    let bounds = BoxBounds::uniform(instance.classes() * r, instance.d_min, instance.d_max)
        .expect("bounds validated by CpcInstance::new");
    let geometry = Geometry::new(bounds, ManifoldKind::SpecialOrthogonal(r));
    CpcProblem { instance, geometry, name: "CPC".into() }
}

impl CpcProblem {
    pub fn instance(&self) -> &CpcInstance {
        &self.instance
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// `Q = I`, `D_i = clip(diag S_i)`.
    pub fn start_point(&self) -> ProductPoint {
        let r = self.instance.r();
        let mut d = DVector::zeros(self.instance.classes() * r);
        for (i, s) in self.instance.covariances.iter().enumerate() {
            for j in 0..r {
                d[i * r + j] = s[(j, j)].clamp(self.instance.d_min, self.instance.d_max);
            }
        }
        ProductPoint::new(d, DMatrix::identity(r, r))
    }

    /// Diagonals of `QᵀS_iQ`, one column per class.
    fn rotated_diagonals(&self, q: &DMatrix<f64>) -> DMatrix<f64> {
        let r = self.instance.r();
        let mut a = DMatrix::zeros(r, self.instance.classes());
        for (i, s) in self.instance.covariances.iter().enumerate() {
            let sq = s * q;
            for j in 0..r {
                a[(j, i)] = q.column(j).dot(&sq.column(j));
            }
        }
        a
    }
}

impl Problem for CpcProblem {
    fn name(&self) -> &str {
        &self.name
    }

    fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    fn cost(&self, p: &ProductPoint) -> f64 {
        let r = self.instance.r();
        let a = self.rotated_diagonals(&p.manifold);
        let mut total = 0.0;
        for (i, &w) in self.instance.weights.iter().enumerate() {
            let mut term = 0.0;
            for j in 0..r {
                let d = p.euclidean[i * r + j];
                term += d.ln() + a[(j, i)] / d;
            }
            total += w * term;
        }
        total
    }

    fn gradient(&self, p: &ProductPoint) -> ProductTangent {
        let r = self.instance.r();
        let q = &p.manifold;
        let mut gd = DVector::zeros(p.euclidean.len());
        let mut gq = DMatrix::zeros(r, r);
        for (i, (s, &w)) in self.instance.covariances.iter().zip(&self.instance.weights).enumerate() {
            let mut sq = s * q;
            for j in 0..r {
                let d = p.euclidean[i * r + j];
                let a = q.column(j).dot(&sq.column(j));
                gd[i * r + j] = w * (1.0 / d - a / (d * d));
                let mut col = sq.column_mut(j);
                col *= 2.0 * w / d;
            }
            gq += sq;
        }
        self.geometry.project_to_tangent(p, &ProductTangent { euclidean: gd, manifold: gq })
    }
}

/// Parameters for a random CPC instance.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCpc {
    pub r: usize,
    pub classes: usize,
    pub samples_per_class: usize,
    pub seed: u64,
    /// If set, `S_i = QΛ_iQᵀ + jitter`; otherwise `S_i` is the sample
    /// covariance of Gaussian draws with a random common eigenbasis.
    pub planted_q: Option<DMatrix<f64>>,
    /// Scale of the symmetric Gaussian perturbation added to planted `S_i`.
    pub jitter: f64,
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for SynthCpc {
    fn default() -> Self {
        Self {
            r: 4,
            classes: 3,
            samples_per_class: 50,
            seed: 0,
            planted_q: None,
            jitter: 0.0,
            d_min: DEFAULT_D_MIN,
            d_max: DEFAULT_D_MAX,
        }
    }
}

impl SynthCpc {
    pub fn generate(&self) -> Result<CpcInstance> {
        let (r, k, n) = (self.r, self.classes, self.samples_per_class);
        if r < 2 || k == 0 || n == 0 {
            return Err(Error::InvalidArgument(format!("need r ≥ 2 and positive counts, got r={r} classes={k} n={n}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let q = match &self.planted_q {
            Some(q) => {
                if q.shape() != (r, r) {
                    return Err(Error::InvalidArgument(format!("planted Q is {:?}, expected {r}×{r}", q.shape())));
                }
                q.clone()
            }
            None => random_rotation(r, &mut rng),
        };
        // Variances log-uniform over the central part of the admissible range.
        let (lo, hi) = ((2.0 * self.d_min).ln(), (0.5 * self.d_max).ln().max((2.0 * self.d_min).ln()));
        let lambdas: Vec<DVector<f64>> = (0..k)
            .map(|_| {
                DVector::from_fn(r, |_, _| rng.random_range(lo..=hi).exp().clamp(self.d_min, self.d_max))
            })
            .collect();

        let covariances = if self.planted_q.is_some() {
            lambdas
                .iter()
                .map(|l| {
                    let mut s = &q * DMatrix::from_diagonal(l) * q.transpose();
                    if self.jitter > 0.0 {
                        let g = DMatrix::from_fn(r, r, |_, _| rng.sample::<f64, _>(StandardNormal));
                        s += (&g + g.transpose()) * (0.5 * self.jitter);
                    }
                    (&s + s.transpose()) * 0.5
                })
                .collect()
        } else {
            lambdas
                .iter()
                .map(|l| {
                    let scale = DMatrix::from_diagonal(&l.map(f64::sqrt));
                    let z = DMatrix::from_fn(r, n, |_, _| rng.sample::<f64, _>(StandardNormal));
                    sample_covariance(&(&q * scale * z))
                })
                .collect()
        };

        let mut inst = CpcInstance::new(covariances, vec![n as f64; k], self.d_min, self.d_max)?;
        if self.planted_q.is_some() {
            inst.planted_q = Some(q);
            inst.planted_diagonals = Some(lambdas);
        }
        Ok(inst)
    }
}

pub fn synth_cpc(
    r: usize,
    classes: usize,
    samples_per_class: usize,
    seed: u64,
    planted_q: Option<DMatrix<f64>>,
) -> Result<CpcInstance> {
    SynthCpc { r, classes, samples_per_class, seed, planted_q, ..Default::default() }.generate()
}

/// `(1/n) X̃X̃ᵀ` for the row-centered `r×n` data matrix.
fn sample_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.ncols() as f64;
    let mean = x.column_mean();
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        col -= &mean;
    }
    let s = &c * c.transpose() / n;
    (&s + s.transpose()) * 0.5
}

/// Builds a CPC instance from a CSV file with a header row.
///
/// Rows are grouped by the value in `class_column` (classes in order of first
/// appearance). `feature_columns = None` selects every other column. Features
/// are centered per class before forming `S_i`.
pub fn load_class_csv(
    path: impl AsRef<Path>,
    class_column: &str,
    feature_columns: Option<&[String]>,
) -> Result<CpcInstance> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("{}: no column named {name:?}", path.display())))
    };
    let class_idx = find(class_column)?;
    let feature_idx: Vec<usize> = match feature_columns {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| i != class_idx).collect(),
    };
    if feature_idx.len() < 2 {
        return Err(Error::InvalidArgument(format!("need ≥ 2 feature columns, got {}", feature_idx.len())));
    }
    if feature_idx.contains(&class_idx) {
        return Err(Error::InvalidArgument("class column cannot also be a feature".into()));
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Vec<f64>>> = HashMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let label = record.get(class_idx).unwrap_or_default().to_string();
        let row = feature_idx
            .iter()
            .map(|&i| {
                let cell = record.get(i).unwrap_or_default();
                cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::Parse(format!(
                        "{}: row {}: column {:?} has non-numeric value {cell:?}",
                        path.display(),
                        line + 2,
                        &headers[i]
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if !groups.contains_key(&label) {
            order.push(label.clone());
        }
        groups.entry(label).or_default().push(row);
    }
    if order.len() < 2 {
        return Err(Error::InvalidArgument(format!("need ≥ 2 classes, found {}", order.len())));
    }

    let r = feature_idx.len();
    let mut covariances = Vec::with_capacity(order.len());
    let mut weights = Vec::with_capacity(order.len());
    for label in &order {
        let rows = &groups[label];
        let x = DMatrix::from_fn(r, rows.len(), |i, j| rows[j][i]);
        covariances.push(sample_covariance(&x));
        weights.push(rows.len() as f64);
    }
    let mut inst = CpcInstance::new(covariances, weights, DEFAULT_D_MIN, DEFAULT_D_MAX)?;
    inst.labels = order;
    Ok(inst)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        },
        _ => Error::Parse(format!("{}: {e}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted(seed: u64) -> CpcInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let q = random_rotation(4, &mut rng);
        synth_cpc(4, 3, 10, seed, Some(q)).unwrap()
    }

    #[test]
    fn planted_cost_is_log_det_plus_r() {
        let inst = planted(1);
        let q = inst.planted_q.clone().unwrap();
        let lambdas = inst.planted_diagonals.clone().unwrap();
        let expected: f64 = lambdas.iter().map(|l| 10.0 * (l.iter().map(|v| v.ln()).sum::<f64>() + 4.0)).sum();
        let d = DVector::from_iterator(12, lambdas.iter().flat_map(|l| l.iter().copied()));
        let prob = cpc_problem(inst);
        let val = prob.cost(&ProductPoint::new(d, q));
        assert!((val - expected).abs() < 1e-10 * expected.abs().max(1.0), "{val} vs {expected}");
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(planted(5), planted(5));
        let a = synth_cpc(3, 2, 20, 8, None).unwrap();
        let b = synth_cpc(3, 2, 20, 8, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_asymmetric_covariance() {
        let mut s = DMatrix::identity(2, 2);
        s[(0, 1)] = 1e-6;
        let err = CpcInstance::new(vec![s], vec![1.0], 0.1, 10.0).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn start_point_is_feasible() {
        let prob = cpc_problem(synth_cpc(3, 2, 30, 2, None).unwrap());
        let p = prob.start_point();
        assert_eq!(prob.geometry().membership_residual(&p), 0.0);
    }
}
