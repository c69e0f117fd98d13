//! Data containers, eigen-factored covariances and mixture densities.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;
use rand_distr::{weighted::WeightedIndex, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, orthogonality_error, sorted_eigen};
use crate::model::ModelId;

const SHAPE_TOL: f64 = 1e-8;
const ORTHO_TOL: f64 = 1e-8;
/// Smallest admissible eigenvalue relative to the largest.
pub const SPD_RELATIVE_FLOOR: f64 = 1e-10;

/// `n` observations of `p` real variables, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: DMatrix<f64>,
}

impl DataMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidData(
                "data must have at least one row and one column".into(),
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (n, _) = values.shape();
            return Err(Error::InvalidData(format!(
                "non-finite value at row {}, column {}",
                pos % n,
                pos / n
            )));
        }
        Ok(DataMatrix { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != p) {
            return Err(Error::InvalidData(format!(
                "row {i} has {} values, expected {p}",
                rows[i].len()
            )));
        }
        Self::new(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.values.row(i).transpose()
    }
}

/// Volume, shape and orientation of one component covariance,
/// `Σ = λ Γ diag(shape) Γ'`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceFactors {
    lambda: f64,
    shape: DVector<f64>,
    orientation: DMatrix<f64>,
}

impl CovarianceFactors {
    /// Validates unit determinant, non-increasing shape and orthogonality.
    pub fn new(lambda: f64, shape: DVector<f64>, orientation: DMatrix<f64>) -> Result<Self> {
        let p = shape.len();
        if orientation.nrows() != p || orientation.ncols() != p {
            return Err(Error::DimensionMismatch(format!(
                "orientation is {}x{}, shape has length {p}",
                orientation.nrows(),
                orientation.ncols()
            )));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidData(format!("volume must be positive, got {lambda}")));
        }
        if shape.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidData("shape entries must be positive".into()));
        }
        let log_det: f64 = shape.iter().map(|s| s.ln()).sum();
        if log_det.exp_m1().abs() > SHAPE_TOL {
            return Err(Error::InvalidData(format!(
                "shape determinant is {}, expected 1",
                log_det.exp()
            )));
        }
        if shape.as_slice().windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidData("shape entries must be non-increasing".into()));
        }
        if orthogonality_error(&orientation) > ORTHO_TOL {
            return Err(Error::InvalidData("orientation is not orthogonal".into()));
        }
        Ok(Self::from_parts(lambda, shape, orientation))
    }

    pub(crate) fn from_parts(lambda: f64, shape: DVector<f64>, orientation: DMatrix<f64>) -> Self {
        CovarianceFactors {
            lambda,
            shape,
            orientation,
        }
    }

    /// Factors from per-axis variances `ξ_l` (in orientation order).
    pub(crate) fn from_axis_variances(xi: &DVector<f64>, orientation: DMatrix<f64>) -> Self {
        let p = xi.len() as f64;
        let log_lambda = xi.iter().map(|x| x.ln()).sum::<f64>() / p;
        let lambda = log_lambda.exp();
        let shape = xi.map(|x| (x.ln() - log_lambda).exp());
        Self::from_parts(lambda, shape, orientation)
    }

    pub fn identity(p: usize) -> Self {
        Self::from_parts(1.0, DVector::from_element(p, 1.0), DMatrix::identity(p, p))
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn shape(&self) -> &DVector<f64> {
        &self.shape
    }

    pub fn orientation(&self) -> &DMatrix<f64> {
        &self.orientation
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    /// Eigenvalues `λ·shape_l` of the covariance, in orientation order.
    pub fn axis_variances(&self) -> DVector<f64> {
        &self.shape * self.lambda
    }

    pub fn log_det(&self) -> f64 {
        self.shape.iter().map(|s| (self.lambda * s).ln()).sum()
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self::from_parts(lambda, self.shape.clone(), self.orientation.clone())
    }
}

/// `λ Γ diag(shape) Γ'`.
pub fn compose_covariance(f: &CovarianceFactors) -> DMatrix<f64> {
    let g = &f.orientation;
    let scaled = g * DMatrix::from_diagonal(&f.axis_variances());
    let s = scaled * g.transpose();
    (&s + s.transpose()) * 0.5
}

/// Splits an SPD matrix into volume `|S|^{1/p}`, sorted unit-determinant shape
/// and the matching eigenvectors.
pub fn decompose_covariance(s: &DMatrix<f64>) -> Result<CovarianceFactors> {
    let p = s.nrows();
    if p == 0 || s.ncols() != p {
        return Err(Error::DimensionMismatch("covariance must be square".into()));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite("non-finite entries".into()));
    }
    let (values, vectors) = sorted_eigen(s);
    let max = values[0];
    let min = values[p - 1];
    if !(max > 0.0) || min <= SPD_RELATIVE_FLOOR * max {
        return Err(Error::NotPositiveDefinite(format!(
            "eigenvalues range from {min:e} to {max:e}"
        )));
    }
    Ok(CovarianceFactors::from_axis_variances(&values, vectors))
}

/// Log of the `p`-variate Gaussian density, evaluated through the factors.
pub fn log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &CovarianceFactors) -> f64 {
    ComponentDensity::new(mean, cov).log_density(x.as_view())
}

/// A component prepared for repeated density evaluation.
#[derive(Debug, Clone)]
pub(crate) struct ComponentDensity {
    mean: DVector<f64>,
    /// Columns `γ_l / sqrt(λ shape_l)`.
    whitening: DMatrix<f64>,
    log_norm: f64,
}

impl ComponentDensity {
    pub(crate) fn new(mean: &DVector<f64>, cov: &CovarianceFactors) -> Self {
        let p = cov.dim();
        let mut whitening = cov.orientation.clone();
        for (l, v) in cov.axis_variances().iter().enumerate() {
            whitening.column_mut(l).scale_mut(1.0 / v.sqrt());
        }
        let log_norm = -0.5 * (p as f64 * (2.0 * PI).ln() + cov.log_det());
        ComponentDensity {
            mean: mean.clone(),
            whitening,
            log_norm,
        }
    }

    pub(crate) fn log_density(&self, x: DVectorView<'_, f64>) -> f64 {
        let centered = x - &self.mean;
        let y = self.whitening.tr_mul(&centered);
        self.log_norm - 0.5 * y.norm_squared()
    }
}

/// Mixing weights, means and factored covariances of a `k`-component mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    model: ModelId,
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<CovarianceFactors>,
}

impl MixtureParams {
    pub fn new(
        model: ModelId,
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<CovarianceFactors>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "{} weights, {} means, {} covariances",
                k,
                means.len(),
                covariances.len()
            )));
        }
        let p = means[0].len();
        if means.iter().any(|m| m.len() != p) || covariances.iter().any(|c| c.dim() != p) {
            return Err(Error::DimensionMismatch("components differ in dimension".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidData("mixing weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidData(format!("mixing weights sum to {total}")));
        }
        let params = MixtureParams {
            model,
            weights,
            means,
            covariances,
        };
        if !params.satisfies_constraints() {
            return Err(Error::InvalidData(format!(
                "covariances violate the {model} constraint pattern"
            )));
        }
        Ok(params)
    }

    pub(crate) fn from_parts(
        model: ModelId,
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<CovarianceFactors>,
    ) -> Self {
        MixtureParams {
            model,
            weights,
            means,
            covariances,
        }
    }

    /// True when every factor tied by the model is bitwise identical across components.
    pub fn satisfies_constraints(&self) -> bool {
        let first = &self.covariances[0];
        self.covariances.iter().all(|c| {
            (self.model.volume.is_variable() || c.lambda == first.lambda)
                && (self.model.shape.is_variable() || c.shape == first.shape)
                && (self.model.orientation.is_variable() || c.orientation == first.orientation)
        })
    }

    pub fn model(&self) -> ModelId {
        self.model
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn p(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[CovarianceFactors] {
        &self.covariances
    }

    pub(crate) fn densities(&self) -> Vec<ComponentDensity> {
        self.means
            .iter()
            .zip(&self.covariances)
            .map(|(m, c)| ComponentDensity::new(m, c))
            .collect()
    }
}

/// Posterior membership probabilities, `n × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    z: DMatrix<f64>,
}

impl Responsibilities {
    pub fn new(z: DMatrix<f64>) -> Result<Self> {
        if z.nrows() == 0 || z.ncols() == 0 {
            return Err(Error::InvalidData("responsibilities must be non-empty".into()));
        }
        for (i, row) in z.row_iter().enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidData(format!("row {i} has entries outside [0, 1]")));
            }
            if (row.sum() - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidData(format!("row {i} sums to {}", row.sum())));
            }
        }
        Ok(Responsibilities { z })
    }

    pub(crate) fn from_matrix(z: DMatrix<f64>) -> Self {
        Responsibilities { z }
    }

    /// One-hot rows from labels in `0..k`.
    pub fn from_labels(labels: &[usize], k: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidData(format!("label {bad} outside 0..{k}")));
        }
        let z = DMatrix::from_fn(labels.len(), k, |i, j| if labels[i] == j { 1.0 } else { 0.0 });
        Self::new(z)
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn k(&self) -> usize {
        self.z.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// Most probable component per row, ties to the lowest index.
    pub fn map_labels(&self) -> Vec<usize> {
        self.z
            .row_iter()
            .map(|row| {
                let mut best = 0;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Observed-data log-likelihood `Σ_i log Σ_j π_j φ(x_i; μ_j, Σ_j)`.
pub fn mixture_loglik(data: &DataMatrix, params: &MixtureParams) -> Result<f64> {
    check_dims(data, params)?;
    let dens = params.densities();
    let log_w: Vec<f64> = params.weights.iter().map(|w| w.ln()).collect();
    let mut buf = vec![0.0; params.k()];
    let mut total = 0.0;
    for row in data.values().row_iter() {
        let x = row.transpose();
        for (j, d) in dens.iter().enumerate() {
            buf[j] = log_w[j] + d.log_density(x.as_view());
        }
        total += log_sum_exp(&buf);
    }
    Ok(total)
}

/// Draws `n` observations from `params`, returning the data and the
/// generating component of every row.
pub fn sample_mixture<R: Rng + ?Sized>(
    params: &MixtureParams,
    n: usize,
    rng: &mut R,
) -> Result<(DataMatrix, Vec<usize>)> {
    let p = params.p();
    let roots: Vec<DMatrix<f64>> = params
        .covariances
        .iter()
        .map(|c| c.orientation() * DMatrix::from_diagonal(&c.axis_variances().map(f64::sqrt)))
        .collect();
    let picker = WeightedIndex::new(&params.weights).map_err(|e| Error::InvalidData(e.to_string()))?;
    let mut values = DMatrix::zeros(n, p);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let j = picker.sample(rng);
        let eps = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = &params.means[j] + &roots[j] * eps;
        values.set_row(i, &x.transpose());
        labels.push(j);
    }
    Ok((DataMatrix::new(values)?, labels))
}

pub(crate) fn check_dims(data: &DataMatrix, params: &MixtureParams) -> Result<()> {
    if data.p() != params.p() {
        return Err(Error::DimensionMismatch(format!(
            "data has {} columns, parameters have dimension {}",
            data.p(),
            params.p()
        )));
    }
    Ok(())
}
