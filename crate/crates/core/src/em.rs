//! The EM loop, Aitken stopping rule and initialization strategies.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{check_dims, DataMatrix, MixtureParams, Responsibilities};
use crate::linalg::log_sum_exp;
use crate::model::ModelId;
use crate::mstep::{mstep, MStepConfig};
use crate::rng::{derive_seed, rng_from_seed};

/// Random starts tried per model on observed data, on top of the hierarchical start.
pub const DEFAULT_RANDOM_STARTS: usize = 20;

/// How random starting responsibilities are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Each row uniform on the probability simplex.
    #[default]
    Soft,
    /// Each row a one-hot draw with equal probabilities.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Threshold on the Aitken-extrapolated log-likelihood gap.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Smallest admissible effective component size; `None` means `p + 1`.
    pub min_weight: Option<f64>,
    pub seed: u64,
    pub init_mode: InitMode,
    pub mstep: MStepConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epsilon: 1e-6,
            max_iter: 1000,
            min_weight: None,
            seed: 0,
            init_mode: InitMode::Soft,
            mstep: MStepConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_iter < 2 {
            return Err(Error::InvalidConfig("max_iter must be at least 2".into()));
        }
        if let Some(w) = self.min_weight {
            if !(w >= 0.0) {
                return Err(Error::InvalidConfig("min_weight must be non-negative".into()));
            }
        }
        self.mstep.validate()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn min_weight_for(&self, p: usize) -> f64 {
        self.min_weight.unwrap_or(p as f64 + 1.0)
    }
}

/// Converged (or last) parameters of one EM run.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: MixtureParams,
    pub responsibilities: Responsibilities,
    /// Observed-data log-likelihood after every iteration.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("non-empty trace")
    }

    pub fn model(&self) -> ModelId {
        self.params.model()
    }
}

/// Component sizes, weighted means and weighted scatter matrices.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    pub counts: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub scatters: Vec<DMatrix<f64>>,
}

impl SufficientStats {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn p(&self) -> usize {
        self.means[0].len()
    }

    pub fn n(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn pooled_scatter(&self) -> DMatrix<f64> {
        let p = self.p();
        self.scatters.iter().fold(DMatrix::zeros(p, p), |acc, w| acc + w)
    }
}

/// Posterior probabilities and the observed-data log-likelihood.
pub fn e_step(data: &DataMatrix, params: &MixtureParams) -> Result<(Responsibilities, f64)> {
    check_dims(data, params)?;
    let k = params.k();
    let dens = params.densities();
    let log_w: Vec<f64> = params.weights().iter().map(|w| w.ln()).collect();
    let mut z = DMatrix::zeros(data.n(), k);
    let mut buf = vec![0.0; k];
    let mut total = 0.0;
    for (i, row) in data.values().row_iter().enumerate() {
        let x = row.transpose();
        for j in 0..k {
            buf[j] = log_w[j] + dens[j].log_density(x.as_view());
        }
        let lse = log_sum_exp(&buf);
        if !lse.is_finite() {
            return Err(Error::NumericalUnderflow(i));
        }
        total += lse;
        for j in 0..k {
            z[(i, j)] = (buf[j] - lse).exp();
        }
    }
    Ok((Responsibilities::from_matrix(z), total))
}

/// Effective sizes, means and scatters; fails when a component is lighter than `min_weight`.
pub fn sufficient_stats(data: &DataMatrix, z: &Responsibilities, min_weight: f64) -> Result<SufficientStats> {
    if z.n() != data.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} responsibility rows for {} observations",
            z.n(),
            data.n()
        )));
    }
    let x = data.values();
    let zm = z.matrix();
    let (n, p) = x.shape();
    let mut counts = Vec::with_capacity(z.k());
    let mut means = Vec::with_capacity(z.k());
    let mut scatters = Vec::with_capacity(z.k());
    for j in 0..z.k() {
        let weights = zm.column(j);
        let n_j = weights.sum();
        if !(n_j >= min_weight) || n_j <= 0.0 {
            return Err(Error::ComponentCollapse {
                component: j,
                weight: n_j,
                min_weight,
                trace: Vec::new(),
            });
        }
        let mean = x.tr_mul(&weights) / n_j;
        let mut y = DMatrix::zeros(n, p);
        for i in 0..n {
            let s = weights[i].sqrt();
            for c in 0..p {
                y[(i, c)] = s * (x[(i, c)] - mean[c]);
            }
        }
        let w = y.tr_mul(&y);
        counts.push(n_j);
        means.push(mean);
        scatters.push((&w + w.transpose()) * 0.5);
    }
    Ok(SufficientStats {
        counts,
        means,
        scatters,
    })
}

/// Aitken stopping rule on three consecutive log-likelihoods.
///
/// With `a = (l₂ - l₁)/(l₁ - l₀)` and `l∞ = l₁ + (l₂ - l₁)/(1 - a)`, reports
/// convergence when `l∞ - l₁ < ε`. A flat first difference or `a ≥ 1` falls
/// back to `l₂ - l₁ < ε`.
pub fn aitken_converged(l_q: f64, l_q1: f64, l_q2: f64, epsilon: f64) -> bool {
    let d1 = l_q1 - l_q;
    let d2 = l_q2 - l_q1;
    if d1 == 0.0 {
        return d2 < epsilon;
    }
    let a = d2 / d1;
    if !(a < 1.0) {
        return d2 < epsilon;
    }
    let l_inf = l_q1 + d2 / (1.0 - a);
    l_inf - l_q1 < epsilon
}

/// Random starting responsibilities, reproducible from `seed`.
pub fn init_random(n: usize, k: usize, mode: InitMode, seed: u64) -> Result<Responsibilities> {
    if k == 0 || n < k {
        return Err(Error::InvalidData(format!("need n >= k >= 1, got n = {n}, k = {k}")));
    }
    let mut rng = rng_from_seed(seed);
    let mut z = DMatrix::zeros(n, k);
    for i in 0..n {
        match mode {
            InitMode::Soft => {
                let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(&mut rng)).collect();
                let total: f64 = draws.iter().sum();
                for (j, d) in draws.iter().enumerate() {
                    z[(i, j)] = d / total;
                }
            }
            InitMode::Hard => {
                z[(i, rng.random_range(0..k))] = 1.0;
            }
        }
    }
    Ok(Responsibilities::from_matrix(z))
}

/// Runs EM for `model` from the given responsibilities.
///
/// Not converging within `max_iter` is reported through
/// [`FitResult::converged`], not as an error.
pub fn fit(data: &DataMatrix, model: ModelId, init: &Responsibilities, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    if init.n() != data.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} initial rows for {} observations",
            init.n(),
            data.n()
        )));
    }
    let p = data.p();
    if data.n() < p + 1 {
        return Err(Error::DegenerateScatter(format!(
            "{} observations cannot support a {p}-dimensional covariance",
            data.n()
        )));
    }
    let min_weight = cfg.min_weight_for(p);
    let n = data.n() as f64;
    let mut z = init.clone();
    let mut trace: Vec<f64> = Vec::new();
    let mut prev_covs = None;
    let mut last_params = None;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let stats = match sufficient_stats(data, &z, min_weight) {
            Ok(s) => s,
            Err(Error::ComponentCollapse {
                component,
                weight,
                min_weight,
                ..
            }) => {
                return Err(Error::ComponentCollapse {
                    component,
                    weight,
                    min_weight,
                    trace,
                })
            }
            Err(e) => return Err(e),
        };
        let covs = mstep(model, &stats, prev_covs.as_deref(), &cfg.mstep)?;
        let weights: Vec<f64> = stats.counts.iter().map(|c| c / n).collect();
        let params = MixtureParams::from_parts(model, weights, stats.means, covs.clone());
        let (z_new, ll) = e_step(data, &params)?;
        z = z_new;
        trace.push(ll);
        prev_covs = Some(covs);
        last_params = Some(params);
        let t = trace.len();
        if t >= 3 && aitken_converged(trace[t - 3], trace[t - 2], trace[t - 1], cfg.epsilon) {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        params: last_params.expect("at least one iteration"),
        responsibilities: z,
        loglik_trace: trace,
        converged,
        iterations,
    })
}

/// Best (highest log-likelihood) successful fit over several starts; ties go
/// to the earliest start. Fails only if every start fails.
pub fn fit_best_of(
    data: &DataMatrix,
    model: ModelId,
    inits: Vec<Responsibilities>,
    cfg: &FitConfig,
) -> Result<FitResult> {
    let results: Vec<Result<FitResult>> = inits.par_iter().map(|z| fit(data, model, z, cfg)).collect();
    let mut best: Option<FitResult> = None;
    let mut first_err = None;
    for r in results {
        match r {
            Ok(f) => {
                if best.as_ref().is_none_or(|b| f.loglik() > b.loglik()) {
                    best = Some(f);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.expect("at least one start"))
}

fn random_inits(n: usize, k: usize, cfg: &FitConfig, stream: u64, count: usize) -> Result<Vec<Responsibilities>> {
    let base = derive_seed(cfg.seed, stream);
    (0..count)
        .map(|s| init_random(n, k, cfg.init_mode, derive_seed(base, s as u64)))
        .collect()
}

/// Fits `model` and then VVV started from `model`'s posterior probabilities,
/// so that the VVV log-likelihood is at least that of `model`.
pub fn fit_nested_pair(
    data: &DataMatrix,
    model: ModelId,
    init: &Responsibilities,
    cfg: &FitConfig,
) -> Result<(FitResult, FitResult)> {
    if model == ModelId::VVV {
        return Err(Error::NotANullHypothesis(model));
    }
    let null_fit = fit(data, model, init, cfg)?;
    let alt_fit = fit(data, ModelId::VVV, &null_fit.responsibilities, cfg)?;
    if alt_fit.loglik() < null_fit.loglik() - 1e-8 {
        return Err(Error::DominanceViolation {
            l_m: null_fit.loglik(),
            l_vvv: alt_fit.loglik(),
        });
    }
    Ok((null_fit, alt_fit))
}

/// Parent models whose posteriors seed `model` in the hierarchy.
fn hierarchy_parents(model: ModelId) -> Vec<ModelId> {
    use ModelId as M;
    match model {
        m if m == M::VEE || m == M::EVE || m == M::EEV => vec![M::EEE],
        m if m == M::VVE => vec![M::VEE, M::EVE],
        m if m == M::VEV => vec![M::VEE, M::EEV],
        m if m == M::EVV => vec![M::EVE, M::EEV],
        m if m == M::VVV => vec![M::VVE, M::VEV, M::EVV],
        _ => vec![],
    }
}

/// Fits the whole family down the hierarchy.
///
/// EEE starts from random responsibilities; every other model starts from the
/// posteriors of its best-fitting parent (VEE, EVE, EEV from EEE; VVE from
/// VEE/EVE; VEV from VEE/EEV; EVV from EVE/EEV; VVV from the third level).
/// With `random_starts > 0` each model additionally tries that many random
/// starts and keeps the best, which preserves the log-likelihood ordering.
pub fn fit_hierarchy(
    data: &DataMatrix,
    k: usize,
    cfg: &FitConfig,
    random_starts: usize,
) -> Result<BTreeMap<ModelId, FitResult>> {
    hierarchy(data, k, None, cfg, random_starts)
}

/// [`fit_hierarchy`] with EEE additionally started from `init`.
pub fn fit_hierarchy_from(
    data: &DataMatrix,
    init: &Responsibilities,
    cfg: &FitConfig,
    random_starts: usize,
) -> Result<BTreeMap<ModelId, FitResult>> {
    hierarchy(data, init.k(), Some(init), cfg, random_starts)
}

fn hierarchy(
    data: &DataMatrix,
    k: usize,
    top_init: Option<&Responsibilities>,
    cfg: &FitConfig,
    random_starts: usize,
) -> Result<BTreeMap<ModelId, FitResult>> {
    cfg.validate()?;
    let mut fits: BTreeMap<ModelId, FitResult> = BTreeMap::new();
    for model in ModelId::ALL {
        let parents = hierarchy_parents(model);
        let mut inits = Vec::new();
        if let Some(parent) =
            parents
                .iter()
                .filter_map(|m| fits.get(m))
                .reduce(|a, b| if b.loglik() > a.loglik() { b } else { a })
        {
            inits.push(parent.responsibilities.clone());
        }
        let extra = if parents.is_empty() {
            inits.extend(top_init.cloned());
            if inits.is_empty() {
                random_starts.max(1)
            } else {
                random_starts
            }
        } else {
            random_starts
        };
        inits.extend(random_inits(data.n(), k, cfg, model.index() as u64, extra)?);
        let result = fit_best_of(data, model, inits, cfg)?;
        fits.insert(model, result);
    }
    Ok(fits)
}

/// `model`'s fit from [`fit_hierarchy`] with `random_starts` random starts
/// per model: the best of its own random starts and the hierarchical start,
/// whose parents were themselves multi-started.
pub fn fit_multistart(
    data: &DataMatrix,
    model: ModelId,
    k: usize,
    cfg: &FitConfig,
    random_starts: usize,
) -> Result<FitResult> {
    let mut fits = fit_hierarchy(data, k, cfg, random_starts)?;
    Ok(fits.remove(&model).expect("all models fitted"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{compose_covariance, CovarianceFactors};
    use nalgebra::dvector;

    fn blob(n: usize, seed: u64) -> DataMatrix {
        let mut rng = rng_from_seed(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let shift = if i % 2 == 0 { 0.0 } else { 4.0 };
                vec![
                    shift + rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0) + 0.3 * shift,
                ]
            })
            .collect();
        DataMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn aitken_examples() {
        assert!(aitken_converged(1.0, 2.0, 2.5, 1.01));
        assert!(!aitken_converged(1.0, 2.0, 2.5, 0.99));
        assert!(aitken_converged(5.0, 5.0, 5.0, 1e-12));
        // a >= 1 falls back to the plain difference
        assert!(!aitken_converged(1.0, 2.0, 3.0, 0.5));
    }

    #[test]
    fn random_inits_contract() {
        let z = init_random(3, 1, InitMode::Soft, 1).unwrap();
        assert!(z.matrix().iter().all(|&v| v == 1.0));
        let a = init_random(100, 2, InitMode::Hard, 42).unwrap();
        let b = init_random(100, 2, InitMode::Hard, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.matrix().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(a.matrix().row_iter().all(|r| r.sum() == 1.0));
        let s = init_random(100, 3, InitMode::Soft, 42).unwrap();
        assert!(s.matrix().row_iter().all(|r| (r.sum() - 1.0).abs() < 1e-12));
        assert!(init_random(1, 2, InitMode::Soft, 0).is_err());
    }

    #[test]
    fn e_step_single_and_symmetric() {
        let data = DataMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 5.0]]).unwrap();
        let one = MixtureParams::new(
            ModelId::VVV,
            vec![1.0],
            vec![dvector![0.0, 0.0]],
            vec![CovarianceFactors::identity(2)],
        )
        .unwrap();
        let (z, _) = e_step(&data, &one).unwrap();
        assert!(z.matrix().iter().all(|&v| v == 1.0));

        let two = MixtureParams::new(
            ModelId::EEE,
            vec![0.5, 0.5],
            vec![dvector![-1.0, 0.0], dvector![1.0, 0.0]],
            vec![CovarianceFactors::identity(2), CovarianceFactors::identity(2)],
        )
        .unwrap();
        let mid = DataMatrix::from_rows(&[vec![0.0, 3.0]]).unwrap();
        let (z, ll) = e_step(&mid, &two).unwrap();
        assert!((z.matrix()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((ll - crate::gaussian::mixture_loglik(&mid, &two).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sufficient_stats_edge_cases() {
        let data = DataMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        let hard = Responsibilities::from_labels(&[0, 1], 2).unwrap();
        let s = sufficient_stats(&data, &hard, 0.0).unwrap();
        assert!(s.scatters.iter().all(|w| w.amax() == 0.0));

        let even = Responsibilities::new(DMatrix::from_element(2, 2, 0.5)).unwrap();
        let s = sufficient_stats(&data, &even, 0.0).unwrap();
        assert!((&s.means[0] - dvector![2.0, 0.5]).amax() < 1e-15);
        assert_eq!(s.means[0], s.means[1]);

        let err = sufficient_stats(&data, &hard, 3.0).unwrap_err();
        assert!(matches!(err, Error::ComponentCollapse { component: 0, .. }));
    }

    #[test]
    fn single_component_is_sample_estimate() {
        let data = blob(60, 1);
        let z = init_random(60, 1, InitMode::Soft, 0).unwrap();
        let x = data.values();
        let mean = x.row_mean().transpose();
        let mut cov = DMatrix::zeros(2, 2);
        for i in 0..60 {
            let d = data.row(i) - &mean;
            cov += &d * d.transpose();
        }
        cov /= 60.0;
        for model in ModelId::ALL {
            let f = fit(&data, model, &z, &FitConfig::default()).unwrap();
            assert!(f.converged);
            assert!((&f.params.means()[0] - &mean).amax() < 1e-12);
            assert!((compose_covariance(&f.params.covariances()[0]) - &cov).amax() < 1e-10);
        }
    }

    #[test]
    fn fit_is_monotone_and_respects_constraints() {
        let data = blob(80, 2);
        let cfg = FitConfig::default();
        for model in ModelId::ALL {
            let z = init_random(80, 2, InitMode::Soft, 5).unwrap();
            let f = fit(&data, model, &z, &cfg).unwrap();
            assert!(f.loglik_trace.windows(2).all(|w| w[1] >= w[0] - 1e-8), "{model}");
            assert!(f.params.satisfies_constraints());
            assert_eq!(f.iterations, f.loglik_trace.len());
        }
    }

    #[test]
    fn collapse_carries_trace() {
        let data = blob(12, 3);
        let z = Responsibilities::from_labels(&[0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1], 2).unwrap();
        match fit(&data, ModelId::VVV, &z, &FitConfig::default()) {
            Err(Error::ComponentCollapse { component, trace, .. }) => {
                assert_eq!(component, 1);
                assert!(trace.is_empty());
            }
            other => panic!("expected collapse, got {other:?}"),
        }
    }

    #[test]
    fn too_few_rows_is_degenerate() {
        let data = DataMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let z = init_random(1, 1, InitMode::Soft, 0).unwrap();
        assert!(matches!(
            fit(&data, ModelId::EEE, &z, &FitConfig::default()),
            Err(Error::DegenerateScatter(_))
        ));
    }

    #[test]
    fn nested_pair_dominance() {
        let data = blob(80, 4);
        let z = init_random(80, 2, InitMode::Soft, 9).unwrap();
        for model in ModelId::NULLS {
            let (m, v) = fit_nested_pair(&data, model, &z, &FitConfig::default()).unwrap();
            assert!(v.loglik() >= m.loglik() - 1e-8);
        }
        assert!(fit_nested_pair(&data, ModelId::VVV, &z, &FitConfig::default()).is_err());
    }

    #[test]
    fn hierarchy_ordering() {
        let data = blob(80, 6);
        let fits = fit_hierarchy(&data, 2, &FitConfig::default(), 2).unwrap();
        let l = |m: ModelId| fits[&m].loglik();
        for model in ModelId::ALL {
            for other in ModelId::ALL {
                if model.is_nested_in(other) {
                    assert!(l(model) <= l(other) + 1e-8, "{model} vs {other}");
                }
            }
        }
    }
}
