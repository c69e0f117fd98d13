//! Bivariate two-group scenarios calibrated by Bhattacharyya overlap, and
//! the p-value distribution experiments built on them.

use std::f64::consts::PI;

use nalgebra::{dvector, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed::{closed_test_from_fits, ClosedTestConfig, Method};
use crate::em::{fit, fit_hierarchy_from, FitConfig};
use crate::error::{Error, Result};
use crate::gaussian::{
    compose_covariance, sample_mixture, CovarianceFactors, DataMatrix, MixtureParams, Responsibilities,
};
use crate::lrt::{bootstrap_distribution, bootstrap_threshold, chi2_pvalue, lr_statistic};
use crate::model::{lr_degrees_of_freedom, ModelId};
use crate::rng::{derive_seed, rng_from_seed};

const OVERLAP_TOL: f64 = 1e-10;

/// Factors of the first component.
pub const BASE_FACTORS: (f64, f64, f64) = (1.0, 0.7, PI / 6.0);
/// Factors taken by the second component where the model lets them vary.
pub const VARIABLE_FACTORS: (f64, f64, f64) = (3.0, 0.3, PI / 6.0 + PI / 4.0);

/// `λ R(γ) diag(1/δ, δ) R(γ)'` in factored form.
pub fn build_component_cov(lambda: f64, delta: f64, gamma: f64) -> Result<CovarianceFactors> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidShape(delta));
    }
    let (s, c) = gamma.sin_cos();
    let rotation = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
    CovarianceFactors::new(lambda, dvector![1.0 / delta, delta], rotation)
}

/// `exp(-B*)` with `B* = (1/8) d' S̄⁻¹ d + (1/2) log(|S̄| / sqrt(|S1| |S2|))`
/// and `S̄ = (S1 + S2) / 2`.
pub fn bhattacharyya_overlap(mu1: &DVector<f64>, mu2: &DVector<f64>, s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> f64 {
    let avg = (s1 + s2) * 0.5;
    let log_det = |m: &DMatrix<f64>| -> f64 {
        let chol = m.clone().cholesky().expect("SPD covariance");
        2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    };
    let chol = avg.clone().cholesky().expect("SPD covariance");
    let d = mu2 - mu1;
    let mahal = d.dot(&chol.solve(&d));
    let b_star = mahal / 8.0 + 0.5 * (log_det(&avg) - 0.5 * (log_det(s1) + log_det(s2)));
    (-b_star).exp()
}

fn overlap_at(mu22: f64, s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> f64 {
    bhattacharyya_overlap(&dvector![0.0, 0.0], &dvector![0.0, mu22], s1, s2)
}

/// Second coordinate of `μ_2 = (0, μ_22)` (with `μ_1 = 0`) giving overlap `target`.
pub fn solve_mu22_for_overlap(target: f64, s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let max = overlap_at(0.0, s1, s2);
    if !(target > 0.0) || target >= max {
        return Err(Error::UnreachableOverlap { target, max });
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while overlap_at(hi, s1, s2) > target {
        lo = hi;
        hi *= 2.0;
    }
    loop {
        let mid = 0.5 * (lo + hi);
        let b = overlap_at(mid, s1, s2);
        if (b - target).abs() <= OVERLAP_TOL || hi - lo <= f64::EPSILON * hi {
            return Ok(mid);
        }
        if b > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// A two-group scenario generated under `H_0` of `model`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub model: ModelId,
    pub n: usize,
    pub overlap: f64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.overlap > 0.0 && self.overlap < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "overlap must lie in (0, 1), got {}",
                self.overlap
            )));
        }
        if self.n == 0 {
            return Err(Error::InvalidConfig("sample size must be positive".into()));
        }
        Ok(())
    }

    /// Covariance factors of the two groups: the second takes the variable
    /// factor values wherever the model lets that factor vary.
    pub fn covariances(&self) -> Result<[CovarianceFactors; 2]> {
        let (l1, d1, g1) = BASE_FACTORS;
        let (l2, d2, g2) = VARIABLE_FACTORS;
        let m = self.model;
        let second = build_component_cov(
            if m.volume.is_variable() { l2 } else { l1 },
            if m.shape.is_variable() { d2 } else { d1 },
            if m.orientation.is_variable() { g2 } else { g1 },
        )?;
        Ok([build_component_cov(l1, d1, g1)?, second])
    }

    /// The generating mixture: equal weights, `μ_1 = 0`, `μ_2 = (0, μ_22)`.
    pub fn params(&self) -> Result<MixtureParams> {
        self.validate()?;
        let covs = self.covariances()?;
        let mu22 = solve_mu22_for_overlap(
            self.overlap,
            &compose_covariance(&covs[0]),
            &compose_covariance(&covs[1]),
        )?;
        MixtureParams::new(
            self.model,
            vec![0.5, 0.5],
            vec![dvector![0.0, 0.0], dvector![0.0, mu22]],
            covs.to_vec(),
        )
    }
}

/// `spec.n` draws with their generating group labels.
pub fn generate_dataset(spec: &ScenarioSpec, seed: u64) -> Result<(DataMatrix, Vec<usize>)> {
    let params = spec.params()?;
    sample_mixture(&params, spec.n, &mut rng_from_seed(seed))
}

/// Kolmogorov-Smirnov distance of a sample from the uniform law on [0, 1].
pub fn ks_uniform(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    Some(sorted.iter().enumerate().fold(0.0f64, |d, (i, &u)| {
        let u = u.clamp(0.0, 1.0);
        d.max((i as f64 + 1.0) / m - u).max(u - i as f64 / m)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    pub reps: usize,
    pub method: Method,
    /// Bootstrap replicates per dataset.
    pub replicates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    /// Sorted p-values of the configured method.
    pub pvalues: Vec<f64>,
    /// KS distance from uniform; `None` without successful datasets.
    pub ks: Option<f64>,
    /// Sorted chi-square p-values of the same datasets.
    pub chi2_pvalues: Vec<f64>,
    pub chi2_ks: Option<f64>,
    pub failures: usize,
}

/// Fits the scenario model and VVV to one dataset, both started from the
/// true labels (VVV through the null fit's posteriors).
fn dataset_pvalues(cfg: &ExperimentConfig, fit_cfg: &FitConfig, seed: u64) -> Result<(f64, Option<f64>)> {
    let model = cfg.scenario.model;
    let (data, labels) = generate_dataset(&cfg.scenario, derive_seed(seed, 0))?;
    let init = Responsibilities::from_labels(&labels, 2)?;
    let null_fit = fit(&data, model, &init, fit_cfg)?;
    let alt_fit = fit(&data, ModelId::VVV, &null_fit.responsibilities, fit_cfg)?;
    let lr = lr_statistic(null_fit.loglik(), alt_fit.loglik())?;
    let p_chi2 = chi2_pvalue(lr, lr_degrees_of_freedom(model, data.p(), 2));
    let p_boot = match cfg.method {
        Method::Chi2 => None,
        Method::Bootstrap => {
            let (reps, _) = bootstrap_distribution(
                &null_fit.params,
                data.n(),
                cfg.replicates,
                fit_cfg,
                derive_seed(seed, 1),
            )?;
            let exceed = reps.iter().filter(|&&x| x >= lr).count();
            Some((1 + exceed) as f64 / (reps.len() + 1) as f64)
        }
    };
    Ok((p_chi2, p_boot))
}

/// Simulated distribution of LR-test p-values under `H_0` of the scenario
/// model. Datasets whose fits fail are excluded and counted.
pub fn pvalue_sdf_experiment(cfg: &ExperimentConfig, fit_cfg: &FitConfig) -> Result<ExperimentResult> {
    if cfg.scenario.model == ModelId::VVV {
        return Err(Error::NotANullHypothesis(ModelId::VVV));
    }
    cfg.scenario.params()?;
    if cfg.method == Method::Bootstrap && cfg.replicates == 0 {
        return Err(Error::InvalidConfig("bootstrap needs at least one replicate".into()));
    }
    let outcomes: Vec<Result<(f64, Option<f64>)>> = (0..cfg.reps as u64)
        .into_par_iter()
        .map(|r| dataset_pvalues(cfg, fit_cfg, derive_seed(cfg.seed, r)))
        .collect();
    let failures = outcomes.iter().filter(|o| o.is_err()).count();
    let ok: Vec<(f64, Option<f64>)> = outcomes.into_iter().flatten().collect();
    let mut chi2: Vec<f64> = ok.iter().map(|o| o.0).collect();
    chi2.sort_by(f64::total_cmp);
    let pvalues = match cfg.method {
        Method::Chi2 => chi2.clone(),
        Method::Bootstrap => {
            let mut b: Vec<f64> = ok.iter().filter_map(|o| o.1).collect();
            b.sort_by(f64::total_cmp);
            b
        }
    };
    Ok(ExperimentResult {
        config: *cfg,
        ks: ks_uniform(&pvalues),
        pvalues,
        chi2_ks: ks_uniform(&chi2),
        chi2_pvalues: chi2,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FwerResult {
    pub datasets: usize,
    pub failures: usize,
    /// Datasets on which at least one elementary hypothesis was rejected.
    pub rejections: usize,
    pub rate: f64,
    /// Monte-Carlo standard error of a rate equal to alpha.
    pub mc_se: f64,
}

/// Share of EEE-generated datasets on which the closed test rejects any
/// elementary hypothesis. The hierarchy starts EEE from the true labels.
pub fn closed_test_fwer(
    scenario: &ScenarioSpec,
    datasets: usize,
    test: &ClosedTestConfig,
    fit_cfg: &FitConfig,
    seed: u64,
) -> Result<FwerResult> {
    if scenario.model != ModelId::EEE {
        return Err(Error::InvalidConfig("familywise error is measured under EEE".into()));
    }
    scenario.params()?;
    if test.method == Method::Bootstrap {
        bootstrap_threshold(test.alpha, test.replicates)?;
    }
    let outcomes: Vec<Result<bool>> = (0..datasets as u64)
        .into_par_iter()
        .map(|r| {
            let s = derive_seed(seed, r);
            let (data, labels) = generate_dataset(scenario, derive_seed(s, 0))?;
            let init = Responsibilities::from_labels(&labels, 2)?;
            let fits = fit_hierarchy_from(&data, &init, fit_cfg, test.random_starts)?;
            let cfg = ClosedTestConfig {
                seed: derive_seed(s, 1),
                ..*test
            };
            let report = closed_test_from_fits(&data, 2, &fits, fit_cfg, &cfg)?;
            Ok(report.retained != ModelId::EEE)
        })
        .collect();
    let failures = outcomes.iter().filter(|o| o.is_err()).count();
    let rejections = outcomes.iter().filter(|o| matches!(o, Ok(true))).count();
    let used = datasets - failures;
    let rate = if used > 0 {
        rejections as f64 / used as f64
    } else {
        f64::NAN
    };
    Ok(FwerResult {
        datasets,
        failures,
        rejections,
        rate,
        mc_se: (test.alpha * (1.0 - test.alpha) / used.max(1) as f64).sqrt(),
    })
}
