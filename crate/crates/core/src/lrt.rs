//! Likelihood-ratio statistics against VVV, chi-square reference p-values
//! and the parametric bootstrap.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{fit, fit_hierarchy, FitConfig, FitResult, DEFAULT_RANDOM_STARTS};
use crate::error::{Error, Result};
use crate::gaussian::{sample_mixture, DataMatrix, MixtureParams, Responsibilities};
use crate::model::{lr_degrees_of_freedom, ModelId};
use crate::rng::{derive_seed, rng_from_seed};

const DOMINANCE_TOL: f64 = 1e-8;
const MAX_ATTEMPTS: u64 = 4;
const MAX_FAILURE_RATE: f64 = 0.05;

/// One null model tested against VVV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrTestResult {
    pub model: ModelId,
    pub lr: f64,
    pub df: usize,
    pub p_chi2: f64,
    pub p_boot: Option<f64>,
    /// Replicate statistics in replicate order (failed replicates omitted).
    pub boot_replicates: Option<Vec<f64>>,
    /// Number of replicates with `LR_r >= LR_obs`.
    pub boot_exceedances: Option<usize>,
    pub boot_failures: usize,
    /// The h-th smallest replicate for the configured level, when the
    /// number of usable replicates admits an exact size-alpha rule.
    pub h_threshold: Option<f64>,
}

impl LrTestResult {
    /// The chi-square-only result for an observed statistic.
    pub fn chi2(model: ModelId, lr: f64, p: usize, k: usize) -> Self {
        let df = lr_degrees_of_freedom(model, p, k);
        LrTestResult {
            model,
            lr,
            df,
            p_chi2: chi2_pvalue(lr, df),
            p_boot: None,
            boot_replicates: None,
            boot_exceedances: None,
            boot_failures: 0,
            h_threshold: None,
        }
    }
}

/// `-2 (l_m - l_vvv)`; differences inside `-1e-8` are clamped to zero.
pub fn lr_statistic(l_m: f64, l_vvv: f64) -> Result<f64> {
    if l_vvv < l_m - DOMINANCE_TOL {
        return Err(Error::DominanceViolation { l_m, l_vvv });
    }
    Ok((-2.0 * (l_m - l_vvv)).max(0.0))
}

/// Upper tail `P(X >= lr)` of a chi-square with `df` degrees of freedom.
///
/// With `df = 0` the reference distribution is a point mass at zero and the
/// p-value is 1.
pub fn chi2_pvalue(lr: f64, df: usize) -> f64 {
    if df == 0 || lr <= 0.0 {
        return 1.0;
    }
    if lr.is_infinite() {
        return 0.0;
    }
    regularized_gamma_q(df as f64 / 2.0, lr / 2.0)
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let series = COEF[1..]
        .iter()
        .enumerate()
        .fold(COEF[0], |acc, (i, c)| acc + c / (x + i as f64 + 1.0));
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + series.ln()
}

/// `Q(a, x) = Γ(a, x) / Γ(a)`.
fn regularized_gamma_q(a: f64, x: f64) -> f64 {
    const EPS: f64 = 1e-16;
    const MAX_ITER: usize = 10_000;
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        (1.0 - sum * log_prefix.exp()).clamp(0.0, 1.0)
    } else {
        // modified Lentz continued fraction
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < EPS {
                break;
            }
        }
        (log_prefix.exp() * h).clamp(0.0, 1.0)
    }
}

fn threshold_index(alpha: f64, replicates: usize) -> Option<usize> {
    if !(alpha > 0.0 && alpha < 1.0) || replicates == 0 {
        return None;
    }
    let exact = (1.0 - alpha) * (replicates as f64 + 1.0);
    let h = exact.round();
    ((exact - h).abs() <= 1e-9 && h >= 1.0 && h <= replicates as f64).then_some(h as usize)
}

/// `h` such that rejecting when the observed statistic exceeds the h-th
/// smallest of `replicates` bootstrap statistics has size exactly
/// `alpha = 1 - h / (replicates + 1)`.
pub fn bootstrap_threshold(alpha: f64, replicates: usize) -> Result<usize> {
    if let Some(h) = threshold_index(alpha, replicates) {
        return Ok(h);
    }
    let suggestion = (0..=1_000_000usize)
        .flat_map(|d| [replicates.saturating_sub(d), replicates + d])
        .find(|&r| threshold_index(alpha, r).is_some())
        .unwrap_or(0);
    Err(Error::InvalidBootstrapSize {
        alpha,
        replicates,
        suggestion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Random starts for the observed-data fits.
    pub observed_starts: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 999,
            alpha: 0.05,
            seed: 0,
            observed_starts: DEFAULT_RANDOM_STARTS,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        bootstrap_threshold(self.alpha, self.replicates).map(|_| ())
    }
}

/// Fits `model` and VVV to the observed data with the multi-start policy.
/// VVV is additionally started from `model`'s posteriors, so it dominates.
pub fn fit_observed_pair(
    data: &DataMatrix,
    model: ModelId,
    k: usize,
    cfg: &FitConfig,
    random_starts: usize,
) -> Result<(FitResult, FitResult)> {
    if model == ModelId::VVV {
        return Err(Error::NotANullHypothesis(model));
    }
    let mut fits = fit_hierarchy(data, k, cfg, random_starts)?;
    let null_fit = fits.remove(&model).expect("all models fitted");
    let free = fits.remove(&ModelId::VVV).expect("all models fitted");
    let alt_fit = match fit(data, ModelId::VVV, &null_fit.responsibilities, cfg) {
        Ok(nested) if nested.loglik() > free.loglik() => nested,
        _ => free,
    };
    lr_statistic(null_fit.loglik(), alt_fit.loglik())?;
    Ok((null_fit, alt_fit))
}

/// LR statistic of one parametric-bootstrap replicate drawn from `null`.
fn replicate_lr(null: &MixtureParams, n: usize, cfg: &FitConfig, seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let (data, labels) = sample_mixture(null, n, &mut rng)?;
    let init = Responsibilities::from_labels(&labels, null.k())?;
    let null_fit = fit(&data, null.model(), &init, cfg)?;
    let alt_fit = fit(&data, ModelId::VVV, &null_fit.responsibilities, cfg)?;
    lr_statistic(null_fit.loglik(), alt_fit.loglik())
}

/// Bootstrap distribution of the LR statistic under the fitted null model.
///
/// Replicate `r` uses a stream derived from `(seed, r)` only; a failed
/// replicate is retried up to three times on fresh sub-streams. Returns the
/// successful statistics in replicate order and the number of failures.
pub fn bootstrap_distribution(
    null: &MixtureParams,
    n: usize,
    replicates: usize,
    cfg: &FitConfig,
    seed: u64,
) -> Result<(Vec<f64>, usize)> {
    if null.model() == ModelId::VVV {
        return Err(Error::NotANullHypothesis(null.model()));
    }
    let outcomes: Vec<Option<f64>> = (0..replicates as u64)
        .into_par_iter()
        .map(|r| {
            let base = derive_seed(seed, r);
            (0..MAX_ATTEMPTS).find_map(|attempt| replicate_lr(null, n, cfg, derive_seed(base, attempt)).ok())
        })
        .collect();
    let failed = outcomes.iter().filter(|o| o.is_none()).count();
    if failed as f64 > MAX_FAILURE_RATE * replicates as f64 {
        return Err(Error::BootstrapUnstable {
            failed,
            total: replicates,
        });
    }
    Ok((outcomes.into_iter().flatten().collect(), failed))
}

/// Adds bootstrap p-value, exceedance count and size-alpha threshold to a
/// chi-square result.
pub fn attach_bootstrap(mut result: LrTestResult, replicates: Vec<f64>, failed: usize, alpha: f64) -> LrTestResult {
    let exceed = replicates.iter().filter(|&&x| x >= result.lr).count();
    let used = replicates.len();
    result.p_boot = Some((1 + exceed) as f64 / (used + 1) as f64);
    result.boot_exceedances = Some(exceed);
    result.boot_failures = failed;
    result.h_threshold = threshold_index(alpha, used).map(|h| {
        let mut sorted = replicates.clone();
        sorted.sort_by(f64::total_cmp);
        sorted[h - 1]
    });
    result.boot_replicates = Some(replicates);
    result
}

/// Parametric-bootstrap LR test of `model` against VVV.
pub fn bootstrap_test(
    data: &DataMatrix,
    model: ModelId,
    k: usize,
    cfg: &FitConfig,
    boot: &BootstrapConfig,
) -> Result<LrTestResult> {
    boot.validate()?;
    let (null_fit, alt_fit) = fit_observed_pair(data, model, k, cfg, boot.observed_starts)?;
    let lr = lr_statistic(null_fit.loglik(), alt_fit.loglik())?;
    let base = LrTestResult::chi2(model, lr, data.p(), k);
    let (reps, failed) = bootstrap_distribution(&null_fit.params, data.n(), boot.replicates, cfg, boot.seed)?;
    Ok(attach_bootstrap(base, reps, failed, boot.alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_examples() {
        assert_eq!(lr_statistic(-10.0, -10.0).unwrap(), 0.0);
        assert!((lr_statistic(-298.63 / 2.0, -259.25 / 2.0).unwrap() - 39.38).abs() < 1e-9);
        assert_eq!(lr_statistic(-10.0, -10.0 - 5e-9).unwrap(), 0.0);
        assert!(matches!(
            lr_statistic(-10.0, -11.0),
            Err(Error::DominanceViolation { .. })
        ));
    }

    #[test]
    fn chi2_boundaries() {
        assert_eq!(chi2_pvalue(0.0, 3), 1.0);
        assert_eq!(chi2_pvalue(5.0, 0), 1.0);
        // df = 2 is exponential with mean 2
        for x in [0.1, 1.0, 7.5, 40.0, 300.0] {
            assert!((chi2_pvalue(x, 2) - (-x / 2.0).exp()).abs() < 1e-14);
        }
    }

    #[test]
    fn ln_gamma_integers() {
        let mut fact = 1.0f64;
        for n in 1..30 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12 * fact.ln().max(1.0));
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(bootstrap_threshold(0.05, 19).unwrap(), 19);
        assert_eq!(bootstrap_threshold(0.05, 99).unwrap(), 95);
        assert_eq!(bootstrap_threshold(0.05, 999).unwrap(), 950);
        match bootstrap_threshold(0.05, 100) {
            Err(Error::InvalidBootstrapSize { suggestion, .. }) => assert_eq!(suggestion, 99),
            other => panic!("{other:?}"),
        }
        assert!(bootstrap_threshold(0.05, 10).is_err());
    }

    #[test]
    fn pvalue_agrees_with_threshold_rule() {
        let reps: Vec<f64> = (0..99).map(|i| ((i * 37) % 99) as f64 * 0.1).collect();
        let h = bootstrap_threshold(0.05, 99).unwrap();
        for lr in [0.0, 5.0, 9.35, 9.4, 9.45, 9.5, 9.85, 20.0] {
            let base = LrTestResult::chi2(ModelId::EEE, lr, 2, 2);
            let r = attach_bootstrap(base, reps.clone(), 0, 0.05);
            let mut sorted = reps.clone();
            sorted.sort_by(f64::total_cmp);
            assert_eq!(r.h_threshold, Some(sorted[h - 1]));
            assert_eq!(r.p_boot.unwrap() <= 0.05, lr > sorted[h - 1], "lr = {lr}");
        }
    }
}
