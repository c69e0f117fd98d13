//! The closed LR testing procedure over the general family.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::em::{fit_hierarchy, FitConfig, FitResult, DEFAULT_RANDOM_STARTS};
use crate::error::{Error, Result};
use crate::gaussian::DataMatrix;
use crate::lrt::{attach_bootstrap, bootstrap_distribution, bootstrap_threshold, lr_statistic, LrTestResult};
use crate::model::{implied_hypotheses, total_params, Constraint, ModelId};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Chi2,
    Bootstrap,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "chi2" | "chisq" => Ok(Method::Chi2),
            "bootstrap" | "boot" => Ok(Method::Bootstrap),
            _ => Err(Error::InvalidConfig(format!(
                "unknown method `{s}`; expected chi2 or bootstrap"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedTestConfig {
    pub method: Method,
    pub alpha: f64,
    /// Bootstrap replicates per null model (ignored for chi-square).
    pub replicates: usize,
    /// Seed of the bootstrap streams.
    pub seed: u64,
    /// Random starts per model in the hierarchical fit.
    pub random_starts: usize,
}

impl Default for ClosedTestConfig {
    fn default() -> Self {
        ClosedTestConfig {
            method: Method::Chi2,
            alpha: 0.05,
            replicates: 999,
            seed: 0,
            random_starts: DEFAULT_RANDOM_STARTS,
        }
    }
}

impl ClosedTestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.method == Method::Bootstrap {
            bootstrap_threshold(self.alpha, self.replicates)?;
        }
        Ok(())
    }
}

/// One line of the report; VVV carries no test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedTestRow {
    pub model: ModelId,
    pub eta: usize,
    pub loglik: f64,
    pub test: Option<LrTestResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedTestReport {
    pub method: Method,
    pub alpha: f64,
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub replicates: Option<usize>,
    pub seed: Option<u64>,
    /// All eight models in hierarchy order.
    pub rows: Vec<ClosedTestRow>,
    pub adjusted_chi2: BTreeMap<ModelId, f64>,
    pub adjusted_boot: Option<BTreeMap<ModelId, f64>>,
    pub retained: ModelId,
}

impl ClosedTestReport {
    pub fn row(&self, model: ModelId) -> &ClosedTestRow {
        &self.rows[model.index()]
    }

    /// Adjusted p-values of the method the decision was based on.
    pub fn adjusted(&self) -> &BTreeMap<ModelId, f64> {
        match self.method {
            Method::Chi2 => &self.adjusted_chi2,
            Method::Bootstrap => self.adjusted_boot.as_ref().expect("bootstrap report"),
        }
    }
}

/// `q_M = max{p_N : N implied by M}` for the three elementary hypotheses.
pub fn adjust_pvalues(p: &BTreeMap<ModelId, f64>) -> Result<BTreeMap<ModelId, f64>> {
    if let Some(missing) = ModelId::NULLS.iter().find(|m| !p.contains_key(m)) {
        return Err(Error::IncompleteInput(format!("no p-value for {missing}")));
    }
    if let Some((m, v)) = p.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidData(format!("p-value {v} for {m} outside [0, 1]")));
    }
    ModelId::ELEMENTARY
        .iter()
        .map(|&m| {
            let q = implied_hypotheses(m)?
                .iter()
                .map(|n| p[n])
                .fold(f64::NEG_INFINITY, f64::max);
            Ok((m, q))
        })
        .collect()
}

/// Model whose elementary-hypothesis truth pattern matches `{q_M > alpha}`:
/// equal volume iff EVV is retained, equal shape iff VEV is, equal
/// orientation iff VVE is.
pub fn retained_model(q: &BTreeMap<ModelId, f64>, alpha: f64) -> Result<ModelId> {
    let flag = |m: ModelId| -> Result<Constraint> {
        let v = q
            .get(&m)
            .ok_or_else(|| Error::IncompleteInput(format!("no adjusted p-value for {m}")))?;
        Ok(if *v > alpha {
            Constraint::Equal
        } else {
            Constraint::Variable
        })
    };
    Ok(ModelId::new(
        flag(ModelId::EVV)?,
        flag(ModelId::VEV)?,
        flag(ModelId::VVE)?,
    ))
}

/// Assembles the report from an already fitted hierarchy.
pub fn closed_test_from_fits(
    data: &DataMatrix,
    k: usize,
    fits: &BTreeMap<ModelId, FitResult>,
    fit_cfg: &FitConfig,
    cfg: &ClosedTestConfig,
) -> Result<ClosedTestReport> {
    cfg.validate()?;
    let (n, p) = (data.n(), data.p());
    let get = |m: ModelId| {
        fits.get(&m)
            .ok_or_else(|| Error::IncompleteInput(format!("no fit for {m}")))
    };
    let l_vvv = get(ModelId::VVV)?.loglik();
    let mut rows = Vec::with_capacity(8);
    for model in ModelId::ALL {
        let fit = get(model)?;
        let test = if model == ModelId::VVV {
            None
        } else {
            let lr = lr_statistic(fit.loglik(), l_vvv)?;
            let mut t = LrTestResult::chi2(model, lr, p, k);
            if cfg.method == Method::Bootstrap {
                let seed = derive_seed(cfg.seed, model.index() as u64);
                let (reps, failed) = bootstrap_distribution(&fit.params, n, cfg.replicates, fit_cfg, seed)?;
                t = attach_bootstrap(t, reps, failed, cfg.alpha);
            }
            Some(t)
        };
        rows.push(ClosedTestRow {
            model,
            eta: total_params(model, p, k),
            loglik: fit.loglik(),
            test,
        });
    }
    let collect = |f: &dyn Fn(&LrTestResult) -> Option<f64>| -> Option<BTreeMap<ModelId, f64>> {
        rows.iter()
            .filter_map(|r| r.test.as_ref())
            .map(|t| f(t).map(|v| (t.model, v)))
            .collect()
    };
    let adjusted_chi2 = adjust_pvalues(&collect(&|t| Some(t.p_chi2)).expect("chi-square p-values"))?;
    let adjusted_boot = match cfg.method {
        Method::Chi2 => None,
        Method::Bootstrap => Some(adjust_pvalues(&collect(&|t| t.p_boot).expect("bootstrap p-values"))?),
    };
    let decision = adjusted_boot.as_ref().unwrap_or(&adjusted_chi2);
    let retained = retained_model(decision, cfg.alpha)?;
    let boot = cfg.method == Method::Bootstrap;
    Ok(ClosedTestReport {
        method: cfg.method,
        alpha: cfg.alpha,
        n,
        p,
        k,
        replicates: boot.then_some(cfg.replicates),
        seed: boot.then_some(cfg.seed),
        rows,
        adjusted_chi2,
        adjusted_boot,
        retained,
    })
}

/// Fits the hierarchy, tests every constrained model against the single
/// VVV fit and applies the closed testing rule.
pub fn closed_test(
    data: &DataMatrix,
    k: usize,
    fit_cfg: &FitConfig,
    cfg: &ClosedTestConfig,
) -> Result<ClosedTestReport> {
    cfg.validate()?;
    let fits = fit_hierarchy(data, k, fit_cfg, cfg.random_starts)?;
    closed_test_from_fits(data, k, &fits, fit_cfg, cfg)
}
