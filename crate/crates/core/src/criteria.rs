//! Likelihood-based information criteria; larger is better throughout.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::em::FitResult;
use crate::model::{total_params, ModelId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Criterion {
    #[serde(rename = "AIC")]
    Aic,
    #[serde(rename = "AIC3")]
    Aic3,
    #[serde(rename = "AICc")]
    Aicc,
    #[serde(rename = "AICu")]
    Aicu,
    #[serde(rename = "AWE")]
    Awe,
    #[serde(rename = "BIC")]
    Bic,
    #[serde(rename = "CAIC")]
    Caic,
    #[serde(rename = "ICL")]
    Icl,
}

impl Criterion {
    pub const ALL: [Criterion; 8] = [
        Criterion::Aic,
        Criterion::Aic3,
        Criterion::Aicc,
        Criterion::Aicu,
        Criterion::Awe,
        Criterion::Bic,
        Criterion::Caic,
        Criterion::Icl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Aic => "AIC",
            Criterion::Aic3 => "AIC3",
            Criterion::Aicc => "AICc",
            Criterion::Aicu => "AICu",
            Criterion::Awe => "AWE",
            Criterion::Bic => "BIC",
            Criterion::Caic => "CAIC",
            Criterion::Icl => "ICL",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

/// All criteria for one fitted model. AICc and AICu are `None` when
/// `n <= eta + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcRow {
    pub model: ModelId,
    pub eta: usize,
    /// Maximized log-likelihood `l` (not `2l`).
    pub loglik: f64,
    pub aic: f64,
    pub aic3: f64,
    pub aicc: Option<f64>,
    pub aicu: Option<f64>,
    pub awe: f64,
    pub bic: f64,
    pub caic: f64,
    pub icl: f64,
}

impl IcRow {
    /// Computes every criterion from the log-likelihood, the number of free
    /// parameters, the sample size and `Σ_i log ẑ_{i,MAP(i)}`.
    pub fn new(model: ModelId, loglik: f64, eta: usize, n: usize, map_log_posterior: f64) -> Self {
        let two_l = 2.0 * loglik;
        let (e, nf) = (eta as f64, n as f64);
        let log_n = nf.ln();
        let aic = two_l - 2.0 * e;
        let bic = two_l - e * log_n;
        let denom = nf - e - 1.0;
        let aicc = (denom > 0.0).then(|| aic - 2.0 * e * (e + 1.0) / denom);
        let aicu = aicc.map(|c| c - nf * (nf / denom).ln());
        IcRow {
            model,
            eta,
            loglik,
            aic,
            aic3: two_l - 3.0 * e,
            aicc,
            aicu,
            awe: two_l - 2.0 * e * (1.5 + log_n),
            bic,
            caic: two_l - e * (1.0 + log_n),
            icl: bic + map_log_posterior,
        }
    }

    pub fn get(&self, c: Criterion) -> Option<f64> {
        match c {
            Criterion::Aic => Some(self.aic),
            Criterion::Aic3 => Some(self.aic3),
            Criterion::Aicc => self.aicc,
            Criterion::Aicu => self.aicu,
            Criterion::Awe => Some(self.awe),
            Criterion::Bic => Some(self.bic),
            Criterion::Caic => Some(self.caic),
            Criterion::Icl => Some(self.icl),
        }
    }
}

/// Criteria of one fit. The ICL entropy term sums `log ẑ` at each row's
/// largest posterior (ties to the lowest component).
pub fn information_criteria(fit: &FitResult) -> IcRow {
    let z = fit.responsibilities.matrix();
    let map_log: f64 = fit
        .responsibilities
        .map_labels()
        .iter()
        .enumerate()
        .map(|(i, &j)| z[(i, j)])
        .filter(|&v| v < 1.0)
        .map(f64::ln)
        .sum();
    let params = &fit.params;
    let eta = total_params(params.model(), params.p(), params.k());
    IcRow::new(params.model(), fit.loglik(), eta, z.nrows(), map_log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcTable {
    pub n: usize,
    pub rows: Vec<IcRow>,
    /// Highest-valued model per criterion; ties go to the earlier row.
    pub best: BTreeMap<Criterion, ModelId>,
}

impl IcTable {
    pub fn from_rows(n: usize, rows: Vec<IcRow>) -> Self {
        let mut best = BTreeMap::new();
        for c in Criterion::ALL {
            let mut top: Option<(f64, ModelId)> = None;
            for r in &rows {
                if let Some(v) = r.get(c) {
                    if top.is_none_or(|(t, _)| v > t) {
                        top = Some((v, r.model));
                    }
                }
            }
            if let Some((_, m)) = top {
                best.insert(c, m);
            }
        }
        IcTable { n, rows, best }
    }

    pub fn from_fits<'a>(fits: impl IntoIterator<Item = &'a FitResult>) -> Self {
        let fits: Vec<&FitResult> = fits.into_iter().collect();
        let n = fits.first().map_or(0, |f| f.responsibilities.n());
        Self::from_rows(n, fits.into_iter().map(information_criteria).collect())
    }

    pub fn row(&self, model: ModelId) -> Option<&IcRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_bookkeeping() {
        let r = IcRow::new(ModelId::EEE, 0.0, 0, 10, 0.0);
        assert_eq!((r.aic, r.aic3, r.bic), (0.0, 0.0, 0.0));
    }

    #[test]
    fn undefined_small_sample() {
        let r = IcRow::new(ModelId::VVV, -10.0, 9, 10, 0.0);
        assert!(r.aicc.is_none() && r.aicu.is_none());
        let r = IcRow::new(ModelId::VVV, -10.0, 8, 10, 0.0);
        assert!(r.aicc.is_some());
    }
}
