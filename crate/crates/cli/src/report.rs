//! JSON documents and text tables emitted by the commands.

use std::collections::BTreeMap;
use std::fmt::Write;

use gpcm::closed::{ClosedTestReport, Method};
use gpcm::criteria::{Criterion, IcTable};
use gpcm::em::FitResult;
use gpcm::model::{total_params, ModelId};
use gpcm::simulation::ExperimentResult;
use serde::Serialize;

/// Bumped whenever a field is renamed, removed or changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct FitSettings {
    pub seed: u64,
    pub starts: usize,
    pub epsilon: f64,
    pub max_iter: usize,
    pub init: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComponentView {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub volume: f64,
    pub shape: Vec<f64>,
    /// Eigenvector matrix, one inner vector per row.
    pub orientation: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub model: ModelId,
    pub k: usize,
    pub n: usize,
    pub p: usize,
    pub eta: usize,
    pub loglik: f64,
    pub two_loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub components: Vec<ComponentView>,
    pub classification: Vec<usize>,
    pub misallocated: Option<usize>,
    pub settings: FitSettings,
}

impl FitReport {
    pub fn new(fit: &FitResult, misallocated: Option<usize>, settings: FitSettings) -> Self {
        let params = &fit.params;
        let components = (0..params.k())
            .map(|j| {
                let c = &params.covariances()[j];
                let g = c.orientation();
                ComponentView {
                    weight: params.weights()[j],
                    mean: params.means()[j].iter().copied().collect(),
                    volume: c.lambda(),
                    shape: c.shape().iter().copied().collect(),
                    orientation: (0..g.nrows()).map(|r| g.row(r).iter().copied().collect()).collect(),
                }
            })
            .collect();
        FitReport {
            schema_version: SCHEMA_VERSION,
            command: "fit",
            model: params.model(),
            k: params.k(),
            n: fit.responsibilities.n(),
            p: params.p(),
            eta: total_params(params.model(), params.p(), params.k()),
            loglik: fit.loglik(),
            two_loglik: 2.0 * fit.loglik(),
            iterations: fit.iterations,
            converged: fit.converged,
            components,
            classification: fit.responsibilities.map_labels(),
            misallocated,
            settings,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosedRowView {
    pub model: ModelId,
    pub eta: usize,
    pub two_loglik: f64,
    pub lr: Option<f64>,
    pub df: Option<usize>,
    pub p_chi2: Option<f64>,
    pub q_chi2: Option<f64>,
    pub p_boot: Option<f64>,
    pub q_boot: Option<f64>,
    pub boot_exceedances: Option<usize>,
    pub boot_used: Option<usize>,
    pub boot_failures: Option<usize>,
    pub h_threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosedTestView {
    pub schema_version: u32,
    pub command: &'static str,
    pub method: Method,
    pub alpha: f64,
    pub n: usize,
    pub p: usize,
    pub k: usize,
    pub replicates: Option<usize>,
    pub bootstrap_seed: Option<u64>,
    pub rows: Vec<ClosedRowView>,
    pub retained: ModelId,
    pub settings: FitSettings,
}

impl ClosedTestView {
    pub fn new(report: &ClosedTestReport, settings: FitSettings) -> Self {
        let rows = report
            .rows
            .iter()
            .map(|r| {
                let t = r.test.as_ref();
                ClosedRowView {
                    model: r.model,
                    eta: r.eta,
                    two_loglik: 2.0 * r.loglik,
                    lr: t.map(|t| t.lr),
                    df: t.map(|t| t.df),
                    p_chi2: t.map(|t| t.p_chi2),
                    q_chi2: report.adjusted_chi2.get(&r.model).copied(),
                    p_boot: t.and_then(|t| t.p_boot),
                    q_boot: report.adjusted_boot.as_ref().and_then(|q| q.get(&r.model).copied()),
                    boot_exceedances: t.and_then(|t| t.boot_exceedances),
                    boot_used: t.and_then(|t| t.boot_replicates.as_ref().map(Vec::len)),
                    boot_failures: t.filter(|t| t.p_boot.is_some()).map(|t| t.boot_failures),
                    h_threshold: t.and_then(|t| t.h_threshold),
                }
            })
            .collect();
        ClosedTestView {
            schema_version: SCHEMA_VERSION,
            command: "closed-test",
            method: report.method,
            alpha: report.alpha,
            n: report.n,
            p: report.p,
            k: report.k,
            replicates: report.replicates,
            bootstrap_seed: report.seed,
            rows,
            retained: report.retained,
            settings,
        }
    }

    pub fn table(&self) -> String {
        let boot = self.method == Method::Bootstrap;
        let mut out = String::new();
        let _ = write!(
            out,
            "{:<4} {:>4} {:>10} {:>3}   {:>9} {:>9}",
            "M", "eta", "LR", "nu", "chi2 p", "chi2 q"
        );
        if boot {
            let _ = write!(out, "   {:>7} {:>7}", "boot p", "boot q");
        }
        out.push('\n');
        let num =
            |v: Option<f64>, prec: usize, width: usize| v.map_or(" ".repeat(width), |x| format!("{x:>width$.prec$}"));
        for r in &self.rows {
            let _ = write!(
                out,
                "{:<4} {:>4} {} {:>3}   {} {}",
                r.model.to_string(),
                r.eta,
                num(r.lr, 5, 10),
                r.df.map_or(String::new(), |d| d.to_string()),
                num(r.p_chi2, 5, 9),
                num(r.q_chi2, 5, 9)
            );
            if boot {
                let _ = write!(out, "   {} {}", num(r.p_boot, 3, 7), num(r.q_boot, 3, 7));
            }
            out.truncate(out.trim_end().len());
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "retained: {} (alpha = {}, method = {})",
            self.retained,
            self.alpha,
            if boot { "bootstrap" } else { "chi2" }
        );
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IcRowView {
    pub model: ModelId,
    pub eta: usize,
    pub two_loglik: f64,
    /// Criterion values; `null` where undefined.
    pub values: BTreeMap<Criterion, Option<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct IcView {
    pub schema_version: u32,
    pub command: &'static str,
    pub n: usize,
    pub k: usize,
    pub rows: Vec<IcRowView>,
    pub best: BTreeMap<Criterion, ModelId>,
    pub settings: FitSettings,
}

impl IcView {
    pub fn new(table: &IcTable, k: usize, settings: FitSettings) -> Self {
        let rows = table
            .rows
            .iter()
            .map(|r| IcRowView {
                model: r.model,
                eta: r.eta,
                two_loglik: 2.0 * r.loglik,
                values: Criterion::ALL.iter().map(|&c| (c, r.get(c))).collect(),
            })
            .collect();
        IcView {
            schema_version: SCHEMA_VERSION,
            command: "ic",
            n: table.n,
            k,
            rows,
            best: table.best.clone(),
            settings,
        }
    }

    /// Table with the best model of each criterion starred.
    pub fn table(&self) -> String {
        let mut out = format!("{:<4} {:>4} {:>9}", "M", "eta", "2l");
        for c in Criterion::ALL {
            let _ = write!(out, " {:>10}", c.name());
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<4} {:>4} {:>9.2}", r.model.to_string(), r.eta, r.two_loglik);
            for c in Criterion::ALL {
                let star = if self.best.get(&c) == Some(&r.model) { "*" } else { " " };
                match r.values[&c] {
                    Some(v) => {
                        let _ = write!(out, " {v:>9.2}{star}");
                    }
                    None => {
                        let _ = write!(out, " {:>9}{star}", "NA");
                    }
                }
            }
            out.truncate(out.trim_end().len());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationSummary {
    pub schema_version: u32,
    pub command: &'static str,
    pub model: ModelId,
    pub n: usize,
    pub overlap: f64,
    pub reps: usize,
    pub method: Method,
    pub replicates: Option<usize>,
    pub seed: u64,
    pub epsilon: f64,
    pub max_iter: usize,
    pub datasets_used: usize,
    pub failures: usize,
    pub ks: Option<f64>,
    pub chi2_ks: Option<f64>,
}

impl SimulationSummary {
    pub fn new(result: &ExperimentResult, epsilon: f64, max_iter: usize) -> Self {
        let c = &result.config;
        SimulationSummary {
            schema_version: SCHEMA_VERSION,
            command: "simulate",
            model: c.scenario.model,
            n: c.scenario.n,
            overlap: c.scenario.overlap,
            reps: c.reps,
            method: c.method,
            replicates: (c.method == Method::Bootstrap).then_some(c.replicates),
            seed: c.seed,
            epsilon,
            max_iter,
            datasets_used: result.pvalues.len(),
            failures: result.failures,
            ks: result.ks,
            chi2_ks: result.chi2_ks,
        }
    }
}

/// Sorted p-values, one row per dataset; the chi-square column is added
/// for bootstrap runs.
pub fn pvalues_csv(result: &ExperimentResult) -> String {
    let boot = result.config.method == Method::Bootstrap;
    let mut out = String::from(if boot { "rank,p_boot,p_chi2\n" } else { "rank,p_chi2\n" });
    for (i, p) in result.pvalues.iter().enumerate() {
        if boot {
            let _ = writeln!(out, "{},{},{}", i + 1, p, result.chi2_pvalues[i]);
        } else {
            let _ = writeln!(out, "{},{}", i + 1, p);
        }
    }
    out
}
