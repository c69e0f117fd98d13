//! Covariance M-steps for the eight models.
//!
//! Every solver minimizes
//!
//! ```text
//! F(Σ_1, …, Σ_k) = Σ_j [ tr(W_j Σ_j⁻¹) + n_j log|Σ_j| ]
//! ```
//!
//! over the covariances allowed by the model, where `W_j` is the weighted
//! scatter of component `j` about its mean and `n_j` its effective size.
//! EEE, EEV, EVV and VVV have closed forms. VEE and VEV alternate closed-form
//! conditional updates. EVE and VVE share one orientation across components
//! and must keep the eigenvalues of every component in the same decreasing
//! order; they alternate an order-constrained convex program for the axis
//! variances with a descent step for the common orientation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::em::SufficientStats;
use crate::error::{Error, Result};
use crate::gaussian::{decompose_covariance, CovarianceFactors, SPD_RELATIVE_FLOOR};
use crate::linalg::{diagonal_in_basis, polar_factor, sorted_eigen};
use crate::model::ModelId;

/// Control of the inner loops used by iterative M-steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MStepConfig {
    /// Stop once the relative decrease of `F` falls below this.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    /// Iteration cap for a single common-orientation update.
    pub orientation_max_iter: usize,
}

impl Default for MStepConfig {
    fn default() -> Self {
        MStepConfig {
            inner_tol: 1e-8,
            inner_max_iter: 100,
            orientation_max_iter: 200,
        }
    }
}

impl MStepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_tol > 0.0) || self.inner_max_iter == 0 || self.orientation_max_iter == 0 {
            return Err(Error::InvalidConfig("M-step controls must be positive".into()));
        }
        Ok(())
    }
}

/// The M-step objective `F` at the given covariances.
pub fn mstep_objective(stats: &SufficientStats, covs: &[CovarianceFactors]) -> f64 {
    stats
        .scatters
        .iter()
        .zip(&stats.counts)
        .zip(covs)
        .map(|((w, &n_j), c)| {
            let b = diagonal_in_basis(w, c.orientation());
            let xi = c.axis_variances();
            b.iter().zip(xi.iter()).map(|(b, x)| b / x).sum::<f64>() + n_j * c.log_det()
        })
        .sum()
}

/// Covariance update for `model`. `prev` (the previous EM iterate) warm-starts
/// the iterative solvers; the result never has a larger objective than `prev`.
pub fn mstep(
    model: ModelId,
    stats: &SufficientStats,
    prev: Option<&[CovarianceFactors]>,
    cfg: &MStepConfig,
) -> Result<Vec<CovarianceFactors>> {
    let prev = prev.filter(|p| p.len() == stats.k() && p[0].dim() == stats.p());
    match model {
        m if m == ModelId::EEE => mstep_eee(stats),
        m if m == ModelId::VEE => mstep_vee(stats, prev, cfg),
        m if m == ModelId::EVE => mstep_eve(stats, prev, cfg),
        m if m == ModelId::EEV => mstep_eev(stats),
        m if m == ModelId::VVE => mstep_vve(stats, prev, cfg),
        m if m == ModelId::VEV => mstep_vev(stats, prev, cfg),
        m if m == ModelId::EVV => mstep_evv(stats),
        _ => mstep_vvv(stats),
    }
}

fn degenerate(what: &str, component: Option<usize>) -> Error {
    match component {
        Some(j) => Error::DegenerateScatter(format!("{what} of component {j} is singular")),
        None => Error::DegenerateScatter(format!("{what} is singular")),
    }
}

fn spd_factors(s: &DMatrix<f64>, what: &str, component: Option<usize>) -> Result<CovarianceFactors> {
    decompose_covariance(s).map_err(|_| degenerate(what, component))
}

fn geometric_mean(v: &DVector<f64>) -> f64 {
    (v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64).exp()
}

fn check_spectrum(values: &DVector<f64>, what: &str, component: Option<usize>) -> Result<()> {
    let max = values[0];
    if !(max > 0.0) || values[values.len() - 1] <= SPD_RELATIVE_FLOOR * max {
        return Err(degenerate(what, component));
    }
    Ok(())
}

fn mstep_vvv(stats: &SufficientStats) -> Result<Vec<CovarianceFactors>> {
    stats
        .scatters
        .iter()
        .zip(&stats.counts)
        .enumerate()
        .map(|(j, (w, &n_j))| spd_factors(&(w / n_j), "scatter", Some(j)))
        .collect()
}

fn mstep_eee(stats: &SufficientStats) -> Result<Vec<CovarianceFactors>> {
    let pooled = stats.pooled_scatter() / stats.n();
    let f = spd_factors(&pooled, "pooled scatter", None)?;
    Ok(vec![f; stats.k()])
}

fn mstep_eev(stats: &SufficientStats) -> Result<Vec<CovarianceFactors>> {
    let eig: Vec<_> = stats.scatters.iter().map(sorted_eigen).collect();
    let mut total = DVector::zeros(stats.p());
    for (omega, _) in &eig {
        total += omega;
    }
    check_spectrum(&total, "summed scatter spectrum", None)?;
    let g = geometric_mean(&total);
    let lambda = g / stats.n();
    let shape = total / g;
    Ok(eig
        .into_iter()
        .map(|(_, l)| CovarianceFactors::from_parts(lambda, shape.clone(), l))
        .collect())
}

fn mstep_evv(stats: &SufficientStats) -> Result<Vec<CovarianceFactors>> {
    let mut parts = Vec::with_capacity(stats.k());
    let mut volume_sum = 0.0;
    for (j, w) in stats.scatters.iter().enumerate() {
        let (omega, l) = sorted_eigen(w);
        check_spectrum(&omega, "scatter", Some(j))?;
        let g = geometric_mean(&omega);
        volume_sum += g;
        parts.push((omega / g, l));
    }
    let lambda = volume_sum / stats.n();
    Ok(parts
        .into_iter()
        .map(|(shape, l)| CovarianceFactors::from_parts(lambda, shape, l))
        .collect())
}

fn relative_decrease(before: f64, after: f64) -> f64 {
    (before - after) / before.abs().max(1.0)
}

/// VEE: `Σ_j = λ_j C` with `|C| = 1`.
fn mstep_vee(
    stats: &SufficientStats,
    prev: Option<&[CovarianceFactors]>,
    cfg: &MStepConfig,
) -> Result<Vec<CovarianceFactors>> {
    let p = stats.p() as f64;
    let mut lambdas: Vec<f64> = match prev {
        Some(prev) => prev.iter().map(|c| c.lambda()).collect(),
        None => stats
            .scatters
            .iter()
            .zip(&stats.counts)
            .map(|(w, n_j)| (w.trace() / (p * n_j)).max(f64::MIN_POSITIVE))
            .collect(),
    };
    let mut best: Option<(f64, CovarianceFactors, Vec<f64>)> = None;
    for _ in 0..cfg.inner_max_iter {
        let mut m = DMatrix::zeros(stats.p(), stats.p());
        for (w, l) in stats.scatters.iter().zip(&lambdas) {
            m += w / *l;
        }
        let common = spd_factors(&m, "volume-weighted scatter", None)?;
        let mut f = 0.0;
        for (j, (w, &n_j)) in stats.scatters.iter().zip(&stats.counts).enumerate() {
            let b = diagonal_in_basis(w, common.orientation());
            let tr: f64 = b.iter().zip(common.shape().iter()).map(|(b, s)| b / s).sum();
            lambdas[j] = tr / (p * n_j);
            if !(lambdas[j] > 0.0) {
                return Err(degenerate("scatter", Some(j)));
            }
            f += p * n_j * (1.0 + lambdas[j].ln());
        }
        let done = best
            .as_ref()
            .is_some_and(|(f_prev, _, _)| relative_decrease(*f_prev, f) < cfg.inner_tol);
        if best.as_ref().is_none_or(|(f_prev, _, _)| f <= *f_prev) {
            best = Some((f, common, lambdas.clone()));
        }
        if done {
            break;
        }
    }
    let (_, common, lambdas) = best.expect("at least one iteration");
    let shape = common.shape().clone();
    let gamma = common.orientation().clone();
    Ok(lambdas
        .into_iter()
        .map(|l| CovarianceFactors::from_parts(l, shape.clone(), gamma.clone()))
        .collect())
}

/// VEV: `Σ_j = λ_j Γ_j Δ Γ_j'`.
fn mstep_vev(
    stats: &SufficientStats,
    prev: Option<&[CovarianceFactors]>,
    cfg: &MStepConfig,
) -> Result<Vec<CovarianceFactors>> {
    let p = stats.p() as f64;
    let eig: Vec<_> = stats.scatters.iter().map(sorted_eigen).collect();
    let mut lambdas: Vec<f64> = match prev {
        Some(prev) => prev.iter().map(|c| c.lambda()).collect(),
        None => eig
            .iter()
            .zip(&stats.counts)
            .map(|((omega, _), n_j)| (omega.sum() / (p * n_j)).max(f64::MIN_POSITIVE))
            .collect(),
    };
    let mut best: Option<(f64, DVector<f64>, Vec<f64>)> = None;
    for _ in 0..cfg.inner_max_iter {
        let mut a = DVector::zeros(stats.p());
        for ((omega, _), l) in eig.iter().zip(&lambdas) {
            a += omega / *l;
        }
        check_spectrum(&a, "volume-weighted scatter spectrum", None)?;
        let shape = &a / geometric_mean(&a);
        let mut f = 0.0;
        for (j, ((omega, _), &n_j)) in eig.iter().zip(&stats.counts).enumerate() {
            let tr: f64 = omega.iter().zip(shape.iter()).map(|(o, s)| o / s).sum();
            lambdas[j] = tr / (p * n_j);
            if !(lambdas[j] > 0.0) {
                return Err(degenerate("scatter", Some(j)));
            }
            f += p * n_j * (1.0 + lambdas[j].ln());
        }
        let done = best
            .as_ref()
            .is_some_and(|(f_prev, _, _)| relative_decrease(*f_prev, f) < cfg.inner_tol);
        if best.as_ref().is_none_or(|(f_prev, _, _)| f <= *f_prev) {
            best = Some((f, shape, lambdas.clone()));
        }
        if done {
            break;
        }
    }
    let (_, shape, lambdas) = best.expect("at least one iteration");
    Ok(eig
        .into_iter()
        .zip(lambdas)
        .map(|((_, l), lambda)| CovarianceFactors::from_parts(lambda, shape.clone(), l))
        .collect())
}

// ---------------------------------------------------------------------------
// Order-constrained axis variances

fn validate_projection(b: &[f64], n_j: f64) -> Result<()> {
    if b.is_empty() {
        return Err(Error::InvalidProjection("empty input".into()));
    }
    if let Some(bad) = b.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidProjection(format!("entry {bad} is not positive")));
    }
    if !(n_j > 0.0 && n_j.is_finite()) {
        return Err(Error::InvalidProjection(format!("weight {n_j} is not positive")));
    }
    Ok(())
}

/// Block values for a partition of `0..p` into contiguous blocks.
fn block_values(blocks: &[(usize, usize, f64)], p: usize, n_j: f64, sum_zero: bool) -> Vec<f64> {
    // (start, end exclusive, mean of b)
    let shift = if sum_zero {
        blocks.iter().map(|&(s, e, m)| (e - s) as f64 * m.ln()).sum::<f64>() / p as f64
    } else {
        n_j.ln()
    };
    let mut zeta = vec![0.0; p];
    for &(s, e, m) in blocks {
        let v = m.ln() - shift;
        zeta[s..e].iter_mut().for_each(|z| *z = v);
    }
    zeta
}

/// Pool-adjacent-violators solution of the order-constrained program.
///
/// Minimizes `Σ_l [b_l exp(-ζ_l) + n_j ζ_l]` subject to `ζ_1 ≥ … ≥ ζ_p`
/// (and `Σ ζ_l = 0` when `sum_zero`). Adjacent blocks whose means of `b`
/// violate the order, or tie, are merged; each block takes the log of its mean.
pub fn pav_ordered_solve(b: &[f64], n_j: f64, sum_zero: bool) -> Result<Vec<f64>> {
    validate_projection(b, n_j)?;
    // (start, end, sum)
    let mut stack: Vec<(usize, usize, f64)> = Vec::with_capacity(b.len());
    for (l, &v) in b.iter().enumerate() {
        stack.push((l, l + 1, v));
        while stack.len() >= 2 {
            let (s1, e1, t1) = stack[stack.len() - 2];
            let (s2, e2, t2) = stack[stack.len() - 1];
            if t1 / (e1 - s1) as f64 <= t2 / (e2 - s2) as f64 {
                stack.truncate(stack.len() - 2);
                stack.push((s1, e2, t1 + t2));
            } else {
                break;
            }
        }
    }
    let blocks: Vec<_> = stack.into_iter().map(|(s, e, t)| (s, e, t / (e - s) as f64)).collect();
    Ok(block_values(&blocks, b.len(), n_j, sum_zero))
}

/// Active-set solution of the order-constrained program of [`pav_ordered_solve`].
///
/// Starts with every ordering constraint in the working set and releases the
/// one with the most negative multiplier until all multipliers are
/// non-negative, stepping back to the first blocking constraint whenever a
/// full step would break the order.
pub fn ordered_eigenvalue_solve(b: &[f64], n_j: f64, sum_zero: bool) -> Result<Vec<f64>> {
    validate_projection(b, n_j)?;
    let p = b.len();
    if p == 1 {
        return Ok(vec![if sum_zero { 0.0 } else { (b[0] / n_j).ln() }]);
    }
    let mut working = vec![true; p - 1];
    let mut zeta = subproblem(b, &working, n_j, sum_zero);
    let mut guard = 0;
    loop {
        guard += 1;
        let h = kkt_gradient(b, &zeta, n_j, sum_zero);
        let scale: f64 = h.iter().map(|v| v.abs()).sum::<f64>() + n_j * p as f64;
        let tol = 1e-13 * scale;
        let mut release = None;
        let mut cumulative = 0.0;
        let mut most_negative = -tol;
        for i in 0..p - 1 {
            cumulative += h[i];
            if !working[i] {
                cumulative = 0.0;
                continue;
            }
            if cumulative < most_negative {
                most_negative = cumulative;
                release = Some(i);
            }
        }
        let Some(i) = release else { break };
        if guard > 4 * p * p {
            break;
        }
        working[i] = false;
        // move towards the new subproblem optimum, stopping at blocking constraints
        loop {
            let target = subproblem(b, &working, n_j, sum_zero);
            let mut alpha = 1.0;
            let mut blocking = None;
            for c in 0..p - 1 {
                if working[c] {
                    continue;
                }
                let slope = (target[c] - zeta[c]) - (target[c + 1] - zeta[c + 1]);
                if slope < 0.0 {
                    let gap = (zeta[c] - zeta[c + 1]).max(0.0);
                    let step = gap / -slope;
                    if step < alpha {
                        alpha = step;
                        blocking = Some(c);
                    }
                }
            }
            match blocking {
                None => {
                    zeta = target;
                    break;
                }
                Some(c) => {
                    for l in 0..p {
                        zeta[l] += alpha * (target[l] - zeta[l]);
                    }
                    working[c] = true;
                }
            }
        }
    }
    debug_assert!(
        kkt_violation(b, n_j, sum_zero, &zeta) < 1e-9,
        "active-set output fails KKT certification: b = {b:?}, n_j = {n_j}, sum_zero = {sum_zero}"
    );
    Ok(zeta)
}

fn subproblem(b: &[f64], working: &[bool], n_j: f64, sum_zero: bool) -> Vec<f64> {
    let mut blocks = Vec::new();
    let mut start = 0;
    let mut sum = 0.0;
    for l in 0..b.len() {
        sum += b[l];
        if l == b.len() - 1 || !working[l] {
            blocks.push((start, l + 1, sum / (l + 1 - start) as f64));
            start = l + 1;
            sum = 0.0;
        }
    }
    block_values(&blocks, b.len(), n_j, sum_zero)
}

/// Gradient of the Lagrangian without the ordering terms.
fn kkt_gradient(b: &[f64], zeta: &[f64], n_j: f64, sum_zero: bool) -> Vec<f64> {
    let terms: Vec<f64> = b.iter().zip(zeta).map(|(b, z)| b * (-z).exp()).collect();
    let offset = if sum_zero {
        terms.iter().sum::<f64>() / b.len() as f64
    } else {
        n_j
    };
    terms.iter().map(|t| offset - t).collect()
}

/// Scale-free KKT violation of a candidate solution: primal feasibility,
/// stationarity, dual feasibility and complementary slackness of the
/// ordering multipliers.
pub fn kkt_violation(b: &[f64], n_j: f64, sum_zero: bool, zeta: &[f64]) -> f64 {
    let p = b.len();
    let h = kkt_gradient(b, zeta, n_j, sum_zero);
    let scale: f64 = h.iter().map(|v| v.abs()).sum::<f64>() + n_j * p as f64;
    let mut worst: f64 = 0.0;
    let mut nu = 0.0;
    for l in 0..p {
        nu += h[l];
        if l + 1 < p {
            let gap = zeta[l] - zeta[l + 1];
            worst = worst.max(-gap);
            worst = worst.max(-nu / scale);
            if gap > 1e-9 {
                worst = worst.max(nu.abs() / scale);
            }
        }
    }
    worst = worst.max(nu.abs() / scale);
    if sum_zero {
        worst = worst.max(zeta.iter().sum::<f64>().abs());
    }
    worst
}

// ---------------------------------------------------------------------------
// Common orientation

/// `g(Γ) = Σ_j tr(W_j Γ Ξ_j⁻¹ Γ')`.
pub fn orientation_objective(scatters: &[DMatrix<f64>], xis: &[DVector<f64>], gamma: &DMatrix<f64>) -> f64 {
    scatters
        .iter()
        .zip(xis)
        .map(|(w, xi)| {
            diagonal_in_basis(w, gamma)
                .iter()
                .zip(xi.iter())
                .map(|(b, x)| b / x)
                .sum::<f64>()
        })
        .sum()
}

/// Descends `g(Γ)` over the orthogonal group from `start`.
///
/// Each round takes a majorize-minimize step (the polar factor of
/// `Σ_j (ω_j I - W_j) Γ Ξ_j⁻¹`, with `ω_j` the top eigenvalue of `W_j`); when
/// that stalls, a sweep of exact plane rotations over all column pairs is
/// applied. The objective never increases.
pub fn update_common_orientation(
    scatters: &[DMatrix<f64>],
    xis: &[DVector<f64>],
    start: &DMatrix<f64>,
    cfg: &MStepConfig,
) -> DMatrix<f64> {
    let p = start.nrows();
    if p == 1 {
        return start.clone();
    }
    let tops: Vec<f64> = scatters.iter().map(|w| sorted_eigen(w).0[0].max(0.0)).collect();
    let inv_xis: Vec<DVector<f64>> = xis.iter().map(|x| x.map(|v| 1.0 / v)).collect();
    let mut gamma = start.clone();
    let mut g = orientation_objective(scatters, xis, &gamma);
    for _ in 0..cfg.orientation_max_iter {
        let mut f = DMatrix::zeros(p, p);
        for ((w, &top), a) in scatters.iter().zip(&tops).zip(&inv_xis) {
            let shifted = DMatrix::from_diagonal_element(p, p, top) - w;
            f += shifted * &gamma * DMatrix::from_diagonal(a);
        }
        let candidate = polar_factor(&f);
        let g_mm = orientation_objective(scatters, xis, &candidate);
        let mut progressed = false;
        if g_mm <= g {
            progressed = relative_decrease(g, g_mm) >= cfg.inner_tol;
            gamma = candidate;
            g = g_mm;
        }
        if !progressed {
            let rotated = jacobi_sweep(scatters, &inv_xis, &gamma);
            let g_rot = orientation_objective(scatters, xis, &rotated);
            if g_rot <= g {
                progressed = relative_decrease(g, g_rot) >= cfg.inner_tol;
                gamma = rotated;
                g = g_rot;
            }
        }
        if !progressed {
            break;
        }
    }
    gamma
}

/// One pass of exact minimizing rotations in every coordinate plane `(l, m)`.
fn jacobi_sweep(scatters: &[DMatrix<f64>], inv_xis: &[DVector<f64>], start: &DMatrix<f64>) -> DMatrix<f64> {
    let p = start.nrows();
    let mut gamma = start.clone();
    for l in 0..p {
        for m in l + 1..p {
            let (mut cos_coef, mut sin_coef) = (0.0, 0.0);
            for (w, a) in scatters.iter().zip(inv_xis) {
                let gl = gamma.column(l);
                let gm = gamma.column(m);
                let wl = w * gl;
                let wm = w * gm;
                let s_ll = gl.dot(&wl);
                let s_mm = gm.dot(&wm);
                let s_lm = gl.dot(&wm);
                let diff = a[l] - a[m];
                cos_coef += diff * (s_ll - s_mm) / 2.0;
                sin_coef += diff * s_lm;
            }
            let r = cos_coef.hypot(sin_coef);
            if r <= 1e-300 {
                continue;
            }
            // g(θ) = const + P cos 2θ + Q sin 2θ, minimized at 2θ = atan2(-Q, -P)
            let theta = (-sin_coef).atan2(-cos_coef) / 2.0;
            if theta.abs() < 1e-15 {
                continue;
            }
            let (s, c) = theta.sin_cos();
            let gl = gamma.column(l).into_owned();
            let gm = gamma.column(m).into_owned();
            gamma.set_column(l, &(&gl * c + &gm * s));
            gamma.set_column(m, &(&gm * c - &gl * s));
        }
    }
    gamma
}

// ---------------------------------------------------------------------------
// EVE and VVE

fn axis_data(stats: &SufficientStats, gamma: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    stats
        .scatters
        .iter()
        .enumerate()
        .map(|(j, w)| {
            let b = diagonal_in_basis(w, gamma);
            let max = b.max();
            if !(max > 0.0) || b.min() <= SPD_RELATIVE_FLOOR * max {
                return Err(degenerate("scatter", Some(j)));
            }
            Ok(b)
        })
        .collect()
}

/// Axis variances `ξ_j` and objective value for a fixed orientation.
type AxisSolver = fn(&SufficientStats, &DMatrix<f64>) -> Result<(Vec<DVector<f64>>, f64)>;

fn vve_axes(stats: &SufficientStats, gamma: &DMatrix<f64>) -> Result<(Vec<DVector<f64>>, f64)> {
    let bs = axis_data(stats, gamma)?;
    let mut xis = Vec::with_capacity(bs.len());
    let mut f = 0.0;
    for (b, &n_j) in bs.iter().zip(&stats.counts) {
        let zeta = ordered_eigenvalue_solve(b.as_slice(), n_j, false)?;
        f += b.iter().zip(&zeta).map(|(b, z)| b * (-z).exp() + n_j * z).sum::<f64>();
        xis.push(DVector::from_iterator(zeta.len(), zeta.iter().map(|z| z.exp())));
    }
    Ok((xis, f))
}

fn eve_axes(stats: &SufficientStats, gamma: &DMatrix<f64>) -> Result<(Vec<DVector<f64>>, f64)> {
    let bs = axis_data(stats, gamma)?;
    let p = stats.p() as f64;
    let mut zetas = Vec::with_capacity(bs.len());
    let mut weighted = 0.0;
    for (b, &n_j) in bs.iter().zip(&stats.counts) {
        let zeta = ordered_eigenvalue_solve(b.as_slice(), n_j, true)?;
        weighted += b.iter().zip(&zeta).map(|(b, z)| b * (-z).exp()).sum::<f64>();
        zetas.push(zeta);
    }
    let lambda = weighted / (stats.n() * p);
    let xis = zetas
        .iter()
        .map(|z| DVector::from_iterator(z.len(), z.iter().map(|v| lambda * v.exp())))
        .collect();
    let f = stats.n() * p * (1.0 + lambda.ln());
    Ok((xis, f))
}

/// Upper bound on cold starts before falling back from all column
/// permutations to cyclic shifts.
const MAX_COLD_STARTS: usize = 200;

/// Eigenbases of the pooled and of every group scatter, each with its
/// columns reordered in every possible way (or cyclically shifted when that
/// would exceed [`MAX_COLD_STARTS`]). The ordering constraint makes the
/// objective multimodal in which direction carries which rank.
fn cold_starts(stats: &SufficientStats) -> Vec<DMatrix<f64>> {
    let p = stats.p();
    let mut bases = vec![sorted_eigen(&stats.pooled_scatter()).1];
    if stats.k() > 1 {
        bases.extend(stats.scatters.iter().map(|w| sorted_eigen(w).1));
    }
    let total = (1..=p).try_fold(bases.len(), |acc, i| acc.checked_mul(i));
    let orders: Vec<Vec<usize>> = if total.is_some_and(|t| t <= MAX_COLD_STARTS) {
        permutations(p)
    } else {
        (0..p).map(|s| (0..p).map(|c| (c + s) % p).collect()).collect()
    };
    bases
        .iter()
        .flat_map(|e| {
            orders.iter().map(move |order| {
                let mut q = DMatrix::zeros(p, p);
                for (c, &src) in order.iter().enumerate() {
                    q.set_column(c, &e.column(src));
                }
                q
            })
        })
        .collect()
}

/// All orderings of `0..p`, identity first.
fn permutations(p: usize) -> Vec<Vec<usize>> {
    let mut out = vec![(0..p).collect::<Vec<_>>()];
    // lexicographic successors
    loop {
        let mut v = out.last().expect("non-empty").clone();
        let Some(i) = (1..p).rev().find(|&i| v[i - 1] < v[i]) else {
            return out;
        };
        let j = (i..p).rev().find(|&j| v[j] > v[i - 1]).expect("successor exists");
        v.swap(i - 1, j);
        v[i..].reverse();
        out.push(v);
    }
}

fn common_orientation_mstep(
    stats: &SufficientStats,
    prev: Option<&[CovarianceFactors]>,
    cfg: &MStepConfig,
    axes: AxisSolver,
) -> Result<(DMatrix<f64>, Vec<DVector<f64>>)> {
    let starts: Vec<DMatrix<f64>> = match prev {
        Some(prev) => vec![prev[0].orientation().clone()],
        None => cold_starts(stats),
    };
    let screened = if starts.len() > SCREEN_KEEP {
        screen_starts(stats, starts, cfg, axes)
    } else {
        starts
    };
    let mut best: Option<(f64, DMatrix<f64>, Vec<DVector<f64>>)> = None;
    let mut last_err = None;
    for start in screened {
        match alternate(stats, start, cfg, axes) {
            Ok((f, gamma, xis)) => {
                if best.as_ref().is_none_or(|(fb, _, _)| f < *fb) {
                    best = Some((f, gamma, xis));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some((_, gamma, xis)) => Ok((gamma, xis)),
        None => Err(last_err.expect("at least one start")),
    }
}

/// Starts carried to full convergence after screening.
const SCREEN_KEEP: usize = 8;

/// Runs a few cheap alternation rounds from every start and keeps the
/// [`SCREEN_KEEP`] best end points.
fn screen_starts(
    stats: &SufficientStats,
    starts: Vec<DMatrix<f64>>,
    cfg: &MStepConfig,
    axes: AxisSolver,
) -> Vec<DMatrix<f64>> {
    let quick = MStepConfig {
        inner_max_iter: 6,
        orientation_max_iter: 10,
        ..*cfg
    };
    let mut scored: Vec<(f64, DMatrix<f64>)> = starts
        .into_iter()
        .filter_map(|s| alternate(stats, s, &quick, axes).ok())
        .map(|(f, gamma, _)| (f, gamma))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    scored.into_iter().take(SCREEN_KEEP).map(|(_, g)| g).collect()
}

fn alternate(
    stats: &SufficientStats,
    start: DMatrix<f64>,
    cfg: &MStepConfig,
    axes: AxisSolver,
) -> Result<(f64, DMatrix<f64>, Vec<DVector<f64>>)> {
    let mut gamma = start;
    let (mut xis, mut f) = axes(stats, &gamma)?;
    for _ in 0..cfg.inner_max_iter {
        let next = update_common_orientation(&stats.scatters, &xis, &gamma, cfg);
        let (next_xis, next_f) = match axes(stats, &next) {
            Ok(v) => v,
            Err(_) => break,
        };
        let dec = relative_decrease(f, next_f);
        if next_f <= f {
            gamma = next;
            xis = next_xis;
            f = next_f;
        }
        if dec < cfg.inner_tol {
            break;
        }
    }
    Ok((f, gamma, xis))
}

/// VVE: `Σ_j = λ_j Γ Δ_j Γ'` with a common, order-preserving orientation.
pub fn mstep_vve(
    stats: &SufficientStats,
    prev: Option<&[CovarianceFactors]>,
    cfg: &MStepConfig,
) -> Result<Vec<CovarianceFactors>> {
    let (gamma, xis) = common_orientation_mstep(stats, prev, cfg, vve_axes)?;
    Ok(xis
        .iter()
        .map(|xi| CovarianceFactors::from_axis_variances(xi, gamma.clone()))
        .collect())
}

/// EVE: `Σ_j = λ Γ Δ_j Γ'` with a common, order-preserving orientation.
pub fn mstep_eve(
    stats: &SufficientStats,
    prev: Option<&[CovarianceFactors]>,
    cfg: &MStepConfig,
) -> Result<Vec<CovarianceFactors>> {
    let (gamma, xis) = common_orientation_mstep(stats, prev, cfg, eve_axes)?;
    let p = stats.p() as f64;
    // every ξ_j has the same geometric mean λ by construction
    let lambda = (xis[0].iter().map(|x| x.ln()).sum::<f64>() / p).exp();
    Ok(xis
        .iter()
        .map(|xi| CovarianceFactors::from_parts(lambda, xi.map(|x| x / lambda), gamma.clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::compose_covariance;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats_from(scatters: Vec<DMatrix<f64>>, counts: Vec<f64>) -> SufficientStats {
        let p = scatters[0].nrows();
        let means = vec![DVector::zeros(p); counts.len()];
        SufficientStats {
            counts,
            means,
            scatters,
        }
    }

    fn random_scatter(rng: &mut ChaCha8Rng, p: usize, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        let mut w = DMatrix::zeros(p, p);
        for _ in 0..n {
            let z = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
            let x = &a * z;
            w += &x * x.transpose();
        }
        w
    }

    #[test]
    fn vvv_and_eee_closed_forms() {
        let w1 = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let w2 = DMatrix::from_row_slice(2, 2, &[3.0, -1.0, -1.0, 5.0]);
        let stats = stats_from(vec![w1.clone(), w2.clone()], vec![4.0, 6.0]);
        let cfg = MStepConfig::default();
        let vvv = mstep(ModelId::VVV, &stats, None, &cfg).unwrap();
        assert!((compose_covariance(&vvv[0]) - &w1 / 4.0).amax() < 1e-12);
        assert!((compose_covariance(&vvv[1]) - &w2 / 6.0).amax() < 1e-12);
        let eee = mstep(ModelId::EEE, &stats, None, &cfg).unwrap();
        assert!((compose_covariance(&eee[0]) - (&w1 + &w2) / 10.0).amax() < 1e-12);
        assert_eq!(eee[0], eee[1]);
    }

    #[test]
    fn pav_examples() {
        let z = ordered_eigenvalue_solve(&[4.0, 1.0], 2.0, false).unwrap();
        assert!((z[0] - 2f64.ln()).abs() < 1e-14 && (z[1] - 0.5f64.ln()).abs() < 1e-14);
        let z = ordered_eigenvalue_solve(&[1.0, 4.0], 2.0, false).unwrap();
        assert!((z[0] - 1.25f64.ln()).abs() < 1e-14 && (z[1] - 1.25f64.ln()).abs() < 1e-14);
        let z = ordered_eigenvalue_solve(&[4.0, 1.0], 2.0, true).unwrap();
        assert!((z[0] - 2f64.ln()).abs() < 1e-14 && (z[1] + 2f64.ln()).abs() < 1e-14);
        assert!(matches!(
            ordered_eigenvalue_solve(&[1.0, 0.0], 1.0, false),
            Err(Error::InvalidProjection(_))
        ));
        assert!(pav_ordered_solve(&[1.0, -2.0], 1.0, true).is_err());
    }

    #[test]
    fn pav_ties_merge() {
        let z = pav_ordered_solve(&[2.0, 2.0, 1.0], 1.0, false).unwrap();
        assert_eq!(z[0], z[1]);
        assert!((z[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn active_set_single_coordinate() {
        assert_eq!(ordered_eigenvalue_solve(&[3.0], 1.5, true).unwrap(), vec![0.0]);
        assert!((ordered_eigenvalue_solve(&[3.0], 1.5, false).unwrap()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn orientation_single_group_is_eigenbasis() {
        let w = DMatrix::from_row_slice(3, 3, &[5.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0]);
        let xi = dvector![3.0, 2.0, 1.0];
        let cfg = MStepConfig::default();
        // start from a permuted basis, a saddle for the MM step alone
        let (_, vecs) = sorted_eigen(&w);
        let mut start = vecs.clone();
        start.swap_columns(0, 2);
        let gamma = update_common_orientation(std::slice::from_ref(&w), std::slice::from_ref(&xi), &start, &cfg);
        let got = orientation_objective(std::slice::from_ref(&w), std::slice::from_ref(&xi), &gamma);
        let want = orientation_objective(std::slice::from_ref(&w), &[xi], &vecs);
        assert!((got - want).abs() < 1e-10 * want);
        for c in 0..3 {
            assert!((gamma.column(c).dot(&vecs.column(c)).abs() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn orientation_rotation_invariant_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ws = vec![random_scatter(&mut rng, 3, 10), random_scatter(&mut rng, 3, 10)];
        let xis = vec![DVector::from_element(3, 2.0), DVector::from_element(3, 2.0)];
        let start = sorted_eigen(&ws[0]).1;
        let gamma = update_common_orientation(&ws, &xis, &start, &MStepConfig::default());
        let expected = (ws[0].trace() + ws[1].trace()) / 2.0;
        assert!((orientation_objective(&ws, &xis, &gamma) - expected).abs() < 1e-10 * expected);
    }

    #[test]
    fn orientation_update_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = MStepConfig::default();
        for _ in 0..50 {
            let ws = vec![random_scatter(&mut rng, 4, 12), random_scatter(&mut rng, 4, 12)];
            let xis: Vec<DVector<f64>> = (0..2)
                .map(|_| {
                    let mut v: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..3.0)).collect();
                    v.sort_by(|a, b| b.total_cmp(a));
                    DVector::from_vec(v)
                })
                .collect();
            let start = crate::linalg::polar_factor(&DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0)));
            let before = orientation_objective(&ws, &xis, &start);
            let gamma = update_common_orientation(&ws, &xis, &start, &cfg);
            assert!(orientation_objective(&ws, &xis, &gamma) <= before + 1e-10 * before);
            assert!(crate::linalg::orthogonality_error(&gamma) < 1e-10);
        }
    }

    #[test]
    fn k1_common_orientation_models_reduce_to_ml() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random_scatter(&mut rng, 3, 20);
        let stats = stats_from(vec![w.clone()], vec![20.0]);
        let cfg = MStepConfig::default();
        for model in ModelId::ALL {
            let covs = mstep(model, &stats, None, &cfg).unwrap();
            let got = compose_covariance(&covs[0]);
            assert!((&got - &w / 20.0).amax() < 1e-8 * w.amax(), "{model}");
        }
    }

    #[test]
    fn warm_start_never_increases_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = MStepConfig::default();
        for trial in 0..30 {
            let p = 2 + trial % 3;
            let ws: Vec<_> = (0..3).map(|_| random_scatter(&mut rng, p, 15)).collect();
            let stats = stats_from(ws, vec![15.0, 15.0, 15.0]);
            for model in ModelId::ALL {
                let cold = mstep(model, &stats, None, &cfg).unwrap();
                // perturb volumes to get a feasible but suboptimal warm start
                let warm: Vec<_> = cold.iter().map(|c| c.with_lambda(c.lambda() * 1.3)).collect();
                let f_warm = mstep_objective(&stats, &warm);
                let out = mstep(model, &stats, Some(&warm), &cfg).unwrap();
                assert!(mstep_objective(&stats, &out) <= f_warm + 1e-8 * f_warm.abs(), "{model}");
                for c in &out {
                    assert!(c.shape().as_slice().windows(2).all(|w| w[0] >= w[1]), "{model}");
                    assert!(c.shape().iter().map(|s| s.ln()).sum::<f64>().abs() < 1e-8);
                }
                let params =
                    crate::gaussian::MixtureParams::from_parts(model, vec![1.0 / 3.0; 3], stats.means.clone(), out);
                assert!(params.satisfies_constraints(), "{model}");
            }
        }
    }

    #[test]
    fn singular_scatter_is_reported() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let stats = stats_from(vec![w.clone(), w], vec![3.0, 3.0]);
        for model in ModelId::ALL {
            let err = mstep(model, &stats, None, &MStepConfig::default()).unwrap_err();
            assert!(matches!(err, Error::DegenerateScatter(_)), "{model}: {err}");
        }
    }
}
