//! Helpers shared by the integration tests: data fixtures and independent
//! numerical oracles that do not reuse any solver from the library.

#![allow(dead_code)]

use gpcm::em::SufficientStats;
use gpcm::gaussian::DataMatrix;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn iris() -> (DataMatrix, Vec<usize>) {
    let text = include_str!("../data/iris_vv.csv");
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        rows.push(fields[..4].iter().map(|v| v.parse().unwrap()).collect());
        labels.push(usize::from(fields[4] != "versicolor"));
    }
    (DataMatrix::from_rows(&rows).unwrap(), labels)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Scatter of `m` draws from a Gaussian with a random covariance.
pub fn random_scatter(rng: &mut ChaCha8Rng, p: usize, m: usize) -> DMatrix<f64> {
    let root = normal_matrix(rng, p, p) + DMatrix::identity(p, p) * 0.5;
    let x = &root * normal_matrix(rng, p, m);
    &x * x.transpose()
}

/// Sufficient statistics with random scatters; means are irrelevant to the M-step.
pub fn random_stats(rng: &mut ChaCha8Rng, p: usize, k: usize) -> SufficientStats {
    let counts: Vec<f64> = (0..k).map(|_| rng.random_range(p + 3..4 * p + 20) as f64).collect();
    let scatters = counts.iter().map(|&m| random_scatter(rng, p, m as usize)).collect();
    SufficientStats {
        counts,
        means: vec![DVector::zeros(p); k],
        scatters,
    }
}

/// Nelder-Mead simplex minimization, restarted from its own best point
/// until a restart no longer improves the value.
pub fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, max_evals: usize) -> (Vec<f64>, f64) {
    let mut best = x0.to_vec();
    let mut best_f = f(&best);
    let mut evals = 0;
    let mut scale = step;
    loop {
        let (x, fx, used) = simplex_run(f, &best, scale, max_evals.saturating_sub(evals));
        evals += used;
        let improved = best_f - fx;
        if fx <= best_f {
            best = x;
            best_f = fx;
        }
        if improved <= 1e-15 * (1.0 + best_f.abs()) || evals >= max_evals {
            return (best, best_f);
        }
        scale = (scale * 0.5).max(1e-4);
    }
}

fn simplex_run(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, budget: usize) -> (Vec<f64>, f64, usize) {
    let d = x0.len();
    let mut pts: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..d {
        let mut x = x0.to_vec();
        x[i] += step;
        pts.push(x);
    }
    let mut vals: Vec<f64> = pts.iter().map(|x| f(x)).collect();
    let mut evals = d + 1;
    while evals < budget {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        let spread = (vals[d] - vals[0]).abs();
        let size = pts[1..]
            .iter()
            .map(|x| x.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= 1e-16 * (1.0 + vals[0].abs()) && size < 1e-12 {
            break;
        }
        if size < 1e-14 {
            break;
        }
        let centroid: Vec<f64> = (0..d)
            .map(|j| pts[..d].iter().map(|x| x[j]).sum::<f64>() / d as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> { (0..d).map(|j| centroid[j] + t * (pts[d][j] - centroid[j])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            evals += 1;
            if fe < fr {
                pts[d] = xe;
                vals[d] = fe;
            } else {
                pts[d] = xr;
                vals[d] = fr;
            }
        } else if fr < vals[d - 1] {
            pts[d] = xr;
            vals[d] = fr;
        } else {
            let (xc, fc) = if fr < vals[d] {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            };
            evals += 1;
            if fc < vals[d].min(fr) {
                pts[d] = xc;
                vals[d] = fc;
            } else {
                for i in 1..=d {
                    pts[i] = (0..d).map(|j| pts[0][j] + 0.5 * (pts[i][j] - pts[0][j])).collect();
                    vals[i] = f(&pts[i]);
                }
                evals += d;
            }
        }
    }
    let i = (0..=d).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    (pts[i].clone(), vals[i], evals)
}

/// Special orthogonal matrix `exp(S)` for the skew-symmetric `S` whose
/// strictly upper triangle is `params` (row-major).
pub fn rotation(params: &[f64], p: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(p, p);
    let mut t = 0;
    for i in 0..p {
        for j in i + 1..p {
            s[(i, j)] = params[t];
            s[(j, i)] = -params[t];
            t += 1;
        }
    }
    s.exp()
}

pub fn n_rotation_params(p: usize) -> usize {
    p * (p - 1) / 2
}

pub fn random_rotation_params(rng: &mut ChaCha8Rng, p: usize) -> Vec<f64> {
    (0..n_rotation_params(p)).map(|_| rng.random_range(-3.2..3.2)).collect()
}

/// `Σ_j tr(W_j Γ Ξ_j⁻¹ Γ')`, computed directly.
pub fn g_direct(scatters: &[DMatrix<f64>], xis: &[DVector<f64>], gamma: &DMatrix<f64>) -> f64 {
    scatters
        .iter()
        .zip(xis)
        .map(|(w, xi)| (w * gamma * DMatrix::from_diagonal(&xi.map(|v| 1.0 / v)) * gamma.transpose()).trace())
        .sum()
}

/// Best-of-`starts` minimization of `g` over rotations.
pub fn orientation_oracle(scatters: &[DMatrix<f64>], xis: &[DVector<f64>], starts: usize, seed: u64) -> f64 {
    let p = scatters[0].nrows();
    let mut r = rng(seed);
    let f = |x: &[f64]| g_direct(scatters, xis, &rotation(x, p));
    (0..starts)
        .map(|_| nelder_mead(&f, &random_rotation_params(&mut r, p), 0.5, 20_000).1)
        .fold(f64::INFINITY, f64::min)
}

/// Every partition of `0..p` into contiguous blocks, as block end indices.
fn contiguous_partitions(p: usize) -> Vec<Vec<usize>> {
    (0..1usize << (p - 1))
        .map(|mask| {
            let mut ends: Vec<usize> = (0..p - 1).filter(|i| mask >> i & 1 == 1).map(|i| i + 1).collect();
            ends.push(p);
            ends
        })
        .collect()
}

/// Block means of `b` for a partition, expanded to length `p`.
fn block_means(b: &[f64], ends: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; b.len()];
    let mut start = 0;
    for &end in ends {
        let m = b[start..end].iter().sum::<f64>() / (end - start) as f64;
        out[start..end].iter_mut().for_each(|v| *v = m);
        start = end;
    }
    out
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] >= w[1])
}

/// For fixed `b = diag(Γ'WΓ)`: `min Σ_l [b_l/ξ_l + n log ξ_l]` over
/// non-increasing `ξ`, by enumerating which neighbours are tied. With ties
/// fixed the minimizer takes block means `ξ = mean(b)/n`; the optimum is the
/// best ordered one.
pub fn ordered_min_enumerated(b: &[f64], n_j: f64) -> f64 {
    contiguous_partitions(b.len())
        .iter()
        .map(|ends| block_means(b, ends))
        .filter(|m| non_increasing(m))
        .map(|m| {
            b.iter()
                .zip(&m)
                .map(|(bl, ml)| bl / (ml / n_j) + n_j * (ml / n_j).ln())
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

/// `min Σ_l b_l/δ_l` over non-increasing `δ` with `Π δ_l = 1`, by the same
/// enumeration: with ties fixed, `δ ∝` block means.
pub fn ordered_unit_det_min_enumerated(b: &[f64]) -> f64 {
    let p = b.len() as f64;
    contiguous_partitions(b.len())
        .iter()
        .map(|ends| block_means(b, ends))
        .filter(|m| non_increasing(m))
        .map(|m| {
            let geo = (m.iter().map(|v| v.ln()).sum::<f64>() / p).exp();
            b.iter().zip(&m).map(|(bl, ml)| bl * geo / ml).sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

/// The VVE (or, with `equal_volume`, EVE) M-step objective profiled over
/// the axis variances for a fixed orientation.
pub fn profiled_objective(stats: &SufficientStats, gamma: &DMatrix<f64>, equal_volume: bool) -> f64 {
    let p = stats.p() as f64;
    let bs: Vec<Vec<f64>> = stats
        .scatters
        .iter()
        .map(|w| {
            let wg = w * gamma;
            (0..gamma.ncols()).map(|l| gamma.column(l).dot(&wg.column(l))).collect()
        })
        .collect();
    if equal_volume {
        // λ = Σ_j Σ_l b_jl/δ_jl / (n p) and F = n p (1 + log λ)
        let s: f64 = bs.iter().map(|b| ordered_unit_det_min_enumerated(b)).sum();
        let np = stats.n() * p;
        np * (1.0 + (s / np).ln())
    } else {
        bs.iter()
            .zip(&stats.counts)
            .map(|(b, &n)| ordered_min_enumerated(b, n))
            .sum()
    }
}

/// Independent minimum of the VVE / EVE M-step objective: Nelder-Mead over
/// rotation parameters from `starts` random rotations, with the axis
/// variances profiled out by enumeration.
pub fn common_orientation_oracle(stats: &SufficientStats, equal_volume: bool, starts: usize, seed: u64) -> f64 {
    common_orientation_argmin(stats, equal_volume, starts, seed).0
}

/// [`common_orientation_oracle`] together with the minimizing rotation.
pub fn common_orientation_argmin(
    stats: &SufficientStats,
    equal_volume: bool,
    starts: usize,
    seed: u64,
) -> (f64, DMatrix<f64>) {
    let p = stats.p();
    let f = |x: &[f64]| profiled_objective(stats, &rotation(x, p), equal_volume);
    let mut r = rng(seed);
    (0..starts)
        .map(|_| nelder_mead(&f, &random_rotation_params(&mut r, p), 0.5, 50_000))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(x, v)| (v, rotation(&x, p)))
        .unwrap()
}

/// Kolmogorov-Smirnov distance from uniform, computed independently.
pub fn ks_distance(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in v.iter().enumerate() {
        d = d.max(((i + 1) as f64 / m - x).abs()).max((x - i as f64 / m).abs());
    }
    d
}

/// Every column ordering of `q`.
pub fn column_permutations(q: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    fn perms(p: usize) -> Vec<Vec<usize>> {
        if p == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for base in perms(p - 1) {
            for i in 0..p {
                let mut v = base.clone();
                v.insert(i, p - 1);
                out.push(v);
            }
        }
        out
    }
    perms(q.ncols())
        .into_iter()
        .map(|perm| {
            let mut r = q.clone();
            for (c, &src) in perm.iter().enumerate() {
                r.set_column(c, &q.column(src));
            }
            r
        })
        .collect()
}
