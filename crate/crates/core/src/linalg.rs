//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// non-increasing order. Each eigenvector is signed so that its first
/// entry of non-negligible magnitude is positive.
pub fn sorted_eigen(s: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let p = s.nrows();
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(p, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(p, p);
    for (col, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let norm = v.norm();
        if norm > 0.0 {
            v /= norm;
        }
        fix_sign(&mut v);
        vectors.set_column(col, &v);
    }
    (values, vectors)
}

pub(crate) fn fix_sign(v: &mut DVector<f64>) {
    let scale = v.amax();
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

/// Orthogonal polar factor `U V'` of `F = U S V'`, the orthogonal matrix
/// maximizing `tr(F' Q)`.
pub fn polar_factor(f: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = f.clone().svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    u * v_t
}

/// Largest absolute entry of `Q'Q - I`.
pub fn orthogonality_error(q: &DMatrix<f64>) -> f64 {
    let p = q.ncols();
    (q.transpose() * q - DMatrix::<f64>::identity(p, p)).amax()
}

/// `log Σ exp(x_i)`, stable for large magnitudes.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `γ' W γ` for every column `γ` of `gamma`.
pub fn diagonal_in_basis(w: &DMatrix<f64>, gamma: &DMatrix<f64>) -> DVector<f64> {
    let wg = w * gamma;
    DVector::from_iterator(
        gamma.ncols(),
        (0..gamma.ncols()).map(|l| gamma.column(l).dot(&wg.column(l))),
    )
}
