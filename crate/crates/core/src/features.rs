//! SVD-based feature reduction.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Project feature rows onto the top-`target_dim` right singular directions.
///
/// Returns the input unchanged when `target_dim >= feature_dim`. The output
/// is `node_count x min(target_dim, feature_dim)`.
pub fn svd_reduce_features(features: &DMatrix<f64>, target_dim: usize) -> Result<DMatrix<f64>> {
    if target_dim == 0 {
        return Err(Error::InvalidParameter { msg: "target_dim must be >= 1".into() });
    }
    if features.nrows() == 0 || features.ncols() == 0 {
        return Err(Error::EmptyInput { msg: "feature matrix is empty".into() });
    }
    if target_dim >= features.ncols() {
        return Ok(features.clone());
    }
    let basis = top_right_singular_vectors(features, target_dim);
    Ok(features * basis)
}

/// Top-k right singular vectors as columns of a `feature_dim x k` matrix,
/// ordered by descending singular value.
pub fn top_right_singular_vectors(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("svd requested v_t");
    // nalgebra returns singular values in descending order already, but sort
    // defensively by index pairing since only ordering is relied upon.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut basis = DMatrix::zeros(m.ncols(), k);
    for (col, &idx) in order.iter().take(k).enumerate() {
        for r in 0..m.ncols() {
            basis[(r, col)] = v_t[(idx, r)];
        }
    }
    basis
}

/// Singular values of `m` in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let svd = m.clone().svd(false, false);
    let mut vals: Vec<f64> = svd.singular_values.iter().copied().collect();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    vals
}
