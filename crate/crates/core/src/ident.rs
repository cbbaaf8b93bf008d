//! Rotation and sign convention for loadings and factors.
//!
//! The model is invariant to `A -> A R`, `f -> R' f` for orthogonal `R`
//! (and likewise for each `B_s`, `h`). After fitting, the stacked loadings
//! are rotated to `U S` from their SVD, so their columns are orthogonal with
//! decreasing norms, and each column is flipped so its largest-magnitude
//! entry is positive. Factor means and covariances are rotated to match.

use nalgebra::DMatrix;

use crate::linalg::thin_svd;
use crate::model::{split_rows, ModelParams, VariationalParams};

/// Orthogonal `k x k` rotation `R` such that `L R` is the sign-fixed `U S`.
fn canonical_rotation(stacked: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, k) = stacked.shape();
    if k == 0 {
        return DMatrix::zeros(0, 0);
    }
    let padded;
    let target = if p >= k {
        stacked
    } else {
        padded = {
            let mut m = DMatrix::zeros(k, k);
            m.rows_mut(0, p).copy_from(stacked);
            m
        };
        &padded
    };
    let svd = thin_svd(target);
    let mut rot = svd.v;
    let rotated = stacked * &rot;
    for c in 0..k {
        let col = rotated.column(c);
        let lead = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        if lead < 0.0 {
            rot.column_mut(c).neg_mut();
        }
    }
    rot
}

fn rotate(
    loadings: &DMatrix<f64>,
    means: &DMatrix<f64>,
    covs: &[DMatrix<f64>],
) -> (DMatrix<f64>, DMatrix<f64>, Vec<DMatrix<f64>>) {
    let rot = canonical_rotation(loadings);
    let rt = rot.transpose();
    (
        loadings * &rot,
        means * &rot,
        covs.iter().map(|c| &rt * c * &rot).collect(),
    )
}

/// Rotate and sign-fix `(theta, phi)`; linear predictors are unchanged.
pub fn align(theta: &ModelParams, phi: &VariationalParams) -> (ModelParams, VariationalParams) {
    let mut theta = theta.clone();
    let mut phi = phi.clone();
    let heights: Vec<usize> = theta.a.iter().map(|a| a.nrows()).collect();

    if theta.q > 0 {
        let stacked = theta.stacked_a();
        let rot = canonical_rotation(&stacked);
        let rt = rot.transpose();
        theta.a = split_rows(&(&stacked * &rot), &heights);
        for sv in &mut phi.studies {
            sv.mean_f = &sv.mean_f * &rot;
            for c in &mut sv.cov_f {
                *c = &rt * &*c * &rot;
            }
        }
    }
    for s in 0..theta.num_studies() {
        if theta.qs[s] == 0 {
            continue;
        }
        let sv = &mut phi.studies[s];
        let (b, o, covs) = rotate(&theta.stacked_b(s), &sv.mean_h, &sv.cov_h);
        theta.b[s] = split_rows(&b, &heights);
        sv.mean_h = o;
        sv.cov_h = covs;
    }
    (theta, phi)
}

/// Align true parameters and factors with the same convention, so that
/// estimates and truth can be compared entry by entry.
pub fn align_truth(
    theta: &ModelParams,
    f: &[DMatrix<f64>],
    h: &[DMatrix<f64>],
) -> (ModelParams, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let mut theta = theta.clone();
    let heights: Vec<usize> = theta.a.iter().map(|a| a.nrows()).collect();
    let mut f_out = f.to_vec();
    let mut h_out = h.to_vec();
    if theta.q > 0 {
        let stacked = theta.stacked_a();
        let rot = canonical_rotation(&stacked);
        theta.a = split_rows(&(&stacked * &rot), &heights);
        for fs in &mut f_out {
            *fs = &*fs * &rot;
        }
    }
    for s in 0..theta.num_studies() {
        if theta.qs[s] == 0 {
            continue;
        }
        let stacked = theta.stacked_b(s);
        let rot = canonical_rotation(&stacked);
        theta.b[s] = split_rows(&(&stacked * &rot), &heights);
        h_out[s] = &h_out[s] * &rot;
    }
    (theta, f_out, h_out)
}
