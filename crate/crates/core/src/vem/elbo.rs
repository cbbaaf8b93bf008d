//! Evidence lower bound of the mean-field approximation.

use std::f64::consts::PI;

use rayon::prelude::*;

use super::work::{compensated_sum, effective_v, linear_mean, reduce_sum, working_response, Accum, y_variances, Omit, Prepared, Stacked};
use crate::error::{Error, Result};
use crate::family::{logistic, softplus};
use crate::linalg::spd_logdet;
use crate::model::{Dataset, ModalityType, ModelParams, VariationalParams};

/// `E[log p(x | y)]` under `y ~ N(xi, s2)`, without the parameter-free
/// `-log x!` / `log C(n, x)` constant.
///
/// Poisson uses the exact log-normal moment; binomial uses a second-order
/// expansion of the log-partition function around `xi`.
#[inline]
pub(crate) fn expected_loglik(kind: ModalityType, x: f64, trials: u32, xi: f64, s2: f64) -> f64 {
    match kind {
        ModalityType::Continuous => 0.0,
        ModalityType::Count => x * xi - (xi + 0.5 * s2).exp(),
        ModalityType::Binomial => {
            let pr = logistic(xi);
            x * xi - trials as f64 * (softplus(xi) + 0.5 * s2 * pr * (1.0 - pr))
        }
    }
}

/// The part of the ELBO that depends on one `(xi, s2)` pair, up to constants.
#[inline]
pub(crate) fn y_objective(kind: ModalityType, x: f64, trials: u32, xi: f64, s2: f64, mu: f64, lambda: f64) -> f64 {
    let r = xi - mu;
    expected_loglik(kind, x, trials, xi, s2) - (r * r + s2) / (2.0 * lambda) + 0.5 * s2.ln()
}

/// ELBO summed over all studies and units.
pub fn elbo(theta: &ModelParams, phi: &VariationalParams, ds: &Dataset) -> Result<f64> {
    let prep = Prepared::new(ds);
    elbo_prepared(&prep, ds, theta, phi, true)
}

pub(crate) fn elbo_prepared(
    prep: &Prepared,
    ds: &Dataset,
    theta: &ModelParams,
    phi: &VariationalParams,
    deterministic: bool,
) -> Result<f64> {
    let st = Stacked::of(theta);
    let parts = (0..ds.num_studies())
        .into_par_iter()
        .map(|s| study_elbo(prep, ds, theta, &st, phi, s, deterministic))
        .collect::<Result<Vec<f64>>>()?;
    Ok(compensated_sum(parts))
}

fn study_elbo(
    prep: &Prepared,
    ds: &Dataset,
    theta: &ModelParams,
    st: &Stacked,
    phi: &VariationalParams,
    s: usize,
    deterministic: bool,
) -> Result<f64> {
    let layout = &prep.layout;
    let sv = &phi.studies[s];
    let n = sv.n();
    let p = layout.total;
    let lam = &st.lambda[s];
    if lam.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Numeric(format!("study {s}: overdispersion variances must be positive")));
    }
    let inv_lam = lam.map(|l| 1.0 / l);
    let y = working_response(prep, sv, s);
    let s2y = y_variances(prep, sv);
    let mu = linear_mean(prep, ds, theta, st, sv, s, Omit::Nothing);
    let (_, var_v) = effective_v(theta, sv, s);

    let scaled_a = scale_rows(&st.a, &inv_lam);
    let k_a = st.a.transpose() * &scaled_a;
    let scaled_b = scale_rows(&st.b[s], &inv_lam);
    let k_b = st.b[s].transpose() * &scaled_b;
    let nm = layout.num_modalities();
    let inv_lam_mod: Vec<f64> = (0..nm)
        .map(|m| inv_lam.rows(layout.start[m], layout.p[m]).sum())
        .collect();
    let log_norm: f64 = lam.iter().map(|l| (2.0 * PI * l).ln()).sum();
    let (q, qs) = (theta.q, theta.qs[s]);

    let per_unit = (0..n)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut quad = Accum::default();
            let mut total = Accum::default();
            for j in 0..p {
                let r = y[(i, j)] - mu[(i, j)];
                let v2 = s2y[(i, j)];
                quad.add((r * r + v2) * inv_lam[j]);
                let kind = layout.types[layout.col_modality[j]];
                if !kind.is_gaussian() {
                    if !(v2 > 0.0) {
                        return Err(Error::Numeric(format!("study {s} unit {i}: non-positive variance of y")));
                    }
                    // the per-cell constant cancels most of x * xi for large counts
                    total.add(expected_loglik(kind, prep.x[s][(i, j)], prep.trials[j], y[(i, j)], v2) + prep.cell_const[s][(i, j)]);
                    total.add(0.5 * (2.0 * PI * std::f64::consts::E * v2).ln());
                }
            }
            total.add(-0.5 * log_norm);
            if q > 0 {
                let cov = &sv.cov_f[i];
                quad.add((cov * &k_a).trace());
                let m = sv.mean_f.row(i);
                total.add(-0.5 * (m.norm_squared() + cov.trace()) + 0.5 * spd_logdet(cov)? + 0.5 * q as f64);
            }
            if qs > 0 {
                let cov = &sv.cov_h[i];
                quad.add((cov * &k_b).trace());
                let o = sv.mean_h.row(i);
                total.add(-0.5 * (o.norm_squared() + cov.trace()) + 0.5 * spd_logdet(cov)? + 0.5 * qs as f64);
            }
            for m in 0..nm {
                let s2 = theta.sigma2[(s, m)];
                if s2 > 0.0 {
                    let (w, vv) = (sv.mean_v[(i, m)], var_v[(i, m)]);
                    if !(vv > 0.0) {
                        return Err(Error::Numeric(format!(
                            "study {s} unit {i}: non-positive variance of the modality-shared factor"
                        )));
                    }
                    quad.add(vv * inv_lam_mod[m]);
                    total.add(-0.5 * (w * w + vv) / s2 + 0.5 * (vv / s2).ln() + 0.5);
                }
            }
            total.add(-0.5 * quad.value());
            Ok(total.value())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(reduce_sum(&per_unit, deterministic))
}

/// `diag(w) * m`
pub(crate) fn scale_rows(m: &nalgebra::DMatrix<f64>, w: &nalgebra::DVector<f64>) -> nalgebra::DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= w[i];
    }
    out
}
