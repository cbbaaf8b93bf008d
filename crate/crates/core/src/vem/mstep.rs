//! M-step: closed-form block updates of the model parameters.
//!
//! For one variable `(m, j)` the ELBO depends on `beta_mj`, `a_mj`,
//! `b_smj` (all `s`) and `lambda_smj` only through
//!
//! ```text
//! -1/2 sum_s [ n_s log(2 pi lambda_smj) + Q_s(theta_mj) / lambda_smj ]
//! ```
//!
//! where `Q_s` is a convex quadratic built from the per-study moments
//! `G_s = sum_i E[u_si u_si']`, `u_si = (z_si, f_si, h_si)`. Given the
//! variances the coefficients solve a pooled weighted least-squares problem;
//! given the coefficients each variance is `Q_s / n_s`. The two are
//! alternated to a joint stationary point.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::work::{effective_v, expand_modalities, working_response, y_variances, Prepared};
use crate::error::Result;
use crate::linalg::spd_solve;
use crate::model::{split_rows, Dataset, ModelParams, VariationalParams};

pub const LAMBDA_FLOOR: f64 = 1e-6;
const INNER_MAX_ITERS: usize = 200;
const INNER_TOL: f64 = 1e-12;

/// Sufficient statistics of one study.
struct StudyMoments {
    n: f64,
    /// `K_s x K_s` second moment of `(z, f, h)`.
    gram: DMatrix<f64>,
    /// `K_s x p` cross moment with the working response.
    cross: DMatrix<f64>,
    /// Per-variable `sum_i E[r^2]` (working response squared plus variances).
    sq: DVector<f64>,
}

fn study_moments(prep: &Prepared, ds: &Dataset, theta: &ModelParams, phi: &VariationalParams, s: usize) -> StudyMoments {
    let sv = &phi.studies[s];
    let z = &ds.studies[s].z;
    let (n, d, q, qs) = (sv.n(), z.ncols(), theta.q, theta.qs[s]);
    let k = d + q + qs;
    let mut u = DMatrix::zeros(n, k);
    u.columns_mut(0, d).copy_from(z);
    if q > 0 {
        u.columns_mut(d, q).copy_from(&sv.mean_f);
    }
    if qs > 0 {
        u.columns_mut(d + q, qs).copy_from(&sv.mean_h);
    }
    let mut gram = u.transpose() * &u;
    for i in 0..n {
        if q > 0 {
            let mut blk = gram.view_mut((d, d), (q, q));
            blk += &sv.cov_f[i];
        }
        if qs > 0 {
            let mut blk = gram.view_mut((d + q, d + q), (qs, qs));
            blk += &sv.cov_h[i];
        }
    }
    let (w, var_v) = effective_v(theta, sv, s);
    let r = working_response(prep, sv, s) - &prep.tau[s] - expand_modalities(&w, &prep.layout);
    let cross = u.transpose() * &r;
    let extra = y_variances(prep, sv) + expand_modalities(&var_v, &prep.layout);
    let sq = DVector::from_fn(prep.layout.total, |j, _| {
        r.column(j).norm_squared() + extra.column(j).sum()
    });
    StudyMoments {
        n: n as f64,
        gram,
        cross,
        sq,
    }
}

/// Indices of study `s`'s coefficients inside the pooled vector
/// `(beta, a, b_1, ..., b_S)`.
fn pooled_index(d: usize, q: usize, qs: &[usize], s: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..d + q).collect();
    let off = d + q + qs[..s].iter().sum::<usize>();
    idx.extend(off..off + qs[s]);
    idx
}

struct VariableFit {
    coef: DVector<f64>,
    lambda: Vec<f64>,
}

fn fit_variable(
    moments: &[StudyMoments],
    index: &[Vec<usize>],
    dim: usize,
    j: usize,
    lambda0: Vec<f64>,
) -> Result<VariableFit> {
    let ns = moments.len();
    let mut lambda = lambda0;
    let mut coef = DVector::zeros(dim);
    for _ in 0..INNER_MAX_ITERS {
        let mut h = DMatrix::zeros(dim, dim);
        let mut g = DMatrix::zeros(dim, 1);
        for s in 0..ns {
            let w = 1.0 / lambda[s];
            let ix = &index[s];
            let mo = &moments[s];
            for (a, &ia) in ix.iter().enumerate() {
                g[(ia, 0)] += w * mo.cross[(a, j)];
                for (b, &ib) in ix.iter().enumerate() {
                    h[(ia, ib)] += w * mo.gram[(a, b)];
                }
            }
        }
        coef = spd_solve(&h, &g)?.column(0).into_owned();
        let mut change: f64 = 0.0;
        for s in 0..ns {
            let mo = &moments[s];
            let cs = DVector::from_iterator(index[s].len(), index[s].iter().map(|&i| coef[i]));
            let quad = mo.sq[j] - 2.0 * cs.dot(&mo.cross.column(j)) + cs.dot(&(&mo.gram * &cs));
            let new = (quad / mo.n).max(LAMBDA_FLOOR);
            change = change.max(((new - lambda[s]) / lambda[s]).abs());
            lambda[s] = new;
        }
        if ns == 1 || change < INNER_TOL {
            break;
        }
    }
    Ok(VariableFit { coef, lambda })
}

/// M-step: returns the parameters maximizing the ELBO given `phi`.
pub fn mstep(theta: &ModelParams, phi: &VariationalParams, ds: &Dataset) -> Result<ModelParams> {
    let prep = Prepared::new(ds);
    mstep_prepared(&prep, ds, theta, phi)
}

pub(crate) fn mstep_prepared(prep: &Prepared, ds: &Dataset, theta: &ModelParams, phi: &VariationalParams) -> Result<ModelParams> {
    let ns = ds.num_studies();
    let layout = &prep.layout;
    let (d, q) = (ds.covariate_dim(), theta.q);
    let moments: Vec<StudyMoments> = (0..ns)
        .into_par_iter()
        .map(|s| study_moments(prep, ds, theta, phi, s))
        .collect();
    let index: Vec<Vec<usize>> = (0..ns).map(|s| pooled_index(d, q, &theta.qs, s)).collect();
    let dim = d + q + theta.qs.iter().sum::<usize>();
    let lambda_stacked: Vec<DVector<f64>> = (0..ns).map(|s| theta.stacked_lambda(s)).collect();

    let fits = (0..layout.total)
        .into_par_iter()
        .map(|j| fit_variable(&moments, &index, dim, j, (0..ns).map(|s| lambda_stacked[s][j]).collect()))
        .collect::<Result<Vec<VariableFit>>>()?;

    let p = layout.total;
    let mut beta = DMatrix::zeros(p, d);
    let mut a = DMatrix::zeros(p, q);
    let mut b: Vec<DMatrix<f64>> = theta.qs.iter().map(|&k| DMatrix::zeros(p, k)).collect();
    let mut lam: Vec<DVector<f64>> = (0..ns).map(|_| DVector::zeros(p)).collect();
    for (j, fv) in fits.iter().enumerate() {
        for k in 0..d {
            beta[(j, k)] = fv.coef[k];
        }
        for k in 0..q {
            a[(j, k)] = fv.coef[d + k];
        }
        let mut off = d + q;
        for s in 0..ns {
            for k in 0..theta.qs[s] {
                b[s][(j, k)] = fv.coef[off + k];
            }
            off += theta.qs[s];
            lam[s][j] = fv.lambda[s];
        }
    }

    let mut sigma2 = theta.sigma2.clone();
    for (s, sv) in phi.studies.iter().enumerate() {
        let (w, var_v) = effective_v(theta, sv, s);
        for m in 0..layout.num_modalities() {
            if theta.sigma2[(s, m)] > 0.0 {
                let n = sv.n() as f64;
                sigma2[(s, m)] = (w.column(m).norm_squared() + var_v.column(m).sum()) / n;
            } else {
                sigma2[(s, m)] = 0.0;
            }
        }
    }

    let split_vec = |v: &DVector<f64>| -> Vec<DVector<f64>> {
        layout
            .start
            .iter()
            .zip(&layout.p)
            .map(|(&o, &pm)| v.rows(o, pm).into_owned())
            .collect()
    };
    Ok(ModelParams {
        beta: split_rows(&beta, &layout.p),
        a: split_rows(&a, &layout.p),
        b: b.iter().map(|bs| split_rows(bs, &layout.p)).collect(),
        lambda: lam.iter().map(split_vec).collect(),
        sigma2,
        q,
        qs: theta.qs.clone(),
    })
}
