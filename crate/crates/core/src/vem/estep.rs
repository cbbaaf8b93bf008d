//! E-step: updates of the variational parameters, one block at a time.
//!
//! Given the link-scale layer the model is linear-Gaussian, so the `f`, `h`
//! and `v` blocks have closed-form coordinate maximizers. The non-conjugate
//! `y` block uses a Laplace (mode and curvature) update.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::elbo::{scale_rows, y_objective};
use super::work::{effective_v, linear_mean, working_response, Omit, Prepared, Stacked};
use crate::error::Result;
use crate::family::logistic;
use crate::linalg::spd_inverse;
use crate::model::{Dataset, ModalityType, ModelParams, VariationalParams};

/// Newton steps per element in the `y` update.
pub const Y_NEWTON_STEPS: usize = 5;

/// Log-likelihood of one observation as a function of its link value and
/// its first two derivatives.
#[inline]
fn data_terms(kind: ModalityType, x: f64, trials: u32, y: f64) -> (f64, f64, f64) {
    match kind {
        ModalityType::Continuous => (0.0, 0.0, 0.0),
        ModalityType::Count => {
            let e = y.exp();
            (x * y - e, x - e, -e)
        }
        ModalityType::Binomial => {
            let n = trials as f64;
            let pr = logistic(y);
            (x * y - n * crate::family::softplus(y), x - n * pr, -n * pr * (1.0 - pr))
        }
    }
}

/// Laplace update of one latent link value.
///
/// Maximizes `l(y) = log p(x | y) - (y - mu)^2 / (2 lambda)` by damped Newton
/// from `start` and returns the mode together with `-1 / l''(mode)`.
/// `lambda` may be infinite (flat prior).
pub fn laplace_update(
    kind: ModalityType,
    x: f64,
    trials: u32,
    mu: f64,
    lambda: f64,
    start: f64,
    max_steps: usize,
) -> (f64, f64) {
    let prec = 1.0 / lambda;
    // objective with its first two derivatives, one transcendental call each
    let eval = |y: f64| {
        let (l, g, h) = data_terms(kind, x, trials, y);
        let r = y - mu;
        if prec > 0.0 {
            (l - 0.5 * r * r * prec, g - r * prec, h - prec)
        } else {
            (l, g, h)
        }
    };
    let mut y = start;
    let (mut cur, mut grad, mut hess) = eval(y);
    for _ in 0..max_steps {
        if !(hess < 0.0) {
            break;
        }
        let step = -grad / hess;
        if step.abs() <= 1e-8 * (1.0 + y.abs()) {
            // inside the quadratic basin: take the last step without a search
            let (val, _, h) = eval(y + step);
            if val.is_finite() && val >= cur {
                y += step;
                hess = h;
            }
            break;
        }
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand = y + t * step;
            let (val, g, h) = eval(cand);
            if val.is_finite() && val >= cur {
                y = cand;
                (cur, grad, hess) = (val, g, h);
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    (y, -1.0 / hess)
}

/// Laplace update of every `(xi, s2y)` pair.
///
/// The proposed pair is accepted only if it does not lower that element's
/// ELBO contribution; otherwise it is pulled back toward the current pair
/// by halving, and the current pair is kept if no candidate improves.
pub fn estep_y(theta: &ModelParams, phi: &mut VariationalParams, ds: &Dataset) -> Result<()> {
    let prep = Prepared::new(ds);
    estep_y_prepared(&prep, ds, theta, phi);
    Ok(())
}

pub(crate) fn estep_y_prepared(prep: &Prepared, ds: &Dataset, theta: &ModelParams, phi: &mut VariationalParams) {
    let st = Stacked::of(theta);
    let layout = &prep.layout;
    for (s, sv) in phi.studies.iter_mut().enumerate() {
        if sv.xi.iter().all(Option::is_none) {
            continue;
        }
        let mu = linear_mean(prep, ds, theta, &st, sv, s, Omit::Nothing);
        let lam = &st.lambda[s];
        for m in 0..layout.num_modalities() {
            let kind = layout.types[m];
            let (Some(xi), Some(s2y)) = (sv.xi[m].as_mut(), sv.s2y[m].as_mut()) else {
                continue;
            };
            let off = layout.start[m];
            let n = xi.nrows();
            let pm = layout.p[m];
            // column-major storage: parallelize over columns (variables)
            xi.as_mut_slice()
                .par_chunks_mut(n)
                .zip(s2y.as_mut_slice().par_chunks_mut(n))
                .enumerate()
                .for_each(|(j, (xcol, vcol))| {
                    let col = off + j;
                    let trials = prep.trials[col];
                    let lambda = lam[col];
                    for i in 0..n {
                        let x = prep.x[s][(i, col)];
                        let mu_ij = mu[(i, col)];
                        let (old_xi, old_s2) = (xcol[i], vcol[i]);
                        let (new_xi, new_s2) =
                            laplace_update(kind, x, trials, mu_ij, lambda, old_xi, Y_NEWTON_STEPS);
                        let base = y_objective(kind, x, trials, old_xi, old_s2, mu_ij, lambda);
                        let mut t = 1.0;
                        for _ in 0..4 {
                            let cx = old_xi + t * (new_xi - old_xi);
                            let cs = old_s2 + t * (new_s2 - old_s2);
                            let val = y_objective(kind, x, trials, cx, cs, mu_ij, lambda);
                            if val.is_finite() && (val >= base || !base.is_finite()) {
                                xcol[i] = cx;
                                vcol[i] = cs;
                                break;
                            }
                            t *= 0.5;
                        }
                    }
                });
            debug_assert_eq!(xi.ncols(), pm);
        }
    }
}

/// Closed-form update of the study-shared factor posteriors.
///
/// `Sigma_si = (I + A' Lambda_s^-1 A)^-1`, `m_si = Sigma_si A' Lambda_s^-1 r_si`
/// with `r_si` the working residual excluding the shared-factor term.
pub fn estep_f(theta: &ModelParams, phi: &mut VariationalParams, ds: &Dataset) -> Result<()> {
    let prep = Prepared::new(ds);
    estep_f_prepared(&prep, ds, theta, phi)
}

pub(crate) fn estep_f_prepared(prep: &Prepared, ds: &Dataset, theta: &ModelParams, phi: &mut VariationalParams) -> Result<()> {
    if theta.q == 0 {
        return Ok(());
    }
    let st = Stacked::of(theta);
    phi.studies
        .par_iter_mut()
        .enumerate()
        .try_for_each(|(s, sv)| -> Result<()> {
            let resid = working_response(prep, sv, s) - linear_mean(prep, ds, theta, &st, sv, s, Omit::Shared);
            let (cov, mean) = gaussian_block(&st.a, &st.lambda[s], &resid)?;
            sv.mean_f = mean;
            sv.cov_f = vec![cov; sv.n()];
            Ok(())
        })
}

/// Closed-form update of the study-specific factor posteriors.
pub fn estep_h(theta: &ModelParams, phi: &mut VariationalParams, ds: &Dataset) -> Result<()> {
    let prep = Prepared::new(ds);
    estep_h_prepared(&prep, ds, theta, phi)
}

pub(crate) fn estep_h_prepared(prep: &Prepared, ds: &Dataset, theta: &ModelParams, phi: &mut VariationalParams) -> Result<()> {
    let st = Stacked::of(theta);
    phi.studies
        .par_iter_mut()
        .enumerate()
        .try_for_each(|(s, sv)| -> Result<()> {
            if theta.qs[s] == 0 {
                return Ok(());
            }
            let resid = working_response(prep, sv, s) - linear_mean(prep, ds, theta, &st, sv, s, Omit::Specific);
            let (cov, mean) = gaussian_block(&st.b[s], &st.lambda[s], &resid)?;
            sv.mean_h = mean;
            sv.cov_h = vec![cov; sv.n()];
            Ok(())
        })
}

/// Posterior of `u ~ N(0, I)` observed through `r = L u + e`, `e ~ N(0, diag(lam))`,
/// for every row of `resid`: returns the shared covariance and the means.
fn gaussian_block(loadings: &DMatrix<f64>, lam: &DVector<f64>, resid: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = loadings.ncols();
    let inv_lam = lam.map(|l| 1.0 / l);
    let scaled = scale_rows(loadings, &inv_lam);
    let prec = DMatrix::identity(k, k) + loadings.transpose() * &scaled;
    let (cov, _) = spd_inverse(&prec)?;
    let mean = resid * scaled * &cov;
    Ok((cov, mean))
}

/// Closed-form update of the modality-shared factor posteriors.
///
/// Modalities with `sigma2 == 0` keep `v` as a point mass at zero.
pub fn estep_v(theta: &ModelParams, phi: &mut VariationalParams, ds: &Dataset) -> Result<()> {
    let prep = Prepared::new(ds);
    estep_v_prepared(&prep, ds, theta, phi);
    Ok(())
}

pub(crate) fn estep_v_prepared(prep: &Prepared, ds: &Dataset, theta: &ModelParams, phi: &mut VariationalParams) {
    let st = Stacked::of(theta);
    let layout = &prep.layout;
    phi.studies.par_iter_mut().enumerate().for_each(|(s, sv)| {
        let resid = working_response(prep, sv, s) - linear_mean(prep, ds, theta, &st, sv, s, Omit::ModalityShared);
        let lam = &st.lambda[s];
        for m in 0..layout.num_modalities() {
            let s2 = theta.sigma2[(s, m)];
            if s2 <= 0.0 {
                sv.mean_v.column_mut(m).fill(0.0);
                sv.var_v.column_mut(m).fill(0.0);
                continue;
            }
            let (off, pm) = (layout.start[m], layout.p[m]);
            let inv_lam = lam.rows(off, pm).map(|l| 1.0 / l);
            let var = 1.0 / (1.0 / s2 + inv_lam.sum());
            let w = resid.columns(off, pm) * inv_lam * var;
            sv.mean_v.column_mut(m).copy_from(&w);
            sv.var_v.column_mut(m).fill(var);
        }
    });
    // keep stored values consistent with point-mass modalities
    for (s, sv) in phi.studies.iter_mut().enumerate() {
        let (w, v) = effective_v(theta, sv, s);
        sv.mean_v = w;
        sv.var_v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ModalityType::*;

    /// Maximizer of a unimodal function on [lo, hi] by grid then golden section.
    fn golden_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
        let grid = 2000;
        let step = (hi - lo) / grid as f64;
        let best = (0..=grid)
            .map(|k| lo + k as f64 * step)
            .max_by(|a, b| f(*a).total_cmp(&f(*b)))
            .unwrap();
        let (mut a, mut b) = (best - step, best + step);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) > f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn flat_prior_count_mode_is_log_x() {
        let lambda = f64::INFINITY;
        let oracle = golden_max(|y| y - y.exp(), -5.0, 5.0);
        let (xi, s2) = laplace_update(Count, 1.0, 1, 0.0, lambda, 0.3, Y_NEWTON_STEPS);
        assert_abs_diff_eq!(xi, oracle, epsilon = 1e-6);
        assert_abs_diff_eq!(xi, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s2, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn zero_count_mode_is_the_omega_constant() {
        // stationarity: -e^y - y = 0, root of y = -e^y
        let oracle = {
            let (mut lo, mut hi) = (-1.0f64, 0.0f64);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if -mid.exp() - mid > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let (xi, s2) = laplace_update(Count, 0.0, 1, 0.0, 1.0, 0.0, Y_NEWTON_STEPS);
        assert_abs_diff_eq!(xi, oracle, epsilon = 1e-10);
        assert_abs_diff_eq!(xi, -0.567_143_290_409_783_8, epsilon = 1e-10);
        assert_abs_diff_eq!(s2, 1.0 / (xi.exp() + 1.0), epsilon = 1e-12);
    }

    #[test]
    fn bernoulli_modes_are_symmetric() {
        let (a, sa) = laplace_update(Binomial, 0.0, 1, 0.0, 1.0, 0.0, 20);
        let (b, sb) = laplace_update(Binomial, 1.0, 1, 0.0, 1.0, 0.0, 20);
        assert!(a < 0.0);
        assert_abs_diff_eq!(a, -b, epsilon = 1e-12);
        assert_abs_diff_eq!(sa, sb, epsilon = 1e-12);
        let oracle = golden_max(|y| -crate::family::softplus(y) - 0.5 * y * y, -3.0, 3.0);
        assert_abs_diff_eq!(a, oracle, epsilon = 1e-6);
    }

    #[test]
    fn laplace_survives_extreme_inputs() {
        let (xi, s2) = laplace_update(Count, 2.0e7, 1, -5.0, 0.5, 0.0, Y_NEWTON_STEPS);
        assert!(xi.is_finite() && s2 > 0.0);
        let (xi, s2) = laplace_update(Count, 0.0, 1, 25.0, 1e-3, 25.0, Y_NEWTON_STEPS);
        assert!(xi.is_finite() && s2 > 0.0);
    }
}
