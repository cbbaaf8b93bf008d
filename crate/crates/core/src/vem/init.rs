//! Deterministic starting point for the variational EM iterations.
//!
//! 1. Map observations to the link scale (identity, `log(1 + x)`, or the
//!    empirical logit with a 0.5 continuity correction).
//! 2. Pooled per-variable least squares on `Z` gives `beta`.
//! 3. The SVD of the pooled, column-centered residual gives `A` and `m`.
//! 4. A per-study SVD of what remains gives `B_s` and `o`.
//! 5. Residual mean squares (floored) give `lambda`.
//!
//! With [`InitMethod::Pooled`] (the default) `w = 0` and `sigma2` is small.
//! [`InitMethod::Structured`] differs in three ways:
//! - scores come from the residual with its within-modality row means
//!   removed, since the modality effect loads equally on every variable, and
//!   loadings are regressed on the uncentered residual;
//! - step 3 starts from directions common to every study, and fills any
//!   remaining columns only after each study's own directions are removed;
//! - the row means of what is left give `w`, and their variance less its
//!   noise share gives `sigma2`.

use nalgebra::{DMatrix, DVector, QR};

use super::work::{Layout, Prepared};
use super::{FitConfig, InitMethod};
use crate::error::Result;
use crate::linalg::{spd_solve, thin_svd};
use crate::model::{split_rows, Dataset, ModalityType, ModelParams, StudyVariational, VariationalParams};

pub const INIT_LAMBDA_FLOOR: f64 = 1e-4;
pub const INIT_SIGMA2: f64 = 1e-2;

fn link_scale(prep: &Prepared, s: usize) -> DMatrix<f64> {
    let layout = &prep.layout;
    let x = &prep.x[s];
    DMatrix::from_fn(x.nrows(), layout.total, |i, j| {
        let v = x[(i, j)];
        match layout.types[layout.col_modality[j]] {
            ModalityType::Continuous => v,
            ModalityType::Count => v.ln_1p(),
            ModalityType::Binomial => {
                let n = prep.trials[j] as f64;
                let pr = (v + 0.5) / (n + 1.0);
                (pr / (1.0 - pr)).ln()
            }
        }
    })
}

/// Top-`k` scores (scaled to unit variance) and loadings of `r`.
fn factor_split(r: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, p) = r.shape();
    if k == 0 {
        return (DMatrix::zeros(n, 0), DMatrix::zeros(p, 0));
    }
    let svd = thin_svd(r);
    let k_avail = svd.s.len().min(k);
    let root_n = (n as f64).sqrt();
    let mut scores = DMatrix::zeros(n, k);
    let mut loadings = DMatrix::zeros(p, k);
    for c in 0..k_avail {
        scores.column_mut(c).copy_from(&(svd.u.column(c) * root_n));
        loadings.column_mut(c).copy_from(&(svd.v.column(c) * (svd.s[c] / root_n)));
    }
    (scores, loadings)
}

/// Subtract each row's mean within every modality; returns the `n x M` means.
fn remove_row_means(r: &mut DMatrix<f64>, layout: &Layout) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(r.nrows(), layout.num_modalities());
    for (m, (&o, &pm)) in layout.start.iter().zip(&layout.p).enumerate() {
        for i in 0..r.nrows() {
            let mean = r.view((i, o), (1, pm)).mean();
            w[(i, m)] = mean;
            r.view_mut((i, o), (1, pm)).add_scalar_mut(-mean);
        }
    }
    w
}

/// [`factor_split`], optionally with scores taken from the within-modality
/// row-centered matrix, so they exclude the modality effects, and loadings
/// regressed on the uncentered one, so they keep their own mean component.
fn split_around_effects(r: &DMatrix<f64>, k: usize, layout: &Layout, effects: bool) -> (DMatrix<f64>, DMatrix<f64>) {
    if !effects {
        return factor_split(r, k);
    }
    let mut centered = r.clone();
    remove_row_means(&mut centered, layout);
    let (scores, _) = factor_split(&centered, k);
    let loadings = r.transpose() * &scores / r.nrows() as f64;
    (scores, loadings)
}

/// Shared scores and loadings for the structured start.
///
/// A direction carried by every study lies in each study's leading
/// `q + q_s` right singular subspace, so the average of the study projectors
/// has eigenvalue near 1 there and near `1/S` on directions seen by one study
/// only. Directions above the midpoint form the shared basis. Any further
/// columns come from what remains after each study's own leading directions
/// are removed, so they cannot hold study-specific signal either.
fn structured_shared(
    r: &DMatrix<f64>,
    sizes: &[usize],
    q: usize,
    qs: &[usize],
    layout: &Layout,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, p) = r.shape();
    let ns = sizes.len();
    if q == 0 || ns < 2 {
        return split_around_effects(r, q, layout, true);
    }
    let mut centered = r.clone();
    remove_row_means(&mut centered, layout);
    // link-scale noise levels differ widely between types; unscaled, every
    // study's leading noise directions sit on the same noisy variables
    let mut scaled = centered.clone();
    for mut c in scaled.column_iter_mut() {
        let sd = (c.norm_squared() / n as f64).sqrt();
        if sd > 0.0 {
            c /= sd;
        }
    }
    let mut starts = Vec::with_capacity(ns);
    let mut row = 0;
    for &m in sizes {
        starts.push(row);
        row += m;
    }
    let block = |s: usize| scaled.rows(starts[s], sizes[s]).into_owned();

    let mut leading = Vec::with_capacity(ns);
    for s in 0..ns {
        let svd = thin_svd(&block(s));
        let k = (q + qs[s]).min(svd.s.len());
        leading.push(svd.v.columns(0, k).into_owned());
    }
    let total: usize = leading.iter().map(|v| v.ncols()).sum();
    let mut stacked = DMatrix::zeros(p, total);
    let mut col = 0;
    for v in &leading {
        stacked.columns_mut(col, v.ncols()).copy_from(v);
        col += v.ncols();
    }
    stacked /= (ns as f64).sqrt();
    let avg = thin_svd(&stacked);
    let cut = 0.5 * (1.0 + 1.0 / ns as f64);
    let common = avg.s.iter().take(q).take_while(|&&d| d * d >= cut).count();

    let mut basis = DMatrix::zeros(p, q);
    basis.columns_mut(0, common).copy_from(&avg.u.columns(0, common));
    if common < q {
        let g = avg.u.columns(0, common).into_owned();
        let mut rest = DMatrix::zeros(n, p);
        for s in 0..ns {
            let b = block(s);
            let e = &b - &b * &g * g.transpose();
            let svd = thin_svd(&e);
            let w = svd.v.columns(0, qs[s].min(svd.s.len())).into_owned();
            rest.rows_mut(starts[s], sizes[s]).copy_from(&(&e - &e * &w * w.transpose()));
        }
        let svd = thin_svd(&rest);
        let k = (q - common).min(svd.s.len());
        basis.columns_mut(common, k).copy_from(&svd.v.columns(0, k));
    }

    // Gram-Schmidt order keeps the shared columns first
    let scores = QR::new(&scaled * &basis).q() * (n as f64).sqrt();
    let loadings = r.transpose() * &scores / n as f64;
    (scores, loadings)
}

pub fn init(ds: &Dataset, config: &FitConfig) -> Result<(ModelParams, VariationalParams)> {
    let prep = Prepared::new(ds);
    init_prepared(&prep, ds, config)
}

pub(crate) fn init_prepared(prep: &Prepared, ds: &Dataset, config: &FitConfig) -> Result<(ModelParams, VariationalParams)> {
    let layout: &Layout = &prep.layout;
    let ns = ds.num_studies();
    let nm = layout.num_modalities();
    let p = layout.total;
    let d = ds.covariate_dim();
    let q = config.q;
    let sizes = ds.sample_sizes();

    let link: Vec<DMatrix<f64>> = (0..ns).map(|s| link_scale(prep, s)).collect();
    let centered_y: Vec<DMatrix<f64>> = (0..ns).map(|s| &link[s] - &prep.tau[s]).collect();

    let mut ztz = DMatrix::zeros(d, d);
    let mut zty = DMatrix::zeros(d, p);
    for (s, st) in ds.studies.iter().enumerate() {
        ztz += st.z.transpose() * &st.z;
        zty += st.z.transpose() * &centered_y[s];
    }
    let beta = spd_solve(&ztz, &zty)?.transpose();

    let total_n: usize = sizes.iter().sum();
    let mut pooled = DMatrix::zeros(total_n, p);
    let mut row = 0;
    for (s, st) in ds.studies.iter().enumerate() {
        let r = &centered_y[s] - &st.z * beta.transpose();
        pooled.rows_mut(row, sizes[s]).copy_from(&r);
        row += sizes[s];
    }
    let col_means = pooled.row_mean();
    for mut r in pooled.row_iter_mut() {
        r -= &col_means;
    }
    let structured = config.init_method == InitMethod::Structured;
    let (scores_f, a) = if structured {
        structured_shared(&pooled, &sizes, q, &config.qs, layout)
    } else {
        factor_split(&pooled, q)
    };
    let residual_f = &pooled - &scores_f * a.transpose();

    let mut sigma2 = DMatrix::zeros(ns, nm);
    let mut b = Vec::with_capacity(ns);
    let mut studies = Vec::with_capacity(ns);
    let mut lambda = Vec::with_capacity(ns);
    let mut row = 0;
    for s in 0..ns {
        let n = sizes[s];
        let qs = config.qs[s];
        let r = residual_f.rows(row, n).into_owned();
        let (scores_h, bs) = split_around_effects(&r, qs, layout, structured);
        let mut rem = &r - &scores_h * bs.transpose();
        let ws = if structured {
            remove_row_means(&mut rem, layout)
        } else {
            DMatrix::zeros(n, nm)
        };
        let lam = DVector::from_fn(p, |j, _| (rem.column(j).norm_squared() / n as f64).max(INIT_LAMBDA_FLOOR));
        lambda.push(
            layout
                .start
                .iter()
                .zip(&layout.p)
                .map(|(&o, &pm)| lam.rows(o, pm).into_owned())
                .collect::<Vec<_>>(),
        );
        b.push(split_rows(&bs, &layout.p));

        let mut var_v = DMatrix::from_element(n, nm, INIT_SIGMA2);
        sigma2.row_mut(s).fill(INIT_SIGMA2);
        if structured {
            for m in 0..nm {
                let (o, pm) = (layout.start[m], layout.p[m]);
                let noise = lam.rows(o, pm).mean() / pm as f64;
                let s2 = (ws.column(m).norm_squared() / n as f64 - noise).max(INIT_SIGMA2);
                sigma2[(s, m)] = s2;
                var_v.column_mut(m).fill(1.0 / (1.0 / s2 + 1.0 / noise));
            }
        }

        let xi: Vec<Option<DMatrix<f64>>> = (0..nm)
            .map(|m| {
                (!layout.types[m].is_gaussian())
                    .then(|| link[s].columns(layout.start[m], layout.p[m]).into_owned())
            })
            .collect();
        let s2y = xi
            .iter()
            .map(|x| x.as_ref().map(|x| DMatrix::from_element(x.nrows(), x.ncols(), 1.0)))
            .collect();
        studies.push(StudyVariational {
            xi,
            s2y,
            mean_f: scores_f.rows(row, n).into_owned(),
            cov_f: vec![DMatrix::identity(q, q); n],
            mean_h: scores_h,
            cov_h: vec![DMatrix::identity(qs, qs); n],
            mean_v: ws,
            var_v,
        });
        row += n;
    }

    let theta = ModelParams {
        beta: split_rows(&beta, &layout.p),
        a: split_rows(&a, &layout.p),
        b,
        lambda,
        sigma2,
        q,
        qs: config.qs.clone(),
    };
    Ok((theta, VariationalParams { studies }))
}
