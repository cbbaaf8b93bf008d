//! Per-study working matrices shared by the E-step, M-step and ELBO.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::family::{ln_choose, ln_factorial};
use crate::model::{Dataset, ModalityType, ModelParams, StudyVariational};

/// Column layout of the modality-concatenated `n_s x p` matrices.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub p: Vec<usize>,
    pub start: Vec<usize>,
    pub total: usize,
    pub types: Vec<ModalityType>,
    /// Modality index of every concatenated column.
    pub col_modality: Vec<usize>,
}

impl Layout {
    pub fn of(ds: &Dataset) -> Self {
        let p = ds.dims();
        let mut start = Vec::with_capacity(p.len());
        let mut col_modality = Vec::new();
        let mut off = 0;
        for (m, &pm) in p.iter().enumerate() {
            start.push(off);
            col_modality.extend(std::iter::repeat_n(m, pm));
            off += pm;
        }
        Layout {
            types: ds.types(),
            p,
            start,
            total: off,
            col_modality,
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.p.len()
    }
}

/// Dataset quantities that do not change during a fit.
pub(crate) struct Prepared {
    pub layout: Layout,
    /// Concatenated observations per study.
    pub x: Vec<DMatrix<f64>>,
    /// Offsets expanded to `n_s x p`.
    pub tau: Vec<DMatrix<f64>>,
    /// Trial counts per concatenated column (1 for non-binomial columns).
    pub trials: Vec<u32>,
    /// Parameter-free part of the log pmf of every non-Gaussian cell.
    pub cell_const: Vec<DMatrix<f64>>,
}

impl Prepared {
    pub fn new(ds: &Dataset) -> Self {
        let layout = Layout::of(ds);
        let mut trials = vec![1u32; layout.total];
        if let Some(first) = ds.studies.first() {
            for (m, md) in first.modalities.iter().enumerate() {
                for j in 0..md.p() {
                    trials[layout.start[m] + j] = md.trials_of(j);
                }
            }
        }
        let per_study: Vec<_> = ds
            .studies
            .par_iter()
            .map(|st| {
                let n = st.n();
                let mut x = DMatrix::zeros(n, layout.total);
                let mut tau = DMatrix::zeros(n, layout.total);
                let mut c = DMatrix::zeros(n, layout.total);
                for (m, md) in st.modalities.iter().enumerate() {
                    let off = layout.start[m];
                    x.columns_mut(off, md.p()).copy_from(&md.x);
                    for j in 0..md.p() {
                        tau.column_mut(off + j).copy_from(&md.offsets);
                        for i in 0..n {
                            let v = md.x[(i, j)];
                            c[(i, off + j)] = match md.kind {
                                ModalityType::Continuous => 0.0,
                                ModalityType::Count => -ln_factorial(v),
                                ModalityType::Binomial => ln_choose(md.trials_of(j), v),
                            };
                        }
                    }
                }
                (x, tau, c)
            })
            .collect();
        let mut x = Vec::new();
        let mut tau = Vec::new();
        let mut cell_const = Vec::new();
        for (a, b, c) in per_study {
            x.push(a);
            tau.push(b);
            cell_const.push(c);
        }
        Prepared {
            layout,
            x,
            tau,
            trials,
            cell_const,
        }
    }
}

/// Modality-shared factor means with point-mass modalities (`sigma2 == 0`) zeroed.
pub(crate) fn effective_v(theta: &ModelParams, sv: &StudyVariational, s: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut w = sv.mean_v.clone();
    let mut var = sv.var_v.clone();
    for m in 0..w.ncols() {
        if theta.sigma2[(s, m)] <= 0.0 {
            w.column_mut(m).fill(0.0);
            var.column_mut(m).fill(0.0);
        }
    }
    (w, var)
}

/// Expand an `n x M` per-modality matrix to `n x p` by repeating columns.
pub(crate) fn expand_modalities(v: &DMatrix<f64>, layout: &Layout) -> DMatrix<f64> {
    let n = v.nrows();
    DMatrix::from_fn(n, layout.total, |i, j| v[(i, layout.col_modality[j])])
}

/// Observed values for continuous columns, `xi` for the others.
pub(crate) fn working_response(prep: &Prepared, sv: &StudyVariational, s: usize) -> DMatrix<f64> {
    let mut y = prep.x[s].clone();
    for (m, xi) in sv.xi.iter().enumerate() {
        if let Some(xi) = xi {
            y.columns_mut(prep.layout.start[m], prep.layout.p[m]).copy_from(xi);
        }
    }
    y
}

/// Variational variances of `y`, zero for continuous columns.
pub(crate) fn y_variances(prep: &Prepared, sv: &StudyVariational) -> DMatrix<f64> {
    let n = sv.n();
    let mut out = DMatrix::zeros(n, prep.layout.total);
    for (m, s2) in sv.s2y.iter().enumerate() {
        if let Some(s2) = s2 {
            out.columns_mut(prep.layout.start[m], prep.layout.p[m]).copy_from(s2);
        }
    }
    out
}

/// Covariate part of the linear predictor plus offsets: `tau + Z beta'`.
pub(crate) fn covariate_part(prep: &Prepared, ds: &Dataset, beta: &DMatrix<f64>, s: usize) -> DMatrix<f64> {
    &prep.tau[s] + &ds.studies[s].z * beta.transpose()
}

/// Which latent component to leave out of [`linear_mean`].
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Omit {
    Nothing,
    Shared,
    Specific,
    ModalityShared,
}

/// Variational mean of the linear predictor (without `eps`), optionally
/// leaving out one latent component.
pub(crate) struct Stacked {
    pub beta: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: Vec<DMatrix<f64>>,
    pub lambda: Vec<DVector<f64>>,
}

impl Stacked {
    pub fn of(theta: &ModelParams) -> Self {
        Stacked {
            beta: theta.stacked_beta(),
            a: theta.stacked_a(),
            b: (0..theta.num_studies()).map(|s| theta.stacked_b(s)).collect(),
            lambda: (0..theta.num_studies()).map(|s| theta.stacked_lambda(s)).collect(),
        }
    }
}

pub(crate) fn linear_mean(
    prep: &Prepared,
    ds: &Dataset,
    theta: &ModelParams,
    st: &Stacked,
    sv: &StudyVariational,
    s: usize,
    omit: Omit,
) -> DMatrix<f64> {
    let mut mu = covariate_part(prep, ds, &st.beta, s);
    if omit != Omit::Shared && theta.q > 0 {
        mu += &sv.mean_f * st.a.transpose();
    }
    if omit != Omit::Specific && theta.qs[s] > 0 {
        mu += &sv.mean_h * st.b[s].transpose();
    }
    if omit != Omit::ModalityShared {
        let (w, _) = effective_v(theta, sv, s);
        mu += expand_modalities(&w, &prep.layout);
    }
    mu
}

/// Compensated (Neumaier) running sum.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Accum {
    sum: f64,
    comp: f64,
}

impl Accum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub(crate) fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = Accum::default();
    values.into_iter().for_each(|x| acc.add(x));
    acc.value()
}

/// Compensated sum in index order when `deterministic`, otherwise a parallel
/// reduction whose association order depends on scheduling.
pub(crate) fn reduce_sum(values: &[f64], deterministic: bool) -> f64 {
    if deterministic {
        compensated_sum(values.iter().copied())
    } else {
        values.par_iter().sum()
    }
}
