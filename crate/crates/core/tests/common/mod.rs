#![allow(dead_code)]

use mmgfm::model::{Dataset, ModalityType, ModelParams, VariationalParams};
use mmgfm::vem::{elbo, estep_f, estep_h, estep_v, estep_y, init, FitConfig, LAMBDA_FLOOR};
use mmgfm::simulate::{gen_scenario, GroundTruth, ScenarioSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Size and family constraints of a random test instance.
#[derive(Clone, Copy)]
pub struct Limits {
    pub max_studies: usize,
    pub max_modalities: usize,
    pub n: (usize, usize),
    pub p: (usize, usize),
    pub continuous_only: bool,
    pub allow_sigma2: bool,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_studies: 2,
            max_modalities: 3,
            n: (20, 40),
            p: (5, 20),
            continuous_only: false,
            allow_sigma2: true,
        }
    }
}

pub fn random_spec(seed: u64, lim: Limits) -> ScenarioSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = rng.random_range(1..=lim.max_studies);
    let nm = rng.random_range(1..=lim.max_modalities);
    let n: Vec<usize> = (0..ns).map(|_| rng.random_range(lim.n.0..=lim.n.1)).collect();
    let p: Vec<usize> = (0..nm).map(|_| rng.random_range(lim.p.0..=lim.p.1)).collect();
    let types: Vec<ModalityType> = (0..nm)
        .map(|_| {
            if lim.continuous_only {
                ModalityType::Continuous
            } else {
                [ModalityType::Continuous, ModalityType::Count, ModalityType::Binomial][rng.random_range(0..3)]
            }
        })
        .collect();
    let trials = types
        .iter()
        .zip(&p)
        .map(|(t, &pm)| {
            if *t == ModalityType::Binomial {
                (0..pm).map(|_| rng.random_range(1..=4)).collect()
            } else {
                Vec::new()
            }
        })
        .collect();
    let pmin = *p.iter().min().unwrap();
    let q = rng.random_range(1..=2.min(pmin - 1));
    let qs: Vec<usize> = (0..ns).map(|_| rng.random_range(0..=2.min(pmin - q))).collect();
    let sigma2 = if lim.allow_sigma2 && rng.random_bool(0.5) { 0.5 } else { 0.0 };
    ScenarioSpec {
        name: format!("random{seed}"),
        n,
        d: rng.random_range(1..=3),
        q,
        qs,
        types,
        trials,
        rho_m: vec![1.0; nm],
        rho_z: 0.5,
        sigma2_v: DMatrix::from_element(ns, nm, sigma2),
        eps_var: 1.0,
        param_seed: seed,
        seed: seed.wrapping_add(1),
        p,
    }
}

pub fn random_instance(seed: u64, lim: Limits) -> (ScenarioSpec, Dataset, GroundTruth) {
    let spec = random_spec(seed, lim);
    let (ds, truth) = gen_scenario(&spec).expect("valid random spec");
    (spec, ds, truth)
}

/// Modality index of every stacked column.
pub fn column_modality(ds: &Dataset) -> Vec<usize> {
    ds.dims().iter().enumerate().flat_map(|(m, &p)| std::iter::repeat_n(m, p)).collect()
}

/// Link-scale working values: observations for continuous modalities and
/// the variational means for the others, with offsets removed.
pub fn working_values(ds: &Dataset, phi: &VariationalParams, s: usize) -> DMatrix<f64> {
    let st = &ds.studies[s];
    let n = st.n();
    let p: usize = ds.dims().iter().sum();
    let mut y = DMatrix::zeros(n, p);
    let mut off = 0;
    for (m, md) in st.modalities.iter().enumerate() {
        let block = match &phi.studies[s].xi[m] {
            Some(xi) => xi.clone(),
            None => md.x.clone(),
        };
        for i in 0..n {
            for j in 0..md.p() {
                y[(i, off + j)] = block[(i, j)] - md.offsets[i];
            }
        }
        off += md.p();
    }
    y
}

/// Marginal covariance of one unit of study `s` in the Gaussian model.
pub fn marginal_cov(theta: &ModelParams, s: usize, cols: &[usize]) -> DMatrix<f64> {
    let a = theta.stacked_a();
    let b = theta.stacked_b(s);
    let lam = theta.stacked_lambda(s);
    let mut c = &a * a.transpose() + &b * b.transpose();
    for i in 0..cols.len() {
        c[(i, i)] += lam[i];
        for j in 0..cols.len() {
            if cols[i] == cols[j] {
                c[(i, j)] += theta.sigma2[(s, cols[i])];
            }
        }
    }
    c
}

/// Exact log-likelihood of continuous-only data under `theta`.
pub fn gaussian_loglik(theta: &ModelParams, ds: &Dataset) -> f64 {
    let cols = column_modality(ds);
    let beta = theta.stacked_beta();
    let mut total = 0.0;
    for (s, st) in ds.studies.iter().enumerate() {
        let c = marginal_cov(theta, s, &cols);
        let chol = c.clone().cholesky().expect("marginal covariance is SPD");
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let p = c.nrows() as f64;
        let mut x = DMatrix::zeros(st.n(), cols.len());
        let mut off = 0;
        for md in &st.modalities {
            for i in 0..st.n() {
                for j in 0..md.p() {
                    x[(i, off + j)] = md.x[(i, j)] - md.offsets[i];
                }
            }
            off += md.p();
        }
        let resid = x - &st.z * beta.transpose();
        for i in 0..st.n() {
            let r = resid.row(i).transpose();
            let sol = chol.solve(&r);
            total += -0.5 * (p * (2.0 * std::f64::consts::PI).ln() + logdet + r.dot(&sol));
        }
    }
    total
}

/// Exact log-likelihood of continuous-only data through the low-rank form
/// `C = Lambda + U U'`, `U = [A, B_s, sqrt(sigma2_sm) 1_m]`.
pub fn woodbury_loglik(theta: &ModelParams, ds: &Dataset) -> f64 {
    let cols = column_modality(ds);
    let beta = theta.stacked_beta();
    let nm = ds.num_modalities();
    let mut total = 0.0;
    for (s, st) in ds.studies.iter().enumerate() {
        let a = theta.stacked_a();
        let b = theta.stacked_b(s);
        let lam = theta.stacked_lambda(s);
        let p = lam.len();
        let k = a.ncols() + b.ncols() + nm;
        let mut u = DMatrix::zeros(p, k);
        u.columns_mut(0, a.ncols()).copy_from(&a);
        u.columns_mut(a.ncols(), b.ncols()).copy_from(&b);
        for j in 0..p {
            u[(j, a.ncols() + b.ncols() + cols[j])] = theta.sigma2[(s, cols[j])].sqrt();
        }
        let mut scaled = u.clone();
        for j in 0..p {
            scaled.row_mut(j).scale_mut(1.0 / lam[j]);
        }
        let core = DMatrix::identity(k, k) + u.transpose() * &scaled;
        let chol = core.cholesky().expect("capacitance matrix is SPD");
        let logdet = lam.iter().map(|l| l.ln()).sum::<f64>() + 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let mut x = DMatrix::zeros(st.n(), p);
        let mut off = 0;
        for md in &st.modalities {
            for i in 0..st.n() {
                for j in 0..md.p() {
                    x[(i, off + j)] = md.x[(i, j)] - md.offsets[i];
                }
            }
            off += md.p();
        }
        let resid = x - &st.z * beta.transpose();
        for i in 0..st.n() {
            let r = resid.row(i).transpose();
            let proj = scaled.transpose() * &r;
            let quad = r.iter().zip(lam.iter()).map(|(v, l)| v * v / l).sum::<f64>() - proj.dot(&chol.solve(&proj));
            total += -0.5 * (p as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
        }
    }
    total
}

/// Max-norm distance between two matrices.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    (a - b).abs().max()
}

pub fn config_for(theta: &ModelParams) -> FitConfig {
    FitConfig::new(theta.q, theta.qs.clone())
}

/// Variational state from `init`, then one pass of every E-step block at `theta`.
pub fn settled_phi(theta: &ModelParams, ds: &Dataset) -> VariationalParams {
    let (_, mut phi) = init(ds, &config_for(theta)).unwrap();
    estep_y(theta, &mut phi, ds).unwrap();
    estep_f(theta, &mut phi, ds).unwrap();
    estep_h(theta, &mut phi, ds).unwrap();
    estep_v(theta, &mut phi, ds).unwrap();
    phi
}


/// Dense conditional posterior of `u ~ N(0, prior I)` given `r = L u + e`, `e ~ N(0, diag(lam))`.
pub fn dense_posterior(l: &DMatrix<f64>, prior: f64, lam: &DVector<f64>, r: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let k = l.ncols();
    let c = l * l.transpose() * prior + DMatrix::from_diagonal(lam);
    let cinv = c.try_inverse().unwrap();
    let gain = l.transpose() * prior * &cinv;
    let mean = &gain * r;
    let cov = DMatrix::identity(k, k) * prior - &gain * l * prior;
    (mean, cov)
}

pub fn row_diff(m: &DMatrix<f64>, i: usize, v: &DVector<f64>) -> f64 {
    m.row(i).transpose().iter().zip(v.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

pub fn expanded_v(ds: &Dataset, w: &DMatrix<f64>) -> DMatrix<f64> {
    let cols = column_modality(ds);
    DMatrix::from_fn(w.nrows(), cols.len(), |i, j| w[(i, cols[j])])
}

/// Residual of the working values after removing everything but one block.
pub fn residual(theta: &ModelParams, ds: &Dataset, phi: &VariationalParams, s: usize, keep: &str) -> DMatrix<f64> {
    let sv = &phi.studies[s];
    let mut r = working_values(ds, phi, s) - &ds.studies[s].z * theta.stacked_beta().transpose();
    if keep != "f" {
        r -= &sv.mean_f * theta.stacked_a().transpose();
    }
    if keep != "h" {
        r -= &sv.mean_h * theta.stacked_b(s).transpose();
    }
    if keep != "v" {
        let mut w = sv.mean_v.clone();
        for m in 0..w.ncols() {
            if theta.sigma2[(s, m)] == 0.0 {
                w.column_mut(m).fill(0.0);
            }
        }
        r -= expanded_v(ds, &w);
    }
    r
}

/// Largest deviation of the f, h and v block updates from dense Gaussian
/// conditional posteriors, each computed from the state before that block.
pub fn estep_oracle_error(theta: &ModelParams, ds: &Dataset) -> f64 {
    let phi0 = settled_phi(theta, ds);
    let mut phi = phi0.clone();
    let mut worst: f64 = 0.0;
    estep_f(theta, &mut phi, ds).unwrap();
    for s in 0..ds.num_studies() {
        let r = residual(theta, ds, &phi0, s, "f");
        let lam = theta.stacked_lambda(s);
        for i in 0..ds.studies[s].n() {
            let (mean, cov) = dense_posterior(&theta.stacked_a(), 1.0, &lam, &r.row(i).transpose());
            worst = worst.max(row_diff(&phi.studies[s].mean_f, i, &mean));
            worst = worst.max(max_abs_diff(&phi.studies[s].cov_f[i], &cov));
        }
    }
    let before_h = phi.clone();
    estep_h(theta, &mut phi, ds).unwrap();
    for s in 0..ds.num_studies() {
        if theta.qs[s] == 0 {
            continue;
        }
        let r = residual(theta, ds, &before_h, s, "h");
        let lam = theta.stacked_lambda(s);
        for i in 0..ds.studies[s].n() {
            let (mean, cov) = dense_posterior(&theta.stacked_b(s), 1.0, &lam, &r.row(i).transpose());
            worst = worst.max(row_diff(&phi.studies[s].mean_h, i, &mean));
            worst = worst.max(max_abs_diff(&phi.studies[s].cov_h[i], &cov));
        }
    }
    let before_v = phi.clone();
    estep_v(theta, &mut phi, ds).unwrap();
    let cols = column_modality(ds);
    for s in 0..ds.num_studies() {
        let r = residual(theta, ds, &before_v, s, "v");
        let lam = theta.stacked_lambda(s);
        for m in 0..ds.num_modalities() {
            let s2 = theta.sigma2[(s, m)];
            let idx: Vec<usize> = (0..cols.len()).filter(|&j| cols[j] == m).collect();
            for i in 0..ds.studies[s].n() {
                let (w, var) = (phi.studies[s].mean_v[(i, m)], phi.studies[s].var_v[(i, m)]);
                if s2 == 0.0 {
                    worst = worst.max(w.abs()).max(var.abs());
                    continue;
                }
                let ones = DMatrix::from_element(idx.len(), 1, 1.0);
                let lam_m = DVector::from_iterator(idx.len(), idx.iter().map(|&j| lam[j]));
                let r_m = DVector::from_iterator(idx.len(), idx.iter().map(|&j| r[(i, j)]));
                let (mean, cov) = dense_posterior(&ones, s2, &lam_m, &r_m);
                worst = worst.max((w - mean[0]).abs()).max((var - cov[(0, 0)]).abs());
            }
        }
    }
    worst
}

/// Central-difference derivative of the ELBO along one coordinate.
pub fn fd<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}


/// Largest central-difference ELBO gradient over the M-step blocks.
pub fn max_parameter_gradient(theta: &ModelParams, phi: &VariationalParams, ds: &Dataset) -> f64 {
    let h = 1e-5;
    let f = |t: &ModelParams| elbo(t, phi, ds).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = |apply: &dyn Fn(&mut ModelParams, f64), x0: f64| {
        let g = fd(
            |x| {
                let mut t = theta.clone();
                apply(&mut t, x);
                f(&t)
            },
            x0,
            h,
        );
        worst = worst.max(g.abs());
    };
    for m in 0..theta.num_modalities() {
        for (r, c) in (0..theta.beta[m].nrows()).flat_map(|r| (0..theta.beta[m].ncols()).map(move |c| (r, c))) {
            probe(&|t, x| t.beta[m][(r, c)] = x, theta.beta[m][(r, c)]);
        }
        for (r, c) in (0..theta.a[m].nrows()).flat_map(|r| (0..theta.q).map(move |c| (r, c))) {
            probe(&|t, x| t.a[m][(r, c)] = x, theta.a[m][(r, c)]);
        }
        for s in 0..theta.num_studies() {
            for (r, c) in (0..theta.b[s][m].nrows()).flat_map(|r| (0..theta.qs[s]).map(move |c| (r, c))) {
                probe(&|t, x| t.b[s][m][(r, c)] = x, theta.b[s][m][(r, c)]);
            }
            for j in 0..theta.lambda[s][m].len() {
                let l = theta.lambda[s][m][j];
                if l > LAMBDA_FLOOR * 10.0 {
                    probe(&|t, x| t.lambda[s][m][j] = x, l);
                }
            }
            let s2 = theta.sigma2[(s, m)];
            if s2 > 1e-3 {
                probe(&|t, x| t.sigma2[(s, m)] = x, s2);
            }
        }
    }
    worst
}

