mod common;

use common::*;
use mmgfm::metrics::trace_stat;
use mmgfm::model::{Dataset, Modality, ModalityType, ModelParams, Study, StudyVariational, VariationalParams};
use mmgfm::vem::{elbo, estep_f, estep_h, estep_v, extract_factors, fit, init, mstep, FitConfig, InitMethod, LAMBDA_FLOOR};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn continuous(max_studies: usize) -> Limits {
    Limits {
        max_studies,
        continuous_only: true,
        ..Default::default()
    }
}

#[test]
fn elbo_of_a_single_standard_normal_point() {
    let ds = Dataset {
        studies: vec![Study {
            modalities: vec![Modality::new(DMatrix::zeros(1, 1), ModalityType::Continuous)],
            z: DMatrix::from_element(1, 1, 1.0),
        }],
    };
    let theta = ModelParams {
        beta: vec![DMatrix::zeros(1, 1)],
        a: vec![DMatrix::zeros(1, 0)],
        b: vec![vec![DMatrix::zeros(1, 0)]],
        lambda: vec![vec![DVector::from_element(1, 1.0)]],
        sigma2: DMatrix::zeros(1, 1),
        q: 0,
        qs: vec![0],
    };
    let phi = VariationalParams {
        studies: vec![StudyVariational {
            xi: vec![None],
            s2y: vec![None],
            mean_f: DMatrix::zeros(1, 0),
            cov_f: vec![DMatrix::zeros(0, 0)],
            mean_h: DMatrix::zeros(1, 0),
            cov_h: vec![DMatrix::zeros(0, 0)],
            mean_v: DMatrix::zeros(1, 1),
            var_v: DMatrix::zeros(1, 1),
        }],
    };
    let e = elbo(&theta, &phi, &ds).unwrap();
    assert!((e + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14, "{e}");
}

#[test]
fn elbo_equals_marginal_when_the_posterior_factorizes() {
    for seed in 0..10 {
        // a single study: the generator's shared and specific loadings are
        // orthogonal and the noise is isotropic, so f and h decouple
        let mut lim = continuous(1);
        lim.allow_sigma2 = false;
        let (_, ds, truth) = random_instance(seed, lim);
        let theta = &truth.theta0;
        let phi = settled_phi(theta, &ds);
        let e = elbo(theta, &phi, &ds).unwrap();
        let ll = gaussian_loglik(theta, &ds);
        assert!(((e - ll) / ll).abs() < 1e-6, "seed {seed}: elbo {e} vs marginal {ll}");
    }
}

#[test]
fn elbo_is_below_the_marginal_for_any_phi() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..15 {
        let (_, ds, truth) = random_instance(seed, continuous(2));
        let theta = &truth.theta0;
        let mut phi = settled_phi(theta, &ds);
        for sv in &mut phi.studies {
            sv.mean_f.iter_mut().for_each(|x| *x += rng.random_range(-1.0..1.0));
            sv.mean_h.iter_mut().for_each(|x| *x += rng.random_range(-1.0..1.0));
            sv.var_v.iter_mut().for_each(|x| *x *= rng.random_range(0.5..2.0));
        }
        let ll = gaussian_loglik(theta, &ds);
        assert!(elbo(theta, &phi, &ds).unwrap() <= ll + 1e-9 * ll.abs());
    }
}

#[test]
fn scalar_shared_factor_posterior() {
    let x = 1.7;
    let (z, beta) = (1.0, 0.4);
    let ds = Dataset {
        studies: vec![Study {
            modalities: vec![Modality::new(DMatrix::from_element(1, 1, x), ModalityType::Continuous)],
            z: DMatrix::from_element(1, 1, z),
        }],
    };
    let theta = ModelParams {
        beta: vec![DMatrix::from_element(1, 1, beta)],
        a: vec![DMatrix::from_element(1, 1, 1.0)],
        b: vec![vec![DMatrix::zeros(1, 0)]],
        lambda: vec![vec![DVector::from_element(1, 1.0)]],
        sigma2: DMatrix::zeros(1, 1),
        q: 1,
        qs: vec![0],
    };
    let (_, mut phi) = init(&ds, &config_for(&theta)).unwrap();
    estep_f(&theta, &mut phi, &ds).unwrap();
    assert!((phi.studies[0].cov_f[0][(0, 0)] - 0.5).abs() < 1e-14);
    assert!((phi.studies[0].mean_f[(0, 0)] - 0.5 * (x - z * beta)).abs() < 1e-14);
}

#[test]
fn estep_matches_dense_posterior_on_the_small_example() {
    // S=1, n=3, one continuous modality with p=4, q=2, qs=1
    let spec = mmgfm::ScenarioSpec {
        name: "tiny".into(),
        n: vec![3],
        p: vec![4],
        d: 1,
        q: 2,
        qs: vec![1],
        types: vec![ModalityType::Continuous],
        trials: vec![vec![]],
        rho_m: vec![1.0],
        rho_z: 0.5,
        sigma2_v: DMatrix::from_element(1, 1, 0.3),
        eps_var: 1.0,
        param_seed: 5,
        seed: 6,
    };
    let (ds, truth) = mmgfm::gen_scenario(&spec).unwrap();
    let theta = &truth.theta0;
    let mut phi = settled_phi(theta, &ds);
    let before = phi.clone();
    estep_f(theta, &mut phi, &ds).unwrap();
    let r = residual(theta, &ds, &before, 0, "f");
    for i in 0..3 {
        let (mean, cov) = dense_posterior(&theta.stacked_a(), 1.0, &theta.stacked_lambda(0), &r.row(i).transpose());
        assert!(row_diff(&phi.studies[0].mean_f, i, &mean) < 1e-8);
        assert!(max_abs_diff(&phi.studies[0].cov_f[i], &cov) < 1e-8);
    }
}

#[test]
fn estep_matches_dense_posterior_on_random_instances() {
    for seed in 0..10 {
        let (_, ds, truth) = random_instance(seed, Limits::default());
        let err = estep_oracle_error(&truth.theta0, &ds);
        assert!(err < 1e-8, "seed {seed}: {err:e}");
    }
}

#[test]
fn zero_variance_modality_factor_is_a_point_mass() {
    let mut lim = Limits::default();
    lim.allow_sigma2 = false;
    let (_, ds, truth) = random_instance(4, lim);
    let mut phi = settled_phi(&truth.theta0, &ds);
    estep_v(&truth.theta0, &mut phi, &ds).unwrap();
    for sv in &phi.studies {
        assert!(sv.mean_v.iter().all(|&x| x == 0.0) && sv.var_v.iter().all(|&x| x == 0.0));
    }
}

fn random_spd_perturbation(rng: &mut ChaCha8Rng, cov: &DMatrix<f64>, scale: f64) -> Option<DMatrix<f64>> {
    let k = cov.nrows();
    let e = DMatrix::from_fn(k, k, |_, _| rng.random_range(-scale..scale));
    let out = cov + (&e + e.transpose()) * 0.5;
    out.clone().cholesky().map(|_| out)
}

#[test]
fn each_block_update_beats_random_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let lim = Limits {
        n: (4, 8),
        p: (3, 8),
        ..Default::default()
    };
    let mut checked = 0;
    for seed in 0..40 {
        let (_, ds, truth) = random_instance(seed, lim);
        let total_p: usize = ds.dims().iter().sum();
        let total_n: usize = ds.sample_sizes().iter().sum();
        if total_p * total_n > 200 {
            continue;
        }
        checked += 1;
        let theta = &truth.theta0;
        let settled = settled_phi(theta, &ds);
        for _ in 0..100 {
            // refresh one block, then perturb only that block
            let block = rng.random_range(0..5);
            let mut phi = settled.clone();
            match block {
                0 | 3 => estep_f(theta, &mut phi, &ds).unwrap(),
                1 => estep_h(theta, &mut phi, &ds).unwrap(),
                _ => estep_v(theta, &mut phi, &ds).unwrap(),
            }
            let best = elbo(theta, &phi, &ds).unwrap();
            let mut p = phi.clone();
            let s = rng.random_range(0..ds.num_studies());
            let sv = &mut p.studies[s];
            match block {
                0 => sv.mean_f.iter_mut().for_each(|x| *x += rng.random_range(-1e-2..1e-2)),
                1 => sv.mean_h.iter_mut().for_each(|x| *x += rng.random_range(-1e-2..1e-2)),
                2 => sv.mean_v.iter_mut().for_each(|x| *x += rng.random_range(-1e-2..1e-2)),
                3 => {
                    let i = rng.random_range(0..sv.cov_f.len());
                    match random_spd_perturbation(&mut rng, &sv.cov_f[i], 1e-2) {
                        Some(c) => sv.cov_f[i] = c,
                        None => continue,
                    }
                }
                _ => sv.var_v.iter_mut().for_each(|x| {
                    if *x > 0.0 {
                        *x = (*x + rng.random_range(-1e-2..1e-2)).max(1e-6)
                    }
                }),
            }
            assert!(elbo(theta, &p, &ds).unwrap() <= best + 1e-9 * best.abs(), "seed {seed}, block {block}");
        }
    }
    assert!(checked >= 5);
}

fn max_variational_gradient(theta: &ModelParams, phi: &VariationalParams, ds: &Dataset) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for s in 0..phi.studies.len() {
        let n = phi.studies[s].mean_f.nrows();
        for i in 0..n {
            for c in 0..theta.q {
                let g = fd(
                    |x| {
                        let mut p = phi.clone();
                        p.studies[s].mean_f[(i, c)] = x;
                        elbo(theta, &p, ds).unwrap()
                    },
                    phi.studies[s].mean_f[(i, c)],
                    h,
                );
                worst = worst.max(g.abs());
                for c2 in 0..=c {
                    let g = fd(
                        |x| {
                            let mut p = phi.clone();
                            p.studies[s].cov_f[i][(c, c2)] = x;
                            p.studies[s].cov_f[i][(c2, c)] = x;
                            elbo(theta, &p, ds).unwrap()
                        },
                        phi.studies[s].cov_f[i][(c, c2)],
                        h,
                    );
                    worst = worst.max(g.abs());
                }
            }
            for c in 0..theta.qs[s] {
                let g = fd(
                    |x| {
                        let mut p = phi.clone();
                        p.studies[s].mean_h[(i, c)] = x;
                        elbo(theta, &p, ds).unwrap()
                    },
                    phi.studies[s].mean_h[(i, c)],
                    h,
                );
                worst = worst.max(g.abs());
            }
            for m in 0..theta.num_modalities() {
                if theta.sigma2[(s, m)] == 0.0 {
                    continue;
                }
                for field in 0..2 {
                    let get = |p: &VariationalParams| {
                        if field == 0 {
                            p.studies[s].mean_v[(i, m)]
                        } else {
                            p.studies[s].var_v[(i, m)]
                        }
                    };
                    let g = fd(
                        |x| {
                            let mut p = phi.clone();
                            if field == 0 {
                                p.studies[s].mean_v[(i, m)] = x;
                            } else {
                                p.studies[s].var_v[(i, m)] = x;
                            }
                            elbo(theta, &p, ds).unwrap()
                        },
                        get(phi),
                        h,
                    );
                    worst = worst.max(g.abs());
                }
            }
        }
    }
    worst
}

#[test]
fn cycling_gaussian_blocks_reaches_a_stationary_point() {
    for seed in 0..6 {
        let lim = Limits {
            n: (4, 8),
            p: (3, 8),
            ..continuous(2)
        };
        let (_, ds, truth) = random_instance(seed, lim);
        let theta = &truth.theta0;
        let mut phi = settled_phi(theta, &ds);
        for _ in 0..500 {
            estep_f(theta, &mut phi, &ds).unwrap();
            estep_h(theta, &mut phi, &ds).unwrap();
            estep_v(theta, &mut phi, &ds).unwrap();
        }
        let g = max_variational_gradient(theta, &phi, &ds);
        assert!(g <= 1e-5, "seed {seed}: gradient {g:e}");
    }
}

#[test]
fn sigma2_update_is_the_second_moment() {
    let (_, ds, truth) = random_instance(7, Limits::default());
    let mut theta = truth.theta0.clone();
    theta.sigma2.fill(0.5);
    let mut phi = settled_phi(&theta, &ds);
    for sv in &mut phi.studies {
        sv.mean_v.fill(0.0);
        sv.var_v.fill(0.3);
    }
    let next = mstep(&theta, &phi, &ds).unwrap();
    assert!(next.sigma2.iter().all(|&v| (v - 0.3).abs() < 1e-14));
}

#[test]
fn mstep_output_is_stationary() {
    for seed in 0..5 {
        let lim = Limits {
            n: (10, 20),
            p: (3, 8),
            ..Default::default()
        };
        let (_, ds, truth) = random_instance(seed, lim);
        let phi = settled_phi(&truth.theta0, &ds);
        let theta = mstep(&truth.theta0, &phi, &ds).unwrap();
        let g = max_parameter_gradient(&theta, &phi, &ds);
        assert!(g <= 1e-5, "seed {seed}: gradient {g:e}");
    }
}

/// Least-squares coefficients of every column of `y` on `z` (pooled rows).
fn ols(z: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let ztz = z.transpose() * z;
    (ztz.try_inverse().unwrap() * z.transpose() * y).transpose()
}

fn stack_studies(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = mats.iter().map(|m| m.nrows()).sum();
    let mut out = DMatrix::zeros(rows, mats[0].ncols());
    let mut off = 0;
    for m in mats {
        out.rows_mut(off, m.nrows()).copy_from(m);
        off += m.nrows();
    }
    out
}

#[test]
fn without_factors_mstep_is_ordinary_least_squares() {
    // one study: with several, the shared beta is weighted by per-study noise
    let lim = Limits {
        allow_sigma2: false,
        ..continuous(1)
    };
    let (_, ds, _) = random_instance(9, lim);
    let cfg = FitConfig::new(0, vec![0; ds.num_studies()]);
    let (theta0, mut phi) = init(&ds, &cfg).unwrap();
    let mut theta0 = theta0;
    theta0.sigma2.fill(0.0);
    estep_v(&theta0, &mut phi, &ds).unwrap();
    let theta = mstep(&theta0, &phi, &ds).unwrap();
    let z = stack_studies(&ds.studies.iter().map(|s| s.z.clone()).collect::<Vec<_>>());
    let x: Vec<DMatrix<f64>> = (0..ds.num_studies()).map(|s| working_values(&ds, &phi, s)).collect();
    let beta = ols(&z, &stack_studies(&x));
    assert!(max_abs_diff(&theta.stacked_beta(), &beta) < 1e-9);
    assert!(max_abs_diff(&theta0.stacked_beta(), &beta) < 1e-9, "init also gives OLS");
    for s in 0..ds.num_studies() {
        let resid = &x[s] - &ds.studies[s].z * beta.transpose();
        let n = resid.nrows() as f64;
        let lam = theta.stacked_lambda(s);
        for j in 0..lam.len() {
            let rms = resid.column(j).norm_squared() / n;
            assert!((lam[j] - rms.max(LAMBDA_FLOOR)).abs() < 1e-9 * rms.max(1.0));
        }
    }
    assert!(theta.a.iter().all(|a| a.ncols() == 0));
}

#[test]
fn init_is_deterministic() {
    let (spec, ds, _) = random_instance(2, Limits::default());
    let cfg = FitConfig::new(spec.q, spec.qs.clone()).with_seed(17);
    assert_eq!(init(&ds, &cfg).unwrap(), init(&ds, &cfg).unwrap());
}

/// Continuous data `Z beta' + F A'` with no noise at all and `F` orthogonal to `Z`.
fn noiseless(seed: u64, n: &[usize], p: &[usize], q: usize) -> (Dataset, ModelParams, Vec<DMatrix<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { rng.random_range(-1.0..1.0) + rng.random_range(-1.0..1.0) };
    let a: Vec<DMatrix<f64>> = p.iter().map(|&pm| DMatrix::from_fn(pm, q, |_, _| 2.0 * normal())).collect();
    let beta: Vec<DMatrix<f64>> = p.iter().map(|&pm| DMatrix::from_fn(pm, 2, |_, _| normal())).collect();
    let mut studies = Vec::new();
    let mut fs = Vec::new();
    for &ns in n {
        let z = DMatrix::from_fn(ns, 2, |_, j| if j == 0 { 1.0 } else { normal() });
        let raw = DMatrix::from_fn(ns, q, |_, _| normal());
        // factors inside the covariate span are absorbed by beta
        let proj = &z * (z.transpose() * &z).try_inverse().unwrap() * z.transpose();
        let f = &raw - proj * &raw;
        let modalities = (0..p.len())
            .map(|m| Modality::new(&z * beta[m].transpose() + &f * a[m].transpose(), ModalityType::Continuous))
            .collect();
        studies.push(Study { modalities, z });
        fs.push(f);
    }
    let theta = ModelParams {
        beta,
        a,
        b: vec![p.iter().map(|&pm| DMatrix::zeros(pm, 0)).collect(); n.len()],
        lambda: vec![p.iter().map(|&pm| DVector::zeros(pm)).collect(); n.len()],
        sigma2: DMatrix::zeros(n.len(), p.len()),
        q,
        qs: vec![0; n.len()],
    };
    (Dataset { studies }, theta, fs)
}

#[test]
fn init_recovers_an_exact_low_rank_space() {
    let (ds, truth, _) = noiseless(1, &[40, 30], &[10, 15], 3);
    let (theta, _) = init(&ds, &FitConfig::new(3, vec![0, 0])).unwrap();
    let t = trace_stat(&theta.stacked_a(), &truth.stacked_a()).unwrap();
    assert!((t - 1.0).abs() < 1e-8, "{t}");
}

#[test]
fn fit_recovers_noiseless_factors() {
    let (ds, _, f0) = noiseless(2, &[40, 30], &[10, 15], 2);
    let res = fit(&ds, &FitConfig::new(2, vec![0, 0]).with_max_iters(200)).unwrap();
    let fac = extract_factors(&res.phi);
    for s in 0..2 {
        assert!(trace_stat(&fac.f[s], &f0[s]).unwrap() >= 0.99);
    }
}

#[test]
fn degenerate_factor_counts_give_empty_loadings() {
    let (_, ds, _) = random_instance(5, Limits::default());
    let (theta, phi) = init(&ds, &FitConfig::new(0, vec![0; ds.num_studies()])).unwrap();
    assert!(theta.a.iter().all(|a| a.ncols() == 0));
    assert!(theta.b.iter().flatten().all(|b| b.ncols() == 0));
    let fac = extract_factors(&phi);
    assert!(fac.v.iter().all(|v| v.iter().all(|&x| x == 0.0)));
}

#[test]
fn factor_shapes_follow_the_config() {
    let spec = mmgfm::builtin_scenario("scenario1", &Default::default()).unwrap();
    let (ds, _) = mmgfm::gen_scenario(&spec).unwrap();
    let (_, phi) = init(&ds, &FitConfig::new(3, vec![2, 2, 2])).unwrap();
    let fac = extract_factors(&phi);
    let shapes: Vec<_> = fac.f.iter().map(|f| f.shape()).collect();
    assert_eq!(shapes, vec![(300, 3), (200, 3), (100, 3)]);
    assert!(fac.v.iter().all(|v| v.iter().all(|&x| x == 0.0)));
}

#[test]
fn structured_init_separates_the_blocks() {
    let ov = mmgfm::ScenarioOverrides {
        seed: Some(4),
        ..Default::default()
    };
    let spec = mmgfm::builtin_scenario("case4.2", &ov).unwrap();
    let (ds, truth) = mmgfm::gen_scenario(&spec).unwrap();
    let cfg = FitConfig {
        init_method: InitMethod::Structured,
        ..FitConfig::new(6, vec![6; 3])
    };
    let (theta, phi) = init(&ds, &cfg).unwrap();
    let fac = extract_factors(&phi);
    for (s, types) in std::iter::repeat_n(ds.types(), 3).enumerate() {
        for (m, t) in types.iter().enumerate().filter(|(_, t)| t.is_gaussian()) {
            let s2 = theta.sigma2[(s, m)];
            assert!((0.35..0.7).contains(&s2), "study {s} modality {m}: sigma2 {s2} ({t:?})");
            let v = fac.v[s].columns(m, 1).into_owned();
            let v0 = truth.v0[s].columns(m, 1).into_owned();
            assert!(trace_stat(&v, &v0).unwrap() > 0.8);
        }
    }
    // three shared directions, then a clear break, although six were asked for
    let sv = mmgfm::linalg::thin_svd(&theta.stacked_a());
    assert!(sv.s[2] / sv.s[3] > 2.0, "{:?}", sv.s);
    // only the identity-link rows are undistorted by the starting transform
    assert_eq!(&ds.types()[..2], &[ModalityType::Continuous; 2]);
    let rows = ds.dims()[0] + ds.dims()[1];
    let top = sv.u.view((0, 0), (rows, 3)).into_owned();
    let a0 = truth.theta0.stacked_a().rows(0, rows).into_owned();
    assert!(trace_stat(&top, &a0).unwrap() > 0.99);
    // the default leaves the effects at zero
    let (theta, phi) = init(&ds, &FitConfig::new(6, vec![6; 3])).unwrap();
    assert!(theta.sigma2.iter().all(|&x| x == mmgfm::vem::INIT_SIGMA2));
    assert!(phi.studies.iter().all(|st| st.mean_v.iter().all(|&x| x == 0.0)));
}

#[test]
fn single_iteration_fit() {
    let (spec, ds, _) = random_instance(6, Limits::default());
    let res = fit(&ds, &FitConfig::new(spec.q, spec.qs.clone()).with_max_iters(1)).unwrap();
    assert_eq!(res.elbo_trace.len(), 1);
    assert_eq!(res.iterations, 1);
}

#[test]
fn invalid_configs_are_rejected() {
    let (spec, ds, _) = random_instance(8, Limits::default());
    let pmin = *spec.p.iter().min().unwrap();
    assert!(fit(&ds, &FitConfig::new(pmin + 1, spec.qs.clone())).is_err());
    assert!(fit(&ds, &FitConfig::new(1, vec![0; spec.n.len() + 1])).is_err());
    assert!(fit(&ds, &FitConfig::new(1, spec.qs.clone()).with_max_iters(0)).is_err());
    assert!(fit(&ds, &FitConfig::new(1, spec.qs.clone()).with_rel_tol(0.0)).is_err());
}

#[test]
fn fits_are_monotone_on_small_instances() {
    for seed in 0..10 {
        let (spec, ds, _) = random_instance(100 + seed, Limits::default());
        let res = fit(&ds, &FitConfig::new(spec.q, spec.qs.clone())).unwrap();
        assert!(res.worst_decrease() <= 1e-6, "seed {seed}: {:e}", res.worst_decrease());
    }
}

#[test]
fn parallel_and_serial_fits_agree() {
    let (spec, ds, _) = random_instance(12, Limits::default());
    let mut cfg = FitConfig::new(spec.q, spec.qs.clone()).with_max_iters(20);
    let a = fit(&ds, &cfg).unwrap();
    cfg.parallel = false;
    let b = fit(&ds, &cfg).unwrap();
    assert_eq!(a.elbo_trace, b.elbo_trace);
}

#[test]
fn study_variational_rows_match_sample_sizes() {
    let (_, ds, truth) = random_instance(13, Limits::default());
    let phi = settled_phi(&truth.theta0, &ds);
    for (s, sv) in phi.studies.iter().enumerate() {
        assert_eq!(sv.mean_f.nrows(), ds.studies[s].n());
        assert_eq!(sv.cov_f.len(), ds.studies[s].n());
    }
}
