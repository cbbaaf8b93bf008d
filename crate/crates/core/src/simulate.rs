//! Data-generating processes for the benchmark scenarios.
//!
//! Parameters (`beta`, `A`, `B`) are drawn from the parameter stream keyed by
//! `param_seed` and stay fixed across replications; covariates, factors,
//! noise and observations are drawn from per-study streams keyed by `seed`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{clamp_link, logistic};
use crate::linalg::thin_svd;
use crate::model::{Dataset, Modality, ModalityType, ModelParams, Study};
use crate::rng::{param_rng, study_rng, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    /// Sample size per study; its length is `S`.
    pub n: Vec<usize>,
    /// Variable count per modality; its length is `M`.
    pub p: Vec<usize>,
    pub d: usize,
    pub q: usize,
    pub qs: Vec<usize>,
    pub types: Vec<ModalityType>,
    /// Trial counts per modality (empty for non-binomial modalities).
    pub trials: Vec<Vec<u32>>,
    pub rho_m: Vec<f64>,
    pub rho_z: f64,
    /// `S x M` variances of the modality-shared factor.
    pub sigma2_v: DMatrix<f64>,
    pub eps_var: f64,
    pub param_seed: u64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn num_studies(&self) -> usize {
        self.n.len()
    }

    pub fn num_modalities(&self) -> usize {
        self.p.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (s, m) = (self.num_studies(), self.num_modalities());
        let bad = |msg: String| Err(Error::Config(format!("scenario `{}`: {msg}", self.name)));
        if s == 0 || m == 0 {
            return bad("needs at least one study and one modality".into());
        }
        if self.n.contains(&0) || self.p.contains(&0) || self.d == 0 {
            return bad("all dimensions must be at least 1".into());
        }
        if self.qs.len() != s {
            return bad(format!("qs has length {}, expected {s}", self.qs.len()));
        }
        if self.types.len() != m || self.rho_m.len() != m || self.trials.len() != m {
            return bad(format!("per-modality vectors must have length {m}"));
        }
        if self.sigma2_v.shape() != (s, m) {
            return bad(format!("sigma2_v must be {s}x{m}"));
        }
        if self.sigma2_v.iter().any(|&v| !(v >= 0.0)) || !(self.eps_var > 0.0) {
            return bad("variances must be nonnegative (eps_var positive)".into());
        }
        let pmin = *self.p.iter().min().unwrap();
        if let Some(&qs) = self.qs.iter().max() {
            if self.q + qs > pmin {
                return bad(format!("q + q_s = {} exceeds the smallest p_m = {pmin}", self.q + qs));
            }
        }
        for (k, t) in self.types.iter().enumerate() {
            let ok = match t {
                ModalityType::Binomial => {
                    self.trials[k].len() == self.p[k] && self.trials[k].iter().all(|&t| t >= 1)
                }
                _ => self.trials[k].is_empty(),
            };
            if !ok {
                return bad(format!("trial counts of modality {k} do not match its type"));
            }
        }
        Ok(())
    }
}

/// True parameters and latent factors behind a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub theta0: ModelParams,
    pub f0: Vec<DMatrix<f64>>,
    pub h0: Vec<DMatrix<f64>>,
    /// `n_s x M` per study.
    pub v0: Vec<DMatrix<f64>>,
}

/// `rho * U S` from the SVD of a `p x k` standard-normal draw.
fn svd_scaled_loadings(p: usize, k: usize, rho: f64, rng: &mut StreamRng) -> DMatrix<f64> {
    if k == 0 {
        return DMatrix::zeros(p, 0);
    }
    let raw = DMatrix::from_fn(p, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let svd = thin_svd(&raw);
    let mut us = svd.u;
    for (j, mut col) in us.column_iter_mut().enumerate() {
        col *= rho * svd.s[j];
    }
    us
}

/// Shared loadings `A_m` (first `q` columns) and first-study loadings `B_1m`
/// (last `q1` columns) from one SVD-normalized draw.
pub fn gen_loadings(
    p_m: usize,
    q: usize,
    q1: usize,
    rho: f64,
    rng: &mut StreamRng,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let both = svd_scaled_loadings(p_m, q + q1, rho, rng);
    (both.columns(0, q).into_owned(), both.columns(q, q1).into_owned())
}

/// Loadings `B_sm` for a study other than the first.
pub fn gen_study_loadings(p_m: usize, q_s: usize, rho: f64, rng: &mut StreamRng) -> DMatrix<f64> {
    svd_scaled_loadings(p_m, q_s, rho, rng)
}

fn gen_params(spec: &ScenarioSpec) -> ModelParams {
    let (ns, nm) = (spec.num_studies(), spec.num_modalities());
    let mut rng = param_rng(spec.param_seed);
    let coef = Normal::new(0.0, 2.0).expect("valid normal");
    let beta: Vec<_> = spec
        .p
        .iter()
        .map(|&p| DMatrix::from_fn(p, spec.d, |_, _| coef.sample(&mut rng)))
        .collect();
    let mut a = Vec::with_capacity(nm);
    let mut b = vec![Vec::with_capacity(nm); ns];
    for m in 0..nm {
        let (am, b1m) = gen_loadings(spec.p[m], spec.q, spec.qs[0], spec.rho_m[m], &mut rng);
        a.push(am);
        b[0].push(b1m);
    }
    for (s, bs) in b.iter_mut().enumerate().skip(1) {
        for m in 0..nm {
            bs.push(gen_study_loadings(spec.p[m], spec.qs[s], spec.rho_m[m], &mut rng));
        }
    }
    let lambda = (0..ns)
        .map(|_| spec.p.iter().map(|&p| DVector::from_element(p, spec.eps_var)).collect())
        .collect();
    ModelParams {
        beta,
        a,
        b,
        lambda,
        sigma2: spec.sigma2_v.clone(),
        q: spec.q,
        qs: spec.qs.clone(),
    }
}

struct StudyDraw {
    study: Study,
    f: DMatrix<f64>,
    h: DMatrix<f64>,
    v: DMatrix<f64>,
}

fn gen_study(spec: &ScenarioSpec, theta: &ModelParams, s: usize) -> StudyDraw {
    let mut rng = study_rng(spec.seed, s);
    let n = spec.n[s];
    let nm = spec.num_modalities();
    let unif = Uniform::new_inclusive(-3.0, 3.0).expect("valid range");
    let z = DMatrix::from_fn(n, spec.d, |_, j| if j == 0 { 1.0 } else { 0.0 });
    let mut z = z;
    for i in 0..n {
        for j in 1..spec.d {
            z[(i, j)] = spec.rho_z * unif.sample(&mut rng);
        }
    }
    let normal = |rng: &mut StreamRng| rng.sample::<f64, _>(StandardNormal);
    let f = DMatrix::from_fn(n, spec.q, |_, _| normal(&mut rng));
    let h = DMatrix::from_fn(n, spec.qs[s], |_, _| normal(&mut rng));
    let mut v = DMatrix::zeros(n, nm);
    for i in 0..n {
        for m in 0..nm {
            v[(i, m)] = spec.sigma2_v[(s, m)].sqrt() * normal(&mut rng);
        }
    }
    let eps_sd = spec.eps_var.sqrt();
    let mut modalities = Vec::with_capacity(nm);
    for m in 0..nm {
        let mut y = &z * theta.beta[m].transpose() + &f * theta.a[m].transpose() + &h * theta.b[s][m].transpose();
        for i in 0..n {
            for j in 0..spec.p[m] {
                y[(i, j)] += v[(i, m)] + eps_sd * normal(&mut rng);
            }
        }
        let kind = spec.types[m];
        let x = match kind {
            ModalityType::Continuous => y,
            ModalityType::Count => y.map(|yy| {
                Poisson::new(clamp_link(yy).exp())
                    .expect("positive finite rate")
                    .sample(&mut rng)
            }),
            ModalityType::Binomial => DMatrix::from_fn(n, spec.p[m], |i, j| {
                let prob = logistic(clamp_link(y[(i, j)]));
                Binomial::new(spec.trials[m][j] as u64, prob)
                    .expect("valid binomial")
                    .sample(&mut rng) as f64
            }),
        };
        modalities.push(Modality::new(x, kind).with_trials(spec.trials[m].clone()));
    }
    StudyDraw {
        study: Study { modalities, z },
        f,
        h,
        v,
    }
}

/// Draw a dataset and its ground truth.
pub fn gen_scenario(spec: &ScenarioSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let theta0 = gen_params(spec);
    let draws: Vec<StudyDraw> = (0..spec.num_studies())
        .into_par_iter()
        .map(|s| gen_study(spec, &theta0, s))
        .collect();
    let mut studies = Vec::with_capacity(draws.len());
    let (mut f0, mut h0, mut v0) = (Vec::new(), Vec::new(), Vec::new());
    for d in draws {
        studies.push(d.study);
        f0.push(d.f);
        h0.push(d.h);
        v0.push(d.v);
    }
    Ok((Dataset { studies }, GroundTruth { theta0, f0, h0, v0 }))
}

/// Field overrides applied on top of a built-in scenario.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOverrides {
    pub n: Option<Vec<usize>>,
    pub p: Option<Vec<usize>>,
    pub q: Option<usize>,
    pub qs: Option<Vec<usize>>,
    pub sigma2_v: Option<f64>,
    pub rho_m: Option<f64>,
    pub rho_z: Option<f64>,
    pub eps_var: Option<f64>,
    pub param_seed: Option<u64>,
    pub seed: Option<u64>,
}

pub const BUILTIN_SCENARIOS: &[&str] = &[
    "scenario1", "scenario2", "case3.1", "case3.2", "case3.3", "case3.4", "case3.5", "case3.6", "case4.1",
    "case4.2", "case4.3", "case4.4", "case4.5",
];

struct Base {
    n: Vec<usize>,
    p: Vec<usize>,
    types: Vec<ModalityType>,
    sigma2: f64,
    rho: f64,
    eps_var: f64,
}

/// Twenty modalities: 7 continuous with 150 variables, 6 count with 50,
/// 7 binary with 60.
fn twenty_modalities() -> (Vec<usize>, Vec<ModalityType>) {
    use ModalityType::*;
    let mut p = Vec::new();
    let mut t = Vec::new();
    for m in 1..=20 {
        let (pm, tm) = match m {
            1..=7 => (150, Continuous),
            8..=13 => (50, Count),
            _ => (60, Binomial),
        };
        p.push(pm);
        t.push(tm);
    }
    (p, t)
}

fn base_of(name: &str) -> Option<Base> {
    use ModalityType::*;
    let case33 = Base {
        n: vec![300, 200],
        p: vec![50, 150, 50, 100, 60],
        types: vec![Continuous, Continuous, Count, Binomial, Binomial],
        sigma2: 0.5,
        rho: 2.0,
        eps_var: 1.0,
    };
    let case4 = |n: Vec<usize>, p: Vec<usize>| Base {
        n,
        p,
        rho: 3.0,
        ..base_of("case3.3").unwrap()
    };
    Some(match name {
        "scenario1" => Base {
            n: vec![300, 200, 100],
            p: vec![50, 150, 200],
            types: vec![Count; 3],
            sigma2: 0.0,
            rho: 2.0,
            eps_var: 1.0,
        },
        "scenario2" => Base {
            n: vec![300, 200, 100],
            p: vec![100, 200, 50, 150, 200],
            types: vec![Continuous, Continuous, Count, Count, Count],
            sigma2: 0.0,
            rho: 2.0,
            eps_var: 1.0,
        },
        "case3.1" => Base {
            p: vec![50, 150, 200, 100, 60],
            types: vec![Continuous, Continuous, Continuous, Binomial, Binomial],
            sigma2: 0.7,
            ..case33
        },
        "case3.2" => Base {
            p: vec![50, 150, 200, 100, 200],
            types: vec![Count, Count, Count, Binomial, Binomial],
            ..case33
        },
        "case3.3" => case33,
        "case3.4" => Base {
            n: vec![100, 200],
            p: vec![250, 50, 50, 100, 50],
            ..case33
        },
        "case3.5" => Base {
            n: (1..=20).map(|s| if s <= 10 { 50 } else { 30 }).collect(),
            ..case33
        },
        "case3.6" => {
            let (p, types) = twenty_modalities();
            Base { p, types, ..case33 }
        }
        "case4.1" => case4(vec![100, 150, 80], vec![50, 150, 50, 100, 60]),
        "case4.2" => case4(vec![300, 200, 100], vec![50, 150, 50, 100, 60]),
        "case4.3" => Base {
            eps_var: 3.0,
            ..case4(vec![300, 200, 100], vec![50, 150, 50, 100, 60])
        },
        "case4.4" => case4(vec![300, 200, 100], vec![250, 400, 250, 300, 200]),
        "case4.5" => {
            let (p, types) = twenty_modalities();
            Base {
                types,
                ..case4(vec![300, 200, 100], p)
            }
        }
        _ => return None,
    })
}

/// Look up a named scenario and apply overrides.
pub fn builtin_scenario(name: &str, overrides: &ScenarioOverrides) -> Result<ScenarioSpec> {
    let key = name.to_ascii_lowercase();
    let base = base_of(&key).ok_or_else(|| Error::UnknownScenario {
        name: name.to_string(),
        valid: BUILTIN_SCENARIOS.iter().map(|s| s.to_string()).collect(),
    })?;
    let n = overrides.n.clone().unwrap_or(base.n);
    let p = overrides.p.clone().unwrap_or(base.p);
    if p.len() != base.types.len() {
        return Err(Error::Config(format!(
            "scenario `{key}` has {} modalities but {} dimensions were given",
            base.types.len(),
            p.len()
        )));
    }
    let ns = n.len();
    let nm = p.len();
    let qs = match &overrides.qs {
        Some(v) if v.len() == 1 => vec![v[0]; ns],
        Some(v) => v.clone(),
        None => vec![2; ns],
    };
    let trials = base
        .types
        .iter()
        .zip(&p)
        .map(|(t, &pm)| if *t == ModalityType::Binomial { vec![1; pm] } else { Vec::new() })
        .collect();
    let spec = ScenarioSpec {
        name: key,
        n,
        d: 3,
        q: overrides.q.unwrap_or(3),
        qs,
        types: base.types,
        trials,
        rho_m: vec![overrides.rho_m.unwrap_or(base.rho); nm],
        rho_z: overrides.rho_z.unwrap_or(0.5),
        sigma2_v: DMatrix::from_element(ns, nm, overrides.sigma2_v.unwrap_or(base.sigma2)),
        eps_var: overrides.eps_var.unwrap_or(base.eps_var),
        param_seed: overrides.param_seed.unwrap_or(0),
        seed: overrides.seed.unwrap_or(0),
        p,
    };
    spec.validate()?;
    Ok(spec)
}
