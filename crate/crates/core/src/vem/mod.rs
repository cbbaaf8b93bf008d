//! Variational EM estimation.
//!
//! Each iteration updates the variational blocks in the fixed order
//! `y -> f -> h -> v`, then the model parameters, then records the ELBO.
//! Every block update except `y` is an exact coordinate maximizer; the `y`
//! update is a Laplace step that is only accepted when it does not lower the
//! bound, so the recorded trace is nondecreasing.

mod elbo;
mod estep;
mod init;
mod mstep;
pub(crate) mod work;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use elbo::elbo;
pub use estep::{estep_f, estep_h, estep_v, estep_y, laplace_update, Y_NEWTON_STEPS};
pub use init::{init, INIT_LAMBDA_FLOOR, INIT_SIGMA2};
pub use mstep::{mstep, LAMBDA_FLOOR};

use crate::error::{Error, Result};
use crate::ident::align;
use crate::model::{Dataset, ModelParams, VariationalParams};
use crate::validate::validate_dataset;
use work::Prepared;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub q: usize,
    pub qs: Vec<usize>,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
    /// Relative ELBO decrease tolerated per iteration before a warning is logged.
    pub monotonicity_slack: f64,
    pub parallel: bool,
    pub deterministic_reduction: bool,
    #[serde(default)]
    pub init_method: InitMethod,
}

/// How [`init`] builds the starting point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    /// Shared loadings from the pooled SVD; modality effects start at zero.
    #[default]
    Pooled,
    /// Modality effects start from the data, shared loadings from the
    /// directions common to every study. Spare columns then cannot take
    /// over signal that belongs to another block, which matters when the
    /// factor counts are upper bounds.
    Structured,
}

impl FitConfig {
    pub fn new(q: usize, qs: Vec<usize>) -> Self {
        FitConfig {
            q,
            qs,
            max_iters: 500,
            rel_tol: 1e-6,
            seed: 0,
            monotonicity_slack: 1e-6,
            parallel: true,
            deterministic_reduction: true,
            init_method: InitMethod::Pooled,
        }
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_rel_tol(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Check the configuration against a dataset's dimensions.
    pub fn check(&self, ds: &Dataset) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Config("rel_tol must be positive".into()));
        }
        if !(self.monotonicity_slack >= 0.0) {
            return Err(Error::Config("monotonicity_slack must be nonnegative".into()));
        }
        if self.qs.len() != ds.num_studies() {
            return Err(Error::Dimension(format!(
                "{} study-specific factor counts given for {} studies",
                self.qs.len(),
                ds.num_studies()
            )));
        }
        let pmin = ds.dims().into_iter().min().unwrap_or(0);
        if self.q > pmin {
            return Err(Error::Dimension(format!(
                "q = {} exceeds the smallest modality dimension {pmin}",
                self.q
            )));
        }
        if let Some(&qs) = self.qs.iter().max() {
            if qs > pmin {
                return Err(Error::Dimension(format!(
                    "q_s = {qs} exceeds the smallest modality dimension {pmin}"
                )));
            }
        }
        let total_n: usize = ds.sample_sizes().iter().sum();
        if total_n <= ds.covariate_dim() + self.q {
            return Err(Error::Dimension(format!(
                "{total_n} units cannot identify {} covariates and {} shared factors",
                ds.covariate_dim(),
                self.q
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: ModelParams,
    pub phi: VariationalParams,
    /// ELBO after each iteration.
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub config: FitConfig,
}

impl FitResult {
    pub fn final_elbo(&self) -> Option<f64> {
        self.elbo_trace.last().copied()
    }

    /// Largest relative decrease between consecutive trace entries.
    pub fn worst_decrease(&self) -> f64 {
        self.elbo_trace
            .windows(2)
            .map(|w| (w[0] - w[1]) / w[0].abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }
}

/// Posterior means of the latent factors, one matrix per study.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorEstimates {
    pub f: Vec<DMatrix<f64>>,
    pub h: Vec<DMatrix<f64>>,
    pub v: Vec<DMatrix<f64>>,
}

pub fn extract_factors(phi: &VariationalParams) -> FactorEstimates {
    FactorEstimates {
        f: phi.studies.iter().map(|s| s.mean_f.clone()).collect(),
        h: phi.studies.iter().map(|s| s.mean_h.clone()).collect(),
        v: phi.studies.iter().map(|s| s.mean_v.clone()).collect(),
    }
}

/// Fit the model by variational EM and align the result.
pub fn fit(ds: &Dataset, config: &FitConfig) -> Result<FitResult> {
    let report = validate_dataset(ds);
    if !report.is_valid() {
        return Err(Error::Validation(report.violations));
    }
    config.check(ds)?;
    if config.parallel {
        run(ds, config)
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(|| run(ds, config))
    }
}

fn run(ds: &Dataset, config: &FitConfig) -> Result<FitResult> {
    let prep = Prepared::new(ds);
    let (mut theta, mut phi) = init::init_prepared(&prep, ds, config)?;
    let det = config.deterministic_reduction;
    let mut prev = elbo::elbo_prepared(&prep, ds, &theta, &phi, det)?;
    let mut trace = Vec::with_capacity(config.max_iters);
    let mut converged = false;
    for it in 0..config.max_iters {
        estep::estep_y_prepared(&prep, ds, &theta, &mut phi);
        estep::estep_f_prepared(&prep, ds, &theta, &mut phi)?;
        estep::estep_h_prepared(&prep, ds, &theta, &mut phi)?;
        estep::estep_v_prepared(&prep, ds, &theta, &mut phi);
        theta = mstep::mstep_prepared(&prep, ds, &theta, &phi)?;
        let cur = elbo::elbo_prepared(&prep, ds, &theta, &phi, det)?;
        if !cur.is_finite() {
            return Err(Error::Numeric(format!("ELBO became {cur} at iteration {}", it + 1)));
        }
        trace.push(cur);
        let rel = (cur - prev) / prev.abs().max(f64::MIN_POSITIVE);
        if rel < -config.monotonicity_slack {
            log::warn!("ELBO decreased by {:.3e} (relative) at iteration {}", -rel, it + 1);
        }
        log::debug!("iteration {}: elbo {cur:.6}", it + 1);
        if rel.abs() < config.rel_tol {
            converged = true;
            break;
        }
        prev = cur;
    }
    let (theta, phi) = align(&theta, &phi);
    let iterations = trace.len();
    Ok(FitResult {
        theta,
        phi,
        elbo_trace: trace,
        converged,
        iterations,
        config: config.clone(),
    })
}
