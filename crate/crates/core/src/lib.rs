//! Multi-study, multi-modality generalized factor model with covariates.
//!
//! Observations from several studies share variables grouped into
//! modalities (continuous, count, or binomial). Each entry is driven on the
//! link scale by covariates, factors shared by all studies, study-specific
//! factors, and a per-modality unit effect. Parameters are estimated by
//! maximizing a mean-field variational lower bound.
//!
//! ```no_run
//! use mmgfm::{builtin_scenario, gen_scenario, fit, FitConfig, ScenarioOverrides};
//!
//! let spec = builtin_scenario("scenario1", &ScenarioOverrides::default())?;
//! let (ds, _truth) = gen_scenario(&spec)?;
//! let res = fit(&ds, &FitConfig::new(3, vec![2, 2, 2]))?;
//! println!("{} iterations, elbo {:?}", res.iterations, res.final_elbo());
//! # Ok::<(), mmgfm::Error>(())
//! ```

// `!(x > 0.0)` style checks deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod family;
pub mod ident;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod select;
pub mod simulate;
pub mod validate;
pub mod vem;

pub use error::{Error, Result};
pub use ident::{align, align_truth};
pub use io::{load_dataset, load_fit, load_truth, save_dataset, save_fit, save_truth};
pub use metrics::{beta_mae, evaluate, trace_stat, Metrics};
pub use model::{Dataset, Modality, ModalityType, ModelParams, Study, StudyVariational, VariationalParams};
pub use select::{select_factors, svr, SelectionResult};
pub use simulate::{builtin_scenario, gen_scenario, GroundTruth, ScenarioOverrides, ScenarioSpec, BUILTIN_SCENARIOS};
pub use validate::{validate_dataset, ValidationReport, Violation};
pub use vem::{elbo, extract_factors, fit, FactorEstimates, FitConfig, FitResult, InitMethod};
