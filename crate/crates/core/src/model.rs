//! Domain types: observed data and the two parameter sets of the model.
//!
//! Observations come as `S` studies, each carrying the same `M` modalities
//! (same variables and variable types) measured on its own `n_s` units,
//! together with a covariate matrix `Z_s`. On the link scale every entry
//! follows
//!
//! ```text
//! y_simj = tau_sim + z_si' beta_mj + f_si' a_mj + h_si' b_smj + v_sim + eps_simj
//! ```
//!
//! with `f ~ N(0, I_q)` shared across studies, `h ~ N(0, I_{q_s})` specific
//! to study `s`, `v_sim ~ N(0, sigma2_sm)` shared by the variables of one
//! modality and `eps_simj ~ N(0, lambda_smj)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Distribution family of the variables of one modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityType {
    /// Gaussian; the latent link-scale value is observed directly.
    Continuous,
    /// Poisson with log link.
    Count,
    /// Binomial with logit link; trial counts live on the [`Modality`].
    Binomial,
}

impl ModalityType {
    pub fn as_str(self) -> &'static str {
        match self {
            ModalityType::Continuous => "continuous",
            ModalityType::Count => "count",
            ModalityType::Binomial => "binomial",
        }
    }

    pub fn is_gaussian(self) -> bool {
        self == ModalityType::Continuous
    }
}

impl std::str::FromStr for ModalityType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "continuous" | "gaussian" => Ok(ModalityType::Continuous),
            "count" | "poisson" => Ok(ModalityType::Count),
            "binomial" | "bernoulli" | "binary" => Ok(ModalityType::Binomial),
            other => Err(format!("unknown modality type `{other}`")),
        }
    }
}

impl std::fmt::Display for ModalityType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One modality of one study: an `n_s x p_m` observation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Modality {
    pub x: DMatrix<f64>,
    pub kind: ModalityType,
    /// Per-variable trial counts; empty unless `kind` is binomial.
    pub trials: Vec<u32>,
    /// Known per-unit offsets on the link scale (length `n_s`).
    pub offsets: DVector<f64>,
}

impl Modality {
    pub fn new(x: DMatrix<f64>, kind: ModalityType) -> Self {
        let n = x.nrows();
        let trials = match kind {
            ModalityType::Binomial => vec![1; x.ncols()],
            _ => Vec::new(),
        };
        Modality {
            x,
            kind,
            trials,
            offsets: DVector::zeros(n),
        }
    }

    pub fn with_trials(mut self, trials: Vec<u32>) -> Self {
        self.trials = trials;
        self
    }

    pub fn with_offsets(mut self, offsets: DVector<f64>) -> Self {
        self.offsets = offsets;
        self
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Trial count of variable `j` (1 for non-binomial modalities).
    pub fn trials_of(&self, j: usize) -> u32 {
        self.trials.get(j).copied().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub modalities: Vec<Modality>,
    /// Covariates, `n_s x d`. Include a column of ones for an intercept.
    pub z: DMatrix<f64>,
}

impl Study {
    pub fn n(&self) -> usize {
        self.z.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub studies: Vec<Study>,
}

impl Dataset {
    pub fn num_studies(&self) -> usize {
        self.studies.len()
    }

    pub fn num_modalities(&self) -> usize {
        self.studies.first().map_or(0, |s| s.modalities.len())
    }

    pub fn sample_sizes(&self) -> Vec<usize> {
        self.studies.iter().map(Study::n).collect()
    }

    /// Variable count per modality, read from the first study.
    pub fn dims(&self) -> Vec<usize> {
        self.studies
            .first()
            .map(|s| s.modalities.iter().map(Modality::p).collect())
            .unwrap_or_default()
    }

    pub fn types(&self) -> Vec<ModalityType> {
        self.studies
            .first()
            .map(|s| s.modalities.iter().map(|m| m.kind).collect())
            .unwrap_or_default()
    }

    pub fn covariate_dim(&self) -> usize {
        self.studies.first().map_or(0, |s| s.z.ncols())
    }
}

/// Model parameters `theta`.
///
/// `beta[m]` is `p_m x d`, `a[m]` is `p_m x q`, `b[s][m]` is `p_m x q_s`,
/// `lambda[s][m]` holds the diagonal of the overdispersion covariance and
/// `sigma2[(s, m)]` the variance of the modality-shared factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: Vec<DMatrix<f64>>,
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<Vec<DMatrix<f64>>>,
    pub lambda: Vec<Vec<DVector<f64>>>,
    pub sigma2: DMatrix<f64>,
    pub q: usize,
    pub qs: Vec<usize>,
}

impl ModelParams {
    pub fn num_studies(&self) -> usize {
        self.b.len()
    }

    pub fn num_modalities(&self) -> usize {
        self.a.len()
    }

    /// All `A_m` stacked row-wise into a `p x q` matrix.
    pub fn stacked_a(&self) -> DMatrix<f64> {
        stack_rows(&self.a, self.q)
    }

    /// All `B_sm` of study `s` stacked row-wise into a `p x q_s` matrix.
    pub fn stacked_b(&self, s: usize) -> DMatrix<f64> {
        stack_rows(&self.b[s], self.qs[s])
    }

    /// All `beta_m` stacked row-wise into a `p x d` matrix.
    pub fn stacked_beta(&self) -> DMatrix<f64> {
        let d = self.beta.first().map_or(0, |b| b.ncols());
        stack_rows(&self.beta, d)
    }

    pub fn stacked_lambda(&self, s: usize) -> DVector<f64> {
        let p: usize = self.lambda[s].iter().map(|l| l.len()).sum();
        let mut out = DVector::zeros(p);
        let mut off = 0;
        for l in &self.lambda[s] {
            out.rows_mut(off, l.len()).copy_from(l);
            off += l.len();
        }
        out
    }
}

pub(crate) fn stack_rows(blocks: &[DMatrix<f64>], ncols: usize) -> DMatrix<f64> {
    let p: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(p, ncols);
    let mut off = 0;
    for b in blocks {
        out.view_mut((off, 0), (b.nrows(), ncols)).copy_from(b);
        off += b.nrows();
    }
    out
}

/// Split a row-stacked matrix back into blocks of the given heights.
pub(crate) fn split_rows(stacked: &DMatrix<f64>, heights: &[usize]) -> Vec<DMatrix<f64>> {
    let mut off = 0;
    heights
        .iter()
        .map(|&h| {
            let block = stacked.rows(off, h).into_owned();
            off += h;
            block
        })
        .collect()
}

/// Variational parameters of one study.
///
/// Per-unit quantities are stored row-wise: row `i` of `mean_f` is `m_si`,
/// `cov_f[i]` is `Sigma_si`, and so on. `xi`/`s2y` are `None` for
/// continuous modalities, whose link-scale values are observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyVariational {
    pub xi: Vec<Option<DMatrix<f64>>>,
    pub s2y: Vec<Option<DMatrix<f64>>>,
    pub mean_f: DMatrix<f64>,
    pub cov_f: Vec<DMatrix<f64>>,
    pub mean_h: DMatrix<f64>,
    pub cov_h: Vec<DMatrix<f64>>,
    /// `n_s x M`, entry `(i, m)` is `w_sim`.
    pub mean_v: DMatrix<f64>,
    /// `n_s x M`, entry `(i, m)` is `varsigma_sim`.
    pub var_v: DMatrix<f64>,
}

impl StudyVariational {
    pub fn n(&self) -> usize {
        self.mean_f.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub studies: Vec<StudyVariational>,
}
