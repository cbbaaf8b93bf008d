//! Structural and range checks on a [`Dataset`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::family::in_support;
use crate::linalg;
use crate::model::{Dataset, ModalityType};

/// Smallest-to-largest singular value ratio below which `Z` is rank deficient.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Dimension,
    Range,
    Rank,
}

/// A single invariant violation. Indices are zero-based; `None` means the
/// violation is not tied to that level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub study: Option<usize>,
    pub modality: Option<usize>,
    pub row: Option<usize>,
    pub col: Option<usize>,
    pub message: String,
}

impl Violation {
    fn new(kind: ViolationKind, message: impl Into<String>) -> Self {
        Violation {
            kind,
            study: None,
            modality: None,
            row: None,
            col: None,
            message: message.into(),
        }
    }

    fn at(mut self, study: usize, modality: Option<usize>) -> Self {
        self.study = Some(study);
        self.modality = modality;
        self
    }

    fn cell(mut self, row: usize, col: usize) -> Self {
        self.row = Some(row);
        self.col = Some(col);
        self
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut loc = Vec::new();
        if let Some(s) = self.study {
            loc.push(format!("study {s}"));
        }
        if let Some(m) = self.modality {
            loc.push(format!("modality {m}"));
        }
        if let (Some(r), Some(c)) = (self.row, self.col) {
            loc.push(format!("cell ({r}, {c})"));
        }
        if loc.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", loc.join(", "), self.message)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Collect every invariant violation in `ds`. Never fails.
pub fn validate_dataset(ds: &Dataset) -> ValidationReport {
    let mut out = Vec::new();
    let Some(first) = ds.studies.first() else {
        out.push(Violation::new(ViolationKind::Dimension, "dataset has no studies"));
        return ValidationReport { violations: out };
    };
    if first.modalities.is_empty() {
        out.push(Violation::new(ViolationKind::Dimension, "dataset has no modalities"));
    }

    for (s, study) in ds.studies.iter().enumerate() {
        let n = study.z.nrows();
        if study.modalities.len() != first.modalities.len() {
            out.push(
                Violation::new(
                    ViolationKind::Dimension,
                    format!(
                        "has {} modalities, study 0 has {}",
                        study.modalities.len(),
                        first.modalities.len()
                    ),
                )
                .at(s, None),
            );
        }
        if study.z.ncols() == 0 {
            out.push(Violation::new(ViolationKind::Dimension, "covariate matrix has no columns").at(s, None));
        } else if study.z.ncols() != first.z.ncols() {
            out.push(
                Violation::new(
                    ViolationKind::Dimension,
                    format!("covariate dimension {} differs from study 0 ({})", study.z.ncols(), first.z.ncols()),
                )
                .at(s, None),
            );
        }
        if study.z.iter().any(|v| !v.is_finite()) {
            out.push(Violation::new(ViolationKind::Range, "covariates contain non-finite values").at(s, None));
        } else if study.z.ncols() > 0 {
            if n < study.z.ncols() {
                out.push(
                    Violation::new(
                        ViolationKind::Rank,
                        format!("{} units cannot support {} covariates", n, study.z.ncols()),
                    )
                    .at(s, None),
                );
            } else {
                let sv = linalg::singular_values(&study.z);
                let (hi, lo) = (sv[0], sv[sv.len() - 1]);
                if !(lo > RANK_TOL * hi) {
                    out.push(
                        Violation::new(
                            ViolationKind::Rank,
                            format!("covariate matrix is rank deficient (singular values {hi:e} .. {lo:e})"),
                        )
                        .at(s, None),
                    );
                }
            }
        }

        for (m, modality) in study.modalities.iter().enumerate() {
            let here = |kind, msg: String| Violation::new(kind, msg).at(s, Some(m));
            if modality.n() != n {
                out.push(here(
                    ViolationKind::Dimension,
                    format!("has {} rows, covariates have {}", modality.n(), n),
                ));
            }
            if modality.offsets.len() != modality.n() {
                out.push(here(
                    ViolationKind::Dimension,
                    format!("offsets have length {}, expected {}", modality.offsets.len(), modality.n()),
                ));
            }
            if modality.offsets.iter().any(|v| !v.is_finite()) {
                out.push(here(ViolationKind::Range, "offsets contain non-finite values".into()));
            }
            if let Some(reference) = first.modalities.get(m) {
                if modality.p() != reference.p() {
                    out.push(here(
                        ViolationKind::Dimension,
                        format!("has {} variables, study 0 has {}", modality.p(), reference.p()),
                    ));
                }
                if modality.kind != reference.kind {
                    out.push(here(
                        ViolationKind::Dimension,
                        format!("type {} differs from study 0 ({})", modality.kind, reference.kind),
                    ));
                }
                if modality.trials != reference.trials {
                    out.push(here(ViolationKind::Dimension, "trial counts differ from study 0".into()));
                }
            }
            if modality.kind == ModalityType::Binomial {
                if modality.trials.len() != modality.p() {
                    out.push(here(
                        ViolationKind::Dimension,
                        format!("has {} trial counts for {} variables", modality.trials.len(), modality.p()),
                    ));
                    continue;
                }
                if let Some(j) = modality.trials.iter().position(|&t| t == 0) {
                    out.push(here(ViolationKind::Range, format!("variable {j} has zero trials")));
                }
            } else if !modality.trials.is_empty() {
                out.push(here(ViolationKind::Dimension, "trial counts given for a non-binomial modality".into()));
            }
            for j in 0..modality.p() {
                let t = modality.trials_of(j);
                for i in 0..modality.n() {
                    let x = modality.x[(i, j)];
                    if !in_support(modality.kind, x, t) {
                        out.push(
                            here(
                                ViolationKind::Range,
                                format!("value {x} outside the support of a {} variable", modality.kind),
                            )
                            .cell(i, j),
                        );
                    }
                }
            }
        }
    }
    ValidationReport { violations: out }
}
