//! Step-wise singular value ratio (SVR) selection of factor counts.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::singular_values;
use crate::model::Dataset;
use crate::vem::{fit, FitConfig, InitMethod};

/// Relative threshold below which a trailing singular value counts as zero.
pub const ZERO_SV_RTOL: f64 = 1e-12;

pub const DEFAULT_Q_MAX: usize = 15;
pub const DEFAULT_QS_MAX: usize = 6;

/// Ratios `s_k / s_{k+1}` for `k = 1..kmax-1`; `+inf` where `s_{k+1}` is
/// negligible relative to `s_1`.
pub fn svr_ratios(l: &DMatrix<f64>, kmax: usize) -> Result<Vec<f64>> {
    if kmax < 2 {
        return Err(Error::Config(format!("kmax must be at least 2, got {kmax}")));
    }
    if l.nrows() < kmax || l.ncols() < kmax {
        return Err(Error::Dimension(format!(
            "{}x{} matrix has fewer than kmax = {kmax} rows or columns",
            l.nrows(),
            l.ncols()
        )));
    }
    let sv = singular_values(l);
    let top = sv[0];
    Ok((0..kmax - 1)
        .map(|k| {
            if sv[k + 1] < ZERO_SV_RTOL * top || top == 0.0 {
                f64::INFINITY
            } else {
                sv[k] / sv[k + 1]
            }
        })
        .collect())
}

/// One-based index of the largest singular value ratio (smallest on ties).
pub fn svr(l: &DMatrix<f64>, kmax: usize) -> Result<usize> {
    Ok(argmax_first(&svr_ratios(l, kmax)?) + 1)
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// Combine per-modality choices: the maximum when all differ, otherwise the
/// most frequent value (ties toward the larger value).
pub fn combine(values: &[usize]) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &v in values {
        *counts.entry(v).or_default() += 1;
    }
    if counts.values().all(|&c| c == 1) {
        return values.iter().copied().max().unwrap_or(0);
    }
    // BTreeMap iterates ascending, so max_by_key keeps the largest tied value
    counts
        .into_iter()
        .max_by_key(|&(_, c)| c)
        .map(|(v, _)| v)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioTable {
    pub label: String,
    pub ratios: Vec<f64>,
    pub choice: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub q_hat: usize,
    pub qs_hat: Vec<usize>,
    pub per_modality_q: Vec<usize>,
    /// Per study, the per-modality choices for `q_s`.
    pub per_modality_qs: Vec<Vec<usize>>,
    pub ratio_tables: Vec<RatioTable>,
}

/// Two-stage selection: fit with `(q_max, qs_max)` and pick `q` from the
/// shared loadings, then refit with `(q_hat, qs_max)` and pick each `q_s`
/// from the study-specific loadings. `base` supplies iteration settings;
/// its factor counts and start are ignored. Both fits use the structured
/// start: from a pooled start, spare shared columns at the upper bound take
/// over study-specific directions, and spare study columns take over the
/// modality effects, and either pushes the ratio peak past the true count.
pub fn select_factors(ds: &Dataset, q_max: usize, qs_max: &[usize], base: &FitConfig) -> Result<SelectionResult> {
    if q_max < 2 || qs_max.iter().any(|&k| k < 2) {
        return Err(Error::Config("factor upper bounds must be at least 2".into()));
    }
    if qs_max.len() != ds.num_studies() {
        return Err(Error::Dimension(format!(
            "{} upper bounds given for {} studies",
            qs_max.len(),
            ds.num_studies()
        )));
    }
    let mut tables = Vec::new();
    let base = FitConfig {
        init_method: InitMethod::Structured,
        ..base.clone()
    };
    let step1 = fit(ds, &FitConfig { q: q_max, qs: qs_max.to_vec(), ..base.clone() })?;
    let mut per_modality_q = Vec::new();
    for (m, a) in step1.theta.a.iter().enumerate() {
        let ratios = svr_ratios(a, q_max)?;
        let choice = argmax_first(&ratios) + 1;
        per_modality_q.push(choice);
        tables.push(RatioTable { label: format!("A_{m}"), ratios, choice });
    }
    let q_hat = combine(&per_modality_q);

    let step2 = fit(ds, &FitConfig { q: q_hat, qs: qs_max.to_vec(), ..base.clone() })?;
    let mut qs_hat = Vec::new();
    let mut per_modality_qs = Vec::new();
    for (s, bs) in step2.theta.b.iter().enumerate() {
        let mut choices = Vec::new();
        for (m, b) in bs.iter().enumerate() {
            let ratios = svr_ratios(b, qs_max[s])?;
            let choice = argmax_first(&ratios) + 1;
            choices.push(choice);
            tables.push(RatioTable { label: format!("B_{s}_{m}"), ratios, choice });
        }
        qs_hat.push(combine(&choices));
        per_modality_qs.push(choices);
    }
    Ok(SelectionResult {
        q_hat,
        qs_hat,
        per_modality_q,
        per_modality_qs,
        ratio_tables: tables,
    })
}
