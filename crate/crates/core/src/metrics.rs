//! Estimation-accuracy metrics against simulation ground truth.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::column_space_basis;
use crate::simulate::GroundTruth;
use crate::vem::{extract_factors, FitResult};

/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStat {
    pub value: f64,
    /// Numerical rank of the estimate.
    pub rank: usize,
}

/// Share of `d0`'s energy inside the column space of `dhat`:
/// `tr(D0' P D0) / tr(D0' D0)` with `P` the projection onto `col(dhat)`.
pub fn trace_stat(dhat: &DMatrix<f64>, d0: &DMatrix<f64>) -> Result<f64> {
    trace_stat_detailed(dhat, d0).map(|t| t.value)
}

pub fn trace_stat_detailed(dhat: &DMatrix<f64>, d0: &DMatrix<f64>) -> Result<TraceStat> {
    if dhat.nrows() != d0.nrows() {
        return Err(Error::Dimension(format!(
            "trace statistic needs equal row counts, got {} and {}",
            dhat.nrows(),
            d0.nrows()
        )));
    }
    let denom = d0.norm_squared();
    if !(denom > 0.0) {
        return Err(Error::Numeric("reference matrix is identically zero".into()));
    }
    let basis = column_space_basis(dhat, RANK_RTOL);
    let proj = basis.transpose() * d0;
    Ok(TraceStat {
        value: (proj.norm_squared() / denom).clamp(0.0, 1.0),
        rank: basis.ncols(),
    })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean trace statistic over matched blocks. Blocks whose reference is
/// identically zero (or empty) are skipped; `None` if no block remains.
pub fn mean_trace(est: &[DMatrix<f64>], truth: &[DMatrix<f64>]) -> Result<Option<f64>> {
    if est.len() != truth.len() {
        return Err(Error::Dimension(format!("{} estimates for {} references", est.len(), truth.len())));
    }
    let mut vals = Vec::with_capacity(est.len());
    for (e, t) in est.iter().zip(truth) {
        if t.is_empty() || t.norm_squared() == 0.0 {
            continue;
        }
        vals.push(trace_stat(e, t)?);
    }
    Ok(mean(&vals))
}

/// Mean over studies of the study-shared factor trace statistic.
pub fn mean_trace_f(fhat: &[DMatrix<f64>], f0: &[DMatrix<f64>]) -> Result<Option<f64>> {
    mean_trace(fhat, f0)
}

pub fn mean_trace_h(hhat: &[DMatrix<f64>], h0: &[DMatrix<f64>]) -> Result<Option<f64>> {
    mean_trace(hhat, h0)
}

/// `V_s` are compared as `n_s x M` matrices; unavailable when the truth is zero.
pub fn mean_trace_v(vhat: &[DMatrix<f64>], v0: &[DMatrix<f64>]) -> Result<Option<f64>> {
    mean_trace(vhat, v0)
}

pub fn mean_trace_a(ahat: &[DMatrix<f64>], a0: &[DMatrix<f64>]) -> Result<Option<f64>> {
    mean_trace(ahat, a0)
}

/// Mean over all `(s, m)` of the study-specific loading trace statistic.
pub fn mean_trace_b(bhat: &[Vec<DMatrix<f64>>], b0: &[Vec<DMatrix<f64>>]) -> Result<Option<f64>> {
    if bhat.len() != b0.len() {
        return Err(Error::Dimension("study counts differ".into()));
    }
    let est: Vec<_> = bhat.iter().flatten().cloned().collect();
    let tru: Vec<_> = b0.iter().flatten().cloned().collect();
    mean_trace(&est, &tru)
}

/// Mean absolute entrywise error between stacked `p x d` coefficient matrices.
pub fn beta_mae(betahat: &DMatrix<f64>, beta0: &DMatrix<f64>) -> Result<f64> {
    if betahat.shape() != beta0.shape() {
        return Err(Error::Dimension(format!(
            "coefficient shapes differ: {:?} vs {:?}",
            betahat.shape(),
            beta0.shape()
        )));
    }
    if betahat.is_empty() {
        return Err(Error::Dimension("empty coefficient matrix".into()));
    }
    Ok((betahat - beta0).abs().sum() / betahat.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mt_f: Option<f64>,
    pub mt_h: Option<f64>,
    pub mt_v: Option<f64>,
    pub mt_a: Option<f64>,
    pub mt_b: Option<f64>,
    pub me_beta: f64,
}

/// All benchmark metrics of a fit against the truth it was simulated from.
pub fn evaluate(fit: &FitResult, truth: &GroundTruth) -> Result<Metrics> {
    let fac = extract_factors(&fit.phi);
    let t = &truth.theta0;
    Ok(Metrics {
        mt_f: mean_trace_f(&fac.f, &truth.f0)?,
        mt_h: mean_trace_h(&fac.h, &truth.h0)?,
        mt_v: mean_trace_v(&fac.v, &truth.v0)?,
        mt_a: mean_trace_a(&fit.theta.a, &t.a)?,
        mt_b: mean_trace_b(&fit.theta.b, &t.b)?,
        me_beta: beta_mae(&fit.theta.stacked_beta(), &t.stacked_beta())?,
    })
}
