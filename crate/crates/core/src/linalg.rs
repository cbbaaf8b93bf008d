//! Small dense helpers over nalgebra: sorted thin SVD and guarded SPD solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative jitter levels tried, in order, when a Cholesky factorization fails.
const JITTER: [f64; 2] = [1e-8, 1e-6];

/// Thin SVD `m = U diag(s) V^T` with singular values sorted descending.
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

pub fn thin_svd(m: &DMatrix<f64>) -> ThinSvd {
    let (r, c) = m.shape();
    let k = r.min(c);
    if k == 0 {
        return ThinSvd {
            u: DMatrix::zeros(r, 0),
            s: DVector::zeros(0),
            v: DMatrix::zeros(c, 0),
        };
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..k).collect();
    // stable sort keeps the original column order among exact ties
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    ThinSvd {
        u: DMatrix::from_fn(r, k, |i, j| u[(i, order[j])]),
        s: DVector::from_fn(k, |j, _| sv[order[j]]),
        v: DMatrix::from_fn(c, k, |i, j| v_t[(order[j], i)]),
    }
}

/// Singular values sorted descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows().min(m.ncols()) == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

fn mean_diag(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().max(1);
    (m.diagonal().sum() / n as f64).abs().max(f64::MIN_POSITIVE)
}

fn cholesky_guarded(m: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch);
    }
    let scale = mean_diag(m);
    for eps in JITTER {
        let mut jittered = m.clone();
        for i in 0..m.nrows() {
            jittered[(i, i)] += eps * scale;
        }
        if let Some(ch) = jittered.cholesky() {
            return Ok(ch);
        }
    }
    Err(Error::Numeric(format!(
        "{}x{} matrix is not positive definite even after jitter",
        m.nrows(),
        m.ncols()
    )))
}

/// Inverse and log-determinant of a symmetric positive-definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if m.nrows() == 0 {
        return Ok((DMatrix::zeros(0, 0), 0.0));
    }
    let ch = cholesky_guarded(m)?;
    let logdet = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let mut inv = ch.inverse();
    symmetrize(&mut inv);
    Ok((inv, logdet))
}

/// Solve `m x = rhs` for symmetric positive-definite `m`.
pub fn spd_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, rhs.ncols()));
    }
    Ok(cholesky_guarded(m)?.solve(rhs))
}

/// Log-determinant of an SPD matrix, failing (no jitter) if it is not SPD.
pub fn spd_logdet(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let ch = m.clone().cholesky().ok_or_else(|| {
        Error::Numeric(format!("{}x{} covariance is not positive definite", m.nrows(), m.ncols()))
    })?;
    Ok(2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Moore-Penrose pseudo-inverse solve basis: orthonormal basis of the column
/// space of `m` (columns of `U` whose singular values exceed `rtol * s_max`).
pub fn column_space_basis(m: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let svd = thin_svd(m);
    let smax = svd.s.iter().copied().fold(0.0, f64::max);
    let rank = svd.s.iter().filter(|&&s| s > rtol * smax && s > 0.0).count();
    svd.u.columns(0, rank).into_owned()
}
