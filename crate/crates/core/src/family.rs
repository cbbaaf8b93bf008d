//! Exponential-family link and density primitives for the three modality types.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::ModalityType;

/// Linear predictors are clamped to this range before exponentiation.
pub const LINK_CLAMP: f64 = 30.0;

#[inline]
pub(crate) fn clamp_link(y: f64) -> f64 {
    y.clamp(-LINK_CLAMP, LINK_CLAMP)
}

#[inline]
pub fn logistic(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(y))` without overflow.
#[inline]
pub fn softplus(y: f64) -> f64 {
    if y > 0.0 {
        y + (-y).exp().ln_1p()
    } else {
        y.exp().ln_1p()
    }
}

pub fn ln_factorial(x: f64) -> f64 {
    ln_gamma(x + 1.0)
}

pub fn ln_choose(n: u32, k: f64) -> f64 {
    let n = n as f64;
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

/// Mean of an observation given its link-scale value `y`.
pub fn mean_fn(kind: ModalityType, y: f64, trials: u32) -> f64 {
    match kind {
        ModalityType::Continuous => y,
        ModalityType::Count => clamp_link(y).exp(),
        ModalityType::Binomial => trials as f64 * logistic(clamp_link(y)),
    }
}

/// Whether `x` lies in the support of the given type.
pub fn in_support(kind: ModalityType, x: f64, trials: u32) -> bool {
    match kind {
        ModalityType::Continuous => x.is_finite(),
        ModalityType::Count => x.is_finite() && x >= 0.0 && x.fract() == 0.0,
        ModalityType::Binomial => {
            x.is_finite() && x >= 0.0 && x.fract() == 0.0 && x <= trials as f64
        }
    }
}

/// Log density of `x` given link-scale value `y`.
///
/// For continuous variables `y` is the linear predictor without the
/// overdispersion term, so the density is `N(x; y, lambda)`. `lambda` is
/// ignored for the other two types.
pub fn log_density(kind: ModalityType, x: f64, y: f64, trials: u32, lambda: f64) -> Result<f64> {
    if !in_support(kind, x, trials) {
        return Err(Error::Domain(format!(
            "x = {x} is outside the support of a {kind} variable (trials = {trials})"
        )));
    }
    Ok(match kind {
        ModalityType::Continuous => {
            if lambda <= 0.0 {
                return Err(Error::Domain(format!("variance {lambda} must be positive")));
            }
            let r = x - y;
            -0.5 * (2.0 * std::f64::consts::PI * lambda).ln() - 0.5 * r * r / lambda
        }
        ModalityType::Count => {
            let y = clamp_link(y);
            x * y - y.exp() - ln_factorial(x)
        }
        ModalityType::Binomial => {
            let y = clamp_link(y);
            ln_choose(trials, x) + x * y - trials as f64 * softplus(y)
        }
    })
}
