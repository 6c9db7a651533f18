//! Bernoulli KL divergence and the conversion between (prior, posterior)
//! targets and KL budgets.
//!
//! If every pair of output distributions of a mechanism is within KL
//! divergence `KL(Bern(r) || Bern(p))`, then no adversary guessing among
//! candidates whose prior mass is at most `p` succeeds with probability more
//! than `r`. The same statement holds for any f-divergence with strictly
//! convex `f`; only the KL instance is provided here. All values are in nats.

use serde::{Deserialize, Serialize};

use crate::domain::SecretSpec;
use crate::error::{Error, Result};

/// Default absolute tolerance for [`invert_posterior`].
pub const DEFAULT_INVERT_TOL: f64 = 1e-12;

/// KL budget `mu` (nats) allotted to one secret.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KLBudget {
    pub secret_id: String,
    pub mu: f64,
}

/// `KL(Bern(r) || Bern(p))` with the convention `0 ln 0 = 0`.
pub fn bern_kl(r: f64, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "prior p must lie in (0, 1), got {p}"
        )));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidArgument(format!(
            "posterior r must lie in [0, 1], got {r}"
        )));
    }
    Ok(bern_kl_unchecked(r, p))
}

pub(crate) fn bern_kl_unchecked(r: f64, p: f64) -> f64 {
    // logs of the ratio are taken separately so p ~ 1e-10 does not lose digits
    let head = if r == 0.0 { 0.0 } else { r * (r.ln() - p.ln()) };
    let tail = if r == 1.0 {
        0.0
    } else {
        (1.0 - r) * ((p - r) / (1.0 - p)).ln_1p()
    };
    (head + tail).max(0.0)
}

/// `mu_j = KL(Bern(r_j) || Bern(p_j))` for one secret.
pub fn budget_from_targets(spec: &SecretSpec) -> Result<KLBudget> {
    spec.validate()?;
    Ok(KLBudget {
        secret_id: spec.id.clone(),
        mu: bern_kl_unchecked(spec.posterior_r, spec.prior_p),
    })
}

/// Smallest posterior `r` in `[p, 1]` with `bern_kl(r, p) >= mu`, found by
/// bisection to absolute tolerance `tol`.
///
/// The upper end of the final bracket is returned, so the result never
/// understates the posterior implied by `mu`. Saturates at 1 once
/// `mu >= -ln p`.
pub fn invert_posterior(p: f64, mu: f64, tol: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "prior p must lie in (0, 1), got {p}"
        )));
    }
    if mu.is_nan() || mu < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "KL budget must be nonnegative, got {mu}"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    if mu == 0.0 {
        return Ok(p);
    }
    if mu >= -p.ln() {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (p, 1.0);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if bern_kl_unchecked(mid, p) < mu {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}
