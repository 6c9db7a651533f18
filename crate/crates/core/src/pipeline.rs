//! End-to-end calibration: budgets, LP weights, sampling probabilities,
//! per-secret noise multipliers and the global noise multiplier.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::accountant::{composed_kl, group_key, poisson_binomial, DiscretePMF, RoundMechanism};
use crate::divergence::{budget_from_targets, invert_posterior, KLBudget, DEFAULT_INVERT_TOL};
use crate::domain::{RunConfig, SecretMap};
use crate::error::{Error, Result};
use crate::lp::{build_lp, solve, WeightVector};

/// Default relative tolerance of the noise-multiplier search.
pub const DEFAULT_SIGMA_REL_TOL: f64 = 1e-4;
/// The bracket search starts here and doubles (or halves) from it.
const SIGMA_START: f64 = 1e-3;
const SIGMA_MAX: f64 = 1e12;

/// Weights, sampling probabilities and noise multiplier for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    /// Example ids in the order `weights` and `probs` refer to.
    pub example_ids: Vec<String>,
    pub weights: WeightVector,
    pub probs: Vec<f64>,
    pub batch_target: f64,
    pub rounds: u32,
    /// Zero only when no secret constrains the mechanism.
    pub sigma: f64,
}

impl SamplingPlan {
    /// `sum_i rho_i`, equal to the batch target up to rounding.
    pub fn expected_batch_size(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// Per-secret calibration outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecretCalibration {
    pub secret_id: String,
    pub prior_p: f64,
    pub target_r: f64,
    pub mu: f64,
    pub group_size: usize,
    /// Minimal noise multiplier for this secret alone; 0 when vacuous.
    pub sigma_j: f64,
    /// Composed KL at the global noise multiplier.
    pub achieved_kl: f64,
    /// Posterior bound implied by `achieved_kl`.
    pub achieved_r: f64,
    pub vacuous: bool,
}

impl SecretCalibration {
    /// The certified posterior stays within the target. The slack absorbs the
    /// bisection tolerance of the posterior inversion.
    pub fn is_protected(&self) -> bool {
        self.achieved_r <= self.target_r + DEFAULT_INVERT_TOL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub lp_constant: f64,
    pub sigma: f64,
    pub fraction_retained: f64,
    pub secrets: Vec<SecretCalibration>,
}

impl CalibrationReport {
    pub fn violations(&self) -> impl Iterator<Item = &SecretCalibration> {
        self.secrets.iter().filter(|s| !s.is_protected())
    }
}

/// `rho_i = B w_i / sum w`. Fails instead of clamping when some `rho_i`
/// would exceed 1.
pub fn sampling_probs(weights: &WeightVector, batch_target: f64) -> Result<Vec<f64>> {
    if !(batch_target.is_finite() && batch_target > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "batch target must be positive, got {batch_target}"
        )));
    }
    let total: f64 = weights.w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument(
            "all weights are zero; nothing to sample".into(),
        ));
    }
    let max_weight = weights.w.iter().copied().fold(0.0, f64::max);
    if max_weight * batch_target > total * (1.0 + 1e-12) {
        return Err(Error::BatchTooLarge {
            batch_target,
            max_weight,
            total_weight: total,
        });
    }
    Ok(weights
        .w
        .iter()
        .map(|w| (batch_target * w / total).min(1.0))
        .collect())
}

/// Result of the per-secret noise search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SecretSigma {
    /// No example of the secret is ever sampled; nothing to protect.
    Vacuous,
    Noise(f64),
}

impl SecretSigma {
    pub fn value(self) -> f64 {
        match self {
            SecretSigma::Vacuous => 0.0,
            SecretSigma::Noise(s) => s,
        }
    }
}

fn kl_at(pmf: &DiscretePMF, sigma: f64, rounds: u32) -> Result<f64> {
    composed_kl(&RoundMechanism::new(pmf.clone(), sigma)?, rounds)
}

/// Smallest noise multiplier (to relative tolerance `rel_tol`) whose
/// `rounds`-fold composed KL for the group stays within `mu`.
///
/// The returned `sigma` satisfies `KL(sigma) <= mu < KL(sigma * (1 - rel_tol))`.
pub fn calibrate_secret_sigma(
    group_probs: &[f64],
    rounds: u32,
    mu: f64,
    rel_tol: f64,
) -> Result<SecretSigma> {
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "KL budget must be positive, got {mu}"
        )));
    }
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "relative tolerance must lie in (0, 1), got {rel_tol}"
        )));
    }
    let pmf = poisson_binomial(group_probs)?;
    if pmf.is_null() {
        return Ok(SecretSigma::Vacuous);
    }
    if mu.is_infinite() {
        return Ok(SecretSigma::Vacuous);
    }

    // bracket: kl(lo) > mu >= kl(hi)
    let (mut lo, mut hi);
    if kl_at(&pmf, SIGMA_START, rounds)? > mu {
        lo = SIGMA_START;
        hi = 2.0 * SIGMA_START;
        while kl_at(&pmf, hi, rounds)? > mu {
            lo = hi;
            hi *= 2.0;
            if hi > SIGMA_MAX {
                return Err(Error::InvalidArgument(format!(
                    "no noise multiplier below {SIGMA_MAX} meets budget {mu}"
                )));
            }
        }
    } else {
        hi = SIGMA_START;
        lo = 0.5 * SIGMA_START;
        while kl_at(&pmf, lo, rounds)? <= mu {
            hi = lo;
            lo *= 0.5;
        }
    }

    while lo < hi * (1.0 - rel_tol) {
        let mid = (lo * hi).sqrt();
        if kl_at(&pmf, mid, rounds)? <= mu {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(SecretSigma::Noise(hi))
}

/// Runs the full calibration for one configuration.
pub fn calibrate(map: &SecretMap, config: &RunConfig) -> Result<(SamplingPlan, CalibrationReport)> {
    calibrate_with_tol(map, config, DEFAULT_SIGMA_REL_TOL)
}

pub fn calibrate_with_tol(
    map: &SecretMap,
    config: &RunConfig,
    rel_tol: f64,
) -> Result<(SamplingPlan, CalibrationReport)> {
    config.validate()?;
    let filtered;
    let map = if config.drop_secretless {
        filtered = map.filter_secretless();
        &filtered
    } else {
        map
    };

    let budgets: Vec<KLBudget> = map
        .secrets()
        .iter()
        .map(budget_from_targets)
        .collect::<Result<_>>()?;
    let lp = build_lp(map, &budgets, config.lp_constant)?;
    let weights = solve(&lp);
    let probs = sampling_probs(&weights, config.batch_target)?;

    let groups: Vec<Vec<f64>> = map
        .incidence_lists()
        .iter()
        .map(|inc| inc.iter().map(|&i| probs[i]).collect())
        .collect();

    // identical (group, budget) pairs share one search
    let mut searches: HashMap<(Vec<u64>, u64), SecretSigma> = HashMap::new();
    let mut sigma_js = Vec::with_capacity(groups.len());
    for ((spec, budget), group) in map.secrets().iter().zip(&budgets).zip(&groups) {
        // r = 1 asks for no protection at all
        if spec.posterior_r >= 1.0 {
            sigma_js.push(SecretSigma::Vacuous);
            continue;
        }
        let key = (group_key(group), budget.mu.to_bits());
        let s = match searches.get(&key) {
            Some(s) => *s,
            None => {
                let s = calibrate_secret_sigma(group, config.rounds, budget.mu, rel_tol)?;
                searches.insert(key, s);
                s
            }
        };
        sigma_js.push(s);
    }
    let sigma = sigma_js.iter().map(|s| s.value()).fold(0.0, f64::max);

    let mut achieved: HashMap<Vec<u64>, f64> = HashMap::new();
    let mut records = Vec::with_capacity(groups.len());
    for (((spec, budget), group), sj) in map
        .secrets()
        .iter()
        .zip(&budgets)
        .zip(&groups)
        .zip(&sigma_js)
    {
        let key = group_key(group);
        let kl = match achieved.get(&key) {
            Some(v) => *v,
            None => {
                let pmf = poisson_binomial(group)?;
                let v = if pmf.is_null() {
                    0.0
                } else if sigma > 0.0 {
                    kl_at(&pmf, sigma, config.rounds)?
                } else {
                    f64::INFINITY
                };
                achieved.insert(key, v);
                v
            }
        };
        let achieved_r = if kl.is_finite() {
            invert_posterior(spec.prior_p, kl, DEFAULT_INVERT_TOL)?
        } else {
            1.0
        };
        records.push(SecretCalibration {
            secret_id: spec.id.clone(),
            prior_p: spec.prior_p,
            target_r: spec.posterior_r,
            mu: budget.mu,
            group_size: group.len(),
            sigma_j: sj.value(),
            achieved_kl: kl,
            achieved_r,
            vacuous: matches!(sj, SecretSigma::Vacuous),
        });
    }

    let n = map.num_examples();
    let fraction_retained = if n == 0 {
        0.0
    } else {
        weights.objective / n as f64
    };
    let plan = SamplingPlan {
        example_ids: map.examples().iter().map(|e| e.id.clone()).collect(),
        weights,
        probs,
        batch_target: config.batch_target,
        rounds: config.rounds,
        sigma,
    };
    let report = CalibrationReport {
        lp_constant: config.lp_constant,
        sigma,
        fraction_retained,
        secrets: records,
    };
    Ok((plan, report))
}
