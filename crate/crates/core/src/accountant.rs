//! KL accounting for the subsampled Gaussian mechanism.
//!
//! For a group of examples sampled independently with probabilities
//! `rho_1..rho_k`, one round of DP-SGD is dominated by the pair
//! `P = N(S, sigma^2)` with `S ~ sum_i Bern(rho_i)` and `Q = N(0, sigma^2)`.
//! `T` rounds compose to the product pair, and KL adds across rounds.

use std::cell::Cell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

const SQRT_2PI_LN: f64 = 0.918_938_533_204_672_8; // ln sqrt(2 pi)

/// Mixture components lighter than this are dropped before integration.
const COMPONENT_FLOOR: f64 = 1e-25;
/// Width of the integration window around each mixture component, in sigmas.
const WINDOW_SIGMAS: f64 = 10.0;
const QUAD_REL_TOL: f64 = 1e-10;
const QUAD_MIN_DEPTH: u32 = 3;
const QUAD_MAX_DEPTH: u32 = 48;
/// Relative change below which successive estimates are floating-point noise.
const QUAD_NOISE_FLOOR: f64 = 1e-13;
const QUAD_MAX_EVALS: usize = 20_000_000;

/// Probability mass function over integer shifts `0..=k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiscretePMF {
    probs: Vec<f64>,
}

impl DiscretePMF {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument(
                "pmf must have at least one entry".into(),
            ));
        }
        if let Some(bad) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "pmf entry {bad} is not a probability"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "pmf sums to {total}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    /// All mass on shift `k`.
    pub fn point_mass(k: usize) -> Self {
        let mut probs = vec![0.0; k + 1];
        probs[k] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Largest representable shift.
    pub fn max_shift(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(k, p)| k as f64 * p)
            .sum()
    }

    /// True when all mass sits at shift 0, i.e. the pair is identical.
    pub fn is_null(&self) -> bool {
        self.probs.iter().skip(1).all(|&p| p == 0.0)
    }
}

/// Distribution of the number of successes among independent Bernoulli trials,
/// by iterative convolution.
pub fn poisson_binomial(rhos: &[f64]) -> Result<DiscretePMF> {
    if let Some(bad) = rhos.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::InvalidArgument(format!(
            "sampling probability {bad} outside [0, 1]"
        )));
    }
    let mut pmf = Vec::with_capacity(rhos.len() + 1);
    pmf.push(1.0);
    for &rho in rhos {
        pmf.push(0.0);
        for k in (1..pmf.len()).rev() {
            pmf[k] = pmf[k] * (1.0 - rho) + pmf[k - 1] * rho;
        }
        pmf[0] *= 1.0 - rho;
    }
    Ok(DiscretePMF { probs: pmf })
}

/// Canonical key for a multiset of sampling probabilities. Groups with equal
/// keys have identical shift laws and therefore identical accounting.
pub fn group_key(rhos: &[f64]) -> Vec<u64> {
    let mut key: Vec<u64> = rhos
        .iter()
        .filter(|&&r| r > 0.0)
        .map(|r| r.to_bits())
        .collect();
    key.sort_unstable();
    key
}

/// One round of the dominating pair: `N(S, sigma^2)` against `N(0, sigma^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMechanism {
    pub shift_pmf: DiscretePMF,
    pub sigma: f64,
}

impl RoundMechanism {
    pub fn new(shift_pmf: DiscretePMF, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise multiplier must be positive, got {sigma}"
            )));
        }
        Ok(Self { shift_pmf, sigma })
    }

    /// Mechanism for a group with the given sampling probabilities.
    pub fn for_group(rhos: &[f64], sigma: f64) -> Result<Self> {
        Self::new(poisson_binomial(rhos)?, sigma)
    }

    /// Privacy loss `ln P(x)/Q(x)` at observation `x`.
    pub fn privacy_loss(&self, x: f64) -> f64 {
        LossFn::new(self).eval(x)
    }

    /// Reusable evaluator for [`RoundMechanism::privacy_loss`].
    pub fn loss_fn(&self) -> LossFn {
        LossFn::new(self)
    }
}

/// `x -> ln sum_k w_k exp((2 k x - k^2) / (2 sigma^2))`, convex in `x`.
#[derive(Debug, Clone)]
pub struct LossFn {
    /// (intercept, slope) per retained component
    terms: Vec<(f64, f64)>,
    shifts: Vec<f64>,
    log_weights: Vec<f64>,
    sigma: f64,
}

impl LossFn {
    fn new(mech: &RoundMechanism) -> Self {
        let probs = mech.shift_pmf.probs();
        let kept: f64 = probs.iter().filter(|&&w| w >= COMPONENT_FLOOR).sum();
        let inv_var = 1.0 / (mech.sigma * mech.sigma);
        let mut terms = Vec::new();
        let mut shifts = Vec::new();
        let mut log_weights = Vec::new();
        for (k, &w) in probs.iter().enumerate() {
            if w < COMPONENT_FLOOR {
                continue;
            }
            let k = k as f64;
            let lw = (w / kept).ln();
            terms.push((lw - 0.5 * k * k * inv_var, k * inv_var));
            shifts.push(k);
            log_weights.push(lw);
        }
        Self {
            terms,
            shifts,
            log_weights,
            sigma: mech.sigma,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for &(a, b) in &self.terms {
            max = max.max(a + b * x);
        }
        if max == f64::NEG_INFINITY {
            return max;
        }
        let s: f64 = self
            .terms
            .iter()
            .map(|&(a, b)| (a + b * x - max).exp())
            .sum();
        max + s.ln()
    }

    /// Retained mixture shifts and their (renormalized) log weights.
    pub fn components(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.shifts
            .iter()
            .copied()
            .zip(self.log_weights.iter().copied())
    }

    /// Union of `[k - 10 sigma, k + 10 sigma]` over shift 0 (the support of
    /// `Q`) and every retained shift.
    fn windows(&self) -> Vec<(f64, f64)> {
        let half = WINDOW_SIGMAS * self.sigma;
        let mut out: Vec<(f64, f64)> = Vec::new();
        let zero = (self.shifts.first() != Some(&0.0)).then_some(0.0);
        for k in zero.into_iter().chain(self.shifts.iter().copied()) {
            let (lo, hi) = (k - half, k + half);
            match out.last_mut() {
                Some(last) if lo <= last.1 => last.1 = hi,
                _ => out.push((lo, hi)),
            }
        }
        out
    }
}

/// `ln(e^L (L - 1) + 1)`, the log of `t ln t - t + 1` at `t = e^L`, for `L <= 1`.
fn log_bregman(l: f64) -> f64 {
    if l.abs() < 0.1 {
        // sum_{n>=2} L^n (n - 1) / n!
        let mut term = l; // L^n / n! at n = 1
        let mut sum = 0.0;
        for n in 2..24 {
            term *= l / n as f64;
            sum += term * (n - 1) as f64;
        }
        sum.ln()
    } else {
        (l.exp() * (l - 1.0) + 1.0).ln()
    }
}

struct KlIntegrand<'a> {
    loss: &'a LossFn,
    inv_2var: f64,
    log_norm: f64,
}

impl KlIntegrand<'_> {
    /// `p ln(p/q) - p + q >= 0`; integrates to the KL.
    fn eval(&self, x: f64) -> f64 {
        let l = self.loss.eval(x);
        let log_q = -x * x * self.inv_2var - self.log_norm;
        if l <= 1.0 {
            return (log_q + log_bregman(l)).exp();
        }
        // p(L - 1) + q, with p summed per component so that large shifts at
        // small sigma do not cancel huge exponents against each other
        let p: f64 = self
            .loss
            .components()
            .map(|(k, lw)| (lw - (x - k) * (x - k) * self.inv_2var - self.log_norm).exp())
            .sum();
        p * (l - 1.0) + log_q.exp()
    }
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adaptive_simpson<F: Fn(f64) -> f64>(
    f: &F,
    budget: &Cell<usize>,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    let converged = depth >= QUAD_MIN_DEPTH
        && (delta.abs() <= 15.0 * tol || delta.abs() <= QUAD_NOISE_FLOOR * (left + right).abs());
    if converged {
        return Ok(left + right + delta / 15.0);
    }
    let remaining = budget.get().saturating_sub(2);
    if depth >= QUAD_MAX_DEPTH || remaining == 0 {
        return Err(Error::QuadratureDiverged { lo: a, hi: b });
    }
    budget.set(remaining);
    let l = adaptive_simpson(f, budget, a, m, fa, flm, fm, left, 0.5 * tol, depth + 1)?;
    let r = adaptive_simpson(f, budget, m, b, fm, frm, fb, right, 0.5 * tol, depth + 1)?;
    Ok(l + r)
}

/// Splits each window into panels no wider than `sigma`.
fn panels(windows: &[(f64, f64)], sigma: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for &(lo, hi) in windows {
        let n = ((hi - lo) / sigma).ceil().max(1.0) as usize;
        let w = (hi - lo) / n as f64;
        for i in 0..n {
            let a = lo + w * i as f64;
            let b = if i + 1 == n { hi } else { a + w };
            out.push((a, b));
        }
    }
    out
}

/// `KL(P || Q)` for one round, by adaptive Simpson quadrature of
/// `p ln(p/q) - p + q` over `[-10 sigma, k_max + 10 sigma]`.
///
/// The integrand is nonnegative, so there is no cancellation even when the
/// divergence is tiny, and it is evaluated in log space so large shifts at
/// small `sigma` do not overflow.
pub fn round_kl(mech: &RoundMechanism) -> Result<f64> {
    if mech.shift_pmf.is_null() {
        return Ok(0.0);
    }
    let loss = mech.loss_fn();
    let sigma = mech.sigma;
    let integrand = KlIntegrand {
        loss: &loss,
        inv_2var: 0.5 / (sigma * sigma),
        log_norm: sigma.ln() + SQRT_2PI_LN,
    };
    let f = |x: f64| integrand.eval(x);

    let panels = panels(&loss.windows(), sigma);
    let coarse: Vec<(f64, f64, f64, f64)> = panels
        .iter()
        .map(|&(a, b)| (f(a), f(0.5 * (a + b)), f(b), 0.0))
        .collect();
    let estimate: f64 = panels
        .iter()
        .zip(&coarse)
        .map(|(&(a, b), &(fa, fm, fb, _))| simpson(a, b, fa, fm, fb))
        .sum();
    if !estimate.is_finite() {
        return Err(Error::QuadratureDiverged {
            lo: panels[0].0,
            hi: panels[panels.len() - 1].1,
        });
    }
    let tol = QUAD_REL_TOL * estimate.abs().max(f64::MIN_POSITIVE) / panels.len() as f64;
    let budget = Cell::new(QUAD_MAX_EVALS);
    let mut total = 0.0;
    for (&(a, b), &(fa, fm, fb, _)) in panels.iter().zip(&coarse) {
        let whole = simpson(a, b, fa, fm, fb);
        total += adaptive_simpson(&f, &budget, a, b, fa, fm, fb, whole, tol, 0)?;
    }
    Ok(total.max(0.0))
}

/// KL of the `rounds`-fold product pair, which is additive across rounds.
pub fn composed_kl(mech: &RoundMechanism, rounds: u32) -> Result<f64> {
    if rounds == 0 {
        return Err(Error::InvalidArgument("rounds must be at least 1".into()));
    }
    Ok(rounds as f64 * round_kl(mech)?)
}

/// Discretized privacy-loss distribution and its blow-up mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PLDDiagnostic {
    pub grid_step: f64,
    /// `sum_i exp(v_i) p_i`; may be `inf` when the sum overflows.
    pub total_blowup_mass: f64,
    /// Natural log of `total_blowup_mass`, always finite for a nonempty support.
    pub log_total_blowup_mass: f64,
    /// `(v_i, p_i)` pairs, sorted by loss value.
    pub support: Vec<(f64, f64)>,
}

fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// `Pr[a < Z <= b]` for standard normal `Z`, computed on the tail that keeps
/// precision.
fn normal_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        normal_sf(a) - normal_sf(b)
    } else if b <= 0.0 {
        normal_sf(-b) - normal_sf(-a)
    } else {
        1.0 - normal_sf(-a) - normal_sf(b)
    }
}

/// Cells per sigma used when discretizing the observation axis.
const PLD_CELLS_PER_SIGMA: f64 = 64.0;

/// Discretizes the privacy loss `ln P(x)/Q(x)`, `x ~ P`, onto a grid of
/// width `grid_step`, rounding every loss up, and reports
/// `sum_i exp(v_i) p_i`.
///
/// The observation axis is cut into cells; each cell's loss is taken at the
/// larger endpoint (the loss is convex) and then rounded up to the grid.
pub fn pld_blowup_diagnostic(mech: &RoundMechanism, grid_step: f64) -> Result<PLDDiagnostic> {
    if !(grid_step.is_finite() && grid_step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "grid step must be positive, got {grid_step}"
        )));
    }
    let loss = mech.loss_fn();
    let sigma = mech.sigma;
    let components: Vec<(f64, f64)> = loss.components().map(|(k, lw)| (k, lw.exp())).collect();

    let mut bins: BTreeMap<i64, f64> = BTreeMap::new();
    for (lo, hi) in loss.windows() {
        let n = ((hi - lo) / sigma * PLD_CELLS_PER_SIGMA).ceil().max(1.0) as usize;
        let w = (hi - lo) / n as f64;
        let mut la = loss.eval(lo);
        for i in 0..n {
            let a = lo + w * i as f64;
            let b = if i + 1 == n { hi } else { a + w };
            let lb = loss.eval(b);
            let mass: f64 = components
                .iter()
                .map(|&(k, wk)| wk * normal_mass((a - k) / sigma, (b - k) / sigma))
                .sum();
            if mass > 0.0 {
                let bin = (la.max(lb) / grid_step).ceil() as i64;
                *bins.entry(bin).or_insert(0.0) += mass;
            }
            la = lb;
        }
    }

    let support: Vec<(f64, f64)> = bins
        .into_iter()
        .map(|(bin, p)| (bin as f64 * grid_step, p))
        .collect();
    let log_terms: Vec<f64> = support.iter().map(|&(v, p)| v + p.ln()).collect();
    let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = max + log_terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    Ok(PLDDiagnostic {
        grid_step,
        total_blowup_mass: log_total.exp(),
        log_total_blowup_mass: log_total,
        support,
    })
}
