//! Monte-Carlo reconstruction game.
//!
//! A secret takes one of `k` candidate values drawn from a prior whose largest
//! mass is `p`. Candidate `c` is embedded as the unit direction `e_c`, and each
//! round releases `S_t e_c + N(0, sigma^2 I_k)` with `S_t` drawn from the
//! group's Poisson-binomial shift law, the per-round sensitivity allowed by
//! clipping. The adversary sees all `T` rounds, computes the exact posterior
//! over candidates and guesses its mode. Its success rate is compared with the
//! posterior bound certified through the KL accounting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::accountant::{composed_kl, poisson_binomial, RoundMechanism};
use crate::divergence::{invert_posterior, DEFAULT_INVERT_TOL};
use crate::error::{Error, Result};

const TRIALS_PER_STREAM: u64 = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionGame {
    pub prior: Vec<f64>,
    pub group_probs: Vec<f64>,
    pub sigma: f64,
    pub rounds: u32,
    pub trials: u64,
}

impl ReconstructionGame {
    pub fn new(
        prior: Vec<f64>,
        group_probs: Vec<f64>,
        sigma: f64,
        rounds: u32,
        trials: u64,
    ) -> Result<Self> {
        let game = Self {
            prior,
            group_probs,
            sigma,
            rounds,
            trials,
        };
        game.validate()?;
        Ok(game)
    }

    /// Uniform prior over `k` candidates.
    pub fn uniform(
        k: usize,
        group_probs: Vec<f64>,
        sigma: f64,
        rounds: u32,
        trials: u64,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("need at least one candidate".into()));
        }
        Self::new(vec![1.0 / k as f64; k], group_probs, sigma, rounds, trials)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prior.is_empty() {
            return Err(Error::InvalidArgument("need at least one candidate".into()));
        }
        if self.prior.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidArgument(
                "prior entries must be nonnegative".into(),
            ));
        }
        let total: f64 = self.prior.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "prior sums to {total}, not 1"
            )));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise multiplier must be positive, got {}",
                self.sigma
            )));
        }
        if self.rounds == 0 || self.trials == 0 {
            return Err(Error::InvalidArgument(
                "rounds and trials must be at least 1".into(),
            ));
        }
        poisson_binomial(&self.group_probs).map(|_| ())
    }

    pub fn k(&self) -> usize {
        self.prior.len()
    }

    /// Largest prior mass, the `p` of the guarantee.
    pub fn max_prior(&self) -> f64 {
        self.prior.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameResult {
    pub trials: u64,
    /// Success rate of the exact-posterior adversary.
    pub empirical_success: f64,
    /// `sqrt(s (1 - s) / trials)`.
    pub stderr: f64,
    /// Success rate of a nearest-mean adversary on the same trials.
    pub plugin_success: f64,
    pub certified_bound: f64,
}

impl GameResult {
    /// One-sided check `success <= bound + 3 stderr`.
    pub fn within_bound(&self) -> bool {
        self.empirical_success <= self.certified_bound + 3.0 * self.stderr
    }
}

/// Posterior bound implied by the composed KL of the group's mechanism.
pub fn certified_bound(p: f64, group_probs: &[f64], sigma: f64, rounds: u32) -> Result<f64> {
    let mech = RoundMechanism::for_group(group_probs, sigma)?;
    let kl = composed_kl(&mech, rounds)?;
    invert_posterior(p, kl, DEFAULT_INVERT_TOL)
}

/// Plays `game.trials` rounds of the reconstruction game.
///
/// Trials are split into fixed blocks, each with its own generator stream,
/// so results do not depend on evaluation order.
pub fn simulate_game(game: &ReconstructionGame, seed: u64) -> Result<GameResult> {
    game.validate()?;
    let k = game.k();
    let rounds = game.rounds as usize;
    let mech = RoundMechanism::for_group(&game.group_probs, game.sigma)?;
    let loss = mech.loss_fn();

    let mut shift_cdf = Vec::new();
    let mut acc = 0.0;
    for &w in mech.shift_pmf.probs() {
        acc += w;
        shift_cdf.push(acc);
    }
    let mut prior_cdf = Vec::with_capacity(k);
    acc = 0.0;
    for &w in &game.prior {
        acc += w;
        prior_cdf.push(acc);
    }
    let log_prior: Vec<f64> = game.prior.iter().map(|w| w.ln()).collect();
    let draw = |cdf: &[f64], u: f64| {
        cdf.partition_point(|&c| c <= u * cdf[cdf.len() - 1])
            .min(cdf.len() - 1)
    };

    // P/Q density ratio as a polynomial in exp(y / sigma^2), so a round costs
    // one exp; falls back to log-space when the product leaves f64 range
    let inv_var = 1.0 / (game.sigma * game.sigma);
    let coef: Vec<f64> = mech
        .shift_pmf
        .probs()
        .iter()
        .enumerate()
        .map(|(k, &w)| w * (-0.5 * (k * k) as f64 * inv_var).exp())
        .collect();
    let ratio = |y: f64| {
        let a = (y * inv_var).exp();
        coef.iter().rev().fold(0.0, |acc, &c| acc * a + c)
    };

    let mut wins = 0u64;
    let mut plugin_wins = 0u64;
    let mut shifts = vec![0.0; rounds];
    let mut ys = vec![0.0; rounds];
    let blocks = game.trials.div_ceil(TRIALS_PER_STREAM);
    for block in 0..blocks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(block);
        let in_block = TRIALS_PER_STREAM.min(game.trials - block * TRIALS_PER_STREAM);
        for _ in 0..in_block {
            let truth = draw(&prior_cdf, rng.random());
            for s in shifts.iter_mut() {
                *s = draw(&shift_cdf, rng.random()) as f64;
            }
            let (mut best, mut best_score) = (0, f64::NEG_INFINITY);
            let (mut nearest, mut best_sum) = (0, f64::NEG_INFINITY);
            for c in 0..k {
                let mut prod = 1.0;
                let mut sum = 0.0;
                for (y, &shift) in ys.iter_mut().zip(&shifts) {
                    let z: f64 = rng.sample(StandardNormal);
                    *y = game.sigma * z + if c == truth { shift } else { 0.0 };
                    prod *= ratio(*y);
                    sum += *y;
                }
                let log_ratio = if prod.is_finite() && prod > 1e-290 {
                    prod.ln()
                } else {
                    ys.iter().map(|&y| loss.eval(y)).sum()
                };
                // the common N(0, sigma^2) factor cancels across candidates
                let score = log_prior[c] + log_ratio;
                if score > best_score {
                    best = c;
                    best_score = score;
                }
                if sum > best_sum {
                    nearest = c;
                    best_sum = sum;
                }
            }
            wins += u64::from(best == truth);
            plugin_wins += u64::from(nearest == truth);
        }
    }

    let n = game.trials as f64;
    let s = wins as f64 / n;
    Ok(GameResult {
        trials: game.trials,
        empirical_success: s,
        stderr: (s * (1.0 - s) / n).sqrt(),
        plugin_success: plugin_wins as f64 / n,
        certified_bound: certified_bound(
            game.max_prior(),
            &game.group_probs,
            game.sigma,
            game.rounds,
        )?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_signal_means_prior_guessing() {
        let game = ReconstructionGame::uniform(8, vec![1.0], 1e6, 1, 40_000).unwrap();
        let res = simulate_game(&game, 3).unwrap();
        assert!(
            (res.empirical_success - 0.125).abs() <= 3.0 * res.stderr,
            "{res:?}"
        );
        assert!((res.certified_bound - 0.125).abs() < 1e-6);
    }

    #[test]
    fn noiseless_separation() {
        let game = ReconstructionGame::uniform(8, vec![1.0], 1e-6, 1, 10_000).unwrap();
        let res = simulate_game(&game, 5).unwrap();
        assert_eq!(res.empirical_success, 1.0);
        assert_eq!(res.stderr, 0.0);
    }

    #[test]
    fn deterministic_given_seed() {
        let game = ReconstructionGame::uniform(5, vec![0.5, 0.3], 0.8, 2, 3000).unwrap();
        assert_eq!(
            simulate_game(&game, 11).unwrap(),
            simulate_game(&game, 11).unwrap()
        );
    }

    #[test]
    fn rejects_invalid_games() {
        assert!(ReconstructionGame::new(vec![0.5, 0.6], vec![1.0], 1.0, 1, 10).is_err());
        assert!(ReconstructionGame::uniform(4, vec![1.0], 0.0, 1, 10).is_err());
        assert!(ReconstructionGame::uniform(4, vec![1.0], 1.0, 0, 10).is_err());
        assert!(ReconstructionGame::uniform(4, vec![1.2], 1.0, 1, 10).is_err());
    }

    #[test]
    fn bound_tends_to_prior_for_large_noise() {
        // kl ~ T E[S^2] / (2 sigma^2) = 7.5e-10, so b - p ~ sqrt(2 p (1 - p) kl) ~ 4e-6
        let b = certified_bound(0.01, &[0.5, 0.5], 1e5, 10).unwrap();
        assert!(b > 0.01 && b - 0.01 < 1e-5, "{b}");
        let tighter = certified_bound(0.01, &[0.5, 0.5], 1e6, 10).unwrap();
        assert!(tighter <= b && tighter - 0.01 < 1e-6, "{tighter}");
    }
}
