//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Distribution of the number of successes, by enumerating all `2^k` inclusion patterns.
pub fn brute_poisson_binomial(rhos: &[f64]) -> Vec<f64> {
    let k = rhos.len();
    let mut out = vec![0.0; k + 1];
    for mask in 0u64..(1 << k) {
        let mut pr = 1.0;
        for (i, r) in rhos.iter().enumerate() {
            pr *= if mask >> i & 1 == 1 { *r } else { 1.0 - r };
        }
        out[mask.count_ones() as usize] += pr;
    }
    out
}

/// `ln(P(x) / Q(x))` for `P = sum_k w_k N(k, s^2)`, `Q = N(0, s^2)`.
pub fn log_ratio(pmf: &[f64], sigma: f64, x: f64) -> f64 {
    let terms: Vec<f64> = pmf
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(k, &w)| {
            let k = k as f64;
            w.ln() + (2.0 * k * x - k * k) / (2.0 * sigma * sigma)
        })
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Monte-Carlo estimate of `KL(P || Q) = E_P[ln P/Q]`; returns `(mean, stderr)`.
pub fn mc_kl(pmf: &[f64], sigma: f64, samples: usize, seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let mut cdf = Vec::with_capacity(pmf.len());
    let mut acc = 0.0;
    for w in pmf {
        acc += w;
        cdf.push(acc);
    }
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let u: f64 = r.random::<f64>() * acc;
        let k = cdf.iter().position(|&c| u < c).unwrap_or(pmf.len() - 1);
        let z: f64 = r.sample(StandardNormal);
        let v = log_ratio(pmf, sigma, k as f64 + sigma * z);
        sum += v;
        sum_sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Random shift pmf over `0..=k` with at least two nonzero entries.
pub fn random_pmf(r: &mut ChaCha20Rng, k: usize) -> Vec<f64> {
    let mut raw: Vec<f64> = (0..=k).map(|_| r.random::<f64>()).collect();
    raw[0] += 0.1;
    let total: f64 = raw.iter().sum();
    raw.iter_mut().for_each(|x| *x /= total);
    raw
}

fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in 0..n {
            if row != col {
                let f = a[row][col] / a[col][col];
                if f != 0.0 {
                    for c in col..n {
                        a[row][c] -= f * a[col][c];
                    }
                    b[row] -= f * b[col];
                }
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

fn violation(n: usize, rows: &[Vec<usize>], caps: &[f64], w: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for &x in w.iter().take(n) {
        worst = worst.max(-x).max(x - 1.0);
    }
    for (row, &cap) in rows.iter().zip(caps) {
        worst = worst.max(row.iter().map(|&i| w[i]).sum::<f64>() - cap);
    }
    worst
}

/// Optimum of `max sum w` s.t. `sum_{i in row} w_i <= cap`, `0 <= w <= 1`,
/// by enumerating every vertex: each variable sits at 0, at 1, or is free,
/// and the free ones are pinned by an equal number of tight rows.
pub fn brute_force_lp(n: usize, rows: &[Vec<usize>], caps: &[f64]) -> f64 {
    let m = rows.len();
    let mut best = f64::NEG_INFINITY;
    let mut state = vec![0u8; n];
    loop {
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        if free.len() <= m {
            for tight in subsets(m, free.len()) {
                let mut a = vec![vec![0.0; free.len()]; free.len()];
                let mut b = vec![0.0; free.len()];
                for (r, &j) in tight.iter().enumerate() {
                    b[r] = caps[j];
                    for &i in &rows[j] {
                        match state[i] {
                            1 => b[r] -= 1.0,
                            2 => a[r][free.iter().position(|&f| f == i).unwrap()] = 1.0,
                            _ => {}
                        }
                    }
                }
                let Some(sol) = (if free.is_empty() {
                    Some(vec![])
                } else {
                    solve_dense(a, b)
                }) else {
                    continue;
                };
                let mut w: Vec<f64> = state
                    .iter()
                    .map(|&s| if s == 1 { 1.0 } else { 0.0 })
                    .collect();
                for (f, v) in free.iter().zip(sol) {
                    w[*f] = v;
                }
                if violation(n, rows, caps, &w) <= 1e-9 {
                    best = best.max(w.iter().sum());
                }
            }
        }
        // next state in base 3
        let mut i = 0;
        while i < n && state[i] == 2 {
            state[i] = 0;
            i += 1;
        }
        if i == n {
            break;
        }
        state[i] += 1;
    }
    best
}

fn subsets(m: usize, size: usize) -> Vec<Vec<usize>> {
    (0u32..(1 << m))
        .filter(|mask| mask.count_ones() as usize == size)
        .map(|mask| (0..m).filter(|j| mask >> j & 1 == 1).collect())
        .collect()
}

/// Random packing instance with `n <= max_n` examples and `m <= max_m` rows.
pub fn random_lp(
    r: &mut ChaCha20Rng,
    max_n: usize,
    max_m: usize,
) -> (usize, Vec<Vec<usize>>, Vec<f64>) {
    let n = r.random_range(1..=max_n);
    let m = r.random_range(1..=max_m);
    let density = r.random_range(0.2..0.8);
    let rows: Vec<Vec<usize>> = (0..m)
        .map(|_| (0..n).filter(|_| r.random::<f64>() < density).collect())
        .collect();
    let caps: Vec<f64> = (0..m)
        .map(|_| match r.random_range(0..6) {
            0 => 0.0,
            1 => r.random_range(1..4) as f64,
            _ => r.random_range(0.0..3.0),
        })
        .collect();
    (n, rows, caps)
}

/// Smallest multiple of `step` whose composed KL is within `mu`, by a coarse
/// scan followed by a fine scan; relies on the KL decreasing in sigma.
pub fn grid_sigma(pmf: &secprot::DiscretePMF, rounds: u32, mu: f64, step: f64) -> f64 {
    let kl = |s: f64| {
        secprot::composed_kl(
            &secprot::RoundMechanism::new(pmf.clone(), s).unwrap(),
            rounds,
        )
        .unwrap()
    };
    let mut coarse = 1.0;
    while kl(coarse) > mu {
        coarse += 1.0;
    }
    let fine_steps = (1.0 / step).round() as usize;
    let base = coarse - 1.0;
    for i in 1..=fine_steps {
        let s = base + i as f64 * step;
        if kl(s) <= mu {
            return s;
        }
    }
    coarse
}
