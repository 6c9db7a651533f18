//! DP-SGD with per-example Poisson sampling, and a synthetic dataset with
//! planted, unevenly distributed secrets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{ExampleRecord, RunConfig, SecretMap, SecretSpec};
use crate::error::{Error, Result};
use crate::pipeline::SamplingPlan;

const SAMPLING_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

/// `v * min(1, C / ||v||_2)`.
pub fn clip(v: &[f64], clip_norm: f64) -> Vec<f64> {
    let norm = l2_norm(v);
    if norm <= clip_norm {
        return v.to_vec();
    }
    let scale = clip_norm / norm;
    v.iter().map(|x| x * scale).collect()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A differentiable model over opaque example payloads.
pub trait ModelAdapter {
    /// Number of parameters.
    fn dim(&self) -> usize;

    /// Expected payload length.
    fn payload_len(&self) -> usize;

    fn loss(&self, theta: &[f64], payload: &[f64]) -> f64;

    /// Gradient of the per-example loss; same length as `theta`.
    fn loss_grad(&self, theta: &[f64], payload: &[f64]) -> Vec<f64>;

    /// Applies the (noisy) gradient. Plain SGD unless overridden.
    fn update(&mut self, theta: &mut [f64], grad: &[f64], step_size: f64) {
        for (t, g) in theta.iter_mut().zip(grad) {
            *t -= step_size * g;
        }
    }

    fn initial_params(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }
}

/// Squared loss on payloads laid out as `features ++ [target]`.
#[derive(Debug, Clone, Copy)]
pub struct LinearRegression {
    pub features: usize,
}

impl ModelAdapter for LinearRegression {
    fn dim(&self) -> usize {
        self.features
    }

    fn payload_len(&self) -> usize {
        self.features + 1
    }

    fn loss(&self, theta: &[f64], payload: &[f64]) -> f64 {
        let (x, y) = payload.split_at(self.features);
        let r = dot(theta, x) - y[0];
        0.5 * r * r
    }

    fn loss_grad(&self, theta: &[f64], payload: &[f64]) -> Vec<f64> {
        let (x, y) = payload.split_at(self.features);
        let r = dot(theta, x) - y[0];
        x.iter().map(|xi| r * xi).collect()
    }
}

/// Logistic loss on payloads laid out as `features ++ [label]`; a label above
/// 0.5 counts as the positive class, and real targets are thresholded at 0.
#[derive(Debug, Clone, Copy)]
pub struct LogisticRegression {
    pub features: usize,
}

impl LogisticRegression {
    fn label(y: f64) -> f64 {
        if y > 0.0 {
            1.0
        } else {
            0.0
        }
    }
}

impl ModelAdapter for LogisticRegression {
    fn dim(&self) -> usize {
        self.features
    }

    fn payload_len(&self) -> usize {
        self.features + 1
    }

    fn loss(&self, theta: &[f64], payload: &[f64]) -> f64 {
        let (x, y) = payload.split_at(self.features);
        let z = dot(theta, x);
        // ln(1 + e^z) - y z, stable for large |z|
        let softplus = if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        };
        softplus - Self::label(y[0]) * z
    }

    fn loss_grad(&self, theta: &[f64], payload: &[f64]) -> Vec<f64> {
        let (x, y) = payload.split_at(self.features);
        let z = dot(theta, x);
        let s = 1.0 / (1.0 + (-z).exp());
        let r = s - Self::label(y[0]);
        x.iter().map(|xi| r * xi).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub seed: u64,
}

/// What happened during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub batch_sizes: Vec<usize>,
    /// Norm of the clipped, scaled gradient sum before noise.
    pub grad_norms: Vec<f64>,
    /// Mean loss over the dataset after each round.
    pub losses: Vec<f64>,
    pub final_theta: Vec<f64>,
    pub eval_loss: f64,
}

impl TrainTrace {
    pub fn mean_batch_size(&self) -> f64 {
        if self.batch_sizes.is_empty() {
            return 0.0;
        }
        self.batch_sizes.iter().sum::<usize>() as f64 / self.batch_sizes.len() as f64
    }
}

/// Seeded generators for batch sampling and for noise. They are separate
/// streams of one counter-based generator, so the batches drawn do not depend
/// on the noise multiplier.
pub struct RoundRng {
    pub sampling: ChaCha20Rng,
    pub noise: ChaCha20Rng,
}

impl RoundRng {
    pub fn new(seed: u64) -> Self {
        let mut sampling = ChaCha20Rng::seed_from_u64(seed);
        sampling.set_stream(SAMPLING_STREAM);
        let mut noise = ChaCha20Rng::seed_from_u64(seed);
        noise.set_stream(NOISE_STREAM);
        Self { sampling, noise }
    }
}

pub fn mean_loss(model: &dyn ModelAdapter, theta: &[f64], payloads: &[&[f64]]) -> f64 {
    if payloads.is_empty() {
        return 0.0;
    }
    payloads.iter().map(|p| model.loss(theta, p)).sum::<f64>() / payloads.len() as f64
}

/// Runs `T = plan.rounds` rounds of DP-SGD.
///
/// Each round includes example `i` independently with probability
/// `plan.probs[i]`, sums the clipped per-example gradients, divides by the
/// batch target `B`, adds `N(0, (C sigma / B)^2 I)` and hands the result to
/// the model's update.
pub fn train(
    map: &SecretMap,
    plan: &SamplingPlan,
    model: &mut dyn ModelAdapter,
    config: &RunConfig,
    settings: TrainSettings,
) -> Result<TrainTrace> {
    if plan.probs.len() != map.num_examples() {
        return Err(Error::DimensionMismatch(format!(
            "plan has {} probabilities for {} examples",
            plan.probs.len(),
            map.num_examples()
        )));
    }
    if !plan.example_ids.is_empty()
        && plan
            .example_ids
            .iter()
            .zip(map.examples())
            .any(|(id, ex)| *id != ex.id)
    {
        return Err(Error::DimensionMismatch(
            "plan example ids do not match the dataset order".into(),
        ));
    }
    let payloads: Vec<&[f64]> = map
        .examples()
        .iter()
        .map(|ex| match ex.payload.as_deref() {
            Some(p) if p.len() == model.payload_len() => Ok(p),
            Some(p) => Err(Error::DimensionMismatch(format!(
                "example {:?} payload has length {}, model expects {}",
                ex.id,
                p.len(),
                model.payload_len()
            ))),
            None => Err(Error::DimensionMismatch(format!(
                "example {:?} has no payload",
                ex.id
            ))),
        })
        .collect::<Result<_>>()?;

    let dim = model.dim();
    let b = plan.batch_target;
    let noise_std = config.clip_norm * plan.sigma / b;
    let mut theta = model.initial_params();
    let mut rng = RoundRng::new(settings.seed);

    let rounds = plan.rounds as usize;
    let mut trace = TrainTrace {
        batch_sizes: Vec::with_capacity(rounds),
        grad_norms: Vec::with_capacity(rounds),
        losses: Vec::with_capacity(rounds),
        final_theta: Vec::new(),
        eval_loss: 0.0,
    };
    let mut grad = vec![0.0; dim];
    for _ in 0..rounds {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut batch = 0;
        for (payload, &rho) in payloads.iter().zip(&plan.probs) {
            // one uniform per example per round keeps the stream aligned
            let u: f64 = rng.sampling.random();
            if u < rho {
                batch += 1;
                let g = clip(&model.loss_grad(&theta, payload), config.clip_norm);
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
        }
        for g in grad.iter_mut() {
            *g /= b;
        }
        trace.batch_sizes.push(batch);
        trace.grad_norms.push(l2_norm(&grad));
        for g in grad.iter_mut() {
            let z: f64 = rng.noise.sample(StandardNormal);
            *g += noise_std * z;
        }
        model.update(&mut theta, &grad, settings.learning_rate);
        trace.losses.push(mean_loss(model, &theta, &payloads));
    }
    trace.eval_loss = mean_loss(model, &theta, &payloads);
    trace.final_theta = theta;
    Ok(trace)
}

/// Expected share of incidences per secret: `(j + 1)^-skew`, normalized.
pub fn power_law_shares(m: usize, skew: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|j| ((j + 1) as f64).powf(-skew)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// Expected incidence size of every secret in [`make_synthetic`].
pub fn expected_incidence_sizes(n: usize, m: usize, skew: f64) -> Vec<f64> {
    let extra = n.saturating_sub(m) as f64;
    power_law_shares(m, skew)
        .into_iter()
        .map(|s| (1.0 + extra * s).min(n as f64))
        .collect()
}

/// Synthetic linear-regression data with `m` secrets.
///
/// There are `max(n, m)` incidences in total; every secret receives one and
/// the rest are spread multinomially with shares proportional to
/// `(j + 1)^-skew`. Each secret then occupies that many distinct examples
/// chosen uniformly, so some examples hold several secrets and some none.
/// Targets use `p = 1e-10` and `r ~ U[2e-4, 1e-3]`.
pub fn make_synthetic(n: usize, m: usize, skew: f64, dim: usize, seed: u64) -> Result<SecretMap> {
    if n == 0 || m == 0 || dim == 0 {
        return Err(Error::InvalidArgument(
            "n, m and dim must all be at least 1".into(),
        ));
    }
    if !(skew.is_finite() && skew >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "skew must be nonnegative, got {skew}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let shares = power_law_shares(m, skew);
    let mut cumulative = Vec::with_capacity(m);
    let mut acc = 0.0;
    for s in &shares {
        acc += s;
        cumulative.push(acc);
    }
    let mut sizes = vec![1usize; m];
    for _ in 0..n.saturating_sub(m) {
        let u: f64 = rng.random::<f64>() * acc;
        let j = cumulative.partition_point(|&c| c <= u).min(m - 1);
        sizes[j] += 1;
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut pool: Vec<usize> = (0..n).collect();
    for (j, &size) in sizes.iter().enumerate() {
        let size = size.min(n);
        // partial Fisher-Yates
        for t in 0..size {
            let pick = rng.random_range(t..n);
            pool.swap(t, pick);
            members[pool[t]].push(j);
        }
    }

    let truth: Vec<f64> = (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) / (dim as f64).sqrt())
        .collect();
    let secrets: Vec<SecretSpec> = (0..m)
        .map(|j| {
            let r = rng.random_range(2e-4..=1e-3);
            SecretSpec::new(format!("s{j:04}"), 1e-10, r)
        })
        .collect::<Result<_>>()?;
    let examples = members
        .into_iter()
        .enumerate()
        .map(|(i, secs)| {
            let x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let noise: f64 = rng.sample(StandardNormal);
            let y = dot(&x, &truth) + 0.1 * noise;
            let mut payload = x;
            payload.push(y);
            ExampleRecord {
                id: format!("x{i:06}"),
                secret_ids: secs.iter().map(|&j| secrets[j].id.clone()).collect(),
                payload: Some(payload),
            }
        })
        .collect();
    SecretMap::new(examples, secrets)
}
