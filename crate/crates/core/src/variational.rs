//! Latent-variable machinery: diagonal Gaussian networks, the
//! reparameterization trick, closed-form KL divergence, KL-weight annealing,
//! and the (sequential) bag-of-words auxiliary losses.

use crate::model::blocks::Linear;
use crate::rng;
use crate::tensor::{ParamStore, Real, Tape, Tensor};
use rand_chacha::ChaCha8Rng;

/// Diagonal Gaussian over a latent, one distribution per row.
/// `mu` and `log_var` are both [n x latent].
#[derive(Clone)]
pub struct GaussianParams<T: Real> {
    pub mu: Tensor<T>,
    pub log_var: Tensor<T>,
}

impl<T: Real> GaussianParams<T> {
    pub fn rows(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.mu.shape()[1]
    }

    /// Single-row view (used to decompose per-position KL terms).
    pub fn row(&self, i: usize) -> GaussianParams<T> {
        GaussianParams { mu: self.mu.slice_rows(i, 1), log_var: self.log_var.slice_rows(i, 1) }
    }

    /// Standard normal with matching shape.
    pub fn standard(tape: &Tape<T>, rows: usize, dim: usize) -> GaussianParams<T> {
        GaussianParams {
            mu: tape.zeros(vec![rows, dim]),
            log_var: tape.zeros(vec![rows, dim]),
        }
    }
}

/// Three-layer MLP producing a diagonal Gaussian: two ReLU hidden layers,
/// then a 2*latent head split into mean and log-variance. The log-variance
/// is clamped to keep exp() finite under extreme inputs.
#[derive(Debug, Clone)]
pub struct LatentNetwork {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
    pub latent: usize,
    pub log_var_clamp: f64,
}

impl LatentNetwork {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        latent: usize,
        log_var_clamp: f64,
    ) -> Self {
        LatentNetwork {
            l1: Linear::new(store, rng, &format!("{prefix}.l1"), d_in, hidden),
            l2: Linear::new(store, rng, &format!("{prefix}.l2"), hidden, hidden),
            l3: Linear::new(store, rng, &format!("{prefix}.l3"), hidden, 2 * latent),
            latent,
            log_var_clamp,
        }
    }

    pub fn from_store<T: Real>(
        store: &ParamStore<T>,
        prefix: &str,
        latent: usize,
        log_var_clamp: f64,
    ) -> Self {
        LatentNetwork {
            l1: Linear::from_store(store, &format!("{prefix}.l1")),
            l2: Linear::from_store(store, &format!("{prefix}.l2")),
            l3: Linear::from_store(store, &format!("{prefix}.l3")),
            latent,
            log_var_clamp,
        }
    }

    /// x: [n x d_in] -> Gaussian over [n x latent].
    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> GaussianParams<T> {
        let h = self.l1.forward(tape, store, x).relu();
        let h = self.l2.forward(tape, store, &h).relu();
        let out = self.l3.forward(tape, store, &h);
        let clamp = T::from_f64(self.log_var_clamp);
        GaussianParams {
            mu: out.slice_cols(0, self.latent),
            log_var: out.slice_cols(self.latent, self.latent).clamp(-clamp, clamp),
        }
    }
}

/// z = mu + exp(log_var / 2) * noise. Gradients flow into mu/log_var only;
/// `noise` must be a constant leaf.
pub fn reparameterize<T: Real>(params: &GaussianParams<T>, noise: &Tensor<T>) -> Tensor<T> {
    params.mu.add(&params.log_var.mul_scalar(T::from_f64(0.5)).exp().mul(noise))
}

/// Closed-form KL(q || p) between diagonal Gaussians, summed over all
/// rows and dimensions:
///   0.5 * sum( exp(lq - lp) + (mq - mp)^2 * exp(-lp) - 1 + lp - lq ).
pub fn kl_diag_gaussians<T: Real>(q: &GaussianParams<T>, p: &GaussianParams<T>) -> Tensor<T> {
    assert_eq!(q.mu.shape(), p.mu.shape(), "kl: mu shape mismatch");
    assert_eq!(q.log_var.shape(), p.log_var.shape(), "kl: log_var shape mismatch");
    let d = q.log_var.sub(&p.log_var);
    let ratio = d.exp();
    let diff = q.mu.sub(&p.mu);
    let maha = diff.mul(&diff).mul(&p.log_var.neg().exp());
    let terms = ratio.add(&maha).add_scalar(-T::one()).sub(&d);
    terms.sum_all().mul_scalar(T::from_f64(0.5))
}

/// Monte-Carlo estimate of KL(q || p) for diagonal Gaussians, for checking
/// the closed form against an independent computation. Deterministic for a
/// fixed seed.
pub fn mc_kl_estimate(
    mu_q: &[f64],
    log_var_q: &[f64],
    mu_p: &[f64],
    log_var_p: &[f64],
    n_samples: usize,
    seed: u64,
) -> f64 {
    assert_eq!(mu_q.len(), log_var_q.len());
    assert_eq!(mu_q.len(), mu_p.len());
    assert_eq!(mu_q.len(), log_var_p.len());
    let dim = mu_q.len();
    let mut r = rng::rng_for(seed, rng::Stream::Validation, 0);
    let mut acc = 0.0;
    for _ in 0..n_samples {
        let eps = rng::standard_normal(&mut r, dim);
        for i in 0..dim {
            let sq = (0.5 * log_var_q[i]).exp();
            let z = mu_q[i] + sq * eps[i];
            let log_q = -0.5 * log_var_q[i] - 0.5 * (z - mu_q[i]).powi(2) / log_var_q[i].exp();
            let log_p = -0.5 * log_var_p[i] - 0.5 * (z - mu_p[i]).powi(2) / log_var_p[i].exp();
            acc += log_q - log_p;
        }
    }
    acc / n_samples as f64
}

/// Linear KL-weight warm-up: weight(step) = min(step / full_at, 1).
#[derive(Debug, Clone, Copy)]
pub struct AnnealSchedule {
    pub full_at: usize,
}

impl AnnealSchedule {
    pub fn weight(&self, step: usize) -> f64 {
        if self.full_at == 0 {
            1.0
        } else {
            (step as f64 / self.full_at as f64).min(1.0)
        }
    }
}

/// Bag-of-words negative log-likelihood: one shared logits row scored
/// against every token in the bag (order-insensitive reconstruction).
pub fn bag_nll<T: Real>(tape: &Tape<T>, logits_row: &Tensor<T>, bag: &[usize]) -> Tensor<T> {
    assert_eq!(logits_row.shape()[0], 1, "bag_nll: expected a single logits row");
    assert!(!bag.is_empty(), "bag_nll: empty bag");
    let rows: Vec<Tensor<T>> = bag.iter().map(|_| logits_row.clone()).collect();
    let stacked = tape.concat_rows(&rows);
    tape.cross_entropy(&stacked, bag, &vec![1.0; bag.len()])
}

/// Sequential bag-of-words loss: position t's logits row is scored against
/// the suffix bag {tokens[t], ..., tokens[T-1]}, so for T positions the sum
/// has T + (T-1) + ... + 1 terms.
pub fn sequential_bag_nll<T: Real>(
    tape: &Tape<T>,
    logits: &Tensor<T>,
    tokens: &[usize],
) -> Tensor<T> {
    let t_len = tokens.len();
    assert_eq!(
        logits.shape()[0],
        t_len,
        "sequential_bag_nll: {} logit rows for {t_len} tokens",
        logits.shape()[0]
    );
    assert!(t_len > 0, "sequential_bag_nll: empty sequence");
    let mut rows = Vec::with_capacity(t_len * (t_len + 1) / 2);
    let mut targets = Vec::with_capacity(rows.capacity());
    for t in 0..t_len {
        let row = logits.slice_rows(t, 1);
        for &token in &tokens[t..] {
            rows.push(row.clone());
            targets.push(token);
        }
    }
    let stacked = tape.concat_rows(&rows);
    tape.cross_entropy(&stacked, &targets, &vec![1.0; targets.len()])
}
