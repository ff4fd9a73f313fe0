//! Log-likelihoods and conditional log-posterior gradients.
//!
//! The duplicated mini-batch X_{n,N} is never built; every batch quantity is
//! the batch sum scaled by N/n.

use std::f64::consts::PI;

use crate::data_model::{grad_log_theta_prior, Dataset, Family, MiniBatch, ModelIndicator, PriorSpec};
use crate::error::{Error, Result};

/// Bound on |η| inside exponentials.
pub const ETA_CLIP: f64 = 30.0;

pub fn sigmoid(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta.clamp(-ETA_CLIP, ETA_CLIP)).exp())
}

/// log(1 + e^η) without overflow.
pub fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta.min(ETA_CLIP)).exp().ln_1p()
    } else {
        eta.max(-ETA_CLIP).exp().ln_1p()
    }
}

/// Per-row log-likelihood as a function of the linear predictor.
#[inline]
pub fn row_loglik(family: Family, y: f64, eta: f64) -> f64 {
    match family {
        Family::Linear { noise_variance } => {
            let r = y - eta;
            -r * r / (2.0 * noise_variance) - 0.5 * (2.0 * PI * noise_variance).ln()
        }
        Family::Logistic => y * eta - softplus(eta),
    }
}

/// d/dη of [`row_loglik`].
#[inline]
pub fn row_score(family: Family, y: f64, eta: f64) -> f64 {
    match family {
        Family::Linear { noise_variance } => (y - eta) / noise_variance,
        Family::Logistic => y - sigmoid(eta),
    }
}

/// Nonzero entries of β = θ∗γ as (index, value) pairs.
pub fn sparse_beta(theta: &[f64], gamma: &ModelIndicator) -> Vec<(usize, f64)> {
    gamma.included().map(|i| (i, theta[i])).collect()
}

#[inline]
pub fn dot_sparse(row: &[f64], beta: &[(usize, f64)]) -> f64 {
    beta.iter().map(|&(j, b)| row[j] * b).sum()
}

/// Σ over `rows` of the log-likelihood at β = θ∗γ, normalizing constants included.
pub fn loglik(theta: &[f64], gamma: &ModelIndicator, dataset: &Dataset, rows: &[usize]) -> f64 {
    let beta = sparse_beta(theta, gamma);
    let family = dataset.family();
    let y = dataset.response();
    rows.iter()
        .map(|&r| row_loglik(family, y[r], dot_sparse(dataset.row(r), &beta)))
        .sum()
}

/// Unscaled gradient of the batch log-likelihood with respect to θ_[S];
/// excluded positions are zero.
pub fn grad_loglik(theta: &[f64], gamma: &ModelIndicator, dataset: &Dataset, rows: &[usize]) -> Vec<f64> {
    let beta = sparse_beta(theta, gamma);
    let family = dataset.family();
    let y = dataset.response();
    let mut grad = vec![0.0; theta.len()];
    for &r in rows {
        let x = dataset.row(r);
        let s = row_score(family, y[r], dot_sparse(x, &beta));
        for &(j, _) in &beta {
            grad[j] += s * x[j];
        }
    }
    grad
}

/// ∇_θ log π(θ | γ, X_{n,N}): (N/n) times the batch likelihood gradient on
/// included positions plus the prior gradient everywhere.
pub fn grad_conditional(
    theta: &[f64],
    gamma: &ModelIndicator,
    batch: &MiniBatch,
    dataset: &Dataset,
    prior: &PriorSpec,
) -> Vec<f64> {
    let scale = batch.replication_factor();
    let mut grad = grad_log_theta_prior(theta, gamma, prior);
    let lik = grad_loglik(theta, gamma, dataset, batch.indices());
    for i in gamma.included() {
        grad[i] += scale * lik[i];
    }
    grad
}

/// Monte Carlo gradient of log π(θ | X_N): mean of conditional gradients
/// over the sampled models.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub grad: Vec<f64>,
    pub models_used: usize,
    pub batch_len: usize,
    pub replication_factor: f64,
}

impl GradientEstimate {
    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

pub fn estimate_gradient(
    theta: &[f64],
    models: &[ModelIndicator],
    batch: &MiniBatch,
    dataset: &Dataset,
    prior: &PriorSpec,
) -> Result<GradientEstimate> {
    if models.is_empty() {
        return Err(Error::param("models", "at least one model is required"));
    }
    let mut grad = vec![0.0; theta.len()];
    for gamma in models {
        for (g, c) in grad
            .iter_mut()
            .zip(grad_conditional(theta, gamma, batch, dataset, prior))
        {
            *g += c;
        }
    }
    let m = models.len() as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    Ok(GradientEstimate {
        grad,
        models_used: models.len(),
        batch_len: batch.len(),
        replication_factor: batch.replication_factor(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{log_theta_prior, GlmPrior, LinearPrior};
    use crate::rng::{RngStream, Stream};
    use crate::synth_io::{generate, subsample_rows, SynthConfig};
    use rand::{Rng, SeedableRng};

    fn linear_prior() -> PriorSpec {
        PriorSpec::Linear(LinearPrior::standard(6, 7))
    }

    #[test]
    fn standard_normal_row() {
        let ds = Dataset::from_features(&[0.0], 1, 1, vec![0.0], Family::Linear { noise_variance: 1.0 }, None).unwrap();
        let v = loglik(&[0.0, 0.0], &ModelIndicator::empty(2), &ds, &[0]);
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn logistic_at_zero() {
        for y in [0.0, 1.0] {
            let ds = Dataset::from_features(&[0.3], 1, 1, vec![y], Family::Logistic, None).unwrap();
            let v = loglik(&[0.0, 0.0], &ModelIndicator::full(2), &ds, &[0]);
            assert!((v + std::f64::consts::LN_2).abs() < 1e-7);
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-12);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sigmoid(1e6), sigmoid(ETA_CLIP));
    }

    fn naive_loglik(theta: &[f64], gamma: &ModelIndicator, ds: &Dataset, rows: &[usize]) -> f64 {
        let mut total = 0.0;
        for &r in rows {
            let mut eta = 0.0;
            for j in 0..ds.dim() {
                let b = if gamma.contains(j) { theta[j] } else { 0.0 };
                eta += ds.row(r)[j] * b;
            }
            let y = ds.response()[r];
            total += match ds.family() {
                Family::Linear { noise_variance } => {
                    -(y - eta).powi(2) / (2.0 * noise_variance) - 0.5 * (2.0 * PI * noise_variance).ln()
                }
                Family::Logistic => y * eta - (1.0 + eta.exp()).ln(),
            };
        }
        total
    }

    #[test]
    fn matches_naive_reimplementation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for cfg in [SynthConfig::linear(20, 6, 1), SynthConfig::logistic(20, 6, 2)] {
            let ds = generate(&cfg).unwrap();
            let rows: Vec<usize> = (0..20).collect();
            for _ in 0..10 {
                let theta: Vec<f64> = (0..7).map(|_| rng.random_range(-1.5..1.5)).collect();
                let g = ModelIndicator::from_bools(&(0..7).map(|_| rng.random_bool(0.5)).collect::<Vec<_>>());
                let a = loglik(&theta, &g, &ds, &rows);
                let b = naive_loglik(&theta, &g, &ds, &rows);
                assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn empty_model_gives_prior_gradient() {
        let ds = generate(&SynthConfig::linear(30, 6, 3)).unwrap();
        let theta: Vec<f64> = (0..7).map(|i| i as f64 * 0.1 - 0.3).collect();
        let g = ModelIndicator::empty(7);
        let batch = MiniBatch::new(vec![1, 5, 9], 30).unwrap();
        let prior = linear_prior();
        assert_eq!(
            grad_conditional(&theta, &g, &batch, &ds, &prior),
            grad_log_theta_prior(&theta, &g, &prior)
        );
    }

    #[test]
    fn full_batch_uses_unit_factor() {
        let ds = generate(&SynthConfig::logistic(40, 6, 4)).unwrap();
        let theta = vec![0.2, -0.4, 0.1, 0.0, 0.3, 0.9, -0.2];
        let g = ModelIndicator::from_indices(7, &[1, 2, 5]).unwrap();
        let prior = PriorSpec::Glm(GlmPrior::standard(7));
        let full = MiniBatch::full(40);
        let got = grad_conditional(&theta, &g, &full, &ds, &prior);
        let lik = grad_loglik(&theta, &g, &ds, full.indices());
        let pri = grad_log_theta_prior(&theta, &g, &prior);
        for i in 0..7 {
            assert_eq!(got[i], lik[i] + pri[i]);
        }
    }

    #[test]
    fn conditional_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let cases = [
            (SynthConfig::linear(60, 6, 6), linear_prior()),
            (SynthConfig::logistic(60, 6, 7), PriorSpec::Glm(GlmPrior::standard(7))),
        ];
        for (cfg, prior) in &cases {
            let ds = generate(cfg).unwrap();
            let mut srng = RngStream::named(1, Stream::Subsampling);
            for _ in 0..25 {
                let batch = subsample_rows(60, 15, &mut srng).unwrap();
                let theta: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
                let g = ModelIndicator::from_bools(&(0..7).map(|_| rng.random_bool(0.5)).collect::<Vec<_>>());
                let f = |t: &[f64]| {
                    batch.replication_factor() * loglik(t, &g, &ds, batch.indices()) + log_theta_prior(t, &g, prior)
                };
                let grad = grad_conditional(&theta, &g, &batch, &ds, prior);
                for i in 0..7 {
                    let h = 1e-5;
                    let mut tp = theta.clone();
                    let mut tm = theta.clone();
                    tp[i] += h;
                    tm[i] -= h;
                    let fd = (f(&tp) - f(&tm)) / (2.0 * h);
                    let scale = grad[i].abs().max(1.0);
                    assert!((fd - grad[i]).abs() / scale < 1e-5, "coord {i}: fd {fd} vs {}", grad[i]);
                }
            }
        }
    }

    #[test]
    fn estimator_edge_cases() {
        let ds = generate(&SynthConfig::linear(30, 4, 8)).unwrap();
        let prior = PriorSpec::Linear(LinearPrior::standard(4, 5));
        let theta = vec![0.1, 0.9, -0.3, 0.4, 0.0];
        let batch = MiniBatch::new(vec![0, 3, 4, 10], 30).unwrap();
        let g = ModelIndicator::from_indices(5, &[1, 3]).unwrap();
        let single = grad_conditional(&theta, &g, &batch, &ds, &prior);
        let est = estimate_gradient(&theta, std::slice::from_ref(&g), &batch, &ds, &prior).unwrap();
        assert_eq!(est.grad, single);
        assert_eq!(est.models_used, 1);
        let est = estimate_gradient(&theta, &vec![g.clone(); 7], &batch, &ds, &prior).unwrap();
        for (a, b) in est.grad.iter().zip(&single) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        assert!(matches!(
            estimate_gradient(&theta, &[], &batch, &ds, &prior),
            Err(Error::Parameter { .. })
        ));
    }

    #[test]
    fn batch_gradient_is_unbiased_over_subsamples() {
        let ds = generate(&SynthConfig::linear(80, 6, 9)).unwrap();
        let prior = linear_prior();
        let theta = vec![0.05, 0.8, 1.1, -0.2, 0.3, 0.0, -0.6];
        let models = vec![
            ModelIndicator::from_indices(7, &[1, 2]).unwrap(),
            ModelIndicator::from_indices(7, &[0, 2, 4, 6]).unwrap(),
        ];
        let exact = estimate_gradient(&theta, &models, &MiniBatch::full(80), &ds, &prior)
            .unwrap()
            .grad;
        let mut rng = RngStream::named(2, Stream::Subsampling);
        let reps = 4000;
        let mut sum = [0.0; 7];
        let mut sq = [0.0; 7];
        for _ in 0..reps {
            let batch = subsample_rows(80, 10, &mut rng).unwrap();
            let est = estimate_gradient(&theta, &models, &batch, &ds, &prior).unwrap();
            for i in 0..7 {
                sum[i] += est.grad[i];
                sq[i] += est.grad[i] * est.grad[i];
            }
        }
        for i in 0..7 {
            let mean = sum[i] / reps as f64;
            let var = sq[i] / reps as f64 - mean * mean;
            let se = (var / reps as f64).sqrt();
            assert!(
                (mean - exact[i]).abs() <= 3.0 * se + 1e-9,
                "coord {i}: {mean} vs {}",
                exact[i]
            );
        }
    }
}
