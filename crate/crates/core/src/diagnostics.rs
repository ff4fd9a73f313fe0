//! Kernel Stein discrepancy, exhaustive model enumeration, the conjugate
//! Gaussian posterior for a fixed linear model, and a full-data RJMH baseline.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data_model::{log_model_prior, log_theta_prior, Dataset, Family, MiniBatch, ModelIndicator, PriorSpec};
use crate::driver::{diverged, langevin_update, learning_rate, ChainOutput, DriverConfig, PhaseTiming, ThetaSample};
use crate::error::{DivergenceReport, Error, Result};
use crate::gradients::{grad_conditional, loglik};
use crate::model_sampler::{ChainState, ModelSampler, ProposalWeights};
use crate::rng::{RngStream, Stream};

/// Default bound on N·p for diagnostics that need full-data scores.
pub const DEFAULT_SIZE_LIMIT: f64 = 1e7;

/// Default bound on p+1 for exhaustive enumeration.
pub const ENUMERATION_CAP: usize = 14;

pub fn check_size(rows: usize, dim: usize, limit: f64) -> Result<()> {
    let cost = rows as f64 * dim as f64;
    if cost > limit {
        return Err(Error::TooLarge(format!(
            "N*p = {cost:e} exceeds the diagnostic size limit {limit:e}"
        )));
    }
    Ok(())
}

// Inverse multi-quadric kernel k = (1 + r²)^{-1/2} and its derivatives,
// with d = θ - θ'.

pub fn imq_kernel(r2: f64) -> f64 {
    (1.0 + r2).powf(-0.5)
}

/// ∂k/∂θ_j.
pub fn imq_grad_first(d_j: f64, r2: f64) -> f64 {
    -d_j * (1.0 + r2).powf(-1.5)
}

/// ∂k/∂θ'_j.
pub fn imq_grad_second(d_j: f64, r2: f64) -> f64 {
    d_j * (1.0 + r2).powf(-1.5)
}

/// ∂²k/∂θ_j∂θ'_j.
pub fn imq_cross(d_j: f64, r2: f64) -> f64 {
    let b = 1.0 + r2;
    b.powf(-1.5) - 3.0 * d_j * d_j * b.powf(-2.5)
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KsdReport {
    pub ksd: f64,
    #[serde(rename = "T")]
    pub samples: usize,
    pub coordinates: Vec<usize>,
}

/// KSD from samples and precomputed scores ∇U with U = log π (used as is,
/// no sign flip). The kernel distance uses only `coordinates`.
pub fn ksd(samples: &[Vec<f64>], scores: &[Vec<f64>], coordinates: &[usize]) -> Result<KsdReport> {
    let t = samples.len();
    if t < 2 {
        return Err(Error::param("samples", "at least two samples are required"));
    }
    if scores.len() != t {
        return Err(Error::Dimension("one score per sample is required".into()));
    }
    if coordinates.is_empty() {
        return Err(Error::param("coordinates", "at least one coordinate is required"));
    }
    let dim = samples[0].len();
    for (s, (x, g)) in samples.iter().zip(scores).enumerate() {
        if x.len() != dim || g.len() != dim {
            return Err(Error::Dimension(format!("sample {s} has the wrong length")));
        }
        for &j in coordinates {
            if j >= dim {
                return Err(Error::Dimension(format!("coordinate {j} out of range 0..{dim}")));
            }
            if !g[j].is_finite() {
                return Err(Error::NonFiniteScore {
                    sample: s,
                    coordinate: j,
                });
            }
        }
    }
    let pc = coordinates.len();
    let xs: Vec<Vec<f64>> = samples
        .iter()
        .map(|x| coordinates.iter().map(|&j| x[j]).collect())
        .collect();
    let gs: Vec<Vec<f64>> = scores
        .iter()
        .map(|g| coordinates.iter().map(|&j| g[j]).collect())
        .collect();

    let rows: Vec<Vec<Compensated>> = (0..t)
        .into_par_iter()
        .map(|a| {
            let mut acc = vec![Compensated::default(); pc];
            let mut d = vec![0.0; pc];
            for b in 0..t {
                let mut r2 = 0.0;
                for j in 0..pc {
                    d[j] = xs[a][j] - xs[b][j];
                    r2 += d[j] * d[j];
                }
                let k = imq_kernel(r2);
                for j in 0..pc {
                    let (sa, sb) = (gs[a][j], gs[b][j]);
                    let term = sa * sb * k
                        + sa * imq_grad_second(d[j], r2)
                        + sb * imq_grad_first(d[j], r2)
                        + imq_cross(d[j], r2);
                    acc[j].add(term);
                }
            }
            acc
        })
        .collect();

    let mut value = 0.0;
    let norm = (t * t) as f64;
    for j in 0..pc {
        let mut total = Compensated::default();
        for row in &rows {
            total.add(row[j].sum);
            total.add(row[j].carry);
        }
        value += (total.value() / norm).max(0.0).sqrt();
    }
    Ok(KsdReport {
        ksd: value,
        samples: t,
        coordinates: coordinates.to_vec(),
    })
}

/// KSD with scores computed by `score`.
pub fn ksd_with<F>(samples: &[Vec<f64>], score: F, coordinates: &[usize]) -> Result<KsdReport>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let scores: Vec<Vec<f64>> = samples.par_iter().map(|x| score(x)).collect();
    ksd(samples, &scores, coordinates)
}

/// Normalized π(γ | θ, X_{n,N}) over every model of length p+1.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedPosterior {
    dim: usize,
    /// Indexed by the model's bit mask.
    probs: Vec<f64>,
    log_normalizer: f64,
}

impl EnumeratedPosterior {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// log Σ_γ exp(target).
    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    pub fn probability(&self, gamma: &ModelIndicator) -> f64 {
        gamma.to_mask().map_or(0.0, |m| self.probs[m as usize])
    }

    pub fn marginals(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (mask, &p) in self.probs.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                if mask >> j & 1 == 1 {
                    *o += p;
                }
            }
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelIndicator {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut last = 0;
        for (mask, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                last = mask;
                cum += p;
                if u < cum {
                    return ModelIndicator::from_mask(self.dim, mask as u64);
                }
            }
        }
        ModelIndicator::from_mask(self.dim, last as u64)
    }

    /// Total variation distance to empirical counts indexed by mask.
    pub fn total_variation(&self, counts: &[u64]) -> f64 {
        let total: u64 = counts.iter().sum();
        let total = total.max(1) as f64;
        0.5 * self
            .probs
            .iter()
            .enumerate()
            .map(|(m, &p)| (p - counts.get(m).copied().unwrap_or(0) as f64 / total).abs())
            .sum::<f64>()
    }
}

fn log_joint(theta: &[f64], gamma: &ModelIndicator, batch: &MiniBatch, dataset: &Dataset, prior: &PriorSpec) -> f64 {
    let lp = log_model_prior(gamma, prior);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    batch.replication_factor() * loglik(theta, gamma, dataset, batch.indices())
        + log_theta_prior(theta, gamma, prior)
        + lp
}

fn normalize(logs: &[f64]) -> (Vec<f64>, f64) {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    (weights.iter().map(|w| w / z).collect(), max + z.ln())
}

pub fn enumerate_model_posterior(
    theta: &[f64],
    batch: &MiniBatch,
    dataset: &Dataset,
    prior: &PriorSpec,
    cap: usize,
) -> Result<EnumeratedPosterior> {
    let dim = dataset.dim();
    if dim > cap || dim > 30 {
        return Err(Error::TooLarge(format!(
            "enumeration over 2^{dim} models exceeds the cap of p+1 <= {cap}"
        )));
    }
    if theta.len() != dim || batch.total_rows() != dataset.rows() {
        return Err(Error::Dimension("theta or batch does not match the dataset".into()));
    }
    let logs: Vec<f64> = (0..1u64 << dim)
        .into_par_iter()
        .map(|mask| log_joint(theta, &ModelIndicator::from_mask(dim, mask), batch, dataset, prior))
        .collect();
    let (probs, log_normalizer) = normalize(&logs);
    Ok(EnumeratedPosterior {
        dim,
        probs,
        log_normalizer,
    })
}

/// log π(θ | X_N) up to a constant: log Σ_γ π(θ, γ | X_N).
pub fn log_marginal_posterior(theta: &[f64], dataset: &Dataset, prior: &PriorSpec, cap: usize) -> Result<f64> {
    let full = MiniBatch::full(dataset.rows());
    Ok(enumerate_model_posterior(theta, &full, dataset, prior, cap)?.log_normalizer)
}

/// ∇_θ log π(θ | X_N) = Σ_γ π(γ | θ, X_N) ∇_θ log π(θ | γ, X_N).
pub fn exact_marginal_gradient(theta: &[f64], dataset: &Dataset, prior: &PriorSpec, cap: usize) -> Result<Vec<f64>> {
    let full = MiniBatch::full(dataset.rows());
    let post = enumerate_model_posterior(theta, &full, dataset, prior, cap)?;
    let dim = dataset.dim();
    let mut grad = vec![0.0; dim];
    for (mask, &w) in post.probs.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let g = ModelIndicator::from_mask(dim, mask as u64);
        for (acc, c) in grad.iter_mut().zip(grad_conditional(theta, &g, &full, dataset, prior)) {
            *acc += w * c;
        }
    }
    Ok(grad)
}

/// Gaussian posterior of θ under a fixed linear model: included positions
/// have precision XᵀX/σ² + I/σ1², excluded positions are N(0, σ0²).
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugatePosterior {
    pub included: Vec<usize>,
    /// Length p+1; 0 on excluded positions.
    pub mean: Vec<f64>,
    /// (p+1) × (p+1).
    pub covariance: DMatrix<f64>,
}

impl ConjugatePosterior {
    pub fn variance(&self, j: usize) -> f64 {
        self.covariance[(j, j)]
    }
}

pub fn conjugate_linear_posterior(
    dataset: &Dataset,
    gamma: &ModelIndicator,
    prior: &PriorSpec,
) -> Result<ConjugatePosterior> {
    let sigma2 = match dataset.family() {
        Family::Linear { noise_variance } => noise_variance,
        Family::Logistic => return Err(Error::Contract("conjugate posterior requires the linear family".into())),
    };
    let dim = dataset.dim();
    if gamma.len() != dim {
        return Err(Error::Dimension("model length does not match the dataset".into()));
    }
    let included: Vec<usize> = gamma.included().collect();
    let s = included.len();
    let slab = prior.slab_variance(s);
    let spike = prior.spike_variance();

    let mut xtx = DMatrix::<f64>::zeros(s, s);
    let mut xty = DVector::<f64>::zeros(s);
    for i in 0..dataset.rows() {
        let row = dataset.row(i);
        let y = dataset.response()[i];
        for (a, &ja) in included.iter().enumerate() {
            xty[a] += row[ja] * y;
            for (b, &jb) in included.iter().enumerate().skip(a) {
                xtx[(a, b)] += row[ja] * row[jb];
            }
        }
    }
    for a in 0..s {
        for b in 0..a {
            xtx[(a, b)] = xtx[(b, a)];
        }
    }
    if s > 0 {
        check_full_rank(&xtx)?;
    }
    let precision = &xtx / sigma2 + DMatrix::<f64>::identity(s, s) / slab;
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::LinearAlgebra("posterior precision is not positive definite".into()))?;
    let inv = chol.inverse();
    let cov_s = (&inv + inv.transpose()) * 0.5;
    let mean_s = chol.solve(&(xty / sigma2));

    let mut mean = vec![0.0; dim];
    let mut covariance = DMatrix::<f64>::zeros(dim, dim);
    for j in gamma.excluded() {
        covariance[(j, j)] = spike;
    }
    for (a, &ja) in included.iter().enumerate() {
        mean[ja] = mean_s[a];
        for (b, &jb) in included.iter().enumerate() {
            covariance[(ja, jb)] = cov_s[(a, b)];
        }
    }
    Ok(ConjugatePosterior {
        included,
        mean,
        covariance,
    })
}

fn check_full_rank(gram: &DMatrix<f64>) -> Result<()> {
    let scale = gram.diagonal().iter().copied().fold(0.0, f64::max);
    let rank_deficient = || Error::LinearAlgebra("design submatrix is rank deficient".into());
    if scale <= 0.0 {
        return Err(rank_deficient());
    }
    let chol = gram.clone().cholesky().ok_or_else(rank_deficient)?;
    let min_pivot = chol.l().diagonal().iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
    if min_pivot <= 1e-10 * scale {
        return Err(rank_deficient());
    }
    Ok(())
}

/// Baseline: the same move kernel on the full data (n = N), alternating
/// with Langevin steps that hold γ at the kernel's last state. Uses every
/// field of `config` except `batch_size`.
pub fn full_data_rjmh(
    dataset: &Dataset,
    prior: &PriorSpec,
    weights: &ProposalWeights,
    config: &DriverConfig,
) -> Result<ChainOutput> {
    let mut config = config.clone();
    config.batch_size = dataset.rows();
    config.validate(dataset)?;
    let sampler = ModelSampler::new(dataset, prior, weights, config.sampler)?;
    let full = MiniBatch::full(dataset.rows());
    let mut move_rng = RngStream::named(config.seed, Stream::ModelMoves);
    let mut noise_rng = RngStream::named(config.seed, Stream::InjectedNoise);
    let mut out = ChainOutput::empty(&config);
    let mut timing = PhaseTiming::default();
    let mut state = ChainState {
        gamma: config
            .frozen_model
            .clone()
            .unwrap_or_else(|| ModelIndicator::empty(dataset.dim())),
        theta: vec![0.0; dataset.dim()],
    };

    for t in 1..=config.iterations {
        let step_size = learning_rate(&config.schedule, t);
        let clock = Instant::now();
        let models = if config.frozen_model.is_some() {
            vec![state.gamma.clone()]
        } else {
            let res = sampler.run_short_chain(&mut state, &full, config.models_per_iteration, &mut move_rng)?;
            out.proposals += config.models_per_iteration;
            out.accepted += res.accepted();
            res.models
        };
        timing.model_moves += clock.elapsed();

        let clock = Instant::now();
        let grad = grad_conditional(&state.theta, &state.gamma, &full, dataset, prior);
        langevin_update(&mut state.theta, &grad, step_size, config.temperature, &mut noise_rng);
        timing.theta_update += clock.elapsed();
        if diverged(&state.theta) {
            let gradient_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            out.timing = timing;
            return Err(Error::Divergence(Box::new(DivergenceReport {
                iteration: t,
                step_size,
                gradient_norm,
                partial: Some(out),
            })));
        }

        if t > config.burn_in {
            if (t - config.burn_in).is_multiple_of(config.thin) {
                out.theta_samples.push(ThetaSample {
                    iteration: t,
                    theta: state.theta.clone(),
                    model: state.gamma.clone(),
                });
            }
            out.model_draws.push(models);
        }
    }
    out.timing = timing;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::LinearPrior;
    use crate::driver::Schedule;
    use crate::model_sampler::{proposal_weights, SamplerOptions};
    use crate::synth_io::{generate, SynthConfig};
    use rand_distr::StandardNormal;

    #[test]
    fn kernel_derivatives_at_coincident_points() {
        assert_eq!(imq_kernel(0.0), 1.0);
        assert_eq!(imq_grad_first(0.0, 0.0), 0.0);
        assert_eq!(imq_grad_second(0.0, 0.0), 0.0);
        assert_eq!(imq_cross(0.0, 0.0), 1.0);
    }

    #[test]
    fn kernel_derivatives_match_finite_differences() {
        let k = |x: &[f64], y: &[f64]| imq_kernel(x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum());
        let x = [0.3, -1.1, 0.7];
        let y = [-0.4, 0.2, 1.5];
        let h = 1e-5;
        let r2: f64 = x.iter().zip(&y).map(|(a, b): (&f64, &f64)| (a - b).powi(2)).sum();
        for j in 0..3 {
            let d = x[j] - y[j];
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fd_first = (k(&xp, &y) - k(&xm, &y)) / (2.0 * h);
            assert!((fd_first - imq_grad_first(d, r2)).abs() < 1e-8);
            let mut yp = y;
            let mut ym = y;
            yp[j] += h;
            ym[j] -= h;
            let fd_second = (k(&x, &yp) - k(&x, &ym)) / (2.0 * h);
            assert!((fd_second - imq_grad_second(d, r2)).abs() < 1e-8);
            let h2 = 1e-4;
            let mut pp = (x, y);
            pp.0[j] += h2;
            pp.1[j] += h2;
            let mut pm = (x, y);
            pm.0[j] += h2;
            pm.1[j] -= h2;
            let mut mp = (x, y);
            mp.0[j] -= h2;
            mp.1[j] += h2;
            let mut mm = (x, y);
            mm.0[j] -= h2;
            mm.1[j] -= h2;
            let fd_cross = (k(&pp.0, &pp.1) - k(&pm.0, &pm.1) - k(&mp.0, &mp.1) + k(&mm.0, &mm.1)) / (4.0 * h2 * h2);
            assert!(
                (fd_cross - imq_cross(d, r2)).abs() < 1e-5,
                "{fd_cross} vs {}",
                imq_cross(d, r2)
            );
        }
    }

    fn normal_score(x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| -v).collect()
    }

    #[test]
    fn duplication_invariance() {
        let a = vec![vec![0.4, -0.2], vec![1.3, 0.9], vec![-0.7, 0.1]];
        let doubled: Vec<Vec<f64>> = a.iter().flat_map(|x| [x.clone(), x.clone()]).collect();
        let k1 = ksd_with(&a, normal_score, &[0, 1]).unwrap();
        let k2 = ksd_with(&doubled, normal_score, &[0, 1]).unwrap();
        assert!((k1.ksd - k2.ksd).abs() < 1e-12);
        assert_eq!(k2.samples, 6);
    }

    #[test]
    fn shifted_samples_score_worse() {
        let mut rng = RngStream::named(3, Stream::Diagnostics);
        let iid: Vec<Vec<f64>> = (0..300).map(|_| vec![rng.sample(StandardNormal)]).collect();
        let shifted: Vec<Vec<f64>> = iid.iter().map(|x| vec![x[0] + 2.0]).collect();
        let a = ksd_with(&iid, normal_score, &[0]).unwrap();
        let b = ksd_with(&shifted, normal_score, &[0]).unwrap();
        assert!(a.ksd >= 0.0);
        assert!(a.ksd < b.ksd);
    }

    #[test]
    fn ksd_rejects_bad_inputs() {
        let x = vec![vec![0.0], vec![1.0]];
        let bad = vec![vec![0.0], vec![f64::NAN]];
        match ksd(&x, &bad, &[0]) {
            Err(Error::NonFiniteScore { sample, coordinate }) => assert_eq!((sample, coordinate), (1, 0)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(ksd(&x[..1], &x[..1], &[0]).is_err());
        assert!(ksd(&x, &x, &[3]).is_err());
        assert!(check_size(10_000, 2_000, DEFAULT_SIZE_LIMIT).is_err());
        assert!(check_size(5_000, 201, DEFAULT_SIZE_LIMIT).is_ok());
    }

    #[test]
    fn ksd_report_json_keys() {
        let x = vec![vec![0.0], vec![1.0]];
        let r = ksd_with(&x, normal_score, &[0]).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["T"], 2);
        assert!(v["ksd"].as_f64().unwrap() >= 0.0);
        assert_eq!(v["coordinates"], serde_json::json!([0]));
    }

    fn symmetric_dataset() -> Dataset {
        // Two features that are mirror images, y symmetric in both.
        let feats = vec![1.0, -1.0, -1.0, 1.0, 2.0, -2.0, -2.0, 2.0];
        let y = vec![0.5, 0.5, 1.0, 1.0];
        Dataset::from_features(&feats, 4, 2, y, Family::Linear { noise_variance: 1.0 }, None).unwrap()
    }

    #[test]
    fn enumeration_symmetry_and_normalization() {
        let ds = symmetric_dataset();
        let prior = PriorSpec::Linear(LinearPrior::standard(2, 3));
        let theta = vec![0.2, 0.5, 0.5];
        let post = enumerate_model_posterior(&theta, &MiniBatch::full(4), &ds, &prior, ENUMERATION_CAP).unwrap();
        let sum: f64 = post.probabilities().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let one = ModelIndicator::from_indices(3, &[1]).unwrap();
        let two = ModelIndicator::from_indices(3, &[2]).unwrap();
        let (p1, p2) = (post.probability(&one), post.probability(&two));
        assert!((p1 - p2).abs() < 1e-12 * p1.max(1e-300), "{p1} vs {p2}");
    }

    #[test]
    fn enumeration_respects_size_bound_and_cap() {
        let ds = generate(&SynthConfig::linear(40, 5, 1)).unwrap();
        let prior = PriorSpec::Linear(LinearPrior::standard(5, 2));
        let theta = vec![0.1; 6];
        let post = enumerate_model_posterior(&theta, &MiniBatch::full(40), &ds, &prior, ENUMERATION_CAP).unwrap();
        let over: f64 = post
            .probabilities()
            .iter()
            .enumerate()
            .filter(|(m, _)| m.count_ones() > 2)
            .map(|(_, p)| p)
            .sum();
        assert_eq!(over, 0.0);
        assert!((post.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(
            enumerate_model_posterior(&theta, &MiniBatch::full(40), &ds, &prior, 5),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn exact_gradient_matches_finite_differences_of_log_marginal() {
        let ds = generate(&SynthConfig::linear(60, 4, 2)).unwrap();
        let prior = PriorSpec::Linear(LinearPrior::standard(4, 5));
        let theta = vec![0.05, 0.4, 0.1, -0.3, 0.02];
        let g = exact_marginal_gradient(&theta, &ds, &prior, ENUMERATION_CAP).unwrap();
        let h = 1e-6;
        for j in 0..5 {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += h;
            tm[j] -= h;
            let fd = (log_marginal_posterior(&tp, &ds, &prior, ENUMERATION_CAP).unwrap()
                - log_marginal_posterior(&tm, &ds, &prior, ENUMERATION_CAP).unwrap())
                / (2.0 * h);
            assert!(
                (fd - g[j]).abs() < 1e-4 * g[j].abs().max(1.0),
                "coord {j}: {fd} vs {}",
                g[j]
            );
        }
    }

    #[test]
    fn conjugate_single_point() {
        let ds = Dataset::from_features(&[5.0], 1, 1, vec![0.0], Family::Linear { noise_variance: 1.0 }, None).unwrap();
        let prior = PriorSpec::Linear(LinearPrior {
            lambda: 0.5,
            slab_variance: 1.0,
            spike_variance: 0.025,
            max_model_size: 2,
        });
        let g = ModelIndicator::from_indices(2, &[0]).unwrap();
        let post = conjugate_linear_posterior(&ds, &g, &prior).unwrap();
        assert!(post.mean[0].abs() < 1e-15);
        assert!((post.variance(0) - 0.5).abs() < 1e-15);
        assert_eq!(post.variance(1), 0.025);
        assert_eq!(post.mean[1], 0.0);
    }

    #[test]
    fn flat_slab_approaches_least_squares() {
        let ds = generate(&SynthConfig::linear(100, 3, 5)).unwrap();
        let prior = PriorSpec::Linear(LinearPrior {
            lambda: 0.5,
            slab_variance: 1e8,
            spike_variance: 0.025,
            max_model_size: 4,
        });
        let g = ModelIndicator::full(4);
        let post = conjugate_linear_posterior(&ds, &g, &prior).unwrap();
        let x = DMatrix::from_row_slice(100, 4, ds.design());
        let y = DVector::from_column_slice(ds.response());
        let ols = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * y));
        for j in 0..4 {
            assert!((post.mean[j] - ols[j]).abs() < 1e-3 * ols[j].abs().max(1e-3));
        }
        assert!(post.covariance.clone().cholesky().is_some());
        assert_eq!(post.covariance, post.covariance.transpose());
    }

    #[test]
    fn rank_deficiency_and_wrong_family() {
        let feats = vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0];
        let ds = Dataset::from_features(
            &feats,
            3,
            2,
            vec![1.0, 2.0, 3.0],
            Family::Linear { noise_variance: 1.0 },
            None,
        )
        .unwrap();
        let prior = PriorSpec::Linear(LinearPrior::standard(2, 3));
        let g = ModelIndicator::from_indices(3, &[1, 2]).unwrap();
        assert!(matches!(
            conjugate_linear_posterior(&ds, &g, &prior),
            Err(Error::LinearAlgebra(_))
        ));
        let logit = generate(&SynthConfig::logistic(20, 2, 1)).unwrap();
        assert!(matches!(
            conjugate_linear_posterior(&logit, &g, &prior),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn rjmh_baseline_runs_and_records() {
        let ds = generate(&SynthConfig::linear(200, 6, 3)).unwrap();
        let prior = PriorSpec::Linear(LinearPrior::standard(6, 7));
        let w = proposal_weights(&ds).unwrap();
        let cfg = DriverConfig {
            batch_size: 1,
            models_per_iteration: 3,
            iterations: 200,
            burn_in: 50,
            thin: 10,
            temperature: 1.0,
            schedule: Schedule::Constant { step: 1e-3 },
            seed: 8,
            sampler: SamplerOptions::default(),
            frozen_model: None,
        };
        let out = full_data_rjmh(&ds, &prior, &w, &cfg).unwrap();
        assert_eq!(out.theta_samples.len(), 15);
        assert_eq!(out.model_draws.len(), 150);
        assert_eq!(out.config.batch_size, 200);
        let again = full_data_rjmh(&ds, &prior, &w, &cfg).unwrap();
        assert_eq!(out.theta_samples, again.theta_samples);
    }
}
