//! eSGLD with missing data: multiple imputation of the latent block for the
//! subsampled units, importance resampling, and the corrected θ update.
//! The worked model is a Gaussian random-intercept regression.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data_model::MiniBatch;
use crate::driver::{diverged, langevin_update, learning_rate, PhaseTiming, Schedule};
use crate::error::{DivergenceReport, Error, Result};
use crate::rng::{RngStream, Stream};
use crate::synth_io::subsample_rows;

/// What the missing-data sampler needs from a latent-variable model.
/// Batches index units (for the random-intercept model: groups).
pub trait LatentModel {
    type Latent: Clone;

    fn theta_dim(&self) -> usize;
    fn units(&self) -> usize;
    /// An exact draw from π(ϑ | θ, X_n).
    fn sample_latent<R: Rng + ?Sized>(&self, theta: &[f64], batch: &MiniBatch, rng: &mut R) -> Self::Latent;
    /// log p(X_n | θ, ϑ).
    fn log_lik_given_latent(&self, theta: &[f64], latent: &Self::Latent, batch: &MiniBatch) -> f64;
    /// ∇_θ log π(θ | ϑ, X_n) = ∇_θ {log p(X_n, ϑ | θ) + log π(θ)}.
    fn grad_log_posterior_given_latent(&self, theta: &[f64], latent: &Self::Latent, batch: &MiniBatch) -> Vec<f64>;
    fn grad_log_prior(&self, theta: &[f64]) -> Vec<f64>;
}

/// Rows partitioned into groups, with a row-major covariate block.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedData {
    covariates: usize,
    design: Vec<f64>,
    response: Vec<f64>,
    groups: Vec<Vec<usize>>,
}

impl GroupedData {
    pub fn new(design: Vec<f64>, covariates: usize, response: Vec<f64>, group_of: &[usize]) -> Result<Self> {
        let rows = response.len();
        if covariates == 0 || design.len() != rows * covariates || group_of.len() != rows {
            return Err(Error::Dimension("design, response and group labels disagree".into()));
        }
        let count = group_of.iter().copied().max().map_or(0, |g| g + 1);
        let mut groups = vec![Vec::new(); count];
        for (i, &g) in group_of.iter().enumerate() {
            groups[g].push(i);
        }
        if groups.iter().any(|g| g.is_empty()) {
            return Err(Error::param("groups", "group labels must be contiguous from 0"));
        }
        if design.iter().chain(&response).any(|v| !v.is_finite()) {
            return Err(Error::param("data", "non-finite value"));
        }
        Ok(Self {
            covariates,
            design,
            response,
            groups,
        })
    }

    pub fn covariates(&self) -> usize {
        self.covariates
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.groups[g]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.design[i * self.covariates..(i + 1) * self.covariates]
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }
}

/// Whether σ², σ_b² are fixed or carried in θ as log-variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VarianceMode {
    Fixed {
        noise: f64,
        intercept: f64,
    },
    /// Inverse-gamma(shape, scale) priors on both variances.
    Learned {
        shape: f64,
        scale: f64,
    },
}

/// y_gi = x_giᵀβ + b_g + e_gi, b_g ~ N(0, σ_b²), e_gi ~ N(0, σ²), β ~ N(0, σ_β² I).
/// θ = β, followed by (log σ², log σ_b²) when the variances are learned.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomInterceptModel {
    pub data: GroupedData,
    pub variances: VarianceMode,
    pub beta_prior_variance: f64,
}

impl RandomInterceptModel {
    pub fn new(data: GroupedData, variances: VarianceMode, beta_prior_variance: f64) -> Result<Self> {
        match variances {
            VarianceMode::Fixed { noise, intercept } => {
                if !(noise > 0.0 && intercept > 0.0) {
                    return Err(Error::param("variances", "must be positive"));
                }
            }
            VarianceMode::Learned { shape, scale } => {
                if !(shape > 0.0 && scale > 0.0) {
                    return Err(Error::param("variance_prior", "shape and scale must be positive"));
                }
            }
        }
        if !(beta_prior_variance > 0.0) {
            return Err(Error::param("beta_prior_variance", "must be positive"));
        }
        Ok(Self {
            data,
            variances,
            beta_prior_variance,
        })
    }

    /// (σ², σ_b²) at θ.
    pub fn variances_at(&self, theta: &[f64]) -> (f64, f64) {
        match self.variances {
            VarianceMode::Fixed { noise, intercept } => (noise, intercept),
            VarianceMode::Learned { .. } => {
                let k = self.data.covariates;
                (theta[k].exp(), theta[k + 1].exp())
            }
        }
    }

    fn residuals(&self, beta: &[f64], g: usize) -> impl Iterator<Item = f64> + '_ {
        let beta = beta.to_vec();
        self.data.groups[g].iter().map(move |&i| {
            let fit: f64 = self.data.row(i).iter().zip(&beta).map(|(x, b)| x * b).sum();
            self.data.response[i] - fit
        })
    }

    /// Mean and variance of b_g given θ and the group's rows.
    pub fn latent_conditional(&self, theta: &[f64], g: usize) -> (f64, f64) {
        let (s2, sb2) = self.variances_at(theta);
        let k = self.data.covariates;
        let size = self.data.groups[g].len() as f64;
        let resid_sum: f64 = self.residuals(&theta[..k], g).sum();
        let v = 1.0 / (size / s2 + 1.0 / sb2);
        (v * resid_sum / s2, v)
    }

    /// Exact log p(y_g | θ) with b_g integrated out.
    pub fn group_marginal_loglik(&self, theta: &[f64], g: usize) -> f64 {
        let (s2, sb2) = self.variances_at(theta);
        let k = self.data.covariates;
        let r: Vec<f64> = self.residuals(&theta[..k], g).collect();
        let s = r.len() as f64;
        let denom = s2 + s * sb2;
        let sum: f64 = r.iter().sum();
        let sq: f64 = r.iter().map(|v| v * v).sum();
        // V⁻¹ = (I - σ_b²/(σ² + sσ_b²) 11ᵀ)/σ²
        let quad = (sq - sb2 / denom * sum * sum) / s2;
        let logdet = (s - 1.0) * s2.ln() + denom.ln();
        -0.5 * (s * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
    }

    pub fn log_prior(&self, theta: &[f64]) -> f64 {
        let k = self.data.covariates;
        let mut lp = -theta[..k].iter().map(|b| b * b).sum::<f64>() / (2.0 * self.beta_prior_variance);
        if let VarianceMode::Learned { shape, scale } = self.variances {
            // Inverse-gamma on exp(u) plus the log-Jacobian u.
            for &u in &theta[k..k + 2] {
                lp += -shape * u - scale * (-u).exp();
            }
        }
        lp
    }

    /// log π(θ | X_N) up to a constant, with every latent integrated out.
    pub fn exact_log_posterior(&self, theta: &[f64]) -> f64 {
        (0..self.data.group_count())
            .map(|g| self.group_marginal_loglik(theta, g))
            .sum::<f64>()
            + self.log_prior(theta)
    }

    /// Central-difference gradient of [`Self::exact_log_posterior`].
    pub fn exact_gradient(&self, theta: &[f64], h: f64) -> Vec<f64> {
        (0..theta.len())
            .map(|j| {
                let mut tp = theta.to_vec();
                let mut tm = theta.to_vec();
                tp[j] += h;
                tm[j] -= h;
                (self.exact_log_posterior(&tp) - self.exact_log_posterior(&tm)) / (2.0 * h)
            })
            .collect()
    }

    /// Gaussian posterior of β for known variances (generalized least
    /// squares with the N(0, σ_β² I) prior).
    pub fn gls_posterior(&self, noise: f64, intercept: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let k = self.data.covariates;
        let mut precision = DMatrix::<f64>::identity(k, k) / self.beta_prior_variance;
        let mut rhs = DVector::<f64>::zeros(k);
        for rows in &self.data.groups {
            let s = rows.len() as f64;
            let c = intercept / (noise + s * intercept);
            let mut xsum = DVector::<f64>::zeros(k);
            let mut ysum = 0.0;
            for &i in rows {
                let x = DVector::from_column_slice(self.data.row(i));
                let y = self.data.response[i];
                precision += &x * x.transpose() / noise;
                rhs += &x * (y / noise);
                xsum += x;
                ysum += y;
            }
            precision -= &xsum * xsum.transpose() * (c / noise);
            rhs -= &xsum * (c * ysum / noise);
        }
        let chol = precision
            .cholesky()
            .ok_or_else(|| Error::LinearAlgebra("GLS precision is not positive definite".into()))?;
        let mean = chol.solve(&rhs);
        let inv = chol.inverse();
        let cov = (&inv + inv.transpose()) * 0.5;
        Ok((mean.iter().copied().collect(), cov))
    }
}

impl LatentModel for RandomInterceptModel {
    /// One intercept per batch group, in batch order.
    type Latent = Vec<f64>;

    fn theta_dim(&self) -> usize {
        match self.variances {
            VarianceMode::Fixed { .. } => self.data.covariates,
            VarianceMode::Learned { .. } => self.data.covariates + 2,
        }
    }

    fn units(&self) -> usize {
        self.data.group_count()
    }

    fn sample_latent<R: Rng + ?Sized>(&self, theta: &[f64], batch: &MiniBatch, rng: &mut R) -> Vec<f64> {
        batch
            .indices()
            .iter()
            .map(|&g| {
                let (mean, var) = self.latent_conditional(theta, g);
                let z: f64 = rng.sample(StandardNormal);
                mean + var.sqrt() * z
            })
            .collect()
    }

    fn log_lik_given_latent(&self, theta: &[f64], latent: &Vec<f64>, batch: &MiniBatch) -> f64 {
        let (s2, _) = self.variances_at(theta);
        let k = self.data.covariates;
        let mut total = 0.0;
        for (&g, &b) in batch.indices().iter().zip(latent) {
            for r in self.residuals(&theta[..k], g) {
                let e = r - b;
                total += -0.5 * ((2.0 * std::f64::consts::PI * s2).ln() + e * e / s2);
            }
        }
        total
    }

    fn grad_log_posterior_given_latent(&self, theta: &[f64], latent: &Vec<f64>, batch: &MiniBatch) -> Vec<f64> {
        let (s2, sb2) = self.variances_at(theta);
        let k = self.data.covariates;
        let mut grad = self.grad_log_prior(theta);
        let (mut d_noise, mut d_int) = (0.0, 0.0);
        for (&g, &b) in batch.indices().iter().zip(latent) {
            for &i in &self.data.groups[g] {
                let x = self.data.row(i);
                let fit: f64 = x.iter().zip(&theta[..k]).map(|(a, c)| a * c).sum();
                let e = self.data.response[i] - fit - b;
                for j in 0..k {
                    grad[j] += x[j] * e / s2;
                }
                d_noise += -0.5 + e * e / (2.0 * s2);
            }
            d_int += -0.5 + b * b / (2.0 * sb2);
        }
        if let VarianceMode::Learned { .. } = self.variances {
            grad[k] += d_noise;
            grad[k + 1] += d_int;
        }
        grad
    }

    fn grad_log_prior(&self, theta: &[f64]) -> Vec<f64> {
        let k = self.data.covariates;
        let mut grad: Vec<f64> = theta.iter().map(|_| 0.0).collect();
        for j in 0..k {
            grad[j] = -theta[j] / self.beta_prior_variance;
        }
        if let VarianceMode::Learned { shape, scale } = self.variances {
            for j in k..k + 2 {
                grad[j] = -shape + scale * (-theta[j]).exp();
            }
        }
        grad
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomInterceptConfig {
    pub groups: usize,
    pub group_size: usize,
    pub beta: Vec<f64>,
    pub noise_variance: f64,
    pub intercept_variance: f64,
    pub seed: u64,
}

impl RandomInterceptConfig {
    /// 50 groups of 20, β = (1, -1), σ² = 1, σ_b² = 0.25.
    pub fn standard(seed: u64) -> Self {
        Self {
            groups: 50,
            group_size: 20,
            beta: vec![1.0, -1.0],
            noise_variance: 1.0,
            intercept_variance: 0.25,
            seed,
        }
    }
}

/// Standard-normal covariates, no intercept column.
pub fn generate_random_intercept(config: &RandomInterceptConfig) -> Result<GroupedData> {
    if config.groups == 0 || config.group_size == 0 || config.beta.is_empty() {
        return Err(Error::param("groups", "groups, group size and β must be non-empty"));
    }
    if !(config.noise_variance > 0.0 && config.intercept_variance > 0.0) {
        return Err(Error::param("variances", "must be positive"));
    }
    let mut rng = RngStream::named(config.seed, Stream::DataGeneration);
    let k = config.beta.len();
    let rows = config.groups * config.group_size;
    let mut design = Vec::with_capacity(rows * k);
    let mut response = Vec::with_capacity(rows);
    let mut labels = Vec::with_capacity(rows);
    for g in 0..config.groups {
        let z: f64 = rng.sample(StandardNormal);
        let b = config.intercept_variance.sqrt() * z;
        for _ in 0..config.group_size {
            let mut fit = b;
            for bj in &config.beta {
                let x: f64 = rng.sample(StandardNormal);
                design.push(x);
                fit += x * bj;
            }
            let e: f64 = rng.sample(StandardNormal);
            response.push(fit + config.noise_variance.sqrt() * e);
            labels.push(g);
        }
    }
    GroupedData::new(design, k, response, &labels)
}

pub fn impute_batch<M: LatentModel, R: Rng + ?Sized>(
    model: &M,
    theta: &[f64],
    batch: &MiniBatch,
    m: usize,
    rng: &mut R,
) -> Result<Vec<M::Latent>> {
    if m == 0 {
        return Err(Error::param("m", "must be at least 1"));
    }
    Ok((0..m).map(|_| model.sample_latent(theta, batch, rng)).collect())
}

/// Index of one draw, chosen ∝ exp{(N/n - 1) log p(X_n | θ, ϑ_k)}.
pub fn resample_importance<M: LatentModel, R: Rng + ?Sized>(
    model: &M,
    theta: &[f64],
    batch: &MiniBatch,
    draws: &[M::Latent],
    rng: &mut R,
) -> Result<usize> {
    if draws.is_empty() {
        return Err(Error::param("draws", "at least one draw is required"));
    }
    let power = batch.replication_factor() - 1.0;
    let logs: Vec<f64> = draws
        .iter()
        .map(|d| power * model.log_lik_given_latent(theta, d, batch))
        .collect();
    Ok(pick_log_weighted(&logs, rng))
}

/// Index drawn ∝ exp(logs), with the maximum subtracted first.
pub fn pick_log_weighted<R: Rng + ?Sized>(logs: &[f64], rng: &mut R) -> usize {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return rng.random_range(0..logs.len());
    }
    let weights: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// (N/(m n)) Σ_k ∇ log π(θ | ϑ_k, X_n) - ((N - n)/n) ∇ log π(θ).
pub fn missing_drift<M: LatentModel>(model: &M, theta: &[f64], batch: &MiniBatch, draws: &[M::Latent]) -> Vec<f64> {
    let big_n = batch.total_rows() as f64;
    let n = batch.len() as f64;
    let m = draws.len() as f64;
    let mut drift = vec![0.0; theta.len()];
    for d in draws {
        for (acc, g) in drift
            .iter_mut()
            .zip(model.grad_log_posterior_given_latent(theta, d, batch))
        {
            *acc += g;
        }
    }
    let scale = big_n / (m * n);
    let correction = (big_n - n) / n;
    for (acc, p) in drift.iter_mut().zip(model.grad_log_prior(theta)) {
        *acc = scale * *acc - correction * p;
    }
    drift
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingConfig {
    pub batch_size: usize,
    pub imputations: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub temperature: f64,
    pub schedule: Schedule,
    pub seed: u64,
}

impl MissingConfig {
    pub fn validate(&self, units: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > units {
            return Err(Error::param("n", format!("must lie in 1..={units}")));
        }
        if self.imputations == 0 {
            return Err(Error::param("m", "must be at least 1"));
        }
        if self.iterations == 0 || self.burn_in >= self.iterations {
            return Err(Error::param("burn_in", "must be smaller than the iteration count"));
        }
        if self.thin == 0 {
            return Err(Error::param("thin", "must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::param("temperature", "must be positive"));
        }
        self.schedule.validate()
    }
}

/// Random streams used by [`step_missing`].
#[derive(Debug, Clone)]
pub struct MissingStreams {
    pub subsampling: RngStream,
    pub imputation: RngStream,
    pub resampling: RngStream,
    pub noise: RngStream,
}

impl MissingStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            subsampling: RngStream::named(seed, Stream::Subsampling),
            imputation: RngStream::named(seed, Stream::Imputation),
            resampling: RngStream::named(seed, Stream::Resampling),
            noise: RngStream::named(seed, Stream::InjectedNoise),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MissingStep<L> {
    pub batch: MiniBatch,
    /// The importance-resampled imputation.
    pub resampled: L,
    pub drift: Vec<f64>,
    pub step_size: f64,
}

/// One iteration at (1-based) step `t`: subsample, impute m times, resample
/// one draw, and update θ using all m imputations.
pub fn step_missing<M: LatentModel>(
    model: &M,
    theta: &mut [f64],
    t: usize,
    config: &MissingConfig,
    streams: &mut MissingStreams,
    timing: &mut PhaseTiming,
) -> Result<MissingStep<M::Latent>> {
    let step_size = learning_rate(&config.schedule, t);
    let clock = Instant::now();
    let batch = subsample_rows(model.units(), config.batch_size, &mut streams.subsampling)?;
    timing.subsampling += clock.elapsed();

    let clock = Instant::now();
    let mut draws = impute_batch(model, theta, &batch, config.imputations, &mut streams.imputation)?;
    let chosen = resample_importance(model, theta, &batch, &draws, &mut streams.resampling)?;
    timing.model_moves += clock.elapsed();

    let clock = Instant::now();
    let drift = missing_drift(model, theta, &batch, &draws);
    langevin_update(theta, &drift, step_size, config.temperature, &mut streams.noise);
    timing.theta_update += clock.elapsed();
    if diverged(theta) {
        let gradient_norm = drift.iter().map(|g| g * g).sum::<f64>().sqrt();
        return Err(Error::Divergence(Box::new(DivergenceReport {
            iteration: t,
            step_size,
            gradient_norm,
            partial: None,
        })));
    }
    Ok(MissingStep {
        batch,
        resampled: draws.swap_remove(chosen),
        drift,
        step_size,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MissingSample<L> {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub batch: Vec<usize>,
    pub resampled: L,
}

#[derive(Debug, Clone, Serialize)]
pub struct MissingOutput<L> {
    pub samples: Vec<MissingSample<L>>,
    pub final_theta: Vec<f64>,
    #[serde(skip)]
    pub timing: PhaseTiming,
    pub config: MissingConfig,
}

pub fn run_missing<M: LatentModel>(model: &M, config: &MissingConfig) -> Result<MissingOutput<M::Latent>> {
    run_missing_from(model, config, vec![0.0; model.theta_dim()])
}

pub fn run_missing_from<M: LatentModel>(
    model: &M,
    config: &MissingConfig,
    mut theta: Vec<f64>,
) -> Result<MissingOutput<M::Latent>> {
    config.validate(model.units())?;
    if theta.len() != model.theta_dim() {
        return Err(Error::Dimension("initial θ has the wrong length".into()));
    }
    let mut streams = MissingStreams::new(config.seed);
    let mut timing = PhaseTiming::default();
    let mut samples = Vec::with_capacity((config.iterations - config.burn_in) / config.thin);
    for t in 1..=config.iterations {
        let step = step_missing(model, &mut theta, t, config, &mut streams, &mut timing)?;
        if t > config.burn_in && (t - config.burn_in).is_multiple_of(config.thin) {
            samples.push(MissingSample {
                iteration: t,
                theta: theta.clone(),
                batch: step.batch.indices().to_vec(),
                resampled: step.resampled,
            });
        }
    }
    Ok(MissingOutput {
        samples,
        final_theta: theta,
        timing,
        config: config.clone(),
    })
}
