//! Reversible jump Metropolis–Hastings over model indicators γ, conditioned
//! on θ and a duplicated mini-batch.
//!
//! Moves are birth, death and exchange. Births pick an excluded index with
//! probability ∝ w_j, deaths pick an included index with probability
//! ∝ 1 - w_i + δ. Toggled coordinates of θ have their sign flipped with a
//! fixed probability; the flip is symmetric and drops out of the ratio.
//! Coefficients are otherwise left untouched by the jump.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{Dataset, Family, MiniBatch, ModelIndicator, PriorSpec};
use crate::error::{Error, Result};
use crate::gradients::{dot_sparse, row_loglik, sigmoid, softplus, sparse_beta};

/// ε in the GLM weights w_i = exp{-(d_i - min d)/(5 σ_d) - ε}.
pub const GLM_WEIGHT_OFFSET: f64 = 0.1;
pub const NEWTON_MAX_ITER: usize = 25;
pub const NEWTON_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFamily {
    Linear,
    Glm,
    Custom,
}

/// Per-position proposal weights, each in (0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalWeights {
    weights: Vec<f64>,
    family: WeightFamily,
}

impl ProposalWeights {
    pub fn new(weights: Vec<f64>, family: WeightFamily) -> Result<Self> {
        if let Some(i) = weights.iter().position(|&w| !(w > 0.0 && w <= 1.0)) {
            return Err(Error::param(
                "weights",
                format!("w[{i}] = {} outside (0, 1]", weights[i]),
            ));
        }
        Ok(Self { weights, family })
    }

    pub fn uniform(dim: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; dim], WeightFamily::Custom)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn family(&self) -> WeightFamily {
        self.family
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// w_0 = e^{-1}, w_i = exp(|corr(y, z_i)| - 1).
pub fn weights_linear(dataset: &Dataset) -> Result<ProposalWeights> {
    if !matches!(dataset.family(), Family::Linear { .. }) {
        return Err(Error::param("family", "linear weights need a linear dataset"));
    }
    let y = dataset.response();
    let mut w = vec![(-1.0f64).exp()];
    for j in 1..dataset.dim() {
        w.push((pearson(&dataset.column(j), y).abs() - 1.0).exp());
    }
    ProposalWeights::new(w, WeightFamily::Linear)
}

/// Deviance of the logistic model {intercept, x} fitted by Newton's method.
/// Returns the deviance at the last iterate and whether the gradient
/// tolerance was met.
pub fn single_variable_deviance(x: &[f64], y: &[f64]) -> (f64, bool) {
    let (mut a, mut b) = (0.0f64, 0.0f64);
    let mut converged = false;
    for _ in 0..NEWTON_MAX_ITER {
        let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&xi, &yi) in x.iter().zip(y) {
            let p = sigmoid(a + b * xi);
            let r = yi - p;
            let w = p * (1.0 - p);
            g0 += r;
            g1 += r * xi;
            h00 += w;
            h01 += w * xi;
            h11 += w * xi * xi;
        }
        if (g0 * g0 + g1 * g1).sqrt() < NEWTON_TOL {
            converged = true;
            break;
        }
        let det = h00 * h11 - h01 * h01;
        if !(det > 0.0) || !det.is_finite() {
            break;
        }
        a += (h11 * g0 - h01 * g1) / det;
        b += (h00 * g1 - h01 * g0) / det;
    }
    let loglik: f64 = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let eta = a + b * xi;
            yi * eta - softplus(eta)
        })
        .sum();
    (-2.0 * loglik, converged)
}

/// w_0 = e^{-ε}, w_i = exp{-(d_i - min_j d_j)/(5 σ_d) - ε} with ε = 0.1 and
/// σ_d the sample standard deviation of the single-variable deviances.
pub fn weights_glm(dataset: &Dataset) -> Result<ProposalWeights> {
    if !dataset.family().is_logistic() {
        return Err(Error::param("family", "GLM weights need a logistic dataset"));
    }
    let y = dataset.response();
    let deviances: Vec<f64> = (1..dataset.dim())
        .map(|j| single_variable_deviance(&dataset.column(j), y).0)
        .collect();
    ProposalWeights::new(glm_weights_from_deviances(&deviances), WeightFamily::Glm)
}

pub fn glm_weights_from_deviances(deviances: &[f64]) -> Vec<f64> {
    let base = (-GLM_WEIGHT_OFFSET).exp();
    let p = deviances.len();
    let min = deviances.iter().copied().fold(f64::INFINITY, f64::min);
    let sd = if p > 1 {
        let mean = deviances.iter().sum::<f64>() / p as f64;
        (deviances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (p - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut w = vec![base];
    for &d in deviances {
        w.push(if sd > 0.0 {
            (-(d - min) / (5.0 * sd) - GLM_WEIGHT_OFFSET)
                .exp()
                .max(f64::MIN_POSITIVE)
        } else {
            base
        });
    }
    w
}

pub fn proposal_weights(dataset: &Dataset) -> Result<ProposalWeights> {
    match dataset.family() {
        Family::Linear { .. } => weights_linear(dataset),
        Family::Logistic => weights_glm(dataset),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    /// Probability of flipping the sign of each toggled θ coordinate.
    pub flip_probability: f64,
    /// δ added to 1 - w_i in death/exchange removal weights.
    pub death_floor: f64,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            death_floor: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveKind {
    Birth,
    Death,
    Exchange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoveRecord {
    pub kind: MoveKind,
    pub added: Option<usize>,
    pub removed: Option<usize>,
    pub accepted: bool,
    pub log_accept_ratio: f64,
    /// The log q(reverse)/q(forward) part of `log_accept_ratio`.
    pub log_proposal_ratio: f64,
}

/// Current model together with the θ it conditions on.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub gamma: ModelIndicator,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ShortChainResult {
    pub models: Vec<ModelIndicator>,
    pub records: Vec<MoveRecord>,
}

impl ShortChainResult {
    pub fn accepted(&self) -> usize {
        self.records.iter().filter(|r| r.accepted).count()
    }
}

/// Cached per-batch quantities for the current state.
struct Cursor {
    eta: Vec<f64>,
    scratch: Vec<f64>,
    loglik: f64,
    included_sq: f64,
    excluded_sq: f64,
    log_target: f64,
}

pub struct ModelSampler<'a> {
    dataset: &'a Dataset,
    prior: &'a PriorSpec,
    weights: &'a ProposalWeights,
    options: SamplerOptions,
}

impl<'a> ModelSampler<'a> {
    pub fn new(
        dataset: &'a Dataset,
        prior: &'a PriorSpec,
        weights: &'a ProposalWeights,
        options: SamplerOptions,
    ) -> Result<Self> {
        if dataset.features() == 0 {
            return Err(Error::Contract(
                "no legal model move without explanatory variables".into(),
            ));
        }
        if weights.len() != dataset.dim() {
            return Err(Error::Dimension(format!(
                "{} proposal weights for {} positions",
                weights.len(),
                dataset.dim()
            )));
        }
        if !(0.0..=1.0).contains(&options.flip_probability) {
            return Err(Error::param("flip_probability", "must lie in [0, 1]"));
        }
        if !(options.death_floor >= 0.0) {
            return Err(Error::param("death_floor", "must be non-negative"));
        }
        prior.validate()?;
        Ok(Self {
            dataset,
            prior,
            weights,
            options,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        self.dataset
    }

    fn cap(&self) -> usize {
        self.prior.max_model_size().min(self.dataset.dim())
    }

    /// (P(birth), P(death), P(exchange)) for a model of the given size.
    pub fn move_probabilities(&self, size: usize) -> [f64; 3] {
        if size == 0 {
            [1.0, 0.0, 0.0]
        } else if size >= self.cap() {
            [0.0, 1.0, 0.0]
        } else {
            [1.0 / 3.0; 3]
        }
    }

    fn removal_weight(&self, i: usize) -> f64 {
        1.0 - self.weights.as_slice()[i] + self.options.death_floor
    }

    fn log_target_from_parts(&self, scale: f64, loglik: f64, size: usize, inc: f64, exc: f64) -> f64 {
        let dim = self.dataset.dim();
        scale * loglik
            + self.prior.log_theta_prior_from_sums(size, dim, inc, exc)
            + self.prior.log_model_prior_for_size(size, dim)
    }

    /// Unnormalized log π(γ | θ, X_{n,N}) evaluated from scratch.
    pub fn log_target(&self, theta: &[f64], gamma: &ModelIndicator, batch: &MiniBatch) -> f64 {
        let cursor = self.cursor(theta, gamma, batch);
        cursor.log_target
    }

    fn cursor(&self, theta: &[f64], gamma: &ModelIndicator, batch: &MiniBatch) -> Cursor {
        let beta = sparse_beta(theta, gamma);
        let family = self.dataset.family();
        let y = self.dataset.response();
        let eta: Vec<f64> = batch
            .indices()
            .iter()
            .map(|&r| dot_sparse(self.dataset.row(r), &beta))
            .collect();
        let loglik = batch
            .indices()
            .iter()
            .zip(&eta)
            .map(|(&r, &e)| row_loglik(family, y[r], e))
            .sum();
        let (mut inc, mut exc) = (0.0, 0.0);
        for (i, &t) in theta.iter().enumerate() {
            if gamma.contains(i) {
                inc += t * t;
            } else {
                exc += t * t;
            }
        }
        let log_target = self.log_target_from_parts(batch.replication_factor(), loglik, gamma.size(), inc, exc);
        Cursor {
            scratch: vec![0.0; eta.len()],
            eta,
            loglik,
            included_sq: inc,
            excluded_sq: exc,
            log_target,
        }
    }

    fn check_state(&self, state: &ChainState) -> Result<()> {
        if state.theta.len() != self.dataset.dim() || state.gamma.len() != self.dataset.dim() {
            return Err(Error::Dimension("chain state does not match the dataset".into()));
        }
        if state.gamma.size() > self.prior.max_model_size() {
            return Err(Error::Contract(format!(
                "model size {} exceeds the bound {}",
                state.gamma.size(),
                self.prior.max_model_size()
            )));
        }
        Ok(())
    }

    /// One birth/death/exchange transition. On rejection `state` is left
    /// bitwise unchanged.
    pub fn propose_and_accept<R: Rng + ?Sized>(
        &self,
        state: &mut ChainState,
        batch: &MiniBatch,
        rng: &mut R,
    ) -> Result<MoveRecord> {
        self.check_state(state)?;
        let mut cursor = self.cursor(&state.theta, &state.gamma, batch);
        Ok(self.transition(state, &mut cursor, batch, rng))
    }

    /// Runs `m` transitions from `state`, recording the model after each.
    /// `state.theta` may come back with flipped signs.
    pub fn run_short_chain<R: Rng + ?Sized>(
        &self,
        state: &mut ChainState,
        batch: &MiniBatch,
        m: usize,
        rng: &mut R,
    ) -> Result<ShortChainResult> {
        if m == 0 {
            return Err(Error::param("m", "short chain length must be at least 1"));
        }
        self.check_state(state)?;
        let mut cursor = self.cursor(&state.theta, &state.gamma, batch);
        let mut models = Vec::with_capacity(m);
        let mut records = Vec::with_capacity(m);
        for _ in 0..m {
            records.push(self.transition(state, &mut cursor, batch, rng));
            models.push(state.gamma.clone());
        }
        Ok(ShortChainResult { models, records })
    }

    fn pick<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        candidates: &[usize],
        weight: impl Fn(usize) -> f64,
        total: f64,
    ) -> usize {
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for &c in candidates {
            acc += weight(c);
            if target < acc {
                return c;
            }
        }
        *candidates.last().expect("non-empty candidate set")
    }

    fn transition<R: Rng + ?Sized>(
        &self,
        state: &mut ChainState,
        cursor: &mut Cursor,
        batch: &MiniBatch,
        rng: &mut R,
    ) -> MoveRecord {
        let w = self.weights.as_slice();
        let size = state.gamma.size();
        let probs = self.move_probabilities(size);
        let kind = if probs[0] == 1.0 {
            MoveKind::Birth
        } else if probs[1] == 1.0 {
            MoveKind::Death
        } else {
            match rng.random_range(0..3) {
                0 => MoveKind::Birth,
                1 => MoveKind::Death,
                _ => MoveKind::Exchange,
            }
        };

        let included: Vec<usize> = state.gamma.included().collect();
        let excluded: Vec<usize> = state.gamma.excluded().collect();
        let total_in: f64 = included.iter().map(|&i| self.removal_weight(i)).sum();
        let total_out: f64 = excluded.iter().map(|&j| w[j]).sum();

        let removed = matches!(kind, MoveKind::Death | MoveKind::Exchange)
            .then(|| self.pick(rng, &included, |i| self.removal_weight(i), total_in));
        let added = matches!(kind, MoveKind::Birth | MoveKind::Exchange)
            .then(|| self.pick(rng, &excluded, |j| w[j], total_out));
        let flip_removed = removed.is_some() && rng.random::<f64>() < self.options.flip_probability;
        let flip_added = added.is_some() && rng.random::<f64>() < self.options.flip_probability;

        // Proposal ratio q(reverse)/q(forward), move-kind probabilities included.
        let new_size = size + added.is_some() as usize - removed.is_some() as usize;
        let new_probs = self.move_probabilities(new_size);
        let kind_idx = |k: MoveKind| match k {
            MoveKind::Birth => 0,
            MoveKind::Death => 1,
            MoveKind::Exchange => 2,
        };
        let reverse_kind = match kind {
            MoveKind::Birth => MoveKind::Death,
            MoveKind::Death => MoveKind::Birth,
            MoveKind::Exchange => MoveKind::Exchange,
        };
        let mut log_fwd = probs[kind_idx(kind)].ln();
        let mut log_rev = new_probs[kind_idx(reverse_kind)].ln();
        let mut new_total_in = total_in;
        let mut new_total_out = total_out;
        if let Some(i) = removed {
            log_fwd += self.removal_weight(i).ln() - total_in.ln();
            new_total_out += w[i];
        }
        if let Some(j) = added {
            log_fwd += w[j].ln() - total_out.ln();
            new_total_out -= w[j];
        }
        if removed.is_some() || added.is_some() {
            new_total_in = included
                .iter()
                .copied()
                .filter(|&i| Some(i) != removed)
                .chain(added)
                .map(|i| self.removal_weight(i))
                .sum();
        }
        if let Some(j) = added {
            log_rev += self.removal_weight(j).ln() - new_total_in.ln();
        }
        if let Some(i) = removed {
            log_rev += w[i].ln() - new_total_out.ln();
        }
        let log_proposal_ratio = log_rev - log_fwd;

        // Target at the proposed state.
        let theta = &state.theta;
        let new_added_value = added.map(|j| if flip_added { -theta[j] } else { theta[j] });
        let family = self.dataset.family();
        let y = self.dataset.response();
        let mut new_loglik = 0.0;
        for (k, &r) in batch.indices().iter().enumerate() {
            let x = self.dataset.row(r);
            let mut e = cursor.eta[k];
            if let Some(i) = removed {
                e -= theta[i] * x[i];
            }
            if let (Some(j), Some(v)) = (added, new_added_value) {
                e += v * x[j];
            }
            cursor.scratch[k] = e;
            new_loglik += row_loglik(family, y[r], e);
        }
        let mut inc = cursor.included_sq;
        let mut exc = cursor.excluded_sq;
        if let Some(i) = removed {
            inc -= theta[i] * theta[i];
            exc += theta[i] * theta[i];
        }
        if let Some(j) = added {
            inc += theta[j] * theta[j];
            exc -= theta[j] * theta[j];
        }
        let new_log_target = self.log_target_from_parts(batch.replication_factor(), new_loglik, new_size, inc, exc);
        let log_accept_ratio = new_log_target - cursor.log_target + log_proposal_ratio;
        let accepted = rng.random::<f64>().ln() < log_accept_ratio;

        if accepted {
            if let Some(i) = removed {
                state.gamma.remove(i);
                if flip_removed {
                    state.theta[i] = -state.theta[i];
                }
            }
            if let Some(j) = added {
                state.gamma.insert(j);
                if flip_added {
                    state.theta[j] = -state.theta[j];
                }
            }
            std::mem::swap(&mut cursor.eta, &mut cursor.scratch);
            cursor.loglik = new_loglik;
            cursor.included_sq = inc;
            cursor.excluded_sq = exc;
            cursor.log_target = new_log_target;
        }

        MoveRecord {
            kind,
            added,
            removed,
            accepted,
            log_accept_ratio,
            log_proposal_ratio,
        }
    }
}
