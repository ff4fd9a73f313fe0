//! The eSGLD iteration: subsample, draw m models by a short RJMH chain, then
//! take a Langevin step along the averaged conditional gradient.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data_model::{Dataset, MiniBatch, ModelIndicator, PriorSpec, ThetaState};
use crate::error::{DivergenceReport, Error, Result};
use crate::gradients::estimate_gradient;
use crate::model_sampler::{proposal_weights, ChainState, ModelSampler, ProposalWeights, SamplerOptions};
use crate::rng::{RngStream, Stream};
use crate::synth_io::subsample;

/// |θ_i| beyond this aborts the run.
pub const DIVERGENCE_BOUND: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant {
        step: f64,
    },
    /// ε_t = initial / t^exponent with exponent in (0, 1).
    PowerDecay {
        initial: f64,
        exponent: f64,
    },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Constant { step } => {
                if !(step > 0.0 && step.is_finite()) {
                    return Err(Error::param("step_size", "must be positive"));
                }
            }
            Schedule::PowerDecay { initial, exponent } => {
                if !(initial > 0.0 && initial.is_finite()) {
                    return Err(Error::param("step_size", "initial step must be positive"));
                }
                if !(exponent > 0.0 && exponent < 1.0) {
                    return Err(Error::param("decay_exponent", "must lie in (0, 1)"));
                }
            }
        }
        Ok(())
    }
}

/// Step size at iteration `t` (1-based).
pub fn learning_rate(schedule: &Schedule, t: usize) -> f64 {
    debug_assert!(t >= 1);
    match *schedule {
        Schedule::Constant { step } => step,
        Schedule::PowerDecay { initial, exponent } => initial / (t as f64).powf(exponent),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverConfig {
    pub batch_size: usize,
    pub models_per_iteration: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub temperature: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub sampler: SamplerOptions,
    /// Holds γ fixed and skips the model moves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frozen_model: Option<ModelIndicator>,
}

impl DriverConfig {
    /// n = 200, m = 10, ε ≡ 1e-6, T = 5000, burn-in 2000, thin 10.
    pub fn reference_linear(seed: u64) -> Self {
        Self {
            batch_size: 200,
            models_per_iteration: 10,
            iterations: 5000,
            burn_in: 2000,
            thin: 10,
            temperature: 1.0,
            schedule: Schedule::Constant { step: 1e-6 },
            seed,
            sampler: SamplerOptions::default(),
            frozen_model: None,
        }
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > dataset.rows() {
            return Err(Error::param("n", format!("must lie in 1..={}", dataset.rows())));
        }
        if self.models_per_iteration == 0 {
            return Err(Error::param("m", "must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(Error::param("iterations", "must be at least 1"));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::param("burn_in", "must be smaller than the iteration count"));
        }
        if self.thin == 0 {
            return Err(Error::param("thin", "must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::param("temperature", "must be positive"));
        }
        if let Some(g) = &self.frozen_model {
            if g.len() != dataset.dim() {
                return Err(Error::Dimension(
                    "frozen model length does not match the dataset".into(),
                ));
            }
        }
        self.schedule.validate()
    }

    pub fn expected_samples(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

/// Wall-clock totals per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTiming {
    pub subsampling: Duration,
    pub model_moves: Duration,
    pub theta_update: Duration,
}

impl PhaseTiming {
    pub fn total(&self) -> Duration {
        self.subsampling + self.model_moves + self.theta_update
    }
}

impl Serialize for PhaseTiming {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("PhaseTiming", 4)?;
        st.serialize_field("subsampling_secs", &self.subsampling.as_secs_f64())?;
        st.serialize_field("model_moves_secs", &self.model_moves.as_secs_f64())?;
        st.serialize_field("theta_update_secs", &self.theta_update.as_secs_f64())?;
        st.serialize_field("total_secs", &self.total().as_secs_f64())?;
        st.end()
    }
}

/// A thinned draw: θ after the update and the last model of that iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThetaSample {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub model: ModelIndicator,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainOutput {
    pub theta_samples: Vec<ThetaSample>,
    /// The m models of each post-burn-in iteration.
    #[serde(skip)]
    pub model_draws: Vec<Vec<ModelIndicator>>,
    #[serde(skip)]
    pub timing: PhaseTiming,
    pub config: DriverConfig,
    pub seed: u64,
    pub proposals: usize,
    pub accepted: usize,
    pub warnings: Vec<String>,
}

impl ChainOutput {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }

    pub(crate) fn empty(config: &DriverConfig) -> Self {
        Self {
            theta_samples: Vec::new(),
            model_draws: Vec::new(),
            timing: PhaseTiming::default(),
            config: config.clone(),
            seed: config.seed,
            proposals: 0,
            accepted: 0,
            warnings: Vec::new(),
        }
    }
}

/// Mutable chain state between iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverState {
    pub theta: ThetaState,
    /// Final model of the previous short chain; the next chain starts here.
    pub gamma: ModelIndicator,
}

impl DriverState {
    /// θ = 0 and the empty model.
    pub fn initial(dim: usize) -> Self {
        Self {
            theta: ThetaState::zeros(dim),
            gamma: ModelIndicator::empty(dim),
        }
    }
}

/// What a single [`Esgld::step`] produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub models: Vec<ModelIndicator>,
    pub accepted: usize,
    pub step_size: f64,
    pub gradient_norm: f64,
}

/// θ ← θ + (ε/2)·drift + √(ε τ)·η with η ~ N(0, I).
pub fn langevin_update<R: Rng + ?Sized>(theta: &mut [f64], drift: &[f64], step: f64, temperature: f64, rng: &mut R) {
    let noise_scale = (step * temperature).sqrt();
    for (t, d) in theta.iter_mut().zip(drift) {
        let eta: f64 = rng.sample(StandardNormal);
        *t += 0.5 * step * d + noise_scale * eta;
    }
}

pub(crate) fn diverged(theta: &[f64]) -> bool {
    theta.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND)
}

/// Sampler bound to a dataset and prior, owning its random streams.
pub struct Esgld<'a> {
    dataset: &'a Dataset,
    prior: &'a PriorSpec,
    config: DriverConfig,
    sampler: ModelSampler<'a>,
    subsample_rng: RngStream,
    move_rng: RngStream,
    noise_rng: RngStream,
}

impl<'a> Esgld<'a> {
    pub fn new(
        dataset: &'a Dataset,
        prior: &'a PriorSpec,
        weights: &'a ProposalWeights,
        config: DriverConfig,
    ) -> Result<Self> {
        config.validate(dataset)?;
        let sampler = ModelSampler::new(dataset, prior, weights, config.sampler)?;
        let seed = config.seed;
        Ok(Self {
            dataset,
            prior,
            sampler,
            config,
            subsample_rng: RngStream::named(seed, Stream::Subsampling),
            move_rng: RngStream::named(seed, Stream::ModelMoves),
            noise_rng: RngStream::named(seed, Stream::InjectedNoise),
        })
    }

    pub fn config(&self) -> &DriverConfig {
        &self.config
    }

    /// Advances `state` by one iteration.
    pub fn step(&mut self, state: &mut DriverState, timing: &mut PhaseTiming) -> Result<StepOutcome> {
        let t = state.theta.iteration + 1;
        let step_size = learning_rate(&self.config.schedule, t);

        let clock = Instant::now();
        let batch = subsample(self.dataset, self.config.batch_size, &mut self.subsample_rng)?;
        timing.subsampling += clock.elapsed();

        let clock = Instant::now();
        let (models, accepted) = match &self.config.frozen_model {
            Some(g) => (vec![g.clone()], 0),
            None => self.draw_models(state, &batch)?,
        };
        timing.model_moves += clock.elapsed();

        let clock = Instant::now();
        let estimate = estimate_gradient(&state.theta.theta, &models, &batch, self.dataset, self.prior)?;
        langevin_update(
            &mut state.theta.theta,
            &estimate.grad,
            step_size,
            self.config.temperature,
            &mut self.noise_rng,
        );
        state.theta.iteration = t;
        timing.theta_update += clock.elapsed();

        let gradient_norm = estimate.norm();
        if diverged(&state.theta.theta) {
            return Err(Error::Divergence(Box::new(DivergenceReport {
                iteration: t,
                step_size,
                gradient_norm,
                partial: None,
            })));
        }
        Ok(StepOutcome {
            models,
            accepted,
            step_size,
            gradient_norm,
        })
    }

    fn draw_models(&mut self, state: &mut DriverState, batch: &MiniBatch) -> Result<(Vec<ModelIndicator>, usize)> {
        let mut chain = ChainState {
            gamma: std::mem::replace(&mut state.gamma, ModelIndicator::empty(0)),
            theta: std::mem::take(&mut state.theta.theta),
        };
        let result =
            self.sampler
                .run_short_chain(&mut chain, batch, self.config.models_per_iteration, &mut self.move_rng);
        state.gamma = chain.gamma;
        state.theta.theta = chain.theta;
        let result = result?;
        let accepted = result.accepted();
        Ok((result.models, accepted))
    }

    /// Runs the configured number of iterations from `state`.
    pub fn run_from(&mut self, mut state: DriverState) -> Result<ChainOutput> {
        let mut out = ChainOutput::empty(&self.config);
        let first_step = learning_rate(&self.config.schedule, 1);
        if first_step * self.dataset.rows() as f64 > 1.0 {
            let msg = format!(
                "step size {first_step:e} times N = {} exceeds 1; steps of order o(1/N) are expected",
                self.dataset.rows()
            );
            log::warn!("{msg}");
            out.warnings.push(msg);
        }
        let mut timing = PhaseTiming::default();
        for t in 1..=self.config.iterations {
            let outcome = match self.step(&mut state, &mut timing) {
                Ok(o) => o,
                Err(Error::Divergence(mut report)) => {
                    out.timing = timing;
                    report.partial = Some(out);
                    return Err(Error::Divergence(report));
                }
                Err(e) => return Err(e),
            };
            if self.config.frozen_model.is_none() {
                out.proposals += self.config.models_per_iteration;
                out.accepted += outcome.accepted;
            }
            if t > self.config.burn_in {
                if (t - self.config.burn_in).is_multiple_of(self.config.thin) {
                    out.theta_samples.push(ThetaSample {
                        iteration: t,
                        theta: state.theta.theta.clone(),
                        model: outcome.models.last().cloned().expect("at least one model"),
                    });
                }
                out.model_draws.push(outcome.models);
            }
        }
        out.timing = timing;
        Ok(out)
    }

    pub fn run(&mut self) -> Result<ChainOutput> {
        self.run_from(DriverState::initial(self.dataset.dim()))
    }
}

/// Full eSGLD run with proposal weights computed from the data.
pub fn run(dataset: &Dataset, prior: &PriorSpec, config: &DriverConfig) -> Result<ChainOutput> {
    let weights = proposal_weights(dataset)?;
    run_with_weights(dataset, prior, &weights, config)
}

pub fn run_with_weights(
    dataset: &Dataset,
    prior: &PriorSpec,
    weights: &ProposalWeights,
    config: &DriverConfig,
) -> Result<ChainOutput> {
    Esgld::new(dataset, prior, weights, config.clone())?.run()
}
