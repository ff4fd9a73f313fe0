use esgld_core::data_model::{log_model_prior, log_theta_prior, LinearPrior, MiniBatch, ModelIndicator, PriorSpec};
use esgld_core::diagnostics::{conjugate_linear_posterior, enumerate_model_posterior, full_data_rjmh, ENUMERATION_CAP};
use esgld_core::driver::{run_with_weights, DriverConfig, Schedule};
use esgld_core::gradients::loglik;
use esgld_core::inference_metrics::{inclusion_probabilities, posterior_mean};
use esgld_core::model_sampler::{proposal_weights, ChainState, ModelSampler, SamplerOptions};
use esgld_core::rng::{RngStream, Stream};
use esgld_core::synth_io::{generate, subsample, SynthConfig};

fn spread_prior(p: usize) -> PriorSpec {
    PriorSpec::Linear(LinearPrior {
        lambda: 0.3,
        slab_variance: 1.0,
        spike_variance: 0.5,
        max_model_size: p + 1,
    })
}

// With sign flips the kernel moves on (γ, sign pattern of θ) with |θ| fixed.
// The joint target is enumerated over all 2^dim × 2^dim states.
#[test]
fn kernel_with_sign_flips_matches_joint_enumeration() {
    let ds = generate(&SynthConfig::linear(120, 3, 21)).unwrap();
    let prior = spread_prior(3);
    let weights = proposal_weights(&ds).unwrap();
    let sampler = ModelSampler::new(&ds, &prior, &weights, SamplerOptions::default()).unwrap();
    let batch = MiniBatch::new((0..40).collect(), 120).unwrap();
    let magnitude = [0.05, 0.08, 0.04, 0.06];
    let dim = 4;

    let theta_for = |signs: usize| -> Vec<f64> {
        (0..dim)
            .map(|j| {
                if signs >> j & 1 == 1 {
                    -magnitude[j]
                } else {
                    magnitude[j]
                }
            })
            .collect()
    };
    let mut logs = vec![0.0; 1 << (2 * dim)];
    for signs in 0..1usize << dim {
        let theta = theta_for(signs);
        for mask in 0..1u64 << dim {
            let g = ModelIndicator::from_mask(dim, mask);
            logs[(signs << dim) | mask as usize] = batch.replication_factor()
                * loglik(&theta, &g, &ds, batch.indices())
                + log_theta_prior(&theta, &g, &prior)
                + log_model_prior(&g, &prior);
        }
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    let target: Vec<f64> = logs.iter().map(|l| (l - max).exp() / z).collect();

    let mut state = ChainState {
        gamma: ModelIndicator::empty(dim),
        theta: theta_for(0),
    };
    let mut rng = RngStream::named(22, Stream::ModelMoves);
    let mut counts = vec![0u64; target.len()];
    let steps = 400_000;
    for _ in 0..steps {
        sampler.propose_and_accept(&mut state, &batch, &mut rng).unwrap();
        let signs = (0..dim).fold(0usize, |acc, j| acc | ((state.theta[j] < 0.0) as usize) << j);
        for j in 0..dim {
            assert_eq!(state.theta[j].abs(), magnitude[j]);
        }
        counts[(signs << dim) | state.gamma.to_mask().unwrap() as usize] += 1;
    }
    let tv: f64 = 0.5
        * target
            .iter()
            .zip(&counts)
            .map(|(p, &c)| (p - c as f64 / steps as f64).abs())
            .sum::<f64>();
    assert!(tv < 0.05, "TV = {tv}");
}

#[test]
fn inclusion_marginals_match_enumeration_at_fixed_theta() {
    let ds = generate(&SynthConfig::linear(150, 6, 31)).unwrap();
    let prior = spread_prior(6);
    let weights = proposal_weights(&ds).unwrap();
    let options = SamplerOptions {
        flip_probability: 0.0,
        ..SamplerOptions::default()
    };
    let sampler = ModelSampler::new(&ds, &prior, &weights, options).unwrap();
    let mut rng = RngStream::named(32, Stream::Subsampling);
    let batch = subsample(&ds, 60, &mut rng).unwrap();
    let theta = vec![0.02, 0.1, 0.09, 0.08, 0.07, 0.06, -0.05];
    let post = enumerate_model_posterior(&theta, &batch, &ds, &prior, ENUMERATION_CAP).unwrap();
    let mut state = ChainState {
        gamma: ModelIndicator::empty(7),
        theta: theta.clone(),
    };
    let mut move_rng = RngStream::named(32, Stream::ModelMoves);
    let run = sampler
        .run_short_chain(&mut state, &batch, 50_000, &mut move_rng)
        .unwrap();
    let summary = inclusion_probabilities(&run.models).unwrap();
    let exact = post.marginals();
    for j in 0..7 {
        assert!(
            (summary.probs[j] - exact[j]).abs() < 0.03,
            "position {j}: {} vs {}",
            summary.probs[j],
            exact[j]
        );
    }
}

#[test]
fn rjmh_snapshots_agree_with_enumeration() {
    let ds = generate(&SynthConfig::linear(300, 6, 41)).unwrap();
    let prior = PriorSpec::Linear(LinearPrior::standard(6, 7));
    let weights = proposal_weights(&ds).unwrap();
    let cfg = DriverConfig {
        batch_size: 300,
        models_per_iteration: 5,
        iterations: 3000,
        burn_in: 1000,
        thin: 500,
        temperature: 1.0,
        schedule: Schedule::Constant { step: 1e-3 },
        seed: 42,
        sampler: SamplerOptions::default(),
        frozen_model: None,
    };
    let out = full_data_rjmh(&ds, &prior, &weights, &cfg).unwrap();
    assert_eq!(out.theta_samples.len(), 4);
    let full = MiniBatch::full(300);
    let options = SamplerOptions {
        flip_probability: 0.0,
        ..SamplerOptions::default()
    };
    let sampler = ModelSampler::new(&ds, &prior, &weights, options).unwrap();
    for (k, snap) in out.theta_samples.iter().enumerate() {
        let post = enumerate_model_posterior(&snap.theta, &full, &ds, &prior, ENUMERATION_CAP).unwrap();
        let mut state = ChainState {
            gamma: snap.model.clone(),
            theta: snap.theta.clone(),
        };
        let mut rng = RngStream::new(43, k as u64 + 100);
        let mut counts = vec![0u64; 1 << 7];
        for _ in 0..20_000 {
            sampler.propose_and_accept(&mut state, &full, &mut rng).unwrap();
            counts[state.gamma.to_mask().unwrap() as usize] += 1;
        }
        let tv = post.total_variation(&counts);
        assert!(tv < 0.1, "snapshot {k}: TV = {tv}");
    }
}

#[test]
fn frozen_model_posterior_mean_matches_conjugate() {
    let ds = generate(&SynthConfig::linear(400, 4, 51)).unwrap();
    let prior = PriorSpec::Linear(LinearPrior::standard(4, 5));
    let gamma = ModelIndicator::from_indices(5, &[1, 2, 3, 4]).unwrap();
    let exact = conjugate_linear_posterior(&ds, &gamma, &prior).unwrap();
    let weights = proposal_weights(&ds).unwrap();
    let cfg = DriverConfig {
        batch_size: 200,
        models_per_iteration: 1,
        iterations: 60_000,
        burn_in: 5_000,
        thin: 1,
        temperature: 1.0,
        schedule: Schedule::Constant { step: 0.1 / 400.0 },
        seed: 52,
        sampler: SamplerOptions::default(),
        frozen_model: Some(gamma),
    };
    let out = run_with_weights(&ds, &prior, &weights, &cfg).unwrap();
    let xs: Vec<f64> = out.theta_samples.iter().map(|s| s.theta[1]).collect();
    let batches = 40;
    let len = xs.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| xs[b * len..(b + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / batches as f64;
    let se = (means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / ((batches - 1) * batches) as f64).sqrt();
    let mean = posterior_mean(&out.theta_samples, |s| s.theta[1]).unwrap();
    assert!(
        (mean - exact.mean[1]).abs() < 3.0 * se,
        "{mean} vs {} (se {se})",
        exact.mean[1]
    );
}
