//! Posterior summaries: inclusion probabilities, the median probability
//! model, coefficient averages and the FSR/NSR/MSE metrics.

use serde::{Deserialize, Serialize};

use crate::data_model::{beta_from, ModelIndicator};
use crate::driver::{ChainOutput, ThetaSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InclusionSummary {
    pub probs: Vec<f64>,
    /// Positions with probability strictly above 0.5.
    pub selected: ModelIndicator,
    pub draws_counted: usize,
}

/// Fraction of recorded models that include each position.
pub fn inclusion_probabilities<'a, I>(draws: I) -> Result<InclusionSummary>
where
    I: IntoIterator<Item = &'a ModelIndicator>,
{
    let mut counts: Vec<usize> = Vec::new();
    let mut total = 0usize;
    for g in draws {
        if total == 0 {
            counts = vec![0; g.len()];
        } else if g.len() != counts.len() {
            return Err(Error::Dimension("model draws have inconsistent lengths".into()));
        }
        for i in g.included() {
            counts[i] += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(Error::param("model_draws", "no draws recorded"));
    }
    let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let selected = ModelIndicator::from_bools(&probs.iter().map(|&p| p > 0.5).collect::<Vec<_>>());
    Ok(InclusionSummary {
        probs,
        selected,
        draws_counted: total,
    })
}

pub fn chain_inclusion(chain: &ChainOutput) -> Result<InclusionSummary> {
    inclusion_probabilities(chain.model_draws.iter().flatten())
}

/// Unweighted average of `rho` over the samples.
pub fn posterior_mean<F>(samples: &[ThetaSample], rho: F) -> Result<f64>
where
    F: Fn(&ThetaSample) -> f64,
{
    if samples.is_empty() {
        return Err(Error::param("theta_samples", "no samples"));
    }
    Ok(samples.iter().map(rho).sum::<f64>() / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientEstimates {
    /// Average of θ∗γ using each sample's concurrent model draw.
    pub masked: Vec<f64>,
    /// Average of θ ignoring the model draws.
    pub raw: Vec<f64>,
    /// `masked` with positions outside the selected model set to 0.
    pub selected: Vec<f64>,
}

pub fn coefficient_estimates(samples: &[ThetaSample], selected: &ModelIndicator) -> Result<CoefficientEstimates> {
    let dim = selected.len();
    let mut masked = vec![0.0; dim];
    let mut raw = vec![0.0; dim];
    for s in samples {
        if s.theta.len() != dim {
            return Err(Error::Dimension(
                "sample length does not match the selected model".into(),
            ));
        }
        let beta = beta_from(&s.theta, &s.model)?;
        for j in 0..dim {
            masked[j] += beta[j];
            raw[j] += s.theta[j];
        }
    }
    if !samples.is_empty() {
        let t = samples.len() as f64;
        masked.iter_mut().for_each(|v| *v /= t);
        raw.iter_mut().for_each(|v| *v /= t);
    }
    let restricted = masked
        .iter()
        .enumerate()
        .map(|(j, &v)| if selected.contains(j) { v } else { 0.0 })
        .collect();
    Ok(CoefficientEstimates {
        masked,
        raw,
        selected: restricted,
    })
}

/// One replicate's selected model and coefficient estimate (length p+1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub selected: ModelIndicator,
    pub estimate: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerReplicate {
    pub fsr: Vec<f64>,
    pub nsr: Vec<f64>,
    pub mse0: Vec<f64>,
    pub mse1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fsr: f64,
    pub nsr: f64,
    pub mse0: f64,
    pub mse1: f64,
    pub fsr_sd: f64,
    pub nsr_sd: f64,
    pub mse0_sd: f64,
    pub mse1_sd: f64,
    pub per_replicate: PerReplicate,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricsReport {
    /// `FSR 0(0)  NSR 0(0)  MSE1 ...  MSE0 ...`
    pub fn table_row(&self) -> String {
        format!(
            "FSR {}  NSR {}  MSE1 {}  MSE0 {}",
            format_mean_sd(self.fsr, self.fsr_sd),
            format_mean_sd(self.nsr, self.nsr_sd),
            format_mean_sd(self.mse1, self.mse1_sd),
            format_mean_sd(self.mse0, self.mse0_sd),
        )
    }
}

/// Selection and estimation errors for one replicate, intercept excluded.
pub fn replicate_metrics(result: &ReplicateResult, truth: &[f64]) -> Result<[f64; 4]> {
    if result.selected.len() != truth.len() || result.estimate.len() != truth.len() {
        return Err(Error::Dimension(
            "replicate result does not match the truth length".into(),
        ));
    }
    let mut false_sel = 0usize;
    let mut sel = 0usize;
    let mut missed = 0usize;
    let mut true_count = 0usize;
    let (mut sq1, mut sq0) = (0.0, 0.0);
    for (j, (&t, &est)) in truth.iter().zip(&result.estimate).enumerate().skip(1) {
        let is_true = t != 0.0;
        let picked = result.selected.contains(j);
        let err = (est - t).powi(2);
        if picked {
            sel += 1;
        }
        if is_true {
            true_count += 1;
            sq1 += err;
            if !picked {
                missed += 1;
            }
        } else {
            sq0 += err;
            if picked {
                false_sel += 1;
            }
        }
    }
    let false_count = truth.len() - 1 - true_count;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok([
        ratio(false_sel, sel),
        ratio(missed, true_count),
        if false_count == 0 {
            0.0
        } else {
            sq0 / false_count as f64
        },
        if true_count == 0 { 0.0 } else { sq1 / true_count as f64 },
    ])
}

pub fn compute_metrics(results: &[ReplicateResult], truth: &[f64], config: serde_json::Value) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::param("replicates", "no replicate results"));
    }
    let mut per = PerReplicate::default();
    for r in results {
        let [fsr, nsr, mse0, mse1] = replicate_metrics(r, truth)?;
        per.fsr.push(fsr);
        per.nsr.push(nsr);
        per.mse0.push(mse0);
        per.mse1.push(mse1);
    }
    let (fsr, fsr_sd) = mean_sd(&per.fsr);
    let (nsr, nsr_sd) = mean_sd(&per.nsr);
    let (mse0, mse0_sd) = mean_sd(&per.mse0);
    let (mse1, mse1_sd) = mean_sd(&per.mse1);
    Ok(MetricsReport {
        fsr,
        nsr,
        mse0,
        mse1,
        fsr_sd,
        nsr_sd,
        mse0_sd,
        mse1_sd,
        per_replicate: per,
        config,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn format_number(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let a = x.abs();
    if (1e-2..1e3).contains(&a) {
        let s = format!("{x:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        let s = format!("{x:.2e}");
        match s.split_once('e') {
            Some((m, e)) => format!("{}e{e}", m.trim_end_matches('0').trim_end_matches('.')),
            None => s,
        }
    }
}

/// `mean(sd)`, e.g. `0(0)` or `2.91e-3(1.2e-4)`.
pub fn format_mean_sd(mean: f64, sd: f64) -> String {
    format!("{}({})", format_number(mean), format_number(sd))
}
