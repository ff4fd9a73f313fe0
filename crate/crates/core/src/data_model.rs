//! Core domain types: datasets, mini-batches, model indicators and the
//! spike-and-slab priors over models and auxiliary coefficients.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Likelihood family of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    /// Gaussian errors with known variance.
    Linear {
        noise_variance: f64,
    },
    Logistic,
}

impl Family {
    pub fn is_logistic(&self) -> bool {
        matches!(self, Family::Logistic)
    }
}

/// Full design matrix (intercept in column 0) plus response.
///
/// The design is stored row-major; row `i` is `design[i*dim..(i+1)*dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    rows: usize,
    dim: usize,
    design: Vec<f64>,
    response: Vec<f64>,
    family: Family,
    feature_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from a row-major `rows x p` feature block; the
    /// intercept column is prepended here.
    pub fn from_features(
        features: &[f64],
        rows: usize,
        p: usize,
        response: Vec<f64>,
        family: Family,
        feature_names: Option<Vec<String>>,
    ) -> Result<Self> {
        if features.len() != rows * p {
            return Err(Error::Dimension(format!(
                "feature block has {} entries, expected {rows}x{p}",
                features.len()
            )));
        }
        let dim = p + 1;
        let mut design = Vec::with_capacity(rows * dim);
        for r in 0..rows {
            design.push(1.0);
            design.extend_from_slice(&features[r * p..(r + 1) * p]);
        }
        let names = feature_names.unwrap_or_else(|| (1..=p).map(|j| format!("z{j}")).collect());
        Self::new(design, rows, dim, response, family, names)
    }

    /// Builds a dataset from a full design that already carries the intercept column.
    pub fn new(
        design: Vec<f64>,
        rows: usize,
        dim: usize,
        response: Vec<f64>,
        family: Family,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if dim == 0 || design.len() != rows * dim {
            return Err(Error::Dimension(format!(
                "design has {} entries, expected {rows}x{dim}",
                design.len()
            )));
        }
        if response.len() != rows {
            return Err(Error::Dimension(format!(
                "response has length {}, expected {rows}",
                response.len()
            )));
        }
        if feature_names.len() + 1 != dim {
            return Err(Error::Dimension(format!(
                "{} feature names for {} features",
                feature_names.len(),
                dim - 1
            )));
        }
        if (0..rows).any(|r| design[r * dim] != 1.0) {
            return Err(Error::Contract("design column 0 must be identically 1".into()));
        }
        match family {
            Family::Linear { noise_variance } => {
                if !(noise_variance > 0.0 && noise_variance.is_finite()) {
                    return Err(Error::param("noise_variance", "must be positive and finite"));
                }
            }
            Family::Logistic => {
                if let Some(r) = response.iter().position(|&y| y != 0.0 && y != 1.0) {
                    return Err(Error::Contract(format!(
                        "logistic response at row {r} is {}, expected 0 or 1",
                        response[r]
                    )));
                }
            }
        }
        Ok(Self {
            rows,
            dim,
            design,
            response,
            family,
            feature_names,
        })
    }

    /// Number of observations N.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of explanatory variables p (intercept excluded).
    pub fn features(&self) -> usize {
        self.dim - 1
    }

    /// Length of θ, i.e. p + 1.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.design[i * self.dim..(i + 1) * self.dim]
    }

    pub fn design(&self) -> &[f64] {
        &self.design
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Name of position `j` of θ; position 0 is the intercept.
    pub fn position_name(&self, j: usize) -> &str {
        if j == 0 {
            "intercept"
        } else {
            &self.feature_names[j - 1]
        }
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.design[r * self.dim + j]).collect()
    }

    pub fn noise_variance(&self) -> Option<f64> {
        match self.family {
            Family::Linear { noise_variance } => Some(noise_variance),
            Family::Logistic => None,
        }
    }
}

/// Row indices of a subsample together with the duplication factor N/n.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    indices: Vec<usize>,
    total_rows: usize,
}

impl MiniBatch {
    pub fn new(indices: Vec<usize>, total_rows: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::param("n", "mini-batch must not be empty"));
        }
        if indices.len() > total_rows {
            return Err(Error::param("n", "mini-batch larger than the dataset"));
        }
        let mut seen = vec![false; total_rows];
        for &i in &indices {
            if i >= total_rows {
                return Err(Error::Dimension(format!("row index {i} out of range 0..{total_rows}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("row index {i} repeated in mini-batch")));
            }
        }
        Ok(Self { indices, total_rows })
    }

    /// All rows in natural order; replication factor 1.
    pub fn full(total_rows: usize) -> Self {
        Self {
            indices: (0..total_rows).collect(),
            total_rows,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.total_rows
    }

    /// N/n as a real number; N need not be a multiple of n.
    pub fn replication_factor(&self) -> f64 {
        self.total_rows as f64 / self.indices.len() as f64
    }
}

/// Binary inclusion vector over the p+1 positions of θ (intercept at 0).
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "IndicatorRepr", try_from = "IndicatorRepr")]
pub struct ModelIndicator {
    words: Vec<u64>,
    len: usize,
    size: usize,
}

#[derive(Serialize, Deserialize)]
struct IndicatorRepr {
    len: usize,
    included: Vec<usize>,
}

impl From<ModelIndicator> for IndicatorRepr {
    fn from(m: ModelIndicator) -> Self {
        IndicatorRepr {
            len: m.len,
            included: m.included().collect(),
        }
    }
}

impl TryFrom<IndicatorRepr> for ModelIndicator {
    type Error = Error;
    fn try_from(r: IndicatorRepr) -> Result<Self> {
        ModelIndicator::from_indices(r.len, &r.included)
    }
}

impl ModelIndicator {
    pub fn empty(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
            size: 0,
        }
    }

    pub fn full(len: usize) -> Self {
        let mut m = Self::empty(len);
        for i in 0..len {
            m.insert(i);
        }
        m
    }

    pub fn from_indices(len: usize, included: &[usize]) -> Result<Self> {
        let mut m = Self::empty(len);
        for &i in included {
            if i >= len {
                return Err(Error::Dimension(format!("index {i} out of range 0..{len}")));
            }
            m.insert(i);
        }
        Ok(m)
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut m = Self::empty(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                m.insert(i);
            }
        }
        m
    }

    /// Model whose bit `i` is bit `i` of `mask`; `len` must be at most 64.
    pub fn from_mask(len: usize, mask: u64) -> Self {
        assert!(len <= 64);
        let mut m = Self::empty(len);
        for i in 0..len {
            if mask >> i & 1 == 1 {
                m.insert(i);
            }
        }
        m
    }

    pub fn to_mask(&self) -> Option<u64> {
        (self.len <= 64).then(|| self.words.first().copied().unwrap_or(0))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of included positions, |S|.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    /// Returns whether the bit changed.
    pub fn insert(&mut self, i: usize) -> bool {
        if self.contains(i) {
            return false;
        }
        self.words[i / 64] |= 1 << (i % 64);
        self.size += 1;
        true
    }

    pub fn remove(&mut self, i: usize) -> bool {
        if !self.contains(i) {
            return false;
        }
        self.words[i / 64] &= !(1 << (i % 64));
        self.size -= 1;
        true
    }

    pub fn included(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&i| self.contains(i))
    }

    pub fn excluded(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&i| !self.contains(i))
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.contains(i)).collect()
    }
}

impl fmt::Debug for ModelIndicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ModelIndicator(len={}, {{", self.len)?;
        for (k, i) in self.included().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{i}")?;
        }
        write!(f, "}})")
    }
}

/// Auxiliary parameter vector θ and the iteration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaState {
    pub theta: Vec<f64>,
    pub iteration: usize,
}

impl ThetaState {
    pub fn zeros(dim: usize) -> Self {
        Self {
            theta: vec![0.0; dim],
            iteration: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }
}

/// Spike-and-slab prior with a fixed slab variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearPrior {
    pub lambda: f64,
    pub slab_variance: f64,
    pub spike_variance: f64,
    pub max_model_size: usize,
}

impl LinearPrior {
    /// λ = 1/(p+1)^1.1, σ1² = 25, σ0² = 0.025.
    pub fn standard(p: usize, max_model_size: usize) -> Self {
        Self {
            lambda: 1.0 / ((p + 1) as f64).powf(1.1),
            slab_variance: 25.0,
            spike_variance: 0.025,
            max_model_size,
        }
    }
}

/// GLM prior: λ = 1/{1 + (p+1)^ζ √(2π)} and model-size dependent slab
/// variance σ_S² = exp(C0/|S|)/(2π).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlmPrior {
    pub zeta: f64,
    pub c0: f64,
    pub spike_variance: f64,
    pub max_model_size: usize,
}

impl GlmPrior {
    pub fn standard(max_model_size: usize) -> Self {
        Self {
            zeta: 0.5,
            c0: 10.0,
            spike_variance: 0.025,
            max_model_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    Linear(LinearPrior),
    Glm(GlmPrior),
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let (spike, q) = (self.spike_variance(), self.max_model_size());
        if !(spike > 0.0 && spike.is_finite()) {
            return Err(Error::param("spike_variance", "must be positive"));
        }
        if q < 1 {
            return Err(Error::param("max_model_size", "must be at least 1"));
        }
        match self {
            PriorSpec::Linear(l) => {
                if !(l.lambda > 0.0 && l.lambda < 1.0) {
                    return Err(Error::param("lambda", "must lie in (0, 1)"));
                }
                if !(l.slab_variance > 0.0 && l.slab_variance.is_finite()) {
                    return Err(Error::param("slab_variance", "must be positive"));
                }
            }
            PriorSpec::Glm(g) => {
                if !(g.c0 > 0.0 && g.c0.is_finite()) {
                    return Err(Error::param("c0", "must be positive"));
                }
                if !g.zeta.is_finite() {
                    return Err(Error::param("zeta", "must be finite"));
                }
            }
        }
        Ok(())
    }

    /// Prior inclusion probability for a θ of length `dim` = p+1.
    pub fn lambda(&self, dim: usize) -> f64 {
        match self {
            PriorSpec::Linear(l) => l.lambda,
            PriorSpec::Glm(g) => 1.0 / (1.0 + (dim as f64).powf(g.zeta) * (2.0 * PI).sqrt()),
        }
    }

    pub fn max_model_size(&self) -> usize {
        match self {
            PriorSpec::Linear(l) => l.max_model_size,
            PriorSpec::Glm(g) => g.max_model_size,
        }
    }

    pub fn spike_variance(&self) -> f64 {
        match self {
            PriorSpec::Linear(l) => l.spike_variance,
            PriorSpec::Glm(g) => g.spike_variance,
        }
    }

    /// Slab variance for a model of the given size. For the GLM prior the
    /// empty model borrows the |S| = 1 value.
    pub fn slab_variance(&self, size: usize) -> f64 {
        match self {
            PriorSpec::Linear(l) => l.slab_variance,
            PriorSpec::Glm(g) => (g.c0 / size.max(1) as f64).exp() / (2.0 * PI),
        }
    }

    /// Log model prior as a function of |S| only (normalizer dropped).
    pub fn log_model_prior_for_size(&self, size: usize, dim: usize) -> f64 {
        if size > self.max_model_size() {
            return f64::NEG_INFINITY;
        }
        let lambda = self.lambda(dim);
        size as f64 * lambda.ln() + (dim - size) as f64 * (-lambda).ln_1p()
    }

    /// log π(θ|γ) from sufficient statistics: the model size and the sums of
    /// squares of θ over included and excluded positions.
    pub fn log_theta_prior_from_sums(&self, size: usize, dim: usize, included_sq: f64, excluded_sq: f64) -> f64 {
        let slab = self.slab_variance(size);
        let spike = self.spike_variance();
        let n_in = size as f64;
        let n_out = (dim - size) as f64;
        -0.5 * n_in * (2.0 * PI * slab).ln()
            - included_sq / (2.0 * slab)
            - 0.5 * n_out * (2.0 * PI * spike).ln()
            - excluded_sq / (2.0 * spike)
    }
}

/// β = θ ∗ γ elementwise.
pub fn beta_from(theta: &[f64], gamma: &ModelIndicator) -> Result<Vec<f64>> {
    if theta.len() != gamma.len() {
        return Err(Error::Dimension(format!(
            "theta has length {}, model indicator {}",
            theta.len(),
            gamma.len()
        )));
    }
    Ok(theta
        .iter()
        .enumerate()
        .map(|(i, &t)| if gamma.contains(i) { t } else { 0.0 })
        .collect())
}

/// |S| log λ + (p+1-|S|) log(1-λ), or -∞ when |S| > q.
pub fn log_model_prior(gamma: &ModelIndicator, prior: &PriorSpec) -> f64 {
    prior.log_model_prior_for_size(gamma.size(), gamma.len())
}

pub fn log_theta_prior(theta: &[f64], gamma: &ModelIndicator, prior: &PriorSpec) -> f64 {
    debug_assert_eq!(theta.len(), gamma.len());
    let (mut inc, mut exc) = (0.0, 0.0);
    for (i, &t) in theta.iter().enumerate() {
        if gamma.contains(i) {
            inc += t * t;
        } else {
            exc += t * t;
        }
    }
    prior.log_theta_prior_from_sums(gamma.size(), gamma.len(), inc, exc)
}

pub fn grad_log_theta_prior(theta: &[f64], gamma: &ModelIndicator, prior: &PriorSpec) -> Vec<f64> {
    let slab = prior.slab_variance(gamma.size());
    let spike = prior.spike_variance();
    theta
        .iter()
        .enumerate()
        .map(|(i, &t)| if gamma.contains(i) { -t / slab } else { -t / spike })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn linear(lambda: f64, q: usize) -> PriorSpec {
        PriorSpec::Linear(LinearPrior {
            lambda,
            slab_variance: 25.0,
            spike_variance: 0.025,
            max_model_size: q,
        })
    }

    #[test]
    fn beta_from_masks() {
        let g = ModelIndicator::from_bools(&[true, false, true]);
        assert_eq!(beta_from(&[1.0, 2.0, 3.0], &g).unwrap(), vec![1.0, 0.0, 3.0]);
        let g = ModelIndicator::from_bools(&[false, true]);
        assert_eq!(beta_from(&[0.5, -1.0], &g).unwrap(), vec![0.0, -1.0]);
        let theta = [0.3, -7.0, 2.5, 1e-9];
        assert_eq!(beta_from(&theta, &ModelIndicator::full(4)).unwrap(), theta.to_vec());
        assert!(matches!(
            beta_from(&[1.0], &ModelIndicator::empty(2)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn excluded_entries_are_exact_zero() {
        let g = ModelIndicator::from_indices(4, &[1]).unwrap();
        let b = beta_from(&[f64::MAX, 1.0, -0.0, 3.0], &g).unwrap();
        assert_eq!(b[0].to_bits(), 0.0f64.to_bits());
        assert_eq!(b[3].to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn model_prior_symmetric_case() {
        let g = ModelIndicator::from_bools(&[true, false]);
        let v = log_model_prior(&g, &linear(0.5, 2));
        assert!((v - (-1.3862944)).abs() < 1e-7);
    }

    #[test]
    fn model_prior_large_p() {
        let dim = 2002;
        let lambda = 1.0 / (dim as f64).powf(1.1);
        let g = ModelIndicator::from_indices(dim, &[0, 1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        let expected = 9.0 * lambda.ln() + 1993.0 * (1.0 - lambda).ln();
        let got = log_model_prior(&g, &linear(lambda, 50));
        assert!((got - expected).abs() < 1e-9 * expected.abs());
    }

    #[test]
    fn model_prior_over_q_is_zero_mass() {
        let g = ModelIndicator::from_indices(6, &[0, 1, 2]).unwrap();
        assert_eq!(log_model_prior(&g, &linear(0.3, 2)), f64::NEG_INFINITY);
        assert!(log_model_prior(&g, &linear(0.3, 3)).is_finite());
    }

    #[test]
    fn glm_lambda_formula() {
        let prior = PriorSpec::Glm(GlmPrior::standard(100));
        let dim = 201usize;
        let expected = 1.0 / (1.0 + 201f64.sqrt() * (2.0 * PI).sqrt());
        assert!((prior.lambda(dim) - expected).abs() < 1e-15);
    }

    #[test]
    fn theta_prior_at_zero() {
        let g = ModelIndicator::from_indices(5, &[1, 3]).unwrap();
        let got = log_theta_prior(&[0.0; 5], &g, &linear(0.1, 5));
        let expected = -(2.0 / 2.0) * (2.0 * PI * 25.0).ln() - (3.0 / 2.0) * (2.0 * PI * 0.025).ln();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn theta_prior_single_included_coordinate() {
        let g = ModelIndicator::from_indices(2, &[0]).unwrap();
        let prior = linear(0.1, 2);
        let with = log_theta_prior(&[5.0, 0.0], &g, &prior);
        let without = log_theta_prior(&[0.0, 0.0], &g, &prior);
        let contrib = -0.5 * (2.0 * PI * 25.0).ln() - 25.0 / 50.0;
        let base = -0.5 * (2.0 * PI * 25.0).ln();
        assert!(((with - without) - (contrib - base)).abs() < 1e-12);
    }

    #[test]
    fn glm_slab_variance() {
        let prior = PriorSpec::Glm(GlmPrior::standard(100));
        let v = prior.slab_variance(5);
        assert!((v - 2f64.exp() / (2.0 * PI)).abs() < 1e-14);
        assert!((v - 1.17600).abs() < 1e-5);
        assert_eq!(prior.slab_variance(0), prior.slab_variance(1));
        // per-coordinate density uses σ_S²
        let g = ModelIndicator::from_indices(6, &[1, 2, 3, 4, 5]).unwrap();
        let mut theta = vec![0.0; 6];
        theta[2] = 0.7;
        let d = log_theta_prior(&theta, &g, &prior) - log_theta_prior(&[0.0; 6], &g, &prior);
        assert!((d - (-0.49 / (2.0 * v))).abs() < 1e-12);
    }

    #[test]
    fn prior_gradient_examples() {
        let g = ModelIndicator::from_indices(3, &[0]).unwrap();
        let prior = linear(0.1, 3);
        assert_eq!(grad_log_theta_prior(&[0.0; 3], &g, &prior), vec![0.0; 3]);
        let gr = grad_log_theta_prior(&[0.0, 1.0, 0.0], &g, &prior);
        assert!((gr[1] + 40.0).abs() < 1e-12);
    }

    #[test]
    fn prior_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let priors = [linear(0.2, 8), PriorSpec::Glm(GlmPrior::standard(8))];
        for k in 0..100 {
            let dim = 7;
            let prior = &priors[k % 2];
            let theta: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g = ModelIndicator::from_bools(&(0..dim).map(|_| rng.random_bool(0.5)).collect::<Vec<_>>());
            let grad = grad_log_theta_prior(&theta, &g, prior);
            for i in 0..dim {
                let h = 1e-5;
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[i] += h;
                tm[i] -= h;
                let fd = (log_theta_prior(&tp, &g, prior) - log_theta_prior(&tm, &g, prior)) / (2.0 * h);
                let scale = grad[i].abs().max(1.0);
                assert!((fd - grad[i]).abs() / scale < 1e-6, "coord {i}: fd {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn single_coordinate_density_integrates_to_one() {
        // Vary one coordinate, hold the rest at 0: the conditional density
        // exp(log_theta_prior) / exp(rest) must integrate to 1.
        for (included, prior) in [
            (true, linear(0.2, 4)),
            (false, linear(0.2, 4)),
            (true, PriorSpec::Glm(GlmPrior::standard(4))),
        ] {
            let g = if included {
                ModelIndicator::from_indices(3, &[1]).unwrap()
            } else {
                ModelIndicator::empty(3)
            };
            let base = log_theta_prior(&[0.0; 3], &g, &prior);
            let var = if included {
                prior.slab_variance(1)
            } else {
                prior.spike_variance()
            };
            let rest = base + 0.5 * (2.0 * PI * var).ln();
            let half_width = 12.0 * var.sqrt();
            let steps = 20_000;
            let h = 2.0 * half_width / steps as f64;
            // composite Simpson
            let mut acc = 0.0;
            for s in 0..=steps {
                let x = -half_width + s as f64 * h;
                let w = if s == 0 || s == steps {
                    1.0
                } else if s % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += w * (log_theta_prior(&[0.0, x, 0.0], &g, &prior) - rest).exp();
            }
            let integral = acc * h / 3.0;
            assert!((integral - 1.0).abs() < 1e-6, "integral {integral}");
        }
    }

    #[test]
    fn model_prior_differences_depend_only_on_size() {
        let dim = 10;
        let prior = linear(0.17, dim);
        let mut by_size: Vec<Option<f64>> = vec![None; dim + 1];
        for mask in 0u64..(1 << dim) {
            let g = ModelIndicator::from_mask(dim, mask);
            let v = log_model_prior(&g, &prior);
            match by_size[g.size()] {
                None => by_size[g.size()] = Some(v),
                Some(prev) => assert_eq!(prev, v),
            }
        }
        let lr = (0.17f64 / 0.83).ln();
        for s in 1..=dim {
            let d = by_size[s].unwrap() - by_size[s - 1].unwrap();
            assert!((d - lr).abs() < 1e-12);
        }
    }

    #[test]
    fn minibatch_rejects_duplicates_and_out_of_range() {
        assert!(MiniBatch::new(vec![0, 1, 1], 5).is_err());
        assert!(MiniBatch::new(vec![0, 5], 5).is_err());
        let b = MiniBatch::new(vec![4, 0, 2], 10).unwrap();
        assert!((b.replication_factor() - 10.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dataset_validation() {
        let ok = Dataset::from_features(&[1.0, 2.0], 2, 1, vec![0.0, 1.0], Family::Logistic, None).unwrap();
        assert_eq!(ok.dim(), 2);
        assert_eq!(ok.row(1), &[1.0, 2.0]);
        assert!(Dataset::from_features(&[1.0, 2.0], 2, 1, vec![0.0, 0.5], Family::Logistic, None).is_err());
        assert!(Dataset::from_features(
            &[1.0, 2.0],
            2,
            1,
            vec![0.0, 0.5],
            Family::Linear { noise_variance: 0.0 },
            None
        )
        .is_err());
        assert!(Dataset::new(
            vec![1.0, 3.0, 0.5, 2.0],
            2,
            2,
            vec![0.0; 2],
            Family::Logistic,
            vec!["a".into()]
        )
        .is_err());
    }

    #[test]
    fn indicator_serde_round_trip() {
        let g = ModelIndicator::from_indices(130, &[0, 64, 129]).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        let back: ModelIndicator = serde_json::from_str(&s).unwrap();
        assert_eq!(g, back);
        assert_eq!(back.size(), 3);
    }

    proptest! {
        #[test]
        fn remasking_is_idempotent(theta in prop::collection::vec(-1e3f64..1e3, 1..40), seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let bits: Vec<bool> = (0..theta.len()).map(|_| rng.random_bool(0.5)).collect();
            let g = ModelIndicator::from_bools(&bits);
            let once = beta_from(&theta, &g).unwrap();
            let twice = beta_from(&once, &g).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn size_tracks_popcount(ops in prop::collection::vec((0usize..100, any::<bool>()), 0..200)) {
            let mut g = ModelIndicator::empty(100);
            for (i, add) in ops {
                if add { g.insert(i); } else { g.remove(i); }
            }
            prop_assert_eq!(g.size(), g.included().count());
        }
    }
}
