//! Run configuration: a small `key = value` format with `[section]` headers.
//!
//! ```text
//! # comment
//! seed = 7
//! [sampler]
//! n = 200
//! step_size = 1e-6
//! ```
//!
//! Keys outside a section belong to `[run]`. Overrides on the command line
//! use the dotted form `sampler.n=100` and win over the file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use esgld_core::data_model::{Family, GlmPrior, LinearPrior, PriorSpec};
use esgld_core::driver::{DriverConfig, Schedule};
use esgld_core::missing_data::{MissingConfig, RandomInterceptConfig, VarianceMode};
use esgld_core::model_sampler::SamplerOptions;
use esgld_core::synth_io::SynthConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Generate,
    RunEsgld,
    RunMissing,
    RunRjmhBaseline,
    Metrics,
    Ksd,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::RunEsgld => "run-esgld",
            Command::RunMissing => "run-missing",
            Command::RunRjmhBaseline => "run-rjmh-baseline",
            Command::Metrics => "metrics",
            Command::Ksd => "ksd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    Linear,
    Logistic,
}

impl FromStr for FamilyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "linear" => Ok(FamilyKind::Linear),
            "logistic" => Ok(FamilyKind::Logistic),
            _ => Err("expected `linear` or `logistic`".into()),
        }
    }
}

impl std::fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FamilyKind::Linear => "linear",
            FamilyKind::Logistic => "logistic",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub input: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub response: String,
    pub family: FamilyKind,
    pub noise_variance: f64,
    pub rows: usize,
    pub features: usize,
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSection {
    pub q: usize,
    pub lambda: Option<f64>,
    pub slab_variance: f64,
    pub spike_variance: f64,
    pub zeta: f64,
    pub c0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSection {
    pub n: usize,
    pub m: usize,
    pub step_size: f64,
    pub decay_exponent: Option<f64>,
    pub iterations: usize,
    pub burn_in: Option<usize>,
    pub thin: usize,
    pub temperature: f64,
    pub flip_probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissingSection {
    pub groups: usize,
    pub group_size: usize,
    pub beta: Vec<f64>,
    pub noise_variance: f64,
    pub intercept_variance: f64,
    pub learn_variances: bool,
    pub beta_prior_variance: f64,
    pub n: usize,
    pub m: usize,
    pub step_size: f64,
    pub iterations: usize,
    pub burn_in: Option<usize>,
    pub thin: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KsdSection {
    pub samples: Option<PathBuf>,
    pub coordinates: Option<Vec<usize>>,
    pub replicate: usize,
    pub size_limit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSection {
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub replicates: usize,
    pub out: PathBuf,
    pub data: DataSection,
    pub prior: PriorSection,
    pub sampler: SamplerSection,
    pub missing: MissingSection,
    pub ksd: KsdSection,
    pub metrics: MetricsSection,
}

const KEYS: &[&str] = &[
    "run.seed",
    "run.replicates",
    "run.out",
    "data.input",
    "data.truth",
    "data.response",
    "data.family",
    "data.noise_variance",
    "data.rows",
    "data.features",
    "data.correlation",
    "prior.q",
    "prior.lambda",
    "prior.slab_variance",
    "prior.spike_variance",
    "prior.zeta",
    "prior.c0",
    "sampler.n",
    "sampler.m",
    "sampler.step_size",
    "sampler.decay_exponent",
    "sampler.iterations",
    "sampler.burn_in",
    "sampler.thin",
    "sampler.temperature",
    "sampler.flip_probability",
    "missing.groups",
    "missing.group_size",
    "missing.beta",
    "missing.noise_variance",
    "missing.intercept_variance",
    "missing.learn_variances",
    "missing.beta_prior_variance",
    "missing.n",
    "missing.m",
    "missing.step_size",
    "missing.iterations",
    "missing.burn_in",
    "missing.thin",
    "ksd.samples",
    "ksd.coordinates",
    "ksd.replicate",
    "ksd.size_limit",
    "metrics.run_dir",
];

/// Splits the text into dotted keys and raw values.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut section = "run".to_string();
    let mut out = BTreeMap::new();
    for (number, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| CliError::config(format!("line {}: unterminated section header", number + 1)))?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("line {}: expected `key = value`", number + 1)))?;
        let key = format!("{section}.{}", key.trim());
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(CliError::config(format!("key {key}: given more than once")));
        }
    }
    Ok(out)
}

/// Parses `section.key=value` overrides.
pub fn parse_overrides(items: &[String]) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for item in items {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("override `{item}` is not of the form section.key=value")))?;
        let key = key.trim();
        let key = if key.contains('.') {
            key.to_string()
        } else {
            format!("run.{key}")
        };
        out.insert(key, value.trim().to_string());
    }
    Ok(out)
}

struct Entries(BTreeMap<String, String>);

impl Entries {
    fn get<T: FromStr>(&self, key: &str, default: T, expected: &str) -> Result<T, CliError> {
        Ok(self.opt(key, expected)?.unwrap_or(default))
    }

    fn opt<T: FromStr>(&self, key: &str, expected: &str) -> Result<Option<T>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| CliError::config(format!("key {key}: expected {expected}, got `{v}`"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str, expected: &str) -> Result<Option<Vec<T>>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) if v.is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<T>()
                        .map_err(|_| CliError::config(format!("key {key}: expected a list of {expected}, got `{v}`")))
                })
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.0.get(key).filter(|v| !v.is_empty()).map(PathBuf::from)
    }
}

const UINT: &str = "a non-negative integer";
const REAL: &str = "a number";

/// Builds a configuration from file text, flag overrides and an optional
/// seed flag. Defaults are filled in; values are checked by [`RunConfig::validate`].
pub fn parse_config(
    command: Command,
    text: &str,
    overrides: &BTreeMap<String, String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<RunConfig, CliError> {
    let mut map = parse_entries(text)?;
    map.extend(overrides.iter().map(|(k, v)| (k.clone(), v.clone())));
    for key in map.keys() {
        if !KEYS.contains(&key.as_str()) {
            return Err(CliError::config(format!("key {key}: unknown key")));
        }
    }
    let e = Entries(map);
    let family: FamilyKind = e.get("data.family", FamilyKind::Linear, "`linear` or `logistic`")?;
    let features = e.get("data.features", 200usize, UINT)?;
    Ok(RunConfig {
        command,
        seed: match seed {
            Some(s) => s,
            None => e.get("run.seed", 1u64, UINT)?,
        },
        replicates: e.get("run.replicates", 1usize, UINT)?,
        out: match out {
            Some(o) => o,
            None => e.path("run.out").unwrap_or_else(|| PathBuf::from("esgld-out")),
        },
        data: DataSection {
            input: e.path("data.input"),
            truth: e.path("data.truth"),
            response: e.0.get("data.response").cloned().unwrap_or_else(|| "y".into()),
            family,
            noise_variance: e.get("data.noise_variance", 1.0, REAL)?,
            rows: e.get("data.rows", 5000usize, UINT)?,
            features,
            correlation: e.get("data.correlation", 0.5, REAL)?,
        },
        prior: PriorSection {
            q: e.get(
                "prior.q",
                match family {
                    FamilyKind::Linear => 50usize,
                    FamilyKind::Logistic => 100,
                },
                UINT,
            )?,
            lambda: e.opt("prior.lambda", REAL)?,
            slab_variance: e.get("prior.slab_variance", 25.0, REAL)?,
            spike_variance: e.get("prior.spike_variance", 0.025, REAL)?,
            zeta: e.get("prior.zeta", 0.5, REAL)?,
            c0: e.get("prior.c0", 10.0, REAL)?,
        },
        sampler: SamplerSection {
            n: e.get("sampler.n", 200usize, UINT)?,
            m: e.get("sampler.m", 10usize, UINT)?,
            step_size: e.get("sampler.step_size", 1e-6, REAL)?,
            decay_exponent: e.opt("sampler.decay_exponent", REAL)?,
            iterations: e.get("sampler.iterations", 5000usize, UINT)?,
            burn_in: e.opt("sampler.burn_in", UINT)?,
            thin: e.get("sampler.thin", 10usize, UINT)?,
            temperature: e.get("sampler.temperature", 1.0, REAL)?,
            flip_probability: e.get("sampler.flip_probability", 0.5, REAL)?,
        },
        missing: MissingSection {
            groups: e.get("missing.groups", 50usize, UINT)?,
            group_size: e.get("missing.group_size", 20usize, UINT)?,
            beta: e.list("missing.beta", "numbers")?.unwrap_or_else(|| vec![1.0, -1.0]),
            noise_variance: e.get("missing.noise_variance", 1.0, REAL)?,
            intercept_variance: e.get("missing.intercept_variance", 0.25, REAL)?,
            learn_variances: e.get("missing.learn_variances", false, "`true` or `false`")?,
            beta_prior_variance: e.get("missing.beta_prior_variance", 100.0, REAL)?,
            n: e.get("missing.n", 10usize, UINT)?,
            m: e.get("missing.m", 10usize, UINT)?,
            step_size: e.get("missing.step_size", 2e-4, REAL)?,
            iterations: e.get("missing.iterations", 20_000usize, UINT)?,
            burn_in: e.opt("missing.burn_in", UINT)?,
            thin: e.get("missing.thin", 10usize, UINT)?,
        },
        ksd: KsdSection {
            samples: e.path("ksd.samples"),
            coordinates: e.list("ksd.coordinates", "integers")?,
            replicate: e.get("ksd.replicate", 0usize, UINT)?,
            size_limit: e.get("ksd.size_limit", 1e7, REAL)?,
        },
        metrics: MetricsSection {
            run_dir: e.path("metrics.run_dir"),
        },
    })
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Canonical text form; `parse_config` on the result gives back `self`.
pub fn render(c: &RunConfig) -> String {
    let mut s = String::new();
    let section = |s: &mut String, name: &str| {
        let _ = writeln!(s, "\n[{name}]");
    };
    let kv = |s: &mut String, key: &str, value: String| {
        let _ = writeln!(s, "{key} = {value}");
    };
    kv(&mut s, "seed", c.seed.to_string());
    kv(&mut s, "replicates", c.replicates.to_string());
    kv(&mut s, "out", c.out.display().to_string());

    section(&mut s, "data");
    if let Some(p) = &c.data.input {
        kv(&mut s, "input", p.display().to_string());
    }
    if let Some(p) = &c.data.truth {
        kv(&mut s, "truth", p.display().to_string());
    }
    kv(&mut s, "response", c.data.response.clone());
    kv(&mut s, "family", c.data.family.to_string());
    kv(&mut s, "noise_variance", c.data.noise_variance.to_string());
    kv(&mut s, "rows", c.data.rows.to_string());
    kv(&mut s, "features", c.data.features.to_string());
    kv(&mut s, "correlation", c.data.correlation.to_string());

    section(&mut s, "prior");
    kv(&mut s, "q", c.prior.q.to_string());
    if let Some(l) = c.prior.lambda {
        kv(&mut s, "lambda", l.to_string());
    }
    kv(&mut s, "slab_variance", c.prior.slab_variance.to_string());
    kv(&mut s, "spike_variance", c.prior.spike_variance.to_string());
    kv(&mut s, "zeta", c.prior.zeta.to_string());
    kv(&mut s, "c0", c.prior.c0.to_string());

    section(&mut s, "sampler");
    kv(&mut s, "n", c.sampler.n.to_string());
    kv(&mut s, "m", c.sampler.m.to_string());
    kv(&mut s, "step_size", c.sampler.step_size.to_string());
    if let Some(k) = c.sampler.decay_exponent {
        kv(&mut s, "decay_exponent", k.to_string());
    }
    kv(&mut s, "iterations", c.sampler.iterations.to_string());
    if let Some(b) = c.sampler.burn_in {
        kv(&mut s, "burn_in", b.to_string());
    }
    kv(&mut s, "thin", c.sampler.thin.to_string());
    kv(&mut s, "temperature", c.sampler.temperature.to_string());
    kv(&mut s, "flip_probability", c.sampler.flip_probability.to_string());

    section(&mut s, "missing");
    let m = &c.missing;
    kv(&mut s, "groups", m.groups.to_string());
    kv(&mut s, "group_size", m.group_size.to_string());
    kv(&mut s, "beta", join(&m.beta));
    kv(&mut s, "noise_variance", m.noise_variance.to_string());
    kv(&mut s, "intercept_variance", m.intercept_variance.to_string());
    kv(&mut s, "learn_variances", m.learn_variances.to_string());
    kv(&mut s, "beta_prior_variance", m.beta_prior_variance.to_string());
    kv(&mut s, "n", m.n.to_string());
    kv(&mut s, "m", m.m.to_string());
    kv(&mut s, "step_size", m.step_size.to_string());
    kv(&mut s, "iterations", m.iterations.to_string());
    if let Some(b) = m.burn_in {
        kv(&mut s, "burn_in", b.to_string());
    }
    kv(&mut s, "thin", m.thin.to_string());

    section(&mut s, "ksd");
    if let Some(p) = &c.ksd.samples {
        kv(&mut s, "samples", p.display().to_string());
    }
    if let Some(cs) = &c.ksd.coordinates {
        kv(&mut s, "coordinates", join(cs));
    }
    kv(&mut s, "replicate", c.ksd.replicate.to_string());
    kv(&mut s, "size_limit", c.ksd.size_limit.to_string());

    section(&mut s, "metrics");
    if let Some(p) = &c.metrics.run_dir {
        kv(&mut s, "run_dir", p.display().to_string());
    }
    s
}

fn positive(key: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::config(format!("key {key}: must be positive, got {v}")))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<(), CliError> {
    if v >= 1 {
        Ok(())
    } else {
        Err(CliError::config(format!("key {key}: must be at least 1")))
    }
}

fn existing(key: &str, p: &Option<PathBuf>) -> Result<(), CliError> {
    match p {
        Some(path) if !path.exists() => Err(CliError::config(format!(
            "key {key}: path {} does not exist",
            path.display()
        ))),
        _ => Ok(()),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        at_least_one("run.replicates", self.replicates)?;
        existing("data.input", &self.data.input)?;
        existing("data.truth", &self.data.truth)?;
        existing("ksd.samples", &self.ksd.samples)?;
        existing("metrics.run_dir", &self.metrics.run_dir)?;
        at_least_one("sampler.n", self.sampler.n)?;
        at_least_one("sampler.m", self.sampler.m)?;
        at_least_one("sampler.iterations", self.sampler.iterations)?;
        at_least_one("sampler.thin", self.sampler.thin)?;
        positive("sampler.step_size", self.sampler.step_size)?;
        positive("sampler.temperature", self.sampler.temperature)?;
        if let Some(k) = self.sampler.decay_exponent {
            if !(k > 0.0 && k < 1.0) {
                return Err(CliError::config(format!(
                    "key sampler.decay_exponent: must lie in (0, 1), got {k}"
                )));
            }
        }
        if self.sampler_burn_in() >= self.sampler.iterations {
            return Err(CliError::config(
                "key sampler.burn_in: must be smaller than sampler.iterations",
            ));
        }
        if !(0.0..=1.0).contains(&self.sampler.flip_probability) {
            return Err(CliError::config("key sampler.flip_probability: must lie in [0, 1]"));
        }
        at_least_one("prior.q", self.prior.q)?;
        positive("prior.slab_variance", self.prior.slab_variance)?;
        positive("prior.spike_variance", self.prior.spike_variance)?;
        positive("prior.c0", self.prior.c0)?;
        if let Some(l) = self.prior.lambda {
            if !(l > 0.0 && l < 1.0) {
                return Err(CliError::config(format!(
                    "key prior.lambda: must lie in (0, 1), got {l}"
                )));
            }
        }
        if self.data.input.is_none() {
            at_least_one("data.rows", self.data.rows)?;
            at_least_one("data.features", self.data.features)?;
            if !(0.0..1.0).contains(&self.data.correlation) {
                return Err(CliError::config("key data.correlation: must lie in [0, 1)"));
            }
        }
        positive("data.noise_variance", self.data.noise_variance)?;
        let m = &self.missing;
        at_least_one("missing.groups", m.groups)?;
        at_least_one("missing.group_size", m.group_size)?;
        at_least_one("missing.n", m.n)?;
        at_least_one("missing.m", m.m)?;
        at_least_one("missing.iterations", m.iterations)?;
        at_least_one("missing.thin", m.thin)?;
        positive("missing.noise_variance", m.noise_variance)?;
        positive("missing.intercept_variance", m.intercept_variance)?;
        positive("missing.beta_prior_variance", m.beta_prior_variance)?;
        positive("missing.step_size", m.step_size)?;
        if m.beta.is_empty() {
            return Err(CliError::config(
                "key missing.beta: at least one coefficient is required",
            ));
        }
        if self.missing_burn_in() >= m.iterations {
            return Err(CliError::config(
                "key missing.burn_in: must be smaller than missing.iterations",
            ));
        }
        match self.command {
            Command::Metrics if self.metrics.run_dir.is_none() => Err(CliError::config(
                "key metrics.run_dir: required for the metrics command",
            )),
            Command::Ksd if self.ksd.samples.is_none() => {
                Err(CliError::config("key ksd.samples: required for the ksd command"))
            }
            _ => Ok(()),
        }
    }

    /// Burn-in, defaulting to 40% of the iterations.
    pub fn sampler_burn_in(&self) -> usize {
        self.sampler.burn_in.unwrap_or(self.sampler.iterations * 2 / 5)
    }

    pub fn missing_burn_in(&self) -> usize {
        self.missing.burn_in.unwrap_or(self.missing.iterations * 2 / 5)
    }

    pub fn family(&self) -> Family {
        match self.data.family {
            FamilyKind::Linear => Family::Linear {
                noise_variance: self.data.noise_variance,
            },
            FamilyKind::Logistic => Family::Logistic,
        }
    }

    /// Prior for a dataset with `p` features.
    pub fn prior_spec(&self, p: usize) -> PriorSpec {
        match self.data.family {
            FamilyKind::Linear => PriorSpec::Linear(LinearPrior {
                lambda: self
                    .prior
                    .lambda
                    .unwrap_or(LinearPrior::standard(p, self.prior.q).lambda),
                slab_variance: self.prior.slab_variance,
                spike_variance: self.prior.spike_variance,
                max_model_size: self.prior.q,
            }),
            FamilyKind::Logistic => PriorSpec::Glm(GlmPrior {
                zeta: self.prior.zeta,
                c0: self.prior.c0,
                spike_variance: self.prior.spike_variance,
                max_model_size: self.prior.q,
            }),
        }
    }

    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        let base = SynthConfig::linear(self.data.rows, self.data.features, seed);
        SynthConfig {
            family: self.family(),
            correlation: self.data.correlation,
            ..base
        }
    }

    pub fn driver_config(&self, seed: u64) -> DriverConfig {
        let schedule = match self.sampler.decay_exponent {
            None => Schedule::Constant {
                step: self.sampler.step_size,
            },
            Some(exponent) => Schedule::PowerDecay {
                initial: self.sampler.step_size,
                exponent,
            },
        };
        DriverConfig {
            batch_size: self.sampler.n,
            models_per_iteration: self.sampler.m,
            iterations: self.sampler.iterations,
            burn_in: self.sampler_burn_in(),
            thin: self.sampler.thin,
            temperature: self.sampler.temperature,
            schedule,
            seed,
            sampler: SamplerOptions {
                flip_probability: self.sampler.flip_probability,
                ..SamplerOptions::default()
            },
            frozen_model: None,
        }
    }

    pub fn random_intercept_config(&self) -> RandomInterceptConfig {
        RandomInterceptConfig {
            groups: self.missing.groups,
            group_size: self.missing.group_size,
            beta: self.missing.beta.clone(),
            noise_variance: self.missing.noise_variance,
            intercept_variance: self.missing.intercept_variance,
            seed: self.seed,
        }
    }

    pub fn variance_mode(&self) -> VarianceMode {
        if self.missing.learn_variances {
            VarianceMode::Learned { shape: 1.0, scale: 0.5 }
        } else {
            VarianceMode::Fixed {
                noise: self.missing.noise_variance,
                intercept: self.missing.intercept_variance,
            }
        }
    }

    pub fn missing_config(&self) -> MissingConfig {
        MissingConfig {
            batch_size: self.missing.n,
            imputations: self.missing.m,
            iterations: self.missing.iterations,
            burn_in: self.missing_burn_in(),
            thin: self.missing.thin,
            temperature: self.sampler.temperature,
            schedule: Schedule::Constant {
                step: self.missing.step_size,
            },
            seed: self.seed,
        }
    }
}
