//! Subcommand implementations and artifact writers.
//!
//! Layout of a chain run directory:
//!
//! ```text
//! out/manifest.json       seed, config hash, timing, per-replicate seeds
//! out/config.ini          rendered configuration
//! out/inclusion.csv       replicate-averaged inclusion probabilities
//! out/metrics.json        when the true coefficients are known
//! out/truth.json          when the data were generated
//! out/rep_000/theta.csv   thinned θ draws with the concurrent model
//! out/rep_000/inclusion.csv
//! out/rep_000/estimates.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use esgld_core::data_model::{Dataset, MiniBatch, ModelIndicator};
use esgld_core::diagnostics::{check_size, exact_marginal_gradient, full_data_rjmh, ksd, ENUMERATION_CAP};
use esgld_core::driver::{run_with_weights, ChainOutput, PhaseTiming, ThetaSample};
use esgld_core::gradients::grad_conditional;
use esgld_core::inference_metrics::{
    chain_inclusion, coefficient_estimates, compute_metrics, MetricsReport, ReplicateResult,
};
use esgld_core::missing_data::{generate_random_intercept, run_missing, RandomInterceptModel};
use esgld_core::model_sampler::proposal_weights;
use esgld_core::synth_io::{generate, load_csv, write_csv, CsvOptions, SynthConfig};

use crate::config::{render, Command, RunConfig};
use crate::CliError;

type Result<T, E = CliError> = std::result::Result<T, E>;

const DATA_SALT: u64 = 0xda7a_0000_0000_0001;
const CHAIN_SALT: u64 = 0xc4a1_0000_0000_0002;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for replicate `replicate`, decorrelated from the master seed.
pub fn derive_seed(seed: u64, replicate: usize, salt: u64) -> u64 {
    splitmix(splitmix(seed ^ salt).wrapping_add(replicate as u64))
}

pub fn execute(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(CliError::io(&cfg.out))?;
    match cfg.command {
        Command::Generate => cmd_generate(cfg),
        Command::RunEsgld => cmd_chains(cfg, false),
        Command::RunRjmhBaseline => cmd_chains(cfg, true),
        Command::RunMissing => cmd_missing(cfg),
        Command::Metrics => cmd_metrics(cfg),
        Command::Ksd => cmd_ksd(cfg),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TruthFile {
    beta: Vec<f64>,
    #[serde(default)]
    synth: Option<SynthConfig>,
}

struct Problem {
    dataset: Dataset,
    truth: Option<Vec<f64>>,
    synth: Option<SynthConfig>,
    data_seed: Option<u64>,
}

fn read_truth(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let truth: TruthFile = serde_json::from_str(&text)?;
    Ok(truth.beta)
}

fn load_problem(cfg: &RunConfig, replicate: usize) -> Result<Problem> {
    let override_truth = cfg.data.truth.as_deref().map(read_truth).transpose()?;
    let problem = match &cfg.data.input {
        Some(input) => {
            let options = CsvOptions {
                response_column: cfg.data.response.clone(),
                family: cfg.family(),
            };
            Problem {
                dataset: load_csv(input, &options)?,
                truth: override_truth,
                synth: None,
                data_seed: None,
            }
        }
        None => {
            let seed = derive_seed(cfg.seed, replicate, DATA_SALT);
            let synth = cfg.synth_config(seed);
            Problem {
                dataset: generate(&synth)?,
                truth: override_truth.or_else(|| Some(synth.true_beta())),
                synth: Some(synth),
                data_seed: Some(seed),
            }
        }
    };
    if let Some(t) = &problem.truth {
        if t.len() != problem.dataset.dim() {
            return Err(CliError::Input(format!(
                "truth has {} entries but the data have {} positions (intercept included)",
                t.len(),
                problem.dataset.dim()
            )));
        }
    }
    Ok(problem)
}

fn position_names(ds: &Dataset) -> Vec<String> {
    (0..ds.dim()).map(|j| ds.position_name(j).to_string()).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(CliError::io(path))
}

#[derive(Debug, Serialize, Deserialize)]
struct InclusionRow {
    variable: String,
    prob: f64,
    selected: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct EstimateRow {
    variable: String,
    masked: f64,
    raw: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(CliError::io(path))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(CliError::from)).collect()
}

fn write_inclusion(path: &Path, names: &[String], probs: &[f64]) -> Result<()> {
    write_rows(
        path,
        names.iter().zip(probs).map(|(name, &prob)| InclusionRow {
            variable: name.clone(),
            prob,
            selected: u8::from(prob > 0.5),
        }),
    )
}

fn format_model(g: &ModelIndicator) -> String {
    g.included().map(|j| j.to_string()).collect::<Vec<_>>().join(";")
}

fn parse_model(dim: usize, text: &str) -> Result<ModelIndicator> {
    let idx = text
        .split(';')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Input(format!("bad model entry `{text}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelIndicator::from_indices(dim, &idx)?)
}

/// Columns: iteration, model (included positions joined by `;`), then θ.
fn write_theta(path: &Path, names: &[String], samples: &[ThetaSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["iteration".to_string(), "model".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for s in samples {
        let mut record = vec![s.iteration.to_string(), format_model(&s.model)];
        record.extend(s.theta.iter().map(f64::to_string));
        w.write_record(&record)?;
    }
    w.flush().map_err(CliError::io(path))
}

struct ThetaTable {
    samples: Vec<Vec<f64>>,
    models: Vec<ModelIndicator>,
}

fn read_theta(path: &Path) -> Result<ThetaTable> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.len() < 3 || &header[0] != "iteration" || &header[1] != "model" {
        return Err(CliError::Input(format!(
            "{}: expected columns iteration,model,<θ...>",
            path.display()
        )));
    }
    let dim = header.len() - 2;
    let mut table = ThetaTable {
        samples: Vec::new(),
        models: Vec::new(),
    };
    for (k, record) in r.records().enumerate() {
        let record = record?;
        let theta = record
            .iter()
            .skip(2)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| CliError::Input(format!("{}: row {}: `{v}` is not a number", path.display(), k + 2)))
            })
            .collect::<Result<Vec<_>>>()?;
        table.models.push(parse_model(dim, &record[1])?);
        table.samples.push(theta);
    }
    Ok(table)
}

#[derive(Debug, Default, Serialize)]
struct TimingSummary {
    subsampling_secs: f64,
    model_moves_secs: f64,
    theta_update_secs: f64,
    diagnostics_secs: f64,
    total_secs: f64,
}

impl TimingSummary {
    fn new(phases: &PhaseTiming, diagnostics: Duration) -> Self {
        Self {
            subsampling_secs: phases.subsampling.as_secs_f64(),
            model_moves_secs: phases.model_moves.as_secs_f64(),
            theta_update_secs: phases.theta_update.as_secs_f64(),
            diagnostics_secs: diagnostics.as_secs_f64(),
            total_secs: (phases.total() + diagnostics).as_secs_f64(),
        }
    }
}

#[derive(Debug, Serialize)]
struct ReplicateEntry {
    index: usize,
    data_seed: Option<u64>,
    chain_seed: u64,
    samples: usize,
    acceptance_rate: f64,
    warnings: Vec<String>,
    timing: PhaseTiming,
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: &'static str,
    version: &'static str,
    seed: u64,
    config_sha256: String,
    config: String,
    timing: TimingSummary,
    replicates: Vec<ReplicateEntry>,
    outputs: Vec<String>,
}

fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write_manifest(
    cfg: &RunConfig,
    timing: TimingSummary,
    replicates: Vec<ReplicateEntry>,
    mut outputs: Vec<String>,
) -> Result<()> {
    let rendered = render(cfg);
    let config_path = cfg.out.join("config.ini");
    fs::write(&config_path, &rendered).map_err(CliError::io(&config_path))?;
    outputs.push("config.ini".into());
    outputs.push("manifest.json".into());
    let manifest = Manifest {
        command: cfg.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_sha256: sha256_hex(&rendered),
        config: rendered,
        timing,
        replicates,
        outputs,
    };
    write_json(&cfg.out.join("manifest.json"), &manifest)
}

fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let problem = load_problem(
        &RunConfig {
            data: crate::config::DataSection {
                input: None,
                ..cfg.data.clone()
            },
            ..cfg.clone()
        },
        0,
    )?;
    write_csv(&problem.dataset, cfg.out.join("data.csv"), &cfg.data.response)?;
    let truth = TruthFile {
        beta: problem.truth.clone().unwrap_or_default(),
        synth: problem.synth.clone(),
    };
    write_json(&cfg.out.join("truth.json"), &truth)?;
    log::info!(
        "generated {} rows × {} features into {}",
        problem.dataset.rows(),
        problem.dataset.features(),
        cfg.out.display()
    );
    write_manifest(
        cfg,
        TimingSummary::default(),
        Vec::new(),
        vec!["data.csv".into(), "truth.json".into()],
    )
}

struct ReplicateOutcome {
    entry: ReplicateEntry,
    names: Vec<String>,
    probs: Vec<f64>,
    result: ReplicateResult,
    truth: Option<Vec<f64>>,
    synth: Option<SynthConfig>,
}

fn replicate_dir(out: &Path, r: usize) -> PathBuf {
    out.join(format!("rep_{r:03}"))
}

fn run_replicate(cfg: &RunConfig, r: usize, baseline: bool) -> Result<ReplicateOutcome> {
    let problem = load_problem(cfg, r)?;
    let ds = &problem.dataset;
    let prior = cfg.prior_spec(ds.features());
    let weights = proposal_weights(ds)?;
    let chain_seed = derive_seed(cfg.seed, r, CHAIN_SALT);
    let driver = cfg.driver_config(chain_seed);
    let dir = replicate_dir(&cfg.out, r);
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let names = position_names(ds);

    let outcome = if baseline {
        full_data_rjmh(ds, &prior, &weights, &driver)
    } else {
        run_with_weights(ds, &prior, &weights, &driver)
    };
    let chain: ChainOutput = match outcome {
        Ok(c) => c,
        Err(esgld_core::Error::Divergence(report)) => {
            if let Some(partial) = &report.partial {
                write_theta(&dir.join("theta_partial.csv"), &names, &partial.theta_samples)?;
            }
            return Err(esgld_core::Error::Divergence(report).into());
        }
        Err(e) => return Err(e.into()),
    };
    for w in &chain.warnings {
        log::warn!("replicate {r}: {w}");
    }

    let inclusion = chain_inclusion(&chain)?;
    let estimates = coefficient_estimates(&chain.theta_samples, &inclusion.selected)?;
    write_theta(&dir.join("theta.csv"), &names, &chain.theta_samples)?;
    write_inclusion(&dir.join("inclusion.csv"), &names, &inclusion.probs)?;
    write_rows(
        &dir.join("estimates.csv"),
        names.iter().enumerate().map(|(j, name)| EstimateRow {
            variable: name.clone(),
            masked: estimates.masked[j],
            raw: estimates.raw[j],
        }),
    )?;

    Ok(ReplicateOutcome {
        entry: ReplicateEntry {
            index: r,
            data_seed: problem.data_seed,
            chain_seed,
            samples: chain.theta_samples.len(),
            acceptance_rate: chain.acceptance_rate(),
            warnings: chain.warnings.clone(),
            timing: chain.timing,
        },
        names,
        probs: inclusion.probs.clone(),
        result: ReplicateResult {
            selected: inclusion.selected,
            estimate: estimates.masked,
        },
        truth: problem.truth,
        synth: problem.synth,
    })
}

fn metrics_config(cfg: &RunConfig) -> serde_json::Value {
    let rendered = render(cfg);
    serde_json::json!({
        "command": cfg.command.name(),
        "replicates": cfg.replicates,
        "config_sha256": sha256_hex(&rendered),
    })
}

fn cmd_chains(cfg: &RunConfig, baseline: bool) -> Result<()> {
    let outcomes = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| run_replicate(cfg, r, baseline))
        .collect::<Result<Vec<_>>>()?;

    let mut outputs = Vec::new();
    for o in &outcomes {
        let dir = format!("rep_{:03}", o.entry.index);
        outputs.extend(["theta.csv", "inclusion.csv", "estimates.csv"].map(|f| format!("{dir}/{f}")));
    }

    let names = &outcomes[0].names;
    if outcomes.iter().any(|o| o.names.len() != names.len()) {
        return Err(CliError::Input("replicates disagree on the number of positions".into()));
    }
    let mut mean_probs = vec![0.0; names.len()];
    for o in &outcomes {
        for (acc, p) in mean_probs.iter_mut().zip(&o.probs) {
            *acc += p / outcomes.len() as f64;
        }
    }
    write_inclusion(&cfg.out.join("inclusion.csv"), names, &mean_probs)?;
    outputs.push("inclusion.csv".into());

    if let Some(truth) = &outcomes[0].truth {
        write_json(
            &cfg.out.join("truth.json"),
            &TruthFile {
                beta: truth.clone(),
                synth: outcomes[0].synth.clone(),
            },
        )?;
        outputs.push("truth.json".into());
        if outcomes.iter().all(|o| o.truth.as_ref() == Some(truth)) {
            let results: Vec<ReplicateResult> = outcomes.iter().map(|o| o.result.clone()).collect();
            let report = compute_metrics(&results, truth, metrics_config(cfg))?;
            write_json(&cfg.out.join("metrics.json"), &report)?;
            outputs.push("metrics.json".into());
            println!("{}", report.table_row());
        } else {
            log::warn!("replicates use different true coefficients; metrics skipped");
        }
    }

    let mut phases = PhaseTiming::default();
    for o in &outcomes {
        phases.subsampling += o.entry.timing.subsampling;
        phases.model_moves += o.entry.timing.model_moves;
        phases.theta_update += o.entry.timing.theta_update;
    }
    let entries = outcomes.into_iter().map(|o| o.entry).collect();
    write_manifest(cfg, TimingSummary::new(&phases, Duration::ZERO), entries, outputs)
}

fn read_replicate(dir: &Path) -> Result<ReplicateResult> {
    let inclusion: Vec<InclusionRow> = read_rows(&dir.join("inclusion.csv"))?;
    let estimates: Vec<EstimateRow> = read_rows(&dir.join("estimates.csv"))?;
    if inclusion.len() != estimates.len() {
        return Err(CliError::Input(format!(
            "{}: inclusion and estimate files have different lengths",
            dir.display()
        )));
    }
    let bits: Vec<bool> = inclusion.iter().map(|row| row.selected != 0).collect();
    Ok(ReplicateResult {
        selected: ModelIndicator::from_bools(&bits),
        estimate: estimates.iter().map(|row| row.masked).collect(),
    })
}

fn cmd_metrics(cfg: &RunConfig) -> Result<()> {
    let run_dir = cfg.metrics.run_dir.as_ref().expect("validated");
    let mut dirs: Vec<PathBuf> = fs::read_dir(run_dir)
        .map_err(CliError::io(run_dir))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("rep_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Input(format!("{}: no rep_* directories", run_dir.display())));
    }
    let results = dirs.iter().map(|d| read_replicate(d)).collect::<Result<Vec<_>>>()?;
    let truth_path = cfg.data.truth.clone().unwrap_or_else(|| run_dir.join("truth.json"));
    if !truth_path.exists() {
        return Err(CliError::config(format!(
            "key data.truth: required when {} has no truth.json",
            run_dir.display()
        )));
    }
    let truth = read_truth(&truth_path)?;
    let report: MetricsReport = compute_metrics(&results, &truth, metrics_config(cfg))?;
    write_json(&cfg.out.join("metrics.json"), &report)?;
    println!("{}", report.table_row());
    write_manifest(cfg, TimingSummary::default(), Vec::new(), vec!["metrics.json".into()])
}

/// Positions included in more than half of the recorded models, or every
/// position if none qualifies.
fn default_coordinates(models: &[ModelIndicator], dim: usize) -> Vec<usize> {
    let mut counts = vec![0usize; dim];
    for g in models {
        for j in g.included() {
            counts[j] += 1;
        }
    }
    let picked: Vec<usize> = (0..dim).filter(|&j| 2 * counts[j] > models.len()).collect();
    if picked.is_empty() {
        (0..dim).collect()
    } else {
        picked
    }
}

fn cmd_ksd(cfg: &RunConfig) -> Result<()> {
    let path = cfg.ksd.samples.as_ref().expect("validated");
    let table = read_theta(path)?;
    let problem = load_problem(cfg, cfg.ksd.replicate)?;
    let ds = &problem.dataset;
    let dim = ds.dim();
    if table.samples.first().map(Vec::len) != Some(dim) && !table.samples.is_empty() {
        return Err(CliError::Input(format!(
            "{}: samples have {} coordinates but the data have {dim}",
            path.display(),
            table.samples[0].len()
        )));
    }
    check_size(ds.rows(), dim, cfg.ksd.size_limit)?;
    let prior = cfg.prior_spec(ds.features());
    let coords = match &cfg.ksd.coordinates {
        Some(c) => c.clone(),
        None => default_coordinates(&table.models, dim),
    };

    let clock = Instant::now();
    // The marginal score needs all 2^(p+1) models; past the cap, score each
    // draw conditional on the model recorded with it.
    let scores: Vec<Vec<f64>> = if dim <= ENUMERATION_CAP {
        table
            .samples
            .par_iter()
            .map(|t| exact_marginal_gradient(t, ds, &prior, ENUMERATION_CAP))
            .collect::<Result<_, _>>()?
    } else {
        let full = MiniBatch::full(ds.rows());
        table
            .samples
            .par_iter()
            .zip(table.models.par_iter())
            .map(|(t, g)| grad_conditional(t, g, &full, ds, &prior))
            .collect()
    };
    let report = ksd(&table.samples, &scores, &coords)?;
    let elapsed = clock.elapsed();
    write_json(&cfg.out.join("ksd.json"), &report)?;
    println!("KSD {}  T={}", report.ksd, report.samples);
    write_manifest(
        cfg,
        TimingSummary::new(&PhaseTiming::default(), elapsed),
        Vec::new(),
        vec!["ksd.json".into()],
    )
}

#[derive(Debug, Serialize)]
struct MissingSummary {
    names: Vec<String>,
    samples: usize,
    posterior_mean: Vec<f64>,
    true_beta: Vec<f64>,
    /// Exact β posterior with the variances held at their true values.
    gls_mean: Vec<f64>,
    gls_sd: Vec<f64>,
}

fn cmd_missing(cfg: &RunConfig) -> Result<()> {
    let data_seed = derive_seed(cfg.seed, 0, DATA_SALT);
    let chain_seed = derive_seed(cfg.seed, 0, CHAIN_SALT);
    let data = generate_random_intercept(&esgld_core::missing_data::RandomInterceptConfig {
        seed: data_seed,
        ..cfg.random_intercept_config()
    })?;
    let model = RandomInterceptModel::new(data, cfg.variance_mode(), cfg.missing.beta_prior_variance)?;
    let config = esgld_core::missing_data::MissingConfig {
        seed: chain_seed,
        ..cfg.missing_config()
    };
    let out = run_missing(&model, &config)?;

    let k = cfg.missing.beta.len();
    let mut names: Vec<String> = (1..=k).map(|j| format!("beta_{j}")).collect();
    if cfg.missing.learn_variances {
        names.push("log_noise_variance".into());
        names.push("log_intercept_variance".into());
    }
    let path = cfg.out.join("theta.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["iteration".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for s in &out.samples {
        let mut record = vec![s.iteration.to_string()];
        record.extend(s.theta.iter().map(f64::to_string));
        w.write_record(&record)?;
    }
    w.flush().map_err(CliError::io(&path))?;

    let t = out.samples.len().max(1) as f64;
    let mut mean = vec![0.0; names.len()];
    for s in &out.samples {
        for (acc, v) in mean.iter_mut().zip(&s.theta) {
            *acc += v / t;
        }
    }
    let (gls_mean, gls_cov) = model.gls_posterior(cfg.missing.noise_variance, cfg.missing.intercept_variance)?;
    let summary = MissingSummary {
        names,
        samples: out.samples.len(),
        posterior_mean: mean,
        true_beta: cfg.missing.beta.clone(),
        gls_sd: (0..gls_mean.len()).map(|j| gls_cov[(j, j)].sqrt()).collect(),
        gls_mean,
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;

    let entry = ReplicateEntry {
        index: 0,
        data_seed: Some(data_seed),
        chain_seed,
        samples: out.samples.len(),
        acceptance_rate: 1.0,
        warnings: Vec::new(),
        timing: out.timing,
    };
    write_manifest(
        cfg,
        TimingSummary::new(&out.timing, Duration::ZERO),
        vec![entry],
        vec!["theta.csv".into(), "summary.json".into()],
    )
}
