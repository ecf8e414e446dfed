//! Command-line front end. Every command writes its files under the output
//! directory together with `config.toml`, the effective configuration after
//! command-line overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::config::RunConfig;
use crate::diagnostics::{diagnose, format_table, summarize_draws, DiagnosticRow};
use crate::error::{invalid, Error, Result};
use crate::inference::{decode_states, EmissionPointParams};
use crate::io::{read_chain, read_dataset, write_chain, write_dataset};
use crate::matrix::Matrix;
use crate::model::{Dataset, SubjectParams};
use crate::ppc::run_ppc;
use crate::sampler::{group_from_values, param_values, run_mcmc, Chain};
use crate::simulate::{simulate_dataset, ScenarioSpec};
use crate::study::{evaluate_metrics, run_study, write_results, IterationRecord};

#[derive(Debug, Parser)]
#[command(
    name = "mhmm",
    version,
    about = "Bayesian multilevel hidden Markov models and simulation studies"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for studies.
    #[arg(long, global = true)]
    pub parallel: Option<usize>,
    /// Keep completed study iterations instead of recomputing them.
    #[arg(long, global = true)]
    pub resume: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate datasets for the `[scenario]` section.
    Simulate,
    /// Fit the model to a dataset.
    Fit {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run a simulation study.
    Study,
    /// Summaries and convergence diagnostics for chain files.
    Diagnose {
        #[arg(long = "chain")]
        chains: Vec<PathBuf>,
    },
    /// Posterior predictive checks.
    Ppc {
        #[arg(long = "chain")]
        chains: Vec<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Recompute the results table from stored study iterations.
    Metrics,
}

impl Error {
    /// 1 for invalid input, 2 for failures while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Numerical { .. } | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 2,
            _ => 1,
        }
    }
}

/// Loads the configuration and applies command-line overrides.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    if cli.parallel.is_some() {
        cfg.parallel = cli.parallel;
    }
    match &cli.command {
        Command::Fit { dataset } | Command::Ppc { dataset, .. } if dataset.is_some() => {
            cfg.data.dataset = dataset.clone();
        }
        _ => {}
    }
    match &cli.command {
        Command::Diagnose { chains } | Command::Ppc { chains, .. } if !chains.is_empty() => {
            cfg.data.chains = chains.clone();
        }
        _ => {}
    }
    Ok(cfg)
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    Ok(out)
}

/// Runs a parsed command and returns the text to print on stdout.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = effective_config(cli)?;
    match &cli.command {
        Command::Simulate => cmd_simulate(&cfg),
        Command::Fit { .. } => cmd_fit(&cfg),
        Command::Study => cmd_study(&cfg, cli.resume),
        Command::Diagnose { .. } => cmd_diagnose(&cfg),
        Command::Ppc { .. } => cmd_ppc(&cfg),
        Command::Metrics => cmd_metrics(&cfg),
    }
}

#[derive(Serialize)]
struct TruthSidecar<'a> {
    scenario: &'a ScenarioSpec,
    iteration: usize,
    subjects: &'a [SubjectParams],
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<String> {
    let scenario = cfg.scenario_spec()?;
    let out = prepare_out(cfg)?;
    let dir = out.join(&scenario.id);
    fs::create_dir_all(&dir)?;
    let mut report = String::new();
    for it in 0..scenario.n_sim {
        let sim = simulate_dataset(&scenario, it as u64)?;
        let data_path = dir.join(format!("iteration_{it}.csv"));
        write_dataset(&data_path, &sim.dataset)?;
        let truth = TruthSidecar {
            scenario: &scenario,
            iteration: it,
            subjects: &sim.subjects,
        };
        fs::write(
            dir.join(format!("iteration_{it}.truth.json")),
            serde_json::to_string_pretty(&truth)?,
        )?;
        writeln!(report, "wrote {}", data_path.display()).unwrap();
    }
    Ok(report)
}

fn write_diagnostics_csv(path: &Path, rows: &[DiagnosticRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "parameter",
        "median",
        "mean",
        "sd",
        "cci_low",
        "cci_high",
        "rhat",
        "acf_1",
        "acf_2",
        "acf_3",
        "acf_4",
        "acf_5",
    ])?;
    for r in rows {
        let s = &r.summary;
        let mut rec = vec![
            r.parameter.clone(),
            s.median.to_string(),
            s.mean.to_string(),
            s.sd.to_string(),
            s.cci_low.to_string(),
            s.cci_high.to_string(),
            r.rhat.map_or(String::new(), |v| v.to_string()),
        ];
        rec.extend((0..5).map(|l| r.acf.get(l).map_or(String::new(), |a| a.to_string())));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<String> {
    let dataset = read_dataset(&cfg.dataset_path()?)?;
    let spec = cfg.model_spec(dataset.n_dep())?;
    let config = cfg.mcmc_config()?;
    cfg.validate_priors()?;
    let hyper = cfg.priors.hyperpriors(&dataset, spec.m)?;
    let out = prepare_out(cfg)?;
    info!(
        "fitting {} chain(s) of {} sweeps to {} subjects",
        config.n_chains,
        config.n_iter,
        dataset.subjects.len()
    );
    let chains = run_mcmc(&dataset, &spec, &hyper, &config)?;
    for (c, chain) in chains.iter().enumerate() {
        write_chain(&out.join(format!("chain_{}.csv", c + 1)), chain, cfg)?;
    }
    let rows = diagnose(&chains)?;
    let table = format_table(&rows);
    fs::write(out.join("summary.txt"), &table)?;
    write_diagnostics_csv(&out.join("summary.csv"), &rows)?;
    let mut report = table;
    for chain in &chains {
        writeln!(
            report,
            "chain {}: {} draws, intercept acceptance by row {:?}",
            chain.meta.chain_index + 1,
            chain.draws.len(),
            chain
                .meta
                .acceptance
                .iter()
                .map(|a| format!("{a:.2}"))
                .collect::<Vec<_>>()
        )
        .unwrap();
    }
    Ok(report)
}

pub fn cmd_study(cfg: &RunConfig, resume: bool) -> Result<String> {
    let scenarios = cfg.study_scenarios()?;
    let settings = cfg.study_settings()?;
    let parallel = cfg.parallelism()?;
    let out = prepare_out(cfg)?;
    let outcome = run_study(&scenarios, &settings, &out, parallel, resume)?;
    Ok(format!(
        "{} scenarios, {} iterations run, {} reused; results in {}\n",
        scenarios.len(),
        outcome.computed,
        outcome.skipped,
        outcome.results_path.display()
    ))
}

fn load_chains(cfg: &RunConfig) -> Result<Vec<Chain>> {
    let chains = cfg
        .chain_paths()?
        .iter()
        .map(|p| read_chain(p))
        .collect::<Result<Vec<_>>>()?;
    let (m, k) = (chains[0].m(), chains[0].n_dep());
    if chains.iter().any(|c| c.m() != m || c.n_dep() != k) {
        return Err(invalid("chain files have different dimensions"));
    }
    Ok(chains)
}

pub fn cmd_diagnose(cfg: &RunConfig) -> Result<String> {
    let chains = load_chains(cfg)?;
    let rows = diagnose(&chains)?;
    let out = prepare_out(cfg)?;
    write_diagnostics_csv(&out.join("diagnostics.csv"), &rows)?;
    Ok(format_table(&rows))
}

/// Group-level posterior medians as a single parameter set.
fn median_group(chain: &Chain) -> Result<crate::model::GroupParams> {
    let cols = chain.columns();
    let medians: Vec<f64> = cols
        .iter()
        .map(|(_, c)| summarize_draws(c).map(|s| s.median))
        .collect::<Result<_>>()?;
    let n = param_values(&chain.draws[0].group).len();
    group_from_values(&medians[..n], chain.m(), chain.n_dep())
}

/// Annotates unlabelled subjects with Viterbi paths under the posterior
/// median group parameters.
fn ensure_states(dataset: &mut Dataset, chain: &Chain) -> Result<()> {
    if dataset.has_states() {
        return Ok(());
    }
    let g = median_group(chain)?;
    let m = g.m();
    let params = EmissionPointParams {
        mean: g.emiss_mean.clone(),
        var: g.emiss_resid_var.clone(),
    };
    let tpm = g.group_tpm();
    let delta = vec![1.0 / m as f64; m];
    for s in &mut dataset.subjects {
        s.true_states = Some(decode_states(s, &tpm, &delta, &params)?.path);
    }
    info!("dataset had no states; decoded with posterior median parameters");
    Ok(())
}

pub fn cmd_ppc(cfg: &RunConfig) -> Result<String> {
    let settings = cfg.ppc_settings()?;
    let chains = load_chains(cfg)?;
    let mut dataset = read_dataset(&cfg.dataset_path()?)?;
    if dataset.n_dep() != chains[0].n_dep() {
        return Err(invalid(format!(
            "dataset has {} variables but the chain has {}",
            dataset.n_dep(),
            chains[0].n_dep()
        )));
    }
    // pool all chains into one set of draws
    let mut pooled = chains[0].clone();
    for c in &chains[1..] {
        pooled.draws.extend(c.draws.iter().cloned());
    }
    ensure_states(&mut dataset, &pooled)?;
    let report = run_ppc(&dataset, &pooled, &settings)?;
    let out = prepare_out(cfg)?;
    let mut w = csv::Writer::from_path(out.join("ppc.csv"))?;
    w.write_record([
        "statistic",
        "observed",
        "replicate_mean",
        "p_posterior",
        "two_sided_p",
        "n_replicates",
    ])?;
    let mut text = format!(
        "{:<24} {:>10} {:>10} {:>8} {:>8}\n",
        "statistic", "observed", "rep mean", "p", "2-sided"
    );
    for r in report.all() {
        w.write_record([
            r.name.clone(),
            r.observed.to_string(),
            r.replicate_mean().to_string(),
            r.p_posterior.to_string(),
            r.two_sided.to_string(),
            r.replicates.len().to_string(),
        ])?;
        writeln!(
            text,
            "{:<24} {:>10.3} {:>10.3} {:>8.3} {:>8.3}",
            r.name,
            r.observed,
            r.replicate_mean(),
            r.p_posterior,
            r.two_sided
        )
        .unwrap();
    }
    w.flush()?;
    Ok(text)
}

pub fn cmd_metrics(cfg: &RunConfig) -> Result<String> {
    let out = cfg.out_dir();
    let root = out.join("iterations");
    if !root.is_dir() {
        return Err(invalid(format!(
            "{} has no study iterations",
            out.display()
        )));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut reports = Vec::new();
    for dir in dirs {
        let mut records: Vec<IterationRecord> = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "json") {
                records.push(serde_json::from_str(&fs::read_to_string(&p)?)?);
            }
        }
        if records.len() >= 2 {
            reports.push(evaluate_metrics(&records)?);
        }
    }
    let path = out.join("results.csv");
    write_results(&path, &reports)?;
    let flagged: usize = reports
        .iter()
        .flat_map(|r| &r.params)
        .filter(|p| p.bias_flag() || p.coverage_flag())
        .count();
    Ok(format!(
        "{} scenarios; {} parameter rows flagged; wrote {}\n",
        reports.len(),
        flagged,
        path.display()
    ))
}

/// Renders a matrix with three decimals, one row per line.
pub fn format_matrix(m: &Matrix) -> String {
    m.rows()
        .map(|r| {
            r.iter()
                .map(|v| format!("{v:8.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}
