//! Monte Carlo simulation studies: scenario grids, per-iteration runs,
//! performance metrics with Monte Carlo standard errors, and a resumable,
//! parallel study runner.
//!
//! Each completed iteration is written to
//! `<out>/iterations/<scenario>/<iteration>.json`; those files are the source
//! of truth for resuming. `<out>/ledger.csv` logs every attempt and
//! `<out>/results.csv` holds the aggregated metrics.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{gelman_rubin, mean, summarize_draws, variance};
use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::model::{population, GroupParams, ModelSpec};
use crate::rng::{Purpose, SeedPath};
use crate::sampler::{param_names, param_values, run_mcmc, McmcConfig, PriorSettings};
use crate::simulate::{simulate_dataset, InitialChoice, ScenarioSpec};

/// Population values a grid is built around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub name: String,
    pub means: Matrix,
    pub tpm: Matrix,
    pub resid_var: f64,
}

impl Population {
    pub fn sleep() -> Self {
        Population {
            name: "sleep".into(),
            means: population::sleep_means(),
            tpm: population::sleep_tpm(),
            resid_var: population::RESIDUAL_VARIANCE,
        }
    }

    pub fn baseline() -> Self {
        Population {
            name: "baseline".into(),
            means: population::baseline_means(),
            tpm: population::baseline_tpm(),
            resid_var: population::RESIDUAL_VARIANCE,
        }
    }

    pub fn group(&self, zeta: f64, q_var: f64) -> Result<GroupParams> {
        GroupParams::from_population(&self.means, &self.tpm, zeta, q_var, self.resid_var)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxes {
    pub n_subjects: Vec<usize>,
    pub n_occasions: Vec<usize>,
    pub zeta: Vec<f64>,
    pub q_var: Vec<f64>,
}

impl GridAxes {
    /// The 4 × 3 × 4 × 3 sleep design.
    pub fn sleep() -> Self {
        GridAxes {
            n_subjects: vec![10, 20, 40, 80],
            n_occasions: vec![400, 800, 1600],
            zeta: vec![0.25, 0.5, 1.0, 2.0],
            q_var: vec![0.1, 0.2, 0.4],
        }
    }
}

fn fmt_axis(x: f64) -> String {
    format!("{x}")
}

/// Full factorial over the axes, in axis order (N slowest, Q fastest).
pub fn build_scenario_grid(
    pop: &Population,
    axes: &GridAxes,
    n_sim: usize,
    seed: u64,
) -> Result<Vec<ScenarioSpec>> {
    if axes.n_subjects.is_empty()
        || axes.n_occasions.is_empty()
        || axes.zeta.is_empty()
        || axes.q_var.is_empty()
    {
        return Err(invalid("every grid axis needs at least one value"));
    }
    let mut out = Vec::new();
    for &n in &axes.n_subjects {
        for &nt in &axes.n_occasions {
            for &zeta in &axes.zeta {
                for &q in &axes.q_var {
                    let sc = ScenarioSpec {
                        id: format!(
                            "{}_N{}_T{}_z{}_Q{}",
                            pop.name,
                            n,
                            nt,
                            fmt_axis(zeta),
                            fmt_axis(q)
                        ),
                        group: pop.group(zeta, q)?,
                        n_subjects: n,
                        n_occasions: nt,
                        zeta,
                        q_var: q,
                        n_sim,
                        seed,
                        initial: InitialChoice::Stationary,
                    };
                    sc.validate()?;
                    out.push(sc);
                }
            }
        }
    }
    Ok(out)
}

/// Baseline scenarios 1–5 at ζ = 0.25 (A) and ζ = 0.5 (B), Q = 0.1.
/// Scenario 1 pairs the baseline means with the sleep transition matrix.
pub fn baseline_scenarios(n_sim: usize, seed: u64) -> Result<Vec<ScenarioSpec>> {
    let base = Population::baseline();
    let with_sleep_tpm = Population {
        tpm: population::sleep_tpm(),
        ..base.clone()
    };
    let designs: [(usize, &Population, usize, usize); 5] = [
        (1, &with_sleep_tpm, 40, 800),
        (2, &base, 40, 800),
        (3, &base, 80, 800),
        (4, &base, 80, 3200),
        (5, &base, 140, 800),
    ];
    let mut out = Vec::new();
    for (variant, zeta) in [("A", 0.25), ("B", 0.5)] {
        for &(num, pop, n, nt) in &designs {
            out.push(ScenarioSpec {
                id: format!("baseline_{num}{variant}"),
                group: pop.group(zeta, 0.1)?,
                n_subjects: n,
                n_occasions: nt,
                zeta,
                q_var: 0.1,
                n_sim,
                seed,
                initial: InitialChoice::Stationary,
            });
        }
    }
    Ok(out)
}

/// The complete design: 144 sleep scenarios followed by 10 baseline ones.
pub fn full_design(n_sim: usize, seed: u64) -> Result<Vec<ScenarioSpec>> {
    let mut out = build_scenario_grid(&Population::sleep(), &GridAxes::sleep(), n_sim, seed)?;
    out.extend(baseline_scenarios(n_sim, seed)?);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySettings {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Fraction of iterations that also get a second chain for R̂ screening.
    pub convergence_fraction: f64,
    pub rhat_threshold: f64,
    pub priors: PriorSettings,
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings {
            n_iter: 3250,
            burn_in: 1250,
            thin: 1,
            convergence_fraction: 0.0,
            rhat_threshold: 1.1,
            priors: PriorSettings::default(),
        }
    }
}

impl StudySettings {
    pub fn validate(&self) -> Result<()> {
        McmcConfig::new(self.n_iter, self.burn_in, self.thin, 0).validate()?;
        if !(0.0..=1.0).contains(&self.convergence_fraction) {
            return Err(invalid("convergence_fraction must be in [0, 1]"));
        }
        if !(self.rhat_threshold > 1.0) {
            return Err(invalid("rhat_threshold must exceed 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub truth: f64,
    pub estimate: f64,
    pub sd: f64,
    pub cci_low: f64,
    pub cci_high: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rhat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub scenario_id: String,
    pub iteration: u64,
    pub seed: u64,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Whether a second chain was run for this iteration.
    pub screened: bool,
    /// Parameters whose R̂ exceeded the threshold (screened iterations only).
    pub not_converged: Vec<String>,
    pub params: Vec<ParamRecord>,
}

/// Whether `name` is one of the evaluated parameter blocks.
pub fn is_evaluated(name: &str) -> bool {
    [
        "emiss_mean.",
        "emiss_rand_var.",
        "emiss_resid_var.",
        "gamma.",
    ]
    .iter()
    .any(|p| name.starts_with(p))
}

/// Names and population values of the evaluated parameters.
pub fn truth_values(group: &GroupParams) -> Vec<(String, f64)> {
    param_names(group.m(), group.n_dep())
        .into_iter()
        .zip(param_values(group))
        .filter(|(n, _)| is_evaluated(n))
        .collect()
}

fn is_screened(path: &SeedPath, fraction: f64) -> bool {
    if fraction <= 0.0 {
        return false;
    }
    let u: f64 = path.stream(Purpose::Misc, 0).random();
    u < fraction
}

/// Simulate, fit and summarize one iteration. Sampler failures produce a
/// record with status `failed` instead of an error.
pub fn run_iteration(
    scenario: &ScenarioSpec,
    iteration: u64,
    settings: &StudySettings,
) -> Result<IterationRecord> {
    scenario.validate()?;
    settings.validate()?;
    let path = SeedPath::new(scenario.seed, &scenario.id, iteration);
    let screened = is_screened(&path, settings.convergence_fraction);
    let mut record = IterationRecord {
        scenario_id: scenario.id.clone(),
        iteration,
        seed: path.seed(),
        status: Status::Ok,
        reason: None,
        screened,
        not_converged: Vec::new(),
        params: Vec::new(),
    };

    let m = scenario.group.m();
    let sim = simulate_dataset(scenario, iteration)?;
    let spec = ModelSpec::new(m, scenario.group.n_dep())?;
    let hyper = settings.priors.hyperpriors(&sim.dataset, m)?;
    let mut config = McmcConfig::new(
        settings.n_iter,
        settings.burn_in,
        settings.thin,
        path.seed(),
    );
    config.n_chains = if screened { 2 } else { 1 };
    let chains = match run_mcmc(&sim.dataset, &spec, &hyper, &config) {
        Ok(c) => c,
        Err(e @ Error::Numerical { .. }) => {
            warn!("{} iteration {iteration} failed: {e}", scenario.id);
            record.status = Status::Failed;
            record.reason = Some(e.to_string());
            return Ok(record);
        }
        Err(e) => return Err(e),
    };

    let cols: Vec<Vec<(String, Vec<f64>)>> = chains.iter().map(|c| c.columns()).collect();
    let truth: BTreeMap<String, f64> = truth_values(&scenario.group).into_iter().collect();
    for (idx, (name, draws)) in cols[0].iter().enumerate() {
        let Some(&t) = truth.get(name) else { continue };
        let s = summarize_draws(draws)?;
        let rhat = if screened {
            let per_chain: Vec<Vec<f64>> = cols.iter().map(|c| c[idx].1.clone()).collect();
            gelman_rubin(&per_chain, false).ok()
        } else {
            None
        };
        if rhat.is_some_and(|r| !(r <= settings.rhat_threshold)) {
            record.not_converged.push(name.clone());
        }
        record.params.push(ParamRecord {
            name: name.clone(),
            truth: t,
            estimate: s.median,
            sd: s.sd,
            cci_low: s.cci_low,
            cci_high: s.cci_high,
            rhat,
        });
    }
    Ok(record)
}

/// Performance measures for one parameter over S iterations, each with its
/// Monte Carlo standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMetrics {
    pub parameter: String,
    pub truth: f64,
    pub n: usize,
    pub mean_estimate: f64,
    pub bias: f64,
    /// `None` when the truth is zero.
    pub percent_bias: Option<f64>,
    pub emp_se: f64,
    pub model_se: f64,
    pub mse: f64,
    pub coverage: f64,
    pub bias_corr_coverage: f64,
    pub bias_mcse: f64,
    pub percent_bias_mcse: Option<f64>,
    pub emp_se_mcse: f64,
    pub model_se_mcse: f64,
    pub mse_mcse: f64,
    pub coverage_mcse: f64,
    pub bias_corr_coverage_mcse: f64,
}

pub const PERCENT_BIAS_LIMIT: f64 = 5.0;
pub const COVERAGE_BAND: (f64, f64) = (0.92, 0.98);

impl ParamMetrics {
    pub fn bias_flag(&self) -> bool {
        self.percent_bias
            .is_some_and(|p| p.abs() > PERCENT_BIAS_LIMIT)
    }

    pub fn coverage_flag(&self) -> bool {
        self.coverage < COVERAGE_BAND.0 || self.coverage > COVERAGE_BAND.1
    }
}

/// Monte Carlo SE of a proportion estimated from `s` iterations.
pub fn mcse_proportion(p: f64, s: usize) -> f64 {
    (p * (1.0 - p) / s as f64).sqrt()
}

/// One iteration's contribution: point estimate, posterior SD and interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub estimate: f64,
    pub sd: f64,
    pub cci_low: f64,
    pub cci_high: f64,
}

pub fn param_metrics(parameter: &str, truth: f64, est: &[Estimate]) -> Result<ParamMetrics> {
    let s = est.len();
    if s < 2 {
        return Err(invalid(format!(
            "{parameter}: metrics need at least 2 successful iterations, got {s}"
        )));
    }
    let sf = s as f64;
    let theta: Vec<f64> = est.iter().map(|e| e.estimate).collect();
    let mean_est = mean(&theta);
    let bias = mean_est - truth;
    let var_theta = variance(&theta);
    let emp_se = var_theta.sqrt();
    let sd2: Vec<f64> = est.iter().map(|e| e.sd * e.sd).collect();
    let model_se = mean(&sd2).sqrt();
    let sq_err: Vec<f64> = theta.iter().map(|t| (t - truth).powi(2)).collect();
    let mse = mean(&sq_err);
    let covers = |x: f64| {
        est.iter()
            .filter(|e| e.cci_low <= x && x <= e.cci_high)
            .count() as f64
            / sf
    };
    let coverage = covers(truth);
    let bias_corr_coverage = covers(mean_est);

    let bias_mcse = (var_theta / sf).sqrt();
    let emp_se_mcse = emp_se / (2.0 * (sf - 1.0)).sqrt();
    let model_se_mcse = if model_se > 0.0 {
        (variance(&sd2) / (4.0 * sf * model_se * model_se)).sqrt()
    } else {
        0.0
    };
    let mse_mcse =
        (sq_err.iter().map(|e| (e - mse).powi(2)).sum::<f64>() / (sf * (sf - 1.0))).sqrt();
    let (percent_bias, percent_bias_mcse) = if truth == 0.0 {
        (None, None)
    } else {
        (
            Some(100.0 * bias / truth),
            Some(100.0 * bias_mcse / truth.abs()),
        )
    };
    Ok(ParamMetrics {
        parameter: parameter.to_string(),
        truth,
        n: s,
        mean_estimate: mean_est,
        bias,
        percent_bias,
        emp_se,
        model_se,
        mse,
        coverage,
        bias_corr_coverage,
        bias_mcse,
        percent_bias_mcse,
        emp_se_mcse,
        model_se_mcse,
        mse_mcse,
        coverage_mcse: mcse_proportion(coverage, s),
        bias_corr_coverage_mcse: mcse_proportion(bias_corr_coverage, s),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario_id: String,
    pub n_iterations: usize,
    pub n_failed: usize,
    pub n_screened: usize,
    /// Screened iterations with at least one parameter above the R̂ threshold.
    pub n_not_converged: usize,
    pub params: Vec<ParamMetrics>,
}

/// Aggregates the records of one scenario. Records are sorted by iteration
/// first so the result does not depend on completion order; failed records
/// are counted but excluded.
pub fn evaluate_metrics(records: &[IterationRecord]) -> Result<MetricsReport> {
    let first = records
        .first()
        .ok_or_else(|| invalid("no records to evaluate"))?;
    let mut sorted: Vec<&IterationRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.iteration);
    let ok: Vec<&IterationRecord> = sorted
        .iter()
        .copied()
        .filter(|r| r.status == Status::Ok)
        .collect();
    let reference = ok
        .first()
        .ok_or_else(|| invalid(format!("{}: no successful iterations", first.scenario_id)))?;
    let mut params = Vec::with_capacity(reference.params.len());
    for (idx, p) in reference.params.iter().enumerate() {
        let est: Vec<Estimate> = ok
            .iter()
            .map(|r| {
                let q = &r.params[idx];
                debug_assert_eq!(q.name, p.name);
                Estimate {
                    estimate: q.estimate,
                    sd: q.sd,
                    cci_low: q.cci_low,
                    cci_high: q.cci_high,
                }
            })
            .collect();
        params.push(param_metrics(&p.name, p.truth, &est)?);
    }
    Ok(MetricsReport {
        scenario_id: first.scenario_id.clone(),
        n_iterations: ok.len(),
        n_failed: sorted.len() - ok.len(),
        n_screened: ok.iter().filter(|r| r.screened).count(),
        n_not_converged: ok.iter().filter(|r| !r.not_converged.is_empty()).count(),
        params,
    })
}

pub const RESULTS_HEADER: [&str; 26] = [
    "scenario_id",
    "parameter",
    "truth",
    "mean_estimate",
    "bias",
    "percent_bias",
    "emp_se",
    "model_se",
    "mse",
    "coverage",
    "bias_corr_coverage",
    "bias_mcse",
    "percent_bias_mcse",
    "emp_se_mcse",
    "model_se_mcse",
    "mse_mcse",
    "coverage_mcse",
    "bias_corr_coverage_mcse",
    "n_iterations",
    "n_failed",
    "n_screened",
    "n_not_converged",
    "bias_flag",
    "coverage_flag",
    "truth_zero",
    "n",
];

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

/// Writes reports sorted by scenario id, parameters in storage order.
pub fn write_results(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut sorted: Vec<&MetricsReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.scenario_id.cmp(&b.scenario_id));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in sorted {
        for p in &r.params {
            w.write_record([
                r.scenario_id.clone(),
                p.parameter.clone(),
                p.truth.to_string(),
                p.mean_estimate.to_string(),
                p.bias.to_string(),
                opt(p.percent_bias),
                p.emp_se.to_string(),
                p.model_se.to_string(),
                p.mse.to_string(),
                p.coverage.to_string(),
                p.bias_corr_coverage.to_string(),
                p.bias_mcse.to_string(),
                opt(p.percent_bias_mcse),
                p.emp_se_mcse.to_string(),
                p.model_se_mcse.to_string(),
                p.mse_mcse.to_string(),
                p.coverage_mcse.to_string(),
                p.bias_corr_coverage_mcse.to_string(),
                r.n_iterations.to_string(),
                r.n_failed.to_string(),
                r.n_screened.to_string(),
                r.n_not_converged.to_string(),
                p.bias_flag().to_string(),
                p.coverage_flag().to_string(),
                p.percent_bias.is_none().to_string(),
                p.n.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn iteration_path(out: &Path, scenario_id: &str, iteration: u64) -> PathBuf {
    out.join("iterations")
        .join(scenario_id)
        .join(format!("{iteration}.json"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_record(path: &Path) -> Option<IterationRecord> {
    let text = fs::read_to_string(path).ok()?;
    match serde_json::from_str(&text) {
        Ok(r) => Some(r),
        Err(e) => {
            warn!("ignoring unreadable record {}: {e}", path.display());
            None
        }
    }
}

const LEDGER_HEADER: &str = "scenario_id,iteration,seed,status,wall_time";

/// Keeps ledger rows whose iteration file still exists; starts a fresh
/// ledger otherwise.
fn prepare_ledger(out: &Path, resume: bool) -> Result<File> {
    let path = out.join("ledger.csv");
    let mut kept = Vec::new();
    if resume && path.exists() {
        let mut rdr = csv::Reader::from_path(&path)?;
        for row in rdr.records() {
            let row = row?;
            let (Some(id), Some(iter)) =
                (row.get(0), row.get(1).and_then(|s| s.parse::<u64>().ok()))
            else {
                continue;
            };
            if iteration_path(out, id, iter).exists() {
                kept.push(row.iter().collect::<Vec<_>>().join(","));
            }
        }
    }
    let mut text = String::from(LEDGER_HEADER);
    text.push('\n');
    for row in kept {
        text.push_str(&row);
        text.push('\n');
    }
    fs::write(&path, text)?;
    Ok(OpenOptions::new().append(true).open(&path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutcome {
    pub reports: Vec<MetricsReport>,
    pub computed: usize,
    pub skipped: usize,
    pub results_path: PathBuf,
}

/// Runs every (scenario, iteration) cell, `parallel` at a time, and writes
/// the results table. With `resume`, cells whose record file exists are
/// loaded instead of recomputed.
pub fn run_study(
    scenarios: &[ScenarioSpec],
    settings: &StudySettings,
    out: &Path,
    parallel: usize,
    resume: bool,
) -> Result<StudyOutcome> {
    settings.validate()?;
    if parallel < 1 {
        return Err(invalid("parallel must be >= 1"));
    }
    let mut ids = std::collections::HashSet::new();
    for sc in scenarios {
        sc.validate()?;
        if !ids.insert(sc.id.as_str()) {
            return Err(invalid(format!("duplicate scenario id {}", sc.id)));
        }
        fs::create_dir_all(out.join("iterations").join(&sc.id))?;
    }
    let ledger = Mutex::new(prepare_ledger(out, resume)?);

    let mut cells = Vec::new();
    let mut skipped = 0;
    for sc in scenarios {
        for it in 0..sc.n_sim as u64 {
            let path = iteration_path(out, &sc.id, it);
            if resume && path.exists() && read_record(&path).is_some() {
                skipped += 1;
            } else {
                cells.push((sc, it));
            }
        }
    }
    info!("{} cells to run, {} already complete", cells.len(), skipped);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| invalid(format!("cannot build thread pool: {e}")))?;
    pool.install(|| {
        cells.par_iter().try_for_each(|&(sc, it)| -> Result<()> {
            let start = Instant::now();
            let record = run_iteration(sc, it, settings)?;
            let secs = start.elapsed().as_secs_f64();
            write_atomic(
                &iteration_path(out, &sc.id, it),
                &serde_json::to_vec_pretty(&record)?,
            )?;
            let mut f = ledger.lock().expect("ledger lock");
            writeln!(
                f,
                "{},{},{},{},{:.3}",
                sc.id,
                it,
                record.seed,
                record.status.as_str(),
                secs
            )?;
            f.flush()?;
            Ok(())
        })
    })?;

    let mut reports = Vec::with_capacity(scenarios.len());
    for sc in scenarios {
        let records: Vec<IterationRecord> = (0..sc.n_sim as u64)
            .filter_map(|it| read_record(&iteration_path(out, &sc.id, it)))
            .collect();
        match evaluate_metrics(&records) {
            Ok(r) => reports.push(r),
            Err(e) => warn!("{}: no metrics ({e})", sc.id),
        }
    }
    let results_path = out.join("results.csv");
    write_results(&results_path, &reports)?;
    Ok(StudyOutcome {
        reports,
        computed: cells.len(),
        skipped,
        results_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn sleep_grid_has_144_cells() {
        let grid = build_scenario_grid(&Population::sleep(), &GridAxes::sleep(), 250, 1).unwrap();
        assert_eq!(grid.len(), 144);
        let ids: std::collections::HashSet<_> = grid.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids.len(), 144);
        assert_eq!(full_design(250, 1).unwrap().len(), 154);
    }

    #[test]
    fn baseline_set() {
        let b = baseline_scenarios(250, 1).unwrap();
        assert_eq!(b.len(), 10);
        let s4 = b.iter().find(|s| s.id == "baseline_4A").unwrap();
        assert_eq!(
            (s4.n_subjects, s4.n_occasions, s4.zeta, s4.q_var),
            (80, 3200, 0.25, 0.1)
        );
        let s5b = b.iter().find(|s| s.id == "baseline_5B").unwrap();
        assert_eq!((s5b.n_subjects, s5b.zeta), (140, 0.5));
        let s1 = b.iter().find(|s| s.id == "baseline_1A").unwrap();
        let tpm = s1.group.group_tpm();
        assert_abs_diff_eq!(tpm[(0, 0)], 0.984, epsilon = 1e-12);
        assert_eq!(s1.group.emiss_mean, population::baseline_means());
    }

    #[test]
    fn single_value_axes() {
        let axes = GridAxes {
            n_subjects: vec![10],
            n_occasions: vec![400],
            zeta: vec![0.25],
            q_var: vec![0.1],
        };
        let grid = build_scenario_grid(&Population::sleep(), &axes, 3, 1).unwrap();
        assert_eq!(grid.len(), 1);
        assert_eq!(grid[0].id, "sleep_N10_T400_z0.25_Q0.1");
        let empty = GridAxes {
            zeta: vec![],
            ..axes
        };
        assert!(build_scenario_grid(&Population::sleep(), &empty, 3, 1).is_err());
    }

    fn perfect(truth: f64, s: usize) -> Vec<Estimate> {
        vec![
            Estimate {
                estimate: truth,
                sd: 0.1,
                cci_low: truth - 0.2,
                cci_high: truth + 0.2,
            };
            s
        ]
    }

    #[test]
    fn perfect_estimates() {
        let m = param_metrics("x", 1.5, &perfect(1.5, 10)).unwrap();
        assert_eq!((m.bias, m.mse, m.coverage, m.emp_se), (0.0, 0.0, 1.0, 0.0));
        assert_eq!(m.percent_bias, Some(0.0));
        assert!(!m.bias_flag());
    }

    #[test]
    fn coverage_mcse_values() {
        assert!((mcse_proportion(0.95, 250) * 100.0 - 1.38).abs() < 0.005);
        assert!((mcse_proportion(0.5, 250) * 100.0 - 3.16).abs() < 0.005);
    }

    #[test]
    fn percent_bias_reference() {
        let est: Vec<Estimate> = [-1.0811 - 0.01, -1.0811 + 0.01]
            .iter()
            .map(|&e| Estimate {
                estimate: e,
                sd: 0.1,
                cci_low: e - 0.2,
                cci_high: e + 0.2,
            })
            .collect();
        let m = param_metrics("x", -1.0, &est).unwrap();
        assert_abs_diff_eq!(m.percent_bias.unwrap(), 8.11, epsilon = 1e-9);
        assert!(m.bias_flag());
    }

    #[test]
    fn zero_truth_has_no_percent_bias() {
        let m = param_metrics("x", 0.0, &perfect(0.1, 5)).unwrap();
        assert!(m.percent_bias.is_none());
        assert_abs_diff_eq!(m.bias, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn too_few_iterations() {
        assert!(param_metrics("x", 0.0, &perfect(0.1, 1)).is_err());
    }

    fn synthetic(seed: u64, s: usize) -> Vec<Estimate> {
        let mut rng = seeded(seed, Purpose::Misc, 0);
        (0..s)
            .map(|_| {
                let e: f64 = 1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal);
                let sd: f64 = 0.2 + 0.1 * rng.random::<f64>();
                Estimate {
                    estimate: e,
                    sd,
                    cci_low: e - 1.96 * sd,
                    cci_high: e + 1.96 * sd,
                }
            })
            .collect()
    }

    #[test]
    fn mcse_shrinks_with_doubling() {
        let base = synthetic(3, 200);
        let doubled: Vec<Estimate> = base.iter().chain(&base).copied().collect();
        let a = param_metrics("x", 1.0, &base).unwrap();
        let b = param_metrics("x", 1.0, &doubled).unwrap();
        let target = 1.0 / 2f64.sqrt();
        for (x, y) in [
            (a.bias_mcse, b.bias_mcse),
            (a.emp_se_mcse, b.emp_se_mcse),
            (a.model_se_mcse, b.model_se_mcse),
            (a.mse_mcse, b.mse_mcse),
            (a.coverage_mcse, b.coverage_mcse),
        ] {
            assert!(x >= 0.0 && y >= 0.0);
            assert!((y / x / target - 1.0).abs() < 0.1, "{x} {y}");
        }
    }

    proptest! {
        #[test]
        fn mse_identity(seed in 0u64..10_000, s in 2usize..300, truth in -5.0f64..5.0) {
            let m = param_metrics("x", truth, &synthetic(seed, s)).unwrap();
            let sf = s as f64;
            prop_assert!((m.mse - (m.bias.powi(2) + (sf - 1.0) / sf * m.emp_se.powi(2))).abs() < 1e-10);
            prop_assert!((0.0..=1.0).contains(&m.coverage));
            prop_assert!(m.emp_se >= 0.0 && m.model_se >= 0.0 && m.mse >= 0.0);
        }
    }

    fn record(iter: u64, status: Status, est: f64) -> IterationRecord {
        IterationRecord {
            scenario_id: "s".into(),
            iteration: iter,
            seed: iter,
            status,
            reason: None,
            screened: false,
            not_converged: vec![],
            params: vec![ParamRecord {
                name: "emiss_mean.1.1".into(),
                truth: 1.0,
                estimate: est,
                sd: 0.1,
                cci_low: est - 0.2,
                cci_high: est + 0.2,
                rhat: None,
            }],
        }
    }

    #[test]
    fn failed_records_excluded() {
        let recs = vec![
            record(0, Status::Ok, 1.0),
            record(1, Status::Failed, 100.0),
            record(2, Status::Ok, 1.2),
        ];
        let r = evaluate_metrics(&recs).unwrap();
        assert_eq!((r.n_iterations, r.n_failed), (2, 1));
        assert_abs_diff_eq!(r.params[0].mean_estimate, 1.1, epsilon = 1e-12);
    }

    #[test]
    fn order_does_not_matter() {
        let recs: Vec<IterationRecord> = (0..20)
            .map(|i| record(i, Status::Ok, 1.0 + (i as f64).sin() * 0.1))
            .collect();
        let mut rev = recs.clone();
        rev.reverse();
        assert_eq!(
            evaluate_metrics(&recs).unwrap(),
            evaluate_metrics(&rev).unwrap()
        );
    }

    #[test]
    fn evaluated_parameter_set() {
        let g = Population::baseline().group(0.25, 0.1).unwrap();
        let t = truth_values(&g);
        assert_eq!(t.len(), 27 + 9);
        let gamma = t.iter().find(|(n, _)| n == "gamma.2.2").unwrap().1;
        assert_abs_diff_eq!(gamma, 0.7, epsilon = 1e-12);
    }

    #[test]
    fn record_round_trips_through_json() {
        let r = record(3, Status::Ok, 0.9);
        let text = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<IterationRecord>(&text).unwrap(), r);
    }
}
