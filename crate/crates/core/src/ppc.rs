//! Posterior predictive checks: state-conditional emission means, total
//! variance per variable, and time-homogeneity of transition frequencies.
//!
//! `p_posterior` is the proportion of replicate statistics at or above the
//! observed one; `two_sided` is `2 min(p, 1 - p)` capped at 1.

use log::warn;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::model::{Dataset, GroupParams};
use crate::rng::{seeded, Purpose};
use crate::sampler::Chain;
use crate::simulate::{simulate_dataset, InitialChoice, ScenarioSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcSettings {
    pub n_replicates: usize,
    pub n_periods: usize,
    /// Between-subject intercept variance used to generate replicates.
    pub tpm_rand_var: f64,
    pub seed: u64,
}

impl Default for PpcSettings {
    fn default() -> Self {
        PpcSettings {
            n_replicates: 2000,
            n_periods: 3,
            tpm_rand_var: 0.1,
            seed: 1,
        }
    }
}

impl PpcSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_replicates < 1 {
            return Err(invalid("n_replicates must be >= 1"));
        }
        if self.n_periods < 1 {
            return Err(invalid("n_periods must be >= 1"));
        }
        if !(self.tpm_rand_var >= 0.0) {
            return Err(invalid("tpm_rand_var must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcResult {
    pub name: String,
    pub observed: f64,
    pub replicates: Vec<f64>,
    pub p_posterior: f64,
    pub two_sided: f64,
}

impl PpcResult {
    pub fn new(name: impl Into<String>, observed: f64, replicates: Vec<f64>) -> Self {
        let p = if replicates.is_empty() {
            f64::NAN
        } else {
            replicates.iter().filter(|&&r| r >= observed).count() as f64 / replicates.len() as f64
        };
        PpcResult {
            name: name.into(),
            observed,
            replicates,
            p_posterior: p,
            two_sided: (2.0 * p.min(1.0 - p)).min(1.0),
        }
    }

    pub fn replicate_mean(&self) -> f64 {
        self.replicates.iter().sum::<f64>() / self.replicates.len() as f64
    }
}

/// Named statistic values; `None` marks a value undefined for that dataset.
pub type Statistics = Vec<(String, Option<f64>)>;

fn states_of(dataset: &Dataset) -> Result<Vec<&[usize]>> {
    dataset
        .subjects
        .iter()
        .map(|s| {
            s.true_states.as_deref().ok_or_else(|| {
                Error::MissingStates(
                    "posterior predictive checks need state annotations; decode the dataset first"
                        .into(),
                )
            })
        })
        .collect()
}

/// Pooled state-conditional means, named `emission_mean.<k>.<i>`.
pub fn emission_mean_statistics(dataset: &Dataset, m: usize) -> Result<Statistics> {
    let states = states_of(dataset)?;
    let n_dep = dataset.n_dep();
    let mut sum = Matrix::zeros(n_dep, m);
    let mut count = vec![0usize; m];
    for (s, path) in dataset.subjects.iter().zip(states) {
        for (t, &st) in path.iter().enumerate() {
            count[st] += 1;
            for k in 0..n_dep {
                sum[(k, st)] += s.obs[(t, k)];
            }
        }
    }
    let mut out = Vec::with_capacity(n_dep * m);
    for k in 0..n_dep {
        for i in 0..m {
            let v = (count[i] > 0).then(|| sum[(k, i)] / count[i] as f64);
            out.push((format!("emission_mean.{}.{}", k + 1, i + 1), v));
        }
    }
    Ok(out)
}

/// Pooled per-variable variance (`n - 1` denominator), named
/// `total_variance.<k>`.
pub fn total_variance_statistics(dataset: &Dataset) -> Statistics {
    let n_dep = dataset.n_dep();
    (0..n_dep)
        .map(|k| {
            let xs: Vec<f64> = dataset
                .subjects
                .iter()
                .flat_map(|s| (0..s.len()).map(move |t| s.obs[(t, k)]))
                .collect();
            let v = (xs.len() >= 2).then(|| crate::diagnostics::variance(&xs));
            (format!("total_variance.{}", k + 1), v)
        })
        .collect()
}

/// Row-normalized transition counts of one path. Rows without any
/// transition out of the state are `None`.
pub fn empirical_tpm(states: &[usize], m: usize) -> (Vec<Option<Vec<f64>>>, Matrix) {
    let counts = crate::sampler::transition_counts(states, m);
    (normalize_rows(&counts), counts)
}

fn normalize_rows(counts: &Matrix) -> Vec<Option<Vec<f64>>> {
    counts
        .rows()
        .map(|row| {
            let total: f64 = row.iter().sum();
            (total > 0.0).then(|| row.iter().map(|c| c / total).collect())
        })
        .collect()
}

/// Per-period pooled transition frequencies, named `tpm.<period>.<i>.<j>`.
/// Each subject's series is split into `n_periods` equal segments; any
/// remainder at the end is dropped. Transitions crossing a period boundary
/// are not counted.
pub fn tpm_period_statistics(dataset: &Dataset, m: usize, n_periods: usize) -> Result<Statistics> {
    let states = states_of(dataset)?;
    let mut counts = vec![Matrix::zeros(m, m); n_periods];
    for path in states {
        let len = path.len() / n_periods;
        for (p, c) in counts.iter_mut().enumerate() {
            for w in path[p * len..(p + 1) * len].windows(2) {
                c[(w[0], w[1])] += 1.0;
            }
        }
    }
    let mut out = Vec::with_capacity(n_periods * m * m);
    for (p, c) in counts.iter().enumerate() {
        for (i, row) in normalize_rows(c).into_iter().enumerate() {
            for j in 0..m {
                out.push((
                    format!("tpm.{}.{}.{}", p + 1, i + 1, j + 1),
                    row.as_ref().map(|r| r[j]),
                ));
            }
        }
    }
    Ok(out)
}

fn warn_remainder(dataset: &Dataset, n_periods: usize) {
    if dataset.subjects.iter().any(|s| s.len() % n_periods != 0) {
        warn!("series length not divisible by {n_periods} periods; the remainder is ignored");
    }
}

/// Compares observed statistics against replicate statistics. Cells
/// undefined in the observed data are dropped; undefined replicate values
/// are skipped for that cell.
pub fn compare(observed: &Statistics, replicates: &[Statistics]) -> Vec<PpcResult> {
    observed
        .iter()
        .enumerate()
        .filter_map(|(idx, (name, obs))| {
            let obs = (*obs)?;
            let reps: Vec<f64> = replicates.iter().filter_map(|r| r[idx].1).collect();
            Some(PpcResult::new(name.clone(), obs, reps))
        })
        .collect()
}

pub fn ppc_emission_means(
    observed: &Dataset,
    replicates: &[Dataset],
    m: usize,
) -> Result<Vec<PpcResult>> {
    let obs = emission_mean_statistics(observed, m)?;
    let reps = replicates
        .iter()
        .map(|r| emission_mean_statistics(r, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(compare(&obs, &reps))
}

pub fn ppc_total_variance(observed: &Dataset, replicates: &[Dataset]) -> Vec<PpcResult> {
    let obs = total_variance_statistics(observed);
    let reps: Vec<Statistics> = replicates.iter().map(total_variance_statistics).collect();
    compare(&obs, &reps)
}

pub fn ppc_tpm_homogeneity(
    observed: &Dataset,
    replicates: &[Dataset],
    m: usize,
    n_periods: usize,
) -> Result<Vec<PpcResult>> {
    if n_periods < 1 {
        return Err(invalid("n_periods must be >= 1"));
    }
    warn_remainder(observed, n_periods);
    let obs = tpm_period_statistics(observed, m, n_periods)?;
    let reps = replicates
        .iter()
        .map(|r| tpm_period_statistics(r, m, n_periods))
        .collect::<Result<Vec<_>>>()?;
    Ok(compare(&obs, &reps))
}

/// Generating parameters for a replicate: the draw's group values with the
/// between-subject emission variances averaged over states per variable and
/// the intercept variances set to `tpm_rand_var`.
pub fn replicate_params(group: &GroupParams, tpm_rand_var: f64) -> GroupParams {
    let (n_dep, m) = group.emiss_mean.shape();
    let mut rand_var = Matrix::zeros(n_dep, m);
    for k in 0..n_dep {
        let avg = group.emiss_rand_var.row(k).iter().sum::<f64>() / m as f64;
        rand_var.row_mut(k).fill(avg);
    }
    GroupParams {
        emiss_rand_var: rand_var,
        tpm_rand_var: Matrix::filled(m, m - 1, tpm_rand_var),
        ..group.clone()
    }
}

/// Chooses which stored draws seed the replicates: a random subset when the
/// chain is long enough, sampling with replacement otherwise.
fn draw_indices(n_stored: usize, n_draws: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded(seed, Purpose::Replicate, u64::from(u32::MAX));
    if n_draws <= n_stored {
        let mut idx = sample(&mut rng, n_stored, n_draws).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n_draws)
            .map(|_| rng.random_range(0..n_stored))
            .collect()
    }
}

fn replicate_scenario(
    group: GroupParams,
    n_subjects: usize,
    n_occasions: usize,
    seed: u64,
) -> ScenarioSpec {
    ScenarioSpec {
        id: "ppc-replicate".into(),
        group,
        n_subjects,
        n_occasions,
        zeta: f64::NAN,
        q_var: f64::NAN,
        n_sim: 1,
        seed,
        initial: InitialChoice::Stationary,
    }
}

fn one_replicate(
    chain: &Chain,
    draw: usize,
    r: usize,
    n_subjects: usize,
    n_occasions: usize,
    settings: &PpcSettings,
) -> Result<Dataset> {
    let group = replicate_params(&chain.draws[draw].group, settings.tpm_rand_var);
    let mut scenario = replicate_scenario(group, n_subjects, n_occasions, settings.seed);
    scenario.zeta = 0.0;
    scenario.q_var = settings.tpm_rand_var;
    Ok(simulate_dataset(&scenario, r as u64)?.dataset)
}

fn check_chain(chain: &Chain) -> Result<()> {
    if chain.draws.is_empty() {
        return Err(invalid("chain has no stored draws"));
    }
    Ok(())
}

/// Replicate datasets, one per selected posterior draw. Replicate `r` is
/// simulated from its own substream, so the set is reproducible.
pub fn ppc_replicates(
    chain: &Chain,
    n_draws: usize,
    n_subjects: usize,
    n_occasions: usize,
    settings: &PpcSettings,
) -> Result<Vec<Dataset>> {
    check_chain(chain)?;
    let idx = draw_indices(chain.draws.len(), n_draws, settings.seed);
    idx.par_iter()
        .enumerate()
        .map(|(r, &d)| one_replicate(chain, d, r, n_subjects, n_occasions, settings))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpcReport {
    pub emission_means: Vec<PpcResult>,
    pub total_variance: Vec<PpcResult>,
    pub tpm_homogeneity: Vec<PpcResult>,
}

impl PpcReport {
    pub fn all(&self) -> impl Iterator<Item = &PpcResult> {
        self.emission_means
            .iter()
            .chain(&self.total_variance)
            .chain(&self.tpm_homogeneity)
    }
}

/// All three checks against replicates shaped like the observed data
/// (subject count and the first subject's length). Replicates are generated
/// and reduced to statistics in parallel without being retained.
pub fn run_ppc(observed: &Dataset, chain: &Chain, settings: &PpcSettings) -> Result<PpcReport> {
    settings.validate()?;
    check_chain(chain)?;
    let m = chain.m();
    if observed.n_dep() != chain.n_dep() {
        return Err(invalid(format!(
            "dataset has {} variables, chain has {}",
            observed.n_dep(),
            chain.n_dep()
        )));
    }
    observed.validate(m)?;
    let n_subjects = observed.subjects.len();
    let n_occasions = observed.subjects[0].len();
    warn_remainder(observed, settings.n_periods);

    let stats = |d: &Dataset| -> Result<[Statistics; 3]> {
        Ok([
            emission_mean_statistics(d, m)?,
            total_variance_statistics(d),
            tpm_period_statistics(d, m, settings.n_periods)?,
        ])
    };
    let obs = stats(observed)?;
    let idx = draw_indices(chain.draws.len(), settings.n_replicates, settings.seed);
    let reps: Vec<[Statistics; 3]> = idx
        .par_iter()
        .enumerate()
        .map(|(r, &d)| {
            stats(&one_replicate(
                chain,
                d,
                r,
                n_subjects,
                n_occasions,
                settings,
            )?)
        })
        .collect::<Result<_>>()?;
    let pick = |b: usize| -> Vec<PpcResult> {
        let block: Vec<Statistics> = reps.iter().map(|r| r[b].clone()).collect();
        compare(&obs[b], &block)
    };
    Ok(PpcReport {
        emission_means: pick(0),
        total_variance: pick(1),
        tpm_homogeneity: pick(2),
    })
}
