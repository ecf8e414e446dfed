//! Gibbs/Metropolis sampler for the multilevel hidden Markov model.
//!
//! One sweep runs three blocks:
//!
//! 1. every subject's state path is drawn exactly by forward filtering,
//!    backward sampling;
//! 2. the emission block draws subject means, then the group means and
//!    between-subject variances from their normal–inverse-gamma conditional,
//!    then the residual variances;
//! 3. the transition block updates each subject intercept by random-walk
//!    Metropolis on the multinomial-logit likelihood of the subject's
//!    transition counts, then the group intercepts and their variances from
//!    conjugate conditionals.
//!
//! The first state of every path uses a uniform initial distribution, which
//! keeps the transition block exact (no stationary-distribution term in the
//! Metropolis ratio).

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::inference::{forward_filter, log_emissions_unchecked, EmissionPointParams};
use crate::matrix::Matrix;
use crate::model::{
    intercepts_from_row, mnl_row, tpm_from_intercepts, validate_tpm, Dataset, GroupParams,
    ModelSpec, SubjectParams, SubjectSeries,
};
use crate::rng::{seeded, Purpose, StreamRng};
use crate::simulate::categorical;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperpriors {
    /// `[n_dep × m]` prior means of the group-level emission means.
    pub mu0: Matrix,
    pub k0: f64,
    pub nu: f64,
    pub v: f64,
    pub alpha0: f64,
    pub beta0: f64,
    pub tpm_int_prior_mean: f64,
    pub tpm_int_prior_var: f64,
    pub tpm_var_prior_shape: f64,
    pub tpm_var_prior_scale: f64,
}

impl Hyperpriors {
    /// Uninformative defaults around the given prior means.
    pub fn with_mu0(mu0: Matrix) -> Self {
        Hyperpriors {
            mu0,
            k0: 1.0,
            nu: 1.0,
            v: 1.0,
            alpha0: 0.1,
            beta0: 0.1,
            tpm_int_prior_mean: 0.0,
            tpm_int_prior_var: 10.0,
            tpm_var_prior_shape: 0.5,
            tpm_var_prior_scale: 0.5,
        }
    }

    /// Defaults with `mu0` set to the state-conditional sample means.
    pub fn from_data(dataset: &Dataset, m: usize) -> Result<Self> {
        Ok(Self::with_mu0(state_sample_moments(dataset, m)?.0))
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.mu0.shape() != (spec.n_dep, spec.m) {
            return Err(invalid(format!(
                "mu0 has shape {:?}, expected {:?}",
                self.mu0.shape(),
                (spec.n_dep, spec.m)
            )));
        }
        for (name, x) in [
            ("k0", self.k0),
            ("nu", self.nu),
            ("v", self.v),
            ("alpha0", self.alpha0),
            ("beta0", self.beta0),
            ("tpm_int_prior_var", self.tpm_int_prior_var),
            ("tpm_var_prior_shape", self.tpm_var_prior_shape),
            ("tpm_var_prior_scale", self.tpm_var_prior_scale),
        ] {
            if !(x > 0.0) || !x.is_finite() {
                return Err(invalid(format!(
                    "hyperprior {name} must be positive, got {x}"
                )));
            }
        }
        if !self.tpm_int_prior_mean.is_finite() || !self.mu0.all_finite() {
            return Err(invalid("hyperprior means must be finite"));
        }
        Ok(())
    }
}

/// Hyperprior scalars as they appear in configuration. `mu0` defaults to
/// the state-conditional sample means of the data being fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu0: Option<Matrix>,
    pub k0: f64,
    pub nu: f64,
    pub v: f64,
    pub alpha0: f64,
    pub beta0: f64,
    pub tpm_int_prior_mean: f64,
    pub tpm_int_prior_var: f64,
    pub tpm_var_prior_shape: f64,
    pub tpm_var_prior_scale: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        let h = Hyperpriors::with_mu0(Matrix::zeros(0, 0));
        PriorSettings {
            mu0: None,
            k0: h.k0,
            nu: h.nu,
            v: h.v,
            alpha0: h.alpha0,
            beta0: h.beta0,
            tpm_int_prior_mean: h.tpm_int_prior_mean,
            tpm_int_prior_var: h.tpm_int_prior_var,
            tpm_var_prior_shape: h.tpm_var_prior_shape,
            tpm_var_prior_scale: h.tpm_var_prior_scale,
        }
    }
}

impl PriorSettings {
    pub fn hyperpriors(&self, dataset: &Dataset, m: usize) -> Result<Hyperpriors> {
        let mu0 = match &self.mu0 {
            Some(mu0) => mu0.clone(),
            None => state_sample_moments(dataset, m)?.0,
        };
        Ok(Hyperpriors {
            mu0,
            k0: self.k0,
            nu: self.nu,
            v: self.v,
            alpha0: self.alpha0,
            beta0: self.beta0,
            tpm_int_prior_mean: self.tpm_int_prior_mean,
            tpm_int_prior_var: self.tpm_int_prior_var,
            tpm_var_prior_shape: self.tpm_var_prior_shape,
            tpm_var_prior_scale: self.tpm_var_prior_scale,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartValues {
    pub emiss_mean: Matrix,
    /// Residual variances.
    pub emiss_var: Matrix,
    pub tpm: Matrix,
}

impl StartValues {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let shape = (spec.n_dep, spec.m);
        if self.emiss_mean.shape() != shape || self.emiss_var.shape() != shape {
            return Err(invalid(
                "start value emission shapes do not match the model",
            ));
        }
        if self.emiss_var.iter().any(|&v| !(v > 0.0)) {
            return Err(invalid("start variances must be positive"));
        }
        if self.tpm.shape() != (spec.m, spec.m) {
            return Err(invalid("start tpm shape does not match the model"));
        }
        validate_tpm(&self.tpm).into_result()?;
        if self.tpm.iter().any(|&p| p <= 0.0) {
            return Err(invalid("start tpm entries must be strictly positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub n_chains: usize,
    /// Explicit start values per chain. Chains without one get jittered
    /// starts around the data's state-conditional moments.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub starts: Vec<StartValues>,
}

impl McmcConfig {
    pub fn new(n_iter: usize, burn_in: usize, thin: usize, seed: u64) -> Self {
        McmcConfig {
            n_iter,
            burn_in,
            thin,
            seed,
            n_chains: 1,
            starts: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iter {
            return Err(invalid(format!(
                "burn_in ({}) must be less than n_iter ({})",
                self.burn_in, self.n_iter
            )));
        }
        if self.thin < 1 {
            return Err(invalid("thin must be >= 1"));
        }
        if self.n_chains < 1 {
            return Err(invalid("n_chains must be >= 1"));
        }
        Ok(())
    }

    pub fn stored_draws(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub group: GroupParams,
    /// Empty for chains read back from disk.
    pub subjects: Vec<SubjectParams>,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub chain_index: usize,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Post-burn-in acceptance rate of the intercept updates, per origin state.
    pub acceptance: Vec<f64>,
    /// Mean final proposal SD per origin state.
    pub proposal_sd: Vec<f64>,
    pub proposal_target: (f64, f64),
    pub initial_distribution: String,
    /// Sweeps in which some state had no occupancy across all subjects.
    pub empty_state_sweeps: usize,
    pub start: Option<StartValues>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub draws: Vec<Draw>,
    pub meta: ChainMeta,
}

/// Names of all group-level columns, in storage order.
pub fn param_names(m: usize, n_dep: usize) -> Vec<String> {
    let mut names = Vec::new();
    for block in ["emiss_mean", "emiss_rand_var", "emiss_resid_var"] {
        for k in 0..n_dep {
            for i in 0..m {
                names.push(format!("{block}.{}.{}", k + 1, i + 1));
            }
        }
    }
    for block in ["alpha", "psi_var"] {
        for i in 0..m {
            for j in 1..m {
                names.push(format!("{block}.{}.{}", i + 1, j + 1));
            }
        }
    }
    for i in 0..m {
        for j in 0..m {
            names.push(format!("gamma.{}.{}", i + 1, j + 1));
        }
    }
    names
}

/// Group-level values in the order of [`param_names`].
pub fn param_values(group: &GroupParams) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    out.extend(group.emiss_mean.iter());
    out.extend(group.emiss_rand_var.iter());
    out.extend(group.emiss_resid_var.iter());
    out.extend(group.tpm_intercepts.iter());
    out.extend(group.tpm_rand_var.iter());
    out.extend(group.group_tpm().iter());
    out
}

/// Rebuilds group parameters from a row of [`param_values`].
pub fn group_from_values(values: &[f64], m: usize, n_dep: usize) -> Result<GroupParams> {
    let e = n_dep * m;
    let t = m * (m - 1);
    if values.len() < 3 * e + 2 * t {
        return Err(invalid("too few values for the model dimensions"));
    }
    let block =
        |off: usize, r: usize, c: usize| Matrix::from_fn(r, c, |a, b| values[off + a * c + b]);
    Ok(GroupParams {
        emiss_mean: block(0, n_dep, m),
        emiss_rand_var: block(e, n_dep, m),
        emiss_resid_var: block(2 * e, n_dep, m),
        tpm_intercepts: block(3 * e, m, m - 1),
        tpm_rand_var: block(3 * e + t, m, m - 1),
    })
}

impl Chain {
    pub fn m(&self) -> usize {
        self.draws.first().map_or(0, |d| d.group.m())
    }

    pub fn n_dep(&self) -> usize {
        self.draws.first().map_or(0, |d| d.group.n_dep())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = param_names(self.m(), self.n_dep());
        names.push("loglik".into());
        names
    }

    /// All stored values of one named parameter.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        if name == "loglik" {
            return Ok(self.draws.iter().map(|d| d.loglik).collect());
        }
        let idx = param_names(self.m(), self.n_dep())
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(self
            .draws
            .iter()
            .map(|d| param_values(&d.group)[idx])
            .collect())
    }

    /// All columns at once, cheaper than repeated [`column`](Self::column) calls.
    pub fn columns(&self) -> Vec<(String, Vec<f64>)> {
        let names = self.param_names();
        let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(self.draws.len()); names.len()];
        for d in &self.draws {
            let mut vals = param_values(&d.group);
            vals.push(d.loglik);
            for (c, v) in cols.iter_mut().zip(vals) {
                c.push(v);
            }
        }
        names.into_iter().zip(cols).collect()
    }
}

fn inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    // IG(a, b) = 1 / Gamma(a, rate = b)
    let g = Gamma::new(shape, 1.0 / scale).expect("positive gamma parameters");
    1.0 / g.sample(rng)
}

fn normal<R: Rng + ?Sized>(mean: f64, var: f64, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    mean + var.sqrt() * z
}

/// State-conditional sample means and variances of a dataset.
///
/// Uses the annotated states when every subject has them; otherwise the
/// pooled observations are partitioned by k-means with clusters ordered by
/// their mean on the first variable.
pub fn state_sample_moments(dataset: &Dataset, m: usize) -> Result<(Matrix, Matrix)> {
    dataset.validate(m)?;
    let labels: Vec<Vec<usize>> = if dataset.has_states() {
        dataset
            .subjects
            .iter()
            .map(|s| s.true_states.clone().unwrap())
            .collect()
    } else {
        kmeans_labels(dataset, m)
    };
    let n_dep = dataset.n_dep();
    let mut count = vec![0.0; m];
    let mut sum = Matrix::zeros(n_dep, m);
    let mut sumsq = Matrix::zeros(n_dep, m);
    let mut all_sum = vec![0.0; n_dep];
    let mut all_sumsq = vec![0.0; n_dep];
    let mut total = 0.0;
    for (s, lab) in dataset.subjects.iter().zip(&labels) {
        for (t, &st) in lab.iter().enumerate() {
            count[st] += 1.0;
            total += 1.0;
            for k in 0..n_dep {
                let x = s.obs[(t, k)];
                sum[(k, st)] += x;
                sumsq[(k, st)] += x * x;
                all_sum[k] += x;
                all_sumsq[k] += x * x;
            }
        }
    }
    let mut means = Matrix::zeros(n_dep, m);
    let mut vars = Matrix::zeros(n_dep, m);
    for k in 0..n_dep {
        let all_mean = all_sum[k] / total;
        let all_var = (all_sumsq[k] / total - all_mean * all_mean).max(1e-6);
        for i in 0..m {
            if count[i] > 1.0 {
                let mu = sum[(k, i)] / count[i];
                means[(k, i)] = mu;
                vars[(k, i)] = (sumsq[(k, i)] / count[i] - mu * mu).max(1e-6);
            } else {
                means[(k, i)] = all_mean;
                vars[(k, i)] = all_var;
            }
        }
    }
    Ok((means, vars))
}

fn kmeans_labels(dataset: &Dataset, m: usize) -> Vec<Vec<usize>> {
    let n_dep = dataset.n_dep();
    let points: Vec<&[f64]> = dataset.subjects.iter().flat_map(|s| s.obs.rows()).collect();
    // deterministic start: quantiles of the first variable
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]));
    let mut centers: Vec<Vec<f64>> = (0..m)
        .map(|c| {
            let q = ((c as f64 + 0.5) / m as f64 * points.len() as f64) as usize;
            points[order[q.min(points.len() - 1)]].to_vec()
        })
        .collect();
    let mut assign = vec![0usize; points.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (p, a) in points.iter().zip(assign.iter_mut()) {
            let best = (0..m)
                .min_by(|&x, &y| {
                    let dx: f64 = p
                        .iter()
                        .zip(&centers[x])
                        .map(|(u, v)| (u - v).powi(2))
                        .sum();
                    let dy: f64 = p
                        .iter()
                        .zip(&centers[y])
                        .map(|(u, v)| (u - v).powi(2))
                        .sum();
                    dx.total_cmp(&dy)
                })
                .unwrap();
            if best != *a {
                *a = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; n_dep]; m];
        let mut counts = vec![0usize; m];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for k in 0..n_dep {
                sums[a][k] += p[k];
            }
        }
        for c in 0..m {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let mut rank: Vec<usize> = (0..m).collect();
    rank.sort_by(|&a, &b| centers[a][0].total_cmp(&centers[b][0]));
    let mut relabel = vec![0; m];
    for (new, &old) in rank.iter().enumerate() {
        relabel[old] = new;
    }
    let mut out = Vec::with_capacity(dataset.subjects.len());
    let mut idx = 0;
    for s in &dataset.subjects {
        out.push((0..s.len()).map(|t| relabel[assign[idx + t]]).collect());
        idx += s.len();
    }
    out
}

/// Reference parameters built from the data's state-conditional moments,
/// used to centre generated start values.
pub fn data_reference(dataset: &Dataset, m: usize) -> Result<GroupParams> {
    let (means, vars) = state_sample_moments(dataset, m)?;
    let n_dep = means.nrows();
    Ok(GroupParams {
        emiss_mean: means,
        emiss_rand_var: Matrix::filled(n_dep, m, 1.0),
        emiss_resid_var: vars,
        tpm_intercepts: Matrix::zeros(m, m - 1),
        tpm_rand_var: Matrix::filled(m, m - 1, 1.0),
    })
}

/// Start values: reference means jittered by `U(-0.2, 0.2)`, reference
/// residual variances, and a transition matrix with diagonal `U(0.5, 0.8)`
/// and equal off-diagonal entries.
pub fn generate_start_values<R: Rng + ?Sized>(group_ref: &GroupParams, rng: &mut R) -> StartValues {
    let (n_dep, m) = group_ref.emiss_mean.shape();
    let emiss_mean = Matrix::from_fn(n_dep, m, |k, i| {
        group_ref.emiss_mean[(k, i)] + rng.random_range(-0.2..0.2)
    });
    let mut tpm = Matrix::zeros(m, m);
    for i in 0..m {
        let diag: f64 = rng.random_range(0.5..0.8);
        let off = (1.0 - diag) / (m - 1) as f64;
        for j in 0..m {
            tpm[(i, j)] = if i == j { diag } else { off };
        }
    }
    StartValues {
        emiss_mean,
        emiss_var: group_ref.emiss_resid_var.clone(),
        tpm,
    }
}

/// Forward filtering, backward sampling on precomputed log emissions.
/// Returns the sampled path and the log-likelihood.
pub fn ffbs<R: Rng + ?Sized>(
    log_emis: &Matrix,
    tpm: &Matrix,
    delta: &[f64],
    rng: &mut R,
) -> (Vec<usize>, f64) {
    let (n, m) = log_emis.shape();
    let (filtered, loglik) = forward_filter(log_emis, tpm, delta);
    let mut path = vec![0usize; n];
    if n == 0 {
        return (path, loglik);
    }
    path[n - 1] = categorical(filtered.row(n - 1), rng);
    let mut w = vec![0.0; m];
    for t in (0..n - 1).rev() {
        let next = path[t + 1];
        let mut total = 0.0;
        for i in 0..m {
            w[i] = filtered[(t, i)] * tpm[(i, next)];
            total += w[i];
        }
        for x in w.iter_mut() {
            *x /= total;
        }
        path[t] = categorical(&w, rng);
    }
    (path, loglik)
}

/// Exact draw of a state path given fixed parameters.
pub fn sample_states_ffbs<R: Rng + ?Sized>(
    series: &SubjectSeries,
    tpm: &Matrix,
    delta: &[f64],
    params: &EmissionPointParams,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let le = crate::inference::log_emissions(&series.obs, params)?;
    validate_tpm(tpm).into_result()?;
    crate::model::validate_delta(delta, tpm.nrows())?;
    Ok(ffbs(&le, tpm, delta, rng).0)
}

/// Closed-form normal–inverse-gamma conditional of one group-level emission
/// cell given the subject means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NigPosterior {
    pub mean: f64,
    pub k: f64,
    pub shape: f64,
    pub scale: f64,
}

pub fn nig_posterior(subject_means: &[f64], mu0: f64, k0: f64, nu: f64, v: f64) -> NigPosterior {
    let n = subject_means.len() as f64;
    let (mean_n, ss) = if subject_means.is_empty() {
        (mu0, 0.0)
    } else {
        let xbar = subject_means.iter().sum::<f64>() / n;
        let ss: f64 = subject_means.iter().map(|x| (x - xbar).powi(2)).sum();
        let k_n = k0 + n;
        (
            (k0 * mu0 + n * xbar) / k_n,
            ss + k0 * n / k_n * (xbar - mu0).powi(2),
        )
    };
    NigPosterior {
        mean: mean_n,
        k: k0 + n,
        shape: (nu + n) / 2.0,
        scale: (nu * v + ss) / 2.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmissionBlock {
    pub subj_mean: Vec<Matrix>,
    pub emiss_mean: Matrix,
    pub emiss_rand_var: Matrix,
    pub emiss_resid_var: Matrix,
    /// States with no occupancy across all subjects in this draw.
    pub empty_states: Vec<usize>,
}

/// Per-subject occupancy, sums and sums of squares by state.
struct EmissionStats {
    count: Vec<Vec<f64>>,
    sum: Vec<Matrix>,
    sumsq: Vec<Matrix>,
}

fn emission_stats(dataset: &Dataset, states: &[Vec<usize>], m: usize) -> EmissionStats {
    let n_dep = dataset.n_dep();
    let mut stats = EmissionStats {
        count: Vec::with_capacity(states.len()),
        sum: Vec::with_capacity(states.len()),
        sumsq: Vec::with_capacity(states.len()),
    };
    for (s, path) in dataset.subjects.iter().zip(states) {
        let mut count = vec![0.0; m];
        let mut sum = Matrix::zeros(n_dep, m);
        let mut sumsq = Matrix::zeros(n_dep, m);
        for (t, &st) in path.iter().enumerate() {
            count[st] += 1.0;
            for (k, &x) in s.obs.row(t).iter().enumerate() {
                sum[(k, st)] += x;
                sumsq[(k, st)] += x * x;
            }
        }
        stats.count.push(count);
        stats.sum.push(sum);
        stats.sumsq.push(sumsq);
    }
    stats
}

/// Conjugate update of the emission parameters given sampled state paths.
pub fn update_emission_block<R: Rng + ?Sized>(
    dataset: &Dataset,
    states: &[Vec<usize>],
    group: &GroupParams,
    hyper: &Hyperpriors,
    rng: &mut R,
) -> EmissionBlock {
    let (n_dep, m) = group.emiss_mean.shape();
    let stats = emission_stats(dataset, states, m);
    let n_subj = states.len();

    let empty_states: Vec<usize> = (0..m)
        .filter(|&i| stats.count.iter().all(|c| c[i] == 0.0))
        .collect();
    if !empty_states.is_empty() {
        warn!(
            "states {:?} unoccupied in this draw; subject means drawn from the prior predictive",
            empty_states.iter().map(|s| s + 1).collect::<Vec<_>>()
        );
    }

    // subject means | states, group
    let mut subj_mean = vec![Matrix::zeros(n_dep, m); n_subj];
    for n in 0..n_subj {
        for k in 0..n_dep {
            for i in 0..m {
                let resid = group.emiss_resid_var[(k, i)];
                let between = group.emiss_rand_var[(k, i)];
                let prec = stats.count[n][i] / resid + 1.0 / between;
                let mean =
                    (stats.sum[n][(k, i)] / resid + group.emiss_mean[(k, i)] / between) / prec;
                subj_mean[n][(k, i)] = normal(mean, 1.0 / prec, rng);
            }
        }
    }

    // group mean and between-subject variance | subject means
    let mut emiss_mean = Matrix::zeros(n_dep, m);
    let mut emiss_rand_var = Matrix::zeros(n_dep, m);
    let mut cell = vec![0.0; n_subj];
    for k in 0..n_dep {
        for i in 0..m {
            for (c, sm) in cell.iter_mut().zip(&subj_mean) {
                *c = sm[(k, i)];
            }
            let post = nig_posterior(&cell, hyper.mu0[(k, i)], hyper.k0, hyper.nu, hyper.v);
            let var = inv_gamma(post.shape, post.scale, rng);
            emiss_rand_var[(k, i)] = var;
            emiss_mean[(k, i)] = normal(post.mean, var / post.k, rng);
        }
    }

    // residual variance | subject means, states
    let mut emiss_resid_var = Matrix::zeros(n_dep, m);
    for k in 0..n_dep {
        for i in 0..m {
            let mut n_obs = 0.0;
            let mut ss = 0.0;
            for n in 0..n_subj {
                let c = stats.count[n][i];
                if c == 0.0 {
                    continue;
                }
                let mu = subj_mean[n][(k, i)];
                n_obs += c;
                ss += stats.sumsq[n][(k, i)] - 2.0 * mu * stats.sum[n][(k, i)] + c * mu * mu;
            }
            emiss_resid_var[(k, i)] = inv_gamma(
                hyper.alpha0 + n_obs / 2.0,
                hyper.beta0 + ss.max(0.0) / 2.0,
                rng,
            );
        }
    }

    EmissionBlock {
        subj_mean,
        emiss_mean,
        emiss_rand_var,
        emiss_resid_var,
        empty_states,
    }
}

/// `[m × m]` transition counts of one state path.
pub fn transition_counts(states: &[usize], m: usize) -> Matrix {
    let mut counts = Matrix::zeros(m, m);
    for w in states.windows(2) {
        counts[(w[0], w[1])] += 1.0;
    }
    counts
}

fn mnl_row_loglik(counts: &[f64], alpha: &[f64]) -> f64 {
    let p = mnl_row(alpha).expect("finite intercepts");
    counts
        .iter()
        .zip(&p)
        .filter(|(c, _)| **c > 0.0)
        .map(|(c, p)| c * p.ln())
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TpmBlock {
    pub subj_alpha: Vec<Matrix>,
    pub tpm_intercepts: Matrix,
    pub tpm_rand_var: Matrix,
    /// Accepted proposals per intercept cell, summed over subjects.
    pub accepted: Matrix,
    /// Proposals per intercept cell (equal to the number of subjects).
    pub proposed: usize,
    /// Per-subject acceptance indicators, `[m × (m - 1)]` each.
    pub subj_accepted: Vec<Matrix>,
}

/// Metropolis update of subject intercepts followed by conjugate updates of
/// the group intercepts and their between-subject variances.
pub fn update_tpm_block<R: Rng + ?Sized>(
    counts: &[Matrix],
    subj_alpha: &[Matrix],
    group: &GroupParams,
    proposal_sd: &[Matrix],
    hyper: &Hyperpriors,
    rng: &mut R,
) -> TpmBlock {
    let m = group.m();
    let n_subj = counts.len();
    let mut new_alpha = subj_alpha.to_vec();
    let mut accepted = Matrix::zeros(m, m - 1);
    let mut subj_accepted = vec![Matrix::zeros(m, m - 1); n_subj];

    for n in 0..n_subj {
        for i in 0..m {
            let row_counts = counts[n].row(i);
            let mut alpha = new_alpha[n].row(i).to_vec();
            let mut cur_ll = mnl_row_loglik(row_counts, &alpha);
            for j in 0..m - 1 {
                let mu = group.tpm_intercepts[(i, j)];
                let var = group.tpm_rand_var[(i, j)];
                let old = alpha[j];
                let prop = old + proposal_sd[n][(i, j)] * rng.sample::<f64, _>(StandardNormal);
                alpha[j] = prop;
                let prop_ll = mnl_row_loglik(row_counts, &alpha);
                let log_ratio =
                    prop_ll - cur_ll - ((prop - mu).powi(2) - (old - mu).powi(2)) / (2.0 * var);
                let u: f64 = rng.random();
                if u.ln() < log_ratio {
                    cur_ll = prop_ll;
                    accepted[(i, j)] += 1.0;
                    subj_accepted[n][(i, j)] = 1.0;
                } else {
                    alpha[j] = old;
                }
            }
            new_alpha[n].row_mut(i).copy_from_slice(&alpha);
        }
    }

    let mut tpm_intercepts = Matrix::zeros(m, m - 1);
    let mut tpm_rand_var = Matrix::zeros(m, m - 1);
    let ns = n_subj as f64;
    for i in 0..m {
        for j in 0..m - 1 {
            let var = group.tpm_rand_var[(i, j)];
            let sum: f64 = new_alpha.iter().map(|a| a[(i, j)]).sum();
            let prec = 1.0 / hyper.tpm_int_prior_var + ns / var;
            let mean = (hyper.tpm_int_prior_mean / hyper.tpm_int_prior_var + sum / var) / prec;
            let bar = normal(mean, 1.0 / prec, rng);
            tpm_intercepts[(i, j)] = bar;
            let ss: f64 = new_alpha.iter().map(|a| (a[(i, j)] - bar).powi(2)).sum();
            tpm_rand_var[(i, j)] = inv_gamma(
                hyper.tpm_var_prior_shape + ns / 2.0,
                hyper.tpm_var_prior_scale + ss / 2.0,
                rng,
            );
        }
    }

    TpmBlock {
        subj_alpha: new_alpha,
        tpm_intercepts,
        tpm_rand_var,
        accepted,
        proposed: n_subj,
        subj_accepted,
    }
}

/// Target acceptance band for the intercept proposals during burn-in.
pub const ACCEPT_TARGET: (f64, f64) = (0.23, 0.44);
const ADAPT_BATCH: usize = 50;
const INITIAL_PROPOSAL_SD: f64 = 1.0;

fn check_finite(iteration: usize, block: &'static str, mats: &[&Matrix]) -> Result<()> {
    for mat in mats {
        if !mat.all_finite() {
            return Err(Error::Numerical {
                iteration,
                block,
                detail: "non-finite draw".into(),
            });
        }
    }
    Ok(())
}

fn initial_group(start: &StartValues, hyper: &Hyperpriors) -> Result<GroupParams> {
    let (n_dep, m) = start.emiss_mean.shape();
    let mut intercepts = Matrix::zeros(m, m - 1);
    for i in 0..m {
        intercepts
            .row_mut(i)
            .copy_from_slice(&intercepts_from_row(start.tpm.row(i))?);
    }
    Ok(GroupParams {
        emiss_mean: start.emiss_mean.clone(),
        emiss_rand_var: Matrix::filled(n_dep, m, hyper.v),
        emiss_resid_var: start.emiss_var.clone(),
        tpm_intercepts: intercepts,
        tpm_rand_var: Matrix::filled(m, m - 1, 1.0),
    })
}

/// Runs one chain from the given start values.
pub fn run_chain(
    dataset: &Dataset,
    spec: &ModelSpec,
    hyper: &Hyperpriors,
    config: &McmcConfig,
    start: &StartValues,
    chain_index: usize,
    rng: &mut StreamRng,
) -> Result<Chain> {
    let m = spec.m;
    let n_subj = dataset.subjects.len();
    let delta = vec![1.0 / m as f64; m];

    let mut group = initial_group(start, hyper)?;
    let mut subj_mean = vec![group.emiss_mean.clone(); n_subj];
    let mut subj_alpha = vec![group.tpm_intercepts.clone(); n_subj];
    let mut proposal_sd = vec![Matrix::filled(m, m - 1, INITIAL_PROPOSAL_SD); n_subj];
    let mut batch_acc = vec![Matrix::zeros(m, m - 1); n_subj];
    let mut post_acc = vec![0.0; m];
    let mut post_prop = vec![0.0; m];
    let mut empty_state_sweeps = 0;

    let mut draws: Vec<Draw> = Vec::with_capacity(config.stored_draws());
    let mut pending_loglik = false;
    let mut states: Vec<Vec<usize>> = vec![Vec::new(); n_subj];

    for iter in 0..config.n_iter {
        // latent states; the forward pass also gives the log-likelihood of the
        // parameters from the previous sweep
        let mut loglik = 0.0;
        for (n, series) in dataset.subjects.iter().enumerate() {
            let le = log_emissions_unchecked(&series.obs, &subj_mean[n], &group.emiss_resid_var);
            let tpm = tpm_from_intercepts(&subj_alpha[n]);
            let (path, ll) = ffbs(&le, &tpm, &delta, rng);
            states[n] = path;
            loglik += ll;
        }
        if !loglik.is_finite() {
            return Err(Error::Numerical {
                iteration: iter,
                block: "states",
                detail: format!("log-likelihood {loglik}"),
            });
        }
        if pending_loglik {
            draws.last_mut().unwrap().loglik = loglik;
            pending_loglik = false;
        }

        let em = update_emission_block(dataset, &states, &group, hyper, rng);
        check_finite(
            iter,
            "emission",
            &[&em.emiss_mean, &em.emiss_rand_var, &em.emiss_resid_var],
        )?;
        if em.subj_mean.iter().any(|s| !s.all_finite()) {
            return Err(Error::Numerical {
                iteration: iter,
                block: "emission",
                detail: "non-finite subject mean".into(),
            });
        }
        if !em.empty_states.is_empty() {
            empty_state_sweeps += 1;
        }
        subj_mean = em.subj_mean;
        group.emiss_mean = em.emiss_mean;
        group.emiss_rand_var = em.emiss_rand_var;
        group.emiss_resid_var = em.emiss_resid_var;

        let counts: Vec<Matrix> = states.iter().map(|s| transition_counts(s, m)).collect();
        let tb = update_tpm_block(&counts, &subj_alpha, &group, &proposal_sd, hyper, rng);
        check_finite(iter, "transition", &[&tb.tpm_intercepts, &tb.tpm_rand_var])?;
        if tb.subj_alpha.iter().any(|a| !a.all_finite()) {
            return Err(Error::Numerical {
                iteration: iter,
                block: "transition",
                detail: "non-finite subject intercept".into(),
            });
        }
        subj_alpha = tb.subj_alpha;
        group.tpm_intercepts = tb.tpm_intercepts;
        group.tpm_rand_var = tb.tpm_rand_var;

        if iter < config.burn_in {
            for (b, a) in batch_acc.iter_mut().zip(&tb.subj_accepted) {
                for i in 0..m {
                    for j in 0..m - 1 {
                        b[(i, j)] += a[(i, j)];
                    }
                }
            }
            if (iter + 1) % ADAPT_BATCH == 0 {
                for (sd, b) in proposal_sd.iter_mut().zip(batch_acc.iter_mut()) {
                    for i in 0..m {
                        for j in 0..m - 1 {
                            let rate = b[(i, j)] / ADAPT_BATCH as f64;
                            if rate < ACCEPT_TARGET.0 {
                                sd[(i, j)] *= 0.75;
                            } else if rate > ACCEPT_TARGET.1 {
                                sd[(i, j)] *= 1.3;
                            }
                            b[(i, j)] = 0.0;
                        }
                    }
                }
            }
        } else {
            for i in 0..m {
                post_acc[i] += tb.accepted.row(i).iter().sum::<f64>();
                post_prop[i] += ((m - 1) * tb.proposed) as f64;
            }
            if (iter - config.burn_in + 1).is_multiple_of(config.thin) {
                let subjects = subj_mean
                    .iter()
                    .zip(&subj_alpha)
                    .map(|(mean, alpha)| SubjectParams {
                        subj_mean: mean.clone(),
                        tpm: tpm_from_intercepts(alpha),
                    })
                    .collect();
                draws.push(Draw {
                    group: group.clone(),
                    subjects,
                    loglik: f64::NAN,
                });
                pending_loglik = true;
            }
        }
    }

    if pending_loglik {
        let mut loglik = 0.0;
        for (n, series) in dataset.subjects.iter().enumerate() {
            let le = log_emissions_unchecked(&series.obs, &subj_mean[n], &group.emiss_resid_var);
            let tpm = tpm_from_intercepts(&subj_alpha[n]);
            loglik += forward_filter(&le, &tpm, &delta).1;
        }
        draws.last_mut().unwrap().loglik = loglik;
    }

    let acceptance = post_acc
        .iter()
        .zip(&post_prop)
        .map(|(a, p)| if *p > 0.0 { a / p } else { 0.0 })
        .collect();
    let proposal_sd_mean = (0..m)
        .map(|i| {
            proposal_sd
                .iter()
                .map(|sd| sd.row(i).iter().sum::<f64>())
                .sum::<f64>()
                / (n_subj * (m - 1)) as f64
        })
        .collect();

    Ok(Chain {
        draws,
        meta: ChainMeta {
            chain_index,
            n_iter: config.n_iter,
            burn_in: config.burn_in,
            thin: config.thin,
            seed: config.seed,
            acceptance,
            proposal_sd: proposal_sd_mean,
            proposal_target: ACCEPT_TARGET,
            initial_distribution: "uniform".into(),
            empty_state_sweeps,
            start: Some(start.clone()),
        },
    })
}

/// Fits `config.n_chains` chains. Chains run concurrently; each uses its
/// own stream derived from `config.seed`, so results do not depend on
/// scheduling.
pub fn run_mcmc(
    dataset: &Dataset,
    spec: &ModelSpec,
    hyper: &Hyperpriors,
    config: &McmcConfig,
) -> Result<Vec<Chain>> {
    spec.validate()?;
    config.validate()?;
    hyper.validate(spec)?;
    dataset.validate(spec.m)?;
    if dataset.n_dep() != spec.n_dep {
        return Err(invalid(format!(
            "dataset has {} variables, model expects {}",
            dataset.n_dep(),
            spec.n_dep
        )));
    }
    let reference = if config.starts.len() < config.n_chains {
        Some(data_reference(dataset, spec.m)?)
    } else {
        None
    };
    let starts: Vec<StartValues> = (0..config.n_chains)
        .map(|c| match config.starts.get(c) {
            Some(s) => s.clone(),
            None => {
                let mut rng = seeded(config.seed, Purpose::StartValues, c as u64);
                generate_start_values(reference.as_ref().unwrap(), &mut rng)
            }
        })
        .collect();
    for s in &starts {
        s.validate(spec)?;
    }
    (0..config.n_chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = seeded(config.seed, Purpose::Chain, c as u64);
            run_chain(dataset, spec, hyper, config, &starts[c], c, &mut rng)
        })
        .collect()
}
