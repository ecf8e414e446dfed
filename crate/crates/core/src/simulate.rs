//! Data generation for simulation scenarios.
//!
//! A dataset is produced in three steps: draw subject-level transition
//! matrices and emission means around the group values, simulate each
//! subject's latent state path, then draw observations given the states.

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::matrix::Matrix;
use crate::model::{
    mnl_row, stationary_distribution, validate_delta, validate_tpm, Dataset, GroupParams,
    SubjectParams, SubjectSeries,
};
use crate::rng::{Purpose, SeedPath};

/// How a simulator picks the distribution of the first state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialChoice {
    /// Stationary distribution of each subject's transition matrix.
    #[default]
    Stationary,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: String,
    /// Generating parameters. The variance blocks are authoritative; `zeta`
    /// and `q_var` record the grid values they were filled from.
    pub group: GroupParams,
    pub n_subjects: usize,
    pub n_occasions: usize,
    pub zeta: f64,
    pub q_var: f64,
    pub n_sim: usize,
    pub seed: u64,
    #[serde(default)]
    pub initial: InitialChoice,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 1 {
            return Err(invalid(format!("scenario {}: N must be >= 1", self.id)));
        }
        if self.n_occasions < 2 {
            return Err(invalid(format!("scenario {}: N_T must be >= 2", self.id)));
        }
        if !(self.zeta >= 0.0) || !(self.q_var >= 0.0) {
            return Err(invalid(format!(
                "scenario {}: zeta and Q must be >= 0",
                self.id
            )));
        }
        if self.n_sim < 1 {
            return Err(invalid(format!("scenario {}: n_sim must be >= 1", self.id)));
        }
        self.group.validate_nonneg()?;
        if let InitialChoice::Fixed(delta) = &self.initial {
            validate_delta(delta, self.group.m())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialDistribution {
    delta: Vec<f64>,
}

impl InitialDistribution {
    pub fn new(delta: Vec<f64>) -> Result<Self> {
        validate_delta(&delta, delta.len())?;
        Ok(InitialDistribution { delta })
    }

    pub fn uniform(m: usize) -> Self {
        InitialDistribution {
            delta: vec![1.0 / m as f64; m],
        }
    }

    /// Stationary distribution of `tpm`, or uniform when the chain is
    /// reducible.
    pub fn stationary(tpm: &Matrix) -> Self {
        match stationary_distribution(tpm) {
            Some(delta) => InitialDistribution { delta },
            None => {
                warn!(
                    "transition matrix has no unique stationary distribution; using uniform delta"
                );
                Self::uniform(tpm.nrows())
            }
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.delta
    }
}

/// Draws an index from a probability vector.
pub(crate) fn categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack above the final cumulative sum
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Subject-specific transition matrix: each intercept is perturbed by
/// `N(0, tpm_rand_var)` and each row mapped through [`mnl_row`].
pub fn draw_subject_tpm<R: Rng + ?Sized>(group: &GroupParams, rng: &mut R) -> Matrix {
    let m = group.m();
    let mut tpm = Matrix::zeros(m, m);
    let mut alpha = vec![0.0; m - 1];
    for i in 0..m {
        for (j, a) in alpha.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *a = group.tpm_intercepts[(i, j)] + group.tpm_rand_var[(i, j)].sqrt() * z;
        }
        let row = mnl_row(&alpha).expect("finite intercepts");
        tpm.row_mut(i).copy_from_slice(&row);
    }
    tpm
}

/// Subject-specific emission means `β + u`, `u ~ N(0, emiss_rand_var)`.
pub fn draw_subject_means<R: Rng + ?Sized>(group: &GroupParams, rng: &mut R) -> Matrix {
    let (n_dep, m) = group.emiss_mean.shape();
    Matrix::from_fn(n_dep, m, |k, i| {
        let z: f64 = rng.sample(StandardNormal);
        group.emiss_mean[(k, i)] + group.emiss_rand_var[(k, i)].sqrt() * z
    })
}

pub fn simulate_states<R: Rng + ?Sized>(
    tpm: &Matrix,
    n_occasions: usize,
    delta: &InitialDistribution,
    rng: &mut R,
) -> Result<Vec<usize>> {
    validate_tpm(tpm).into_result()?;
    if delta.as_slice().len() != tpm.nrows() {
        return Err(invalid("delta length does not match tpm"));
    }
    let mut states = Vec::with_capacity(n_occasions);
    if n_occasions == 0 {
        return Ok(states);
    }
    let mut s = categorical(delta.as_slice(), rng);
    states.push(s);
    for _ in 1..n_occasions {
        s = categorical(tpm.row(s), rng);
        states.push(s);
    }
    Ok(states)
}

/// Observations given a state path; variables are independent given the
/// state, with residual variance `emiss_resid_var[(k, state)]`.
pub fn simulate_observations<R: Rng + ?Sized>(
    states: &[usize],
    subj: &SubjectParams,
    group: &GroupParams,
    rng: &mut R,
) -> Matrix {
    let n_dep = subj.subj_mean.nrows();
    let mut obs = Matrix::zeros(states.len(), n_dep);
    for (t, &s) in states.iter().enumerate() {
        for k in 0..n_dep {
            let z: f64 = rng.sample(StandardNormal);
            obs[(t, k)] = subj.subj_mean[(k, s)] + group.emiss_resid_var[(k, s)].sqrt() * z;
        }
    }
    obs
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub dataset: Dataset,
    pub subjects: Vec<SubjectParams>,
}

/// Simulates one subject from its own random stream.
pub fn simulate_subject<R: Rng + ?Sized>(
    group: &GroupParams,
    n_occasions: usize,
    initial: &InitialChoice,
    rng: &mut R,
) -> Result<(SubjectSeries, SubjectParams)> {
    let tpm = draw_subject_tpm(group, rng);
    let subj_mean = draw_subject_means(group, rng);
    let delta = match initial {
        InitialChoice::Stationary => InitialDistribution::stationary(&tpm),
        InitialChoice::Fixed(d) => InitialDistribution::new(d.clone())?,
    };
    let params = SubjectParams { subj_mean, tpm };
    let states = simulate_states(&params.tpm, n_occasions, &delta, rng)?;
    let obs = simulate_observations(&states, &params, group, rng);
    Ok((
        SubjectSeries {
            obs,
            true_states: Some(states),
        },
        params,
    ))
}

/// Full dataset for one iteration of a scenario. Subject `n` draws from
/// substream `(seed, id, iteration, Subject, n)`, so the result depends only
/// on those coordinates.
pub fn simulate_dataset(scenario: &ScenarioSpec, iteration: u64) -> Result<SimulatedData> {
    scenario.validate()?;
    let path = SeedPath::new(scenario.seed, &scenario.id, iteration);
    let mut series = Vec::with_capacity(scenario.n_subjects);
    let mut subjects = Vec::with_capacity(scenario.n_subjects);
    for n in 0..scenario.n_subjects {
        let mut rng = path.stream(Purpose::Subject, n as u64);
        let (s, p) = simulate_subject(
            &scenario.group,
            scenario.n_occasions,
            &scenario.initial,
            &mut rng,
        )?;
        series.push(s);
        subjects.push(p);
    }
    Ok(SimulatedData {
        dataset: Dataset { subjects: series },
        subjects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{intercepts_from_row, population, ROW_SUM_TOL};
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;

    fn sleep_group(zeta: f64, q: f64) -> GroupParams {
        GroupParams::from_population(
            &population::sleep_means(),
            &population::sleep_tpm(),
            zeta,
            q,
            population::RESIDUAL_VARIANCE,
        )
        .unwrap()
    }

    fn scenario(n: usize, nt: usize, zeta: f64, q: f64) -> ScenarioSpec {
        ScenarioSpec {
            id: "test".into(),
            group: sleep_group(zeta, q),
            n_subjects: n,
            n_occasions: nt,
            zeta,
            q_var: q,
            n_sim: 1,
            seed: 11,
            initial: InitialChoice::Stationary,
        }
    }

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn zero_q_gives_group_tpm() {
        let g = sleep_group(0.25, 0.0);
        let mut rng = seeded(1, Purpose::Misc, 0);
        let tpm = draw_subject_tpm(&g, &mut rng);
        assert_eq!(tpm, g.group_tpm());
    }

    #[test]
    fn intercept_deviation_variance() {
        let g = sleep_group(0.25, 0.1);
        let mut rng = seeded(2, Purpose::Misc, 0);
        let alphas: Vec<f64> = (0..10_000)
            .map(|_| {
                let tpm = draw_subject_tpm(&g, &mut rng);
                intercepts_from_row(tpm.row(0)).unwrap()[0]
            })
            .collect();
        let (mean, var) = mean_var(&alphas);
        assert_abs_diff_eq!(mean, g.tpm_intercepts[(0, 0)], epsilon = 0.02);
        assert!((var / 0.1 - 1.0).abs() < 0.05, "var = {var}");
    }

    #[test]
    fn subject_tpms_are_stochastic() {
        let g = sleep_group(0.25, 0.4);
        let mut rng = seeded(3, Purpose::Misc, 0);
        for _ in 0..1000 {
            let tpm = draw_subject_tpm(&g, &mut rng);
            for row in tpm.rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= ROW_SUM_TOL);
                assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn zero_zeta_gives_group_means() {
        let g = sleep_group(0.0, 0.1);
        let mut rng = seeded(4, Purpose::Misc, 0);
        let means = draw_subject_means(&g, &mut rng);
        assert_eq!(means, g.emiss_mean);
        assert_eq!(means.shape(), (3, 3));
    }

    #[test]
    fn subject_mean_distribution() {
        let g = sleep_group(0.25, 0.1);
        let mut rng = seeded(5, Purpose::Misc, 0);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| draw_subject_means(&g, &mut rng)[(0, 0)])
            .collect();
        let (mean, var) = mean_var(&draws);
        assert_abs_diff_eq!(mean, -0.360, epsilon = 0.02);
        assert!((var / 0.25 - 1.0).abs() < 0.05, "var = {var}");
    }

    #[test]
    fn identity_tpm_is_absorbing() {
        let mut rng = seeded(6, Purpose::Misc, 0);
        let delta = InitialDistribution::new(vec![1.0, 0.0, 0.0]).unwrap();
        let states = simulate_states(&Matrix::identity(3), 500, &delta, &mut rng).unwrap();
        assert!(states.iter().all(|&s| s == 0));
    }

    #[test]
    fn uniform_tpm_frequencies() {
        let mut rng = seeded(7, Purpose::Misc, 0);
        let tpm = Matrix::filled(3, 3, 1.0 / 3.0);
        let delta = InitialDistribution::uniform(3);
        let states = simulate_states(&tpm, 30_000, &delta, &mut rng).unwrap();
        for s in 0..3 {
            let freq = states.iter().filter(|&&x| x == s).count() as f64 / 30_000.0;
            assert_abs_diff_eq!(freq, 1.0 / 3.0, epsilon = 0.01);
        }
    }

    #[test]
    fn awake_dwell_time_is_geometric() {
        let mut rng = seeded(8, Purpose::Misc, 0);
        let tpm = population::sleep_tpm();
        let delta = InitialDistribution::stationary(&tpm);
        let states = simulate_states(&tpm, 100_000, &delta, &mut rng).unwrap();
        let mut runs = Vec::new();
        let mut len = 0usize;
        for (t, &s) in states.iter().enumerate() {
            if s == 0 {
                len += 1;
            }
            let ends = s != 0 || t + 1 == states.len();
            if ends && len > 0 {
                runs.push(len as f64);
                len = 0;
            }
        }
        let mean = runs.iter().sum::<f64>() / runs.len() as f64;
        let expected = 1.0 / (1.0 - 0.984);
        assert!((mean / expected - 1.0).abs() < 0.10, "mean dwell {mean}");
    }

    #[test]
    fn empirical_transitions_converge() {
        let mut rng = seeded(9, Purpose::Misc, 0);
        let tpm = population::baseline_tpm();
        let states = simulate_states(
            &tpm,
            100_000,
            &InitialDistribution::stationary(&tpm),
            &mut rng,
        )
        .unwrap();
        let mut counts = Matrix::zeros(3, 3);
        for w in states.windows(2) {
            counts[(w[0], w[1])] += 1.0;
        }
        for i in 0..3 {
            let total: f64 = counts.row(i).iter().sum();
            assert!(total > 1000.0);
            for j in 0..3 {
                assert!((counts[(i, j)] / total - tpm[(i, j)]).abs() < 0.02);
            }
        }
    }

    #[test]
    fn invalid_tpm_rejected() {
        let mut rng = seeded(10, Purpose::Misc, 0);
        let bad = Matrix::filled(2, 2, 0.7);
        assert!(simulate_states(&bad, 10, &InitialDistribution::uniform(2), &mut rng).is_err());
    }

    #[test]
    fn noiseless_observations() {
        let mut g = sleep_group(0.25, 0.1);
        g.emiss_resid_var = Matrix::zeros(3, 3);
        let subj = SubjectParams {
            subj_mean: g.emiss_mean.clone(),
            tpm: g.group_tpm(),
        };
        let mut rng = seeded(11, Purpose::Misc, 0);
        let states = vec![0, 1, 2, 2, 1];
        let obs = simulate_observations(&states, &subj, &g, &mut rng);
        for (t, &s) in states.iter().enumerate() {
            for k in 0..3 {
                assert_eq!(obs[(t, k)], g.emiss_mean[(k, s)]);
            }
        }
    }

    #[test]
    fn residual_variance_and_independence() {
        let g = sleep_group(0.25, 0.1);
        let subj = SubjectParams {
            subj_mean: g.emiss_mean.clone(),
            tpm: g.group_tpm(),
        };
        let mut rng = seeded(12, Purpose::Misc, 0);
        let states = vec![0; 50_000];
        let obs = simulate_observations(&states, &subj, &g, &mut rng);
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|k| (0..50_000).map(|t| obs[(t, k)]).collect())
            .collect();
        for col in &cols {
            let (_, var) = mean_var(col);
            assert!((var / 0.1 - 1.0).abs() < 0.05, "var = {var}");
        }
        let (m0, v0) = mean_var(&cols[0]);
        let (m1, v1) = mean_var(&cols[1]);
        let cov = cols[0]
            .iter()
            .zip(&cols[1])
            .map(|(a, b)| (a - m0) * (b - m1))
            .sum::<f64>()
            / 49_999.0;
        assert!((cov / (v0 * v1).sqrt()).abs() < 0.02);
    }

    #[test]
    fn dataset_is_deterministic_and_shaped() {
        let sc = scenario(10, 400, 0.25, 0.1);
        let a = simulate_dataset(&sc, 3).unwrap();
        let b = simulate_dataset(&sc, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dataset.subjects.len(), 10);
        for s in &a.dataset.subjects {
            assert_eq!(s.obs.shape(), (400, 3));
            assert_eq!(s.true_states.as_ref().unwrap().len(), 400);
        }
        let c = simulate_dataset(&sc, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_variances_share_parameters() {
        let sc = scenario(5, 50, 0.0, 0.0);
        let sim = simulate_dataset(&sc, 0).unwrap();
        for p in &sim.subjects[1..] {
            assert_eq!(p, &sim.subjects[0]);
        }
    }

    #[test]
    fn scenario_validation() {
        let mut sc = scenario(5, 50, 0.25, 0.1);
        sc.n_occasions = 1;
        assert!(sc.validate().is_err());
        let mut sc = scenario(5, 50, 0.25, 0.1);
        sc.zeta = -1.0;
        assert!(sc.validate().is_err());
    }
}
