//! Model types and the multinomial-logit link between transition-matrix rows
//! and their log-odds intercepts.
//!
//! State indices are zero-based in memory. Files and parameter names use
//! one-based indices (`emiss_mean.1.1` is the first variable, first state).
//! State 0 is the baseline category of every multinomial-logit row, so a row
//! of intercepts has `m - 1` entries that map to target states `1..m`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;

/// Tolerance on row sums of matrices produced by [`mnl_row`].
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Tolerance used when validating externally supplied stochastic matrices.
pub const VALIDATE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub m: usize,
    pub n_dep: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dep_labels: Option<Vec<String>>,
}

impl ModelSpec {
    pub fn new(m: usize, n_dep: usize) -> Result<Self> {
        let spec = ModelSpec {
            m,
            n_dep,
            state_labels: None,
            dep_labels: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_labels(mut self, states: Vec<String>, deps: Vec<String>) -> Result<Self> {
        self.state_labels = Some(states);
        self.dep_labels = Some(deps);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(invalid(format!("need at least 2 states, got {}", self.m)));
        }
        if self.n_dep < 1 {
            return Err(invalid("need at least 1 dependent variable"));
        }
        if let Some(labels) = &self.state_labels {
            if labels.len() != self.m {
                return Err(invalid(format!(
                    "{} state labels for {} states",
                    labels.len(),
                    self.m
                )));
            }
        }
        if let Some(labels) = &self.dep_labels {
            if labels.len() != self.n_dep {
                return Err(invalid(format!(
                    "{} variable labels for {} variables",
                    labels.len(),
                    self.n_dep
                )));
            }
        }
        Ok(())
    }

    pub fn state_label(&self, i: usize) -> String {
        match &self.state_labels {
            Some(l) => l[i].clone(),
            None => format!("state {}", i + 1),
        }
    }

    pub fn dep_label(&self, k: usize) -> String {
        match &self.dep_labels {
            Some(l) => l[k].clone(),
            None => format!("dep {}", k + 1),
        }
    }
}

/// Group-level parameters of the multilevel model.
///
/// Emission blocks are `[n_dep × m]`; transition blocks are `[m × (m - 1)]`
/// where column `j` holds the intercept for target state `j + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupParams {
    pub emiss_mean: Matrix,
    pub emiss_rand_var: Matrix,
    pub emiss_resid_var: Matrix,
    pub tpm_intercepts: Matrix,
    pub tpm_rand_var: Matrix,
}

impl GroupParams {
    /// Population parameters from group means and a group-level transition
    /// matrix, with every emission random variance set to `zeta`, every
    /// intercept variance set to `q_var` and every residual variance set to
    /// `resid_var`.
    pub fn from_population(
        means: &Matrix,
        tpm: &Matrix,
        zeta: f64,
        q_var: f64,
        resid_var: f64,
    ) -> Result<Self> {
        let (n_dep, m) = means.shape();
        if tpm.shape() != (m, m) {
            return Err(invalid(format!(
                "tpm shape {:?} does not match {} states",
                tpm.shape(),
                m
            )));
        }
        let mut intercepts = Matrix::zeros(m, m - 1);
        for i in 0..m {
            let row = intercepts_from_row(tpm.row(i))?;
            intercepts.row_mut(i).copy_from_slice(&row);
        }
        let group = GroupParams {
            emiss_mean: means.clone(),
            emiss_rand_var: Matrix::filled(n_dep, m, zeta),
            emiss_resid_var: Matrix::filled(n_dep, m, resid_var),
            tpm_intercepts: intercepts,
            tpm_rand_var: Matrix::filled(m, m - 1, q_var),
        };
        group.validate_nonneg()?;
        Ok(group)
    }

    pub fn m(&self) -> usize {
        self.emiss_mean.ncols()
    }

    pub fn n_dep(&self) -> usize {
        self.emiss_mean.nrows()
    }

    fn validate_shapes(&self) -> Result<()> {
        let (n_dep, m) = self.emiss_mean.shape();
        if m < 2 || n_dep < 1 {
            return Err(invalid(format!(
                "emiss_mean shape {:?} needs n_dep >= 1 and m >= 2",
                (n_dep, m)
            )));
        }
        for (name, mat, shape) in [
            ("emiss_rand_var", &self.emiss_rand_var, (n_dep, m)),
            ("emiss_resid_var", &self.emiss_resid_var, (n_dep, m)),
            ("tpm_intercepts", &self.tpm_intercepts, (m, m - 1)),
            ("tpm_rand_var", &self.tpm_rand_var, (m, m - 1)),
        ] {
            if mat.shape() != shape {
                return Err(invalid(format!(
                    "{name} has shape {:?}, expected {:?}",
                    mat.shape(),
                    shape
                )));
            }
            if !mat.all_finite() {
                return Err(invalid(format!("{name} has non-finite entries")));
            }
        }
        if !self.emiss_mean.all_finite() {
            return Err(invalid("emiss_mean has non-finite entries"));
        }
        Ok(())
    }

    /// Shapes must agree and all variances must be strictly positive.
    pub fn validate(&self) -> Result<()> {
        self.validate_shapes()?;
        for (name, mat) in self.variance_blocks() {
            if mat.iter().any(|&v| v <= 0.0) {
                return Err(invalid(format!("{name} must be strictly positive")));
            }
        }
        Ok(())
    }

    /// Like [`validate`](Self::validate) but admits zero variances, which the
    /// simulator uses for degenerate scenarios.
    pub fn validate_nonneg(&self) -> Result<()> {
        self.validate_shapes()?;
        for (name, mat) in self.variance_blocks() {
            if mat.iter().any(|&v| v < 0.0) {
                return Err(invalid(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    fn variance_blocks(&self) -> [(&'static str, &Matrix); 3] {
        [
            ("emiss_rand_var", &self.emiss_rand_var),
            ("emiss_resid_var", &self.emiss_resid_var),
            ("tpm_rand_var", &self.tpm_rand_var),
        ]
    }

    /// Group-level transition matrix implied by the intercepts.
    pub fn group_tpm(&self) -> Matrix {
        tpm_from_intercepts(&self.tpm_intercepts)
    }
}

/// Row-wise [`mnl_row`] over an `[m × (m - 1)]` intercept matrix.
pub fn tpm_from_intercepts(intercepts: &Matrix) -> Matrix {
    let m = intercepts.nrows();
    let mut tpm = Matrix::zeros(m, m);
    for i in 0..m {
        // intercepts produced inside the crate are always finite
        let row = mnl_row(intercepts.row(i)).expect("finite intercepts");
        tpm.row_mut(i).copy_from_slice(&row);
    }
    tpm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectParams {
    /// `[n_dep × m]` subject-specific means.
    pub subj_mean: Matrix,
    /// `[m × m]` subject-specific transition matrix.
    pub tpm: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSeries {
    /// `[N_T × n_dep]` observations.
    pub obs: Matrix,
    /// Zero-based state per occasion, when known.
    pub true_states: Option<Vec<usize>>,
}

impl SubjectSeries {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<SubjectSeries>,
}

impl Dataset {
    pub fn n_dep(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.obs.ncols())
    }

    pub fn has_states(&self) -> bool {
        !self.subjects.is_empty() && self.subjects.iter().all(|s| s.true_states.is_some())
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(invalid("dataset has no subjects"));
        }
        let n_dep = self.n_dep();
        if n_dep == 0 {
            return Err(invalid("dataset has no dependent variables"));
        }
        for (n, s) in self.subjects.iter().enumerate() {
            if s.obs.ncols() != n_dep {
                return Err(invalid(format!(
                    "subject {} has {} variables, expected {}",
                    n + 1,
                    s.obs.ncols(),
                    n_dep
                )));
            }
            if s.obs.nrows() == 0 {
                return Err(invalid(format!("subject {} has no occasions", n + 1)));
            }
            if !s.obs.all_finite() {
                return Err(invalid(format!(
                    "subject {} has non-finite observations",
                    n + 1
                )));
            }
            if let Some(states) = &s.true_states {
                if states.len() != s.obs.nrows() {
                    return Err(invalid(format!(
                        "subject {} has {} states for {} occasions",
                        n + 1,
                        states.len(),
                        s.obs.nrows()
                    )));
                }
                if let Some(bad) = states.iter().find(|&&st| st >= m) {
                    return Err(invalid(format!(
                        "subject {} has state {} outside 1..{}",
                        n + 1,
                        bad + 1,
                        m
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Multinomial-logit transform of one row of intercepts.
///
/// Entry 0 is the baseline category with numerator `exp(0)`. Computed with a
/// max shift so large intercepts do not overflow.
pub fn mnl_row(intercepts: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = intercepts.iter().find(|x| !x.is_finite()) {
        return Err(invalid(format!("non-finite intercept {bad}")));
    }
    let shift = intercepts.iter().copied().fold(0.0_f64, f64::max);
    let mut out = Vec::with_capacity(intercepts.len() + 1);
    out.push((-shift).exp());
    out.extend(intercepts.iter().map(|a| (a - shift).exp()));
    let total: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= total;
    }
    Ok(out)
}

/// Inverse of [`mnl_row`]: `alpha_j = ln(p_j / p_0)`.
pub fn intercepts_from_row(row: &[f64]) -> Result<Vec<f64>> {
    if row.len() < 2 {
        return Err(invalid("row needs at least two entries"));
    }
    if let Some(bad) = row.iter().find(|&&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::Domain(format!(
            "log-odds undefined for probability {bad}"
        )));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > VALIDATE_TOL {
        return Err(invalid(format!("row sums to {sum}, expected 1")));
    }
    let base = row[0].ln();
    Ok(row[1..].iter().map(|p| p.ln() - base).collect())
}

/// Outcome of [`validate_tpm`].
#[derive(Debug, Clone, PartialEq)]
pub struct TpmCheck {
    pub problems: Vec<String>,
}

impl TpmCheck {
    pub fn is_valid(&self) -> bool {
        self.problems.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(invalid(format!(
                "invalid tpm: {}",
                self.problems.join("; ")
            )))
        }
    }
}

pub fn validate_tpm(tpm: &Matrix) -> TpmCheck {
    let mut problems = Vec::new();
    if tpm.nrows() != tpm.ncols() {
        problems.push(format!("matrix is {:?}, not square", tpm.shape()));
        return TpmCheck { problems };
    }
    for (i, row) in tpm.rows().enumerate() {
        let sum: f64 = row.iter().sum();
        if !((sum - 1.0).abs() <= VALIDATE_TOL) {
            problems.push(format!("row {} sums to {sum}", i + 1));
        }
        for (j, &p) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                problems.push(format!("entry ({}, {}) = {p} outside [0, 1]", i + 1, j + 1));
            }
        }
    }
    TpmCheck { problems }
}

/// Validates an initial distribution vector.
pub fn validate_delta(delta: &[f64], m: usize) -> Result<()> {
    if delta.len() != m {
        return Err(invalid(format!(
            "delta has {} entries for {m} states",
            delta.len()
        )));
    }
    let sum: f64 = delta.iter().sum();
    if delta.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > VALIDATE_TOL {
        return Err(invalid(format!(
            "delta {delta:?} is not a probability vector"
        )));
    }
    Ok(())
}

/// Stationary distribution of a transition matrix, solving
/// `(I - Γᵀ + 1) π = 1`. Returns `None` when the system is singular, which
/// happens for reducible chains.
pub fn stationary_distribution(tpm: &Matrix) -> Option<Vec<f64>> {
    let m = tpm.nrows();
    let a = nalgebra::DMatrix::from_fn(m, m, |i, j| {
        let eye = if i == j { 1.0 } else { 0.0 };
        eye - tpm[(j, i)] + 1.0
    });
    let b = nalgebra::DVector::from_element(m, 1.0);
    let lu = a.full_piv_lu();
    // singular or nearly so: the chain has more than one closed class
    let pivots = lu.u().diagonal();
    if pivots.iter().any(|p| p.abs() < 1e-12) {
        return None;
    }
    let pi = lu.solve(&b)?;
    if pi.iter().any(|p| !p.is_finite() || *p < -1e-12) {
        return None;
    }
    let mut pi: Vec<f64> = pi.iter().map(|p| p.max(0.0)).collect();
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    Some(pi)
}

/// Population values used in the simulation study.
pub mod population {
    use crate::matrix::Matrix;

    pub const RESIDUAL_VARIANCE: f64 = 0.1;

    pub const SLEEP_STATES: [&str; 3] = ["Awake", "NREM", "REM"];
    pub const SLEEP_VARIABLES: [&str; 3] = ["EEG mean beta", "EOG median theta", "EOG min beta"];

    /// Group means, rows are variables and columns are Awake, NREM, REM.
    pub fn sleep_means() -> Matrix {
        Matrix::from_rows(&[
            vec![-0.360, -0.600, 0.700],
            vec![1.010, -1.310, -0.240],
            vec![0.750, -1.310, 0.005],
        ])
        .unwrap()
    }

    pub fn sleep_tpm() -> Matrix {
        Matrix::from_rows(&[
            vec![0.984, 0.003, 0.013],
            vec![0.007, 0.959, 0.034],
            vec![0.012, 0.021, 0.967],
        ])
        .unwrap()
    }

    pub fn baseline_means() -> Matrix {
        Matrix::from_rows(&[
            vec![-3.900, -1.000, 2.400],
            vec![3.050, -3.400, -0.500],
            vec![0.400, 3.500, -2.800],
        ])
        .unwrap()
    }

    /// Transition matrix of baseline scenarios 2 to 5, as tabulated.
    pub fn baseline_tpm() -> Matrix {
        Matrix::from_rows(&[
            vec![0.800, 0.100, 0.100],
            vec![0.150, 0.700, 0.150],
            vec![0.180, 0.640, 0.180],
        ])
        .unwrap()
    }
}
