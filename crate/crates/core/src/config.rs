//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 42
//! out = "out"
//!
//! [scenario]
//! population = "baseline"
//! n_subjects = 20
//! n_occasions = 400
//! zeta = 0.25
//! q_var = 0.1
//!
//! [mcmc]
//! n_iter = 3250
//! burn_in = 1250
//! ```
//!
//! Matrices are written as lists of rows, e.g. `tpm = [[0.8, 0.2], [0.3, 0.7]]`.
//! Seeds must fit in a signed 64-bit integer, the TOML integer range.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{validate_delta, validate_tpm, ModelSpec};
use crate::ppc::PpcSettings;
use crate::sampler::{McmcConfig, PriorSettings};
use crate::simulate::{InitialChoice, ScenarioSpec};
use crate::study::{
    baseline_scenarios, build_scenario_grid, full_design, GridAxes, Population, StudySettings,
};

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationChoice {
    #[default]
    Sleep,
    Baseline,
    /// Means and transition matrix given explicitly.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub m: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dep_labels: Option<Vec<String>>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            m: 3,
            state_labels: None,
            dep_labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    #[serde(default = "default_scenario_id")]
    pub id: String,
    #[serde(default)]
    pub population: PopulationChoice,
    /// Overrides the population means, `[n_dep × m]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means: Option<Matrix>,
    /// Overrides the population transition matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tpm: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resid_var: Option<f64>,
    pub n_subjects: usize,
    pub n_occasions: usize,
    pub zeta: f64,
    pub q_var: f64,
    #[serde(default = "one")]
    pub n_sim: usize,
    /// Fixed initial distribution; the stationary distribution when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
}

fn default_scenario_id() -> String {
    "scenario".into()
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcSection {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
}

impl Default for McmcSection {
    fn default() -> Self {
        McmcSection {
            n_iter: 3250,
            burn_in: 1250,
            thin: 1,
            n_chains: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpcSection {
    pub n_replicates: usize,
    pub n_periods: usize,
    pub tpm_rand_var: f64,
}

impl Default for PpcSection {
    fn default() -> Self {
        let d = PpcSettings::default();
        PpcSection {
            n_replicates: d.n_replicates,
            n_periods: d.n_periods,
            tpm_rand_var: d.tpm_rand_var,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    /// 144 sleep scenarios plus the 10 baseline scenarios.
    #[default]
    Full,
    /// The baseline scenarios only.
    Baseline,
    /// A factorial grid over `axes` around `population`.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub design: Design,
    pub population: PopulationChoice,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axes: Option<GridAxes>,
    pub n_sim: usize,
    pub convergence_fraction: f64,
    pub rhat_threshold: f64,
    /// Restricts the design to these scenario ids.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenarios: Option<Vec<String>>,
}

impl Default for StudySection {
    fn default() -> Self {
        let s = StudySettings::default();
        StudySection {
            design: Design::Full,
            population: PopulationChoice::Sleep,
            axes: None,
            n_sim: 250,
            convergence_fraction: s.convergence_fraction,
            rhat_threshold: s.rhat_threshold,
            scenarios: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub chains: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallel: Option<usize>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSection>,
    #[serde(default)]
    pub mcmc: McmcSection,
    #[serde(default)]
    pub priors: PriorSettings,
    #[serde(default)]
    pub ppc: PpcSection,
    #[serde(default)]
    pub study: StudySection,
    #[serde(default)]
    pub data: DataSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            // the toml error names the offending key in its message
            config_err("config", msg)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err("config", e.to_string()))
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| {
            config_err(
                "seed",
                "a root seed is required (set `seed` or pass --seed)",
            )
        })
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn parallelism(&self) -> Result<usize> {
        match self.parallel {
            Some(0) => Err(config_err("parallel", "must be >= 1")),
            Some(p) => Ok(p),
            None => Ok(1),
        }
    }

    pub fn model_spec(&self, n_dep: usize) -> Result<ModelSpec> {
        let mut spec = ModelSpec::new(self.model.m, n_dep)
            .map_err(|e| config_err("model.m", e.to_string()))?;
        spec.state_labels = self.model.state_labels.clone();
        spec.dep_labels = self.model.dep_labels.clone();
        spec.validate()
            .map_err(|e| config_err("model", e.to_string()))?;
        Ok(spec)
    }

    pub fn mcmc_config(&self) -> Result<McmcConfig> {
        let s = &self.mcmc;
        if s.burn_in >= s.n_iter {
            return Err(config_err(
                "mcmc.burn_in",
                format!("must be less than mcmc.n_iter ({})", s.n_iter),
            ));
        }
        if s.thin < 1 {
            return Err(config_err("mcmc.thin", "must be >= 1"));
        }
        if s.n_chains < 1 {
            return Err(config_err("mcmc.n_chains", "must be >= 1"));
        }
        let mut c = McmcConfig::new(s.n_iter, s.burn_in, s.thin, self.require_seed()?);
        c.n_chains = s.n_chains;
        Ok(c)
    }

    pub fn validate_priors(&self) -> Result<()> {
        let p = &self.priors;
        for (name, v) in [
            ("k0", p.k0),
            ("nu", p.nu),
            ("v", p.v),
            ("alpha0", p.alpha0),
            ("beta0", p.beta0),
            ("tpm_int_prior_var", p.tpm_int_prior_var),
            ("tpm_var_prior_shape", p.tpm_var_prior_shape),
            ("tpm_var_prior_scale", p.tpm_var_prior_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(config_err(
                    &format!("priors.{name}"),
                    format!("must be positive, got {v}"),
                ));
            }
        }
        if let Some(mu0) = &p.mu0 {
            if mu0.ncols() != self.model.m {
                return Err(config_err(
                    "priors.mu0",
                    format!("needs {} columns", self.model.m),
                ));
            }
        }
        Ok(())
    }

    pub fn ppc_settings(&self) -> Result<PpcSettings> {
        let p = &self.ppc;
        if p.n_replicates < 1 {
            return Err(config_err("ppc.n_replicates", "must be >= 1"));
        }
        if p.n_periods < 1 {
            return Err(config_err("ppc.n_periods", "must be >= 1"));
        }
        if !(p.tpm_rand_var >= 0.0) {
            return Err(config_err("ppc.tpm_rand_var", "must be >= 0"));
        }
        Ok(PpcSettings {
            n_replicates: p.n_replicates,
            n_periods: p.n_periods,
            tpm_rand_var: p.tpm_rand_var,
            seed: self.require_seed()?,
        })
    }

    fn population(choice: PopulationChoice, field: &str) -> Result<Population> {
        match choice {
            PopulationChoice::Sleep => Ok(Population::sleep()),
            PopulationChoice::Baseline => Ok(Population::baseline()),
            PopulationChoice::Custom => Err(config_err(
                field,
                "a custom population needs explicit means and tpm",
            )),
        }
    }

    /// The scenario of the `[scenario]` section.
    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        let s = self
            .scenario
            .as_ref()
            .ok_or_else(|| config_err("scenario", "section is required"))?;
        let seed = self.require_seed()?;
        let mut pop = match (s.population, &s.means, &s.tpm) {
            (PopulationChoice::Custom, Some(means), Some(tpm)) => Population {
                name: "custom".into(),
                means: means.clone(),
                tpm: tpm.clone(),
                resid_var: crate::model::population::RESIDUAL_VARIANCE,
            },
            (choice, _, _) => Self::population(choice, "scenario.population")?,
        };
        if let Some(means) = &s.means {
            pop.means = means.clone();
        }
        if let Some(tpm) = &s.tpm {
            validate_tpm(tpm)
                .into_result()
                .map_err(|e| config_err("scenario.tpm", e.to_string()))?;
            pop.tpm = tpm.clone();
        }
        if pop.tpm.nrows() != pop.means.ncols() {
            return Err(config_err(
                "scenario.tpm",
                "must have one row per column of the means",
            ));
        }
        if let Some(r) = s.resid_var {
            if !(r >= 0.0) {
                return Err(config_err("scenario.resid_var", "must be >= 0"));
            }
            pop.resid_var = r;
        }
        for (field, ok) in [
            ("scenario.n_subjects", s.n_subjects >= 1),
            ("scenario.n_occasions", s.n_occasions >= 2),
            ("scenario.zeta", s.zeta >= 0.0),
            ("scenario.q_var", s.q_var >= 0.0),
            ("scenario.n_sim", s.n_sim >= 1),
        ] {
            if !ok {
                return Err(config_err(field, "out of range"));
            }
        }
        let initial = match &s.initial {
            None => InitialChoice::Stationary,
            Some(d) => {
                validate_delta(d, pop.means.ncols())
                    .map_err(|e| config_err("scenario.initial", e.to_string()))?;
                InitialChoice::Fixed(d.clone())
            }
        };
        let group = pop
            .group(s.zeta, s.q_var)
            .map_err(|e| config_err("scenario", e.to_string()))?;
        Ok(ScenarioSpec {
            id: s.id.clone(),
            group,
            n_subjects: s.n_subjects,
            n_occasions: s.n_occasions,
            zeta: s.zeta,
            q_var: s.q_var,
            n_sim: s.n_sim,
            seed,
            initial,
        })
    }

    /// Scenarios of the `[study]` section.
    pub fn study_scenarios(&self) -> Result<Vec<ScenarioSpec>> {
        let st = &self.study;
        let seed = self.require_seed()?;
        if st.n_sim < 2 {
            return Err(config_err(
                "study.n_sim",
                "metrics need at least 2 iterations",
            ));
        }
        let mut scenarios = match st.design {
            Design::Full => full_design(st.n_sim, seed)?,
            Design::Baseline => baseline_scenarios(st.n_sim, seed)?,
            Design::Grid => {
                let axes = st
                    .axes
                    .as_ref()
                    .ok_or_else(|| config_err("study.axes", "required for design = \"grid\""))?;
                let pop = Self::population(st.population, "study.population")?;
                build_scenario_grid(&pop, axes, st.n_sim, seed)
                    .map_err(|e| config_err("study.axes", e.to_string()))?
            }
        };
        if let Some(ids) = &st.scenarios {
            for id in ids {
                if !scenarios.iter().any(|s| &s.id == id) {
                    return Err(config_err(
                        "study.scenarios",
                        format!("unknown scenario id `{id}`"),
                    ));
                }
            }
            scenarios.retain(|s| ids.contains(&s.id));
        }
        Ok(scenarios)
    }

    pub fn study_settings(&self) -> Result<StudySettings> {
        let mc = self.mcmc_config()?;
        self.validate_priors()?;
        let s = StudySettings {
            n_iter: mc.n_iter,
            burn_in: mc.burn_in,
            thin: mc.thin,
            convergence_fraction: self.study.convergence_fraction,
            rhat_threshold: self.study.rhat_threshold,
            priors: self.priors.clone(),
        };
        if !(0.0..=1.0).contains(&s.convergence_fraction) {
            return Err(config_err(
                "study.convergence_fraction",
                "must be in [0, 1]",
            ));
        }
        if !(s.rhat_threshold > 1.0) {
            return Err(config_err("study.rhat_threshold", "must exceed 1"));
        }
        Ok(s)
    }

    pub fn dataset_path(&self) -> Result<PathBuf> {
        let p = self
            .data
            .dataset
            .clone()
            .ok_or_else(|| config_err("data.dataset", "a dataset path is required"))?;
        if !p.exists() {
            return Err(config_err(
                "data.dataset",
                format!("{} does not exist", p.display()),
            ));
        }
        Ok(p)
    }

    pub fn chain_paths(&self) -> Result<Vec<PathBuf>> {
        if self.data.chains.is_empty() {
            return Err(config_err(
                "data.chains",
                "at least one chain file is required",
            ));
        }
        for p in &self.data.chains {
            if !p.exists() {
                return Err(config_err(
                    "data.chains",
                    format!("{} does not exist", p.display()),
                ));
            }
        }
        Ok(self.data.chains.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
seed = 42
out = "runs/a"
parallel = 4

[model]
m = 3
state_labels = ["Awake", "NREM", "REM"]

[scenario]
id = "corner"
population = "sleep"
n_subjects = 10
n_occasions = 400
zeta = 0.25
q_var = 0.1
n_sim = 2

[mcmc]
n_iter = 20000
burn_in = 10000
thin = 5
n_chains = 2

[priors]
k0 = 1.0
tpm_int_prior_var = 10.0

[ppc]
n_replicates = 500

[study]
design = "grid"
population = "baseline"
n_sim = 5

[study.axes]
n_subjects = [10, 20]
n_occasions = [400]
zeta = [0.25, 0.5]
q_var = [0.1]
"#;

    #[test]
    fn parses_and_round_trips() {
        let c = RunConfig::from_toml_str(FULL).unwrap();
        assert_eq!(c.seed, Some(42));
        assert_eq!(c.mcmc_config().unwrap().stored_draws(), 2000);
        assert_eq!(c.study_scenarios().unwrap().len(), 4);
        let echo = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&echo).unwrap(), c);
    }

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(
            RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap(),
            c
        );
        assert_eq!(c.ppc.n_replicates, 2000);
        assert_eq!(c.ppc.n_periods, 3);
    }

    #[test]
    fn scenario_from_config() {
        let c = RunConfig::from_toml_str(FULL).unwrap();
        let s = c.scenario_spec().unwrap();
        assert_eq!((s.n_subjects, s.n_occasions, s.n_sim), (10, 400, 2));
        assert_eq!(s.group.emiss_rand_var[(0, 0)], 0.25);
    }

    #[test]
    fn missing_seed_names_field() {
        let text = FULL.replace("seed = 42\n", "");
        let c = RunConfig::from_toml_str(&text).unwrap();
        match c.scenario_spec() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "seed"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn field_level_errors() {
        let cases = [
            (
                FULL.replace("burn_in = 10000", "burn_in = 30000"),
                "mcmc.burn_in",
            ),
            (FULL.replace("thin = 5", "thin = 0"), "mcmc.thin"),
            (FULL.replace("k0 = 1.0", "k0 = -1.0"), "priors.k0"),
            (
                FULL.replace("n_replicates = 500", "n_replicates = 0"),
                "ppc.n_replicates",
            ),
        ];
        for (text, field) in cases {
            let c = RunConfig::from_toml_str(&text).unwrap();
            let err = c
                .mcmc_config()
                .and_then(|_| c.validate_priors())
                .and_then(|_| c.ppc_settings().map(|_| ()))
                .unwrap_err();
            match err {
                Error::Config { field: f, .. } => assert_eq!(f, field),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::from_toml_str("seed = 1\n[mcmc]\nnum_iter = 5\n"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn custom_population() {
        let text = r#"
seed = 1
[scenario]
population = "custom"
means = [[0.0, 5.0]]
tpm = [[0.9, 0.1], [0.2, 0.8]]
n_subjects = 2
n_occasions = 10
zeta = 0.0
q_var = 0.0
"#;
        let s = RunConfig::from_toml_str(text)
            .unwrap()
            .scenario_spec()
            .unwrap();
        assert_eq!(s.group.m(), 2);
        let bad = text.replace("[0.2, 0.8]", "[0.2, 0.9]");
        match RunConfig::from_toml_str(&bad).unwrap().scenario_spec() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "scenario.tpm"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scenario_filter() {
        let text =
            "seed = 1\n[study]\ndesign = \"baseline\"\nn_sim = 3\nscenarios = [\"baseline_2A\"]\n";
        let c = RunConfig::from_toml_str(text).unwrap();
        let s = c.study_scenarios().unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].n_subjects, 40);
        let bad = text.replace("baseline_2A", "nope");
        assert!(RunConfig::from_toml_str(&bad)
            .unwrap()
            .study_scenarios()
            .is_err());
    }
}
