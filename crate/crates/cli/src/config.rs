//! Experiment configuration, read from TOML. Every field has a default, so a
//! document holding only `experiment = "single_run"` is complete. Unknown
//! keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdeorder::baselines::BaselineConfig;
use sdeorder::pkpd::{PKPDParams, Regime};
use sdeorder::retrace::RetraceConfig;
use sdeorder::simulator::{GenSpec, PermutationMode};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Table1,
    NoiseSweep,
    Pkpd,
    #[default]
    SingleRun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RetraceMle,
    RetraceOls,
    RetraceEm,
    MstMle,
    DptMle,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::RetraceMle, Method::RetraceOls, Method::RetraceEm, Method::MstMle, Method::DptMle];

    pub fn name(self) -> &'static str {
        match self {
            Method::RetraceMle => "retrace_mle",
            Method::RetraceOls => "retrace_ols",
            Method::RetraceEm => "retrace_em",
            Method::MstMle => "mst_mle",
            Method::DptMle => "dpt_mle",
        }
    }
}

/// Initial law of the simulated state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitConfig {
    /// Stationary Gaussian, zero mean.
    #[default]
    Stationary,
    /// `N(m·1/√d, s²·I)`.
    Gaussian { mean_norm: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PkpdConfig {
    pub n_subjects: usize,
    pub regime: Regime,
    pub mc_paths: usize,
    /// Evaluation index on the `n_steps + 1` grid; final point when absent.
    pub t_star: Option<usize>,
    pub params: PKPDParams,
}

impl Default for PkpdConfig {
    fn default() -> Self {
        Self { n_subjects: 1000, regime: Regime::Policy, mc_paths: 1024, t_star: None, params: PKPDParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub dims: usize,
    pub n_traj: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub noise_sigmas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub corruption: PermutationMode,
    pub init: InitConfig,
    pub generation: GenSpec,
    pub retrace: RetraceConfig,
    pub baseline: BaselineConfig,
    pub pkpd: PkpdConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::SingleRun,
            dims: 10,
            n_traj: 500,
            n_steps: 50,
            dt: 0.01,
            noise_sigmas: vec![0.0],
            seeds: (0..20).collect(),
            methods: Method::ALL.to_vec(),
            corruption: PermutationMode::PerTrajectory,
            init: InitConfig::Stationary,
            generation: GenSpec { min_irreversibility: 0.1, ..GenSpec::default() },
            retrace: RetraceConfig::default(),
            baseline: BaselineConfig::default(),
            pkpd: PkpdConfig::default(),
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    /// Every violated invariant, by field name.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.dims < 1 {
            v.push("dims: must be ≥ 1".to_string());
        }
        if self.n_traj < 2 {
            v.push("n_traj: must be ≥ 2".to_string());
        }
        if self.n_steps < 2 {
            v.push("n_steps: must be ≥ 2".to_string());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            v.push(format!("dt: must be positive, got {}", self.dt));
        }
        if self.seeds.is_empty() {
            v.push("seeds: must be non-empty".to_string());
        }
        if self.methods.is_empty() {
            v.push("methods: must be non-empty".to_string());
        }
        if self.noise_sigmas.is_empty() {
            v.push("noise_sigmas: must be non-empty".to_string());
        }
        if self.noise_sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            v.push("noise_sigmas: entries must be non-negative".to_string());
        }
        if let InitConfig::Gaussian { mean_norm, sd } = self.init {
            if !mean_norm.is_finite() || !(sd >= 0.0 && sd.is_finite()) {
                v.push("init: mean_norm must be finite and sd non-negative".to_string());
            }
        }
        let g = &self.generation;
        if !(g.lambda_min > 0.0 && g.lambda_max >= g.lambda_min) {
            v.push("generation: need 0 < lambda_min ≤ lambda_max".to_string());
        }
        if let Err(e) = self.retrace.validate() {
            v.push(format!("retrace: {e}"));
        }
        if let Err(e) = self.baseline.validate() {
            v.push(format!("baseline: {e}"));
        }
        if self.baseline.dpt_n_eigs >= self.n_steps {
            v.push("baseline.dpt_n_eigs: must be < n_steps".to_string());
        }
        if let Err(e) = self.pkpd.params.validate() {
            v.push(format!("pkpd.params: {e}"));
        }
        if self.pkpd.n_subjects < 4 {
            v.push("pkpd.n_subjects: must be ≥ 4".to_string());
        }
        if self.pkpd.mc_paths < 2 {
            v.push("pkpd.mc_paths: must be ≥ 2".to_string());
        }
        v
    }

    pub fn validate(&self) -> CliResult<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(v))
        }
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Parse { path: origin.to_path_buf(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    ExperimentConfig::from_toml_str(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> CliResult<ExperimentConfig> {
        ExperimentConfig::from_toml_str(s, Path::new("test.toml"))
    }

    #[test]
    fn minimal_expands_to_defaults() {
        assert_eq!(parse("experiment = \"single_run\"").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn negative_dt_names_field() {
        match parse("experiment = \"table1\"\ndt = -0.1\nseeds = []") {
            Err(CliError::Validation(v)) => {
                assert!(v.iter().any(|m| m.starts_with("dt:")));
                assert!(v.iter().any(|m| m.starts_with("seeds:")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_parse_error() {
        let err = parse("experiment = \"table1\"\nbogus = 3").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, CliError::Parse { .. }));
        assert!(msg.contains("bogus") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment = ExperimentKind::NoiseSweep;
        cfg.noise_sigmas = vec![0.1, 0.2];
        cfg.init = InitConfig::Gaussian { mean_norm: 3.0, sd: 0.5 };
        cfg.retrace.dt = Some(0.02);
        cfg.pkpd.t_star = Some(30);
        let again = parse(&cfg.to_toml_string()).unwrap();
        assert_eq!(again, cfg);
    }
}
