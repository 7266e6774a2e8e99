//! Experiment config: one JSON document, validated before anything runs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use soc_lab::control::{ControlFamily, ControlModel, Feature};
use soc_lab::oracle::solve_riccati;
use soc_lab::problem::{
    make_ou_tilt_problem, scalar_geometric, scalar_lq, BundleEntry, ScalarGeometric, SignFlip,
};
use soc_lab::train::{LossChoice, TrainingConfig};
use soc_lab::{ProblemSpec, TimeGrid};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default = "CheckName::all")]
    pub checks: Vec<CheckName>,
    #[serde(default)]
    pub check_options: CheckOptions,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Flips the sign of one derivative entry; problem validation must catch it.
    #[serde(default)]
    pub corrupt_derivative: Option<String>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Lq {
        #[serde(default)]
        params: LqParams,
    },
    OuTilt {
        #[serde(default)]
        params: OuParams,
    },
    ScalarGeometric {
        #[serde(default)]
        params: GeometricParams,
    },
}

/// Scalar LQ; the defaults give `P(t) = 1/(1 + (T - t))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqParams {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub q_run: f64,
    pub q_term: f64,
    pub x0_mean: f64,
    pub x0_var: f64,
}

impl Default for LqParams {
    fn default() -> Self {
        Self {
            a: 0.0,
            b: 1.0,
            sigma: 1.0,
            q_run: 0.0,
            q_term: 1.0,
            x0_mean: 0.0,
            x0_var: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuParams {
    pub theta: f64,
    pub lambda: f64,
}

impl Default for OuParams {
    fn default() -> Self {
        Self {
            theta: 1.0,
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometricParams {
    pub nu: f64,
    pub coupling: f64,
    pub x0_mean: f64,
    pub x0_std: f64,
}

impl Default for GeometricParams {
    fn default() -> Self {
        let d = ScalarGeometric::default();
        Self {
            nu: d.nu,
            coupling: d.coupling,
            x0_mean: d.x0_mean,
            x0_std: d.x0_std,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    #[serde(default)]
    pub family: FamilyConfig,
    /// Standard deviation of the random initial `θ` (0 starts from zero).
    #[serde(default)]
    pub init_scale: f64,
    /// Load `θ` from a checkpoint instead of initializing.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            family: FamilyConfig::LinearFeedback,
            init_scale: 0.0,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilyConfig {
    #[default]
    LinearFeedback,
    FeatureLinear {
        features: Vec<Feature>,
    },
    OneHiddenLayer {
        width: usize,
    },
    /// The Riccati-optimal feedback (LQ problems only).
    Riccati,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub n_iters: usize,
    pub paths_per_iter: u64,
    pub step_size: f64,
    pub resample_noise_each_iter: bool,
    pub trust_region_radius: Option<f64>,
    pub loss: LossChoice,
    pub msa_exact: bool,
    pub momentum: f64,
    /// Fresh paths for the final checkpoint evaluation.
    pub eval_paths: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainingConfig::default();
        Self {
            n_iters: d.n_iters,
            paths_per_iter: d.paths_per_iter,
            step_size: d.step_size,
            resample_noise_each_iter: d.resample_noise_each_iter,
            trust_region_radius: d.trust_region_radius,
            loss: d.loss,
            msa_exact: d.msa_exact,
            momentum: d.momentum,
            eval_paths: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckName {
    AdjointFd,
    HessianFd,
    FirstVariation,
    Collapse,
    FeynmanKac,
    Smp,
    Memorylessness,
    Hjb,
}

impl CheckName {
    pub fn all() -> Vec<CheckName> {
        use CheckName::*;
        vec![
            AdjointFd,
            HessianFd,
            FirstVariation,
            Collapse,
            FeynmanKac,
            Smp,
            Memorylessness,
            Hjb,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            CheckName::AdjointFd => "adjoint_fd",
            CheckName::HessianFd => "hessian_fd",
            CheckName::FirstVariation => "first_variation",
            CheckName::Collapse => "collapse",
            CheckName::FeynmanKac => "feynman_kac",
            CheckName::Smp => "smp",
            CheckName::Memorylessness => "memorylessness",
            CheckName::Hjb => "hjb",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckOptions {
    /// Paths for the pathwise finite-difference checks.
    pub fd_paths: u64,
    pub fd_step: f64,
    /// Paths for the Monte Carlo checks.
    pub mc_paths: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            fd_paths: 16,
            fd_step: 1e-5,
            mc_paths: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub n_paths: u64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { n_paths: 8 }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Scalar LQ with every check enabled.
    pub fn default_lq() -> Self {
        Self {
            problem: ProblemConfig::Lq {
                params: LqParams::default(),
            },
            grid: GridConfig {
                horizon: 1.0,
                n_steps: 50,
            },
            control: ControlConfig {
                init_scale: 0.3,
                ..Default::default()
            },
            train: TrainSection::default(),
            checks: CheckName::all(),
            check_options: CheckOptions::default(),
            simulate: SimulateSection::default(),
            master_seed: 0,
            output_dir: default_output_dir(),
            corrupt_derivative: None,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.grid.horizon > 0.0 && self.grid.horizon.is_finite()) {
            return Err(config_err("grid.horizon must be positive and finite"));
        }
        if self.grid.n_steps == 0 {
            return Err(config_err("grid.n_steps must be at least 1"));
        }
        if !(self.control.init_scale >= 0.0 && self.control.init_scale.is_finite()) {
            return Err(config_err("control.init_scale must be non-negative"));
        }
        if let Some(name) = &self.corrupt_derivative {
            if BundleEntry::parse(name).is_none() {
                return Err(config_err(format!("unknown derivative entry {name:?}")));
            }
        }
        if self.check_options.fd_paths == 0 || self.check_options.mc_paths < 16 {
            return Err(config_err("check_options: need fd_paths ≥ 1 and mc_paths ≥ 16"));
        }
        if !(self.check_options.fd_step > 0.0) {
            return Err(config_err("check_options.fd_step must be positive"));
        }
        if self.simulate.n_paths == 0 {
            return Err(config_err("simulate.n_paths must be at least 1"));
        }
        self.training_config().validate().map_err(config_err)
    }

    pub fn training_config(&self) -> TrainingConfig {
        let t = &self.train;
        TrainingConfig {
            n_iters: t.n_iters,
            paths_per_iter: t.paths_per_iter,
            step_size: t.step_size,
            n_steps: self.grid.n_steps,
            master_seed: self.master_seed,
            resample_noise_each_iter: t.resample_noise_each_iter,
            trust_region_radius: t.trust_region_radius,
            loss: t.loss,
            msa_exact: t.msa_exact,
            momentum: t.momentum,
        }
    }

    pub fn time_grid(&self) -> Result<TimeGrid, CliError> {
        TimeGrid::new(self.grid.n_steps, self.grid.horizon).map_err(config_err)
    }

    /// The uncorrupted problem; parameter errors are config errors.
    pub fn base_problem(&self) -> Result<ProblemSpec, CliError> {
        let t = self.grid.horizon;
        match &self.problem {
            ProblemConfig::Lq { params: p } => {
                scalar_lq(p.a, p.b, p.sigma, p.q_run, p.q_term, t, p.x0_mean, p.x0_var)
            }
            ProblemConfig::OuTilt { params: p } => make_ou_tilt_problem(p.theta, p.lambda, t),
            ProblemConfig::ScalarGeometric { params: p } => scalar_geometric(
                ScalarGeometric {
                    nu: p.nu,
                    coupling: p.coupling,
                    x0_mean: p.x0_mean,
                    x0_std: p.x0_std,
                },
                t,
            ),
        }
        .map_err(config_err)
    }

    /// Applies `corrupt_derivative`; a rejected bundle is a check failure.
    pub fn problem(&self) -> Result<ProblemSpec, CliError> {
        let base = self.base_problem()?;
        let Some(entry) = self.corrupt_derivative.as_deref().and_then(BundleEntry::parse) else {
            return Ok(base);
        };
        base.with_model(Arc::new(SignFlip {
            inner: base.model().clone(),
            entry,
        }))
        .map_err(|e| CliError::Failure(format!("problem.validation: {e}")))
    }

    pub fn control(&self, problem: &ProblemSpec) -> Result<ControlModel, CliError> {
        let dims = problem.dims();
        let (d, k, t) = (dims.state, dims.control, self.grid.horizon);
        let family = match &self.control.family {
            FamilyConfig::LinearFeedback => ControlFamily::LinearFeedback {
                state_dim: d,
                control_dim: k,
                n_steps: self.grid.n_steps,
                horizon: t,
            },
            FamilyConfig::FeatureLinear { features } => ControlFamily::FeatureLinear {
                state_dim: d,
                control_dim: k,
                horizon: t,
                features: features.clone(),
            },
            FamilyConfig::OneHiddenLayer { width } => ControlFamily::OneHiddenLayer {
                state_dim: d,
                control_dim: k,
                horizon: t,
                width: *width,
            },
            FamilyConfig::Riccati => {
                let sol = solve_riccati(problem, &self.time_grid()?).map_err(config_err)?;
                return sol.optimal_control().map_err(config_err);
            }
        };
        if let Some(path) = &self.control.checkpoint {
            let loaded = ControlModel::load(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if loaded.family != family {
                return Err(config_err("checkpoint family does not match control.family"));
            }
            return Ok(loaded);
        }
        let zero = ControlModel::new(family).map_err(config_err)?;
        Ok(if self.control.init_scale > 0.0 {
            zero.randomized(self.master_seed, self.control.init_scale)
        } else {
            zero
        })
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.master_seed = s;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"problem": {"id": "lq"}, "grid": {"horizon": 1.0, "n_steps": 10}}"#,
        )
        .unwrap();
        assert_eq!(cfg.checks, CheckName::all());
        assert_eq!(cfg.control.family, FamilyConfig::LinearFeedback);
        assert_eq!(cfg.training_config().n_steps, 10);
    }

    #[test]
    fn shipped_configs_build() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut n = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            let problem = cfg.problem().unwrap();
            cfg.control(&problem).unwrap();
            cfg.training_config().validate().unwrap();
            n += 1;
        }
        assert!(n >= 3);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for text in [
            r#"{"problem": {"id": "lq"}, "grid": {"horizon": 1.0, "n_steps": 10}, "extra": 1}"#,
            r#"{"problem": {"id": "lq", "params": {"q": 1}}, "grid": {"horizon": 1.0, "n_steps": 10}}"#,
            r#"{"problem": {"id": "nope"}, "grid": {"horizon": 1.0, "n_steps": 10}}"#,
            r#"{"problem": {"id": "lq"}, "grid": {"horizon": 1.0, "n_steps": 10}, "control": {"family": {"kind": "spline"}}}"#,
            r#"{"problem": {"id": "lq"}, "grid": {"horizon": 1.0, "n_steps": 10}, "checks": ["vibes"]}"#,
        ] {
            assert!(matches!(ExperimentConfig::from_json(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = ExperimentConfig::default_lq();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn corrupted_bundle_names_validation() {
        let mut cfg = ExperimentConfig::default_lq();
        cfg.corrupt_derivative = Some("drift_u".into());
        match cfg.problem() {
            Err(CliError::Failure(msg)) => assert!(msg.starts_with("problem.validation")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
