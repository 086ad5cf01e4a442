//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conformal::{TargetSamplerConfig, Weighting};
use crate::contraction::{discrete_rate, Metric, PolicyDesigner};
use crate::error::{check_dim, Error, Result};
use crate::models::{Model, ModelSpec};
use crate::noise::NoiseSpec;
use crate::tightening::ConstraintSpec;
use crate::trajopt::SolverOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Master seed. Dataset, target and closed-loop streams are separated by domain.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub model: ModelSpec,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub sampler: SamplerSection,
    pub metric: MetricSection,
    #[serde(default)]
    pub controller: ControllerSection,
    pub calibration: CalibrationSection,
    pub problem: ProblemSection,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub simulation: SimulationSection,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    #[serde(default = "default_frequencies")]
    pub frequencies: Vec<f64>,
    /// One entry per control channel; defaults to 0.5 each.
    #[serde(default)]
    pub weight_std: Option<Vec<f64>>,
}

fn default_frequencies() -> Vec<f64> {
    vec![0.5, 1.0, 2.0, 3.0, 4.0]
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            frequencies: default_frequencies(),
            weight_std: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricSource {
    /// `M = scale·I`.
    #[default]
    Identity,
    /// `M` given row-major in `matrix`.
    Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSection {
    pub m_lo: f64,
    pub m_hi: f64,
    /// Continuous rate; converted with the model step. Exclusive with `lambda`.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub source: MetricSource,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub matrix: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

/// Diagonal TV-LQR weights; identity when omitted.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    #[serde(default)]
    pub q: Option<Vec<f64>>,
    #[serde(default)]
    pub r: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub k: usize,
    /// Must equal `p − 2δ̄` when given.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub delta_bar: f64,
    #[serde(default)]
    pub weighting: Weighting,
    /// Unnormalized per-rollout weights; uniform when omitted.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    /// Load the disturbance dataset instead of sampling it (relative to the config file).
    #[serde(default)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginMode {
    /// Every step uses the terminal margin `η`.
    #[default]
    Collapsed,
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSection {
    pub horizon: usize,
    pub x0: Vec<f64>,
    /// Diagonal of the step cost `uᵀ R u`.
    pub cost: Vec<f64>,
    #[serde(default)]
    pub margins: MarginMode,
    #[serde(default)]
    pub control_lipschitz: f64,
    #[serde(flatten)]
    pub constraints: ConstraintSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Defaults to the master seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Write per-run state traces.
    #[serde(default = "yes")]
    pub traces: bool,
}

fn default_runs() -> usize {
    200
}

fn yes() -> bool {
    true
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            runs: default_runs(),
            seed: None,
            traces: true,
        }
    }
}

fn diag(values: &[f64], n: usize, what: &'static str) -> Result<DMatrix<f64>> {
    check_dim(what, n, values.len())?;
    Ok(DMatrix::from_diagonal(&DVector::from_column_slice(values)))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses and validates `path`; a relative dataset path is resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(ds) = &cfg.calibration.dataset {
            if ds.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.calibration.dataset = Some(base.join(ds));
            }
        }
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn check_files(&self) -> Result<()> {
        match &self.calibration.dataset {
            Some(p) if !p.is_file() => Err(Error::Config(format!("dataset {} does not exist", p.display()))),
            _ => Ok(()),
        }
    }

    /// `δ = p − 2δ̄`.
    pub fn delta(&self) -> f64 {
        self.problem.constraints.risk - 2.0 * self.calibration.delta_bar
    }

    pub fn simulation_seed(&self) -> u64 {
        self.simulation.seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model.build()?;
        let p = self.problem.constraints.risk;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Config(format!("risk p = {p} outside (0, 1)")));
        }
        let db = self.calibration.delta_bar;
        let delta = self.delta();
        if !(db >= 0.0) || !(delta > 0.0) {
            return Err(Error::Config(format!("need 0 <= delta_bar < p/2, got delta_bar = {db}")));
        }
        if let Some(d) = self.calibration.delta {
            if (d - delta).abs() > 1e-12 {
                return Err(Error::Config(format!("delta = {d} must equal p - 2*delta_bar = {delta}")));
            }
        }
        if self.calibration.k == 0 {
            return Err(Error::Config("calibration needs k >= 1".into()));
        }
        if let Some(w) = &self.calibration.weights {
            check_dim("calibration weights", self.calibration.k, w.len())?;
            if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::Config("calibration weights must be finite and nonnegative".into()));
            }
        }
        if self.problem.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.simulation.runs == 0 {
            return Err(Error::Config("simulation needs at least one run".into()));
        }
        if !(self.problem.control_lipschitz >= 0.0) {
            return Err(Error::Config("control_lipschitz must be nonnegative".into()));
        }
        check_dim("x0", model.n_x(), self.problem.x0.len())?;
        check_dim("noise dimension", model.n_w(), self.noise.build()?.dim())?;
        self.problem.constraints.validate(model.n_x(), model.n_u())?;
        self.cost()?;
        self.designer()?;
        self.metric()?;
        self.sampler()?.validate(&*model)?;
        Ok(())
    }

    pub fn lambda(&self) -> Result<f64> {
        let m = &self.metric;
        match (m.gamma, m.lambda) {
            (Some(g), None) => discrete_rate(g, self.model_dt(), m.m_lo, m.m_hi),
            (None, Some(l)) => Ok(l),
            _ => Err(Error::Config("metric needs exactly one of gamma or lambda".into())),
        }
    }

    fn model_dt(&self) -> f64 {
        match &self.model {
            ModelSpec::Dubins { dt, .. } | ModelSpec::Linear { dt, .. } => *dt,
        }
    }

    fn n_x_u(&self) -> Result<(usize, usize)> {
        let m = self.model.build()?;
        Ok((m.n_x(), m.n_u()))
    }

    pub fn metric(&self) -> Result<Metric> {
        let (n_x, _) = self.n_x_u()?;
        let m = &self.metric;
        let lambda = self.lambda()?;
        match m.source {
            MetricSource::Identity => Metric::scaled_identity(n_x, m.scale, m.m_lo, m.m_hi, lambda),
            MetricSource::Matrix => {
                check_dim("metric matrix", n_x * n_x, m.matrix.len())?;
                Metric::from_spd(DMatrix::from_row_slice(n_x, n_x, &m.matrix), m.m_lo, m.m_hi, lambda)
            }
        }
    }

    pub fn designer(&self) -> Result<PolicyDesigner> {
        let (n_x, n_u) = self.n_x_u()?;
        let q = match &self.controller.q {
            Some(q) => diag(q, n_x, "controller q")?,
            None => DMatrix::identity(n_x, n_x),
        };
        let r = match &self.controller.r {
            Some(r) => diag(r, n_u, "controller r")?,
            None => DMatrix::identity(n_u, n_u),
        };
        PolicyDesigner::new(q, r)
    }

    pub fn cost(&self) -> Result<DMatrix<f64>> {
        let (_, n_u) = self.n_x_u()?;
        if self.problem.cost.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Config("cost weights must be positive".into()));
        }
        diag(&self.problem.cost, n_u, "cost")
    }

    pub fn sampler(&self) -> Result<TargetSamplerConfig> {
        let (_, n_u) = self.n_x_u()?;
        Ok(TargetSamplerConfig {
            frequencies: self.sampler.frequencies.clone(),
            weight_std: self.sampler.weight_std.clone().unwrap_or_else(|| vec![0.5; n_u]),
            horizon: self.problem.horizon,
            x0: self.problem.x0.clone(),
        })
    }

    pub fn build_model(&self) -> Result<std::sync::Arc<dyn Model>> {
        self.model.build()
    }
}
