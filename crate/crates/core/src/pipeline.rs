//! End-to-end experiment: calibration, planning, closed-loop evaluation,
//! the Gaussian baseline and an artifact audit. Every artifact is written
//! deterministically so reruns with the same config and seed hash identically.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::baseline::{baseline_plan_and_evaluate, BaselineEvaluation};
use crate::config::{ExperimentConfig, MarginMode};
use crate::conformal::{
    calibrate, min_calibration_size, quantile_schedule, weighted_quantile, Provenance, QuantileSchedule, ScoreTable,
    Weighting,
};
use crate::contraction::{Metric, MetricRecord, PolicyDesigner, TrackingPolicy};
use crate::error::{Error, Result};
use crate::io::{ensure_dir, hash_bytes, hash_json};
use crate::models::{Model, Trajectory};
use crate::montecarlo::{evaluate, Evaluation, McReport};
use crate::noise::{build_dataset, fmt17, parse_f64, read_dataset, write_dataset, DisturbanceDataset, NoiseDistribution};
use crate::trajopt::{solve, warm_start, PlannerProblem, SolveStatus, Tightening};

pub const DATASET_FILE: &str = "dataset.txt";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const ENERGIES_FILE: &str = "energies.csv";
pub const PLAN_FILE: &str = "plan.txt";
pub const REPORT_FILE: &str = "report.json";
pub const TRACES_FILE: &str = "traces.csv";
pub const FIGURE_FILE: &str = "figure.csv";
pub const TIMING_FILE: &str = "timing.json";
pub const BASELINE_DIR: &str = "baseline";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Conformal,
    Baseline,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Conformal => "conformal",
            Method::Baseline => "baseline",
        })
    }
}

/// Persisted calibration summary. `c` holds the audited schedule
/// `C_k = q_{1−δ+δ̄}(𝒮_k)`; the planner uses `step_margins` and `eta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub delta: f64,
    pub delta_bar: f64,
    pub alpha: f64,
    pub weighting: Weighting,
    pub weights: Vec<f64>,
    pub c: Vec<f64>,
    pub eta: f64,
    pub margin_mode: MarginMode,
    /// `η̄_1..η̄_{N−1}`.
    pub step_margins: Vec<f64>,
    pub collapse_not_conservative: bool,
    pub diverged_rollouts: usize,
    pub metric: MetricRecord,
    pub provenance: Provenance,
    pub dataset_hash: String,
    pub scores_hash: String,
    pub energies_hash: String,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub record: CalibrationRecord,
    pub table: ScoreTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanHeader {
    pub method: Method,
    #[serde(rename = "N")]
    pub n: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub dt: f64,
    pub delta: f64,
    pub risk: f64,
    pub objective: f64,
    pub status: SolveStatus,
    pub max_defect: f64,
    pub max_violation: f64,
    pub iterations: usize,
    pub outer_iterations: usize,
    /// Conformal margins `η̄_1..η̄_{N−1}` and `η`.
    pub margins: Option<Vec<f64>>,
    pub eta: Option<f64>,
    pub metric: Option<MetricRecord>,
    /// Baseline shapes `W_1..W_N`, row-major.
    pub shapes: Option<Vec<Vec<f64>>>,
    pub baseline_sweeps: Option<usize>,
    pub calibration_hash: Option<String>,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct Plan {
    pub header: PlanHeader,
    pub trajectory: Trajectory,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub method: Method,
    pub plan_hash: String,
    pub calibration_hash: Option<String>,
    pub config_hash: String,
    pub noise: crate::noise::NoiseSpec,
    pub risk: f64,
    pub delta: f64,
    /// `1 − α − 3·sqrt(α(1−α)/M)`, present with a coverage audit.
    pub coverage_floor: Option<f64>,
    /// Coverage is audited against the sets the planner tightened with; this is
    /// the minimum over `k` against the raw per-step `C_k` instead.
    pub raw_min_coverage: Option<f64>,
    pub summary: McReport,
}

/// Audit outcome for one artifact invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn fmt_err(e: impl std::fmt::Display) -> Error {
    Error::Format(e.to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<String> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(hash_bytes(bytes))
}

fn matrix_csv(header: &str, rows: &[Vec<f64>]) -> String {
    let mut s = String::new();
    s.push_str(header);
    s.push('\n');
    for (j, row) in rows.iter().enumerate() {
        let _ = write!(s, "{j}");
        for v in row {
            s.push(',');
            s.push_str(&fmt17(*v));
        }
        s.push('\n');
    }
    s
}

fn read_matrix_csv(text: &str, cols: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().skip(1).enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols + 1 || fields[0].trim() != i.to_string() {
            return Err(Error::Format(format!("malformed row {i}")));
        }
        rows.push(fields[1..].iter().map(|f| parse_f64(f)).collect::<Result<Vec<_>>>()?);
    }
    Ok(rows)
}

fn step_header(n: usize, prefix: &str) -> String {
    let cols: Vec<String> = (1..=n).map(|k| format!("{prefix}_{k}")).collect();
    format!("j,{}", cols.join(","))
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

impl Calibration {
    /// Writes `calibration.json`, `scores.csv` and `energies.csv`; returns the
    /// hash of the JSON file, which covers the CSVs through their hashes.
    pub fn write(&self, dir: &Path) -> Result<String> {
        let n = self.record.n;
        write_file(&dir.join(SCORES_FILE), matrix_csv(&step_header(n, "S"), &self.table.scores).as_bytes())?;
        write_file(&dir.join(ENERGIES_FILE), matrix_csv(&step_header(n, "V"), &self.table.energies).as_bytes())?;
        let json = serde_json::to_string_pretty(&self.record).map_err(fmt_err)?;
        write_file(&dir.join(CALIBRATION_FILE), json.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(dir.join(CALIBRATION_FILE))?;
        let record: CalibrationRecord = serde_json::from_slice(&bytes).map_err(fmt_err)?;
        let scores_text = fs::read_to_string(dir.join(SCORES_FILE))?;
        let energies_text = fs::read_to_string(dir.join(ENERGIES_FILE))?;
        if hash_bytes(scores_text.as_bytes()) != record.scores_hash
            || hash_bytes(energies_text.as_bytes()) != record.energies_hash
        {
            return Err(Error::Format("score table does not match the calibration record".into()));
        }
        let scores = read_matrix_csv(&scores_text, record.n)?;
        let energies = read_matrix_csv(&energies_text, record.n)?;
        if scores.len() != record.k || energies.len() != record.k {
            return Err(Error::Format(format!("expected {} score rows", record.k)));
        }
        let table = ScoreTable {
            scores,
            energies,
            weighting: record.weighting,
            provenance: record.provenance.clone(),
        };
        Ok((Self { record, table }, hash_bytes(&bytes)))
    }

    pub fn metric(&self) -> Result<Metric> {
        self.record.metric.to_metric()
    }

    /// Levels the planner actually tightened with: `η̄_1..η̄_{N−1}, η`.
    pub fn planner_schedule(&self) -> QuantileSchedule {
        let r = &self.record;
        let mut c = r.step_margins.clone();
        c.push(r.eta);
        QuantileSchedule {
            c,
            delta: r.delta,
            delta_bar: r.delta_bar,
            alpha: r.alpha,
            weights: r.weights.clone(),
            collapsed: r.margin_mode == MarginMode::Collapsed,
            collapse_not_conservative: r.collapse_not_conservative,
        }
    }

    pub fn tightening(&self) -> Result<Tightening> {
        let m = self.metric()?;
        Ok(Tightening::from_metric(m.m_inv(), m.m_lo(), &self.record.step_margins, self.record.eta))
    }
}

impl Plan {
    /// One JSON header line, then `k,x_1..x_n,u_1..u_m` (controls empty at `k = N`).
    pub fn to_text(&self) -> Result<String> {
        let h = &self.header;
        let mut s = serde_json::to_string(h).map_err(fmt_err)?;
        s.push('\n');
        let xs: Vec<String> = (1..=h.n_x).map(|i| format!("x_{i}")).collect();
        let us: Vec<String> = (1..=h.n_u).map(|i| format!("u_{i}")).collect();
        let _ = writeln!(s, "k,{},{}", xs.join(","), us.join(","));
        for (k, x) in self.trajectory.states.iter().enumerate() {
            let _ = write!(s, "{k}");
            for v in x.iter() {
                s.push(',');
                s.push_str(&fmt17(*v));
            }
            match self.trajectory.controls.get(k) {
                Some(u) => u.iter().for_each(|v| {
                    s.push(',');
                    s.push_str(&fmt17(*v));
                }),
                None => (0..h.n_u).for_each(|_| s.push(',')),
            }
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: PlanHeader =
            serde_json::from_str(lines.next().ok_or_else(|| Error::Format("empty plan file".into()))?)
                .map_err(fmt_err)?;
        lines.next().ok_or_else(|| Error::Format("missing plan CSV header".into()))?;
        let (n_x, n_u) = (header.n_x, header.n_u);
        let mut states = Vec::with_capacity(header.n + 1);
        let mut controls = Vec::with_capacity(header.n);
        for (k, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 1 + n_x + n_u || f[0] != k.to_string() {
                return Err(Error::Format(format!("malformed plan row {k}")));
            }
            let x = f[1..=n_x].iter().map(|v| parse_f64(v)).collect::<Result<Vec<_>>>()?;
            states.push(DVector::from_vec(x));
            if k < header.n {
                let u = f[1 + n_x..].iter().map(|v| parse_f64(v)).collect::<Result<Vec<_>>>()?;
                controls.push(DVector::from_vec(u));
            }
        }
        if states.len() != header.n + 1 {
            return Err(Error::Format(format!("plan has {} states, expected {}", states.len(), header.n + 1)));
        }
        Ok(Self {
            header,
            trajectory: Trajectory::new(states, controls)?,
            wall_time: 0.0,
        })
    }

    pub fn write(&self, path: &Path) -> Result<String> {
        write_file(path, self.to_text()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<(Self, String)> {
        let text = fs::read_to_string(path)?;
        Ok((Self::from_text(&text)?, hash_bytes(text.as_bytes())))
    }

    /// Tightening recorded in the header.
    pub fn tightening(&self) -> Result<Tightening> {
        let h = &self.header;
        match (&h.margins, h.eta, &h.metric, &h.shapes) {
            (Some(steps), Some(eta), Some(m), _) => {
                let m = m.to_metric()?;
                Ok(Tightening::from_metric(m.m_inv(), m.m_lo(), steps, eta))
            }
            (_, _, _, Some(shapes)) => Ok(Tightening::from_shapes(
                shapes.iter().map(|w| DMatrix::from_row_slice(h.n_x, h.n_x, w)).collect(),
            )),
            _ => Err(Error::Format("plan header carries no tightening".into())),
        }
    }
}

/// A validated configuration with its derived objects.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: Arc<dyn Model>,
    pub noise: NoiseDistribution,
    pub metric: Metric,
    pub designer: PolicyDesigner,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        config.check_files()?;
        Ok(Self {
            model: config.build_model()?,
            noise: config.noise.build()?,
            metric: config.metric()?,
            designer: config.designer()?,
            config,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(ExperimentConfig::load(path)?)
    }

    pub fn output_dir(&self) -> &Path {
        &self.config.output_dir
    }

    /// Hash of the configuration with the output directory blanked, so moving
    /// outputs does not change artifact contents.
    pub fn config_hash(&self) -> String {
        let mut c = self.config.clone();
        c.output_dir = PathBuf::new();
        hash_json(&c)
    }

    /// Loads the configured dataset or samples one from the noise model.
    pub fn dataset(&self) -> Result<DisturbanceDataset> {
        let cal = &self.config.calibration;
        let n = self.config.problem.horizon;
        let ds = match &cal.dataset {
            Some(p) => read_dataset(BufReader::new(fs::File::open(p)?))?,
            None => build_dataset(&self.noise, cal.k, n, self.config.seed)?,
        };
        if ds.len() != cal.k {
            return Err(Error::Config(format!("dataset has {} rollouts, config asks for {}", ds.len(), cal.k)));
        }
        if ds.horizon < n || ds.n_w != self.model.n_w() {
            return Err(Error::Config("dataset horizon or noise dimension does not match the model".into()));
        }
        Ok(ds)
    }

    fn weights(&self) -> Option<&[f64]> {
        self.config.calibration.weights.as_deref()
    }

    /// Per-step planning margins `η̄_k = q_{1−α/2}(𝒮_k)` for `k < N` (per-step mode)
    /// or `η̄_k = η` (collapsed).
    fn step_margins(&self, table: &ScoreTable, alpha: f64, eta: f64) -> Result<Vec<f64>> {
        let n = table.horizon();
        match self.config.problem.margins {
            MarginMode::Collapsed => Ok(vec![eta; n - 1]),
            MarginMode::PerStep => {
                let w = self.weights().map_or_else(|| vec![1.0; table.k()], <[f64]>::to_vec);
                (1..n)
                    .map(|k| {
                        let q = weighted_quantile(&table.column(k), &w, alpha / 2.0)?;
                        if q.is_finite() {
                            Ok(q)
                        } else {
                            Err(Error::InsufficientCalibration {
                                step: k,
                                samples: table.k(),
                                alpha: alpha / 2.0,
                                required: min_calibration_size(alpha / 2.0),
                            })
                        }
                    })
                    .collect()
            }
        }
    }

    pub fn calibrate(&self) -> Result<(Calibration, DisturbanceDataset)> {
        let cfg = &self.config;
        let ds = self.dataset()?;
        let sampler = cfg.sampler()?;
        let table = calibrate(
            &*self.model,
            &self.metric,
            &self.designer,
            &ds,
            &sampler,
            cfg.calibration.weighting,
            cfg.seed,
        )?;
        let delta = cfg.delta();
        let schedule = quantile_schedule(&table, delta, cfg.calibration.delta_bar, self.weights(), false)?;
        let eta = schedule.terminal();
        let step_margins = self.step_margins(&table, schedule.alpha, eta)?;
        let mut ds_bytes = Vec::new();
        write_dataset(&ds, &mut ds_bytes)?;
        let n = table.horizon();
        let record = CalibrationRecord {
            k: table.k(),
            n,
            delta,
            delta_bar: cfg.calibration.delta_bar,
            alpha: schedule.alpha,
            weighting: table.weighting,
            weights: schedule.weights.clone(),
            c: schedule.c.clone(),
            eta,
            margin_mode: cfg.problem.margins,
            step_margins,
            collapse_not_conservative: schedule.collapse_not_conservative,
            diverged_rollouts: table.diverged_rollouts(),
            metric: self.metric.record(),
            provenance: table.provenance.clone(),
            dataset_hash: hash_bytes(&ds_bytes),
            scores_hash: hash_bytes(matrix_csv(&step_header(n, "S"), &table.scores).as_bytes()),
            energies_hash: hash_bytes(matrix_csv(&step_header(n, "V"), &table.energies).as_bytes()),
            config_hash: self.config_hash(),
        };
        Ok((Calibration { record, table }, ds))
    }

    /// Calibrates and writes the dataset and calibration artifacts.
    pub fn run_calibrate(&self) -> Result<(Calibration, String)> {
        let (cal, ds) = self.calibrate()?;
        let dir = self.output_dir();
        ensure_dir(dir)?;
        let mut out = BufWriter::new(fs::File::create(dir.join(DATASET_FILE))?);
        write_dataset(&ds, &mut out)?;
        out.flush()?;
        let hash = cal.write(dir)?;
        Ok((cal, hash))
    }

    pub fn problem(&self, tightening: Tightening) -> Result<PlannerProblem> {
        let cfg = &self.config;
        let p = PlannerProblem {
            model: Arc::clone(&self.model),
            constraints: cfg.problem.constraints.clone(),
            tightening,
            cost: cfg.cost()?,
            x0: DVector::from_column_slice(&cfg.problem.x0),
            horizon: cfg.problem.horizon,
            delta: cfg.delta(),
            control_lipschitz: cfg.problem.control_lipschitz,
        };
        p.validate()?;
        Ok(p)
    }

    /// Solves the tightened problem from the geometric warm start.
    pub fn plan(&self, cal: &Calibration, calibration_hash: &str) -> Result<Plan> {
        if cal.record.n != self.config.problem.horizon {
            return Err(Error::Config(format!(
                "calibration horizon {} does not match config horizon {}",
                cal.record.n, self.config.problem.horizon
            )));
        }
        if cal.record.metric != self.metric.record() {
            return Err(Error::Config("calibration metric differs from the configured metric".into()));
        }
        let problem = self.problem(cal.tightening()?)?;
        let res = solve(&problem, &warm_start(&problem), &self.config.solver)?;
        let header = PlanHeader {
            method: Method::Conformal,
            n: problem.horizon,
            n_x: self.model.n_x(),
            n_u: self.model.n_u(),
            dt: self.model.dt(),
            delta: problem.delta,
            risk: problem.constraints.risk,
            objective: res.objective,
            status: res.status,
            max_defect: res.max_defect,
            max_violation: res.max_violation,
            iterations: res.iterations,
            outer_iterations: res.outer_iterations,
            margins: Some(cal.record.step_margins.clone()),
            eta: Some(cal.record.eta),
            metric: Some(cal.record.metric.clone()),
            shapes: None,
            baseline_sweeps: None,
            calibration_hash: Some(calibration_hash.to_string()),
            config_hash: self.config_hash(),
        };
        Ok(Plan {
            header,
            trajectory: res.trajectory,
            wall_time: res.wall_time,
        })
    }

    /// Plans and writes `plan.txt` and `timing.json`; returns the plan file hash.
    pub fn run_plan(&self, calibration_dir: &Path) -> Result<(Plan, String)> {
        let (cal, cal_hash) = Calibration::read(calibration_dir)?;
        let plan = self.plan(&cal, &cal_hash)?;
        let hash = plan.write(&self.output_dir().join(PLAN_FILE))?;
        write_timing(&self.output_dir().join(TIMING_FILE), plan.wall_time)?;
        Ok((plan, hash))
    }

    pub fn policy(&self, plan: &Plan) -> Result<TrackingPolicy> {
        self.designer.design(&*self.model, &plan.trajectory)
    }

    /// Closed-loop evaluation of `plan` under `dist`, with the coverage audit
    /// when a calibration is supplied.
    pub fn simulate_with(
        &self,
        plan: &Plan,
        plan_hash: &str,
        cal: Option<(&Calibration, &str)>,
        dist: &NoiseDistribution,
    ) -> Result<ReportRecord> {
        if !plan.header.status.is_usable() {
            return Err(Error::Infeasible(format!("plan status is {}", plan.header.status)));
        }
        let policy = self.policy(plan)?;
        let metric = cal.map(|(c, _)| c.metric()).transpose()?;
        let schedule = cal.map(|(c, _)| c.planner_schedule());
        let runs = self.config.simulation.runs;
        let summary = evaluate(&Evaluation {
            model: &*self.model,
            policy: &policy,
            dist,
            constraints: &self.config.problem.constraints,
            metric: metric.as_ref(),
            schedule: schedule.as_ref(),
            runs,
            seed: self.config.simulation_seed(),
            method: match plan.header.method {
                Method::Conformal => "conformal",
                Method::Baseline => "baseline",
            },
            keep_rollouts: true,
        })?;
        let raw_min_coverage = cal.map(|(c, _)| {
            let hits = |k: usize| {
                summary
                    .rollouts
                    .iter()
                    .filter(|r| r.diverged_at.is_none_or(|d| k < d) && r.energies[k] <= c.record.c[k - 1])
                    .count()
            };
            (1..=c.record.n).map(hits).min().unwrap_or(0) as f64 / runs as f64
        });
        let coverage_floor = schedule.as_ref().map(|s| {
            let a = s.alpha;
            1.0 - a - 3.0 * (a * (1.0 - a) / runs as f64).sqrt()
        });
        Ok(ReportRecord {
            method: plan.header.method,
            plan_hash: plan_hash.to_string(),
            calibration_hash: cal.map(|(_, h)| h.to_string()),
            config_hash: self.config_hash(),
            noise: dist.to_spec(),
            risk: self.config.problem.constraints.risk,
            delta: self.config.delta(),
            coverage_floor,
            raw_min_coverage,
            summary,
        })
    }

    pub fn simulate(&self, plan: &Plan, plan_hash: &str, cal: Option<(&Calibration, &str)>) -> Result<ReportRecord> {
        self.simulate_with(plan, plan_hash, cal, &self.noise)
    }

    /// Reads the plan (and the calibration it references, if present) from
    /// `dir`, simulates and writes the report, traces and figure data there.
    pub fn run_simulate(&self, dir: &Path, dist: Option<&NoiseDistribution>) -> Result<ReportRecord> {
        let (plan, plan_hash) = Plan::read(&dir.join(PLAN_FILE))?;
        let cal = match &plan.header.calibration_hash {
            Some(expected) => {
                let (cal, hash) = Calibration::read(dir)?;
                if &hash != expected {
                    return Err(Error::Format("plan references a different calibration".into()));
                }
                Some((cal, hash))
            }
            None => None,
        };
        let report = self.simulate_with(&plan, &plan_hash, cal.as_ref().map(|(c, h)| (c, h.as_str())), dist.unwrap_or(&self.noise))?;
        self.write_report(dir, &plan, &report)?;
        Ok(report)
    }

    pub fn write_report(&self, dir: &Path, plan: &Plan, report: &ReportRecord) -> Result<String> {
        ensure_dir(dir)?;
        if self.config.simulation.traces {
            write_file(&dir.join(TRACES_FILE), traces_csv(&report.summary).as_bytes())?;
        }
        let tightening = plan.tightening()?;
        write_file(&dir.join(FIGURE_FILE), figure_csv(plan, &tightening, &self.config.problem.constraints).as_bytes())?;
        let json = serde_json::to_string_pretty(report).map_err(fmt_err)?;
        write_file(&dir.join(REPORT_FILE), json.as_bytes())
    }

    /// Gaussian baseline: plan ↔ propagate fixed point, evaluated under the
    /// configured noise with the same closed-loop seeds.
    pub fn baseline(&self) -> Result<(Plan, ReportRecord)> {
        let ds = self.dataset()?;
        let template = self.problem(Tightening::none(self.model.n_x(), self.config.problem.horizon))?;
        let out = baseline_plan_and_evaluate(
            &template,
            &ds,
            &self.designer,
            &self.config.solver,
            BaselineEvaluation {
                truth: &self.noise,
                runs: self.config.simulation.runs,
                seed: self.config.simulation_seed(),
            },
        )?;
        let res = &out.plan;
        let header = PlanHeader {
            method: Method::Baseline,
            n: template.horizon,
            n_x: self.model.n_x(),
            n_u: self.model.n_u(),
            dt: self.model.dt(),
            delta: template.delta,
            risk: template.constraints.risk,
            objective: res.objective,
            status: res.status,
            max_defect: res.max_defect,
            max_violation: res.max_violation,
            iterations: res.iterations,
            outer_iterations: res.outer_iterations,
            margins: None,
            eta: None,
            metric: None,
            shapes: Some(out.shapes.iter().map(row_major).collect()),
            baseline_sweeps: Some(out.sweeps),
            calibration_hash: None,
            config_hash: self.config_hash(),
        };
        let plan = Plan {
            header,
            trajectory: res.trajectory.clone(),
            wall_time: res.wall_time,
        };
        let plan_hash = hash_bytes(plan.to_text()?.as_bytes());
        let report = ReportRecord {
            method: Method::Baseline,
            plan_hash,
            calibration_hash: None,
            config_hash: self.config_hash(),
            noise: self.noise.to_spec(),
            risk: template.constraints.risk,
            delta: template.delta,
            coverage_floor: None,
            raw_min_coverage: None,
            summary: out.report,
        };
        Ok((plan, report))
    }

    /// Runs the baseline and writes its plan and report under `baseline/`.
    pub fn run_baseline(&self) -> Result<(Plan, ReportRecord)> {
        let (plan, report) = self.baseline()?;
        let dir = self.output_dir().join(BASELINE_DIR);
        plan.write(&dir.join(PLAN_FILE))?;
        self.write_report(&dir, &plan, &report)?;
        Ok((plan, report))
    }

    /// Audits whatever artifacts exist in `dir`.
    pub fn verify(&self, dir: &Path) -> Result<Vec<Check>> {
        let mut checks = Vec::new();
        let mut push = |name: &str, passed: bool, detail: String| {
            checks.push(Check {
                name: name.to_string(),
                passed,
                detail,
            })
        };
        let cal = if dir.join(CALIBRATION_FILE).is_file() {
            match Calibration::read(dir) {
                Ok((cal, hash)) => {
                    push("calibration.readable", true, hash.clone());
                    let rebuilt = quantile_schedule(
                        &cal.table,
                        cal.record.delta,
                        cal.record.delta_bar,
                        Some(&cal.record.weights),
                        false,
                    )?;
                    push(
                        "calibration.schedule-reproduces",
                        rebuilt.c == cal.record.c && rebuilt.terminal() == cal.record.eta,
                        format!("eta = {}", cal.record.eta),
                    );
                    if cal.record.weighting == Weighting::Recursive {
                        let worst = cal
                            .table
                            .energies
                            .iter()
                            .zip(&cal.table.scores)
                            .flat_map(|(v, s)| v.iter().zip(s).map(|(v, s)| v - s))
                            .fold(f64::NEG_INFINITY, f64::max);
                        push("calibration.score-bounds-energy", worst <= 1e-9, format!("max V - S = {worst:.3e}"));
                    }
                    push(
                        "calibration.metric-matches-config",
                        cal.record.metric == self.metric.record(),
                        String::new(),
                    );
                    Some((cal, hash))
                }
                Err(e) => {
                    push("calibration.readable", false, e.to_string());
                    None
                }
            }
        } else {
            None
        };

        for (sub, method) in [(PathBuf::new(), Method::Conformal), (PathBuf::from(BASELINE_DIR), Method::Baseline)] {
            let plan_path = dir.join(&sub).join(PLAN_FILE);
            if !plan_path.is_file() {
                continue;
            }
            let tag = |s: &str| format!("{method}.{s}");
            let (plan, plan_hash) = match Plan::read(&plan_path) {
                Ok(p) => p,
                Err(e) => {
                    push(&tag("plan-readable"), false, e.to_string());
                    continue;
                }
            };
            if method == Method::Conformal {
                let linked = match (&plan.header.calibration_hash, &cal) {
                    (Some(h), Some((_, ch))) => h == ch,
                    _ => false,
                };
                push(&tag("plan-references-calibration"), linked, String::new());
            }
            let defect = plan.trajectory.max_defect(&*self.model);
            push(&tag("plan-defect"), defect <= 1e-6, format!("{defect:.3e}"));
            let violation = plan
                .tightening()
                .and_then(|t| self.problem(t))
                .map(|p| p.max_violation(&plan.trajectory));
            match violation {
                Ok(v) => push(&tag("plan-tightened-violation"), v <= 1e-6, format!("{v:.3e}")),
                Err(e) => push(&tag("plan-tightened-violation"), false, e.to_string()),
            }
            let x0_ok = plan.trajectory.states[0].as_slice() == self.config.problem.x0.as_slice();
            push(&tag("plan-initial-state"), x0_ok, String::new());

            let report_path = dir.join(&sub).join(REPORT_FILE);
            if !report_path.is_file() {
                continue;
            }
            let report: ReportRecord = serde_json::from_slice(&fs::read(&report_path)?).map_err(fmt_err)?;
            push(&tag("report-references-plan"), report.plan_hash == plan_hash, String::new());
            let p = report.risk;
            let s = &report.summary;
            if method == Method::Conformal {
                push(&tag("state-failure"), s.max_failure <= p, format!("max {:.4} at k={}", s.max_failure, s.worst_step));
                push(&tag("terminal-failure"), s.terminal_failure <= p, format!("{:.4}", s.terminal_failure));
                if let (Some(floor), Some(cov)) = (report.coverage_floor, s.min_coverage) {
                    push(&tag("coverage"), cov >= floor, format!("min {cov:.4} vs floor {floor:.4}"));
                }
            } else {
                push(
                    &tag("failure-recorded"),
                    true,
                    format!("max {:.4}, terminal {:.4}", s.max_failure, s.terminal_failure),
                );
            }
        }
        Ok(checks)
    }
}

fn write_timing(path: &Path, wall_time: f64) -> Result<()> {
    let json = serde_json::json!({ "plan_wall_time_s": wall_time });
    write_file(path, json.to_string().as_bytes())?;
    Ok(())
}

fn traces_csv(report: &McReport) -> String {
    let n_x = report.rollouts.first().map_or(0, |r| r.states[0].len());
    let xs: Vec<String> = (1..=n_x).map(|i| format!("x_{i}")).collect();
    let mut s = format!("run,k,{},V\n", xs.join(","));
    for (i, r) in report.rollouts.iter().enumerate() {
        for (k, x) in r.states.iter().enumerate() {
            let _ = write!(s, "{i},{k}");
            for v in x.iter() {
                s.push(',');
                s.push_str(&fmt17(*v));
            }
            s.push(',');
            if let Some(v) = r.energies.get(k) {
                s.push_str(&fmt17(*v));
            }
            s.push('\n');
        }
    }
    s
}

/// Two coordinates to draw: the first obstacle's plane, else the first two states.
fn plot_indices(constraints: &crate::tightening::ConstraintSpec, n_x: usize) -> (usize, usize) {
    match constraints.obstacles.first() {
        Some(o) if o.indices.len() >= 2 => (o.indices[0], o.indices[1]),
        _ => (0, 1.min(n_x - 1)),
    }
}

/// `k, x̄, semi-axes and orientation of W_k projected on the plot plane`.
fn figure_csv(plan: &Plan, tightening: &Tightening, constraints: &crate::tightening::ConstraintSpec) -> String {
    let n_x = plan.header.n_x;
    let (i, j) = plot_indices(constraints, n_x);
    let xs: Vec<String> = (1..=n_x).map(|i| format!("x_{i}")).collect();
    let mut s = format!("k,{},axis_major,axis_minor,angle\n", xs.join(","));
    for (k, x) in plan.trajectory.states.iter().enumerate() {
        let _ = write!(s, "{k}");
        for v in x.iter() {
            s.push(',');
            s.push_str(&fmt17(*v));
        }
        let (a, b, ang) = if k == 0 {
            (0.0, 0.0, 0.0)
        } else {
            let w = tightening.shape(k);
            let block = DMatrix::from_row_slice(2, 2, &[w[(i, i)], w[(i, j)], w[(j, i)], w[(j, j)]]);
            let eig = SymmetricEigen::new(block);
            let (hi, lo) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
            let v = eig.eigenvectors.column(hi);
            (
                eig.eigenvalues[hi].max(0.0).sqrt(),
                eig.eigenvalues[lo].max(0.0).sqrt(),
                v[1].atan2(v[0]),
            )
        };
        let _ = writeln!(s, ",{},{},{}", fmt17(a), fmt17(b), fmt17(ang));
    }
    s
}
