//! Batch experiments on the double integrator and their artifact checks.
//!
//! Each experiment writes per-run CSVs, aggregate CSVs (means over repeats)
//! and a `manifest.json` listing every file with its SHA-256, the resolved
//! configuration and the seeds used. Nothing time-dependent is written, so a
//! rerun with the same configuration reproduces every byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bias_analysis::{average_heatmaps, bias_report, correlation_heatmap, BiasReport, CorrelationHeatmap};
use crate::controllers::{
    realize_plan, run_receding_horizon, DeepcController, GammaController, Method, Planner, PredictorController,
    RecedingHorizonRun, TrackingCost, TrackingSummary,
};
use crate::error::{Error, Result};
use crate::estimators::{estimate_innovations, fit_all, fit_transient_bank, FitOptions, FittedModels};
use crate::hankel::{build_hankel_set, hankel_matrix, matrix_from_csv, matrix_to_csv};
use crate::linalg::{coefficients_from_r, vstack, TriangularAccumulator};
use crate::lti_sim::{
    make_double_integrator, parse_key_values, simulate_with_states, DoubleIntegratorConfig, FeedbackLaw, LoopMode,
    LtiSystem, SimulationRecord, TrajectoryData,
};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Fig1,
    Fig2,
    Fig3,
    Fig4,
    Custom,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Fig1 => "fig1",
            ExperimentKind::Fig2 => "fig2",
            ExperimentKind::Fig3 => "fig3",
            ExperimentKind::Fig4 => "fig4",
            ExperimentKind::Custom => "custom",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig1" => Ok(ExperimentKind::Fig1),
            "fig2" => Ok(ExperimentKind::Fig2),
            "fig3" => Ok(ExperimentKind::Fig3),
            "fig4" => Ok(ExperimentKind::Fig4),
            "custom" => Ok(ExperimentKind::Custom),
            other => Err(Error::parse("experiment", other)),
        }
    }
}

/// A 2norm-DDPC or DeePC entry carries its regularization weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodSpec {
    pub method: Method,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub repeats: usize,
    pub seed: u64,
    /// Hankel column counts for the asymptotics study.
    pub n_grid: Vec<usize>,
    /// Regularization sweep for the tracking study.
    pub lambda_grid: Vec<f64>,
    pub past: usize,
    pub future: usize,
    pub dt: f64,
    pub noise_var: f64,
    pub excitation_std: f64,
    /// Output-feedback gain of the closed-loop law (one row, `q` entries).
    pub gain: Vec<f64>,
    pub burn_in: usize,
    /// Training trajectory length for the control studies.
    pub train_len: usize,
    /// Hankel column count for the correlation study.
    pub heatmap_cols: usize,
    pub sim_steps: usize,
    /// 2norm-DDPC weight of the plan-realization study.
    pub plan_lambda: f64,
    pub squared_reg: bool,
    pub modes: Vec<LoopMode>,
    /// Methods of the custom pipeline; weighted methods are expanded over
    /// `lambda_grid`.
    pub methods: Vec<Method>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        let noise_var = match kind {
            ExperimentKind::Fig1 | ExperimentKind::Fig2 => 4e-4,
            _ => 1e-4,
        };
        Self {
            experiment: kind,
            repeats: 100,
            seed: 0,
            n_grid: vec![250, 500, 1000, 2000, 4000, 8000],
            lambda_grid: vec![0.001, 0.01, 0.1, 1.0, 10.0, 100.0],
            past: 10,
            future: 10,
            dt: 0.1,
            noise_var,
            excitation_std: 0.1,
            gain: vec![-2.5, -3.0],
            burn_in: 200,
            train_len: 1000,
            heatmap_cols: 1000,
            sim_steps: 60,
            plan_lambda: 0.1,
            squared_reg: true,
            modes: vec![LoopMode::OpenLoop, LoopMode::ClosedLoop],
            methods: vec![Method::Spc, Method::Tpc, Method::TwoNormDdpc],
            output_dir: PathBuf::from(format!("out/{}", kind.as_str())),
        }
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| Error::parse(format!("config value for {key}"), format!("{value}: {e}"));
        let v = value.trim();
        match key.trim() {
            "experiment" => self.experiment = v.parse()?,
            "repeats" => self.repeats = v.parse().map_err(|e| bad(&e))?,
            "seed" => self.seed = v.parse().map_err(|e| bad(&e))?,
            "n_grid" => self.n_grid = parse_csv_list(v).map_err(|e| bad(&e))?,
            "lambda_grid" => self.lambda_grid = parse_csv_list(v).map_err(|e| bad(&e))?,
            "past" => self.past = v.parse().map_err(|e| bad(&e))?,
            "future" => self.future = v.parse().map_err(|e| bad(&e))?,
            "dt" => self.dt = v.parse().map_err(|e| bad(&e))?,
            "noise_var" => self.noise_var = v.parse().map_err(|e| bad(&e))?,
            "excitation_std" => self.excitation_std = v.parse().map_err(|e| bad(&e))?,
            "gain" => self.gain = parse_csv_list(v).map_err(|e| bad(&e))?,
            "burn_in" => self.burn_in = v.parse().map_err(|e| bad(&e))?,
            "train_len" => self.train_len = v.parse().map_err(|e| bad(&e))?,
            "heatmap_cols" => self.heatmap_cols = v.parse().map_err(|e| bad(&e))?,
            "sim_steps" => self.sim_steps = v.parse().map_err(|e| bad(&e))?,
            "plan_lambda" => self.plan_lambda = v.parse().map_err(|e| bad(&e))?,
            "squared_reg" => self.squared_reg = v.parse().map_err(|e| bad(&e))?,
            "modes" => {
                self.modes = v.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?;
            }
            "methods" => {
                self.methods = v.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?;
            }
            "output_dir" => self.output_dir = PathBuf::from(v),
            other => return Err(Error::parse("config key", other)),
        }
        Ok(())
    }

    /// Parses a flat `key=value` file. The experiment kind (from the file, or
    /// `kind` when given) selects the defaults the remaining keys override.
    pub fn from_text(text: &str, kind: Option<ExperimentKind>) -> Result<Self> {
        let pairs = parse_key_values(text)?;
        let file_kind = pairs
            .iter()
            .find(|(k, _)| k == "experiment")
            .map(|(_, v)| v.parse())
            .transpose()?;
        let kind = kind
            .or(file_kind)
            .ok_or_else(|| Error::InvalidConfig("no experiment kind given".into()))?;
        let mut cfg = Self::defaults(kind);
        // noise defaults depend on the kind; apply it first
        for (k, v) in &pairs {
            if k != "experiment" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.repeats == 0 {
            return fail("repeats must be at least 1");
        }
        if self.past == 0 || self.future == 0 {
            return fail("horizons must be positive");
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return fail("n_grid entries must be positive");
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return fail("lambda_grid entries must be positive");
        }
        if !(self.plan_lambda > 0.0) {
            return fail("plan_lambda must be positive");
        }
        if !(self.dt > 0.0) || !(self.noise_var >= 0.0) || !(self.excitation_std > 0.0) {
            return fail("dt and excitation_std must be positive, noise_var nonnegative");
        }
        if self.gain.len() != 2 {
            return fail("gain needs one entry per output (2)");
        }
        if self.modes.is_empty() || self.methods.is_empty() {
            return fail("modes and methods must be non-empty");
        }
        if self.sim_steps == 0 || self.heatmap_cols == 0 {
            return fail("sim_steps and heatmap_cols must be positive");
        }
        if self.train_len < self.past + self.future {
            return fail("train_len shorter than the horizons");
        }
        Ok(())
    }

    /// Every setting except the output location, in a fixed order.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("experiment", self.experiment.as_str().into());
        put("repeats", self.repeats.to_string());
        put("seed", self.seed.to_string());
        put("n_grid", self.n_grid.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","));
        put("lambda_grid", list(&self.lambda_grid));
        put("past", self.past.to_string());
        put("future", self.future.to_string());
        put("dt", self.dt.to_string());
        put("noise_var", self.noise_var.to_string());
        put("excitation_std", self.excitation_std.to_string());
        put("gain", list(&self.gain));
        put("burn_in", self.burn_in.to_string());
        put("train_len", self.train_len.to_string());
        put("heatmap_cols", self.heatmap_cols.to_string());
        put("sim_steps", self.sim_steps.to_string());
        put("plan_lambda", self.plan_lambda.to_string());
        put("squared_reg", self.squared_reg.to_string());
        put("modes", self.modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","));
        put("methods", self.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","));
        m
    }

    pub fn to_text(&self) -> String {
        self.resolved().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    pub fn system(&self) -> Result<LtiSystem> {
        make_double_integrator(DoubleIntegratorConfig {
            dt: self.dt,
            noise_var: self.noise_var,
        })
    }

    pub fn law(&self, mode: LoopMode) -> Result<FeedbackLaw> {
        let exc = DVector::from_element(1, self.excitation_std);
        match mode {
            LoopMode::OpenLoop => FeedbackLaw::open_loop(2, exc),
            LoopMode::ClosedLoop => FeedbackLaw::closed_loop(DMatrix::from_row_slice(1, 2, &self.gain), exc),
        }
    }

    /// Burn-in applied before recording; open-loop runs start at rest.
    pub fn burn_in_for(&self, mode: LoopMode) -> usize {
        match mode {
            LoopMode::OpenLoop => 0,
            LoopMode::ClosedLoop => self.burn_in,
        }
    }

    /// Simulates a training trajectory of `steps` samples.
    pub fn simulate(&self, mode: LoopMode, steps: usize, seed: u64) -> Result<SimulationRecord> {
        simulate_with_states(
            &self.system()?,
            &self.law(mode)?,
            steps,
            self.burn_in_for(mode),
            &DVector::zeros(2),
            seed,
        )
    }

    /// Planners of the custom pipeline with weights expanded over `lambda_grid`.
    pub fn method_specs(&self) -> Vec<MethodSpec> {
        let mut out = Vec::new();
        for m in &self.methods {
            match m {
                Method::Spc | Method::Tpc => out.push(MethodSpec { method: *m, lambda: 0.0 }),
                Method::TwoNormDdpc | Method::Deepc => {
                    out.extend(self.lambda_grid.iter().map(|l| MethodSpec { method: *m, lambda: *l }))
                }
            }
        }
        out
    }
}

fn parse_csv_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, T::Err> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.trim().parse()).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Deterministic per-task seed: SplitMix64 of the base seed and a task tag.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mode_stream(mode: LoopMode) -> u64 {
    match mode {
        LoopMode::OpenLoop => 1,
        LoopMode::ClosedLoop => 2,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailure {
    pub context: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub config: BTreeMap<String, String>,
    pub config_hash: String,
    /// Training seeds, in run order.
    pub seeds: Vec<u64>,
    pub files: Vec<ManifestEntry>,
    pub failures: Vec<RunFailure>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse("manifest", e.to_string()))
    }
}

/// Collects output files and their hashes.
struct Outputs {
    dir: PathBuf,
    files: Vec<ManifestEntry>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, content: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        self.files.push(ManifestEntry {
            path: name.to_string(),
            sha256: sha256_hex(content.as_bytes()),
        });
        Ok(())
    }
}

/// Runs the configured experiment and writes its artifacts and manifest.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let mut out = Outputs::new(&cfg.output_dir)?;
    let mut seeds = Vec::new();
    let mut failures = Vec::new();
    match cfg.experiment {
        ExperimentKind::Fig1 => fig1(cfg, &mut out, &mut seeds, &mut failures)?,
        ExperimentKind::Fig2 => fig2(cfg, &mut out, &mut seeds, &mut failures)?,
        ExperimentKind::Fig3 => fig3(cfg, &mut out, &mut seeds, &mut failures)?,
        ExperimentKind::Fig4 => fig4(cfg, &mut out, &mut seeds, &mut failures)?,
        ExperimentKind::Custom => custom(cfg, &mut out, &mut seeds, &mut failures)?,
    }
    let manifest = Manifest {
        experiment: cfg.experiment.as_str().to_string(),
        config: cfg.resolved(),
        config_hash: cfg.config_hash(),
        seeds,
        files: out.files,
        failures,
    };
    let path = cfg.output_dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn record_failure(failures: &mut Vec<RunFailure>, context: String, seed: u64, e: Error) {
    failures.push(RunFailure {
        context,
        seed,
        error: e.to_string(),
    });
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn fig1(cfg: &ExperimentConfig, out: &mut Outputs, seeds: &mut Vec<u64>, failures: &mut Vec<RunFailure>) -> Result<()> {
    let steps = cfg.heatmap_cols + cfg.past + cfg.future - 1;
    let mut runs = String::from("mode,seed,max_abs,max_abs_causal,max_abs_anticausal\n");
    let mut summary = String::from("mode,count,max_abs,max_abs_causal,max_abs_anticausal,zero_variance_rows\n");
    for &mode in &cfg.modes {
        let mut maps: Vec<CorrelationHeatmap> = Vec::new();
        for r in 0..cfg.repeats {
            let seed = derive_seed(cfg.seed, mode_stream(mode), r as u64);
            seeds.push(seed);
            let res = (|| -> Result<CorrelationHeatmap> {
                let data = cfg.simulate(mode, steps, seed)?.data;
                let bank = fit_transient_bank(&data, cfg.past, cfg.future, FitOptions::default())?;
                let innov = estimate_innovations(&bank, &data)?;
                let h = build_hankel_set(&data, cfg.past, cfg.future)?;
                correlation_heatmap(&innov, &h)
            })();
            match res {
                Ok(map) => {
                    let _ = writeln!(
                        runs,
                        "{},{},{},{},{}",
                        mode.as_str(),
                        seed,
                        map.max_abs(),
                        map.max_abs_where(true),
                        map.max_abs_where(false)
                    );
                    maps.push(map);
                }
                Err(e) => record_failure(failures, format!("fig1 {}", mode.as_str()), seed, e),
            }
        }
        if maps.is_empty() {
            continue;
        }
        let avg = average_heatmaps(&maps)?;
        out.write(&format!("fig1_heatmap_{}.csv", mode.as_str()), &avg.to_csv())?;
        let zero: Vec<String> = avg.zero_variance_innovations.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{}",
            mode.as_str(),
            avg.count,
            avg.max_abs(),
            avg.max_abs_where(true),
            avg.max_abs_where(false),
            zero.join(";")
        );
    }
    out.write("fig1_runs.csv", &runs)?;
    out.write("fig1_summary.csv", &summary)
}

fn fig2(cfg: &ExperimentConfig, out: &mut Outputs, seeds: &mut Vec<u64>, failures: &mut Vec<RunFailure>) -> Result<()> {
    let mut runs = String::from(BiasReport::CSV_HEADER);
    runs.push('\n');
    let mut agg = String::from("N,mode,count,sigma_max_subspace,expected_bias_sq,sigma_max_ddpc,sigma_max_optimism\n");
    for &mode in &cfg.modes {
        for (gi, &n) in cfg.n_grid.iter().enumerate() {
            let steps = n + cfg.past + cfg.future - 1;
            let mut cols: [Vec<f64>; 4] = Default::default();
            for r in 0..cfg.repeats {
                let seed = derive_seed(cfg.seed, mode_stream(mode) + 16 * (gi as u64 + 1), r as u64);
                seeds.push(seed);
                let res = (|| -> Result<BiasReport> {
                    let data = cfg.simulate(mode, steps, seed)?.data;
                    bias_report(&fit_all(&data, cfg.past, cfg.future, FitOptions::default())?)
                })();
                match res {
                    Ok(rep) => {
                        runs.push_str(&rep.csv_row(mode.as_str(), seed));
                        runs.push('\n');
                        cols[0].push(rep.sigma_max_subspace);
                        cols[1].push(rep.expected_bias_sq);
                        cols[2].push(rep.sigma_max_ddpc);
                        cols[3].push(rep.sigma_max_optimism);
                    }
                    Err(e) => record_failure(failures, format!("fig2 {} N={n}", mode.as_str()), seed, e),
                }
            }
            let _ = writeln!(
                agg,
                "{n},{},{},{},{},{},{}",
                mode.as_str(),
                cols[0].len(),
                mean(&cols[0]),
                mean(&cols[1]),
                mean(&cols[2]),
                mean(&cols[3])
            );
        }
    }
    out.write("fig2_runs.csv", &runs)?;
    out.write("fig2_aggregate.csv", &agg)
}

/// Planners of the plan-realization and tracking studies.
fn study_planners(
    cfg: &ExperimentConfig,
    models: &FittedModels,
    specs: &[MethodSpec],
) -> Result<Vec<(MethodSpec, Box<dyn Planner>)>> {
    let cost = TrackingCost::double_integrator(cfg.future);
    let mut out: Vec<(MethodSpec, Box<dyn Planner>)> = Vec::new();
    for spec in specs {
        let p: Box<dyn Planner> = match spec.method {
            Method::Spc => Box::new(PredictorController::spc(&models.subspace, cost.clone())?),
            Method::Tpc => Box::new(PredictorController::tpc(&models.bank, cost.clone())?),
            Method::TwoNormDdpc => Box::new(GammaController::new(&models.lq, cost.clone(), spec.lambda, cfg.squared_reg)?),
            Method::Deepc => Box::new(DeepcController::new(&models.hankel, cost.clone(), spec.lambda)?),
        };
        out.push((*spec, p));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanRealization {
    pub spec: MethodSpec,
    pub u_f: DVector<f64>,
    pub planned: DMatrix<f64>,
    pub realized: DMatrix<f64>,
}

impl PlanRealization {
    pub fn planned_terminal(&self) -> f64 {
        self.planned[(self.planned.nrows() - 1, 0)]
    }
    pub fn realized_terminal(&self) -> f64 {
        self.realized[(self.realized.nrows() - 1, 0)]
    }
}

/// Plans from rest with a zero lead-in and applies each plan to the
/// noise-free plant.
pub fn plan_realizations(cfg: &ExperimentConfig, models: &FittedModels, specs: &[MethodSpec]) -> Result<Vec<PlanRealization>> {
    let sys = cfg.system()?.noise_free();
    let zp = DVector::zeros(models.subspace.dims.zp_dim());
    let mut out = Vec::new();
    for (spec, planner) in study_planners(cfg, models, specs)? {
        let plan = planner.plan(&zp)?;
        let realized = realize_plan(&sys, &DVector::zeros(2), &DVector::zeros(1), &plan.u_f, cfg.future, 0)?;
        let planned = DMatrix::from_row_slice(cfg.future, 2, plan.y_pred.as_slice());
        out.push(PlanRealization {
            spec,
            u_f: plan.u_f,
            planned,
            realized,
        });
    }
    Ok(out)
}

fn spec_key(mode: LoopMode, spec: &MethodSpec) -> String {
    format!("{},{},{}", mode.as_str(), spec.method.as_str(), spec.lambda)
}

fn fig3(cfg: &ExperimentConfig, out: &mut Outputs, seeds: &mut Vec<u64>, failures: &mut Vec<RunFailure>) -> Result<()> {
    let specs = [
        MethodSpec { method: Method::Spc, lambda: 0.0 },
        MethodSpec { method: Method::Tpc, lambda: 0.0 },
        MethodSpec { method: Method::TwoNormDdpc, lambda: cfg.plan_lambda },
    ];
    let mut runs = String::from("mode,method,lambda,seed,planned_terminal,realized_terminal,terminal_error\n");
    let mut traj = String::from("mode,method,lambda,seed,k,u_1,planned_y_1,planned_y_2,realized_y_1,realized_y_2\n");
    let mut agg = String::from("mode,method,lambda,count,planned_terminal,realized_terminal,terminal_error\n");
    for &mode in &cfg.modes {
        let mut stats: BTreeMap<usize, [Vec<f64>; 3]> = BTreeMap::new();
        let mut first = true;
        for r in 0..cfg.repeats {
            let seed = derive_seed(cfg.seed, mode_stream(mode), r as u64);
            seeds.push(seed);
            let res = (|| -> Result<Vec<PlanRealization>> {
                let data = cfg.simulate(mode, cfg.train_len, seed)?.data;
                let models = fit_all(&data, cfg.past, cfg.future, FitOptions::default())?;
                plan_realizations(cfg, &models, &specs)
            })();
            let plans = match res {
                Ok(p) => p,
                Err(e) => {
                    record_failure(failures, format!("fig3 {}", mode.as_str()), seed, e);
                    continue;
                }
            };
            for (i, p) in plans.iter().enumerate() {
                let (pt, rt) = (p.planned_terminal(), p.realized_terminal());
                let _ = writeln!(runs, "{},{seed},{pt},{rt},{}", spec_key(mode, &p.spec), (rt - 1.0).abs());
                let s = stats.entry(i).or_default();
                s[0].push(pt);
                s[1].push(rt);
                s[2].push((rt - 1.0).abs());
                if first {
                    for k in 0..cfg.future {
                        let _ = writeln!(
                            traj,
                            "{},{seed},{k},{},{},{},{},{}",
                            spec_key(mode, &p.spec),
                            p.u_f[k],
                            p.planned[(k, 0)],
                            p.planned[(k, 1)],
                            p.realized[(k, 0)],
                            p.realized[(k, 1)]
                        );
                    }
                }
            }
            first = false;
        }
        for (i, s) in &stats {
            let _ = writeln!(
                agg,
                "{},{},{},{},{}",
                spec_key(mode, &specs[*i]),
                s[0].len(),
                mean(&s[0]),
                mean(&s[1]),
                mean(&s[2])
            );
        }
    }
    out.write("fig3_runs.csv", &runs)?;
    out.write("fig3_trajectories.csv", &traj)?;
    out.write("fig3_aggregate.csv", &agg)
}

/// Receding-horizon runs of several planners from the same training data,
/// with common plant noise.
pub fn tracking_runs(
    cfg: &ExperimentConfig,
    models: &FittedModels,
    specs: &[MethodSpec],
    noise_seed: u64,
) -> Result<Vec<(MethodSpec, RecedingHorizonRun)>> {
    let sys = cfg.system()?;
    let mut out = Vec::new();
    for (spec, planner) in study_planners(cfg, models, specs)? {
        let run = run_receding_horizon(&sys, planner.as_ref(), &DVector::zeros(2), cfg.sim_steps, noise_seed)?;
        out.push((spec, run));
    }
    Ok(out)
}

fn tracking_study(
    cfg: &ExperimentConfig,
    prefix: &str,
    specs: &[MethodSpec],
    with_bias: bool,
    out: &mut Outputs,
    seeds: &mut Vec<u64>,
    failures: &mut Vec<RunFailure>,
) -> Result<()> {
    let mut runs = format!("mode,{}\n", TrackingSummary::CSV_HEADER);
    let mut traj = String::from("mode,method,lambda,seed,t,u_1,y_1,y_2\n");
    let mut agg = String::from("mode,method,lambda,count,time_to_90,terminal_error,reached_fraction\n");
    let mut bias = format!("{}\n", BiasReport::CSV_HEADER);
    for &mode in &cfg.modes {
        let mut stats: BTreeMap<usize, [Vec<f64>; 3]> = BTreeMap::new();
        let mut first = true;
        for r in 0..cfg.repeats {
            let seed = derive_seed(cfg.seed, mode_stream(mode), r as u64);
            let noise_seed = derive_seed(cfg.seed, mode_stream(mode) + 8, r as u64);
            seeds.push(seed);
            let res = (|| -> Result<(Option<BiasReport>, Vec<(MethodSpec, RecedingHorizonRun)>)> {
                let data = cfg.simulate(mode, cfg.train_len, seed)?.data;
                let models = fit_all(&data, cfg.past, cfg.future, FitOptions::default())?;
                let rep = if with_bias { Some(bias_report(&models)?) } else { None };
                Ok((rep, tracking_runs(cfg, &models, specs, noise_seed)?))
            })();
            let (rep, results) = match res {
                Ok(v) => v,
                Err(e) => {
                    record_failure(failures, format!("{prefix} {}", mode.as_str()), seed, e);
                    continue;
                }
            };
            if let Some(rep) = rep {
                let _ = writeln!(bias, "{}", rep.csv_row(mode.as_str(), seed));
            }
            for (i, (spec, run)) in results.iter().enumerate() {
                let mut s = TrackingSummary::from_run(run, spec.method, spec.lambda, 1.0);
                s.seed = seed;
                let _ = writeln!(runs, "{},{}", mode.as_str(), s.csv_row());
                let st = stats.entry(i).or_default();
                st[0].push(s.censored_time() as f64);
                st[1].push(s.terminal_error);
                st[2].push(if s.time_to_90.is_some() { 1.0 } else { 0.0 });
                if first {
                    let t = &run.trajectory;
                    for k in 0..t.len() {
                        let _ = writeln!(
                            traj,
                            "{},{seed},{},{},{},{}",
                            spec_key(mode, spec),
                            k + 1,
                            t.u[(k, 0)],
                            t.y[(k, 0)],
                            t.y[(k, 1)]
                        );
                    }
                }
            }
            first = false;
        }
        for (i, s) in &stats {
            let _ = writeln!(
                agg,
                "{},{},{},{},{}",
                spec_key(mode, &specs[*i]),
                s[0].len(),
                mean(&s[0]),
                mean(&s[1]),
                mean(&s[2])
            );
        }
    }
    if with_bias {
        out.write(&format!("{prefix}_bias.csv"), &bias)?;
    }
    out.write(&format!("{prefix}_runs.csv"), &runs)?;
    out.write(&format!("{prefix}_trajectories.csv"), &traj)?;
    out.write(&format!("{prefix}_aggregate.csv"), &agg)
}

fn fig4(cfg: &ExperimentConfig, out: &mut Outputs, seeds: &mut Vec<u64>, failures: &mut Vec<RunFailure>) -> Result<()> {
    let mut specs = vec![
        MethodSpec { method: Method::Spc, lambda: 0.0 },
        MethodSpec { method: Method::Tpc, lambda: 0.0 },
    ];
    specs.extend(cfg.lambda_grid.iter().map(|l| MethodSpec {
        method: Method::TwoNormDdpc,
        lambda: *l,
    }));
    tracking_study(cfg, "fig4", &specs, false, out, seeds, failures)
}

fn custom(cfg: &ExperimentConfig, out: &mut Outputs, seeds: &mut Vec<u64>, failures: &mut Vec<RunFailure>) -> Result<()> {
    tracking_study(cfg, "custom", &cfg.method_specs(), true, out, seeds, failures)
}

/// Window samples `[z_p; u_f] → y_f` without Hankel scaling, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub v: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

/// Validation windows for a feedback law.
///
/// Lead-ins come from a fresh trajectory of the law. With `input_std`
/// given, each window's future inputs are fresh independent Gaussians of
/// that deviation and the future outputs an open-loop rollout of the plant
/// from the window's true state with fresh noise; with `None` the law's own
/// future samples are used.
pub fn validation_windows(
    sys: &LtiSystem,
    law: &FeedbackLaw,
    burn_in: usize,
    past: usize,
    future: usize,
    n_windows: usize,
    input_std: Option<f64>,
    seed: u64,
) -> Result<WindowBatch> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let steps = n_windows + past + future - 1;
    let rec = simulate_with_states(sys, law, steps, burn_in, &DVector::zeros(sys.n_states()), seed)?;
    let data = &rec.data;
    let scale = (n_windows as f64).sqrt();
    let zp = hankel_matrix(&data.z(), 1, past, n_windows)? * scale;
    let Some(std) = input_std else {
        let uf = hankel_matrix(&data.u, past + 1, past + future, n_windows)? * scale;
        let yf = hankel_matrix(&data.y, past + 1, past + future, n_windows)? * scale;
        return Ok(WindowBatch { v: vstack(&[&zp, &uf]), y: yf });
    };
    let (q, m) = (sys.n_outputs(), sys.n_inputs());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, 99, 0));
    let mut uf = DMatrix::zeros(m * future, n_windows);
    let mut yf = DMatrix::zeros(q * future, n_windows);
    for j in 0..n_windows {
        // state at the first future sample
        let mut x: DVector<f64> = rec.states.row(j + past).transpose();
        for k in 0..future {
            let y = sys.c() * &x + sys.sample_noise(&mut rng);
            yf.view_mut((k * q, j), (q, 1)).copy_from(&y);
            let u = DVector::from_fn(m, |_, _| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
            uf.view_mut((k * m, j), (m, 1)).copy_from(&u);
            x = sys.a() * &x + sys.b() * &u;
        }
    }
    Ok(WindowBatch { v: vstack(&[&zp, &uf]), y: yf })
}

/// Mean squared multistep prediction error `mean_j ‖y_j − P v_j‖²`.
pub fn prediction_mse(p: &DMatrix<f64>, batch: &WindowBatch) -> f64 {
    let r = &batch.y - p * &batch.v;
    r.norm_squared() / batch.v.ncols() as f64
}

/// Streams batches into a least-squares fit of `y` on `v`.
#[derive(Debug, Clone)]
pub struct StreamingRegression {
    acc: TriangularAccumulator,
    nv: usize,
    ny: usize,
}

impl StreamingRegression {
    pub fn new(nv: usize, ny: usize) -> Self {
        Self {
            acc: TriangularAccumulator::new(nv + ny),
            nv,
            ny,
        }
    }

    pub fn push(&mut self, batch: &WindowBatch) {
        self.acc.push_columns(&vstack(&[&batch.v, &batch.y]));
    }

    pub fn finish(self) -> Result<DMatrix<f64>> {
        let r = self.acc.finish();
        crate::linalg::check_triangular_rank(&r, self.nv, "oracle regressor Gram", None)?;
        coefficients_from_r(&r, self.nv, self.nv, self.ny)
    }
}

/// Population standard deviation of the first input channel.
pub fn input_std(data: &TrajectoryData) -> f64 {
    let u = data.u.column(0);
    let mean = u.mean();
    (u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / u.len() as f64).sqrt()
}

/// One pass/fail predicate of [`verify`].
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn to_table(&self) -> String {
        let w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(s, "{:<w$}  {}  {}", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail);
        }
        s
    }
}

/// Header-keyed rows of one of the experiment CSVs.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::parse("table", "empty file"))?
            .split(',')
            .map(str::to_string)
            .collect();
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        if rows.iter().any(|r| r.len() != header.len()) {
            return Err(Error::parse("table", "row width differs from header"));
        }
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse("table", format!("missing column {name}")))
    }

    /// Numeric value of `column` in the unique row matching all `keys`.
    pub fn value(&self, keys: &[(&str, &str)], column: &str) -> Result<f64> {
        let c = self.col(column)?;
        let idx: Vec<usize> = keys.iter().map(|(k, _)| self.col(k)).collect::<Result<_>>()?;
        let hits: Vec<&Vec<String>> = self
            .rows
            .iter()
            .filter(|r| idx.iter().zip(keys).all(|(i, (_, v))| same_key(&r[*i], v)))
            .collect();
        match hits.as_slice() {
            [row] => row[c]
                .parse()
                .map_err(|_| Error::parse("table", format!("non-numeric {column}: {}", row[c]))),
            [] => Err(Error::parse("table", format!("no row for {keys:?}"))),
            _ => Err(Error::parse("table", format!("several rows for {keys:?}"))),
        }
    }
}

fn same_key(cell: &str, key: &str) -> bool {
    cell == key
        || matches!((cell.parse::<f64>(), key.parse::<f64>()), (Ok(a), Ok(b)) if a == b)
}

fn check(name: impl Into<String>, outcome: Result<(bool, String)>) -> Check {
    match outcome {
        Ok((passed, detail)) => Check {
            name: name.into(),
            passed,
            detail,
        },
        Err(e) => Check {
            name: name.into(),
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Rechecks a written experiment: file hashes first, then the experiment's
/// qualitative predicates on the aggregate CSVs.
///
/// A missing manifest or missing listed file is an error; a tampered or
/// unparsable file fails the named predicates.
pub fn verify(manifest_path: &Path) -> Result<VerifyReport> {
    let manifest = Manifest::read(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut checks = Vec::new();
    let mut contents = BTreeMap::new();
    for f in &manifest.files {
        let path = dir.join(&f.path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let digest = sha256_hex(&bytes);
        checks.push(Check {
            name: format!("integrity:{}", f.path),
            passed: digest == f.sha256,
            detail: if digest == f.sha256 {
                "hash matches".into()
            } else {
                format!("expected {}, found {digest}", f.sha256)
            },
        });
        contents.insert(f.path.clone(), String::from_utf8_lossy(&bytes).into_owned());
    }
    let table = |name: &str| -> Result<Table> {
        Table::parse(
            contents
                .get(name)
                .ok_or_else(|| Error::parse("manifest", format!("{name} not listed")))?,
        )
    };
    let cfg_list = |key: &str| -> Vec<String> {
        manifest
            .config
            .get(key)
            .map(|v| v.split(',').map(str::to_string).collect())
            .unwrap_or_default()
    };
    let modes = cfg_list("modes");
    let has = |m: &str| modes.iter().any(|x| x == m);
    match manifest.experiment.as_str() {
        "fig1" => {
            let grid = |mode: &str| -> Result<CorrelationHeatmap> {
                let name = format!("fig1_heatmap_{mode}.csv");
                let corr = matrix_from_csv(
                    contents
                        .get(&name)
                        .ok_or_else(|| Error::parse("manifest", format!("{name} not listed")))?,
                )?;
                Ok(CorrelationHeatmap {
                    corr,
                    n_outputs: 2,
                    n_inputs: 1,
                    zero_variance_innovations: vec![],
                    zero_variance_inputs: vec![],
                    count: 1,
                })
            };
            if has("open") {
                checks.push(check(
                    "open_loop_correlation_below_0.05",
                    grid("open").map(|m| (m.max_abs() < 0.05, format!("max |corr| = {}", m.max_abs()))),
                ));
            }
            if has("closed") {
                checks.push(check(
                    "closed_loop_causal_correlation_above_0.1",
                    grid("closed").map(|m| {
                        let v = m.max_abs_where(true);
                        (v > 0.1, format!("max |corr| (input time ≥ innovation time) = {v}"))
                    }),
                ));
                checks.push(check(
                    "closed_loop_anticausal_correlation_below_0.05",
                    grid("closed").map(|m| {
                        let v = m.max_abs_where(false);
                        (v < 0.05, format!("max |corr| (input time < innovation time) = {v}"))
                    }),
                ));
            }
        }
        "fig2" => {
            let grid: Vec<usize> = cfg_list("n_grid").iter().filter_map(|s| s.parse().ok()).collect();
            let (Some(&nmin), Some(&nmax)) = (grid.iter().min(), grid.iter().max()) else {
                return Err(Error::parse("manifest", "empty n_grid"));
            };
            // flattening is judged against the grid point closest to nmax/8
            let nmid = *grid
                .iter()
                .min_by_key(|n| (**n as i64 - (nmax / 8) as i64).abs())
                .unwrap();
            for col in ["sigma_max_subspace", "expected_bias_sq"] {
                let get = |mode: &str, n: usize| -> Result<f64> {
                    table("fig2_aggregate.csv")?.value(&[("N", &n.to_string()), ("mode", mode)], col)
                };
                if has("open") {
                    checks.push(check(
                        format!("open_loop_{col}_decays"),
                        (|| {
                            let (a, b) = (get("open", nmin)?, get("open", nmax)?);
                            Ok((b < 0.25 * a, format!("N={nmax}: {b} vs N={nmin}: {a} (ratio {})", b / a)))
                        })(),
                    ));
                    checks.push(check(
                        format!("open_loop_{col}_monotone"),
                        (|| {
                            let mut sorted = grid.clone();
                            sorted.sort_unstable();
                            let vals: Vec<f64> = sorted.iter().map(|n| get("open", *n)).collect::<Result<_>>()?;
                            let ups = vals.windows(2).filter(|w| w[1] > w[0]).count();
                            Ok((ups <= 1, format!("{ups} increasing steps over {vals:?}")))
                        })(),
                    ));
                }
                if has("closed") {
                    checks.push(check(
                        format!("closed_loop_{col}_flattens"),
                        (|| {
                            let (a, b) = (get("closed", nmid)?, get("closed", nmax)?);
                            Ok((b > 0.6 * a, format!("N={nmax}: {b} vs N={nmid}: {a} (ratio {})", b / a)))
                        })(),
                    ));
                }
            }
        }
        "fig3" => {
            let lam = manifest.config.get("plan_lambda").cloned().unwrap_or_else(|| "0.1".into());
            let get = |mode: &str, method: &str, l: &str, col: &str| -> Result<f64> {
                table("fig3_aggregate.csv")?.value(&[("mode", mode), ("method", method), ("lambda", l)], col)
            };
            let within = |mode: &str, method: &str| {
                check(
                    format!("{method}_{mode}_loop_terminal_within_10pct"),
                    get(mode, method, "0", "realized_terminal")
                        .map(|v| ((v - 1.0).abs() < 0.1, format!("mean realized terminal position {v}"))),
                )
            };
            if has("open") {
                checks.push(within("open", "spc"));
                checks.push(within("open", "tpc"));
            }
            if has("closed") {
                checks.push(within("closed", "tpc"));
                checks.push(check(
                    "spc_closed_loop_misses_more_than_tpc",
                    (|| {
                        let (s, t) = (
                            get("closed", "spc", "0", "terminal_error")?,
                            get("closed", "tpc", "0", "terminal_error")?,
                        );
                        Ok((s > t, format!("SPC error {s}, TPC error {t}")))
                    })(),
                ));
            }
            for mode in modes.iter().filter(|m| *m == "open" || *m == "closed") {
                checks.push(check(
                    format!("2norm_ddpc_{mode}_loop_realized_below_planned"),
                    (|| {
                        let p = get(mode, "2norm-ddpc", &lam, "planned_terminal")?;
                        let r = get(mode, "2norm-ddpc", &lam, "realized_terminal")?;
                        Ok((r < p, format!("planned {p}, realized {r}")))
                    })(),
                ));
            }
        }
        "fig4" => {
            let get = |mode: &str, method: &str, l: &str| -> Result<f64> {
                table("fig4_aggregate.csv")?.value(&[("mode", mode), ("method", method), ("lambda", l)], "time_to_90")
            };
            if has("closed") {
                for l in cfg_list("lambda_grid") {
                    checks.push(check(
                        format!("tpc_faster_than_2norm_ddpc_lambda_{l}"),
                        (|| {
                            let (t, d) = (get("closed", "tpc", "0")?, get("closed", "2norm-ddpc", &l)?);
                            Ok((t < d, format!("TPC {t} steps, 2norm-DDPC {d} steps")))
                        })(),
                    ));
                }
            }
            if has("open") {
                checks.push(check(
                    "spc_tpc_open_loop_times_agree",
                    (|| {
                        let (s, t) = (get("open", "spc", "0")?, get("open", "tpc", "0")?);
                        let rel = (s - t).abs() / t;
                        Ok((rel <= 0.2, format!("SPC {s}, TPC {t} (relative difference {rel})")))
                    })(),
                ));
            }
        }
        "custom" => {}
        other => return Err(Error::parse("manifest experiment", other)),
    }
    Ok(VerifyReport { checks })
}

/// Columns used for an `N`-column fit of a trajectory of length `t`.
pub fn trajectory_len_for(n_cols: usize, past: usize, future: usize) -> usize {
    n_cols + past + future - 1
}

/// Writes a matrix CSV through the manifest-free path used by the CLI.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    fs::write(path, matrix_to_csv(m)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExperimentKind, dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::defaults(kind);
        c.repeats = 3;
        c.n_grid = vec![250, 500];
        c.lambda_grid = vec![0.1, 10.0];
        c.sim_steps = 20;
        c.output_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn config_round_trip_and_defaults() {
        let c = ExperimentConfig::from_text("experiment=fig2\nrepeats=5\nn_grid=250,1000\n# comment\n", None).unwrap();
        assert_eq!(c.noise_var, 4e-4);
        assert_eq!(c.repeats, 5);
        assert_eq!(c.n_grid, vec![250, 1000]);
        let again = ExperimentConfig::from_text(&c.to_text(), None).unwrap();
        assert_eq!(again.resolved(), c.resolved());
        assert_eq!(ExperimentConfig::defaults(ExperimentKind::Fig4).noise_var, 1e-4);
        assert!(ExperimentConfig::from_text("repeats=5", None).is_err());
        assert!(ExperimentConfig::from_text("experiment=fig1\nbogus=1", None).is_err());
        let mut bad = ExperimentConfig::defaults(ExperimentKind::Fig1);
        bad.repeats = 0;
        assert!(bad.validate().is_err());
        bad.repeats = 1;
        bad.lambda_grid = vec![0.0];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..100).map(|i| derive_seed(7, 1, i)).collect();
        let b: Vec<u64> = (0..100).map(|i| derive_seed(7, 2, i)).collect();
        let mut all = a.clone();
        all.extend(&b);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 200);
        assert_eq!(derive_seed(7, 1, 3), a[3]);
    }

    #[test]
    fn fig1_manifest_lists_hashed_files_and_verifies_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(ExperimentKind::Fig1, dir.path());
        let m = run_experiment(&cfg).unwrap();
        assert_eq!(m.seeds.len(), 6);
        assert!(m.failures.is_empty());
        let names: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
        assert!(names.contains(&"fig1_heatmap_open.csv") && names.contains(&"fig1_heatmap_closed.csv"));
        let report = verify(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert!(report.checks.iter().filter(|c| c.name.starts_with("integrity")).all(|c| c.passed));

        let target = dir.path().join("fig1_heatmap_closed.csv");
        let mut text = fs::read_to_string(&target).unwrap();
        text = text.replacen('0', "9", 1);
        fs::write(&target, text).unwrap();
        let report = verify(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert!(!report.passed());
        assert!(report.failed().iter().any(|c| c.name == "integrity:fig1_heatmap_closed.csv"));
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(verify(&dir.path().join(MANIFEST_NAME)), Err(Error::Io { .. })));
    }

    #[test]
    fn reruns_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for kind in [ExperimentKind::Fig3, ExperimentKind::Fig4] {
            let ma = run_experiment(&small(kind, a.path())).unwrap();
            let mb = run_experiment(&small(kind, b.path())).unwrap();
            assert_eq!(ma, mb);
            for f in &ma.files {
                assert_eq!(fs::read(a.path().join(&f.path)).unwrap(), fs::read(b.path().join(&f.path)).unwrap());
            }
        }
    }

    #[test]
    fn custom_pipeline_writes_bias_and_tracking() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(ExperimentKind::Custom, dir.path());
        cfg.repeats = 1;
        cfg.modes = vec![LoopMode::ClosedLoop];
        cfg.methods = vec![Method::Tpc, Method::Deepc];
        cfg.lambda_grid = vec![1.0];
        let m = run_experiment(&cfg).unwrap();
        assert!(m.failures.is_empty(), "{:?}", m.failures);
        let t = Table::parse(&fs::read_to_string(dir.path().join("custom_runs.csv")).unwrap()).unwrap();
        assert_eq!(t.rows.len(), 2);
        let b = Table::parse(&fs::read_to_string(dir.path().join("custom_bias.csv")).unwrap()).unwrap();
        assert_eq!(b.rows.len(), 1);
        assert!(verify(&dir.path().join(MANIFEST_NAME)).unwrap().passed());
    }

    #[test]
    fn failing_runs_are_recorded_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(ExperimentKind::Fig3, dir.path());
        cfg.repeats = 2;
        // noise-free data make the joint data Gram singular
        cfg.noise_var = 0.0;
        let m = run_experiment(&cfg).unwrap();
        assert_eq!(m.failures.len(), 4);
        assert!(dir.path().join("fig3_aggregate.csv").exists());
    }

    #[test]
    fn table_lookup() {
        let t = Table::parse("mode,method,lambda,x\nopen,tpc,0,1.5\nopen,2norm-ddpc,0.1,2\n").unwrap();
        assert_eq!(t.value(&[("mode", "open"), ("method", "tpc"), ("lambda", "0")], "x").unwrap(), 1.5);
        assert_eq!(t.value(&[("method", "2norm-ddpc"), ("lambda", "0.10")], "x").unwrap(), 2.0);
        assert!(t.value(&[("mode", "closed")], "x").is_err());
        assert!(Table::parse("a,b\n1\n").is_err());
    }

    #[test]
    fn validation_windows_follow_the_plant() {
        let noise = 1e-6;
        let sys = make_double_integrator(DoubleIntegratorConfig { dt: 0.1, noise_var: noise }).unwrap();
        let law = FeedbackLaw::pd_double_integrator(0.1);
        let b = validation_windows(&sys, &law, 50, 3, 4, 5000, Some(0.2), 5).unwrap();
        assert_eq!(b.v.shape(), (3 * 3 + 4, 5000));
        assert_eq!(b.y.shape(), (8, 5000));
        // future measurement noise alone contributes qτσ²; lead-in noise adds a
        // bounded amount on top
        let mut reg = StreamingRegression::new(13, 8);
        reg.push(&b);
        let p = reg.finish().unwrap();
        let mse = prediction_mse(&p, &b);
        assert!(mse > 0.9 * 8.0 * noise && mse < 5.0 * 8.0 * noise, "{mse}");
        let raw = validation_windows(&sys, &law, 50, 3, 4, 5000, None, 5).unwrap();
        assert_eq!(raw.v.rows(0, 9), b.v.rows(0, 9));
        assert_ne!(raw.v.rows(9, 4), b.v.rows(9, 4));
    }

    #[test]
    fn std_of_inputs() {
        let cfg = ExperimentConfig::defaults(ExperimentKind::Fig3);
        let d = cfg.simulate(LoopMode::OpenLoop, 20000, 3).unwrap().data;
        assert!((input_std(&d) - 0.1).abs() < 0.005);
    }
}
