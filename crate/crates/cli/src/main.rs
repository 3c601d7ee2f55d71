use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ddpc_core::bias_analysis::{bias_report, correlation_heatmap, BiasReport};
use ddpc_core::controllers::{
    realize_plan, run_receding_horizon, DeepcController, GammaController, Method, Planner, PredictorController,
    TrackingCost, TrackingSummary,
};
use ddpc_core::estimators::{fit_all, FitOptions};
use ddpc_core::experiments::{run_experiment, verify, ExperimentConfig, ExperimentKind, MANIFEST_NAME};
use ddpc_core::lti_sim::{LoopMode, TrajectoryData};
use nalgebra::DVector;

#[derive(Parser)]
#[command(name = "ddpc", about = "Data-driven predictive control experiments on the double integrator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Base random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Horizons {
    #[arg(long, default_value_t = 10)]
    past: usize,
    #[arg(long, default_value_t = 10)]
    future: usize,
    /// Ridge added to every regression Gram matrix.
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a training trajectory and write it as CSV plus metadata sidecar.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "closed")]
        mode: String,
        /// Number of recorded samples (defaults to train_len).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        noise_var: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Fit all predictors from a trajectory and write them with metadata.
    Fit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        horizons: Horizons,
        /// Trajectory CSV written by `simulate`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Bias summaries and the input-innovation correlation map of a trajectory.
    BiasReport {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        horizons: Horizons,
        #[arg(long)]
        data: PathBuf,
    },
    /// Plan from rest, realize the plan, and run the controller in closed loop.
    Control {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        horizons: Horizons,
        #[arg(long)]
        data: PathBuf,
        /// spc, tpc, 2norm-ddpc or deepc.
        #[arg(long, default_value = "tpc")]
        method: String,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        /// Use λ‖γ‖ instead of λ‖γ‖².
        #[arg(long)]
        unsquared: bool,
        /// Receding-horizon steps.
        #[arg(long, default_value_t = 60)]
        steps: usize,
    },
    /// Run one of the experiment families.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// fig1, fig2, fig3, fig4 or custom.
        kind: String,
        #[arg(long)]
        repeats: Option<usize>,
        /// Extra key=value overrides, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Recheck the artifacts of an experiment against its manifest.
    Verify {
        /// Manifest file or the directory containing it.
        manifest: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &Common, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_text(&text, Some(kind))?
        }
        None => ExperimentConfig::defaults(kind),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn out_dir(common: &Common, default: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate {
            common,
            mode,
            steps,
            noise_var,
            dt,
        } => {
            let mut cfg = load_config(&common, ExperimentKind::Custom)?;
            if let Some(v) = noise_var {
                cfg.noise_var = v;
            }
            if let Some(v) = dt {
                cfg.dt = v;
            }
            let mode: LoopMode = mode.parse()?;
            let seed = common.seed.unwrap_or(cfg.seed);
            let data = cfg.simulate(mode, steps.unwrap_or(cfg.train_len), seed)?.data;
            let path = common.out.unwrap_or_else(|| PathBuf::from("trajectory.csv"));
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            data.write_csv(&path)?;
            println!("wrote {} ({} samples, sha256 {})", path.display(), data.len(), data.content_hash());
        }
        Command::Fit { common, horizons, data } => {
            let traj = TrajectoryData::read_csv(&data)?;
            let models = fit_all(&traj, horizons.past, horizons.future, FitOptions { ridge: horizons.ridge })?;
            let dir = out_dir(&common, "fit")?;
            for f in models.write_all(&dir, &traj.content_hash())? {
                println!("wrote {}", dir.join(f).display());
            }
        }
        Command::BiasReport { common, horizons, data } => {
            let traj = TrajectoryData::read_csv(&data)?;
            let models = fit_all(&traj, horizons.past, horizons.future, FitOptions { ridge: horizons.ridge })?;
            let report = bias_report(&models)?;
            let mode = traj.meta.law.as_ref().map(|l| l.mode().as_str()).unwrap_or("unknown");
            let dir = out_dir(&common, "bias")?;
            let row = report.csv_row(mode, traj.seed);
            write(&dir.join("bias_report.csv"), &format!("{}\n{row}\n", BiasReport::CSV_HEADER))?;
            let map = correlation_heatmap(&models.innovations, &models.hankel)?;
            write(&dir.join("heatmap.csv"), &map.to_csv())?;
            println!("{}", BiasReport::CSV_HEADER);
            println!("{row}");
        }
        Command::Control {
            common,
            horizons,
            data,
            method,
            lambda,
            unsquared,
            steps,
        } => {
            let traj = TrajectoryData::read_csv(&data)?;
            let method: Method = method.parse()?;
            let models = fit_all(&traj, horizons.past, horizons.future, FitOptions { ridge: horizons.ridge })?;
            let cost = TrackingCost::double_integrator(horizons.future);
            let planner: Box<dyn Planner> = match method {
                Method::Spc => Box::new(PredictorController::spc(&models.subspace, cost)?),
                Method::Tpc => Box::new(PredictorController::tpc(&models.bank, cost)?),
                Method::TwoNormDdpc => Box::new(GammaController::new(&models.lq, cost, lambda, !unsquared)?),
                Method::Deepc => {
                    if unsquared {
                        bail!("DeePC supports the squared regularizer only");
                    }
                    Box::new(DeepcController::new(&models.hankel, cost, lambda)?)
                }
            };
            let sys = traj.meta.system.clone();
            let n = sys.n_states();
            let dir = out_dir(&common, "control")?;
            let plan = planner.plan(&DVector::zeros(planner.dims().zp_dim()))?;
            write(&dir.join("plan.csv"), &plan.to_csv_string(planner.dims()))?;
            let realized = realize_plan(
                &sys.noise_free(),
                &DVector::zeros(n),
                &DVector::zeros(sys.n_inputs()),
                &plan.u_f,
                horizons.future,
                0,
            )?;
            write(&dir.join("plan_realized.csv"), &ddpc_core::hankel::matrix_to_csv(&realized))?;
            let seed = common.seed.unwrap_or(traj.seed);
            let run = run_receding_horizon(&sys, planner.as_ref(), &DVector::zeros(n), steps, seed)?;
            run.trajectory.write_csv(&dir.join("closed_loop.csv"))?;
            println!("wrote {}", dir.join("closed_loop.csv").display());
            let summary = TrackingSummary::from_run(&run, method, lambda, 1.0);
            write(
                &dir.join("summary.csv"),
                &format!("{}\n{}\n", TrackingSummary::CSV_HEADER, summary.csv_row()),
            )?;
        }
        Command::Experiment {
            common,
            kind,
            repeats,
            set,
        } => {
            let kind: ExperimentKind = kind.parse()?;
            let mut cfg = load_config(&common, kind)?;
            if let Some(r) = repeats {
                cfg.repeats = r;
            }
            for kv in &set {
                let (k, v) = kv.split_once('=').with_context(|| format!("expected KEY=VALUE, got {kv}"))?;
                cfg.set(k, v)?;
            }
            let manifest = run_experiment(&cfg)?;
            for f in &manifest.files {
                println!("wrote {}", cfg.output_dir.join(&f.path).display());
            }
            println!("wrote {}", cfg.output_dir.join(MANIFEST_NAME).display());
            if !manifest.failures.is_empty() {
                eprintln!("warning: {} run(s) failed and were excluded from aggregates", manifest.failures.len());
            }
        }
        Command::Verify { manifest } => {
            let path = if manifest.is_dir() {
                manifest.join(MANIFEST_NAME)
            } else {
                manifest
            };
            let report = verify(&path)?;
            print!("{}", report.to_table());
            if !report.passed() {
                println!("{} check(s) failed", report.failed().len());
                return Ok(ExitCode::from(1));
            }
            println!("all {} checks passed", report.checks.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}
