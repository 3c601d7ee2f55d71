//! Acceptance criteria A1–A9, one PASS/FAIL line each.
//!
//! Runs as a plain binary so the report is visible under `cargo test`.
//! Pass criterion ids (e.g. `A3 A6`) as arguments to run a subset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ddpc_core::bias_analysis::{
    average_heatmaps, bias_report, correlation_heatmap, ddpc_bias_operator, deepc_bias, empirical_bias,
    gamma_ddpc_bias, theorem1_summary,
};
use ddpc_core::controllers::{GammaController, Method, Planner, PredictorController, TrackingCost};
use ddpc_core::estimators::{
    estimate_innovations, fit_all, fit_subspace, fit_transient_bank, FitOptions, FittedModels,
};
use ddpc_core::experiments::{
    derive_seed, input_std, plan_realizations, prediction_mse, run_experiment, tracking_runs,
    validation_windows, ExperimentConfig, ExperimentKind, MethodSpec, StreamingRegression,
};
use ddpc_core::hankel::build_hankel_set;
use ddpc_core::linalg::{relative_error, relative_error_vec, sigma_max};
use ddpc_core::lti_sim::LoopMode;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const MODES: [LoopMode; 2] = [LoopMode::OpenLoop, LoopMode::ClosedLoop];

fn mode_stream(mode: LoopMode) -> u64 {
    match mode {
        LoopMode::OpenLoop => 1,
        LoopMode::ClosedLoop => 2,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Collects named sub-checks and folds them into one outcome.
#[derive(Default)]
struct Checks {
    lines: Vec<String>,
    failed: Vec<String>,
}

impl Checks {
    fn check(&mut self, name: &str, ok: bool, detail: String) {
        let line = format!("{name}: {detail}");
        if !ok {
            self.failed.push(name.to_string());
        }
        self.lines.push(line);
    }

    fn outcome(self) -> Outcome {
        let text = self.lines.join("; ");
        if self.failed.is_empty() {
            Ok(text)
        } else {
            Err(format!("failed [{}] {text}", self.failed.join(", ")))
        }
    }
}

fn runtime_check(c: &mut Checks, start: Instant, limit: Duration) {
    let el = start.elapsed();
    c.check("runtime", el < limit, format!("{:.1}s < {}s", el.as_secs_f64(), limit.as_secs()));
}

fn a1() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::defaults(ExperimentKind::Fig1);
    let steps = cfg.heatmap_cols + cfg.past + cfg.future - 1;
    let mut c = Checks::default();
    for mode in MODES {
        let mut maps = Vec::new();
        for r in 0..cfg.repeats {
            let seed = derive_seed(cfg.seed, 100 + mode_stream(mode), r as u64);
            let data = cfg.simulate(mode, steps, seed).map_err(|e| e.to_string())?.data;
            let bank = fit_transient_bank(&data, cfg.past, cfg.future, FitOptions::default()).map_err(|e| e.to_string())?;
            let innov = estimate_innovations(&bank, &data).map_err(|e| e.to_string())?;
            let h = build_hankel_set(&data, cfg.past, cfg.future).map_err(|e| e.to_string())?;
            maps.push(correlation_heatmap(&innov, &h).map_err(|e| e.to_string())?);
        }
        let avg = average_heatmaps(&maps).map_err(|e| e.to_string())?;
        // independent pass over the averaged grid
        let (mut causal, mut anticausal) = (0.0f64, 0.0f64);
        for i in 0..avg.corr.nrows() {
            for j in 0..avg.corr.ncols() {
                let (k, l) = (i / avg.n_outputs, j / avg.n_inputs);
                let a = avg.corr[(i, j)].abs();
                if l >= k {
                    causal = causal.max(a);
                } else {
                    anticausal = anticausal.max(a);
                }
            }
        }
        match mode {
            LoopMode::OpenLoop => {
                let m = causal.max(anticausal);
                c.check("open max|corr|", m < 0.05, format!("{m:.4} < 0.05"));
            }
            LoopMode::ClosedLoop => {
                c.check("closed causal max", causal > 0.1, format!("{causal:.3} > 0.1"));
                c.check("closed anticausal max", anticausal < 0.05, format!("{anticausal:.2e} < 0.05"));
            }
        }
    }
    runtime_check(&mut c, start, Duration::from_secs(60));
    c.outcome()
}

fn a2() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::defaults(ExperimentKind::Fig2);
    let mut sig: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut ebs: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (mi, mode) in MODES.into_iter().enumerate() {
        for (gi, &n) in cfg.n_grid.iter().enumerate() {
            let steps = n + cfg.past + cfg.future - 1;
            let (mut s, mut e) = (Vec::new(), Vec::new());
            for r in 0..cfg.repeats {
                let seed = derive_seed(cfg.seed, 200 + 16 * mode_stream(mode) + gi as u64, r as u64);
                let data = cfg.simulate(mode, steps, seed).map_err(|e| e.to_string())?.data;
                let models = fit_all(&data, cfg.past, cfg.future, FitOptions::default()).map_err(|e| e.to_string())?;
                let rep = bias_report(&models).map_err(|e| e.to_string())?;
                s.push(rep.sigma_max_subspace);
                e.push(rep.expected_bias_sq);
            }
            sig.insert((mi, n), mean(&s));
            ebs.insert((mi, n), mean(&e));
        }
    }
    let mut c = Checks::default();
    for (name, table) in [("sigma_max", &sig), ("expected_bias_sq", &ebs)] {
        let open = table[&(0, 8000)] / table[&(0, 250)];
        let closed = table[&(1, 8000)] / table[&(1, 1000)];
        c.check(&format!("open {name} 8000/250"), open < 0.25, format!("{open:.3} < 0.25"));
        c.check(&format!("closed {name} 8000/1000"), closed > 0.6, format!("{closed:.3} > 0.6"));
    }
    runtime_check(&mut c, start, Duration::from_secs(120));
    c.outcome()
}

/// Trains on `N = 10⁴` closed-loop samples and compares the closed-form
/// expected bias with the mean of `‖β̂ v‖²` over held-out windows.
fn a3() -> Outcome {
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::Fig2);
    let n = 10_000;
    let mut c = Checks::default();
    cfg.noise_var = 4e-4;
    let mode = LoopMode::ClosedLoop;
    let data = cfg
        .simulate(mode, n + cfg.past + cfg.future - 1, derive_seed(3, 1, 0))
        .map_err(|e| e.to_string())?
        .data;
    let models = fit_all(&data, cfg.past, cfg.future, FitOptions::default()).map_err(|e| e.to_string())?;
    let beta_v = empirical_bias(&models.subspace, &models.bank, &models.hankel).map_err(|e| e.to_string())?;
    let formula = theorem1_summary(&beta_v, &models.bank, &models.innovations, &models.hankel)
        .map_err(|e| e.to_string())?
        .expected_bias_sq;
    let sys = cfg.system().map_err(|e| e.to_string())?;
    let law = cfg.law(mode).map_err(|e| e.to_string())?;
    let held = validation_windows(&sys, &law, cfg.burn_in, cfg.past, cfg.future, 100_000, None, derive_seed(3, 2, 0))
        .map_err(|e| e.to_string())?;
    let b = &models.bias.beta_hat * &held.v;
    let mc = b.norm_squared() / held.v.ncols() as f64;
    let ratio = formula / mc;
    c.check(
        "closed formula/MC",
        (ratio - 1.0).abs() < 0.1,
        format!("{formula:.4e}/{mc:.4e} = {ratio:.4}, |r-1| < 0.1"),
    );
    c.outcome()
}

fn a4() -> Outcome {
    let cfg = ExperimentConfig::defaults(ExperimentKind::Fig3);
    let data = cfg
        .simulate(LoopMode::ClosedLoop, cfg.train_len, derive_seed(4, 0, 0))
        .map_err(|e| e.to_string())?
        .data;
    let m = fit_all(&data, cfg.past, cfg.future, FitOptions::default()).map_err(|e| e.to_string())?;
    let (h, lq) = (&m.hankel, &m.lq);
    let v = h.v();
    let tol = 1e-8;
    let mut c = Checks::default();

    let recon = relative_error(&(lq.l() * lq.q()), &h.v_yf());
    c.check("LQ reconstruction", recon < tol, format!("{recon:.1e}"));

    let embedded = lq.embedded_subspace_predictor().map_err(|e| e.to_string())?;
    let e = relative_error(&embedded, &m.subspace.s);
    c.check("L_YV L_VV^-1 = S", e < tol, format!("{e:.1e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let beta_v = empirical_bias(&m.subspace, &m.bank, h).map_err(|e| e.to_string())?;
    let (mut worst_lq, mut worst_l2, mut worst_gamma) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let g = DVector::from_fn(h.n_cols, |_, _| rng.random::<f64>() - 0.5);
        let lhs = &h.yf * &g - &m.subspace.s * (&v * &g);
        let rhs = &lq.l_ye * (&lq.q_e * &g);
        worst_lq = worst_lq.max(relative_error_vec(&lhs, &rhs));

        let vg = &v * &g;
        let gap = &m.subspace.s * &vg - &m.bank.h_hat * &vg;
        worst_l2 = worst_l2.max(relative_error_vec(&gap, &(&beta_v * &g)));

        let gamma_v = &lq.q_v * &g;
        let gamma_e = &lq.q_e * &g;
        let via_gamma = gamma_ddpc_bias(lq, &m.bias, &gamma_v, &gamma_e).map_err(|e| e.to_string())?;
        let via_g = deepc_bias(lq, &beta_v, &g).map_err(|e| e.to_string())?;
        worst_gamma = worst_gamma.max(relative_error_vec(&via_gamma.total, &via_g));
    }
    c.check("Yf g - S V g = L_YE Q_E g", worst_lq < tol, format!("{worst_lq:.1e}"));
    c.check("S v - H v = beta_V g", worst_l2 < tol, format!("{worst_l2:.1e}"));
    c.check("gamma = Q g bias", worst_gamma < tol, format!("{worst_gamma:.1e}"));

    let op = ddpc_bias_operator(lq, &m.bias);
    let (s0, s1) = (sigma_max(&op), sigma_max(&(&op * lq.q())));
    let e = (s0 - s1).abs() / s0;
    c.check("sigma_max unitary invariance", e < tol, format!("{e:.1e}"));
    c.outcome()
}

fn a5() -> Outcome {
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::Fig3);
    cfg.noise_var = 0.0;
    let opts = FitOptions { ridge: 1e-12 };
    let mut c = Checks::default();
    for mode in MODES {
        let tag = mode.as_str();
        let data = cfg
            .simulate(mode, cfg.train_len, derive_seed(5, mode_stream(mode), 0))
            .map_err(|e| e.to_string())?
            .data;
        let m = fit_all(&data, cfg.past, cfg.future, opts).map_err(|e| e.to_string())?;
        let scale = m.hankel.v_yf().norm();
        let beta_v = empirical_bias(&m.subspace, &m.bank, &m.hankel).map_err(|e| e.to_string())?;
        for (name, val) in [
            ("|beta_V|", beta_v.norm()),
            ("|L_YE|", m.lq.l_ye.norm()),
            ("|E_f|", m.innovations.e_hat.norm()),
        ] {
            let rel = val / scale;
            c.check(&format!("{tag} {name}/scale"), rel < 1e-8, format!("{rel:.1e}"));
        }

        // lead-in taken from a training window so it is consistent with the plant
        let col = m.hankel.n_cols / 2;
        let zp: DVector<f64> = m.hankel.zp.column(col) * (m.hankel.n_cols as f64).sqrt();
        let cost = TrackingCost::double_integrator(cfg.future);
        let spc = PredictorController::spc(&m.subspace, cost.clone()).map_err(|e| e.to_string())?;
        let tpc = PredictorController::tpc(&m.bank, cost.clone()).map_err(|e| e.to_string())?;
        // the λ‖γ‖² term shifts the plan by O(λ); 1e-11 sits above the
        // conditioning floor of the ridge-regularized fit
        let ddpc = GammaController::new(&m.lq, cost, 1e-11, true).map_err(|e| e.to_string())?;
        let u_spc = spc.plan(&zp).map_err(|e| e.to_string())?.u_f;
        let u_tpc = tpc.plan(&zp).map_err(|e| e.to_string())?.u_f;
        let u_ddpc = ddpc.plan(&zp).map_err(|e| e.to_string())?.u_f;
        let d1 = (&u_spc - &u_tpc).amax();
        let d2 = (&u_spc - &u_ddpc).amax();
        c.check(&format!("{tag} |u_spc-u_tpc|"), d1 < 1e-6, format!("{d1:.1e}"));
        c.check(&format!("{tag} |u_spc-u_2norm|"), d2 < 1e-6, format!("{d2:.1e}"));
    }
    c.outcome()
}

/// Oracle regression on `10⁶` windows generated in independent chunks.
fn oracle_predictor(
    cfg: &ExperimentConfig,
    mode: LoopMode,
    input_std: Option<f64>,
    chunks: u64,
    chunk_len: usize,
) -> Result<DMatrix<f64>, String> {
    let sys = cfg.system().map_err(|e| e.to_string())?;
    let law = cfg.law(mode).map_err(|e| e.to_string())?;
    let (nv, ny) = (3 * cfg.past + cfg.future, 2 * cfg.future);
    let mut reg = StreamingRegression::new(nv, ny);
    for k in 0..chunks {
        let batch = validation_windows(
            &sys,
            &law,
            cfg.burn_in_for(mode),
            cfg.past,
            cfg.future,
            chunk_len,
            input_std,
            derive_seed(6, 10 + mode_stream(mode), k),
        )
        .map_err(|e| e.to_string())?;
        reg.push(&batch);
    }
    reg.finish().map_err(|e| e.to_string())
}

fn a6() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::defaults(ExperimentKind::Fig3);
    let n = 100_000;
    let mut c = Checks::default();
    for mode in MODES {
        let tag = mode.as_str();
        let data = cfg
            .simulate(mode, n + cfg.past + cfg.future - 1, derive_seed(6, mode_stream(mode), 0))
            .map_err(|e| e.to_string())?
            .data;
        let h = build_hankel_set(&data, cfg.past, cfg.future).map_err(|e| e.to_string())?;
        let spc = fit_subspace(&h, FitOptions::default()).map_err(|e| e.to_string())?;
        let bank = fit_transient_bank(&data, cfg.past, cfg.future, FitOptions::default()).map_err(|e| e.to_string())?;
        // closed-loop validation replaces the feedback inputs by exogenous
        // ones of the training input spread
        let std = match mode {
            LoopMode::OpenLoop => None,
            LoopMode::ClosedLoop => Some(input_std(&data)),
        };
        let oracle = oracle_predictor(&cfg, mode, std, 10, 100_000)?;
        let sys = cfg.system().map_err(|e| e.to_string())?;
        let law = cfg.law(mode).map_err(|e| e.to_string())?;
        let val = validation_windows(
            &sys,
            &law,
            cfg.burn_in_for(mode),
            cfg.past,
            cfg.future,
            100_000,
            std,
            derive_seed(6, 20 + mode_stream(mode), 0),
        )
        .map_err(|e| e.to_string())?;
        let floor = prediction_mse(&oracle, &val);
        let r_tpc = prediction_mse(&bank.h_hat, &val) / floor;
        let r_spc = prediction_mse(&spc.s, &val) / floor;
        c.check(&format!("{tag} TPC/floor"), (r_tpc - 1.0).abs() < 0.1, format!("{r_tpc:.4}"));
        match mode {
            LoopMode::OpenLoop => c.check("open SPC/floor", (r_spc - 1.0).abs() < 0.1, format!("{r_spc:.4}")),
            LoopMode::ClosedLoop => c.check("closed SPC/floor", r_spc > 1.25, format!("{r_spc:.4} > 1.25")),
        }
    }
    runtime_check(&mut c, start, Duration::from_secs(300));
    c.outcome()
}

/// Position after applying the lead-in input and then `u_f[0..τ−1]` from rest.
fn rollout_terminal(dt: f64, u_f: &DVector<f64>, future: usize) -> f64 {
    let (mut p, mut v) = (0.0, 0.0);
    for k in 0..future {
        let u = if k == 0 { 0.0 } else { u_f[k - 1] };
        p += dt * v;
        v += dt * u;
    }
    p
}

fn fit_models(cfg: &ExperimentConfig, mode: LoopMode, seed: u64) -> Result<FittedModels, String> {
    let data = cfg.simulate(mode, cfg.train_len, seed).map_err(|e| e.to_string())?.data;
    fit_all(&data, cfg.past, cfg.future, FitOptions::default()).map_err(|e| e.to_string())
}

fn a7() -> Outcome {
    let cfg = ExperimentConfig::defaults(ExperimentKind::Fig3);
    let specs = [
        MethodSpec { method: Method::Spc, lambda: 0.0 },
        MethodSpec { method: Method::Tpc, lambda: 0.0 },
        MethodSpec { method: Method::TwoNormDdpc, lambda: 0.1 },
    ];
    let mut c = Checks::default();
    let mut err: BTreeMap<(&str, usize), f64> = BTreeMap::new();
    for mode in MODES {
        let tag = mode.as_str();
        let (mut realized, mut planned) = (vec![Vec::new(); 3], vec![Vec::new(); 3]);
        for r in 0..cfg.repeats {
            let models = fit_models(&cfg, mode, derive_seed(7, mode_stream(mode), r as u64))?;
            let plans = plan_realizations(&cfg, &models, &specs).map_err(|e| e.to_string())?;
            for (i, p) in plans.iter().enumerate() {
                let rt = rollout_terminal(cfg.dt, &p.u_f, cfg.future);
                if (rt - p.realized_terminal()).abs() > 1e-9 {
                    return Err(format!("rollout oracle disagrees: {rt} vs {}", p.realized_terminal()));
                }
                realized[i].push(rt);
                planned[i].push(p.planned_terminal());
            }
        }
        for i in 0..2 {
            let e: Vec<f64> = realized[i].iter().map(|r| (r - 1.0).abs()).collect();
            err.insert((tag, i), mean(&e));
        }
        let spc = mean(&realized[0]);
        let tpc = mean(&realized[1]);
        if mode == LoopMode::OpenLoop {
            c.check("open SPC terminal", (spc - 1.0).abs() < 0.1, format!("{spc:.3}"));
        }
        c.check(&format!("{tag} TPC terminal"), (tpc - 1.0).abs() < 0.1, format!("{tpc:.3}"));
        let (pl, re) = (mean(&planned[2]), mean(&realized[2]));
        c.check(&format!("{tag} 2norm realized < planned"), re < pl, format!("{re:.3} < {pl:.3}"));
    }
    let (s, t) = (err[&("closed", 0)], err[&("closed", 1)]);
    c.check("closed SPC miss > TPC miss", s > t, format!("{s:.3} > {t:.3}"));
    c.outcome()
}

fn a8() -> Outcome {
    let cfg = ExperimentConfig::defaults(ExperimentKind::Fig4);
    let mut specs = vec![
        MethodSpec { method: Method::Spc, lambda: 0.0 },
        MethodSpec { method: Method::Tpc, lambda: 0.0 },
    ];
    specs.extend(cfg.lambda_grid.iter().map(|&lambda| MethodSpec {
        method: Method::TwoNormDdpc,
        lambda,
    }));
    let mut c = Checks::default();
    for mode in MODES {
        let mut times = vec![Vec::new(); specs.len()];
        for r in 0..cfg.repeats {
            let models = fit_models(&cfg, mode, derive_seed(8, mode_stream(mode), r as u64))?;
            let runs = tracking_runs(&cfg, &models, &specs, derive_seed(8, 8 + mode_stream(mode), r as u64))
                .map_err(|e| e.to_string())?;
            for (i, (_, run)) in runs.iter().enumerate() {
                let y = &run.trajectory.y;
                // 1-based step index, never-reached runs censored at steps + 1
                let t = (0..y.nrows()).find(|&k| y[(k, 0)] >= 0.9).map_or(y.nrows() + 1, |k| k + 1);
                times[i].push(t as f64);
            }
        }
        let avg: Vec<f64> = times.iter().map(|t| mean(t)).collect();
        match mode {
            LoopMode::ClosedLoop => {
                for (i, spec) in specs.iter().enumerate().skip(2) {
                    c.check(
                        &format!("closed TPC < 2norm(λ={})", spec.lambda),
                        avg[1] < avg[i],
                        format!("{:.2} < {:.2}", avg[1], avg[i]),
                    );
                }
            }
            LoopMode::OpenLoop => {
                let rel = (avg[0] - avg[1]).abs() / avg[1];
                c.check(
                    "open SPC~TPC",
                    rel < 0.2,
                    format!("{:.2} vs {:.2}, rel {rel:.3} < 0.2", avg[0], avg[1]),
                );
            }
        }
    }
    c.outcome()
}

fn read_dir_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        out.insert(name, fs::read(&path).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

fn a9() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut c = Checks::default();
    for kind in [
        ExperimentKind::Fig1,
        ExperimentKind::Fig2,
        ExperimentKind::Fig3,
        ExperimentKind::Fig4,
        ExperimentKind::Custom,
    ] {
        let mut snapshots = Vec::new();
        for run in 0..2 {
            let mut cfg = ExperimentConfig::defaults(kind);
            cfg.repeats = 10;
            cfg.seed = 9;
            cfg.output_dir = tmp.path().join(format!("{}_{run}", kind.as_str()));
            run_experiment(&cfg).map_err(|e| e.to_string())?;
            snapshots.push(read_dir_bytes(&cfg.output_dir)?);
        }
        let csvs = snapshots[0].keys().filter(|k| k.ends_with(".csv")).count();
        c.check(
            kind.as_str(),
            csvs > 0 && snapshots[0] == snapshots[1],
            format!("{} files identical", snapshots[0].len()),
        );
    }
    c.outcome()
}

fn main() -> ExitCode {
    let criteria: [(&str, &str, fn() -> Outcome); 9] = [
        ("A1", "innovation-input correlation", a1),
        ("A2", "bias asymptotics", a2),
        ("A3", "expected bias vs Monte Carlo", a3),
        ("A4", "algebraic identities", a4),
        ("A5", "noise-free degeneracy", a5),
        ("A6", "predictor consistency", a6),
        ("A7", "open-loop plan realization", a7),
        ("A8", "receding-horizon ranking", a8),
        ("A9", "determinism", a9),
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('A')).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let start = Instant::now();
        let res = f();
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("{id} {name} ... PASS ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id} {name} ... FAIL ({secs:.1}s) {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    }
}
