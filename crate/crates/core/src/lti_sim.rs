//! Discrete-time LTI plants with measurement noise, driven open loop or by a
//! static output-feedback law plus Gaussian excitation.
//!
//! The measurement at step `t` is taken before the input of step `t` is
//! applied: `y(t) = C x(t) + e(t)`, `u(t) = K y(t) + α(t)`,
//! `x(t+1) = A x(t) + B u(t)`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hankel::hankel_matrix;
use crate::linalg::{check_triangular_rank, r_factor_of_columns};

/// Plant `x⁺ = A x + B u`, `y = C x + e`, `e ~ N(0, noise_cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    noise_cov: DMatrix<f64>,
    noise_factor: DMatrix<f64>,
    dt: Option<f64>,
}

impl LtiSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        noise_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::dims("state matrix", "square", format!("{:?}", a.shape())));
        }
        if b.nrows() != n {
            return Err(Error::dims("input matrix rows", n, b.nrows()));
        }
        if c.ncols() != n {
            return Err(Error::dims("output matrix columns", n, c.ncols()));
        }
        let q = c.nrows();
        if noise_cov.shape() != (q, q) {
            return Err(Error::dims(
                "noise covariance",
                format!("{q}x{q}"),
                format!("{:?}", noise_cov.shape()),
            ));
        }
        let noise_factor = psd_square_root(&noise_cov)?;
        Ok(Self {
            a,
            b,
            c,
            noise_cov,
            noise_factor,
            dt: None,
        })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }
    /// Sampling period, when the plant came from a discretization.
    pub fn dt(&self) -> Option<f64> {
        self.dt
    }
    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    /// Same plant with a different measurement-noise covariance.
    pub fn with_noise_cov(&self, noise_cov: DMatrix<f64>) -> Result<Self> {
        let mut sys = Self::new(self.a.clone(), self.b.clone(), self.c.clone(), noise_cov)?;
        sys.dt = self.dt;
        Ok(sys)
    }

    /// Noise-free copy of the plant.
    pub fn noise_free(&self) -> Self {
        let q = self.n_outputs();
        self.with_noise_cov(DMatrix::zeros(q, q))
            .expect("zero covariance is valid")
    }

    /// State matrix of the loop closed by `u = K y`.
    pub fn closed_loop_matrix(&self, gain: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a + &self.b * gain * &self.c
    }

    pub(crate) fn sample_noise(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let q = self.n_outputs();
        let z = DVector::from_fn(q, |_, _| StandardNormal.sample(rng));
        &self.noise_factor * z
    }
}

/// Symmetric square root of a PSD matrix; rejects asymmetric or indefinite input.
fn psd_square_root(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = cov.amax().max(1.0);
    if (cov - cov.transpose()).amax() > 1e-12 * scale {
        return Err(Error::InvalidConfig("noise covariance is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(cov.clone());
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
        return Err(Error::InvalidConfig(
            "noise covariance is not positive semidefinite".into(),
        ));
    }
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt) * eig.eigenvectors.transpose())
}

/// Euler-discretized double integrator with position and velocity measured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleIntegratorConfig {
    pub dt: f64,
    pub noise_var: f64,
}

impl Default for DoubleIntegratorConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            noise_var: 1e-4,
        }
    }
}

pub fn make_double_integrator(cfg: DoubleIntegratorConfig) -> Result<LtiSystem> {
    if !(cfg.dt > 0.0) || !cfg.dt.is_finite() {
        return Err(Error::InvalidConfig(format!("dt must be positive, got {}", cfg.dt)));
    }
    if !(cfg.noise_var >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "noise variance must be nonnegative, got {}",
            cfg.noise_var
        )));
    }
    let a = DMatrix::from_row_slice(2, 2, &[1.0, cfg.dt, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, cfg.dt]);
    let c = DMatrix::identity(2, 2);
    let noise = DMatrix::identity(2, 2) * cfg.noise_var;
    let mut sys = LtiSystem::new(a, b, c, noise)?;
    sys.dt = Some(cfg.dt);
    Ok(sys)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LoopMode {
    OpenLoop,
    ClosedLoop,
}

impl LoopMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LoopMode::OpenLoop => "open",
            LoopMode::ClosedLoop => "closed",
        }
    }
}

impl std::str::FromStr for LoopMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open" | "open_loop" | "open-loop" => Ok(LoopMode::OpenLoop),
            "closed" | "closed_loop" | "closed-loop" => Ok(LoopMode::ClosedLoop),
            other => Err(Error::parse("loop mode", other)),
        }
    }
}

/// Training-time input law `u(t) = K y(t) + α(t)`, `α ~ N(0, diag(std²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackLaw {
    gain: DMatrix<f64>,
    excitation_std: DVector<f64>,
    mode: LoopMode,
}

impl FeedbackLaw {
    pub fn open_loop(n_outputs: usize, excitation_std: DVector<f64>) -> Result<Self> {
        let m = excitation_std.len();
        Self::build(DMatrix::zeros(m, n_outputs), excitation_std, LoopMode::OpenLoop)
    }

    pub fn closed_loop(gain: DMatrix<f64>, excitation_std: DVector<f64>) -> Result<Self> {
        if gain.nrows() != excitation_std.len() {
            return Err(Error::dims(
                "feedback gain rows",
                excitation_std.len(),
                gain.nrows(),
            ));
        }
        Self::build(gain, excitation_std, LoopMode::ClosedLoop)
    }

    /// The proportional-derivative law `u = −2.5 y₁ − 3 y₂ + α` used for the
    /// double-integrator experiments.
    pub fn pd_double_integrator(excitation_std: f64) -> Self {
        Self::closed_loop(
            DMatrix::from_row_slice(1, 2, &[-2.5, -3.0]),
            DVector::from_element(1, excitation_std),
        )
        .expect("valid PD law")
    }

    fn build(gain: DMatrix<f64>, excitation_std: DVector<f64>, mode: LoopMode) -> Result<Self> {
        if excitation_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidConfig("excitation std must be nonnegative".into()));
        }
        if !excitation_std.iter().any(|s| *s > 0.0) {
            return Err(Error::InvalidConfig(
                "at least one excitation channel must be strictly positive".into(),
            ));
        }
        Ok(Self {
            gain,
            excitation_std,
            mode,
        })
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }
    pub fn excitation_std(&self) -> &DVector<f64> {
        &self.excitation_std
    }
    pub fn mode(&self) -> LoopMode {
        self.mode
    }
}

/// Everything needed to regenerate a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMeta {
    pub system: LtiSystem,
    pub law: Option<FeedbackLaw>,
    pub burn_in: usize,
}

/// Recorded input/output series, one row per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryData {
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub seed: u64,
    pub meta: TrajectoryMeta,
}

impl TrajectoryData {
    pub fn new(u: DMatrix<f64>, y: DMatrix<f64>, seed: u64, meta: TrajectoryMeta) -> Result<Self> {
        if u.nrows() != y.nrows() {
            return Err(Error::dims("trajectory length", u.nrows(), y.nrows()));
        }
        if u.nrows() == 0 {
            return Err(Error::InsufficientData {
                needed: 1,
                available: 0,
            });
        }
        Ok(Self { u, y, seed, meta })
    }

    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.u.nrows() == 0
    }

    pub fn n_inputs(&self) -> usize {
        self.u.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.y.ncols()
    }

    /// Joint signal `z(t) = [y(t); u(t)]`, one row per step.
    pub fn z(&self) -> DMatrix<f64> {
        let (t, q, m) = (self.len(), self.n_outputs(), self.n_inputs());
        let mut z = DMatrix::zeros(t, q + m);
        z.columns_mut(0, q).copy_from(&self.y);
        z.columns_mut(q, m).copy_from(&self.u);
        z
    }

    pub fn to_csv_string(&self) -> String {
        let (m, q) = (self.n_inputs(), self.n_outputs());
        let mut s = String::from("t");
        for i in 1..=m {
            let _ = write!(s, ",u_{i}");
        }
        for i in 1..=q {
            let _ = write!(s, ",y_{i}");
        }
        s.push('\n');
        for t in 0..self.len() {
            let _ = write!(s, "{t}");
            for v in self.u.row(t).iter().chain(self.y.row(t).iter()) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// SHA-256 of the CSV serialization.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv_string().as_bytes()))
    }

    pub fn metadata_string(&self) -> String {
        let sys = &self.meta.system;
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(
            s,
            "dt={}",
            sys.dt().map(|d| d.to_string()).unwrap_or_default()
        );
        if let Some(law) = &self.meta.law {
            let _ = writeln!(s, "mode={}", law.mode().as_str());
            let _ = writeln!(s, "K={}", format_matrix(law.gain()));
            let _ = writeln!(
                s,
                "excitation_std={}",
                format_list(law.excitation_std().iter())
            );
        }
        let nc = sys.noise_cov();
        let _ = writeln!(s, "noise_var={}", nc[(0, 0)]);
        let _ = writeln!(s, "burn_in={}", self.meta.burn_in);
        let _ = writeln!(s, "A={}", format_matrix(sys.a()));
        let _ = writeln!(s, "B={}", format_matrix(sys.b()));
        let _ = writeln!(s, "C={}", format_matrix(sys.c()));
        let _ = writeln!(s, "noise_cov={}", format_matrix(nc));
        s
    }

    /// Writes `path` (CSV) and `path.meta` (key=value sidecar).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))?;
        let meta = sidecar_path(path);
        fs::write(&meta, self.metadata_string()).map_err(|e| Error::io(&meta, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let meta_path = sidecar_path(path);
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        Self::from_csv_strings(&text, &meta_text)
    }

    pub fn from_csv_strings(csv: &str, meta: &str) -> Result<Self> {
        let mut lines = csv.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse("trajectory CSV", "empty file"))?;
        let cols: Vec<&str> = header.split(',').collect();
        let m = cols.iter().filter(|c| c.starts_with("u_")).count();
        let q = cols.iter().filter(|c| c.starts_with("y_")).count();
        if cols.first() != Some(&"t") || cols.len() != 1 + m + q {
            return Err(Error::parse("trajectory CSV header", header));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let vals = line
                .split(',')
                .skip(1)
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse("trajectory CSV", format!("row {i}: {e}")))?;
            if vals.len() != m + q {
                return Err(Error::parse("trajectory CSV", format!("row {i} width")));
            }
            rows.push(vals);
        }
        let t = rows.len();
        let u = DMatrix::from_fn(t, m, |r, c| rows[r][c]);
        let y = DMatrix::from_fn(t, q, |r, c| rows[r][m + c]);

        let kv = parse_key_values(meta)?;
        let get = |k: &str| {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::parse("trajectory metadata", format!("missing key {k}")))
        };
        let seed = get("seed")?
            .parse()
            .map_err(|_| Error::parse("trajectory metadata", "seed"))?;
        let burn_in = get("burn_in")?
            .parse()
            .map_err(|_| Error::parse("trajectory metadata", "burn_in"))?;
        let mut system = LtiSystem::new(
            parse_matrix(get("A")?)?,
            parse_matrix(get("B")?)?,
            parse_matrix(get("C")?)?,
            parse_matrix(get("noise_cov")?)?,
        )?;
        let dt = get("dt")?;
        if !dt.is_empty() {
            system.dt = Some(dt.parse().map_err(|_| Error::parse("trajectory metadata", "dt"))?);
        }
        let law = match kv.iter().find(|(k, _)| k == "mode") {
            None => None,
            Some((_, mode)) => {
                let mode: LoopMode = mode.parse()?;
                let std = DVector::from_vec(parse_list(get("excitation_std")?)?);
                Some(match mode {
                    LoopMode::OpenLoop => FeedbackLaw::open_loop(q, std)?,
                    LoopMode::ClosedLoop => FeedbackLaw::closed_loop(parse_matrix(get("K")?)?, std)?,
                })
            }
        };
        Self::new(
            u,
            y,
            seed,
            TrajectoryMeta {
                system,
                law,
                burn_in,
            },
        )
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub(crate) fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::parse("key=value line", l))
        })
        .collect()
}

pub(crate) fn format_list<'a>(vals: impl Iterator<Item = &'a f64>) -> String {
    vals.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Rows separated by `;`, entries by `,`.
pub(crate) fn format_matrix(m: &DMatrix<f64>) -> String {
    (0..m.nrows())
        .map(|r| format_list(m.row(r).iter()))
        .collect::<Vec<_>>()
        .join(";")
}

pub(crate) fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::parse("number list", s))
        })
        .collect()
}

pub(crate) fn parse_matrix(s: &str) -> Result<DMatrix<f64>> {
    let rows = s.split(';').map(parse_list).collect::<Result<Vec<_>>>()?;
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::parse("matrix", s));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

/// Trajectory plus the hidden state sequence (`T × n`, state at each recorded step).
#[derive(Debug, Clone)]
pub struct SimulationRecord {
    pub data: TrajectoryData,
    pub states: DMatrix<f64>,
    /// State after the last recorded step.
    pub final_state: DVector<f64>,
}

pub fn simulate(
    sys: &LtiSystem,
    law: &FeedbackLaw,
    steps: usize,
    x0: &DVector<f64>,
    seed: u64,
) -> Result<TrajectoryData> {
    Ok(simulate_with_states(sys, law, steps, 0, x0, seed)?.data)
}

/// Like [`simulate`] but first runs `burn_in` unrecorded steps.
pub fn simulate_with_burn_in(
    sys: &LtiSystem,
    law: &FeedbackLaw,
    steps: usize,
    burn_in: usize,
    x0: &DVector<f64>,
    seed: u64,
) -> Result<TrajectoryData> {
    Ok(simulate_with_states(sys, law, steps, burn_in, x0, seed)?.data)
}

pub fn simulate_with_states(
    sys: &LtiSystem,
    law: &FeedbackLaw,
    steps: usize,
    burn_in: usize,
    x0: &DVector<f64>,
    seed: u64,
) -> Result<SimulationRecord> {
    let (n, m, q) = (sys.n_states(), sys.n_inputs(), sys.n_outputs());
    if steps == 0 {
        return Err(Error::InsufficientData {
            needed: 1,
            available: 0,
        });
    }
    if x0.len() != n {
        return Err(Error::dims("initial state", n, x0.len()));
    }
    if law.gain().shape() != (m, q) {
        return Err(Error::dims(
            "feedback gain",
            format!("{m}x{q}"),
            format!("{:?}", law.gain().shape()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x0.clone();
    let mut u_rec = DMatrix::zeros(steps, m);
    let mut y_rec = DMatrix::zeros(steps, q);
    let mut x_rec = DMatrix::zeros(steps, n);
    for t in 0..burn_in + steps {
        let y = sys.c() * &x + sys.sample_noise(&mut rng);
        let alpha = DVector::from_fn(m, |i, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * law.excitation_std()[i]
        });
        let u = law.gain() * &y + alpha;
        if t >= burn_in {
            let r = t - burn_in;
            u_rec.row_mut(r).copy_from(&u.transpose());
            y_rec.row_mut(r).copy_from(&y.transpose());
            x_rec.row_mut(r).copy_from(&x.transpose());
        }
        x = sys.a() * &x + sys.b() * &u;
    }
    let data = TrajectoryData::new(
        u_rec,
        y_rec,
        seed,
        TrajectoryMeta {
            system: sys.clone(),
            law: Some(law.clone()),
            burn_in,
        },
    )?;
    Ok(SimulationRecord {
        data,
        states: x_rec,
        final_state: x,
    })
}

/// Applies `u_f` (rows = steps) open loop from `x0`, returning the output
/// measured after each input: `x ← A x + B u(k)`, `y(k) = C x + e`.
pub fn apply_input_sequence(
    sys: &LtiSystem,
    x0: &DVector<f64>,
    u_f: &DMatrix<f64>,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if u_f.nrows() == 0 {
        return Err(Error::InsufficientData {
            needed: 1,
            available: 0,
        });
    }
    if u_f.ncols() != sys.n_inputs() {
        return Err(Error::dims("input sequence width", sys.n_inputs(), u_f.ncols()));
    }
    if x0.len() != sys.n_states() {
        return Err(Error::dims("initial state", sys.n_states(), x0.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x0.clone();
    let mut y = DMatrix::zeros(u_f.nrows(), sys.n_outputs());
    for k in 0..u_f.nrows() {
        x = sys.a() * &x + sys.b() * u_f.row(k).transpose();
        let yk = sys.c() * &x + sys.sample_noise(&mut rng);
        y.row_mut(k).copy_from(&yk.transpose());
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersistencyReport {
    pub ok: bool,
    /// Smallest eigenvalue of `U_[1,ρ+τ−1] U_[1,ρ+τ−1]ᵀ`.
    pub min_eigenvalue: f64,
    /// Whether every `Z_[1,l] Z_[1,l]ᵀ`, `l ∈ [ρ, ρ+τ−1]`, is numerically nonsingular.
    pub joint_gram_nonsingular: bool,
}

pub fn check_persistency(
    data: &TrajectoryData,
    past: usize,
    future: usize,
    c_min: f64,
) -> Result<PersistencyReport> {
    if past == 0 || future == 0 {
        return Err(Error::InvalidConfig("horizons must be positive".into()));
    }
    let t = data.len();
    let needed = past + future;
    if t < needed {
        return Err(Error::InsufficientData {
            needed,
            available: t,
        });
    }
    // same column set as the Hankel partitions
    let n = t - needed + 1;
    let depth = past + future - 1;
    let uh = hankel_matrix(&data.u, 1, depth, n)?;
    let gram = &uh * uh.transpose();
    let min_eigenvalue = SymmetricEigen::new(gram).eigenvalues.min().max(0.0);

    let width = data.n_inputs() + data.n_outputs();
    let zh = hankel_matrix(&data.z(), 1, depth, n)?;
    let r = r_factor_of_columns(&zh);
    let joint_gram_nonsingular = (past..=depth)
        .all(|l| check_triangular_rank(&r, width * l, "joint data Gram matrix", Some(l)).is_ok());

    Ok(PersistencyReport {
        ok: min_eigenvalue > c_min && joint_gram_nonsingular,
        min_eigenvalue,
        joint_gram_nonsingular,
    })
}
