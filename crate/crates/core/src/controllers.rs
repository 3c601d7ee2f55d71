//! Predictive controllers for quadratic tracking costs: SPC and TPC through a
//! linear multistep predictor, 2norm-DDPC over the LQ coordinates `γ`, and
//! DeePC over the Hankel combination vector `g`.
//!
//! Every controller is split into a prepared form, which factorizes all
//! matrices that do not depend on the lead-in `z_p`, and a cheap per-query
//! solve used by the receding-horizon loop.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::{Horizons, LqFactors, SubspacePredictor, TransientBank};
use crate::hankel::HankelSet;
use crate::linalg::{vconcat, SINGULARITY_TOL};
use crate::lti_sim::{apply_input_sequence, LtiSystem, TrajectoryData, TrajectoryMeta};

/// `J = ‖y_f − y_r‖²_Q + ‖u_f‖²_R`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingCost {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    y_r: DVector<f64>,
}

impl TrackingCost {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, y_r: DVector<f64>) -> Result<Self> {
        if !q.is_square() || q.nrows() != y_r.len() {
            return Err(Error::dims("output weight Q", y_r.len(), format!("{:?}", q.shape())));
        }
        if !r.is_square() {
            return Err(Error::dims("input weight R", r.nrows(), format!("{:?}", r.shape())));
        }
        let scale = q.amax().max(1.0);
        if (&q - q.transpose()).amax() > 1e-12 * scale || (&r - r.transpose()).amax() > 1e-12 * r.amax() {
            return Err(Error::InvalidConfig("cost weights must be symmetric".into()));
        }
        if q.clone().symmetric_eigenvalues().min() < -1e-12 * scale {
            return Err(Error::InvalidConfig("output weight Q must be positive semidefinite".into()));
        }
        if r.clone().cholesky().is_none() {
            return Err(Error::InvalidConfig("input weight R must be positive definite".into()));
        }
        Ok(Self { q, r, y_r })
    }

    /// `Q = I_τ ⊗ Q₁`, `R = I_τ ⊗ R₁`, `y_r` the per-step reference repeated.
    pub fn repeated(q1: &DMatrix<f64>, r1: &DMatrix<f64>, y_ref: &DVector<f64>, future: usize) -> Result<Self> {
        let eye = DMatrix::<f64>::identity(future, future);
        let y_r = DVector::from_fn(y_ref.len() * future, |i, _| y_ref[i % y_ref.len()]);
        Self::new(eye.kronecker(q1), eye.kronecker(r1), y_r)
    }

    /// Position/velocity tracking of the double integrator: `Q₁ = diag(1000, 10)`,
    /// `R₁ = 1`, reference position 1 at rest.
    pub fn double_integrator(future: usize) -> Self {
        Self::repeated(
            &DMatrix::from_diagonal(&DVector::from_vec(vec![1000.0, 10.0])),
            &DMatrix::identity(1, 1),
            &DVector::from_vec(vec![1.0, 0.0]),
            future,
        )
        .expect("valid double-integrator cost")
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn y_r(&self) -> &DVector<f64> {
        &self.y_r
    }

    pub fn evaluate(&self, u_f: &DVector<f64>, y_f: &DVector<f64>) -> f64 {
        let e = y_f - &self.y_r;
        e.dot(&(&self.q * &e)) + u_f.dot(&(&self.r * u_f))
    }

    fn check(&self, dims: Horizons) -> Result<()> {
        if self.y_r.len() != dims.yf_dim() {
            return Err(Error::dims("reference length", dims.yf_dim(), self.y_r.len()));
        }
        if self.r.nrows() != dims.uf_dim() {
            return Err(Error::dims("input weight size", dims.uf_dim(), self.r.nrows()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Spc,
    Tpc,
    TwoNormDdpc,
    Deepc,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Spc => "spc",
            Method::Tpc => "tpc",
            Method::TwoNormDdpc => "2norm-ddpc",
            Method::Deepc => "deepc",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spc" => Ok(Method::Spc),
            "tpc" => Ok(Method::Tpc),
            "2norm-ddpc" | "2norm" | "twonormddpc" | "2norm_ddpc" => Ok(Method::TwoNormDdpc),
            "deepc" => Ok(Method::Deepc),
            other => Err(Error::parse("control method", other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlQuery {
    pub z_p: DVector<f64>,
    pub cost: TrackingCost,
    pub method: Method,
    /// Regularization weight; used by 2norm-DDPC and DeePC only.
    pub lambda: f64,
    /// `λ‖γ‖²` when true, `λ‖γ‖` otherwise.
    pub squared_reg: bool,
}

impl ControlQuery {
    pub fn new(z_p: DVector<f64>, cost: TrackingCost, method: Method) -> Self {
        Self {
            z_p,
            cost,
            method,
            lambda: 0.0,
            squared_reg: true,
        }
    }

    pub fn with_lambda(mut self, lambda: f64, squared: bool) -> Self {
        self.lambda = lambda;
        self.squared_reg = squared;
        self
    }

    fn expect(&self, method: Method) -> Result<()> {
        if self.method != method {
            return Err(Error::InvalidConfig(format!(
                "query for {} passed to the {} solver",
                self.method.as_str(),
                method.as_str()
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("λ must be finite and nonnegative, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlResult {
    pub u_f: DVector<f64>,
    pub y_pred: DVector<f64>,
    /// `γ` for 2norm-DDPC, `g` for DeePC.
    pub multiplier: Option<DVector<f64>>,
    /// Tracking cost `J(u_f, y_pred)`.
    pub tracking_cost: f64,
    /// `J` plus the regularization term.
    pub objective: f64,
    /// `‖z_p − (lead-in rows of the data constraint)‖`; zero for SPC/TPC.
    pub constraint_residual: f64,
}

impl ControlResult {
    /// `t,u_1..u_m,y_1..y_q` rows for the planned horizon.
    pub fn to_csv_string(&self, dims: Horizons) -> String {
        let (q, m) = (dims.n_outputs, dims.n_inputs);
        let mut s = String::from("t");
        for i in 1..=m {
            let _ = write!(s, ",u_{i}");
        }
        for i in 1..=q {
            let _ = write!(s, ",y_{i}");
        }
        s.push('\n');
        for k in 0..dims.future {
            let _ = write!(s, "{k}");
            for i in 0..m {
                let _ = write!(s, ",{}", self.u_f[k * m + i]);
            }
            for i in 0..q {
                let _ = write!(s, ",{}", self.y_pred[k * q + i]);
            }
            s.push('\n');
        }
        s
    }
}

/// A controller ready to answer queries for any lead-in.
pub trait Planner {
    fn plan(&self, z_p: &DVector<f64>) -> Result<ControlResult>;
    fn dims(&self) -> Horizons;
    fn method(&self) -> Method;
}

fn check_zp(dims: Horizons, z_p: &DVector<f64>) -> Result<()> {
    if z_p.len() != dims.zp_dim() {
        return Err(Error::dims("lead-in z_p", dims.zp_dim(), z_p.len()));
    }
    Ok(())
}

/// SPC or TPC: `y_f = P_p z_p + P_u u_f` substituted into the cost.
#[derive(Debug, Clone)]
pub struct PredictorController {
    p_p: DMatrix<f64>,
    p_u: DMatrix<f64>,
    cost: TrackingCost,
    /// `(P_uᵀ Q P_u + R)⁻¹ P_uᵀ Q`
    gain: DMatrix<f64>,
    dims: Horizons,
    method: Method,
}

impl PredictorController {
    pub fn new(predictor: &DMatrix<f64>, dims: Horizons, cost: TrackingCost, method: Method) -> Result<Self> {
        if predictor.shape() != (dims.yf_dim(), dims.v_dim()) {
            return Err(Error::dims(
                "multistep predictor",
                format!("{}x{}", dims.yf_dim(), dims.v_dim()),
                format!("{:?}", predictor.shape()),
            ));
        }
        cost.check(dims)?;
        let p_p = predictor.columns(0, dims.zp_dim()).clone_owned();
        let p_u = predictor.columns(dims.zp_dim(), dims.uf_dim()).clone_owned();
        let pq = p_u.transpose() * cost.q();
        let mut hess = &pq * &p_u + cost.r();
        hess = (&hess + hess.transpose()) * 0.5;
        let chol = hess
            .cholesky()
            .ok_or_else(|| Error::Solver("reduced Hessian is not positive definite".into()))?;
        let gain = chol.solve(&pq);
        Ok(Self {
            p_p,
            p_u,
            cost,
            gain,
            dims,
            method,
        })
    }

    pub fn spc(s: &SubspacePredictor, cost: TrackingCost) -> Result<Self> {
        Self::new(&s.s, s.dims, cost, Method::Spc)
    }

    pub fn tpc(bank: &TransientBank, cost: TrackingCost) -> Result<Self> {
        Self::new(&bank.h_hat, bank.dims, cost, Method::Tpc)
    }
}

impl Planner for PredictorController {
    fn plan(&self, z_p: &DVector<f64>) -> Result<ControlResult> {
        check_zp(self.dims, z_p)?;
        let free = &self.p_p * z_p;
        let u_f = -(&self.gain * (&free - self.cost.y_r()));
        let y_pred = free + &self.p_u * &u_f;
        let j = self.cost.evaluate(&u_f, &y_pred);
        Ok(ControlResult {
            u_f,
            y_pred,
            multiplier: None,
            tracking_cost: j,
            objective: j,
            constraint_residual: 0.0,
        })
    }
    fn dims(&self) -> Horizons {
        self.dims
    }
    fn method(&self) -> Method {
        self.method
    }
}

pub fn solve_spc(s: &SubspacePredictor, query: &ControlQuery) -> Result<ControlResult> {
    query.expect(Method::Spc)?;
    PredictorController::spc(s, query.cost.clone())?.plan(&query.z_p)
}

pub fn solve_tpc(bank: &TransientBank, query: &ControlQuery) -> Result<ControlResult> {
    query.expect(Method::Tpc)?;
    PredictorController::tpc(bank, query.cost.clone())?.plan(&query.z_p)
}

/// 2norm-DDPC over `γ` with `[z_p; u_f; y_f] = L γ`.
///
/// `L` is lower triangular, so the lead-in rows only involve the leading
/// `(q+m)ρ` entries of `γ`. Those are pinned through a pseudo-inverse of the
/// leading block (exact when it is nonsingular), and the objective is
/// minimized over the null space of the constraint.
#[derive(Debug, Clone)]
pub struct GammaController {
    l_u: DMatrix<f64>,
    l_y: DMatrix<f64>,
    /// Maps `z_p` to the minimum-norm feasible `γ`.
    pinv: DMatrix<f64>,
    /// Orthonormal basis of the constraint null space.
    null: DMatrix<f64>,
    l_p: DMatrix<f64>,
    cost: TrackingCost,
    lambda: f64,
    squared: bool,
    /// Squared form only: the optimum is affine in the lead-in,
    /// `γ = offset + slope · z_p`.
    affine: Option<(DVector<f64>, DMatrix<f64>)>,
    dims: Horizons,
}

impl GammaController {
    pub fn new(lq: &LqFactors, cost: TrackingCost, lambda: f64, squared: bool) -> Result<Self> {
        let dims = lq.dims;
        cost.check(dims)?;
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("λ must be finite and nonnegative, got {lambda}")));
        }
        let l = lq.l();
        let k = l.ncols();
        let (zp, uf) = (dims.zp_dim(), dims.uf_dim());
        let l_p = l.rows(0, zp).clone_owned();
        let l_u = l.rows(zp, uf).clone_owned();
        let l_y = l.rows(zp + uf, dims.yf_dim()).clone_owned();

        let lpp = l_p.columns(0, zp).clone_owned();
        let svd = lpp.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let smax = svd.singular_values.max();
        let tol = SINGULARITY_TOL * smax.max(f64::MIN_POSITIVE);
        let keep: Vec<usize> = (0..zp).filter(|i| svd.singular_values[*i] > tol).collect();
        let drop: Vec<usize> = (0..zp).filter(|i| svd.singular_values[*i] <= tol).collect();

        let mut pinv = DMatrix::zeros(k, zp);
        for &i in &keep {
            let vi = vt.row(i).transpose();
            let ui = u.column(i);
            let mut block = pinv.rows_mut(0, zp);
            block += (vi * ui.transpose()) / svd.singular_values[i];
        }
        let free = k - zp;
        let mut null = DMatrix::zeros(k, drop.len() + free);
        for (c, &i) in drop.iter().enumerate() {
            null.view_mut((0, c), (zp, 1)).copy_from(&vt.row(i).transpose());
        }
        null.view_mut((zp, drop.len()), (free, free)).fill_with_identity();

        let mut ctl = Self {
            l_u,
            l_y,
            pinv,
            null,
            l_p,
            cost,
            lambda,
            squared,
            affine: None,
            dims,
        };
        if squared {
            let chol = ctl.factor(lambda)?;
            let g = ctl.hessian(lambda);
            let nt = ctl.null.transpose();
            let offset = &ctl.null * chol.solve(&(&nt * ctl.linear_term()));
            let slope = &ctl.pinv - &ctl.null * chol.solve(&(&nt * g * &ctl.pinv));
            ctl.affine = Some((offset, slope));
        }
        Ok(ctl)
    }

    /// `G(μ) = L_yᵀ Q L_y + L_uᵀ R L_u + μ I`.
    fn hessian(&self, mu: f64) -> DMatrix<f64> {
        let k = self.l_u.ncols();
        let g = self.l_y.transpose() * self.cost.q() * &self.l_y + self.l_u.transpose() * self.cost.r() * &self.l_u;
        (&g + g.transpose()) * 0.5 + DMatrix::identity(k, k) * mu
    }

    fn factor(&self, mu: f64) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let g = self.hessian(mu);
        let red = self.null.transpose() * g * &self.null;
        let red = (&red + red.transpose()) * 0.5;
        let scale = red.diagonal().amax().max(f64::MIN_POSITIVE);
        let chol = red.cholesky().ok_or(Error::Solver(format!(
            "KKT system is singular: λ = {} is too small for the conditioning of the data",
            self.lambda
        )))?;
        let dmin = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, b| a.min(*b));
        if dmin * dmin <= 1e-14 * scale {
            return Err(Error::Solver(format!(
                "KKT system is singular: λ = {} is too small for the conditioning of the data",
                self.lambda
            )));
        }
        Ok(chol)
    }

    /// `L_yᵀ Q y_r`
    fn linear_term(&self) -> DVector<f64> {
        self.l_y.transpose() * (self.cost.q() * self.cost.y_r())
    }

    fn gamma_for(&self, z_p: &DVector<f64>, mu: f64, chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> DVector<f64> {
        let g0 = &self.pinv * z_p;
        let g = self.hessian(mu);
        let rhs = self.null.transpose() * (self.linear_term() - &g * &g0);
        let w = chol.solve(&rhs);
        g0 + &self.null * w
    }

    /// Solves `min J + μ‖γ‖²` for the `μ` making it stationary for `λ‖γ‖`,
    /// i.e. `2 μ ‖γ(μ)‖ = λ`, by bisection on `log μ`.
    fn unsquared_gamma(&self, z_p: &DVector<f64>) -> Result<DVector<f64>> {
        if self.lambda == 0.0 {
            let chol = self.factor(0.0)?;
            return Ok(self.gamma_for(z_p, 0.0, &chol));
        }
        let excess = |mu: f64| -> Result<(f64, DVector<f64>)> {
            let chol = self.factor(mu)?;
            let g = self.gamma_for(z_p, mu, &chol);
            Ok((2.0 * mu * g.norm() - self.lambda, g))
        };
        let (mut lo, mut hi) = (self.lambda * 1e-3, self.lambda);
        let mut lo_res = excess(lo);
        let mut guard = 0;
        while matches!(&lo_res, Ok((f, _)) if *f > 0.0) && guard < 60 {
            hi = lo;
            lo *= 1e-2;
            lo_res = excess(lo);
            guard += 1;
        }
        let mut hi_val = excess(hi)?;
        guard = 0;
        while hi_val.0 < 0.0 && guard < 60 {
            lo = hi;
            hi *= 1e2;
            hi_val = excess(hi)?;
            guard += 1;
        }
        if hi_val.0 < 0.0 {
            return Err(Error::Solver("could not bracket the unsquared regularization weight".into()));
        }
        let mut best = hi_val.1;
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            match excess(mid) {
                Ok((f, g)) if f <= 0.0 => {
                    lo = mid;
                    if f == 0.0 {
                        return Ok(g);
                    }
                }
                Ok((_, g)) => {
                    hi = mid;
                    best = g;
                }
                // too small a weight for the data: move up
                Err(_) => lo = mid,
            }
            if hi / lo - 1.0 < 1e-13 {
                break;
            }
        }
        Ok(best)
    }
}

impl Planner for GammaController {
    fn plan(&self, z_p: &DVector<f64>) -> Result<ControlResult> {
        check_zp(self.dims, z_p)?;
        let gamma = match &self.affine {
            Some((offset, slope)) => offset + slope * z_p,
            None => self.unsquared_gamma(z_p)?,
        };
        let u_f = &self.l_u * &gamma;
        let y_pred = &self.l_y * &gamma;
        let j = self.cost.evaluate(&u_f, &y_pred);
        let reg = if self.squared {
            self.lambda * gamma.norm_squared()
        } else {
            self.lambda * gamma.norm()
        };
        let constraint_residual = (&self.l_p * &gamma - z_p).norm();
        Ok(ControlResult {
            u_f,
            y_pred,
            multiplier: Some(gamma),
            tracking_cost: j,
            objective: j + reg,
            constraint_residual,
        })
    }
    fn dims(&self) -> Horizons {
        self.dims
    }
    fn method(&self) -> Method {
        Method::TwoNormDdpc
    }
}

pub fn solve_2norm_ddpc(lq: &LqFactors, query: &ControlQuery) -> Result<ControlResult> {
    query.expect(Method::TwoNormDdpc)?;
    GammaController::new(lq, query.cost.clone(), query.lambda, query.squared_reg)?.plan(&query.z_p)
}

/// DeePC with `λ‖g‖²` over the `N` Hankel columns, solved as one KKT system
/// in `(g, ν)` with `Z_p g = z_p`.
#[derive(Debug, Clone)]
pub struct DeepcController {
    uf: DMatrix<f64>,
    yf: DMatrix<f64>,
    zp: DMatrix<f64>,
    kkt: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    cost: TrackingCost,
    lambda: f64,
    dims: Horizons,
}

impl DeepcController {
    pub fn new(h: &HankelSet, cost: TrackingCost, lambda: f64) -> Result<Self> {
        let dims = Horizons {
            past: h.past,
            future: h.future,
            n_outputs: h.n_outputs,
            n_inputs: h.n_inputs,
        };
        cost.check(dims)?;
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("DeePC needs a positive finite λ, got {lambda}")));
        }
        let n = h.n_cols;
        let zp = dims.zp_dim();
        let hess = (h.uf.transpose() * cost.r() * &h.uf + h.yf.transpose() * cost.q() * &h.yf
            + DMatrix::identity(n, n) * lambda)
            * 2.0;
        let mut kkt = DMatrix::zeros(n + zp, n + zp);
        kkt.view_mut((0, 0), (n, n)).copy_from(&hess);
        kkt.view_mut((0, n), (n, zp)).copy_from(&h.zp.transpose());
        kkt.view_mut((n, 0), (zp, n)).copy_from(&h.zp);
        let lu = kkt.clone().lu();
        if !lu.is_invertible() {
            return Err(Error::Solver(format!(
                "DeePC KKT system is singular for λ = {lambda}"
            )));
        }
        Ok(Self {
            uf: h.uf.clone(),
            yf: h.yf.clone(),
            zp: h.zp.clone(),
            kkt,
            lu,
            cost,
            lambda,
            dims,
        })
    }
}

impl Planner for DeepcController {
    fn plan(&self, z_p: &DVector<f64>) -> Result<ControlResult> {
        check_zp(self.dims, z_p)?;
        let n = self.uf.ncols();
        let rhs = vconcat(&[&((self.yf.transpose() * (self.cost.q() * self.cost.y_r())) * 2.0), z_p]);
        let sol = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::Solver("DeePC KKT solve failed".into()))?;
        let res = (&self.kkt * &sol - &rhs).norm();
        if !res.is_finite() || res > 1e-6 * rhs.norm().max(1.0) {
            return Err(Error::Solver(format!(
                "DeePC KKT system is numerically singular for λ = {} (residual {res:e})",
                self.lambda
            )));
        }
        let g = sol.rows(0, n).clone_owned();
        let u_f = &self.uf * &g;
        let y_pred = &self.yf * &g;
        let j = self.cost.evaluate(&u_f, &y_pred);
        Ok(ControlResult {
            constraint_residual: (&self.zp * &g - z_p).norm(),
            u_f,
            y_pred,
            tracking_cost: j,
            objective: j + self.lambda * g.norm_squared(),
            multiplier: Some(g),
        })
    }
    fn dims(&self) -> Horizons {
        self.dims
    }
    fn method(&self) -> Method {
        Method::Deepc
    }
}

pub fn solve_deepc(h: &HankelSet, query: &ControlQuery) -> Result<ControlResult> {
    query.expect(Method::Deepc)?;
    if !query.squared_reg {
        return Err(Error::InvalidConfig("DeePC supports the squared regularizer only".into()));
    }
    DeepcController::new(h, query.cost.clone(), query.lambda)?.plan(&query.z_p)
}

/// Realized outputs of a plan applied open loop: from state `x_t` with the
/// already committed input `u_t`, then `u_f`; one output row per planned step.
pub fn realize_plan(
    sys: &LtiSystem,
    x_t: &DVector<f64>,
    u_t: &DVector<f64>,
    u_f: &DVector<f64>,
    future: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let m = sys.n_inputs();
    if u_t.len() != m || u_f.len() != m * future {
        return Err(Error::dims("plan inputs", m * future, u_f.len()));
    }
    let mut inputs = DMatrix::zeros(future, m);
    inputs.row_mut(0).copy_from(&u_t.transpose());
    for k in 1..future {
        inputs
            .row_mut(k)
            .copy_from(&u_f.rows((k - 1) * m, m).transpose());
    }
    apply_input_sequence(sys, x_t, &inputs, seed)
}

/// Closed-loop run of a planner that replans every step.
#[derive(Debug, Clone)]
pub struct RecedingHorizonRun {
    /// One row per step: the applied input and the output measured after it
    /// was committed.
    pub trajectory: TrajectoryData,
}

/// Runs `planner` in closed loop with `sys` for `steps` steps.
///
/// The lead-in buffer starts with `ρ` zero samples and the plant starts at
/// `x0`. At each step the first planned input is committed, the plant advances
/// under the previously committed input, a noisy output is measured and the
/// new sample joins the buffer.
pub fn run_receding_horizon(
    sys: &LtiSystem,
    planner: &dyn Planner,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
) -> Result<RecedingHorizonRun> {
    let dims = planner.dims();
    let (q, m) = (dims.n_outputs, dims.n_inputs);
    if sys.n_outputs() != q || sys.n_inputs() != m {
        return Err(Error::dims("plant channels", format!("q={q} m={m}"), format!("q={} m={}", sys.n_outputs(), sys.n_inputs())));
    }
    if x0.len() != sys.n_states() {
        return Err(Error::dims("initial state", sys.n_states(), x0.len()));
    }
    let zw = q + m;
    let mut buffer: Vec<f64> = vec![0.0; zw * dims.past];
    let mut x = x0.clone();
    let mut last_u = DVector::zeros(m);
    let mut u_rec = DMatrix::zeros(steps, m);
    let mut y_rec = DMatrix::zeros(steps, q);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    for t in 0..steps {
        let start = buffer.len() - zw * dims.past;
        let z_p = DVector::from_column_slice(&buffer[start..]);
        let plan = planner
            .plan(&z_p)
            .map_err(|e| Error::SolverFailureAtStep { step: t, source: Box::new(e) })?;
        let u_next = plan.u_f.rows(0, m).clone_owned();
        x = sys.a() * &x + sys.b() * &last_u;
        let y = sys.c() * &x + sys.sample_noise(&mut rng);
        u_rec.row_mut(t).copy_from(&u_next.transpose());
        y_rec.row_mut(t).copy_from(&y.transpose());
        buffer.extend(y.iter());
        buffer.extend(u_next.iter());
        last_u = u_next;
    }
    let trajectory = TrajectoryData::new(
        u_rec,
        y_rec,
        seed,
        TrajectoryMeta {
            system: sys.clone(),
            law: None,
            burn_in: 0,
        },
    )?;
    Ok(RecedingHorizonRun { trajectory })
}

/// 1-based index of the first sample of `signal` at or above `threshold`.
pub fn time_to_reach(signal: &[f64], threshold: f64) -> Option<usize> {
    signal.iter().position(|v| *v >= threshold).map(|i| i + 1)
}

/// Per-run summary row of a receding-horizon experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingSummary {
    pub method: Method,
    pub lambda: f64,
    pub seed: u64,
    /// `|y₁(T) − r|` at the last step.
    pub terminal_error: f64,
    /// Steps until the first output reaches 90% of the reference, `None` if
    /// it never does.
    pub time_to_90: Option<usize>,
    pub steps: usize,
}

impl TrackingSummary {
    pub const CSV_HEADER: &'static str = "method,lambda,seed,terminal_error,time_to_90,reached";

    pub fn from_run(run: &RecedingHorizonRun, method: Method, lambda: f64, reference: f64) -> Self {
        let pos: Vec<f64> = run.trajectory.y.column(0).iter().cloned().collect();
        Self {
            method,
            lambda,
            seed: run.trajectory.seed,
            terminal_error: (pos.last().copied().unwrap_or(0.0) - reference).abs(),
            time_to_90: time_to_reach(&pos, 0.9 * reference),
            steps: pos.len(),
        }
    }

    /// Time to 90%, censored at `steps + 1` when the reference is never reached.
    pub fn censored_time(&self) -> usize {
        self.time_to_90.unwrap_or(self.steps + 1)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.method.as_str(),
            self.lambda,
            self.seed,
            self.terminal_error,
            self.censored_time(),
            self.time_to_90.is_some()
        )
    }
}

/// Reassembles `[z_p; u_f]`.
pub fn lead_in_and_inputs(z_p: &DVector<f64>, u_f: &DVector<f64>) -> DVector<f64> {
    vconcat(&[z_p, u_f])
}
