//! Predictors fitted from training Hankels: the sample Subspace Predictor, the
//! LQ factors used by γ-DDPC, the transient single-step predictor bank with its
//! assembled multistep predictor, the sample innovations and the estimated
//! Subspace Bias Predictor.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hankel::{build_hankel_set, hankel_matrix, joint_window, matrix_to_csv, HankelSet};
use crate::linalg::{
    check_triangular_rank, coefficients_from_r, hstack, lq, ridge_regression_svd,
    TriangularAccumulator,
};
use crate::lti_sim::TrajectoryData;

/// Regression settings shared by every fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Ridge added to each regressor Gram matrix. Zero means plain least
    /// squares, with singular regressors reported as errors.
    pub ridge: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { ridge: 0.0 }
    }
}

/// Block dimensions shared by all predictors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Horizons {
    pub past: usize,
    pub future: usize,
    pub n_outputs: usize,
    pub n_inputs: usize,
}

impl Horizons {
    pub fn of(h: &HankelSet) -> Self {
        Self {
            past: h.past,
            future: h.future,
            n_outputs: h.n_outputs,
            n_inputs: h.n_inputs,
        }
    }
    /// `(q+m)ρ`
    pub fn zp_dim(&self) -> usize {
        (self.n_outputs + self.n_inputs) * self.past
    }
    /// `mτ`
    pub fn uf_dim(&self) -> usize {
        self.n_inputs * self.future
    }
    /// `qτ`
    pub fn yf_dim(&self) -> usize {
        self.n_outputs * self.future
    }
    /// `(q+m)ρ + mτ`
    pub fn v_dim(&self) -> usize {
        self.zp_dim() + self.uf_dim()
    }
}

/// `Ŝ = Y_f Vᵀ (V Vᵀ)⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspacePredictor {
    pub s: DMatrix<f64>,
    pub dims: Horizons,
}

impl SubspacePredictor {
    pub fn predict(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.s * v
    }
    /// Columns acting on `z_p`.
    pub fn past_block(&self) -> DMatrix<f64> {
        self.s.columns(0, self.dims.zp_dim()).clone_owned()
    }
    /// Columns acting on `u_f`.
    pub fn input_block(&self) -> DMatrix<f64> {
        self.s.columns(self.dims.zp_dim(), self.dims.uf_dim()).clone_owned()
    }
}

pub fn fit_subspace(h: &HankelSet, opts: FitOptions) -> Result<SubspacePredictor> {
    let v = h.v();
    let s = ridge_regression_svd(&h.yf, &v, opts.ridge).map_err(|e| match e {
        Error::Singular { .. } => Error::Singular {
            what: "subspace regressor Gram V·Vᵀ",
            horizon: Some(h.past),
        },
        other => other,
    })?;
    Ok(SubspacePredictor {
        s,
        dims: Horizons::of(h),
    })
}

/// `[V; Y_f] = [[L_VV, 0], [L_YV, L_YE]] · [Q_V; Q_E]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqFactors {
    pub l_vv: DMatrix<f64>,
    pub l_yv: DMatrix<f64>,
    pub l_ye: DMatrix<f64>,
    pub q_v: DMatrix<f64>,
    pub q_e: DMatrix<f64>,
    pub dims: Horizons,
}

impl LqFactors {
    /// The full lower-triangular factor `L`.
    pub fn l(&self) -> DMatrix<f64> {
        let kv = self.l_vv.nrows();
        let ky = self.l_ye.nrows();
        let mut l = DMatrix::zeros(kv + ky, kv + ky);
        l.view_mut((0, 0), (kv, kv)).copy_from(&self.l_vv);
        l.view_mut((kv, 0), (ky, kv)).copy_from(&self.l_yv);
        l.view_mut((kv, kv), (ky, ky)).copy_from(&self.l_ye);
        l
    }

    /// The full factor `Q` with orthonormal rows.
    pub fn q(&self) -> DMatrix<f64> {
        crate::linalg::vstack(&[&self.q_v, &self.q_e])
    }

    /// `L_YV · L_VV⁻¹`, the subspace predictor embedded in the factorization.
    pub fn embedded_subspace_predictor(&self) -> Result<DMatrix<f64>> {
        let t = self
            .l_vv
            .transpose()
            .solve_upper_triangular(&self.l_yv.transpose())
            .ok_or(Error::Singular {
                what: "L_VV",
                horizon: None,
            })?;
        Ok(t.transpose())
    }
}

pub fn lq_decompose(h: &HankelSet) -> Result<LqFactors> {
    let dims = Horizons::of(h);
    let (kv, ky) = (dims.v_dim(), dims.yf_dim());
    if h.n_cols < kv + ky {
        return Err(Error::InsufficientData {
            needed: kv + ky,
            available: h.n_cols,
        });
    }
    let (l, q) = lq(&h.v_yf())?;
    Ok(LqFactors {
        l_vv: l.view((0, 0), (kv, kv)).clone_owned(),
        l_yv: l.view((kv, 0), (ky, kv)).clone_owned(),
        l_ye: l.view((kv, kv), (ky, ky)).clone_owned(),
        q_v: q.rows(0, kv).clone_owned(),
        q_e: q.rows(kv, ky).clone_owned(),
        dims,
    })
}

/// Bank of growing-history single-step predictors and the multistep predictor
/// assembled from it.
#[derive(Debug, Clone, PartialEq)]
pub struct TransientBank {
    /// `Φ̂_k`, `q × (q+m)(k+ρ−1)`, for `k = 1..τ`.
    pub blocks: Vec<DMatrix<f64>>,
    pub phi_p: DMatrix<f64>,
    pub phi_y: DMatrix<f64>,
    pub phi_u: DMatrix<f64>,
    /// `(I − Φ̂_y)⁻¹`
    pub h_eps: DMatrix<f64>,
    /// `Ĥ = [(I − Φ̂_y)⁻¹Φ̂_p, (I − Φ̂_y)⁻¹Φ̂_u]`
    pub h_hat: DMatrix<f64>,
    pub dims: Horizons,
    pub n_cols: usize,
}

impl TransientBank {
    /// `Φ̂` as a `qτ × (q+m)(ρ+τ)` matrix, each row block zero-padded.
    pub fn phi(&self) -> DMatrix<f64> {
        let d = self.dims;
        let q = d.n_outputs;
        let width = (d.n_outputs + d.n_inputs) * (d.past + d.future);
        let mut phi = DMatrix::zeros(q * d.future, width);
        for (k, b) in self.blocks.iter().enumerate() {
            phi.view_mut((k * q, 0), (q, b.ncols())).copy_from(b);
        }
        phi
    }

    pub fn predict(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.h_hat * v
    }

    /// Runs the single-step predictors forward, feeding each predicted output
    /// into the history of the next step.
    pub fn predict_sequential(&self, v: &DVector<f64>) -> DVector<f64> {
        let d = self.dims;
        let (q, m) = (d.n_outputs, d.n_inputs);
        let zp = d.zp_dim();
        let mut history: Vec<f64> = v.rows(0, zp).iter().cloned().collect();
        let mut out = DVector::zeros(d.yf_dim());
        for (k, block) in self.blocks.iter().enumerate() {
            let past = DVector::from_column_slice(&history);
            let yk = block * past;
            out.rows_mut(k * q, q).copy_from(&yk);
            history.extend(yk.iter());
            history.extend(v.rows(zp + k * m, m).iter());
        }
        out
    }
}

pub fn fit_transient_bank(
    data: &TrajectoryData,
    past: usize,
    future: usize,
    opts: FitOptions,
) -> Result<TransientBank> {
    let w = joint_window(data, past, future)?;
    let (q, m) = (data.n_outputs(), data.n_inputs());
    let zw = q + m;
    let n_cols = w.ncols();
    let mut acc = TriangularAccumulator::new(w.nrows());
    acc.push_columns(&w);
    if opts.ridge > 0.0 {
        // augmented rows √ε·e_i turn every prefix regression into ridge
        // regression; rows on target columns only add to the residual
        let s = opts.ridge.sqrt();
        let mut row = vec![0.0; w.nrows()];
        for i in 0..w.nrows() {
            row[i] = s;
            acc.push_row(&row);
            row[i] = 0.0;
        }
    }
    let r = acc.finish();

    let mut blocks = Vec::with_capacity(future);
    for k in 1..=future {
        let l = k + past - 1;
        let nreg = zw * l;
        if opts.ridge == 0.0 {
            check_triangular_rank(&r, nreg, "joint data Gram Z·Zᵀ", Some(l))?;
        }
        let block = coefficients_from_r(&r, nreg, nreg, q).map_err(|_| Error::Singular {
            what: "joint data Gram Z·Zᵀ",
            horizon: Some(l),
        })?;
        blocks.push(block);
    }
    assemble_bank(blocks, Horizons {
        past,
        future,
        n_outputs: q,
        n_inputs: m,
    }, n_cols)
}

/// Partitions the bank and forms `Ĥ`.
pub fn assemble_bank(blocks: Vec<DMatrix<f64>>, dims: Horizons, n_cols: usize) -> Result<TransientBank> {
    let (q, m) = (dims.n_outputs, dims.n_inputs);
    let zw = q + m;
    let (past, future) = (dims.past, dims.future);
    if blocks.len() != future {
        return Err(Error::dims("transient bank length", future, blocks.len()));
    }
    for (k, b) in blocks.iter().enumerate() {
        if b.shape() != (q, zw * (past + k)) {
            return Err(Error::dims(
                "transient block",
                format!("{}x{}", q, zw * (past + k)),
                format!("{:?}", b.shape()),
            ));
        }
    }
    let qt = q * future;
    let mut phi_p = DMatrix::zeros(qt, zw * past);
    let mut phi_y = DMatrix::zeros(qt, qt);
    let mut phi_u = DMatrix::zeros(qt, m * future);
    for (k, b) in blocks.iter().enumerate() {
        phi_p.view_mut((k * q, 0), (q, zw * past)).copy_from(&b.columns(0, zw * past));
        // block k uses future samples j < k only
        for j in 0..k {
            let base = zw * (past + j);
            phi_y
                .view_mut((k * q, j * q), (q, q))
                .copy_from(&b.columns(base, q));
            phi_u
                .view_mut((k * q, j * m), (q, m))
                .copy_from(&b.columns(base + q, m));
        }
    }
    let i_minus = DMatrix::identity(qt, qt) - &phi_y;
    let h_eps = i_minus
        .solve_lower_triangular(&DMatrix::identity(qt, qt))
        .ok_or(Error::Singular {
            what: "I − Φ̂_y",
            horizon: None,
        })?;
    let h_hat = i_minus
        .solve_lower_triangular(&hstack(&[&phi_p, &phi_u]))
        .ok_or(Error::Singular {
            what: "I − Φ̂_y",
            horizon: None,
        })?;
    Ok(TransientBank {
        blocks,
        phi_p,
        phi_y,
        phi_u,
        h_eps,
        h_hat,
        dims,
        n_cols,
    })
}

/// Sample innovations `Ê_f = Y_f − Φ̂ Z_[1,ρ+τ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationEstimate {
    pub e_hat: DMatrix<f64>,
}

pub fn estimate_innovations(bank: &TransientBank, data: &TrajectoryData) -> Result<InnovationEstimate> {
    let d = bank.dims;
    if data.n_outputs() != d.n_outputs || data.n_inputs() != d.n_inputs {
        return Err(Error::dims(
            "innovation data channels",
            format!("q={} m={}", d.n_outputs, d.n_inputs),
            format!("q={} m={}", data.n_outputs(), data.n_inputs()),
        ));
    }
    let w = joint_window(data, d.past, d.future)?;
    let yf = hankel_matrix(&data.y, d.past + 1, d.past + d.future, w.ncols())?;
    Ok(InnovationEstimate {
        e_hat: yf - bank.phi() * w,
    })
}

/// Estimated Subspace Bias Predictor `β̂ = (I − Φ̂_y)⁻¹ Ê_f U_fᵀ M̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasPredictor {
    pub beta_hat: DMatrix<f64>,
    pub m_hat: DMatrix<f64>,
    pub omega_hat: DMatrix<f64>,
}

pub fn estimate_bias_predictor(
    bank: &TransientBank,
    innov: &InnovationEstimate,
    h: &HankelSet,
    opts: FitOptions,
) -> Result<BiasPredictor> {
    let d = bank.dims;
    if Horizons::of(h) != d {
        return Err(Error::dims("bias predictor horizons", format!("{d:?}"), format!("{:?}", Horizons::of(h))));
    }
    if innov.e_hat.shape() != (d.yf_dim(), h.n_cols) {
        return Err(Error::dims(
            "innovation matrix",
            format!("{}x{}", d.yf_dim(), h.n_cols),
            format!("{:?}", innov.e_hat.shape()),
        ));
    }
    let mut zz = &h.zp * h.zp.transpose();
    zz += DMatrix::identity(zz.nrows(), zz.nrows()) * opts.ridge;
    let zz_chol = zz.cholesky().ok_or(Error::Singular {
        what: "Z_p·Z_pᵀ",
        horizon: Some(d.past),
    })?;
    // G = U_f Z_pᵀ (Z_p Z_pᵀ)⁻¹
    let g = zz_chol.solve(&(&h.zp * h.uf.transpose())).transpose();
    // Ω̂ as the Gram of the part of U_f orthogonal to Z_p
    let uf_perp = &h.uf - &g * &h.zp;
    let mut omega = &uf_perp * uf_perp.transpose();
    omega = (&omega + omega.transpose()) * 0.5 + DMatrix::identity(omega.nrows(), omega.nrows()) * opts.ridge;
    let omega_chol = omega.clone().cholesky().ok_or(Error::Singular {
        what: "Ω̂",
        horizon: None,
    })?;
    let omega_inv = omega_chol.inverse();
    let m_hat = hstack(&[&(-(&omega_inv * &g)), &omega_inv]);
    let eu = &innov.e_hat * h.uf.transpose();
    let beta_hat = &bank.h_eps * eu * &m_hat;
    Ok(BiasPredictor {
        beta_hat,
        m_hat,
        omega_hat: omega,
    })
}

/// Everything fitted from one training trajectory.
#[derive(Debug, Clone)]
pub struct FittedModels {
    pub hankel: HankelSet,
    pub subspace: SubspacePredictor,
    pub lq: LqFactors,
    pub bank: TransientBank,
    pub innovations: InnovationEstimate,
    pub bias: BiasPredictor,
}

pub fn fit_all(data: &TrajectoryData, past: usize, future: usize, opts: FitOptions) -> Result<FittedModels> {
    let hankel = build_hankel_set(data, past, future)?;
    let subspace = fit_subspace(&hankel, opts)?;
    let lq = lq_decompose(&hankel)?;
    let bank = fit_transient_bank(data, past, future, opts)?;
    let innovations = estimate_innovations(&bank, data)?;
    let bias = estimate_bias_predictor(&bank, &innovations, &hankel, opts)?;
    Ok(FittedModels {
        hankel,
        subspace,
        lq,
        bank,
        innovations,
        bias,
    })
}

/// Sidecar written next to each predictor CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorMetadata {
    pub name: String,
    pub past: usize,
    pub future: usize,
    pub n_outputs: usize,
    pub n_inputs: usize,
    pub n_cols: usize,
    pub rows: usize,
    pub cols: usize,
    pub source_hash: String,
}

/// Writes `<dir>/<name>.csv` and `<dir>/<name>.json`.
pub fn write_predictor(
    dir: &Path,
    name: &str,
    m: &DMatrix<f64>,
    dims: Horizons,
    n_cols: usize,
    source_hash: &str,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{name}.csv"));
    fs::write(&csv, matrix_to_csv(m)).map_err(|e| Error::io(&csv, e))?;
    let meta = PredictorMetadata {
        name: name.to_string(),
        past: dims.past,
        future: dims.future,
        n_outputs: dims.n_outputs,
        n_inputs: dims.n_inputs,
        n_cols,
        rows: m.nrows(),
        cols: m.ncols(),
        source_hash: source_hash.to_string(),
    };
    let json = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))
}

impl FittedModels {
    /// Writes all predictor matrices of the fit into `dir`.
    pub fn write_all(&self, dir: &Path, source_hash: &str) -> Result<Vec<String>> {
        let dims = self.subspace.dims;
        let n = self.hankel.n_cols;
        let items: [(&str, &DMatrix<f64>); 9] = [
            ("subspace_predictor", &self.subspace.s),
            ("transient_h_hat", &self.bank.h_hat),
            ("transient_phi", &self.bank.phi()),
            ("bias_predictor", &self.bias.beta_hat),
            ("l_vv", &self.lq.l_vv),
            ("l_yv", &self.lq.l_yv),
            ("l_ye", &self.lq.l_ye),
            ("innovations", &self.innovations.e_hat),
            ("omega_hat", &self.bias.omega_hat),
        ];
        let mut written = Vec::new();
        for (name, m) in items {
            write_predictor(dir, name, m, dims, n, source_hash)?;
            written.push(format!("{name}.csv"));
            written.push(format!("{name}.json"));
        }
        Ok(written)
    }
}
