//! Bias quantities of the data-driven predictors: Subspace Bias and its
//! empirical version on the training columns, the γ-DDPC and DeePC bias
//! decompositions with their Optimism Bias part, the scalar worst-case and
//! expected summaries, and input–innovation correlation maps.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::{BiasPredictor, FittedModels, InnovationEstimate, LqFactors, SubspacePredictor, TransientBank};
use crate::hankel::{matrix_to_csv, HankelSet};
use crate::linalg::{hstack, sigma_max};

/// `b_S(v) = β̂ v`.
pub fn subspace_bias(beta: &BiasPredictor, v: &DVector<f64>) -> Result<DVector<f64>> {
    if v.len() != beta.beta_hat.ncols() {
        return Err(Error::dims("subspace bias argument", beta.beta_hat.ncols(), v.len()));
    }
    Ok(&beta.beta_hat * v)
}

/// `β_V = Ŝ V − Ĥ V`.
pub fn empirical_bias(s: &SubspacePredictor, bank: &TransientBank, h: &HankelSet) -> Result<DMatrix<f64>> {
    if s.s.shape() != bank.h_hat.shape() || s.s.ncols() != h.v_dim() {
        return Err(Error::dims(
            "empirical bias predictors",
            format!("{:?}", s.s.shape()),
            format!("{:?}", bank.h_hat.shape()),
        ));
    }
    let v = h.v();
    Ok(&s.s * &v - &bank.h_hat * &v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem1Summary {
    /// `σ_max(β_V)`
    pub sigma_max: f64,
    /// `‖Ĥ_ε [0, Ê_f U_fᵀ] (V Vᵀ)^{−1/2}‖²_F`
    pub expected_bias_sq: f64,
}

/// Worst-case and expected Subspace Bias magnitudes.
///
/// The inverse square root is taken as `L⁻ᵀ` with `V Vᵀ = L Lᵀ`, the factor
/// satisfying `L⁻ᵀ L⁻¹ = (V Vᵀ)⁻¹`, so the Frobenius norm is
/// `‖L⁻¹ Bᵀ‖_F` with `B = Ĥ_ε [0, Ê_f U_fᵀ]`.
pub fn theorem1_summary(
    beta_v: &DMatrix<f64>,
    bank: &TransientBank,
    innov: &InnovationEstimate,
    h: &HankelSet,
) -> Result<Theorem1Summary> {
    let v = h.v();
    let gram = &v * v.transpose();
    let chol = gram.cholesky().ok_or(Error::Singular {
        what: "V·Vᵀ",
        horizon: Some(h.past),
    })?;
    let eu = &innov.e_hat * h.uf.transpose();
    let b = &bank.h_eps * hstack(&[&DMatrix::zeros(eu.nrows(), h.zp_dim()), &eu]);
    let x = chol
        .l()
        .solve_lower_triangular(&b.transpose())
        .ok_or(Error::Singular {
            what: "Cholesky factor of V·Vᵀ",
            horizon: Some(h.past),
        })?;
    Ok(Theorem1Summary {
        sigma_max: sigma_max(beta_v),
        expected_bias_sq: x.norm_squared(),
    })
}

/// Both parts of the γ-DDPC bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaDdpcBias {
    /// `β̂ L_VV γ_v`
    pub subspace_part: DVector<f64>,
    /// `L_YE γ_ε`, the Optimism Bias.
    pub optimism_part: DVector<f64>,
    pub total: DVector<f64>,
}

pub fn gamma_ddpc_bias(
    lq: &LqFactors,
    beta: &BiasPredictor,
    gamma_v: &DVector<f64>,
    gamma_e: &DVector<f64>,
) -> Result<GammaDdpcBias> {
    if gamma_v.len() != lq.l_vv.ncols() {
        return Err(Error::dims("γ_v", lq.l_vv.ncols(), gamma_v.len()));
    }
    if gamma_e.len() != lq.l_ye.ncols() {
        return Err(Error::dims("γ_ε", lq.l_ye.ncols(), gamma_e.len()));
    }
    if beta.beta_hat.ncols() != lq.l_vv.nrows() {
        return Err(Error::dims("bias predictor columns", lq.l_vv.nrows(), beta.beta_hat.ncols()));
    }
    let subspace_part = &beta.beta_hat * (&lq.l_vv * gamma_v);
    let optimism_part = &lq.l_ye * gamma_e;
    let total = &subspace_part + &optimism_part;
    Ok(GammaDdpcBias {
        subspace_part,
        optimism_part,
        total,
    })
}

/// `(β_V + L_YE Q_E) g`.
pub fn deepc_bias(lq: &LqFactors, beta_v: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    if g.len() != lq.q_e.ncols() || beta_v.ncols() != g.len() {
        return Err(Error::dims("DeePC multiplier g", lq.q_e.ncols(), g.len()));
    }
    Ok(beta_v * g + &lq.l_ye * (&lq.q_e * g))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem2Summary {
    /// `σ_max(L_YE)`
    pub sigma_max_open: f64,
    /// `σ_max([β̂ L_VV, L_YE])`
    pub sigma_max_closed: f64,
}

/// `[β̂ L_VV, L_YE]`, the map from `γ` to the γ-DDPC bias.
pub fn ddpc_bias_operator(lq: &LqFactors, beta: &BiasPredictor) -> DMatrix<f64> {
    hstack(&[&(&beta.beta_hat * &lq.l_vv), &lq.l_ye])
}

pub fn theorem2_summary(lq: &LqFactors, beta: &BiasPredictor) -> Theorem2Summary {
    Theorem2Summary {
        sigma_max_open: sigma_max(&lq.l_ye),
        sigma_max_closed: sigma_max(&ddpc_bias_operator(lq, beta)),
    }
}

/// Pearson correlations between rows of `Ê_f` (innovation index) and rows of
/// `U_f` (input index).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationHeatmap {
    pub corr: DMatrix<f64>,
    pub n_outputs: usize,
    pub n_inputs: usize,
    /// Innovation rows with zero variance; their correlations are reported as 0.
    pub zero_variance_innovations: Vec<usize>,
    /// Input rows with zero variance; their correlations are reported as 0.
    pub zero_variance_inputs: Vec<usize>,
    /// Number of experiments averaged into `corr`.
    pub count: usize,
}

impl CorrelationHeatmap {
    /// Future time step (0-based) of innovation row `i`.
    pub fn innovation_time(&self, i: usize) -> usize {
        i / self.n_outputs
    }

    /// Future time step (0-based) of input row `j`.
    pub fn input_time(&self, j: usize) -> usize {
        j / self.n_inputs
    }

    pub fn max_abs(&self) -> f64 {
        self.corr.amax()
    }

    /// Largest `|corr|` over entries whose input time is ≥ (`causal = true`)
    /// or < (`causal = false`) the innovation time.
    pub fn max_abs_where(&self, causal: bool) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.corr.nrows() {
            for j in 0..self.corr.ncols() {
                if (self.input_time(j) >= self.innovation_time(i)) == causal {
                    best = best.max(self.corr[(i, j)].abs());
                }
            }
        }
        best
    }

    /// Row-major CSV grid, one row per innovation index.
    pub fn to_csv(&self) -> String {
        matrix_to_csv(&self.corr)
    }
}

pub fn correlation_heatmap(innov: &InnovationEstimate, h: &HankelSet) -> Result<CorrelationHeatmap> {
    let e = &innov.e_hat;
    let u = &h.uf;
    if e.ncols() != u.ncols() {
        return Err(Error::dims("correlation columns", u.ncols(), e.ncols()));
    }
    let (ec, es) = center_rows(e);
    let (uc, us) = center_rows(u);
    let cov = &ec * uc.transpose();
    let mut corr = DMatrix::zeros(e.nrows(), u.nrows());
    for i in 0..e.nrows() {
        for j in 0..u.nrows() {
            if es[i] > 0.0 && us[j] > 0.0 {
                corr[(i, j)] = cov[(i, j)] / (es[i] * us[j]);
            }
        }
    }
    Ok(CorrelationHeatmap {
        corr,
        n_outputs: h.n_outputs,
        n_inputs: h.n_inputs,
        zero_variance_innovations: (0..e.nrows()).filter(|i| es[*i] == 0.0).collect(),
        zero_variance_inputs: (0..u.nrows()).filter(|j| us[*j] == 0.0).collect(),
        count: 1,
    })
}

/// Entrywise mean of heatmaps from repeated experiments; zero-variance flags
/// are merged.
pub fn average_heatmaps(maps: &[CorrelationHeatmap]) -> Result<CorrelationHeatmap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidConfig("no heatmaps to average".into()))?;
    let mut sum = DMatrix::zeros(first.corr.nrows(), first.corr.ncols());
    let mut zi = Vec::new();
    let mut zu = Vec::new();
    let mut count = 0;
    for m in maps {
        if m.corr.shape() != first.corr.shape() {
            return Err(Error::dims(
                "heatmap shape",
                format!("{:?}", first.corr.shape()),
                format!("{:?}", m.corr.shape()),
            ));
        }
        sum += &m.corr * m.count as f64;
        count += m.count;
        zi.extend(&m.zero_variance_innovations);
        zu.extend(&m.zero_variance_inputs);
    }
    zi.sort_unstable();
    zi.dedup();
    zu.sort_unstable();
    zu.dedup();
    Ok(CorrelationHeatmap {
        corr: sum / count as f64,
        n_outputs: first.n_outputs,
        n_inputs: first.n_inputs,
        zero_variance_innovations: zi,
        zero_variance_inputs: zu,
        count,
    })
}

fn center_rows(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let mut c = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for i in 0..m.nrows() {
        let mean = m.row(i).mean();
        let mut row = c.row_mut(i);
        row.add_scalar_mut(-mean);
        let n = row.norm();
        // rows that are constant up to rounding count as zero variance
        let scale = m.row(i).amax();
        norms.push(if n <= 1e-14 * scale.max(f64::MIN_POSITIVE) * (m.ncols() as f64).sqrt() { 0.0 } else { n });
    }
    (c, norms)
}

/// All scalar bias summaries of one fit.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub beta_v: DMatrix<f64>,
    pub sigma_max_subspace: f64,
    pub expected_bias_sq: f64,
    pub sigma_max_ddpc: f64,
    pub sigma_max_optimism: f64,
    pub n_cols: usize,
    pub past: usize,
    pub future: usize,
}

impl BiasReport {
    pub const CSV_HEADER: &'static str =
        "N,mode,seed,past,future,sigma_max_subspace,expected_bias_sq,sigma_max_ddpc,sigma_max_optimism";

    pub fn csv_row(&self, mode: &str, seed: u64) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            self.n_cols,
            mode,
            seed,
            self.past,
            self.future,
            self.sigma_max_subspace,
            self.expected_bias_sq,
            self.sigma_max_ddpc,
            self.sigma_max_optimism
        );
        s
    }
}

pub fn bias_report(models: &FittedModels) -> Result<BiasReport> {
    let h = &models.hankel;
    let beta_v = empirical_bias(&models.subspace, &models.bank, h)?;
    let t1 = theorem1_summary(&beta_v, &models.bank, &models.innovations, h)?;
    let t2 = theorem2_summary(&models.lq, &models.bias);
    Ok(BiasReport {
        beta_v,
        sigma_max_subspace: t1.sigma_max,
        expected_bias_sq: t1.expected_bias_sq,
        sigma_max_ddpc: t2.sigma_max_closed,
        sigma_max_optimism: t2.sigma_max_open,
        n_cols: h.n_cols,
        past: h.past,
        future: h.future,
    })
}
