//! Dense linear-algebra helpers shared by the estimators.
//!
//! Every regression in this crate is written as "targets ≈ coefficients ·
//! regressors" with data stored column-wise (one sample per column), which is
//! the natural layout of Hankel matrices. The factorizations below work on the
//! transposed (tall) data so that Householder QR gives the row-space LQ.

use nalgebra::{DMatrix, DVector, QR, SVD};

use crate::error::{Error, Result};

/// Relative threshold on triangular-factor diagonals and singular values below
/// which a regression is declared singular.
pub const SINGULARITY_TOL: f64 = 1e-10;

/// Number of data columns folded into a streaming R factor at a time.
const CHUNK_COLUMNS: usize = 4096;

/// Streaming triangular factor of a tall data matrix.
///
/// Holds the upper-triangular `R` with `Xᵀ X = Rᵀ R` for all rows pushed so
/// far, without ever storing `X`. Used for regressions whose sample count is
/// too large to materialize.
#[derive(Debug, Clone)]
pub struct TriangularAccumulator {
    width: usize,
    r: DMatrix<f64>,
    buffer: Vec<f64>,
    buffered_rows: usize,
}

impl TriangularAccumulator {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            r: DMatrix::zeros(0, width),
            buffer: Vec::with_capacity(width * CHUNK_COLUMNS),
            buffered_rows: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Appends one data row (one sample).
    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.width, "row width");
        self.buffer.extend_from_slice(row);
        self.buffered_rows += 1;
        if self.buffered_rows >= CHUNK_COLUMNS {
            self.flush();
        }
    }

    /// Appends every column of a wide `width × n` matrix as a sample.
    pub fn push_columns(&mut self, data: &DMatrix<f64>) {
        assert_eq!(data.nrows(), self.width, "column height");
        for j in 0..data.ncols() {
            // column storage is contiguous
            let col = data.column(j);
            self.buffer.extend(col.iter());
            self.buffered_rows += 1;
            if self.buffered_rows >= CHUNK_COLUMNS {
                self.flush();
            }
        }
    }

    fn flush(&mut self) {
        if self.buffered_rows == 0 {
            return;
        }
        let top = self.r.nrows();
        let mut stacked = DMatrix::zeros(top + self.buffered_rows, self.width);
        stacked.rows_mut(0, top).copy_from(&self.r);
        for (i, row) in self.buffer.chunks_exact(self.width).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                stacked[(top + i, j)] = v;
            }
        }
        self.buffer.clear();
        self.buffered_rows = 0;
        self.r = QR::new(stacked).r();
    }

    /// Returns the square upper-triangular factor with nonnegative diagonal.
    pub fn finish(mut self) -> DMatrix<f64> {
        self.flush();
        let mut r = DMatrix::zeros(self.width, self.width);
        let k = self.r.nrows().min(self.width);
        r.rows_mut(0, k).copy_from(&self.r.rows(0, k));
        fix_row_signs(&mut r);
        r
    }
}

/// Flips row signs of an upper-triangular factor so its diagonal is nonnegative.
fn fix_row_signs(r: &mut DMatrix<f64>) -> Vec<f64> {
    let k = r.nrows().min(r.ncols());
    let mut signs = vec![1.0; r.nrows()];
    for i in 0..k {
        if r[(i, i)] < 0.0 {
            signs[i] = -1.0;
            r.row_mut(i).neg_mut();
        }
    }
    signs
}

/// R factor (`width × width`, nonnegative diagonal) of the transpose of a wide
/// column-sample matrix.
pub fn r_factor_of_columns(data: &DMatrix<f64>) -> DMatrix<f64> {
    let mut acc = TriangularAccumulator::new(data.nrows());
    acc.push_columns(data);
    acc.finish()
}

/// Canonical LQ factorization `X = L Q` of a wide `k × N` matrix with `k ≤ N`.
///
/// `L` is `k × k` lower triangular with nonnegative diagonal and `Q` is `k × N`
/// with orthonormal rows. Computed as the transpose of a Householder QR of `Xᵀ`.
pub fn lq(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (k, n) = x.shape();
    if n < k {
        return Err(Error::InsufficientData {
            needed: k,
            available: n,
        });
    }
    let qr = QR::new(x.transpose());
    let mut r = qr.r();
    let mut q = qr.q();
    let signs = fix_row_signs(&mut r);
    for (j, s) in signs.iter().enumerate() {
        if *s < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok((r.transpose(), q.transpose()))
}

/// Errors if the leading `len` diagonal entries of a triangular factor contain
/// a value that is negligible relative to the largest.
pub fn check_triangular_rank(
    r: &DMatrix<f64>,
    len: usize,
    what: &'static str,
    horizon: Option<usize>,
) -> Result<()> {
    let diag: Vec<f64> = (0..len).map(|i| r[(i, i)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if len > 0 && !(max > 0.0 && min > SINGULARITY_TOL * max) {
        return Err(Error::Singular { what, horizon });
    }
    Ok(())
}

/// Least-squares coefficients from the R factor of `[regressors; targets]ᵀ`.
///
/// The regressors occupy the first `nreg` columns of `r` and the targets the
/// `ntarget` columns starting at `target_offset`; returns the
/// `ntarget × nreg` coefficient matrix.
pub fn coefficients_from_r(
    r: &DMatrix<f64>,
    nreg: usize,
    target_offset: usize,
    ntarget: usize,
) -> Result<DMatrix<f64>> {
    let rxx = r.view((0, 0), (nreg, nreg)).clone_owned();
    let rxy = r.view((0, target_offset), (nreg, ntarget)).clone_owned();
    let sol = rxx
        .solve_upper_triangular(&rxy)
        .ok_or(Error::Singular {
            what: "regressor Gram matrix",
            horizon: None,
        })?;
    Ok(sol.transpose())
}

/// Ridge least squares `targets · Xᵀ (X Xᵀ + ε I)⁻¹` via an SVD of the regressors.
///
/// With `ridge == 0` a regressor matrix whose singular-value ratio falls below
/// [`SINGULARITY_TOL`] is rejected instead of being pseudo-inverted.
pub fn ridge_regression_svd(
    targets: &DMatrix<f64>,
    regressors: &DMatrix<f64>,
    ridge: f64,
) -> Result<DMatrix<f64>> {
    if targets.ncols() != regressors.ncols() {
        return Err(Error::dims(
            "regression sample count",
            regressors.ncols(),
            targets.ncols(),
        ));
    }
    let k = regressors.nrows();
    if regressors.ncols() < k && ridge == 0.0 {
        return Err(Error::InsufficientData {
            needed: k,
            available: regressors.ncols(),
        });
    }
    // X = U Σ Wᵀ with X = regressors (k × N)
    let svd = SVD::new(regressors.clone(), true, true);
    let u = svd.u.as_ref().expect("u computed");
    let vt = svd.v_t.as_ref().expect("v_t computed");
    let sv = &svd.singular_values;
    let smax = sv.max();
    if ridge == 0.0 {
        let smin = sv.min();
        if !(smax > 0.0 && smin > SINGULARITY_TOL * smax) {
            return Err(Error::Singular {
                what: "regressor Gram matrix",
                horizon: None,
            });
        }
    }
    // coefficients = targets · W · diag(σ/(σ²+ε)) · Uᵀ
    let tw = targets * vt.transpose();
    let mut scaled = tw;
    for (j, s) in sv.iter().enumerate() {
        let f = if *s > 0.0 { s / (s * s + ridge) } else { 0.0 };
        scaled.column_mut(j).scale_mut(f);
    }
    Ok(scaled * u.transpose())
}

/// Largest singular value.
pub fn sigma_max(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Frobenius-norm relative difference `‖a − b‖ / ‖b‖` (absolute when `b = 0`).
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

pub fn relative_error_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Vertically stacks matrices with equal column counts.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let ncols = blocks.first().map(|b| b.ncols()).unwrap_or(0);
    let nrows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(nrows, ncols);
    let mut row = 0;
    for b in blocks {
        assert_eq!(b.ncols(), ncols, "vstack column mismatch");
        out.rows_mut(row, b.nrows()).copy_from(*b);
        row += b.nrows();
    }
    out
}

/// Horizontally stacks matrices with equal row counts.
pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let nrows = blocks.first().map(|b| b.nrows()).unwrap_or(0);
    let ncols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(nrows, ncols);
    let mut col = 0;
    for b in blocks {
        assert_eq!(b.nrows(), nrows, "hstack row mismatch");
        out.columns_mut(col, b.ncols()).copy_from(*b);
        col += b.ncols();
    }
    out
}

pub fn vconcat(blocks: &[&DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        blocks.iter().map(|b| b.len()).sum(),
        blocks.iter().flat_map(|b| b.iter().cloned()),
    )
}
