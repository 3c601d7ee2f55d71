//! Scaled block-Hankel matrices and the past/future partitions.
//!
//! Row indices `t0`, `t1` are 1-based: block row `i`, column `j` (both
//! 1-based) of `W_[t0,t1]` holds `w(t0+i+j−2) / √N`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::vstack;
use crate::lti_sim::TrajectoryData;

/// Hankel matrix of the signal `w` (`T × n_w`, one sample per row).
pub fn hankel_matrix(w: &DMatrix<f64>, t0: usize, t1: usize, n_cols: usize) -> Result<DMatrix<f64>> {
    if t0 == 0 || t0 > t1 {
        return Err(Error::InvalidConfig(format!(
            "Hankel window [{t0},{t1}] is not a valid 1-based range"
        )));
    }
    if n_cols == 0 {
        return Err(Error::InvalidConfig("Hankel matrix needs at least one column".into()));
    }
    let needed = t1 + n_cols - 1;
    if needed > w.nrows() {
        return Err(Error::InsufficientData {
            needed,
            available: w.nrows(),
        });
    }
    let nw = w.ncols();
    let depth = t1 - t0 + 1;
    let sqrt_n = (n_cols as f64).sqrt();
    let mut h = DMatrix::zeros(nw * depth, n_cols);
    for j in 0..n_cols {
        for i in 0..depth {
            let t = t0 - 1 + i + j;
            for c in 0..nw {
                h[(i * nw + c, j)] = w[(t, c)] / sqrt_n;
            }
        }
    }
    Ok(h)
}

/// The partitions `Z_p`, `U_f`, `Y_f` built from one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelSet {
    pub zp: DMatrix<f64>,
    pub uf: DMatrix<f64>,
    pub yf: DMatrix<f64>,
    pub past: usize,
    pub future: usize,
    pub n_cols: usize,
    pub n_outputs: usize,
    pub n_inputs: usize,
}

impl HankelSet {
    /// `V = [Z_p; U_f]`.
    pub fn v(&self) -> DMatrix<f64> {
        vstack(&[&self.zp, &self.uf])
    }

    /// `[V; Y_f]`, the matrix factorized by the LQ decomposition.
    pub fn v_yf(&self) -> DMatrix<f64> {
        vstack(&[&self.zp, &self.uf, &self.yf])
    }

    pub fn v_dim(&self) -> usize {
        (self.n_outputs + self.n_inputs) * self.past + self.n_inputs * self.future
    }

    pub fn zp_dim(&self) -> usize {
        (self.n_outputs + self.n_inputs) * self.past
    }

    /// Writes every partition as a row-major CSV (`zp.csv`, `uf.csv`, `yf.csv`).
    pub fn dump_csv(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, m) in [("zp", &self.zp), ("uf", &self.uf), ("yf", &self.yf)] {
            let path = dir.join(format!("{name}.csv"));
            fs::write(&path, matrix_to_csv(m)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Dense row-major CSV, no header, shortest round-trip float formatting.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut s = String::with_capacity(m.len() * 20);
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}", m[(r, c)]);
        }
        s.push('\n');
    }
    s
}

pub fn matrix_from_csv(text: &str) -> Result<DMatrix<f64>> {
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse("matrix CSV", e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::parse("matrix CSV", "ragged rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

/// Column count used for a trajectory of length `t`: `N = T − ρ − τ + 1`.
pub fn max_columns(t: usize, past: usize, future: usize) -> Result<usize> {
    if past == 0 || future == 0 {
        return Err(Error::InvalidConfig("horizons must be positive".into()));
    }
    if t < past + future {
        return Err(Error::InsufficientData {
            needed: past + future,
            available: t,
        });
    }
    Ok(t - past - future + 1)
}

pub fn build_hankel_set(data: &TrajectoryData, past: usize, future: usize) -> Result<HankelSet> {
    let n = max_columns(data.len(), past, future)?;
    let zp = hankel_matrix(&data.z(), 1, past, n)?;
    let uf = hankel_matrix(&data.u, past + 1, past + future, n)?;
    let yf = hankel_matrix(&data.y, past + 1, past + future, n)?;
    Ok(HankelSet {
        zp,
        uf,
        yf,
        past,
        future,
        n_cols: n,
        n_outputs: data.n_outputs(),
        n_inputs: data.n_inputs(),
    })
}

/// `Z_[1,ρ+τ]` on the same column set as [`build_hankel_set`].
pub fn joint_window(data: &TrajectoryData, past: usize, future: usize) -> Result<DMatrix<f64>> {
    let n = max_columns(data.len(), past, future)?;
    hankel_matrix(&data.z(), 1, past + future, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti_sim::{LtiSystem, TrajectoryMeta};
    use proptest::prelude::*;

    fn scalar(vals: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(vals.len(), 1, vals)
    }

    fn traj(u: DMatrix<f64>, y: DMatrix<f64>) -> TrajectoryData {
        let sys = LtiSystem::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, u.ncols()),
            DMatrix::identity(y.ncols(), 2),
            DMatrix::zeros(y.ncols(), y.ncols()),
        )
        .unwrap();
        TrajectoryData::new(
            u,
            y,
            0,
            TrajectoryMeta {
                system: sys,
                law: None,
                burn_in: 0,
            },
        )
        .unwrap()
    }

    #[test]
    fn small_scalar_hankel() {
        let h = hankel_matrix(&scalar(&[1.0, 2.0, 3.0, 4.0]), 1, 2, 3).unwrap();
        let expected = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 3.0, 4.0]) / 3f64.sqrt();
        assert_eq!(h, expected);
    }

    #[test]
    fn constant_signal() {
        let w = DMatrix::from_element(30, 2, 2.5);
        let h = hankel_matrix(&w, 3, 7, 20).unwrap();
        let expected = 2.5 / 20f64.sqrt();
        assert!(h.iter().all(|v| *v == expected));
    }

    #[test]
    fn window_past_end_is_rejected() {
        let w = scalar(&[1.0, 2.0, 3.0]);
        assert!(matches!(hankel_matrix(&w, 1, 2, 3), Err(Error::InsufficientData { .. })));
        assert!(hankel_matrix(&w, 0, 2, 1).is_err());
        assert!(hankel_matrix(&w, 2, 1, 1).is_err());
    }

    #[test]
    fn partition_shapes_for_double_integrator_horizons() {
        let u = DMatrix::from_fn(1000, 1, |r, _| r as f64);
        let y = DMatrix::from_fn(1000, 2, |r, c| (r * 2 + c) as f64);
        let h = build_hankel_set(&traj(u, y), 10, 10).unwrap();
        assert_eq!(h.n_cols, 981);
        assert_eq!(h.zp.shape(), (30, 981));
        assert_eq!(h.uf.shape(), (10, 981));
        assert_eq!(h.yf.shape(), (20, 981));
        assert_eq!(h.v().shape(), (40, 981));
        assert_eq!(h.v_dim(), 40);
    }

    #[test]
    fn zp_interleaves_outputs_then_inputs() {
        let u = DMatrix::from_fn(6, 1, |r, _| 100.0 + r as f64);
        let y = DMatrix::from_fn(6, 2, |r, c| (10 * r + c) as f64);
        let h = build_hankel_set(&traj(u, y), 2, 1).unwrap();
        let s = (h.n_cols as f64).sqrt();
        let col0: Vec<f64> = h.zp.column(0).iter().map(|v| v * s).collect();
        assert_eq!(col0, vec![0.0, 1.0, 100.0, 10.0, 11.0, 101.0]);
        assert!((h.uf[(0, 0)] * s - 102.0).abs() < 1e-12);
        assert!((h.yf[(1, 0)] * s - 21.0).abs() < 1e-12);
    }

    #[test]
    fn minimal_trajectory_gives_single_column() {
        let u = DMatrix::from_element(5, 1, 1.0);
        let y = DMatrix::from_element(5, 2, 1.0);
        let h = build_hankel_set(&traj(u.clone(), y.clone()), 3, 2).unwrap();
        assert_eq!(h.n_cols, 1);
        assert!(build_hankel_set(&traj(u, y), 3, 3).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let w = DMatrix::from_fn(12, 2, |r, c| (r as f64).sin() + c as f64 / 3.0);
        let h = hankel_matrix(&w, 1, 4, 9).unwrap();
        assert_eq!(matrix_from_csv(&matrix_to_csv(&h)).unwrap(), h);
    }

    proptest! {
        #[test]
        fn entries_follow_definition(
            vals in proptest::collection::vec(-10.0f64..10.0, 60..120),
            t0 in 1usize..4,
            depth in 1usize..6,
            seed in 0usize..1000,
        ) {
            let w = DMatrix::from_row_slice(vals.len() / 2, 2, &vals[..vals.len() / 2 * 2]);
            let t1 = t0 + depth - 1;
            let n = w.nrows() - t1 + 1;
            let h = hankel_matrix(&w, t0, t1, n).unwrap();
            let s = (n as f64).sqrt();
            for k in 0..100 {
                let i = (seed + 7 * k) % depth + 1;
                let j = (seed * 13 + k) % n + 1;
                for c in 0..2 {
                    let expected = w[(t0 + i + j - 3, c)] / s;
                    prop_assert_eq!(h[((i - 1) * 2 + c, j - 1)], expected);
                }
            }
        }

        #[test]
        fn one_step_shift_moves_columns(
            vals in proptest::collection::vec(-10.0f64..10.0, 40..80),
            depth in 1usize..5,
        ) {
            let w = scalar(&vals);
            let n = vals.len() - depth;
            let h = hankel_matrix(&w, 1, depth, n).unwrap();
            let shifted = scalar(&vals[1..]);
            let hs = hankel_matrix(&shifted, 1, depth, n).unwrap();
            for j in 0..n - 1 {
                prop_assert_eq!(h.column(j + 1), hs.column(j));
            }
            let sqrt_n = (n as f64).sqrt();
            for j in 0..n {
                prop_assert!((h[(0, j)] * sqrt_n - vals[j]).abs() <= 1e-12 * vals[j].abs().max(1.0));
            }
        }
    }
}
