//! Input format alignment.
//!
//! Eigenvector matrices are moved to the angular-delay domain with a unitary
//! 2D DFT, then circularly shifted so their strongest delay row and angle column
//! line up with a line-of-sight benchmark. The shift pair is the control record;
//! the BS inverts the alignment with the shifts it derives from its own uplink
//! matrix, so nothing beyond the codeword crosses the air interface.
//!
//! Axis convention: rows index delay (`N_s`), columns index angle (`N_Tx`).

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::bce::enhance_matrix;
use crate::channel::{render_channel, PathSet};
use crate::eigen::eigenvector_matrix;
use crate::error::{Error, Result};
use crate::types::{ComplexMatrix, Link, SystemConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ShiftControl {
    /// Row (delay) shift, in `[0, N_s)`.
    pub m_star: usize,
    /// Column (angle) shift, in `[0, N_Tx)`.
    pub n_star: usize,
}

impl ShiftControl {
    pub const ZERO: ShiftControl = ShiftControl { m_star: 0, n_star: 0 };

    pub fn new(m_star: usize, n_star: usize, rows: usize, cols: usize) -> Result<Self> {
        if m_star >= rows || n_star >= cols {
            return Err(Error::dims(
                format!("shift within [0,{rows})x[0,{cols})"),
                format!("({m_star},{n_star})"),
            ));
        }
        Ok(Self { m_star, n_star })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPair {
    pub dl: ComplexMatrix,
    pub ul: ComplexMatrix,
}

impl BenchmarkPair {
    pub fn for_link(&self, link: Link) -> &ComplexMatrix {
        match link {
            Link::Downlink => &self.dl,
            Link::Uplink => &self.ul,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedCsi {
    pub matrix: ComplexMatrix,
    pub control: ShiftControl,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, dir: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, dir))
}

/// Transforms rows with `row_dir` along columns and columns with `col_dir`
/// along rows, each scaled to be unitary.
fn transform(w: &ComplexMatrix, delay_dir: FftDirection, angle_dir: FftDirection) -> ComplexMatrix {
    let (r, c) = w.shape();
    let mut out = w.clone();
    let angle = plan(c, angle_dir);
    let sc = 1.0 / (c as f64).sqrt();
    for i in 0..r {
        let row = out.row_mut(i);
        angle.process(row);
        row.iter_mut().for_each(|z| *z *= sc);
    }
    let delay = plan(r, delay_dir);
    let sr = 1.0 / (r as f64).sqrt();
    let mut col = vec![Complex64::new(0.0, 0.0); r];
    for j in 0..c {
        for i in 0..r {
            col[i] = out[(i, j)];
        }
        delay.process(&mut col);
        for i in 0..r {
            out[(i, j)] = col[i] * sr;
        }
    }
    out
}

/// `F_d^H w F_a` with unitary DFT matrices `F[k][l] = exp(-j2πkl/N)/√N`.
pub fn dft2(w: &ComplexMatrix) -> ComplexMatrix {
    transform(w, FftDirection::Inverse, FftDirection::Forward)
}

/// `F_d x F_a^H`, the exact inverse of [`dft2`].
pub fn inverse_dft2(x: &ComplexMatrix) -> ComplexMatrix {
    transform(x, FftDirection::Forward, FftDirection::Inverse)
}

/// `out[i][j] = w[(i + m) mod R][(j + n) mod C]`; negative shifts wrap.
pub fn circular_shift(w: &ComplexMatrix, m: i64, n: i64) -> ComplexMatrix {
    let (r, c) = w.shape();
    let m = m.rem_euclid(r as i64) as usize;
    let n = n.rem_euclid(c as i64) as usize;
    ComplexMatrix::from_fn(r, c, |i, j| w[((i + m) % r, (j + n) % c)])
}

/// Row and column sums of the entrywise magnitudes.
pub fn row_col_sums(w: &ComplexMatrix) -> (Vec<f64>, Vec<f64>) {
    let (r, c) = w.shape();
    let mut rows = vec![0.0; r];
    let mut cols = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            let a = w[(i, j)].norm();
            rows[i] += a;
            cols[j] += a;
        }
    }
    (rows, cols)
}

/// `argmax_m Σ_i x[(i + m) mod N] y[i]`, smallest `m` on ties.
pub fn best_cyclic_lag(x: &[f64], y: &[f64]) -> usize {
    let n = x.len();
    let mut best = (0, f64::NEG_INFINITY);
    for m in 0..n {
        let score: f64 = (0..n).map(|i| x[(i + m) % n] * y[i]).sum();
        if score > best.1 {
            best = (m, score);
        }
    }
    best.0
}

/// Row and column shifts maximizing the correlation of magnitude sums with the
/// benchmark, solved independently.
pub fn optimal_shift(w_spar: &ComplexMatrix, bench: &ComplexMatrix) -> Result<ShiftControl> {
    if w_spar.shape() != bench.shape() {
        return Err(Error::dims(format!("{:?}", bench.shape()), format!("{:?}", w_spar.shape())));
    }
    let (rw, cw) = row_col_sums(w_spar);
    let (rb, cb) = row_col_sums(bench);
    Ok(ShiftControl {
        m_star: best_cyclic_lag(&rw, &rb),
        n_star: best_cyclic_lag(&cw, &cb),
    })
}

/// Applies a known control: `circular_shift(dft2(w), m, n)`.
pub fn apply_control(w: &ComplexMatrix, control: ShiftControl) -> ComplexMatrix {
    circular_shift(&dft2(w), control.m_star as i64, control.n_star as i64)
}

pub fn align(w_bce: &ComplexMatrix, bench: &ComplexMatrix) -> Result<AlignedCsi> {
    let spar = dft2(w_bce);
    let control = optimal_shift(&spar, bench)?;
    Ok(AlignedCsi {
        matrix: circular_shift(&spar, control.m_star as i64, control.n_star as i64),
        control,
    })
}

/// Undoes the shift, then the 2D DFT.
pub fn restore(w_ifa_hat: &ComplexMatrix, control: ShiftControl) -> ComplexMatrix {
    inverse_dft2(&circular_shift(w_ifa_hat, -(control.m_star as i64), -(control.n_star as i64)))
}

fn has_unique_max(v: &[f64]) -> bool {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max > 0.0 && v.iter().filter(|&&x| x >= max * (1.0 - 1e-9)).count() == 1
}

fn check_unique(w: &ComplexMatrix, link: &'static str) -> Result<()> {
    let (r, c) = row_col_sums(w);
    if !has_unique_max(&r) {
        return Err(Error::BenchmarkAmbiguous { link, axis: "row" });
    }
    if !has_unique_max(&c) {
        return Err(Error::BenchmarkAmbiguous { link, axis: "column" });
    }
    Ok(())
}

/// Coupled benchmarks from a boresight, zero-delay line-of-sight channel, run
/// through eigen extraction, enhancement and the 2D DFT on each link.
pub fn make_benchmarks(cfg: &SystemConfig) -> Result<BenchmarkPair> {
    make_benchmarks_from(cfg, &PathSet::line_of_sight(0.5))
}

pub fn make_benchmarks_from(cfg: &SystemConfig, los: &PathSet) -> Result<BenchmarkPair> {
    let one = |link: Link| -> Result<ComplexMatrix> {
        let hs = render_channel(los, cfg, link)?;
        let (_, reports) = eigenvector_matrix(&hs)?;
        Ok(dft2(&enhance_matrix(&hs, &reports)?.enhanced))
    };
    let pair = BenchmarkPair {
        dl: one(Link::Downlink)?,
        ul: one(Link::Uplink)?,
    };
    check_unique(&pair.dl, "DL")?;
    check_unique(&pair.ul, "UL")?;
    Ok(pair)
}
