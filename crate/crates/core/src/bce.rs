//! Bi-directional correlation enhancement.
//!
//! Each subband eigenvector is replaced by the unit vector of its dominant
//! eigenspace closest to a reference vector read off the same link's channel.
//! The choice is made independently on each side of the link, so UE and BS
//! reach matching gauges without exchanging any CSI.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::eigen::{vec_norm, EigenReport};
use crate::error::{Error, Result};
use crate::types::ComplexMatrix;

/// Relative norm below which a projected reference counts as degenerate.
pub const DEGENERATE_PROJECTION_REL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BceResult {
    /// `N_s x N_Tx`, unit-norm rows.
    pub enhanced: ComplexMatrix,
    /// `|h_s^H w_s|^2 / ||h_s||^2` per subband.
    pub per_subband_alignment: Vec<f64>,
    /// Subbands that kept their original eigenvector.
    pub fallback_count: usize,
}

/// Channel of the first receive antenna with a nonzero row, read entrywise as
/// a length-`N_Tx` column vector.
pub fn extract_reference(h: &ComplexMatrix) -> Result<Vec<Complex64>> {
    (0..h.rows())
        .map(|i| h.row(i))
        .find(|row| row.iter().any(|z| z.norm_sqr() > 0.0))
        .map(<[Complex64]>::to_vec)
        .ok_or(Error::ZeroChannel { subband: None })
}

/// Projects `reference` onto the dominant eigenspace and normalizes.
pub fn enhance_subband(report: &EigenReport, reference: &[Complex64]) -> Result<Vec<Complex64>> {
    let n = report.eigenvector.len();
    if reference.len() != n {
        return Err(Error::dims(format!("reference of length {n}"), reference.len().to_string()));
    }
    let mut projected = vec![Complex64::new(0.0, 0.0); n];
    for v in &report.eigenspace_basis {
        let coeff: Complex64 = v.iter().zip(reference).map(|(a, b)| a.conj() * b).sum();
        for (p, vi) in projected.iter_mut().zip(v) {
            *p += vi * coeff;
        }
    }
    let norm = vec_norm(&projected);
    if !(norm > DEGENERATE_PROJECTION_REL * vec_norm(reference)) {
        return Err(Error::DegenerateProjection);
    }
    projected.iter_mut().for_each(|z| *z /= norm);
    Ok(projected)
}

pub fn enhance_matrix(channels: &[ComplexMatrix], reports: &[EigenReport]) -> Result<BceResult> {
    if channels.len() != reports.len() || channels.is_empty() {
        return Err(Error::dims(
            format!("{} reports", channels.len()),
            reports.len().to_string(),
        ));
    }
    let mut fallback_count = 0;
    let mut alignment = Vec::with_capacity(channels.len());
    let mut rows = Vec::with_capacity(channels.len());
    for (h, report) in channels.iter().zip(reports) {
        let reference = extract_reference(h).ok();
        let row = match reference.as_deref().map(|r| enhance_subband(report, r)) {
            Some(Ok(w)) => w,
            _ => {
                fallback_count += 1;
                report.eigenvector.clone()
            }
        };
        let a = match &reference {
            Some(r) => {
                let ip: Complex64 = r.iter().zip(&row).map(|(a, b)| a.conj() * b).sum();
                ip.norm_sqr() / r.iter().map(Complex64::norm_sqr).sum::<f64>()
            }
            None => 0.0,
        };
        alignment.push(a);
        rows.push(row);
    }
    Ok(BceResult {
        enhanced: ComplexMatrix::from_rows(&rows)?,
        per_subband_alignment: alignment,
        fallback_count,
    })
}
