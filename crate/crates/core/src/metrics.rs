//! Scoring: squared generalized cosine similarity, magnitude Pearson
//! correlation, and empirical CDF summaries.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ComplexMatrix;

/// `|a^H b|^2 / (||a||^2 ||b||^2)`; zero when either vector vanishes.
pub fn sgcs_vec(a: &[Complex64], b: &[Complex64]) -> f64 {
    let ip: Complex64 = a.iter().zip(b).map(|(x, y)| x.conj() * y).sum();
    let na: f64 = a.iter().map(Complex64::norm_sqr).sum();
    let nb: f64 = b.iter().map(Complex64::norm_sqr).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (ip.norm_sqr() / (na * nb)).min(1.0)
}

/// Mean per-row SGCS between two `N_s x N_Tx` eigenvector matrices.
pub fn sgcs(w_true: &ComplexMatrix, w_hat: &ComplexMatrix) -> Result<f64> {
    if w_true.shape() != w_hat.shape() {
        return Err(Error::dims(format!("{:?}", w_true.shape()), format!("{:?}", w_hat.shape())));
    }
    let mut total = 0.0;
    for s in 0..w_true.rows() {
        let (a, b) = (w_true.row(s), w_hat.row(s));
        let zero = |r: &[Complex64]| r.iter().all(|z| z.norm_sqr() == 0.0);
        if zero(a) || zero(b) {
            return Err(Error::ZeroRow { row: s });
        }
        total += sgcs_vec(a, b);
    }
    Ok(total / w_true.rows() as f64)
}

/// Pearson correlation of two real sequences.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims(a.len().to_string(), b.len().to_string()));
    }
    if a.len() < 2 {
        return Err(Error::ConstantInput);
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // relative floor: a field equal up to rounding counts as constant
    let floor = 1e-28 * n * (ma * ma + mb * mb).max(f64::MIN_POSITIVE);
    if saa <= floor || sbb <= floor {
        return Err(Error::ConstantInput);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation between the flattened entrywise magnitudes of two matrices.
pub fn pearson_mag(w_a: &ComplexMatrix, w_b: &ComplexMatrix) -> Result<f64> {
    if w_a.shape() != w_b.shape() {
        return Err(Error::dims(format!("{:?}", w_a.shape()), format!("{:?}", w_b.shape())));
    }
    pearson(&w_a.magnitudes(), &w_b.magnitudes())
}

/// Linear interpolation between order statistics at position `p (n-1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfSummary {
    /// Samples in ascending order.
    pub values: Vec<f64>,
    /// Empirical CDF at each sorted sample, `(i + 1) / n`.
    pub cumulative: Vec<f64>,
    /// Quantiles at 0.1, 0.2, ..., 0.9.
    pub deciles: [f64; 9],
}

impl CdfSummary {
    pub fn median(&self) -> f64 {
        self.deciles[4]
    }

    /// Fraction of samples `<= x`.
    pub fn eval(&self, x: f64) -> f64 {
        self.values.partition_point(|&v| v <= x) as f64 / self.values.len() as f64
    }

    /// Every decile of `self` is at least the matching decile of `other`.
    pub fn dominates(&self, other: &CdfSummary) -> bool {
        self.deciles.iter().zip(&other.deciles).all(|(a, b)| a >= b)
    }

    /// Writes `value,cumulative_probability` rows with a header line.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "value,cumulative_probability")?;
        for (v, p) in self.values.iter().zip(&self.cumulative) {
            writeln!(out, "{v},{p}")?;
        }
        Ok(())
    }
}

pub fn cdf(samples: &[f64]) -> Result<CdfSummary> {
    if samples.is_empty() {
        return Err(Error::Empty);
    }
    let mut values = samples.to_vec();
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let cumulative = (1..=values.len()).map(|i| i as f64 / n).collect();
    let mut deciles = [0.0; 9];
    for (k, d) in deciles.iter_mut().enumerate() {
        *d = quantile_sorted(&values, (k + 1) as f64 / 10.0);
    }
    Ok(CdfSummary {
        values,
        cumulative,
        deciles,
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random(rng: &mut impl Rng, r: usize, cols: usize) -> ComplexMatrix {
        ComplexMatrix::from_fn(r, cols, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn sgcs_identity_and_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 4, 8);
        assert!((sgcs(&w, &w).unwrap() - 1.0).abs() < 1e-14);
        let mut rot = w.clone();
        for s in 0..4 {
            let u = Complex64::from_polar(1.0, 0.7 * s as f64 + 0.1);
            rot.row_mut(s).iter_mut().for_each(|z| *z *= u);
        }
        assert!((sgcs(&w, &rot).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sgcs_orthogonal_rows_is_zero() {
        let a = ComplexMatrix::from_rows(&[vec![c(1.0, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(0.0, 1.0)]]).unwrap();
        let b = ComplexMatrix::from_rows(&[vec![c(0.0, 0.0), c(2.0, 0.0)], vec![c(3.0, 0.0), c(0.0, 0.0)]]).unwrap();
        assert_eq!(sgcs(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn sgcs_rejects_zero_rows() {
        let a = ComplexMatrix::from_rows(&[vec![c(1.0, 0.0)], vec![c(0.0, 0.0)]]).unwrap();
        assert!(matches!(sgcs(&a, &a), Err(Error::ZeroRow { row: 1 })));
    }

    #[test]
    fn pearson_affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 3, 5);
        assert!((pearson_mag(&a, &a).unwrap() - 1.0).abs() < 1e-14);
        let b = ComplexMatrix::from_fn(3, 5, |i, j| c(2.5 * a[(i, j)].norm() + 0.3, 0.0));
        assert!((pearson_mag(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_constant_field_rejected() {
        let a = ComplexMatrix::from_fn(2, 2, |_, _| c(0.0, 1.0));
        let b = ComplexMatrix::from_fn(2, 2, |i, _| c(i as f64, 0.0));
        assert!(matches!(pearson_mag(&a, &b), Err(Error::ConstantInput)));
    }

    #[test]
    fn cdf_conventions() {
        let s = cdf(&[3.0; 7]).unwrap();
        assert!(s.deciles.iter().all(|&d| d == 3.0));
        assert_eq!(s.cumulative.last(), Some(&1.0));

        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(cdf(&ten).unwrap().median(), 5.5);
        assert!(matches!(cdf(&[]), Err(Error::Empty)));
    }

    #[test]
    fn cdf_csv_layout() {
        let s = cdf(&[2.0, 1.0]).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "value,cumulative_probability\n1,0.5\n2,1\n");
    }

    #[test]
    fn dominance_comparator() {
        let lo = cdf(&[0.0, 0.1, 0.2, 0.3]).unwrap();
        let hi = cdf(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(hi.dominates(&lo));
        assert!(!lo.dominates(&hi));
        assert!(lo.dominates(&lo));
    }

    proptest! {
        #[test]
        fn sgcs_symmetric_and_gauge_invariant(
            seed in any::<u64>(),
            phases in proptest::collection::vec(-3.2f64..3.2, 3),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, 3, 6);
            let b = random(&mut rng, 3, 6);
            let ab = sgcs(&a, &b).unwrap();
            prop_assert!((ab - sgcs(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            let mut br = b.clone();
            for (s, ph) in phases.iter().enumerate() {
                br.row_mut(s).iter_mut().for_each(|z| *z *= Complex64::from_polar(1.0, *ph));
            }
            prop_assert!((ab - sgcs(&a, &br).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn pearson_mag_ignores_global_phase(seed in any::<u64>(), ph in -3.2f64..3.2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, 3, 6);
            let b = random(&mut rng, 3, 6);
            let r = pearson_mag(&a, &b).unwrap();
            let rot = a.scale(Complex64::from_polar(1.0, ph));
            prop_assert!((r - pearson_mag(&rot, &b).unwrap()).abs() < 1e-12);
        }
    }
}
