//! Dominant eigenpair of `H^H H` per subband, and eigenvector-matrix assembly.
//!
//! The decomposition runs on the small `N_Rx x N_Rx` Gram matrix `H H^H` and maps
//! back through `w = H^H v / ||H^H v||`; the nonzero spectra of the two Gram
//! matrices coincide.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ComplexMatrix;

/// Relative tolerance on the eigen-equation residual.
pub const TOL_EIGEN_REL: f64 = 1e-9;
/// Relative gap below which eigenvalues count as one (multiple) eigenvalue.
pub const TOL_MULT_REL: f64 = 1e-8;

const JACOBI_MAX_SWEEPS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenReport {
    pub eigenvalue: f64,
    /// Unit-norm; gauge fixed so the largest-magnitude entry is real and nonnegative.
    pub eigenvector: Vec<Complex64>,
    /// Orthonormal basis of the dominant eigenspace, `eigenvector` first.
    pub eigenspace_basis: Vec<Vec<Complex64>>,
    /// `||H^H H w - λ w||`.
    pub residual: f64,
}

impl EigenReport {
    pub fn multiplicity(&self) -> usize {
        self.eigenspace_basis.len()
    }
}

/// Eigendecomposition of a Hermitian matrix by cyclic complex Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching orthonormal
/// eigenvectors as the columns of the second value. Only the Hermitian part of
/// `a` is used.
pub fn hermitian_eigen(a: &ComplexMatrix) -> (Vec<f64>, ComplexMatrix) {
    let n = a.rows();
    assert_eq!(n, a.cols(), "hermitian_eigen needs a square matrix");
    let mut m = ComplexMatrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)].conj()));
    let mut v = ComplexMatrix::from_fn(n, n, |i, j| {
        if i == j {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    let scale = m.fro_norm();
    if scale > 0.0 {
        for _ in 0..JACOBI_MAX_SWEEPS {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| m[(i, j)].norm_sqr())
                .sum::<f64>()
                .sqrt();
            if off <= 1e-17 * scale {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    rotate(&mut m, &mut v, p, q);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m[(i, i)].re).collect();
    order.sort_by(|&x, &y| diag[y].total_cmp(&diag[x]).then(x.cmp(&y)));
    let values = order.iter().map(|&i| diag[i]).collect();
    let vectors = ComplexMatrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    (values, vectors)
}

/// One Jacobi step annihilating `m[p][q]`; accumulates the rotation into `v`.
fn rotate(m: &mut ComplexMatrix, v: &mut ComplexMatrix, p: usize, q: usize) {
    let apq = m[(p, q)];
    let r = apq.norm();
    if r == 0.0 {
        return;
    }
    let phase = apq / r; // e^{iα}
    let app = m[(p, p)].re;
    let aqq = m[(q, q)].re;
    let tau = (aqq - app) / (2.0 * r);
    let t = if tau >= 0.0 {
        1.0 / (tau + (1.0 + tau * tau).sqrt())
    } else {
        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;
    let n = m.rows();
    let ph_conj = phase.conj();
    // columns: M <- M U with U_pp = c, U_pq = s, U_qp = -s e^{-iα}, U_qq = c e^{-iα}
    for k in 0..n {
        let mp = m[(k, p)];
        let mq = m[(k, q)];
        m[(k, p)] = c * mp - s * ph_conj * mq;
        m[(k, q)] = s * mp + c * ph_conj * mq;
        let vp = v[(k, p)];
        let vq = v[(k, q)];
        v[(k, p)] = c * vp - s * ph_conj * vq;
        v[(k, q)] = s * vp + c * ph_conj * vq;
    }
    // rows: M <- U^H M
    for k in 0..n {
        let mp = m[(p, k)];
        let mq = m[(q, k)];
        m[(p, k)] = c * mp - s * phase * mq;
        m[(q, k)] = s * mp + c * phase * mq;
    }
    m[(p, q)] = Complex64::new(0.0, 0.0);
    m[(q, p)] = Complex64::new(0.0, 0.0);
    m[(p, p)].im = 0.0;
    m[(q, q)].im = 0.0;
}

pub(crate) fn vec_norm(v: &[Complex64]) -> f64 {
    v.iter().map(Complex64::norm_sqr).sum::<f64>().sqrt()
}

/// Rotates `v` so that its largest-magnitude entry (first on ties) is real and nonnegative.
pub fn fix_gauge(v: &mut [Complex64]) {
    let mut best = 0;
    for (i, z) in v.iter().enumerate() {
        if z.norm_sqr() > v[best].norm_sqr() {
            best = i;
        }
    }
    let pivot = v[best];
    if pivot.norm() > 0.0 {
        let u = pivot.conj() / pivot.norm();
        v.iter_mut().for_each(|z| *z *= u);
    }
}

/// `||H^H H w - λ w||`.
pub fn eigen_residual(h: &ComplexMatrix, w: &[Complex64], lambda: f64) -> f64 {
    let hhw = h.adjoint_apply(&h.apply(w));
    hhw.iter()
        .zip(w)
        .map(|(a, b)| (a - lambda * b).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

fn report_from_basis(h: &ComplexMatrix, values: &[f64], mut basis: Vec<Vec<Complex64>>) -> EigenReport {
    let lambda_max = values[0];
    for b in &mut basis {
        fix_gauge(b);
    }
    let eigenvector = basis[0].clone();
    let residual = eigen_residual(h, &eigenvector, lambda_max);
    EigenReport {
        eigenvalue: lambda_max,
        eigenvector,
        eigenspace_basis: basis,
        residual,
    }
}

fn dominant_group(values: &[f64]) -> usize {
    let lambda_max = values[0];
    values
        .iter()
        .take_while(|&&l| (l - lambda_max).abs() <= TOL_MULT_REL * lambda_max)
        .count()
}

/// Dominant eigenpair of `h^H h` via the `h h^H` Gram matrix.
pub fn dominant_eigenpair(h: &ComplexMatrix) -> Result<EigenReport> {
    if h.is_zero() {
        return Err(Error::ZeroChannel { subband: None });
    }
    let gram = h.matmul(&h.conj_transpose())?;
    let (values, vecs) = hermitian_eigen(&gram);
    let mult = dominant_group(&values);
    let basis = (0..mult)
        .map(|k| {
            let v: Vec<Complex64> = (0..vecs.rows()).map(|i| vecs[(i, k)]).collect();
            let mut u = h.adjoint_apply(&v);
            let norm = vec_norm(&u);
            u.iter_mut().for_each(|z| *z /= norm);
            u
        })
        .collect();
    Ok(report_from_basis(h, &values, basis))
}

/// Same contract as [`dominant_eigenpair`], decomposing the full `N_Tx x N_Tx`
/// matrix `h^H h` directly.
pub fn dominant_eigenpair_direct(h: &ComplexMatrix) -> Result<EigenReport> {
    if h.is_zero() {
        return Err(Error::ZeroChannel { subband: None });
    }
    let gram = h.conj_transpose().matmul(h)?;
    let (values, vecs) = hermitian_eigen(&gram);
    let mult = dominant_group(&values);
    let basis = (0..mult)
        .map(|k| (0..vecs.rows()).map(|i| vecs[(i, k)]).collect())
        .collect();
    Ok(report_from_basis(h, &values, basis))
}

/// Stacks the per-subband dominant eigenvectors as the rows of an `N_s x N_Tx` matrix.
pub fn eigenvector_matrix(channels: &[ComplexMatrix]) -> Result<(ComplexMatrix, Vec<EigenReport>)> {
    if channels.is_empty() {
        return Err(Error::dims("at least one subband", "0"));
    }
    let reports = channels
        .iter()
        .enumerate()
        .map(|(s, h)| {
            dominant_eigenpair(h).map_err(|e| match e {
                Error::ZeroChannel { .. } => Error::ZeroChannel { subband: Some(s) },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<Complex64>> = reports.iter().map(|r| r.eigenvector.clone()).collect();
    Ok((ComplexMatrix::from_rows(&rows)?, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::sgcs_vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_matrix(rng: &mut impl Rng, r: usize, cols: usize) -> ComplexMatrix {
        ComplexMatrix::from_fn(r, cols, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn rank_one_axis_vector() {
        // h = a e_1^H with ||a|| = 1
        let a = [c(0.6, 0.0), c(0.0, 0.8)];
        let h = ComplexMatrix::from_fn(2, 4, |i, j| if j == 0 { a[i] } else { c(0.0, 0.0) });
        let rep = dominant_eigenpair(&h).unwrap();
        assert!((rep.eigenvalue - 1.0).abs() < 1e-14);
        assert!((rep.eigenvector[0] - c(1.0, 0.0)).norm() < 1e-14);
        assert!(rep.eigenvector[1..].iter().all(|z| z.norm() < 1e-14));
        assert_eq!(rep.multiplicity(), 1);
    }

    #[test]
    fn zero_channel_is_an_error() {
        let h = ComplexMatrix::zeros(2, 4);
        assert!(matches!(dominant_eigenpair(&h), Err(Error::ZeroChannel { subband: None })));
        let good = ComplexMatrix::from_fn(2, 4, |i, j| c((i + j) as f64, 1.0));
        assert!(matches!(
            eigenvector_matrix(&[good, h]),
            Err(Error::ZeroChannel { subband: Some(1) })
        ));
    }

    #[test]
    fn jacobi_reconstructs_hermitian_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [1, 2, 3, 5, 8] {
            let b = random_matrix(&mut rng, n, n);
            let a = b.matmul(&b.conj_transpose()).unwrap();
            let (vals, vecs) = hermitian_eigen(&a);
            assert!(vals.windows(2).all(|w| w[0] >= w[1]));
            let d = ComplexMatrix::from_fn(n, n, |i, j| if i == j { c(vals[i], 0.0) } else { c(0.0, 0.0) });
            let back = vecs.matmul(&d).unwrap().matmul(&vecs.conj_transpose()).unwrap();
            assert!(back.sub(&a).unwrap().fro_norm() < 1e-12 * a.fro_norm());
            let gram = vecs.conj_transpose().matmul(&vecs).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[(i, j)] - c(expect, 0.0)).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn report_invariants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let h = random_matrix(&mut rng, 3, 7);
            let rep = dominant_eigenpair(&h).unwrap();
            assert!((vec_norm(&rep.eigenvector) - 1.0).abs() < 1e-12);
            assert!(rep.residual <= TOL_EIGEN_REL * rep.eigenvalue);
            let pivot = rep
                .eigenvector
                .iter()
                .max_by(|a, b| a.norm().total_cmp(&b.norm()))
                .unwrap();
            assert!(pivot.im.abs() < 1e-15 && pivot.re >= 0.0);
        }
    }

    #[test]
    fn gram_route_matches_direct_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let h = random_matrix(&mut rng, 4, 32);
            let small = dominant_eigenpair(&h).unwrap();
            let big = dominant_eigenpair_direct(&h).unwrap();
            assert!(sgcs_vec(&small.eigenvector, &big.eigenvector) >= 1.0 - 1e-10);
            assert!((small.eigenvalue - big.eigenvalue).abs() <= 1e-10 * big.eigenvalue);
        }
    }

    #[test]
    fn degenerate_dominant_eigenspace_detected() {
        // h = diag(2, 2) padded: eigenvalue 4 with multiplicity 2
        let h = ComplexMatrix::from_fn(2, 4, |i, j| if i == j { c(2.0, 0.0) } else { c(0.0, 0.0) });
        let rep = dominant_eigenpair(&h).unwrap();
        assert_eq!(rep.multiplicity(), 2);
        let b = &rep.eigenspace_basis;
        let ip: Complex64 = b[0].iter().zip(&b[1]).map(|(x, y)| x.conj() * y).sum();
        assert!(ip.norm() < 1e-12);
    }

    #[test]
    fn matrix_rows_are_subband_eigenvectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_matrix(&mut rng, 2, 5);
        let (w, reps) = eigenvector_matrix(std::slice::from_ref(&h)).unwrap();
        assert_eq!(w.shape(), (1, 5));
        assert_eq!(w.row(0), reps[0].eigenvector.as_slice());

        let flat = vec![h.clone(), h.clone(), h];
        let (w, _) = eigenvector_matrix(&flat).unwrap();
        for s in 1..3 {
            assert!(sgcs_vec(w.row(0), w.row(s)) > 1.0 - 1e-14);
        }
    }
}
