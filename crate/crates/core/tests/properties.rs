use nalgebra::{Complex, DMatrix};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use imfeed::bce::{enhance_subband, extract_reference};
use imfeed::channel::{generate_pair, render_channel, sample_paths, EnvironmentSpec, Path, PathSet};
use imfeed::codec::{dequantize, quantize, Codeword};
use imfeed::eigen::dominant_eigenpair;
use imfeed::ifa::{circular_shift, make_benchmarks, optimal_shift};
use imfeed::metrics::{pearson_mag, sgcs, sgcs_vec};
use imfeed::{desk_config, ComplexMatrix, Link};

fn random_matrix(seed: u64, r: usize, c: usize) -> ComplexMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ComplexMatrix::from_fn(r, c, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

fn numerical_rank(h: &ComplexMatrix) -> usize {
    let m = DMatrix::from_fn(h.rows(), h.cols(), |i, j| Complex::new(h[(i, j)].re, h[(i, j)].im));
    let sv = m.singular_values();
    let top = sv.max();
    sv.iter().filter(|&&s| s > 1e-10 * top).count()
}

#[test]
fn generic_three_path_channels_have_full_path_rank() {
    let cfg = desk_config();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let paths = PathSet {
            paths: (0..3)
                .map(|_| Path {
                    aod: rng.random_range(-1.0..1.0),
                    aoa: rng.random_range(-1.0..1.0),
                    delay_s: rng.random_range(0.0..1e-6),
                    gain_mag: rng.random_range(0.3..1.0),
                    phase_dl: rng.random_range(0.0..6.28),
                    phase_ul: rng.random_range(0.0..6.28),
                })
                .collect(),
            spacing_wavelengths: 0.5,
        };
        for link in [Link::Downlink, Link::Uplink] {
            for h in render_channel(&paths, &cfg, link).unwrap() {
                assert_eq!(numerical_rank(&h), cfg.n_rx.min(3));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_bounded_by_paths(env_index in 0usize..10, user in 0u64..1000) {
        let cfg = desk_config();
        let env = EnvironmentSpec::family(env_index, 5);
        let n_paths = sample_paths(&env, user).paths.len();
        let pair = generate_pair(&env, &cfg, user).unwrap();
        for h in pair.dl.iter().chain(&pair.ul) {
            prop_assert!(numerical_rank(h) <= cfg.n_rx.min(n_paths));
        }
    }

    #[test]
    fn eigenvector_is_unit_and_invariant_to_channel_phase(seed in any::<u64>(), theta in 0.0f64..6.28) {
        let h = random_matrix(seed, 2, 8);
        let a = dominant_eigenpair(&h).unwrap();
        let b = dominant_eigenpair(&h.scale(Complex64::from_polar(1.0, theta))).unwrap();
        let norm: f64 = a.eigenvector.iter().map(|z| z.norm_sqr()).sum();
        prop_assert!((norm - 1.0).abs() < 1e-12);
        prop_assert!((a.eigenvalue - b.eigenvalue).abs() <= 1e-12 * a.eigenvalue);
        prop_assert!(sgcs_vec(&a.eigenvector, &b.eigenvector) > 1.0 - 1e-12);
    }

    #[test]
    fn enhancement_is_gauge_independent(seed in any::<u64>(), theta in 0.0f64..6.28) {
        let h = random_matrix(seed, 2, 8);
        let report = dominant_eigenpair(&h).unwrap();
        let reference = extract_reference(&h).unwrap();
        let u = Complex64::from_polar(1.0, theta);
        let mut rotated = report.clone();
        rotated.eigenvector.iter_mut().for_each(|z| *z *= u);
        rotated.eigenspace_basis.iter_mut().flatten().for_each(|z| *z *= u);
        let a = enhance_subband(&report, &reference).unwrap();
        let b = enhance_subband(&rotated, &reference).unwrap();
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
        prop_assert!(diff < 1e-12);
    }

    #[test]
    fn optimal_shift_ignores_positive_scaling(seed in any::<u64>(), s in 1e-3f64..1e3) {
        let cfg = desk_config();
        let bench = make_benchmarks(&cfg).unwrap();
        let w = random_matrix(seed, cfg.n_sub, cfg.n_tx);
        let a = optimal_shift(&w, &bench.dl).unwrap();
        let b = optimal_shift(&w.scale(Complex64::new(s, 0.0)), &bench.dl).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn shifted_benchmark_realigns(m in 0i64..4, n in 0i64..8) {
        let bench = make_benchmarks(&desk_config()).unwrap();
        let moved = circular_shift(&bench.dl, m, n);
        let c = optimal_shift(&moved, &bench.dl).unwrap();
        let back = circular_shift(&moved, c.m_star as i64, c.n_star as i64);
        prop_assert!(back.sub(&bench.dl).unwrap().fro_norm() == 0.0);
    }

    #[test]
    fn quantizer_is_monotone_and_bounded(mut z in prop::collection::vec(0.0f64..=1.0, 1..40), bits in 1u32..=8) {
        z.sort_by(f64::total_cmp);
        let c = quantize(&z, bits).unwrap();
        prop_assert!(c.levels().windows(2).all(|w| w[0] <= w[1]));
        let bound = 0.5 / ((1u32 << bits) - 1) as f64;
        for (a, b) in z.iter().zip(dequantize(&c)) {
            prop_assert!((a - b).abs() <= bound + 1e-15);
        }
        prop_assert_eq!(c.to_bytes().len(), (z.len() * bits as usize).div_ceil(8));
        prop_assert_eq!(Codeword::from_bytes(&c.to_bytes(), z.len(), bits).unwrap(), c);
    }

    #[test]
    fn sgcs_ignores_row_phases(seed in any::<u64>(), phases in prop::collection::vec(0.0f64..6.28, 4)) {
        let a = random_matrix(seed, 4, 8);
        let b = random_matrix(seed ^ 1, 4, 8);
        let mut rb = b.clone();
        for (s, p) in phases.iter().enumerate() {
            rb.row_mut(s).iter_mut().for_each(|z| *z *= Complex64::from_polar(1.0, *p));
        }
        prop_assert!((sgcs(&a, &b).unwrap() - sgcs(&a, &rb).unwrap()).abs() < 1e-12);
        prop_assert!((sgcs(&a, &b).unwrap() - sgcs(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((pearson_mag(&a, &b).unwrap() - pearson_mag(&a, &rb.scale(Complex64::i())).unwrap()).abs() < 1e-12);
    }
}
