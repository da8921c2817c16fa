//! Geometric multipath generator for paired uplink/downlink channels.
//!
//! Both links of a [`ChannelPair`] are rendered from one [`PathSet`]: angles,
//! delays and gain magnitudes are shared, while the per-path phases are drawn
//! independently for each link. The links then differ only through their
//! carrier frequency and those phases.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ChannelPair, ComplexMatrix, Link, SystemConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    /// Departure angle at the BS array, radians from broadside.
    pub aod: f64,
    /// Arrival angle at the UE array, radians from broadside.
    pub aoa: f64,
    pub delay_s: f64,
    pub gain_mag: f64,
    pub phase_dl: f64,
    pub phase_ul: f64,
}

impl Path {
    fn phase(&self, link: Link) -> f64 {
        match link {
            Link::Downlink => self.phase_dl,
            Link::Uplink => self.phase_ul,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub paths: Vec<Path>,
    /// Element spacing in downlink wavelengths, shared by both arrays.
    pub spacing_wavelengths: f64,
}

impl PathSet {
    pub fn validate(&self) -> Result<()> {
        if self.paths.is_empty() {
            return Err(Error::InvalidPaths("at least one path required".into()));
        }
        if !(self.spacing_wavelengths.is_finite() && self.spacing_wavelengths > 0.0) {
            return Err(Error::InvalidPaths("antenna spacing must be positive".into()));
        }
        for (i, p) in self.paths.iter().enumerate() {
            let finite = [p.aod, p.aoa, p.delay_s, p.gain_mag, p.phase_dl, p.phase_ul]
                .iter()
                .all(|v| v.is_finite());
            if !finite || p.delay_s < 0.0 || p.gain_mag < 0.0 {
                return Err(Error::InvalidPaths(format!("path {i} has invalid parameters")));
            }
        }
        if self.paths.iter().map(|p| p.gain_mag * p.gain_mag).sum::<f64>() <= 0.0 {
            return Err(Error::InvalidPaths("total path power is zero".into()));
        }
        Ok(())
    }

    /// A single boresight path with zero delay and zero phases.
    pub fn line_of_sight(spacing_wavelengths: f64) -> Self {
        Self {
            paths: vec![Path {
                aod: 0.0,
                aoa: 0.0,
                delay_s: 0.0,
                gain_mag: 1.0,
                phase_dl: 0.0,
                phase_ul: 0.0,
            }],
            spacing_wavelengths,
        }
    }
}

/// Statistical description of one propagation environment.
///
/// The first path of every user is the dominant one (unit gain, delay equal to
/// the user's base delay); the remaining `n_paths - 1` paths are scattered with
/// Rayleigh-distributed magnitudes of mean power `scatter_power`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub env_id: i64,
    pub n_paths: usize,
    /// Uniform interval for departure angles, radians.
    pub aod_range: (f64, f64),
    /// Uniform interval for arrival angles, radians.
    pub aoa_range: (f64, f64),
    /// Base (first-arrival) delays are uniform in `[0, delay_offset_max_s]`.
    pub delay_offset_max_s: f64,
    /// Excess delays of scattered paths are uniform in `[0, delay_spread_s]`.
    pub delay_spread_s: f64,
    pub scatter_power: f64,
    pub antenna_spacing_wavelengths: f64,
    pub seed: u64,
}

impl EnvironmentSpec {
    /// Single-path environment at a fixed broadside geometry.
    pub fn line_of_sight(env_id: i64, seed: u64) -> Self {
        Self {
            env_id,
            n_paths: 1,
            aod_range: (0.0, 0.0),
            aoa_range: (0.0, 0.0),
            delay_offset_max_s: 0.0,
            delay_spread_s: 0.0,
            scatter_power: 0.0,
            antenna_spacing_wavelengths: 0.5,
            seed,
        }
    }

    /// Deterministic member `index` of a family of distinct urban-like
    /// environments; each has its own angular sector, path count and delay
    /// profile.
    pub fn family(index: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e11f);
        rng.set_stream(index as u64);
        let deg = PI / 180.0;
        let center = rng.random_range(-50.0..50.0) * deg;
        let width = rng.random_range(15.0..35.0) * deg;
        let ue_center = rng.random_range(-60.0..60.0) * deg;
        Self {
            env_id: index as i64,
            n_paths: rng.random_range(3..=6),
            aod_range: (center - width / 2.0, center + width / 2.0),
            aoa_range: (ue_center - 60.0 * deg, ue_center + 60.0 * deg),
            delay_offset_max_s: rng.random_range(0.1e-6..0.8e-6),
            delay_spread_s: rng.random_range(0.05e-6..0.4e-6),
            scatter_power: rng.random_range(0.05..0.3),
            antenna_spacing_wavelengths: 0.5,
            seed: seed.wrapping_add(index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        }
    }

    pub fn validate(&self, cfg: &SystemConfig) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("environment {}: {m}", self.env_id)));
        if self.n_paths == 0 {
            return bad("n_paths must be positive".into());
        }
        if !(self.antenna_spacing_wavelengths.is_finite() && self.antenna_spacing_wavelengths > 0.0) {
            return bad("antenna spacing must be positive".into());
        }
        for (lo, hi) in [self.aod_range, self.aoa_range] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad("angle intervals must be finite and ordered".into());
            }
        }
        if !(self.delay_offset_max_s >= 0.0 && self.delay_spread_s >= 0.0 && self.scatter_power >= 0.0) {
            return bad("delays and scatter power must be nonnegative".into());
        }
        let max_delay = self.delay_offset_max_s + self.delay_spread_s;
        if max_delay >= cfg.symbol_duration_s() {
            return bad(format!(
                "maximum delay {max_delay:e} s exceeds the OFDM symbol ({:e} s)",
                cfg.symbol_duration_s()
            ));
        }
        Ok(())
    }

    fn rng_for(&self, user_index: u64, stream_salt: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stream_salt);
        rng.set_stream(user_index);
        rng
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws the propagation paths of user `user_index`; deterministic in
/// `(env.seed, user_index)`.
pub fn sample_paths(env: &EnvironmentSpec, user_index: u64) -> PathSet {
    sample_paths_salted(env, user_index, 0)
}

fn sample_paths_salted(env: &EnvironmentSpec, user_index: u64, salt: u64) -> PathSet {
    let mut rng = env.rng_for(user_index, salt);
    let base_delay = uniform(&mut rng, (0.0, env.delay_offset_max_s));
    let paths = (0..env.n_paths)
        .map(|p| {
            let aod = uniform(&mut rng, env.aod_range);
            let aoa = uniform(&mut rng, env.aoa_range);
            let (delay_s, gain_mag) = if p == 0 {
                (base_delay, 1.0)
            } else {
                let excess = uniform(&mut rng, (0.0, env.delay_spread_s));
                let power: f64 = Exp1.sample(&mut rng);
                (base_delay + excess, (env.scatter_power * power).sqrt())
            };
            Path {
                aod,
                aoa,
                delay_s,
                gain_mag,
                phase_dl: rng.random_range(0.0..2.0 * PI),
                phase_ul: rng.random_range(0.0..2.0 * PI),
            }
        })
        .collect();
    PathSet {
        paths,
        spacing_wavelengths: env.antenna_spacing_wavelengths,
    }
}

/// Uniform linear array response `exp(-j 2π k d sinθ f/f_dl)`, unit-modulus entries.
pub fn steering_vector(n: usize, angle: f64, spacing_wavelengths: f64, freq_ratio: f64) -> Vec<Complex64> {
    let psi = 2.0 * PI * spacing_wavelengths * angle.sin() * freq_ratio;
    (0..n).map(|k| Complex64::from_polar(1.0, -psi * k as f64)).collect()
}

/// Renders the `n_sub` subband channel matrices (each `n_rx x n_tx`) of one link.
pub fn render_channel(paths: &PathSet, cfg: &SystemConfig, link: Link) -> Result<Vec<ComplexMatrix>> {
    cfg.validate()?;
    paths.validate()?;
    let ratio = cfg.carrier_hz(link) / cfg.f_dl_hz;
    let arrays: Vec<(Vec<Complex64>, Vec<Complex64>)> = paths
        .paths
        .iter()
        .map(|p| {
            (
                steering_vector(cfg.n_rx, p.aoa, paths.spacing_wavelengths, ratio),
                steering_vector(cfg.n_tx, p.aod, paths.spacing_wavelengths, ratio),
            )
        })
        .collect();
    Ok((0..cfg.n_sub)
        .map(|s| {
            let f_s = cfg.subband_center_hz(link, s);
            let mut h = ComplexMatrix::zeros(cfg.n_rx, cfg.n_tx);
            for (p, (a_rx, a_tx)) in paths.paths.iter().zip(&arrays) {
                // reduce f·τ modulo one cycle before scaling to keep the phase exact
                let cycles = (f_s * p.delay_s).fract();
                let coeff = Complex64::from_polar(p.gain_mag, p.phase(link) - 2.0 * PI * cycles);
                for (i, ar) in a_rx.iter().enumerate() {
                    let ar = coeff * ar;
                    for (hij, at) in h.row_mut(i).iter_mut().zip(a_tx) {
                        *hij += ar * at.conj();
                    }
                }
            }
            h
        })
        .collect())
}

/// Renders both links of user `user_index` from one shared path set.
pub fn generate_pair(env: &EnvironmentSpec, cfg: &SystemConfig, user_index: u64) -> Result<ChannelPair> {
    env.validate(cfg)?;
    let paths = sample_paths(env, user_index);
    ChannelPair::new(
        render_channel(&paths, cfg, Link::Downlink)?,
        render_channel(&paths, cfg, Link::Uplink)?,
        env.env_id,
    )
}

/// Control pair whose uplink geometry is drawn independently of the downlink.
pub fn generate_decorrelated_pair(env: &EnvironmentSpec, cfg: &SystemConfig, user_index: u64) -> Result<ChannelPair> {
    env.validate(cfg)?;
    let dl_paths = sample_paths(env, user_index);
    let ul_paths = sample_paths_salted(env, user_index, 0xdec0_44e1_a7ed);
    ChannelPair::new(
        render_channel(&dl_paths, cfg, Link::Downlink)?,
        render_channel(&ul_paths, cfg, Link::Uplink)?,
        env.env_id,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::desk_config;

    fn env() -> EnvironmentSpec {
        EnvironmentSpec::family(3, 11)
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(sample_paths(&env(), 7), sample_paths(&env(), 7));
        let a = generate_pair(&env(), &desk_config(), 7).unwrap();
        let b = generate_pair(&env(), &desk_config(), 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_path_environment_yields_one_path() {
        let e = EnvironmentSpec { n_paths: 1, ..env() };
        assert_eq!(sample_paths(&e, 0).paths.len(), 1);
    }

    #[test]
    fn user_indices_give_distinct_path_sets() {
        let e = env();
        let sets: Vec<PathSet> = (0..200).map(|u| sample_paths(&e, u)).collect();
        for pair in sets.chunks(2) {
            assert_ne!(pair[0], pair[1]);
        }
    }

    #[test]
    fn boresight_los_is_frequency_flat_rank_one() {
        let cfg = desk_config();
        let hs = render_channel(&PathSet::line_of_sight(0.5), &cfg, Link::Downlink).unwrap();
        for h in &hs {
            assert_eq!(h, &hs[0]);
        }
        // every entry equals 1: the outer product of all-ones steering vectors
        assert!(hs[0].as_slice().iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn zero_gain_rejected() {
        let mut ps = PathSet::line_of_sight(0.5);
        ps.paths[0].gain_mag = 0.0;
        assert!(matches!(
            render_channel(&ps, &desk_config(), Link::Uplink),
            Err(Error::InvalidPaths(_))
        ));
    }

    #[test]
    fn empty_subband_grid_rejected() {
        let mut cfg = desk_config();
        cfg.n_sub = 0;
        assert!(render_channel(&PathSet::line_of_sight(0.5), &cfg, Link::Downlink).is_err());
    }

    #[test]
    fn delays_must_fit_the_symbol() {
        let cfg = desk_config();
        let e = EnvironmentSpec {
            delay_offset_max_s: cfg.symbol_duration_s(),
            ..env()
        };
        assert!(e.validate(&cfg).is_err());
    }

    #[test]
    fn links_differ_only_by_carrier_and_phase() {
        // with UL phases copied from DL and equal carriers the links coincide exactly
        let mut cfg = desk_config();
        let mut ps = sample_paths(&env(), 4);
        for p in &mut ps.paths {
            p.phase_ul = p.phase_dl;
        }
        cfg.f_ul_hz = cfg.f_dl_hz;
        let dl = render_channel(&ps, &cfg, Link::Downlink).unwrap();
        let ul = render_channel(&ps, &cfg, Link::Uplink).unwrap();
        assert_eq!(dl, ul);
    }

    #[test]
    fn steering_vectors_have_unit_modulus() {
        let a = steering_vector(16, 0.3, 0.5, 0.95);
        assert!(a.iter().all(|z| (z.norm() - 1.0).abs() < 1e-14));
        assert_eq!(a[0], Complex64::new(1.0, 0.0));
    }
}
