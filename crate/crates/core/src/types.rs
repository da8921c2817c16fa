//! Configuration and dense complex matrix types shared by every stage.

use std::fmt;
use std::ops::{Index, IndexMut};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// System dimensions, carriers and feedback sizing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_sub: usize,
    pub n_gran: usize,
    pub f_dl_hz: f64,
    pub f_ul_hz: f64,
    pub bandwidth_hz: f64,
    pub m_bottleneck: usize,
    pub b_bits: u32,
    pub seed: u64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        default_config()
    }
}

/// Full-size configuration: 32 BS antennas, 4 UE antennas, 13 subbands of 48
/// subcarriers in 10 MHz, DL at 2.60 GHz and UL at 2.48 GHz, 6-bit feedback.
pub fn default_config() -> SystemConfig {
    SystemConfig {
        n_tx: 32,
        n_rx: 4,
        n_sub: 13,
        n_gran: 48,
        f_dl_hz: 2.60e9,
        f_ul_hz: 2.48e9,
        bandwidth_hz: 10.0e6,
        m_bottleneck: 1,
        b_bits: 6,
        seed: 0,
    }
}

/// Reduced configuration used by tests and desk-scale experiments.
pub fn desk_config() -> SystemConfig {
    SystemConfig {
        n_tx: 8,
        n_rx: 2,
        n_sub: 4,
        n_gran: 4,
        ..default_config()
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.n_rx == 0 || self.n_tx < self.n_rx {
            return bad("need n_tx >= n_rx >= 1");
        }
        if self.n_sub == 0 || self.n_gran == 0 {
            return bad("need n_sub >= 1 and n_gran >= 1");
        }
        if self.m_bottleneck == 0 {
            return bad("m_bottleneck must be positive");
        }
        if self.b_bits == 0 || self.b_bits > 16 {
            return bad("b_bits must lie in 1..=16");
        }
        for (name, v) in [
            ("f_dl_hz", self.f_dl_hz),
            ("f_ul_hz", self.f_ul_hz),
            ("bandwidth_hz", self.bandwidth_hz),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn total_bits(&self) -> usize {
        self.m_bottleneck * self.b_bits as usize
    }

    pub fn is_fdd(&self) -> bool {
        self.f_dl_hz != self.f_ul_hz
    }

    pub fn carrier_hz(&self, link: Link) -> f64 {
        match link {
            Link::Downlink => self.f_dl_hz,
            Link::Uplink => self.f_ul_hz,
        }
    }

    pub fn subband_spacing_hz(&self) -> f64 {
        self.bandwidth_hz / self.n_sub as f64
    }

    /// Center frequency of subband `s`, symmetric around the link carrier.
    pub fn subband_center_hz(&self, link: Link, s: usize) -> f64 {
        let offset = s as f64 - (self.n_sub as f64 - 1.0) / 2.0;
        self.carrier_hz(link) + offset * self.subband_spacing_hz()
    }

    /// Useful OFDM symbol duration (inverse subcarrier spacing).
    pub fn symbol_duration_s(&self) -> f64 {
        (self.n_sub * self.n_gran) as f64 / self.bandwidth_hz
    }

    pub fn to_kv_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let cfg: SystemConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }

    /// Stable 64-bit digest of the key-value serialization.
    pub fn hash64(&self) -> u64 {
        let digest = Sha256::digest(self.to_kv_string().as_bytes());
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        u64::from_be_bytes(head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Link {
    Uplink,
    Downlink,
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Link::Uplink => "UL",
            Link::Downlink => "DL",
        })
    }
}

/// Dense row-major complex matrix with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::dims(
                format!("{rows}x{cols} positive"),
                format!("{} entries", data.len()),
            ));
        }
        if let Some(k) = data.iter().position(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::NonFinite {
                row: k / cols,
                col: k % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Builds a matrix whose rows are the given equal-length vectors.
    pub fn from_rows(rows: &[Vec<Complex64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dims("rows of equal length", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Complex64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn conj_transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::dims(
                format!("inner dimension {}", self.cols),
                format!("{}", rhs.rows),
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs[(k, j)];
                }
            }
        }
        Ok(out)
    }

    /// `self^H * v` for a vector of length `rows`.
    pub fn adjoint_apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![Complex64::new(0.0, 0.0); self.cols];
        for (i, vi) in v.iter().enumerate() {
            for (o, h) in out.iter_mut().zip(self.row(i)) {
                *o += h.conj() * vi;
            }
        }
        out
    }

    /// `self * v` for a vector of length `cols`.
    pub fn apply(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(h, x)| h * x).sum())
            .collect()
    }

    pub fn fro_norm(&self) -> f64 {
        self.data.iter().map(Complex64::norm_sqr).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|z| z.re == 0.0 && z.im == 0.0)
    }

    /// Entrywise magnitudes, row-major.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(Error::dims(format!("{:?}", self.shape()), format!("{:?}", rhs.shape())));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn scale(&self, s: Complex64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;

    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Uplink and downlink subband channels rendered from one propagation geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelPair {
    pub dl: Vec<ComplexMatrix>,
    pub ul: Vec<ComplexMatrix>,
    pub env_id: i64,
}

impl ChannelPair {
    pub fn new(dl: Vec<ComplexMatrix>, ul: Vec<ComplexMatrix>, env_id: i64) -> Result<Self> {
        if dl.len() != ul.len() || dl.is_empty() {
            return Err(Error::dims(
                format!("{} nonempty subbands on both links", dl.len()),
                format!("{} uplink subbands", ul.len()),
            ));
        }
        let shape = dl[0].shape();
        if dl.iter().chain(&ul).any(|h| h.shape() != shape) {
            return Err(Error::dims(format!("{shape:?} per subband"), "mixed shapes"));
        }
        Ok(Self { dl, ul, env_id })
    }

    pub fn n_sub(&self) -> usize {
        self.dl.len()
    }

    pub fn link(&self, link: Link) -> &[ComplexMatrix] {
        match link {
            Link::Downlink => &self.dl,
            Link::Uplink => &self.ul,
        }
    }

    /// The BS-side view of this pair.
    pub fn uplink(&self) -> UplinkChannels<'_> {
        UplinkChannels(&self.ul)
    }
}

/// Uplink subband channels as seen by the base station.
///
/// The BS decode path accepts only this type, so it cannot reach downlink data.
#[derive(Debug, Clone, Copy)]
pub struct UplinkChannels<'a>(&'a [ComplexMatrix]);

impl<'a> UplinkChannels<'a> {
    pub fn new(ul: &'a [ComplexMatrix]) -> Self {
        Self(ul)
    }

    pub fn subbands(&self) -> &'a [ComplexMatrix] {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_matches_table_values() {
        let cfg = default_config();
        cfg.validate().unwrap();
        assert_eq!((cfg.n_sub, cfg.n_gran), (13, 48));
        assert_eq!((cfg.n_tx, cfg.n_rx), (32, 4));
        assert!(((cfg.f_dl_hz - cfg.f_ul_hz) - 120e6).abs() < 1.0);
        assert_eq!(cfg.bandwidth_hz, 10e6);
        assert_eq!(cfg.total_bits(), 6);
        assert!(cfg.is_fdd());
    }

    #[test]
    fn desk_config_is_valid() {
        let cfg = desk_config();
        cfg.validate().unwrap();
        assert_eq!((cfg.n_tx, cfg.n_rx, cfg.n_sub, cfg.n_gran), (8, 2, 4, 4));
        assert!(cfg.n_tx > cfg.n_rx);
        assert_eq!(cfg.total_bits(), 6);
    }

    #[test]
    fn validate_rejects_bad_dims() {
        let mut cfg = desk_config();
        cfg.n_rx = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = desk_config();
        cfg.n_sub = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kv_roundtrip_uses_field_names() {
        let cfg = default_config();
        let text = cfg.to_kv_string();
        for key in ["n_tx", "n_rx", "n_sub", "n_gran", "f_dl_hz", "f_ul_hz", "bandwidth_hz", "m_bottleneck", "b_bits", "seed"] {
            assert!(text.lines().any(|l| l.starts_with(&format!("{key} ="))), "{key}");
        }
        assert_eq!(SystemConfig::from_kv_str(&text).unwrap(), cfg);
        assert_eq!(cfg.hash64(), SystemConfig::from_kv_str(&text).unwrap().hash64());
        assert_ne!(cfg.hash64(), desk_config().hash64());
    }

    #[test]
    fn subband_centers_are_symmetric() {
        let cfg = default_config();
        let lo = cfg.subband_center_hz(Link::Downlink, 0);
        let hi = cfg.subband_center_hz(Link::Downlink, cfg.n_sub - 1);
        assert!(((lo + hi) / 2.0 - cfg.f_dl_hz).abs() < 1e-3);
        assert!((hi - lo - 12.0 * cfg.subband_spacing_hz()).abs() < 1e-3);
    }

    #[test]
    fn matrix_rejects_non_finite() {
        let data = vec![Complex64::new(1.0, 0.0), Complex64::new(f64::NAN, 0.0)];
        assert!(matches!(
            ComplexMatrix::new(1, 2, data),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
        let data = vec![Complex64::new(f64::INFINITY, 0.0)];
        assert!(ComplexMatrix::new(1, 1, data).is_err());
        assert!(ComplexMatrix::new(2, 2, vec![Complex64::new(0.0, 0.0); 3]).is_err());
    }

    #[test]
    fn pair_rejects_mismatched_links() {
        let h = ComplexMatrix::zeros(2, 3);
        assert!(ChannelPair::new(vec![h.clone()], vec![h.clone(), h.clone()], 0).is_err());
        assert!(ChannelPair::new(vec![h.clone()], vec![ComplexMatrix::zeros(3, 3)], 0).is_err());
        assert!(ChannelPair::new(vec![h.clone()], vec![h], 0).is_ok());
    }
}
