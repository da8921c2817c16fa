//! Channel-pair datasets: generation, binary file plus JSON manifest.
//!
//! See `docs/FORMATS.md` for the byte layout.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{atomic_write, Reader, Writer};
use crate::channel::{generate_pair, EnvironmentSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::types::{ChannelPair, ComplexMatrix, SystemConfig};

const MAGIC: &[u8; 8] = b"IMFDSET\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SystemConfig,
    pub environments: Vec<EnvironmentSpec>,
    pub pairs: Vec<ChannelPair>,
}

/// Sidecar description written next to every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub data_file: String,
    pub config_hash: String,
    pub config: SystemConfig,
    pub n_pairs: usize,
    /// `(env_id, sample count)` in file order.
    pub env_counts: Vec<(i64, usize)>,
    pub environments: Vec<EnvironmentSpec>,
    pub sha256: String,
}

impl Dataset {
    pub fn generate(cfg: &SystemConfig, environments: &[EnvironmentSpec], per_env: usize, exec: Exec) -> Result<Self> {
        Self::generate_users(cfg, environments, 0, per_env, exec)
    }

    /// `per_env` users from every environment, user indices `first..first + per_env`.
    pub fn generate_users(
        cfg: &SystemConfig,
        environments: &[EnvironmentSpec],
        first: u64,
        per_env: usize,
        exec: Exec,
    ) -> Result<Self> {
        cfg.validate()?;
        for env in environments {
            env.validate(cfg)?;
        }
        let total = environments.len() * per_env;
        let pairs = exec.try_map_range(total, |k| generate_pair(&environments[k / per_env], cfg, first + (k % per_env) as u64))?;
        Ok(Self {
            config: cfg.clone(),
            environments: environments.to_vec(),
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = &self.config;
        let mut w = Writer::new(MAGIC);
        w.u32(DATASET_VERSION);
        w.u64(cfg.hash64());
        w.bytes(cfg.to_kv_string().as_bytes());
        w.bytes(serde_json::to_string(&self.environments)?.as_bytes());
        w.u64(self.pairs.len() as u64);
        for p in &self.pairs {
            if p.n_sub() != cfg.n_sub || p.dl[0].shape() != (cfg.n_rx, cfg.n_tx) {
                return Err(Error::dims(
                    format!("{} subbands of {}x{}", cfg.n_sub, cfg.n_rx, cfg.n_tx),
                    format!("{} subbands of {:?}", p.n_sub(), p.dl[0].shape()),
                ));
            }
            w.i64(p.env_id);
            for h in p.dl.iter().chain(&p.ul) {
                h.as_slice().iter().for_each(|&z| w.complex(z));
            }
        }
        Ok(w.buf)
    }

    /// Parses a dataset; with `expect` set, a different config hash is a
    /// [`Error::VersionMismatch`].
    pub fn from_bytes(bytes: &[u8], expect: Option<&SystemConfig>) -> Result<Self> {
        let mut r = Reader::new(bytes, MAGIC, "dataset")?;
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::VersionMismatch(format!(
                "dataset version {version}, expected {DATASET_VERSION}"
            )));
        }
        let hash = r.u64()?;
        if let Some(cfg) = expect.filter(|c| c.hash64() != hash) {
            return Err(Error::VersionMismatch(format!(
                "dataset config hash {hash:016x}, expected {:016x}",
                cfg.hash64()
            )));
        }
        let config = SystemConfig::from_kv_str(r.str()?).map_err(|e| Error::CorruptRecord(e.to_string()))?;
        if config.hash64() != hash {
            return Err(Error::CorruptRecord("embedded config does not match its hash".into()));
        }
        let environments: Vec<EnvironmentSpec> =
            serde_json::from_str(r.str()?).map_err(|e| Error::CorruptRecord(e.to_string()))?;
        let n = r.u64()?;
        let (rows, cols) = (config.n_rx, config.n_tx);
        let record = 8 + 2 * config.n_sub * rows * cols * 16;
        if n.checked_mul(record as u64).is_none_or(|b| b > bytes.len() as u64) {
            return Err(Error::CorruptRecord(format!("{n} records cannot fit in {} bytes", bytes.len())));
        }
        let mut pairs = Vec::with_capacity(n as usize);
        for i in 0..n {
            let env_id = r.i64()?;
            let mut read_link = || {
                (0..config.n_sub)
                    .map(|_| {
                        let data = (0..rows * cols).map(|_| r.complex()).collect::<Result<Vec<_>>>()?;
                        ComplexMatrix::new(rows, cols, data)
                            .map_err(|e| Error::CorruptRecord(format!("record {i}: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()
            };
            let dl = read_link()?;
            let ul = read_link()?;
            pairs.push(ChannelPair::new(dl, ul, env_id)?);
        }
        r.finish()?;
        Ok(Self {
            config,
            environments,
            pairs,
        })
    }

    pub fn manifest(&self, data_file: &str, bytes: &[u8]) -> DatasetManifest {
        let mut env_counts: Vec<(i64, usize)> = Vec::new();
        for p in &self.pairs {
            match env_counts.last_mut() {
                Some((id, n)) if *id == p.env_id => *n += 1,
                _ => env_counts.push((p.env_id, 1)),
            }
        }
        DatasetManifest {
            format: "imfeed-dataset".into(),
            version: DATASET_VERSION,
            data_file: data_file.into(),
            config_hash: format!("{:016x}", self.config.hash64()),
            config: self.config.clone(),
            n_pairs: self.pairs.len(),
            env_counts,
            environments: self.environments.clone(),
            sha256: hex(&Sha256::digest(bytes)),
        }
    }

    /// Writes `path` and `path.json` atomically; returns the manifest path.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("dataset.bin");
        let manifest = self.manifest(name, &bytes);
        let manifest_path = manifest_path(path);
        atomic_write(path, &bytes)?;
        atomic_write(&manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(manifest_path)
    }

    pub fn read(path: impl AsRef<Path>, expect: Option<&SystemConfig>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, expect)
    }
}

pub fn manifest_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::desk_config;

    fn small() -> Dataset {
        let envs: Vec<_> = (0..2).map(|i| EnvironmentSpec::family(i, 3)).collect();
        Dataset::generate(&desk_config(), &envs, 3, Exec::Sequential).unwrap()
    }

    #[test]
    fn generation_layout_and_determinism() {
        let d = small();
        assert_eq!(d.len(), 6);
        assert_eq!(d.pairs.iter().map(|p| p.env_id).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1]);
        let envs = d.environments.clone();
        assert_eq!(Dataset::generate(&d.config, &envs, 3, Exec::Parallel).unwrap(), d);
    }

    #[test]
    fn bytes_roundtrip_and_errors() {
        let d = small();
        let bytes = d.to_bytes().unwrap();
        assert_eq!(Dataset::from_bytes(&bytes, Some(&d.config)).unwrap(), d);
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 5], None),
            Err(Error::CorruptRecord(_))
        ));
        let mut other = d.config.clone();
        other.seed += 1;
        assert!(matches!(Dataset::from_bytes(&bytes, Some(&other)), Err(Error::VersionMismatch(_))));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Dataset::from_bytes(&v2, None), Err(Error::VersionMismatch(_))));
    }

    #[test]
    fn files_and_manifest() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.bin");
        let mp = d.write(&p).unwrap();
        assert_eq!(Dataset::read(&p, None).unwrap(), d);
        let m: DatasetManifest = serde_json::from_slice(&std::fs::read(mp).unwrap()).unwrap();
        assert_eq!(m.n_pairs, 6);
        assert_eq!(m.env_counts, vec![(0, 3), (1, 3)]);
        assert_eq!(m.sha256, hex(&Sha256::digest(std::fs::read(&p).unwrap())));
    }
}
