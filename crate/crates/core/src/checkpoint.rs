//! Single-file checkpoint archive.
//!
//! Layout: 8-byte magic, little-endian `u64` manifest length, UTF-8 text
//! manifest, then raw little-endian `f32` arrays. Manifest lines:
//!
//! ```text
//! config <json>
//! fingerprint <hex>
//! step <u64>
//! meta <key> <json>
//! tensor <name> <d0,d1,..> <offset> <len>
//! ```
//!
//! Offsets and lengths count `f32` elements from the start of the data
//! section.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::{Pipeline, PipelineConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DCKPT\x00\x01\n";

/// Tensors with this prefix carry optimizer state, not network parameters.
pub const OPTIMIZER_PREFIX: &str = "adam.";

/// Hex SHA-256 of the canonical JSON encoding of `config`.
pub fn fingerprint(config: &PipelineConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: PipelineConfig,
    pub fingerprint: String,
    pub step: u64,
    /// Free-form JSON documents such as optimizer or training settings.
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut manifest = String::new();
        manifest.push_str(&format!("config {}\n", serde_json::to_string(&self.config).expect("config")));
        manifest.push_str(&format!("fingerprint {}\n", self.fingerprint));
        manifest.push_str(&format!("step {}\n", self.step));
        for (k, v) in &self.meta {
            assert!(!k.contains(char::is_whitespace) && !v.contains('\n'));
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor {} {} {} {}\n", t.name, dims.join(","), offset, t.data.len()));
            offset += t.data.len();
        }
        let mut bytes = Vec::with_capacity(16 + manifest.len() + 4 * offset);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        bytes.extend_from_slice(manifest.as_bytes());
        for t in &self.tensors {
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: &str| Error::format(path, reason);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
        let manifest = std::str::from_utf8(&bytes[16..data_start]).map_err(|_| bad("manifest is not UTF-8"))?;
        let data = &bytes[data_start..];
        if data.len() % 4 != 0 {
            return Err(bad("data section is not a whole number of f32 values"));
        }

        let mut config = None;
        let mut fp = None;
        let mut step = None;
        let mut meta = BTreeMap::new();
        let mut tensors = Vec::new();
        for line in manifest.lines() {
            let (key, rest) = line.split_once(' ').ok_or_else(|| bad("malformed manifest line"))?;
            match key {
                "config" => config = Some(serde_json::from_str(rest).map_err(|e| bad(&format!("config: {e}")))?),
                "fingerprint" => fp = Some(rest.to_string()),
                "step" => step = Some(rest.parse().map_err(|_| bad("step is not an integer"))?),
                "meta" => {
                    let (k, v) = rest.split_once(' ').ok_or_else(|| bad("malformed meta line"))?;
                    meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    let [name, dims, offset, len] = parts[..] else {
                        return Err(bad("malformed tensor line"));
                    };
                    let shape = dims
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad("bad tensor shape"))?;
                    let offset: usize = offset.parse().map_err(|_| bad("bad tensor offset"))?;
                    let len: usize = len.parse().map_err(|_| bad("bad tensor length"))?;
                    if shape.iter().product::<usize>() != len {
                        return Err(bad(&format!("tensor {name}: shape does not match length")));
                    }
                    let end = offset.checked_add(len).filter(|&e| 4 * e <= data.len()).ok_or_else(|| bad("tensor data out of bounds"))?;
                    let values = data[4 * offset..4 * end]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    tensors.push(StoredTensor {
                        name: name.to_string(),
                        shape,
                        data: values,
                    });
                }
                _ => return Err(bad(&format!("unknown manifest key {key}"))),
            }
        }
        Ok(Self {
            config: config.ok_or_else(|| bad("missing config"))?,
            fingerprint: fp.ok_or_else(|| bad("missing fingerprint"))?,
            step: step.ok_or_else(|| bad("missing step"))?,
            meta,
            tensors,
        })
    }

    /// Network parameters, in archive order, without optimizer state.
    pub fn parameters(&self) -> impl Iterator<Item = &StoredTensor> {
        self.tensors.iter().filter(|t| !t.name.starts_with(OPTIMIZER_PREFIX))
    }

    pub fn tensor(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

impl<T: Scalar> Pipeline<T> {
    /// Archive of every parameter (spectral-norm vectors included).
    pub fn to_checkpoint(&self, step: u64) -> Checkpoint {
        let tensors = self
            .params()
            .entries()
            .iter()
            .map(|e| StoredTensor {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                data: e.value.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect();
        Checkpoint {
            config: *self.config(),
            fingerprint: fingerprint(self.config()),
            step,
            meta: BTreeMap::new(),
            tensors,
        }
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>, step: u64) -> Result<()> {
        self.to_checkpoint(step).write(path)
    }

    /// Rebuilds the pipeline described by the archive itself.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        let config = ck.config;
        Self::from_checkpoint(&ck, &config)
    }

    /// Restores parameters into a pipeline of configuration `expected`.
    ///
    /// Parameter names and shapes are compared first ([`Error::Integrity`]),
    /// then the recorded fingerprint against `expected`
    /// ([`Error::Fingerprint`]).
    pub fn from_checkpoint(ck: &Checkpoint, expected: &PipelineConfig) -> Result<Self> {
        let mut p = Self::new(*expected, 0)?;
        let stored: BTreeMap<&str, &StoredTensor> = ck.parameters().map(|t| (t.name.as_str(), t)).collect();
        if stored.len() != ck.parameters().count() {
            return Err(Error::Integrity("duplicate parameter names".into()));
        }
        let missing: Vec<&str> = p.params().entries().iter().map(|e| e.name.as_str()).filter(|n| !stored.contains_key(n)).collect();
        if !missing.is_empty() {
            return Err(Error::Integrity(format!("missing parameters: {}", missing.join(", "))));
        }
        let extra: Vec<&str> = stored.keys().copied().filter(|n| p.params().id(n).is_none()).collect();
        if !extra.is_empty() {
            return Err(Error::Integrity(format!("unexpected parameters: {}", extra.join(", "))));
        }
        for e in p.params().entries() {
            let t = stored[e.name.as_str()];
            if t.shape != e.value.shape() {
                return Err(Error::Integrity(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name,
                    t.shape,
                    e.value.shape()
                )));
            }
        }
        let want = fingerprint(expected);
        if ck.fingerprint != want {
            return Err(Error::Fingerprint {
                expected: want,
                found: ck.fingerprint.clone(),
            });
        }
        let ids: Vec<_> = p.params().ids().collect();
        for id in ids {
            let t = stored[p.params().name(id)];
            let values = t.data.iter().map(|&v| T::lit(v as f64)).collect();
            *p.params_mut().get_mut(id) = Tensor::from_vec(&t.shape, values)?;
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::NetworkConfig;

    fn cfg(levels: usize) -> PipelineConfig {
        PipelineConfig {
            network: NetworkConfig {
                base_channels: 4,
                depth_levels: levels,
            },
            use_sa: true,
            use_bc: true,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let p: Pipeline<f32> = Pipeline::new(cfg(2), 5).unwrap();
        p.save_checkpoint(&path, 17).unwrap();
        let ck = Checkpoint::read(&path).unwrap();
        assert_eq!(ck.step, 17);
        assert_eq!(ck, p.to_checkpoint(17));
        let q: Pipeline<f32> = Pipeline::load_checkpoint(&path).unwrap();
        for (a, b) in p.params().entries().iter().zip(q.params().entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn fingerprint_and_integrity_checks() {
        let p: Pipeline<f32> = Pipeline::new(cfg(2), 5).unwrap();
        let mut ck = p.to_checkpoint(0);
        assert!(matches!(
            Pipeline::<f32>::from_checkpoint(&ck, &cfg(3)),
            Err(Error::Integrity(_))
        ));
        ck.fingerprint = "0".repeat(64);
        match Pipeline::<f32>::from_checkpoint(&ck, &cfg(2)) {
            Err(Error::Fingerprint { expected, found }) => {
                assert_eq!(expected, fingerprint(&cfg(2)));
                assert_eq!(found, "0".repeat(64));
            }
            other => panic!("{other:?}"),
        }
        let mut ck = p.to_checkpoint(0);
        ck.tensors.pop();
        assert!(matches!(Pipeline::<f32>::from_checkpoint(&ck, &cfg(2)), Err(Error::Integrity(_))));
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"hello").unwrap();
        assert!(Checkpoint::read(&path).unwrap_err().is_io());
        assert!(Checkpoint::read(dir.path().join("missing")).unwrap_err().is_io());
    }
}
