//! Named tensor store and the `CLDW` weight file.
//!
//! File layout (little-endian, no padding):
//!
//! ```text
//! "CLDW"                magic, 4 bytes
//! u32                   format version (1)
//! u8                    config id
//! u32                   tensor count
//! per tensor:
//!   u16 + bytes         UTF-8 name, e.g. "stage2.0.conv1.weight"
//!   u8                  rank
//!   u32 × rank          dims
//!   f32 × Π dims        data
//! ```
//!
//! Convolution weights are shaped `[out, in, kh, kw]`, affine weights
//! `[out, in]`, biases `[out]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{architecture, param_count, LayerKind, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{AffineMap, Kernel2D};

pub const WEIGHT_MAGIC: [u8; 4] = *b"CLDW";
pub const WEIGHT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
}

/// Expected `(name, shape)` of every tensor for a config, in file order.
pub fn expected_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for layer in architecture(cfg) {
        out.push((format!("{}.weight", layer.name), layer.weight_shape()));
        out.push((format!("{}.bias", layer.name), vec![layer.out_dim()]));
    }
    out
}

impl WeightStore {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::TensorMismatch {
                name: name.to_string(),
                detail: "missing".into(),
            })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .iter_mut()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::TensorMismatch {
                name: name.to_string(),
                detail: "missing".into(),
            })
    }

    /// Convolution `prefix.weight` / `prefix.bias` as a kernel.
    pub fn kernel(&self, prefix: &str) -> Result<Kernel2D> {
        let w = self.get(&format!("{prefix}.weight"))?;
        let b = self.get(&format!("{prefix}.bias"))?;
        match w.shape[..] {
            [o, i, kh, kw] => Kernel2D::new(o, i, kh, kw, w.data.clone(), b.data.clone()),
            _ => Err(Error::TensorMismatch {
                name: w.name.clone(),
                detail: format!("expected a rank-4 kernel, got {:?}", w.shape),
            }),
        }
    }

    pub fn affine(&self, prefix: &str) -> Result<AffineMap> {
        let w = self.get(&format!("{prefix}.weight"))?;
        let b = self.get(&format!("{prefix}.bias"))?;
        match w.shape[..] {
            [o, i] => AffineMap::new(o, i, w.data.clone(), b.data.clone()),
            _ => Err(Error::TensorMismatch {
                name: w.name.clone(),
                detail: format!("expected a rank-2 matrix, got {:?}", w.shape),
            }),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Checks names, shapes and total size against the config's architecture.
    pub fn validate(&self) -> Result<()> {
        let layout = expected_layout(&self.config);
        for t in &self.tensors {
            if self.tensors.iter().filter(|u| u.name == t.name).count() > 1 {
                return Err(Error::TensorMismatch {
                    name: t.name.clone(),
                    detail: "duplicate tensor".into(),
                });
            }
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::TensorMismatch {
                    name: t.name.clone(),
                    detail: format!("{} scalars for shape {:?}", t.data.len(), t.shape),
                });
            }
        }
        for (name, shape) in &layout {
            let t = self.get(name)?;
            if &t.shape != shape {
                return Err(Error::TensorMismatch {
                    name: name.clone(),
                    detail: format!("shape {:?}, expected {:?}", t.shape, shape),
                });
            }
        }
        if let Some(extra) = self.tensors.iter().find(|t| !layout.iter().any(|(n, _)| *n == t.name)) {
            return Err(Error::TensorMismatch {
                name: extra.name.clone(),
                detail: format!("not part of {}", self.config.name),
            });
        }
        let expected = param_count(&self.config).total;
        if self.scalar_count() != expected {
            return Err(Error::TensorMismatch {
                name: "<total>".into(),
                detail: format!("{} scalars, expected {expected}", self.scalar_count()),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.scalar_count() * 4);
        buf.extend_from_slice(&WEIGHT_MAGIC);
        buf.extend_from_slice(&self.version.to_le_bytes());
        buf.push(self.config.id);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            buf.extend_from_slice(t.name.as_bytes());
            buf.push(t.shape.len() as u8);
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    /// Parses a weight file and validates it against its config.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != WEIGHT_MAGIC {
            return Err(Error::BadMagic {
                expected: WEIGHT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32("version")?;
        if version != WEIGHT_VERSION {
            return Err(Error::Version {
                expected: WEIGHT_VERSION,
                found: version,
            });
        }
        let config = ModelConfig::by_id(r.u8("config id")?)?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| Error::Truncated("tensor name is not UTF-8".into()))?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::TensorMismatch {
                name: "<file>".into(),
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let store = WeightStore {
            version,
            config,
            tensors,
        };
        store.validate()?;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Deterministic initialization.
///
/// Weights are uniform in `±sqrt(6 / fan_in)`, biases uniform in
/// `±0.1 / sqrt(fan_in)`. The offset predictor starts at zero so an untrained
/// head samples exactly at the keypoint.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    for layer in architecture(cfg) {
        let fan_in = match layer.kind {
            LayerKind::Conv { in_ch, k, .. } => in_ch * k * k,
            LayerKind::Affine { in_dim, .. } => in_dim,
        };
        // residual branches start as the identity
        let zero = layer.name == "desc.0.offset" || (layer.name.starts_with("stage") && layer.name.ends_with(".conv2"));
        let w_bound = (6.0 / fan_in as f32).sqrt();
        let b_bound = 0.1 / (fan_in as f32).sqrt();
        let shape = layer.weight_shape();
        let n: usize = shape.iter().product();
        let weights = (0..n)
            .map(|_| if zero { 0.0 } else { rng.random_range(-w_bound..w_bound) })
            .collect();
        let bias = (0..layer.out_dim())
            .map(|_| if zero { 0.0 } else { rng.random_range(-b_bound..b_bound) })
            .collect();
        tensors.push(Tensor {
            name: format!("{}.weight", layer.name),
            shape,
            data: weights,
        });
        tensors.push(Tensor {
            name: format!("{}.bias", layer.name),
            shape: vec![layer.out_dim()],
            data: bias,
        });
    }
    WeightStore {
        version: WEIGHT_VERSION,
        config: *cfg,
        tensors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PRESETS;

    #[test]
    fn init_is_deterministic_and_sized() {
        let a48 = ModelConfig::by_name("A48").unwrap();
        let a = init_weights(&a48, 7);
        let b = init_weights(&a48, 7);
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.scalar_count(), 4252);
        assert_ne!(init_weights(&a48, 8).to_bytes(), a.to_bytes());
        for p in PRESETS {
            let s = init_weights(&p, 0);
            s.validate().unwrap();
            assert!(s.get("desc.0.offset.bias").unwrap().data.iter().all(|&v| v == 0.0));
            assert!(s.get("desc.0.offset.weight").unwrap().data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn round_trip_u128() {
        let u = ModelConfig::by_name("U128").unwrap();
        let mut store = init_weights(&u, 3);
        // non-zero offsets so every tensor carries data
        for v in &mut store.get_mut("desc.0.offset.weight").unwrap().data {
            *v = 0.125;
        }
        let bytes = store.to_bytes();
        let back = WeightStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.to_bytes(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u128.cldw");
        store.save(&path).unwrap();
        assert_eq!(WeightStore::load(&path).unwrap(), store);
    }

    #[test]
    fn header_layout() {
        let a48 = ModelConfig::by_name("A48").unwrap();
        let bytes = init_weights(&a48, 0).to_bytes();
        assert_eq!(&bytes[0..4], b"CLDW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 0);
        let count = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        assert_eq!(count, expected_layout(&a48).len());
        let name_len = u16::from_le_bytes(bytes[13..15].try_into().unwrap()) as usize;
        assert_eq!(&bytes[15..15 + name_len], b"stem.0.conv1.weight");
        // total size: header + per-tensor headers + data
        let headers: usize = expected_layout(&a48)
            .iter()
            .map(|(n, s)| 2 + n.len() + 1 + 4 * s.len())
            .sum();
        assert_eq!(bytes.len(), 13 + headers + 4 * 4252);
    }

    #[test]
    fn distinct_load_errors() {
        let a48 = ModelConfig::by_name("A48").unwrap();
        let store = init_weights(&a48, 0);
        let bytes = store.to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(WeightStore::from_bytes(&bad), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(WeightStore::from_bytes(&bad), Err(Error::Version { found: 2, .. })));

        assert!(matches!(
            WeightStore::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));

        let mut missing = store.clone();
        missing.tensors.retain(|t| t.name != "detect.0.conv2.bias");
        assert!(matches!(
            WeightStore::from_bytes(&missing.to_bytes()),
            Err(Error::TensorMismatch { name, .. }) if name == "detect.0.conv2.bias"
        ));

        let mut reshaped = store.clone();
        reshaped.get_mut("stem.0.conv1.weight").unwrap().shape = vec![4, 3, 16];
        assert!(matches!(
            WeightStore::from_bytes(&reshaped.to_bytes()),
            Err(Error::TensorMismatch { .. })
        ));

        let mut wrong_cfg = bytes.clone();
        wrong_cfg[8] = 1;
        assert!(matches!(WeightStore::from_bytes(&wrong_cfg), Err(Error::TensorMismatch { .. })));
    }
}
