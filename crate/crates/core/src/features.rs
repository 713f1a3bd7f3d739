//! CLDF feature files and the plain-text match list.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic    "CLDF"
//! version  u32 = 1
//! width    u32
//! height   u32
//! name_len u16, name: name_len bytes of UTF-8 (model preset)
//! count    u32
//! dim      u32
//! count × (x f32, y f32, score f32, descriptor dim × f32)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::detect::KeypointSet;
use crate::error::{Error, Result};
use crate::matcher::MatchSet;
use crate::pipeline::Features;
use crate::tensor::Matrix;

pub const FEATURE_MAGIC: [u8; 4] = *b"CLDF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub config_name: String,
    pub features: Features,
}

impl FeatureFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let f = &self.features;
        let (n, dim) = (f.keypoints.len(), f.descriptors.cols);
        let name = self.config_name.as_bytes();
        let mut out = Vec::with_capacity(26 + name.len() + n * (3 + dim) * 4);
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(f.width as u32).to_le_bytes());
        out.extend_from_slice(&(f.height as u32).to_le_bytes());
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        for k in 0..n {
            let [x, y] = f.keypoints.coords[k];
            for v in [x, y, f.keypoints.scores[k]].iter().chain(f.descriptors.row(k)) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != FEATURE_MAGIC {
            return Err(Error::BadMagic {
                expected: FEATURE_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(Error::Version {
                expected: FEATURE_VERSION,
                found: version,
            });
        }
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let config_name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Truncated("preset name is not UTF-8".into()))?;
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let record = (3 + dim) * 4;
        if bytes.len() - r.pos != n * record {
            return Err(Error::Truncated(format!(
                "{n} records of {record} bytes need {} bytes, found {}",
                n * record,
                bytes.len() - r.pos
            )));
        }
        let mut keypoints = KeypointSet::default();
        let mut desc = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let x = r.f32()?;
            let y = r.f32()?;
            keypoints.coords.push([x, y]);
            keypoints.scores.push(r.f32()?);
            for _ in 0..dim {
                desc.push(r.f32()?);
            }
        }
        Ok(Self {
            config_name,
            features: Features {
                width,
                height,
                keypoints,
                descriptors: Matrix::from_vec(n, dim, desc)?,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Truncated(format!("need {n} bytes at offset {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// One `idx_a idx_b confidence` line per match.
pub fn format_matches(matches: &MatchSet) -> String {
    let mut out = String::new();
    for m in &matches.pairs {
        writeln!(out, "{} {} {:.6}", m.a, m.b, m.confidence).expect("string write");
    }
    out
}
