//! Named parameter tensors and their binary file format.
//!
//! Layout: magic `LASW`, u32 version, u32 tensor count, then per tensor a
//! u32 name length, the UTF-8 name, u32 rows, u32 cols and `rows * cols`
//! little-endian f64 values in row-major order. Tensors are written in name
//! order, so equal sets produce equal files.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{FfnKind, ModelConfig};
use crate::error::{Error, Result};
use crate::tensors::Matrix;

pub const MAGIC: &[u8; 4] = b"LASW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightSet {
    tensors: BTreeMap<String, Matrix>,
}

/// Name of a per-layer tensor.
pub fn layer_key(layer: usize, name: &str) -> String {
    format!("l{layer}.{name}")
}

/// Per-layer tensor names and shapes implied by `cfg`.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut out = Vec::new();
    for l in 0..cfg.n_layers {
        let mut push = |name: &str, shape| out.push((layer_key(l, name), shape));
        for ln in ["ln1", "ln2"] {
            push(&format!("{ln}.gamma"), (1, d));
            push(&format!("{ln}.beta"), (1, d));
        }
        for p in ["q", "k", "v", "o"] {
            push(&format!("attn.w{p}"), (d, d));
            push(&format!("attn.b{p}"), (1, d));
        }
        match cfg.ffn_kind {
            FfnKind::Standard => {
                push("ffn.w1", (d, f));
                push("ffn.b1", (1, f));
                push("ffn.w2", (f, d));
                push("ffn.b2", (1, d));
            }
            FfnKind::Gated => {
                push("ffn.wg", (d, f));
                push("ffn.bg", (1, f));
                push("ffn.wu", (d, f));
                push("ffn.bu", (1, f));
                push("ffn.wd", (f, d));
                push("ffn.bd", (1, d));
            }
        }
    }
    out
}

impl WeightSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scaled normal initialisation: weights `N(0, 1/fan_in)`, biases
    /// `N(0, 0.02^2)`, LayerNorm gains `1 + N(0, 0.1^2)`, shifts
    /// `N(0, 0.02^2)`.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::new();
        for (name, (r, c)) in expected_shapes(cfg) {
            let leaf = name.rsplit('.').next().unwrap_or_default();
            let (mean, std) = if leaf == "gamma" {
                (1.0, 0.1)
            } else if r == 1 {
                (0.0, 0.02)
            } else {
                (0.0, 1.0 / (r as f64).sqrt())
            };
            let dist = Normal::new(mean, std).expect("positive std");
            w.insert(&name, Matrix::from_fn(r, c, |_, _| dist.sample(&mut rng)));
        }
        Ok(w)
    }

    /// All-zero projections and biases with unit LayerNorm gains.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut w = Self::new();
        for (name, (r, c)) in expected_shapes(cfg) {
            let v = if name.ends_with("gamma") { 1.0 } else { 0.0 };
            w.insert(&name, Matrix::filled(r, c, v));
        }
        w
    }

    pub fn insert(&mut self, name: &str, m: Matrix) {
        self.tensors.insert(name.to_string(), m);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("missing weight `{name}`")))
    }

    pub fn layer(&self, layer: usize, name: &str) -> Result<&Matrix> {
        self.get(&layer_key(layer, name))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Checks presence, shapes and finiteness against `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for (name, shape) in expected_shapes(cfg) {
            let m = self.get(&name)?;
            if m.shape() != shape {
                return Err(Error::shape(
                    "weights",
                    format!("`{name}` is {:?}, expected {shape:?}", m.shape()),
                ));
            }
            if !m.is_finite() {
                return Err(Error::NonFinite(format!("weight `{name}`")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format {
                expected: "magic LASW".into(),
                found: format!("{magic:?}"),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                expected: format!("version {VERSION}"),
                found: format!("version {version}"),
            });
        }
        let count = r.u32()?;
        let mut w = Self::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format {
                    expected: "UTF-8 tensor name".into(),
                    found: "invalid bytes".into(),
                })?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let payload = r.take(rows * cols * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            w.insert(&name, Matrix::new(rows, cols, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                expected: format!("{} bytes", r.pos),
                found: format!("{} bytes", bytes.len()),
            });
        }
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                expected: format!("{n} more bytes at offset {}", self.pos),
                found: format!("{} bytes left (truncated file)", self.bytes.len() - self.pos),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            seq_len: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn random_weights_match_config() {
        let cfg = small();
        let w = WeightSet::random(&cfg, 1).unwrap();
        w.validate(&cfg).unwrap();
        assert_eq!(w, WeightSet::random(&cfg, 1).unwrap());
        assert_ne!(w, WeightSet::random(&cfg, 2).unwrap());
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let w = WeightSet::random(&small(), 3).unwrap();
        let bytes = w.to_bytes();
        let back = WeightSet::from_bytes(&bytes).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn file_size_is_header_plus_payload() {
        let mut w = WeightSet::new();
        w.insert("a", Matrix::zeros(2, 3));
        w.insert("bb", Matrix::zeros(1, 1));
        let expected = 12 + (4 + 1 + 8 + 8 * 6) + (4 + 2 + 8 + 8);
        assert_eq!(w.to_bytes().len(), expected);
    }

    #[test]
    fn truncated_and_foreign_files_fail() {
        let bytes = WeightSet::random(&small(), 3).unwrap().to_bytes();
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(WeightSet::from_bytes(&bytes[..cut]), Err(Error::Format { .. })));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(WeightSet::from_bytes(&bad), Err(Error::Format { .. })));
        let mut bad = bytes;
        bad[4] = 9;
        match WeightSet::from_bytes(&bad) {
            Err(Error::Format { expected, found }) => {
                assert_eq!(expected, "version 1");
                assert_eq!(found, "version 9");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_catches_shape_errors() {
        let cfg = small();
        let mut w = WeightSet::random(&cfg, 1).unwrap();
        w.insert("l0.attn.wq", Matrix::zeros(3, 3));
        assert!(w.validate(&cfg).is_err());
    }
}
