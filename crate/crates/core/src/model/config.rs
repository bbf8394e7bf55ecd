use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calibration::{HierarchyRule, DEFAULT_NORMAL_QUANTILE, DEFAULT_SAMPLES};
use crate::error::{Error, Result};
use crate::tensors::Matrix;

pub const MAX_LAYERS: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    #[default]
    Standard,
    Gated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub weights: u64,
    pub calibration: u64,
    pub fit: u64,
    pub input: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            weights: 1,
            calibration: 2,
            fit: 3,
            input: 4,
        }
    }
}

impl Seeds {
    /// Every seed replaced by `base + offset`, as done for `LAS_SEED`.
    pub fn from_base(base: u64) -> Self {
        Self {
            weights: base,
            calibration: base.wrapping_add(1),
            fit: base.wrapping_add(2),
            input: base.wrapping_add(3),
        }
    }
}

/// Synthetic activation distribution used for calibration and test inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ActivationDistribution {
    Normal { std: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Normal bulk with a fraction of entries replaced by `+-scale * std`.
    OutlierMix {
        std: f64,
        outlier_fraction: f64,
        outlier_scale: f64,
    },
}

impl Default for ActivationDistribution {
    fn default() -> Self {
        ActivationDistribution::OutlierMix {
            std: 1.0,
            outlier_fraction: 0.01,
            outlier_scale: 8.0,
        }
    }
}

impl ActivationDistribution {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ActivationDistribution::Normal { std } => std.is_finite() && std > 0.0,
            ActivationDistribution::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            ActivationDistribution::OutlierMix {
                std,
                outlier_fraction,
                outlier_scale,
            } => {
                std.is_finite()
                    && std > 0.0
                    && (0.0..=1.0).contains(&outlier_fraction)
                    && outlier_scale.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid distribution {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let mut draw = || match *self {
            ActivationDistribution::Normal { std } => Normal::new(0.0, std).expect("validated").sample(rng),
            ActivationDistribution::Uniform { lo, hi } => rng.random_range(lo..hi),
            ActivationDistribution::OutlierMix {
                std,
                outlier_fraction,
                outlier_scale,
            } => {
                if rng.random::<f64>() < outlier_fraction {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    sign * outlier_scale * std
                } else {
                    Normal::new(0.0, std).expect("validated").sample(rng)
                }
            }
        };
        Matrix::from_fn(rows, cols, |_, _| draw())
    }
}

/// Description of a toy pre-LN transformer block (or a stack of up to
/// [`MAX_LAYERS`] of them) and of its conversion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub ffn_kind: FfnKind,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "N_per_nonlinearity")]
    pub n_per_nonlinearity: usize,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub calibration: ActivationDistribution,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default)]
    pub causal: bool,
    #[serde(default = "default_quantile")]
    pub normal_quantile: f64,
    #[serde(default = "default_samples")]
    pub samples_per_range: usize,
    #[serde(default)]
    pub hierarchy_rule: HierarchyRule,
    /// Fraction of the observed span added on both sides of every HG range.
    #[serde(default = "default_margin")]
    pub range_margin: f64,
    #[serde(default = "default_sequences")]
    pub calibration_sequences: usize,
}

fn default_layers() -> usize {
    1
}
fn default_quantile() -> f64 {
    DEFAULT_NORMAL_QUANTILE
}
fn default_samples() -> usize {
    DEFAULT_SAMPLES
}
fn default_margin() -> f64 {
    0.1
}
fn default_sequences() -> usize {
    32
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            d_ff: 128,
            seq_len: 8,
            ffn_kind: FfnKind::Standard,
            t: 16,
            h: 5,
            n_per_nonlinearity: 128,
            seeds: Seeds::default(),
            calibration: ActivationDistribution::default(),
            n_layers: 1,
            causal: false,
            normal_quantile: DEFAULT_NORMAL_QUANTILE,
            samples_per_range: DEFAULT_SAMPLES,
            hierarchy_rule: HierarchyRule::Curvature,
            range_margin: default_margin(),
            calibration_sequences: default_sequences(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("seq_len", self.seq_len),
            ("T", self.t),
            ("H", self.h),
            ("N_per_nonlinearity", self.n_per_nonlinearity),
            ("n_layers", self.n_layers),
            ("calibration_sequences", self.calibration_sequences),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers > MAX_LAYERS {
            return Err(Error::InvalidConfig(format!(
                "n_layers {} exceeds {MAX_LAYERS}",
                self.n_layers
            )));
        }
        if !(self.normal_quantile > 0.0 && self.normal_quantile < 1.0) {
            return Err(Error::InvalidConfig("normal_quantile must lie in (0, 1)".into()));
        }
        if !(self.range_margin >= 0.0 && self.range_margin.is_finite()) {
            return Err(Error::InvalidConfig("range_margin must be >= 0".into()));
        }
        self.calibration.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: ModelConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_is_valid_toy() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!((c.d_model, c.n_heads, c.d_ff, c.seq_len, c.t, c.h), (32, 4, 128, 8, 16, 5));
    }

    #[test]
    fn json_uses_verbatim_names() {
        let s = ModelConfig::default().to_json().unwrap();
        for key in ["\"T\"", "\"H\"", "\"N_per_nonlinearity\"", "\"ffn_kind\"", "\"seeds\""] {
            assert!(s.contains(key), "{key}");
        }
        assert_eq!(ModelConfig::from_json(&s).unwrap(), ModelConfig::default());
    }

    #[test]
    fn minimal_json_fills_defaults() {
        let c = ModelConfig::from_json(
            r#"{"d_model": 8, "n_heads": 2, "d_ff": 16, "seq_len": 4, "T": 8, "H": 3, "N_per_nonlinearity": 4}"#,
        )
        .unwrap();
        assert_eq!(c.n_layers, 1);
        assert_eq!(c.ffn_kind, FfnKind::Standard);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = ModelConfig { n_heads: 5, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        c.n_heads = 4;
        c.n_layers = 5;
        assert!(c.validate().is_err());
        c.n_layers = 1;
        c.t = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn outlier_mix_injects_outliers() {
        let d = ActivationDistribution::OutlierMix { std: 1.0, outlier_fraction: 0.05, outlier_scale: 20.0 };
        let m = d.sample(&mut ChaCha8Rng::seed_from_u64(1), 40, 50);
        let n = m.data().iter().filter(|v| v.abs() == 20.0).count();
        assert!((50..150).contains(&n), "{n}");
    }
}
