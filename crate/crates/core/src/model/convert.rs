//! Calibration-driven conversion of a float block into its spike form.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{FfnKind, ModelConfig};
use super::float::float_forward_traced;
use super::weights::WeightSet;
use crate::calibration::{
    fit_hg_curvature, fit_hg_on, hierarchy_quantiles, oat_thresholds_from_sample, select_hierarchy,
    CalibrationReport, FitSettings, HierarchyRule, Target,
};
use crate::energy::FlopTable;
use crate::error::{Error, Result};
use crate::neurons::{HGConfig, OATConfig};
use crate::tensors::{stats_of, Matrix};

pub const BLOCK_JSON: &str = "block.json";
pub const BLOCK_WEIGHTS: &str = "block.lasw";

/// Sites in front of a linear or product input, each OAT-encoded.
pub fn oat_sites(cfg: &ModelConfig) -> Vec<String> {
    let mut sites = vec!["input".to_string()];
    for l in 0..cfg.n_layers {
        let mut names = vec![
            "ln1.center",
            "attn.in",
            "attn.q",
            "attn.k",
            "attn.v",
            "attn.out",
            "ln2.center",
            "ffn.in",
        ];
        if cfg.ffn_kind == FfnKind::Gated {
            names.extend(["ffn.up", "ffn.inner"]);
        }
        sites.extend(names.iter().map(|n| format!("l{l}.{n}")));
    }
    sites
}

/// HG neuron sites: site name, target and the float-trace site whose
/// values define its input range.
pub fn hg_sites(cfg: &ModelConfig) -> Vec<(String, Target, String)> {
    let act = match cfg.ffn_kind {
        FfnKind::Standard => Target::Gelu,
        FfnKind::Gated => Target::Silu,
    };
    let mut sites = Vec::new();
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("l{l}.{s}");
        sites.push((p("attn.exp"), Target::Exp, p("attn.exp")));
        sites.push((p("attn.reciprocal"), Target::Reciprocal, p("attn.reciprocal")));
        for ln in ["ln1", "ln2"] {
            sites.push((p(&format!("{ln}.square")), Target::Square, p(&format!("{ln}.center"))));
            sites.push((p(&format!("{ln}.invsqrt")), Target::InvSqrt, p(&format!("{ln}.invsqrt"))));
        }
        sites.push((p("ffn.act"), act, p("ffn.act")));
    }
    sites
}

/// Observed range widened by `margin * span` on both sides. Positive-only
/// targets keep their lower end above zero, and exp ranges never end below
/// zero since shifted logits peak there.
pub fn hg_range(target: Target, values: &[f64], margin: f64) -> Result<(f64, f64)> {
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if !(min.is_finite() && max.is_finite()) {
        return Err(Error::EmptyInput("HG calibration sample"));
    }
    let span = if max > min { max - min } else { max.abs().max(1.0) };
    let (mut lo, mut hi) = (min - margin * span, max + margin * span);
    match target {
        Target::Reciprocal => {
            if min <= 0.0 {
                return Err(Error::Fit { target: "reciprocal".into(), x: min });
            }
            lo = lo.max(min / 2.0);
        }
        Target::InvSqrt => lo = lo.max(min / 2.0),
        Target::Exp => hi = hi.max(margin * span),
        _ => {}
    }
    Ok((lo, hi))
}

/// Calibration input: `calibration_sequences` sequences from the
/// configured distribution, stacked row-wise.
pub fn calibration_sample(cfg: &ModelConfig) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.calibration);
    cfg.calibration
        .sample(&mut rng, cfg.calibration_sequences * cfg.seq_len, cfg.d_model)
}

/// A converted block: the float weights plus every fitted encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvertedBlock {
    pub config: ModelConfig,
    /// Stored next to the JSON in the binary weight format.
    #[serde(skip)]
    pub weights: WeightSet,
    pub oat: BTreeMap<String, OATConfig>,
    pub reports: BTreeMap<String, CalibrationReport>,
}

impl ConvertedBlock {
    pub fn oat(&self, site: &str) -> Result<&OATConfig> {
        self.oat
            .get(site)
            .ok_or_else(|| Error::InvalidConfig(format!("no OAT encoder for site `{site}`")))
    }

    pub fn hg(&self, site: &str) -> Result<&HGConfig> {
        self.report(site).map(|r| &r.fitted)
    }

    pub fn report(&self, site: &str) -> Result<&CalibrationReport> {
        self.reports
            .get(site)
            .ok_or_else(|| Error::InvalidConfig(format!("no HG neuron for site `{site}`")))
    }

    /// Sites the configuration requires but the block lacks.
    pub fn missing_sites(&self) -> Vec<String> {
        let oat = oat_sites(&self.config).into_iter().filter(|s| !self.oat.contains_key(s));
        let hg = hg_sites(&self.config)
            .into_iter()
            .map(|(s, _, _)| s)
            .filter(|s| !self.reports.contains_key(s));
        oat.chain(hg).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.weights.validate(&self.config)?;
        let missing = self.missing_sites();
        if !missing.is_empty() {
            return Err(Error::InvalidConfig(format!("converted block lacks sites {missing:?}")));
        }
        for c in self.oat.values() {
            c.validate()?;
        }
        for r in self.reports.values() {
            r.fitted.validate()?;
        }
        Ok(())
    }

    /// Same block with every OAT encoder using `levels` levels per step.
    pub fn with_levels(&self, levels: usize) -> ConvertedBlock {
        let mut b = self.clone();
        b.config.h = levels;
        for c in b.oat.values_mut() {
            *c = c.with_levels(levels);
        }
        b
    }

    /// Writes `block.json` and `block.lasw` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(BLOCK_JSON), serde_json::to_string_pretty(self)? + "\n")?;
        self.weights.save(&dir.join(BLOCK_WEIGHTS))
    }

    pub fn load(dir: &Path) -> Result<ConvertedBlock> {
        let mut b: ConvertedBlock = serde_json::from_str(&std::fs::read_to_string(dir.join(BLOCK_JSON))?)?;
        b.weights = WeightSet::load(&dir.join(BLOCK_WEIGHTS))?;
        b.validate()?;
        Ok(b)
    }
}

fn fit_site(
    cfg: &ModelConfig,
    site: &str,
    target: Target,
    values: &[f64],
    seed: u64,
) -> Result<CalibrationReport> {
    let (lo, hi) = hg_range(target, values, cfg.range_margin)?;
    let settings = FitSettings {
        subranges: cfg.n_per_nonlinearity,
        steps: cfg.t,
        samples: cfg.samples_per_range,
        seed,
    };
    let report = match cfg.hierarchy_rule {
        HierarchyRule::Curvature => fit_hg_curvature(target, lo, hi, &settings),
        HierarchyRule::EqualMass => {
            let stats = stats_of(values, &hierarchy_quantiles(cfg.n_per_nonlinearity))?;
            let mut b = select_hierarchy(&stats, cfg.n_per_nonlinearity)?;
            // Equal-mass boundaries follow the sample; the outer ones still
            // take the margin so the range matches the curvature rule.
            let last = b.len() - 1;
            b[0] = b[0].min(lo);
            b[last] = b[last].max(hi);
            fit_hg_on(target, b, &settings)
        }
    };
    report.map_err(|e| match e {
        Error::Fit { target, x } => Error::Fit { target: format!("{site} ({target})"), x },
        other => other,
    })
}

/// Runs the float block over `calib` (split into sequences of `seq_len`
/// rows), picks OAT thresholds per encoder site and fits an HG neuron per
/// nonlinearity.
pub fn convert(cfg: &ModelConfig, weights: &WeightSet, calib: &Matrix) -> Result<ConvertedBlock> {
    cfg.validate()?;
    weights.validate(cfg)?;
    if calib.rows() == 0 {
        return Err(Error::EmptyInput("calibration sample"));
    }
    let table = FlopTable::default();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut start = 0;
    while start < calib.rows() {
        let n = cfg.seq_len.min(calib.rows() - start);
        let (_, trace) = float_forward_traced(cfg, weights, &calib.row_slice(start, n)?, &table)?;
        for (site, v) in trace.sites {
            values.entry(site).or_default().extend(v);
        }
        start += n;
    }
    let sample = |site: &str| {
        values
            .get(site)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidConfig(format!("float trace lacks site `{site}`")))
    };

    let mut oat = BTreeMap::new();
    for site in oat_sites(cfg) {
        let th = oat_thresholds_from_sample(sample(&site)?, cfg.normal_quantile)?;
        oat.insert(site, th.to_config(cfg.h, cfg.t));
    }

    let jobs = hg_sites(cfg)
        .into_iter()
        .enumerate()
        .map(|(i, (site, target, source))| Ok((i, site, target, sample(&source)?)))
        .collect::<Result<Vec<_>>>()?;
    let reports = jobs
        .into_par_iter()
        .map(|(i, site, target, v)| {
            let r = fit_site(cfg, &site, target, v, cfg.seeds.fit.wrapping_add(i as u64))?;
            info!("{site}: {} on [{:.4}, {:.4}], max err {:.3e}", r.target, r.boundaries[0], r.boundaries[r.boundaries.len() - 1], r.max_abs_err());
            Ok((site, r))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;

    let block = ConvertedBlock {
        config: cfg.clone(),
        weights: weights.clone(),
        oat,
        reports,
    };
    block.validate()?;
    Ok(block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ActivationDistribution;

    fn small() -> ModelConfig {
        ModelConfig {
            n_per_nonlinearity: 16,
            samples_per_range: 256,
            calibration_sequences: 8,
            ..ModelConfig::default()
        }
    }

    fn converted(cfg: &ModelConfig) -> ConvertedBlock {
        let w = WeightSet::random(cfg, cfg.seeds.weights).unwrap();
        convert(cfg, &w, &calibration_sample(cfg)).unwrap()
    }

    #[test]
    fn every_site_is_converted() {
        for kind in [FfnKind::Standard, FfnKind::Gated] {
            let cfg = ModelConfig { ffn_kind: kind, n_layers: 2, ..small() };
            let b = converted(&cfg);
            assert!(b.missing_sites().is_empty());
            assert_eq!(b.oat.len(), oat_sites(&cfg).len());
            assert_eq!(b.reports.len(), 14);
            assert_eq!(b.hg("l1.ffn.act").unwrap().len(), 16);
            let want = if kind == FfnKind::Gated { "silu" } else { "gelu" };
            assert_eq!(b.report("l0.ffn.act").unwrap().target, want);
        }
    }

    #[test]
    fn outlier_input_separates_thresholds() {
        let cfg = ModelConfig {
            calibration: ActivationDistribution::OutlierMix {
                std: 1.0,
                outlier_fraction: 0.005,
                outlier_scale: 20.0,
            },
            ..small()
        };
        let o = converted(&cfg).oat["input"];
        assert!(o.theta_out / o.theta_nor > 5.0, "{o:?}");
        assert_eq!((o.levels, o.steps), (cfg.h, cfg.t));
    }

    #[test]
    fn conversion_is_deterministic() {
        let cfg = small();
        assert_eq!(converted(&cfg), converted(&cfg));
    }

    #[test]
    fn ranges_respect_domains() {
        let (lo, hi) = hg_range(Target::Exp, &[-3.0, -1.0, 0.0], 0.1).unwrap();
        assert!(lo < -3.0 && hi > 0.0);
        let (lo, _) = hg_range(Target::Reciprocal, &[1.0, 4.0], 0.5).unwrap();
        assert_eq!(lo, 0.5);
        let (lo, _) = hg_range(Target::InvSqrt, &[0.0, 2.0], 0.1).unwrap();
        assert_eq!(lo, 0.0);
        assert!(hg_range(Target::Reciprocal, &[0.0, 1.0], 0.1).is_err());
        assert!(hg_range(Target::Gelu, &[], 0.1).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let b = converted(&small());
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let first = std::fs::read(dir.path().join(BLOCK_JSON)).unwrap();
        let loaded = ConvertedBlock::load(dir.path()).unwrap();
        assert_eq!(loaded, b);
        loaded.save(dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join(BLOCK_JSON)).unwrap(), first);
    }

    #[test]
    fn equal_mass_rule_covers_margin() {
        let cfg = ModelConfig { hierarchy_rule: HierarchyRule::EqualMass, ..small() };
        let b = converted(&cfg);
        let r = b.report("l0.ffn.act").unwrap();
        assert_eq!(r.boundaries.len(), 17);
        assert!(b.missing_sites().is_empty());
    }

    #[test]
    fn with_levels_touches_only_oat() {
        let b = converted(&small());
        let b3 = b.with_levels(3);
        assert!(b3.oat.values().all(|c| c.levels == 3));
        assert_eq!(b3.reports, b.reports);
    }
}
