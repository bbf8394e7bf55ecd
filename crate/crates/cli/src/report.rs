use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use spikeconv::energy::{EnergyLedger, SiteCounts, SopCounting};
use spikeconv::model::{ConvertedBlock, EncoderKind, LayerDeviation, ModelConfig, RunTrace, Seeds};

/// Summary of one fitted HG neuron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDigest {
    pub site: String,
    pub target: String,
    pub subranges: usize,
    pub lo: f64,
    pub hi: f64,
    pub max_abs_err: f64,
    pub error_bound: f64,
}

pub fn digests(block: &ConvertedBlock) -> Vec<CalibrationDigest> {
    block
        .reports
        .iter()
        .map(|(site, r)| CalibrationDigest {
            site: site.clone(),
            target: r.target.clone(),
            subranges: r.fitted.len(),
            lo: r.boundaries[0],
            hi: r.boundaries[r.boundaries.len() - 1],
            max_abs_err: r.max_abs_err(),
            error_bound: r.error_bound().unwrap_or(f64::INFINITY),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergySummary {
    pub sops: u64,
    pub flops: u64,
    pub ratio: Option<f64>,
    /// Counts per block component (`l0.attn`, `l0.ffn`, ...).
    pub components: BTreeMap<String, SiteCounts>,
}

impl EnergySummary {
    pub fn of(ledger: &EnergyLedger) -> Self {
        Self {
            sops: ledger.sops,
            flops: ledger.flops,
            ratio: ledger.ratio(),
            components: ledger.rollup(2),
        }
    }
}

/// Everything `run` measured. Contains no timestamps, so identical flags
/// and seeds give identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub seeds: Seeds,
    pub config: ModelConfig,
    pub steps: usize,
    pub encoder: EncoderKind,
    pub counting: SopCounting,
    /// Number of `seq_len`-row sequences the input was split into.
    pub sequences: usize,
    /// Per-layer deviation from the float block, averaged over sequences.
    pub layers: Vec<LayerDeviation>,
    pub output_rel_err: f64,
    pub output_max_abs_err: f64,
    pub energy: EnergySummary,
    pub ledger: EnergyLedger,
    pub clamps: BTreeMap<String, u64>,
    pub calibration: Vec<CalibrationDigest>,
}

/// Combines the traces of several sequences run with the same options.
pub struct Aggregate {
    pub sequences: usize,
    pub layers: Vec<LayerDeviation>,
    pub output_rel_err: f64,
    pub output_max_abs_err: f64,
    pub ledger: EnergyLedger,
    pub clamps: BTreeMap<String, u64>,
}

impl Aggregate {
    pub fn of(traces: &[RunTrace]) -> Self {
        let n = traces.len().max(1) as f64;
        let mut ledger = EnergyLedger::new();
        let mut clamps = BTreeMap::new();
        let mut layers: Vec<LayerDeviation> = Vec::new();
        let (mut err, mut max_abs) = (0.0, 0.0f64);
        for t in traces {
            ledger.merge(&t.ledger);
            for (site, c) in &t.clamps {
                *clamps.entry(site.clone()).or_insert(0) += c;
            }
            err += t.output_rel_err;
            max_abs = max_abs.max(t.output_max_abs_err);
            for d in &t.layers {
                match layers.iter_mut().find(|l| l.layer == d.layer) {
                    Some(l) => {
                        l.rel_err += d.rel_err / n;
                        l.max_abs_err = l.max_abs_err.max(d.max_abs_err);
                    }
                    None => layers.push(LayerDeviation { rel_err: d.rel_err / n, ..*d }),
                }
            }
        }
        Self {
            sequences: traces.len(),
            layers,
            output_rel_err: err / n,
            output_max_abs_err: max_abs,
            ledger,
            clamps,
        }
    }
}
