//! SOP/FLOP bookkeeping and the spike-vs-float energy ratio.
//!
//! One SOP is one event-gated accumulation: a fired spike fanned out to
//! each of its targets. One FLOP is one multiply-accumulate on the float
//! path; nonlinearities are charged from a [`FlopTable`]. Threshold
//! comparisons inside HG/OAT neurons are charged nothing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const E_AC: f64 = 0.9;
pub const E_MAC: f64 = 4.6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteCounts {
    pub sops: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub sops: u64,
    pub flops: u64,
    pub sites: BTreeMap<String, SiteCounts>,
    pub e_ac: f64,
    pub e_mac: f64,
}

impl Default for EnergyLedger {
    fn default() -> Self {
        Self {
            sops: 0,
            flops: 0,
            sites: BTreeMap::new(),
            e_ac: E_AC,
            e_mac: E_MAC,
        }
    }
}

impl EnergyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_sop(&mut self, site: &str, n: u64) {
        self.sops += n;
        self.sites.entry(site.to_string()).or_default().sops += n;
    }

    pub fn record_flop(&mut self, site: &str, n: u64) {
        self.flops += n;
        self.sites.entry(site.to_string()).or_default().flops += n;
    }

    /// Adds every counter of `other` into `self`.
    pub fn merge(&mut self, other: &EnergyLedger) {
        self.sops += other.sops;
        self.flops += other.flops;
        for (site, c) in &other.sites {
            let e = self.sites.entry(site.clone()).or_default();
            e.sops += c.sops;
            e.flops += c.flops;
        }
    }

    /// Total ratio, absent when no FLOPs are recorded.
    pub fn ratio(&self) -> Option<f64> {
        energy_ratio(self).ok()
    }

    /// Ratio restricted to one site, absent when the site has no FLOPs.
    pub fn site_ratio(&self, site: &str) -> Option<f64> {
        let c = self.sites.get(site)?;
        (c.flops > 0).then(|| (c.sops as f64 * self.e_ac) / (c.flops as f64 * self.e_mac))
    }

    /// Per-site counts summed over sites sharing their first `depth`
    /// dot-separated name components (`l0.attn.wq` -> `l0.attn` at depth 2).
    pub fn rollup(&self, depth: usize) -> BTreeMap<String, SiteCounts> {
        let mut out: BTreeMap<String, SiteCounts> = BTreeMap::new();
        for (site, c) in &self.sites {
            let key = site.split('.').take(depth.max(1)).collect::<Vec<_>>().join(".");
            let e = out.entry(key).or_default();
            e.sops += c.sops;
            e.flops += c.flops;
        }
        out
    }

    pub fn is_consistent(&self) -> bool {
        let (s, f) = self
            .sites
            .values()
            .fold((0, 0), |(s, f), c| (s + c.sops, f + c.flops));
        s == self.sops && f == self.flops
    }
}

/// `(SOPs * E_AC) / (FLOPs * E_MAC)`.
pub fn energy_ratio(ledger: &EnergyLedger) -> Result<f64> {
    if ledger.flops == 0 {
        return Err(Error::UndefinedRatio);
    }
    Ok((ledger.sops as f64 * ledger.e_ac) / (ledger.flops as f64 * ledger.e_mac))
}

/// How many SOPs a single multi-level spike is charged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SopCounting {
    /// One SOP per event and target.
    #[default]
    PerEvent,
    /// `ceil(log2(2H))` SOPs per event and target, as if each of the
    /// `2H` levels were sent as a binary code.
    LevelBits,
}

impl SopCounting {
    pub fn sops_per_event(self, levels: usize) -> u64 {
        match self {
            SopCounting::PerEvent => 1,
            SopCounting::LevelBits => {
                let n = (2 * levels.max(1)) as u64;
                (u64::BITS - (n - 1).leading_zeros()).max(1) as u64
            }
        }
    }
}

/// FLOP charge per float-path operation kind.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopTable(pub BTreeMap<String, u64>);

impl Default for FlopTable {
    fn default() -> Self {
        let entries = [
            ("mac", 1),
            ("gelu", 70),
            ("exp", 20),
            ("sqrt", 12),
            // sigmoid via exp plus add, divide and the final multiply
            ("silu", 22),
            ("reciprocal", 1),
            ("square", 1),
        ];
        Self(entries.iter().map(|(k, v)| (k.to_string(), *v)).collect())
    }
}

impl FlopTable {
    pub fn cost(&self, kind: &str) -> Result<u64> {
        self.0.get(kind).copied().ok_or_else(|| Error::UnknownOpKind {
            kind: kind.to_string(),
            known: self.0.keys().cloned().collect(),
        })
    }

    pub fn with_override(mut self, kind: &str, cost: u64) -> Self {
        self.0.insert(kind.to_string(), cost);
        self
    }
}

/// Cost of `kind` in the default table.
pub fn flop_cost(kind: &str) -> Result<u64> {
    FlopTable::default().cost(kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_ledger_has_no_ratio() {
        let l = EnergyLedger::new();
        assert_eq!(l.ratio(), None);
        assert!(matches!(energy_ratio(&l), Err(Error::UndefinedRatio)));
    }

    #[test]
    fn zero_sops_ratio_is_zero() {
        let mut l = EnergyLedger::new();
        l.record_flop("fc", 10);
        assert_eq!(energy_ratio(&l).unwrap(), 0.0);
    }

    #[test]
    fn equal_counts_give_constant_ratio() {
        let mut l = EnergyLedger::new();
        l.record_sop("a", 1000);
        l.record_flop("b", 1000);
        assert_eq!(energy_ratio(&l).unwrap(), 0.9 / 4.6);
        assert!((energy_ratio(&l).unwrap() - 0.19565).abs() < 1e-5);
        assert_eq!(l.site_ratio("a"), None);
    }

    #[test]
    fn breakdown_sums_to_totals() {
        let mut a = EnergyLedger::new();
        a.record_sop("x", 3);
        a.record_flop("x", 5);
        let mut b = EnergyLedger::new();
        b.record_sop("y", 7);
        b.record_sop("x", 1);
        a.merge(&b);
        assert_eq!((a.sops, a.flops), (11, 5));
        assert_eq!(a.sites["x"], SiteCounts { sops: 4, flops: 5 });
        assert!(a.is_consistent());
    }

    #[test]
    fn rollup_groups_by_prefix() {
        let mut l = EnergyLedger::new();
        l.record_sop("l0.attn.wq", 3);
        l.record_sop("l0.attn.softmax.exp", 4);
        l.record_flop("l0.attn", 10);
        l.record_sop("input", 1);
        let r = l.rollup(2);
        assert_eq!(r["l0.attn"], SiteCounts { sops: 7, flops: 10 });
        assert_eq!(r["input"].sops, 1);
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn merge_commutes() {
        let mut a = EnergyLedger::new();
        a.record_sop("p", 2);
        let mut b = EnergyLedger::new();
        b.record_flop("q", 9);
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab, ba);
    }

    #[test]
    fn flop_table_values() {
        assert_eq!(flop_cost("gelu").unwrap(), 70);
        assert_eq!(flop_cost("exp").unwrap(), 20);
        assert_eq!(flop_cost("sqrt").unwrap(), 12);
        assert_eq!(flop_cost("mac").unwrap(), 1);
        match flop_cost("tanh") {
            Err(Error::UnknownOpKind { known, .. }) => assert!(known.contains(&"gelu".to_string())),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(FlopTable::default().with_override("gelu", 8).cost("gelu").unwrap(), 8);
    }

    #[test]
    fn level_bits_charge() {
        assert_eq!(SopCounting::PerEvent.sops_per_event(5), 1);
        assert_eq!(SopCounting::LevelBits.sops_per_event(1), 1);
        assert_eq!(SopCounting::LevelBits.sops_per_event(2), 2);
        assert_eq!(SopCounting::LevelBits.sops_per_event(5), 4);
        assert_eq!(SopCounting::LevelBits.sops_per_event(8), 4);
    }
}
