use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use spikeconv::calibration::{fit_hg_curvature, fit_hg_on, FitSettings, HierarchyRule, Target};
use spikeconv::energy::{FlopTable, SopCounting};
use spikeconv::model::{
    calibration_sample, convert, spike_forward, ActivationDistribution, ConvertedBlock, EncoderKind, FfnKind,
    ModelConfig, RunOptions, RunTrace, Seeds, WeightSet,
};
use spikeconv::Matrix;

use crate::failure::{CliResult, Failure};
use crate::io::{read_json, read_matrix, write_json, write_matrix};
use crate::report::{digests, Aggregate, EnergySummary, RunReport};

pub const SEED_VAR: &str = "LAS_SEED";

/// Base seed from `LAS_SEED`, if set.
pub fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::input(format!("{SEED_VAR}={v} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn seeds_with_env(seeds: Seeds) -> CliResult<Seeds> {
    Ok(env_seed()?.map(Seeds::from_base).unwrap_or(seeds))
}

pub fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = a.trim().parse().map_err(|e| format!("bad LO: {e}"))?;
    let hi: f64 = b.trim().parse().map_err(|e| format!("bad HI: {e}"))?;
    if !(lo < hi) {
        return Err(format!("empty range {lo},{hi}"));
    }
    Ok((lo, hi))
}

pub struct CalibrateArgs {
    pub target: String,
    pub range: (f64, f64),
    pub subranges: usize,
    pub steps: usize,
    pub samples: usize,
    pub seed: Option<u64>,
    pub rule: HierarchyRule,
    pub out: PathBuf,
}

pub fn calibrate(a: CalibrateArgs) -> CliResult<()> {
    let target: Target = a.target.parse()?;
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let settings = FitSettings { subranges: a.subranges, steps: a.steps, samples: a.samples, seed };
    let (lo, hi) = a.range;
    let report = match a.rule {
        HierarchyRule::Curvature => fit_hg_curvature(target, lo, hi, &settings)?,
        HierarchyRule::EqualMass => {
            // Without a sample the equal-mass rule over a range is uniform.
            let n = a.subranges.max(1);
            let b = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
            fit_hg_on(target, b, &settings)?
        }
    };
    write_json(&a.out, &report)?;
    println!(
        "{target} on [{lo}, {hi}]: max abs err {:.3e}, bound {:.3e}",
        report.max_abs_err(),
        report.error_bound()?
    );
    Ok(())
}

pub struct InitArgs {
    pub config: PathBuf,
    pub weights: PathBuf,
    pub input: Option<PathBuf>,
    pub ffn: FfnKind,
    pub layers: usize,
    pub causal: bool,
}

pub fn init(a: InitArgs) -> CliResult<()> {
    let cfg = ModelConfig {
        ffn_kind: a.ffn,
        n_layers: a.layers,
        causal: a.causal,
        seeds: seeds_with_env(Seeds::default())?,
        ..ModelConfig::default()
    };
    cfg.validate()?;
    cfg.save(&a.config).map_err(Failure::at(&a.config))?;
    let w = WeightSet::random(&cfg, cfg.seeds.weights)?;
    w.save(&a.weights).map_err(Failure::at(&a.weights))?;
    if let Some(path) = &a.input {
        write_matrix(path, &default_input(&cfg, 4))?;
    }
    println!("wrote {} and {}", a.config.display(), a.weights.display());
    Ok(())
}

/// `sequences` sequences drawn from the calibration distribution with the
/// input seed.
fn default_input(cfg: &ModelConfig, sequences: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.input);
    cfg.calibration.sample(&mut rng, sequences * cfg.seq_len, cfg.d_model)
}

pub struct ConvertArgs {
    pub config: PathBuf,
    pub weights: PathBuf,
    pub calib_dist: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn convert_cmd(a: ConvertArgs) -> CliResult<()> {
    let mut cfg = ModelConfig::load(&a.config).map_err(Failure::at(&a.config))?;
    cfg.seeds = seeds_with_env(cfg.seeds)?;
    if let Some(path) = &a.calib_dist {
        let dist: ActivationDistribution = read_json(path)?;
        dist.validate().map_err(Failure::at(path))?;
        cfg.calibration = dist;
    }
    let w = WeightSet::load(&a.weights).map_err(Failure::at(&a.weights))?;
    w.validate(&cfg).map_err(Failure::at(&a.weights))?;
    let block = convert(&cfg, &w, &calibration_sample(&cfg))?;
    block.save(&a.out).map_err(Failure::at(&a.out))?;
    for d in digests(&block) {
        info!("{}: {} max err {:.2e}", d.site, d.target, d.max_abs_err);
    }
    println!(
        "converted {} OAT sites and {} HG sites into {}",
        block.oat.len(),
        block.reports.len(),
        a.out.display()
    );
    Ok(())
}

pub struct RunArgs {
    pub block: PathBuf,
    pub input: Option<PathBuf>,
    pub steps: Option<usize>,
    pub encoder: EncoderKind,
    pub counting: SopCounting,
}

struct Loaded {
    block: ConvertedBlock,
    input: Matrix,
    opts: RunOptions,
}

fn load(a: &RunArgs) -> CliResult<Loaded> {
    let mut block = ConvertedBlock::load(&a.block).map_err(Failure::at(&a.block))?;
    if let Some(base) = env_seed()? {
        block.config.seeds = Seeds::from_base(base);
    }
    let input = match &a.input {
        Some(p) => read_matrix(p)?,
        None => default_input(&block.config, 4),
    };
    if input.cols() != block.config.d_model {
        let src = a.input.as_deref().unwrap_or(Path::new("<default input>"));
        return Err(Failure::input(format!(
            "{}: {} columns but the block expects d_model = {}",
            src.display(),
            input.cols(),
            block.config.d_model
        )));
    }
    let opts = RunOptions {
        steps: a.steps.unwrap_or(block.config.t),
        encoder: a.encoder,
        counting: a.counting,
        flops: FlopTable::default(),
    };
    Ok(Loaded { block, input, opts })
}

/// Runs every `seq_len`-row sequence of `input`.
fn run_sequences(block: &ConvertedBlock, input: &Matrix, opts: &RunOptions) -> CliResult<(Matrix, Vec<RunTrace>)> {
    let seq = block.config.seq_len;
    let mut outputs = Vec::new();
    let mut traces = Vec::new();
    let mut start = 0;
    while start < input.rows() {
        let n = seq.min(input.rows() - start);
        let (y, trace) = spike_forward(block, &input.row_slice(start, n)?, opts)?;
        outputs.extend((0..y.rows()).map(|i| y.row(i).to_vec()));
        traces.push(trace);
        start += n;
    }
    Ok((Matrix::from_rows(&outputs)?, traces))
}

pub fn run(a: RunArgs, report: Option<PathBuf>, output: Option<PathBuf>) -> CliResult<()> {
    let l = load(&a)?;
    let (y, traces) = run_sequences(&l.block, &l.input, &l.opts)?;
    let agg = Aggregate::of(&traces);
    let r = RunReport {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: l.block.config.seeds,
        config: l.block.config.clone(),
        steps: l.opts.steps,
        encoder: l.opts.encoder,
        counting: l.opts.counting,
        sequences: agg.sequences,
        layers: agg.layers,
        output_rel_err: agg.output_rel_err,
        output_max_abs_err: agg.output_max_abs_err,
        energy: EnergySummary::of(&agg.ledger),
        ledger: agg.ledger,
        clamps: agg.clamps,
        calibration: digests(&l.block),
    };
    if let Some(p) = &report {
        write_json(p, &r)?;
    }
    if let Some(p) = &output {
        write_matrix(p, &y)?;
    }
    println!(
        "T={} rel err {:.4e} max abs err {:.4e} energy ratio {}",
        r.steps,
        r.output_rel_err,
        r.output_max_abs_err,
        fmt_ratio(r.energy.ratio)
    );
    Ok(())
}

fn fmt_ratio(r: Option<f64>) -> String {
    r.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into())
}

pub fn compare(a: RunArgs) -> CliResult<()> {
    let l = load(&a)?;
    let (_, traces) = run_sequences(&l.block, &l.input, &l.opts)?;
    let agg = Aggregate::of(&traces);
    let mut out = std::io::stdout().lock();
    writeln!(out, "{:<8} {:>14} {:>14}", "layer", "rel_err", "max_abs_err")?;
    for d in &agg.layers {
        writeln!(out, "{:<8} {:>14.6e} {:>14.6e}", d.layer, d.rel_err, d.max_abs_err)?;
    }
    writeln!(out, "{:<8} {:>14.6e} {:>14.6e}", "output", agg.output_rel_err, agg.output_max_abs_err)?;
    writeln!(out, "T={} encoder={:?} sequences={}", l.opts.steps, l.opts.encoder, agg.sequences)?;
    Ok(())
}

pub fn sweep(a: RunArgs, steps: &[usize], out: Option<PathBuf>) -> CliResult<()> {
    let l = load(&a)?;
    let rows = steps
        .par_iter()
        .map(|t| {
            let opts = RunOptions { steps: *t, ..l.opts.clone() };
            let (_, traces) = run_sequences(&l.block, &l.input, &opts)?;
            let agg = Aggregate::of(&traces);
            Ok((*t, agg.output_rel_err, agg.ledger.sops, agg.ledger.ratio()))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let sink: Box<dyn Write> = match &out {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| Failure::input(e.to_string());
    w.write_record(["timestep", "mean_rel_err", "sops", "ratio"]).map_err(csv_err)?;
    for (t, err, sops, ratio) in rows {
        let ratio = ratio.map(|r| r.to_string()).unwrap_or_default();
        w.write_record([t.to_string(), err.to_string(), sops.to_string(), ratio])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn energy(report: &Path) -> CliResult<()> {
    let text = std::fs::read_to_string(report).map_err(|e| Failure::input(format!("{}: {e}", report.display())))?;
    if text.trim().is_empty() {
        return Err(Failure::input(format!("{}: empty report", report.display())));
    }
    let r: RunReport = serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", report.display())))?;
    let ledger = r.ledger;
    let ratio = spikeconv::energy::energy_ratio(&ledger).map_err(Failure::at(report))?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{:<14} {:>12} {:>12} {:>10}", "component", "sops", "flops", "ratio")?;
    for (name, c) in ledger.rollup(2) {
        let cr = (c.flops > 0).then(|| (c.sops as f64 * ledger.e_ac) / (c.flops as f64 * ledger.e_mac));
        writeln!(out, "{:<14} {:>12} {:>12} {:>10}", name, c.sops, c.flops, fmt_ratio(cr))?;
    }
    writeln!(out, "{:<14} {:>12} {:>12} {:>10.4}", "total", ledger.sops, ledger.flops, ratio)?;
    writeln!(
        out,
        "E_spike / E_float = ({} * {}) / ({} * {}) = {ratio:.6}",
        ledger.sops, ledger.e_ac, ledger.flops, ledger.e_mac
    )?;
    Ok(())
}
