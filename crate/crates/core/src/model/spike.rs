//! Spike-driven forward pass of a converted block.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::FfnKind;
use super::convert::ConvertedBlock;
use super::float::{float_forward_traced, MASK_VALUE};
use crate::energy::{EnergyLedger, FlopTable, SopCounting};
use crate::error::{Error, Result};
use crate::neurons::{MTConfig, OATConfig};
use crate::spikeops::{
    saa_mul, saw_mul, spike_ffn, spike_gated_ffn, spike_layernorm, spike_residual, spike_softmax,
    GatedFfnOats, GatedFfnWeights, OpLog, SiteEncoder, SpikeMatrixTrain,
};
use crate::tensors::{frobenius_rel_err, Matrix};

/// Encoder used at every OAT site.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    #[default]
    Oat,
    /// Ablation: one MT neuron per site with `tau = theta_out`, so outliers
    /// stay representable at the cost of resolution on the bulk.
    SingleMt,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oat" => Ok(EncoderKind::Oat),
            "single-mt" => Ok(EncoderKind::SingleMt),
            _ => Err(Error::InvalidConfig(format!("unknown encoder `{s}` (known: oat, single-mt)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub steps: usize,
    pub encoder: EncoderKind,
    pub counting: SopCounting,
    pub flops: FlopTable,
}

impl RunOptions {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            encoder: EncoderKind::Oat,
            counting: SopCounting::PerEvent,
            flops: FlopTable::default(),
        }
    }

    pub fn with_encoder(mut self, encoder: EncoderKind) -> Self {
        self.encoder = encoder;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDeviation {
    pub layer: usize,
    pub rel_err: f64,
    pub max_abs_err: f64,
}

/// What a spike run measured against the float reference on the same input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub steps: usize,
    pub encoder: EncoderKind,
    pub layers: Vec<LayerDeviation>,
    /// `||spike - float||_F / ||float||_F` of the block output.
    pub output_rel_err: f64,
    pub output_max_abs_err: f64,
    /// Spike SOPs plus the float FLOPs of the same input.
    pub ledger: EnergyLedger,
    pub clamps: BTreeMap<String, u64>,
}

#[derive(Clone, Copy, Debug)]
enum Encoder {
    Oat(OATConfig),
    Mt(MTConfig),
}

impl SiteEncoder for Encoder {
    fn encode(&self, x: &Matrix, steps: usize, counting: SopCounting) -> Result<SpikeMatrixTrain> {
        match self {
            Encoder::Oat(c) => c.encode(x, steps, counting),
            Encoder::Mt(c) => c.encode(x, steps, counting),
        }
    }

    fn error_bound(&self, x: f64) -> f64 {
        match self {
            Encoder::Oat(c) => SiteEncoder::error_bound(c, x),
            Encoder::Mt(c) => SiteEncoder::error_bound(c, x),
        }
    }
}

struct Run<'a> {
    block: &'a ConvertedBlock,
    opts: &'a RunOptions,
    log: OpLog,
}

impl<'a> Run<'a> {
    fn encoder(&self, site: &str) -> Result<Encoder> {
        let c = *self.block.oat(site)?;
        Ok(match self.opts.encoder {
            EncoderKind::Oat => Encoder::Oat(c),
            EncoderKind::SingleMt => Encoder::Mt(MTConfig {
                tau: c.theta_out,
                levels: c.levels,
                steps: c.steps,
            }),
        })
    }

    fn encode(&self, site: &str, x: &Matrix) -> Result<SpikeMatrixTrain> {
        self.encoder(site)?.encode(x, self.opts.steps, self.log.counting)
    }

    fn weight(&self, l: usize, name: &str) -> Result<&'a Matrix> {
        self.block.weights.layer(l, name)
    }

    fn layernorm(&mut self, l: usize, ln: &str, xs: &SpikeMatrixTrain) -> Result<SpikeMatrixTrain> {
        let site = format!("l{l}.{ln}");
        let enc = self.encoder(&format!("{site}.center"))?;
        let block = self.block;
        let out = spike_layernorm(
            xs,
            self.weight(l, &format!("{ln}.gamma"))?,
            self.weight(l, &format!("{ln}.beta"))?,
            block.hg(&format!("{site}.invsqrt"))?,
            block.hg(&format!("{site}.square"))?,
            &enc,
            &mut self.log,
            &site,
        )?;
        checked(out, &site)
    }

    fn linear(&mut self, xs: &SpikeMatrixTrain, w: &Matrix, b: &Matrix, site: &str) -> Result<Matrix> {
        let y = saw_mul(xs, w, &mut self.log, site)?.inject_bias(b)?;
        Ok(checked(y, site)?.decode())
    }

    fn attention(&mut self, l: usize, a: &SpikeMatrixTrain) -> Result<SpikeMatrixTrain> {
        let block = self.block;
        let cfg = &block.config;
        let site = format!("l{l}.attn");
        let (n, dk) = (a.shape().0, cfg.head_dim());
        let scale = 1.0 / (dk as f64).sqrt();
        let a_s = self.encode(&format!("{site}.in"), &a.decode())?;
        let w = |name: &str| block.weights.layer(l, &format!("attn.{name}"));
        let (wq, bq) = (w("wq")?.scale(scale), w("bq")?.scale(scale));
        let (wk, bk, wv, bv) = (w("wk")?, w("bk")?, w("wv")?, w("bv")?);
        let (wo, bo) = (w("wo")?, w("bo")?);
        let q = self.linear(&a_s, &wq, &bq, &format!("{site}.wq"))?;
        let k = self.linear(&a_s, wk, bk, &format!("{site}.wk"))?;
        let v = self.linear(&a_s, wv, bv, &format!("{site}.wv"))?;
        let mask = Matrix::from_fn(n, n, |i, j| if j > i { MASK_VALUE } else { 0.0 });
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = self.encode(&format!("{site}.q"), &q.col_slice(h * dk, dk)?)?;
            let kt = self.encode(&format!("{site}.k"), &k.col_slice(h * dk, dk)?.transpose())?;
            let vh = self.encode(&format!("{site}.v"), &v.col_slice(h * dk, dk)?)?;
            let mut s = saa_mul(&qh, &kt, &mut self.log, &format!("{site}.scores"))?;
            if cfg.causal {
                s = s.inject(&mask)?;
            }
            let s = checked(s, &format!("{site}.scores"))?;
            let p = spike_softmax(
                &s,
                block.hg(&format!("{site}.exp"))?,
                block.hg(&format!("{site}.reciprocal"))?,
                &mut self.log,
                &format!("{site}.softmax"),
            )?;
            let p = checked(p, &format!("{site}.softmax"))?;
            heads.push(saa_mul(&p, &vh, &mut self.log, &format!("{site}.context"))?.decode());
        }
        let o = self.encode(&format!("{site}.out"), &Matrix::hconcat(&heads)?)?;
        let out = saw_mul(&o, wo, &mut self.log, &format!("{site}.wo"))?.inject_bias(bo)?;
        checked(out, &format!("{site}.wo"))
    }

    fn ffn(&mut self, l: usize, f: &SpikeMatrixTrain) -> Result<SpikeMatrixTrain> {
        let site = format!("l{l}.ffn");
        let block = self.block;
        let w = |name: &str| block.weights.layer(l, &format!("ffn.{name}"));
        let act = block.hg(&format!("{site}.act"))?;
        let out = match self.block.config.ffn_kind {
            FfnKind::Standard => {
                let enc = self.encoder(&format!("{site}.in"))?;
                let (w1, b1, w2, b2) = (w("w1")?, w("b1")?, w("w2")?, w("b2")?);
                spike_ffn(f, w1, b1, w2, b2, act, &enc, &mut self.log, &site)?
            }
            FfnKind::Gated => {
                let weights = GatedFfnWeights {
                    wg: w("wg")?,
                    bg: w("bg")?,
                    wu: w("wu")?,
                    bu: w("bu")?,
                    wd: w("wd")?,
                    bd: w("bd")?,
                };
                let oats = GatedFfnOats {
                    input: self.encoder(&format!("{site}.in"))?,
                    up: self.encoder(&format!("{site}.up"))?,
                    inner: self.encoder(&format!("{site}.inner"))?,
                };
                spike_gated_ffn(f, &weights, act, &oats, &mut self.log, &site)?
            }
        };
        checked(out, &site)
    }
}

/// Fails with [`Error::NumericFailure`] at the first non-finite step.
fn checked(train: SpikeMatrixTrain, site: &str) -> Result<SpikeMatrixTrain> {
    match train.first_non_finite() {
        Some(t) => Err(Error::NumericFailure { site: site.to_string(), step: t + 1 }),
        None => Ok(train),
    }
}

/// Runs the converted block on `x` for `opts.steps` timesteps and compares
/// it with the float block on the same input.
pub fn spike_forward(block: &ConvertedBlock, x: &Matrix, opts: &RunOptions) -> Result<(Matrix, RunTrace)> {
    let cfg = &block.config;
    if opts.steps == 0 {
        return Err(Error::InvalidConfig("timesteps must be >= 1".into()));
    }
    if x.cols() != cfg.d_model {
        return Err(Error::shape(
            "spike_forward",
            format!("input width {} but d_model {}", x.cols(), cfg.d_model),
        ));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("spike_forward input".into()));
    }
    let (reference, float_trace) = float_forward_traced(cfg, &block.weights, x, &opts.flops)?;
    let mut run = Run {
        block,
        opts,
        log: OpLog::new(opts.counting),
    };
    let mut h = run.encode("input", x)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let a = run.layernorm(l, "ln1", &h)?;
        let att = run.attention(l, &a)?;
        let h1 = spike_residual(&h, &att, &mut run.log, &format!("l{l}.residual"))?;
        let f = run.layernorm(l, "ln2", &h1)?;
        let ff = run.ffn(l, &f)?;
        h = checked(spike_residual(&h1, &ff, &mut run.log, &format!("l{l}.residual"))?, &format!("l{l}.residual"))?;
        let (got, want) = (h.decode(), &float_trace.layer_outputs[l]);
        layers.push(LayerDeviation {
            layer: l,
            rel_err: frobenius_rel_err(&got, want)?,
            max_abs_err: got.sub(want)?.max_abs(),
        });
    }
    let out = h.decode();
    let mut ledger = run.log.ledger;
    ledger.merge(&float_trace.ledger);
    let trace = RunTrace {
        steps: opts.steps,
        encoder: opts.encoder,
        layers,
        output_rel_err: frobenius_rel_err(&out, &reference)?,
        output_max_abs_err: out.sub(&reference)?.max_abs(),
        ledger,
        clamps: run.log.clamps,
    };
    Ok((out, trace))
}
