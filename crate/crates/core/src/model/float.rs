//! Float reference forward pass of the pre-LN block.

use std::collections::BTreeMap;

use super::config::{FfnKind, ModelConfig};
use super::weights::WeightSet;
use crate::calibration::{gelu, silu, INVSQRT_EPS};
use crate::energy::{EnergyLedger, FlopTable};
use crate::error::{Error, Result};
use crate::tensors::{matmul, Matrix};

/// Additive score for masked (future) positions. Finite so that the spike
/// path never meets an infinity.
pub const MASK_VALUE: f64 = -1e4;

/// Activations recorded at every conversion site, plus float-path FLOPs.
#[derive(Clone, Debug, Default)]
pub struct FloatTrace {
    pub sites: BTreeMap<String, Vec<f64>>,
    pub layer_outputs: Vec<Matrix>,
    pub ledger: EnergyLedger,
}

impl FloatTrace {
    fn record(&mut self, site: String, values: impl IntoIterator<Item = f64>) {
        self.sites.entry(site).or_default().extend(values);
    }
}

struct Recorder<'a> {
    trace: Option<&'a mut FloatTrace>,
    flops: &'a FlopTable,
}

impl Recorder<'_> {
    fn values(&mut self, site: String, values: impl IntoIterator<Item = f64>) {
        if let Some(t) = self.trace.as_deref_mut() {
            t.record(site, values);
        }
    }

    fn flop(&mut self, site: String, kind: &str, n: usize) -> Result<()> {
        let cost = self.flops.cost(kind)?;
        if let Some(t) = self.trace.as_deref_mut() {
            t.ledger.record_flop(&site, cost * n as u64);
        }
        Ok(())
    }
}

pub fn float_forward(cfg: &ModelConfig, w: &WeightSet, x: &Matrix) -> Result<Matrix> {
    let table = FlopTable::default();
    forward(cfg, w, x, Recorder { trace: None, flops: &table })
}

/// Forward pass that also records site activations and float FLOPs.
pub fn float_forward_traced(
    cfg: &ModelConfig,
    w: &WeightSet,
    x: &Matrix,
    flops: &FlopTable,
) -> Result<(Matrix, FloatTrace)> {
    let mut trace = FloatTrace::default();
    let out = forward(cfg, w, x, Recorder { trace: Some(&mut trace), flops })?;
    Ok((out, trace))
}

fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix, rec: &mut Recorder, site: &str) -> Result<Matrix> {
    let (n, d) = x.shape();
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let row = x.row(i);
        let mu = row.iter().sum::<f64>() / d as f64;
        let c: Vec<f64> = row.iter().map(|v| v - mu).collect();
        let var = c.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (var + INVSQRT_EPS).sqrt();
        for (j, cj) in c.iter().enumerate() {
            out.set(i, j, cj * r * gamma.get(0, j) + beta.get(0, j));
        }
        rec.values(format!("{site}.center"), c);
        rec.values(format!("{site}.invsqrt"), [var]);
    }
    rec.flop(site.to_string(), "mac", 4 * n * d)?;
    rec.flop(site.to_string(), "sqrt", n)?;
    rec.flop(site.to_string(), "reciprocal", n)?;
    Ok(out)
}

fn linear(x: &Matrix, w: &Matrix, b: &Matrix, rec: &mut Recorder, site: &str) -> Result<Matrix> {
    rec.flop(site.to_string(), "mac", x.rows() * x.cols() * w.cols())?;
    matmul(x, w)?.add_row_broadcast(b)
}

fn attention(cfg: &ModelConfig, w: &WeightSet, l: usize, a: &Matrix, rec: &mut Recorder) -> Result<Matrix> {
    let site = format!("l{l}.attn");
    let p = |name: &str| w.layer(l, &format!("attn.{name}"));
    rec.values(format!("{site}.in"), a.data().to_vec());
    let q = linear(a, p("wq")?, p("bq")?, rec, &site)?;
    let k = linear(a, p("wk")?, p("bk")?, rec, &site)?;
    let v = linear(a, p("wv")?, p("bv")?, rec, &site)?;
    let (n, dk) = (a.rows(), cfg.head_dim());
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = q.col_slice(h * dk, dk)?.scale(scale);
        let kh = k.col_slice(h * dk, dk)?;
        let vh = v.col_slice(h * dk, dk)?;
        rec.values(format!("{site}.q"), qh.data().to_vec());
        rec.values(format!("{site}.k"), kh.data().to_vec());
        rec.values(format!("{site}.v"), vh.data().to_vec());
        let mut s = matmul(&qh, &kh.transpose())?;
        let mut probs = Matrix::zeros(n, n);
        for i in 0..n {
            let visible = if cfg.causal { i + 1 } else { n };
            for j in visible..n {
                s.set(i, j, s.get(i, j) + MASK_VALUE);
            }
            let m = s.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let shifted: Vec<f64> = s.row(i).iter().map(|v| v - m).collect();
            let e: Vec<f64> = shifted.iter().map(|v| v.exp()).collect();
            let sum: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                probs.set(i, j, ej / sum);
            }
            rec.values(format!("{site}.exp"), shifted[..visible].to_vec());
            rec.values(format!("{site}.reciprocal"), [sum]);
        }
        rec.flop(site.clone(), "mac", 2 * n * n * dk + 2 * n * n)?;
        rec.flop(site.clone(), "exp", n * n)?;
        rec.flop(site.clone(), "reciprocal", n)?;
        heads.push(matmul(&probs, &vh)?);
    }
    let o = Matrix::hconcat(&heads)?;
    rec.values(format!("{site}.out"), o.data().to_vec());
    linear(&o, p("wo")?, p("bo")?, rec, &site)
}

fn ffn(cfg: &ModelConfig, w: &WeightSet, l: usize, f: &Matrix, rec: &mut Recorder) -> Result<Matrix> {
    let site = format!("l{l}.ffn");
    let p = |name: &str| w.layer(l, &format!("ffn.{name}"));
    rec.values(format!("{site}.in"), f.data().to_vec());
    match cfg.ffn_kind {
        FfnKind::Standard => {
            let h = linear(f, p("w1")?, p("b1")?, rec, &site)?;
            rec.values(format!("{site}.act"), h.data().to_vec());
            rec.flop(site.clone(), "gelu", h.len())?;
            linear(&h.map(gelu), p("w2")?, p("b2")?, rec, &site)
        }
        FfnKind::Gated => {
            let g_in = linear(f, p("wg")?, p("bg")?, rec, &site)?;
            rec.values(format!("{site}.act"), g_in.data().to_vec());
            rec.flop(site.clone(), "silu", g_in.len())?;
            let g = g_in.map(silu);
            let u = linear(f, p("wu")?, p("bu")?, rec, &site)?;
            rec.values(format!("{site}.up"), u.data().to_vec());
            let z = Matrix::from_fn(u.rows(), u.cols(), |i, j| u.get(i, j) * g.get(i, j));
            rec.flop(site.clone(), "mac", z.len())?;
            rec.values(format!("{site}.inner"), z.data().to_vec());
            linear(&z, p("wd")?, p("bd")?, rec, &site)
        }
    }
}

fn forward(cfg: &ModelConfig, w: &WeightSet, x: &Matrix, mut rec: Recorder) -> Result<Matrix> {
    cfg.validate()?;
    if x.cols() != cfg.d_model {
        return Err(Error::shape(
            "float_forward",
            format!("input width {} but d_model {}", x.cols(), cfg.d_model),
        ));
    }
    if x.rows() == 0 {
        return Err(Error::EmptyInput("float_forward"));
    }
    rec.values("input".to_string(), x.data().to_vec());
    let mut h = x.clone();
    for l in 0..cfg.n_layers {
        let a = layer_norm(&h, w.layer(l, "ln1.gamma")?, w.layer(l, "ln1.beta")?, &mut rec, &format!("l{l}.ln1"))?;
        let h1 = h.add(&attention(cfg, w, l, &a, &mut rec)?)?;
        let f = layer_norm(&h1, w.layer(l, "ln2.gamma")?, w.layer(l, "ln2.beta")?, &mut rec, &format!("l{l}.ln2"))?;
        h = h1.add(&ffn(cfg, w, l, &f, &mut rec)?)?;
        rec.flop(format!("l{l}.residual"), "mac", 2 * h.len())?;
        if let Some(t) = rec.trace.as_deref_mut() {
            t.layer_outputs.push(h.clone());
        }
    }
    Ok(h)
}
