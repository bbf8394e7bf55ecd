//! Spike-driven linear algebra and transformer sub-layers.
//!
//! Trains here are sequences of per-step matrices whose sum over time is
//! the represented activation. Linear maps act step by step (SAW). Products
//! of two trains use running accumulators so that the per-step outputs
//! telescope to the product of the decoded operands (SAA and the spike
//! Hadamard product). Nonlinear stages decode their input, as an FS neuron
//! integrates it into its membrane, and emit a fresh train through an HG
//! neuron.

use std::collections::BTreeMap;

use log::warn;

use crate::calibration::{HgErrorBound, Target};
use crate::energy::{EnergyLedger, SopCounting};
use crate::error::{Error, Result};
use crate::neurons::{hg_apply_steps, mt_encode_matrix, oat_encode, HGConfig, MTConfig, OATConfig, SpikeTrain};
use crate::tensors::{matmul, rowmax, rowsum, Matrix};

/// Per-step matrices of weighted spike values (or partial sums).
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeMatrixTrain {
    steps: Vec<Matrix>,
    thresholds: Option<Vec<f64>>,
    events: Option<Vec<Vec<bool>>>,
    sops_per_event: u64,
}

impl SpikeMatrixTrain {
    /// Partial-sum train without event flags; nonzero entries count as
    /// events.
    pub fn from_steps(steps: Vec<Matrix>) -> Result<Self> {
        let shape = steps
            .first()
            .ok_or(Error::EmptyInput("spike train"))?
            .shape();
        if steps.iter().any(|m| m.shape() != shape) {
            return Err(Error::shape("spike train", "per-step shapes differ"));
        }
        Ok(Self {
            steps,
            thresholds: None,
            events: None,
            sops_per_event: 1,
        })
    }

    /// Scalar-thresholded train: step `t` carries `thresholds[t] * codes[t]`,
    /// with an event wherever the code is nonzero.
    pub fn scalar_thresholded(codes: Vec<Matrix>, thresholds: Vec<f64>) -> Result<Self> {
        if codes.len() != thresholds.len() {
            return Err(Error::shape(
                "scalar_thresholded",
                format!("{} steps but {} thresholds", codes.len(), thresholds.len()),
            ));
        }
        let events = codes
            .iter()
            .map(|c| c.data().iter().map(|v| *v != 0.0).collect())
            .collect();
        let steps = codes
            .iter()
            .zip(&thresholds)
            .map(|(c, th)| c.scale(*th))
            .collect();
        let mut s = Self::from_steps(steps)?;
        s.thresholds = Some(thresholds);
        s.events = Some(events);
        Ok(s)
    }

    pub fn from_spike_train(s: &SpikeTrain) -> Self {
        Self {
            steps: (0..s.steps()).map(|t| s.step_matrix(t)).collect(),
            thresholds: None,
            events: Some((0..s.steps()).map(|t| s.step_events(t).to_vec()).collect()),
            sops_per_event: 1,
        }
    }

    pub fn silent(steps: usize, rows: usize, cols: usize) -> Self {
        Self {
            steps: vec![Matrix::zeros(rows, cols); steps.max(1)],
            thresholds: None,
            events: Some(vec![vec![false; rows * cols]; steps.max(1)]),
            sops_per_event: 1,
        }
    }

    pub fn with_sops_per_event(mut self, n: u64) -> Self {
        self.sops_per_event = n;
        self
    }

    pub fn steps(&self) -> usize {
        self.steps.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.steps[0].shape()
    }

    pub fn step(&self, t: usize) -> &Matrix {
        &self.steps[t]
    }

    pub fn step_matrices(&self) -> &[Matrix] {
        &self.steps
    }

    pub fn thresholds(&self) -> Option<&[f64]> {
        self.thresholds.as_deref()
    }

    pub fn has_events(&self) -> bool {
        self.events.is_some()
    }

    pub fn decode(&self) -> Matrix {
        self.prefix_decode(self.steps() - 1)
    }

    /// Sum of steps `0..=t`.
    pub fn prefix_decode(&self, t: usize) -> Matrix {
        let (r, c) = self.shape();
        let mut acc = vec![0.0; r * c];
        for m in &self.steps[..=t] {
            for (a, v) in acc.iter_mut().zip(m.data()) {
                *a += v;
            }
        }
        Matrix::from_fn(r, c, |i, j| acc[i * c + j])
    }

    /// Active entries at step `t`: events when flagged, else nonzeros.
    pub fn active(&self, t: usize) -> u64 {
        match &self.events {
            Some(ev) => ev[t].iter().filter(|e| **e).count() as u64,
            None => self.steps[t].data().iter().filter(|v| **v != 0.0).count() as u64,
        }
    }

    fn active_in_row(&self, t: usize, i: usize) -> bool {
        let cols = self.shape().1;
        match &self.events {
            Some(ev) => ev[t][i * cols..(i + 1) * cols].iter().any(|e| *e),
            None => self.steps[t].row(i).iter().any(|v| *v != 0.0),
        }
    }

    pub fn event_count(&self) -> u64 {
        (0..self.steps()).map(|t| self.active(t)).sum()
    }

    /// SOPs charged when step `t` fans out to `fan_out` targets.
    fn sops(&self, t: usize, fan_out: usize) -> u64 {
        self.active(t) * self.sops_per_event * fan_out as u64
    }

    /// Step-wise sum of two trains (residual connections).
    pub fn add(&self, other: &SpikeMatrixTrain) -> Result<SpikeMatrixTrain> {
        if self.steps() != other.steps() {
            return Err(Error::Protocol(format!(
                "adding trains of {} and {} steps",
                self.steps(),
                other.steps()
            )));
        }
        let steps = self
            .steps
            .iter()
            .zip(&other.steps)
            .map(|(a, b)| a.add(b))
            .collect::<Result<_>>()?;
        Self::from_steps(steps)
    }

    /// Adds a `1 x cols` bias at the first step, as a constant injected
    /// current.
    pub fn inject_bias(&self, bias: &Matrix) -> Result<SpikeMatrixTrain> {
        let mut steps = self.steps.clone();
        steps[0] = steps[0].add_row_broadcast(bias)?;
        Self::from_steps(steps)
    }

    /// Adds a full `rows x cols` matrix at the first step.
    pub fn inject(&self, m: &Matrix) -> Result<SpikeMatrixTrain> {
        let mut steps = self.steps.clone();
        steps[0] = steps[0].add(m)?;
        Self::from_steps(steps)
    }

    /// Truncates to `steps` or pads with silent steps.
    pub fn resized(mut self, steps: usize) -> SpikeMatrixTrain {
        let steps = steps.max(1);
        let (r, c) = self.shape();
        self.steps.resize(steps, Matrix::zeros(r, c));
        if let Some(ev) = &mut self.events {
            ev.resize(steps, vec![false; r * c]);
        }
        if let Some(th) = &mut self.thresholds {
            th.resize(steps, 0.0);
        }
        self
    }

    /// First step whose matrix holds a non-finite value.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.steps.iter().position(|m| !m.is_finite())
    }
}

/// Energy and clamp bookkeeping shared by a chain of spike operations.
#[derive(Clone, Debug, Default)]
pub struct OpLog {
    pub ledger: EnergyLedger,
    pub clamps: BTreeMap<String, u64>,
    pub counting: SopCounting,
}

impl OpLog {
    pub fn new(counting: SopCounting) -> Self {
        Self {
            counting,
            ..Self::default()
        }
    }

    fn sop(&mut self, site: &str, n: u64) {
        self.ledger.record_sop(site, n);
    }

    fn clamp(&mut self, site: &str, n: u64) {
        if n > 0 {
            warn!("{site}: {n} input(s) outside the fitted range were clamped");
            *self.clamps.entry(site.to_string()).or_default() += n;
        }
    }

    pub fn clamp_total(&self) -> u64 {
        self.clamps.values().sum()
    }
}

/// Encoder placed in front of a linear or product input.
pub trait SiteEncoder {
    /// Encodes `x` over `steps` timesteps.
    fn encode(&self, x: &Matrix, steps: usize, counting: SopCounting) -> Result<SpikeMatrixTrain>;
    /// Upper bound on the reconstruction error of `x` at the encoder's own
    /// step count.
    fn error_bound(&self, x: f64) -> f64;
}

impl SiteEncoder for OATConfig {
    fn encode(&self, x: &Matrix, steps: usize, counting: SopCounting) -> Result<SpikeMatrixTrain> {
        oat_train(x, self, steps, counting)
    }

    fn error_bound(&self, x: f64) -> f64 {
        OATConfig::error_bound(self, x)
    }
}

impl SiteEncoder for MTConfig {
    fn encode(&self, x: &Matrix, steps: usize, counting: SopCounting) -> Result<SpikeMatrixTrain> {
        let c = MTConfig { steps, ..*self };
        let s = mt_encode_matrix(x, &c)?;
        Ok(SpikeMatrixTrain::from_spike_train(&s).with_sops_per_event(counting.sops_per_event(c.levels)))
    }

    fn error_bound(&self, x: f64) -> f64 {
        MTConfig::error_bound(self, x)
    }
}

/// OAT-encodes `x` over `steps` timesteps.
pub fn oat_train(x: &Matrix, c: &OATConfig, steps: usize, counting: SopCounting) -> Result<SpikeMatrixTrain> {
    let c = c.with_steps(steps);
    let s = oat_encode(x, &c)?;
    Ok(SpikeMatrixTrain::from_spike_train(&s).with_sops_per_event(counting.sops_per_event(c.levels)))
}

/// HG-encodes `x`, counting clamped inputs under `site`. Configs fitted for
/// more steps are truncated, configs fitted for fewer are padded with
/// silent steps.
pub fn hg_train(x: &Matrix, c: &HGConfig, steps: usize, log: &mut OpLog, site: &str) -> Result<SpikeMatrixTrain> {
    let clamped = x.data().iter().filter(|v| c.out_of_range(**v)).count();
    log.clamp(site, clamped as u64);
    let s = hg_apply_steps(x, c, steps)?;
    Ok(SpikeMatrixTrain::from_spike_train(&s).resized(steps))
}

/// Residual connection `a + b`; each active entry of `b` is one
/// accumulation into the stream.
pub fn spike_residual(a: &SpikeMatrixTrain, b: &SpikeMatrixTrain, log: &mut OpLog, site: &str) -> Result<SpikeMatrixTrain> {
    let out = a.add(b)?;
    for t in 0..b.steps() {
        log.sop(site, b.sops(t, 1));
    }
    Ok(out)
}

/// Spike-activation x weight product, `X(t) W` per step (tokens are rows).
pub fn saw_mul(xs: &SpikeMatrixTrain, w: &Matrix, log: &mut OpLog, site: &str) -> Result<SpikeMatrixTrain> {
    if xs.shape().1 != w.rows() {
        return Err(Error::shape(
            "saw_mul",
            format!("train {:?} times weight {:?}", xs.shape(), w.shape()),
        ));
    }
    let mut out = Vec::with_capacity(xs.steps());
    for (t, x) in xs.steps.iter().enumerate() {
        log.sop(site, xs.sops(t, w.cols()));
        out.push(matmul(x, w)?);
    }
    SpikeMatrixTrain::from_steps(out)
}

/// Running sums `S_q`, `S_k` of the operands seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Accumulators {
    pub s_q: Matrix,
    pub s_k: Matrix,
}

impl Accumulators {
    pub fn new(q_shape: (usize, usize), k_shape: (usize, usize)) -> Self {
        Self {
            s_q: Matrix::zeros(q_shape.0, q_shape.1),
            s_k: Matrix::zeros(k_shape.0, k_shape.1),
        }
    }

    /// `A(t) = Q(t)K(t) + Q(t)S_k + S_q K(t)`, then folds `Q(t)`, `K(t)`
    /// into the sums. Summed over steps this telescopes to
    /// `(sum Q)(sum K)`.
    pub fn step(&mut self, q: &Matrix, k: &Matrix) -> Result<Matrix> {
        let mut a = matmul(q, k)?;
        a.add_assign(&matmul(q, &self.s_k)?)?;
        a.add_assign(&matmul(&self.s_q, k)?)?;
        self.s_q.add_assign(q)?;
        self.s_k.add_assign(k)?;
        Ok(a)
    }
}

/// Spike-activation x spike-activation product; `ks` is supplied already
/// transposed (`d x m`).
pub fn saa_mul(
    qs: &SpikeMatrixTrain,
    ks: &SpikeMatrixTrain,
    log: &mut OpLog,
    site: &str,
) -> Result<SpikeMatrixTrain> {
    if qs.steps() != ks.steps() {
        return Err(Error::Protocol(format!(
            "SAA operands have {} and {} steps",
            qs.steps(),
            ks.steps()
        )));
    }
    let ((n, d), (dk, m)) = (qs.shape(), ks.shape());
    if d != dk {
        return Err(Error::shape(
            "saa_mul",
            format!("{:?} times {:?}", qs.shape(), ks.shape()),
        ));
    }
    let mut acc = Accumulators::new((n, d), (dk, m));
    let mut out = Vec::with_capacity(qs.steps());
    for t in 0..qs.steps() {
        // A query event meets K(t) + S_k, a key event meets S_q: one
        // accumulation per output it touches.
        log.sop(site, qs.sops(t, m) + ks.sops(t, n));
        out.push(acc.step(qs.step(t), ks.step(t))?);
    }
    SpikeMatrixTrain::from_steps(out)
}

fn broadcast_mul(a: &Matrix, b: &Matrix) -> Matrix {
    if b.cols() == 1 && a.cols() != 1 {
        Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * b.get(i, 0))
    } else {
        Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * b.get(i, j))
    }
}

/// Elementwise product of two trains with the same accumulator scheme as
/// SAA. `b` may be a `rows x 1` column broadcast along each row.
pub fn spike_hadamard(
    a: &SpikeMatrixTrain,
    b: &SpikeMatrixTrain,
    log: &mut OpLog,
    site: &str,
) -> Result<SpikeMatrixTrain> {
    if a.steps() != b.steps() {
        return Err(Error::Protocol(format!(
            "Hadamard operands have {} and {} steps",
            a.steps(),
            b.steps()
        )));
    }
    let (rows, cols) = a.shape();
    let broadcast = b.shape() == (rows, 1) && cols != 1;
    if !broadcast && b.shape() != (rows, cols) {
        return Err(Error::shape(
            "spike_hadamard",
            format!("{:?} with {:?}", a.shape(), b.shape()),
        ));
    }
    let mut s_a = Matrix::zeros(rows, cols);
    let mut s_b = Matrix::zeros(b.shape().0, b.shape().1);
    let mut out = Vec::with_capacity(a.steps());
    for t in 0..a.steps() {
        let (x, y) = (a.step(t), b.step(t));
        let mut p = broadcast_mul(x, y);
        p.add_assign(&broadcast_mul(x, &s_b))?;
        p.add_assign(&broadcast_mul(&s_a, y))?;
        s_a.add_assign(x)?;
        s_b.add_assign(y)?;
        log.sop(site, a.sops(t, 1) + b.sops(t, if broadcast { cols } else { 1 }));
        out.push(p);
    }
    SpikeMatrixTrain::from_steps(out)
}

/// Max-offset correction: `z(t) + M(t-1) - M(t)` with `M(t)` the row max
/// of the running sum through step `t` and `M(0) = 0`. The corrected
/// steps sum to `Z - max Z` row by row.
pub fn softmax_offset(zs: &SpikeMatrixTrain, log: &mut OpLog, site: &str) -> Result<SpikeMatrixTrain> {
    let (rows, cols) = zs.shape();
    if cols == 0 {
        return Err(Error::shape("softmax_offset", "rows are empty"));
    }
    let mut prefix = Matrix::zeros(rows, cols);
    let mut m_prev = vec![0.0; rows];
    let mut out = Vec::with_capacity(zs.steps());
    for t in 0..zs.steps() {
        let z = zs.step(t);
        prefix.add_assign(z)?;
        let m_t = rowmax(&prefix)?;
        out.push(Matrix::from_fn(rows, cols, |i, j| {
            z.get(i, j) + (m_prev[i] - m_t[i])
        }));
        m_prev = m_t;
        log.sop(site, zs.sops(t, 1));
    }
    SpikeMatrixTrain::from_steps(out)
}

/// `scale * sum over columns` of every step, as a `rows x 1` train.
fn row_reduce(xs: &SpikeMatrixTrain, scale: f64, log: &mut OpLog, site: &str) -> Result<SpikeMatrixTrain> {
    let steps = (0..xs.steps())
        .map(|t| {
            log.sop(site, xs.sops(t, 1));
            Matrix::col_vector(rowsum(xs.step(t)).into_iter().map(|v| v * scale).collect())
        })
        .collect();
    SpikeMatrixTrain::from_steps(steps)
}

/// Spike softmax over rows: HG exp of the offset-corrected logits, times
/// the HG reciprocal of their row sum via the spike Hadamard product.
pub fn spike_softmax(
    zs: &SpikeMatrixTrain,
    exp_cfg: &HGConfig,
    inv_cfg: &HGConfig,
    log: &mut OpLog,
    site: &str,
) -> Result<SpikeMatrixTrain> {
    let steps = zs.steps();
    let zhat = softmax_offset(zs, log, &format!("{site}.offset"))?;
    let e = hg_train(&zhat.decode(), exp_cfg, steps, log, &format!("{site}.exp"))?;
    let sums = row_reduce(&e, 1.0, log, &format!("{site}.sum"))?;
    let r = hg_train(&sums.decode(), inv_cfg, steps, log, &format!("{site}.reciprocal"))?;
    spike_hadamard(&e, &r, log, &format!("{site}.normalize"))
}

/// Spike LayerNorm over rows: centre, OAT-encode, HG square and row mean
/// for the variance, HG inverse square root, spike Hadamard, then the
/// affine map (`gamma` per feature, `beta` injected at the first step).
#[allow(clippy::too_many_arguments)]
pub fn spike_layernorm<E: SiteEncoder + ?Sized>(
    xs: &SpikeMatrixTrain,
    gamma: &Matrix,
    beta: &Matrix,
    invsqrt_cfg: &HGConfig,
    square_cfg: &HGConfig,
    oat: &E,
    log: &mut OpLog,
    site: &str,
) -> Result<SpikeMatrixTrain> {
    let (rows, cols) = xs.shape();
    if gamma.shape() != (1, cols) || beta.shape() != (1, cols) {
        return Err(Error::shape(
            "spike_layernorm",
            format!("gamma {:?} / beta {:?} for width {cols}", gamma.shape(), beta.shape()),
        ));
    }
    let steps = xs.steps();
    let mean = row_reduce(xs, 1.0 / cols as f64, log, &format!("{site}.mean"))?;
    let mut centered = Vec::with_capacity(steps);
    for t in 0..steps {
        let (x, mu) = (xs.step(t), mean.step(t));
        let busy_rows = (0..rows).filter(|i| mean.active_in_row(t, *i)).count();
        log.sop(&format!("{site}.center"), xs.sops(t, 1) + (busy_rows * cols) as u64);
        centered.push(Matrix::from_fn(rows, cols, |i, j| x.get(i, j) - mu.get(i, 0)));
    }
    let centered = SpikeMatrixTrain::from_steps(centered)?;
    let c_hat = oat.encode(&centered.decode(), steps, log.counting)?;
    let sq = hg_train(&c_hat.decode(), square_cfg, steps, log, &format!("{site}.square"))?;
    let var = row_reduce(&sq, 1.0 / cols as f64, log, &format!("{site}.var"))?;
    let r = hg_train(&var.decode(), invsqrt_cfg, steps, log, &format!("{site}.invsqrt"))?;
    let y = spike_hadamard(&c_hat, &r, log, &format!("{site}.scale"))?;
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        log.sop(&format!("{site}.affine"), y.sops(t, 1));
        out.push(Matrix::from_fn(rows, cols, |i, j| y.step(t).get(i, j) * gamma.get(0, j)));
    }
    SpikeMatrixTrain::from_steps(out)?.inject_bias(beta)
}

/// `f(phi(x) W1 + b1) W2 + b2`: OAT encoding, SAW, HG activation whose
/// output spikes feed the second SAW directly.
#[allow(clippy::too_many_arguments)]
pub fn spike_ffn<E: SiteEncoder + ?Sized>(
    xs: &SpikeMatrixTrain,
    w1: &Matrix,
    b1: &Matrix,
    w2: &Matrix,
    b2: &Matrix,
    act_cfg: &HGConfig,
    oat: &E,
    log: &mut OpLog,
    site: &str,
) -> Result<SpikeMatrixTrain> {
    let steps = xs.steps();
    let phi = oat.encode(&xs.decode(), steps, log.counting)?;
    let h = saw_mul(&phi, w1, log, &format!("{site}.w1"))?.inject_bias(b1)?;
    let g = hg_train(&h.decode(), act_cfg, steps, log, &format!("{site}.act"))?;
    saw_mul(&g, w2, log, &format!("{site}.w2"))?.inject_bias(b2)
}

/// Weights of a gated feed-forward layer.
#[derive(Clone, Copy, Debug)]
pub struct GatedFfnWeights<'a> {
    pub wg: &'a Matrix,
    pub bg: &'a Matrix,
    pub wu: &'a Matrix,
    pub bu: &'a Matrix,
    pub wd: &'a Matrix,
    pub bd: &'a Matrix,
}

/// OAT encoders at the three linear/product inputs of a gated layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatedFfnOats<E> {
    pub input: E,
    pub up: E,
    pub inner: E,
}

/// `g = f(phi(x) Wg + bg)`, `u = phi(x) Wu + bu`, `z = phi(u) * g`,
/// `out = phi(z) Wd + bd`.
pub fn spike_gated_ffn<E: SiteEncoder>(
    xs: &SpikeMatrixTrain,
    w: &GatedFfnWeights<'_>,
    act_cfg: &HGConfig,
    oats: &GatedFfnOats<E>,
    log: &mut OpLog,
    site: &str,
) -> Result<SpikeMatrixTrain> {
    let steps = xs.steps();
    let phi = oats.input.encode(&xs.decode(), steps, log.counting)?;
    let gate_in = saw_mul(&phi, w.wg, log, &format!("{site}.wg"))?.inject_bias(w.bg)?;
    let g = hg_train(&gate_in.decode(), act_cfg, steps, log, &format!("{site}.act"))?;
    let u = saw_mul(&phi, w.wu, log, &format!("{site}.wu"))?.inject_bias(w.bu)?;
    let u_s = oats.up.encode(&u.decode(), steps, log.counting)?;
    let z = spike_hadamard(&u_s, &g, log, &format!("{site}.gate"))?;
    let z_s = oats.inner.encode(&z.decode(), steps, log.counting)?;
    saw_mul(&z_s, w.wd, log, &format!("{site}.wd"))?.inject_bias(w.bd)
}

/// Worst-case deviation of [`spike_softmax`] from the float softmax of
/// `logits`, given the HG error bounds of the exp and reciprocal fits.
/// Inputs below the exp range add `exp(lo)`; sums leaving the reciprocal
/// range are accounted for through the clamp.
pub fn softmax_error_bound(logits: &Matrix, exp: &HgErrorBound, inv: &HgErrorBound) -> Result<f64> {
    let maxes = rowmax(logits)?;
    let mut worst = 0.0f64;
    for (i, m) in maxes.iter().enumerate() {
        let z: Vec<f64> = logits.row(i).iter().map(|v| v - m).collect();
        let eps: Vec<f64> = z
            .iter()
            .map(|v| {
                let spill = if *v < exp.lo() { exp.lo().exp() } else { 0.0 };
                exp.over(*v, *v) + spill
            })
            .collect();
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        let ds: f64 = eps.iter().sum();
        let (lo, hi) = (inv.clamp(s - ds), inv.clamp(s + ds));
        if lo <= 0.0 {
            return Ok(f64::INFINITY);
        }
        let dr = inv.over(lo, hi) + (1.0 / lo - 1.0 / s).abs().max((1.0 / hi - 1.0 / s).abs());
        for (ej, ee) in e.iter().zip(&eps) {
            worst = worst.max((ej + ee) * dr + ee / s);
        }
    }
    Ok(worst)
}

/// Worst-case deviation of [`spike_layernorm`] from the float LayerNorm of
/// `x`. Infinite when the square HG would be driven outside its range.
pub fn layernorm_error_bound<E: SiteEncoder + ?Sized>(
    x: &Matrix,
    gamma: &Matrix,
    oat: &E,
    square: &HgErrorBound,
    invsqrt: &HgErrorBound,
) -> f64 {
    let (rows, cols) = x.shape();
    let mut worst = 0.0f64;
    for i in 0..rows {
        let row = x.row(i);
        let mu = row.iter().sum::<f64>() / cols as f64;
        let c: Vec<f64> = row.iter().map(|v| v - mu).collect();
        let q: Vec<f64> = c.iter().map(|v| oat.error_bound(*v)).collect();
        let mut dv = 0.0;
        for (cj, qj) in c.iter().zip(&q) {
            if !square.covers(cj - qj, cj + qj) {
                return f64::INFINITY;
            }
            dv += square.over(cj - qj, cj + qj) + qj * (2.0 * cj.abs() + qj);
        }
        dv /= cols as f64;
        let var = c.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let r = Target::InvSqrt.eval(var);
        let (lo, hi) = (invsqrt.clamp(var - dv), invsqrt.clamp(var + dv));
        let f = |v: f64| Target::InvSqrt.eval(v);
        let dr = invsqrt.over(lo, hi) + (f(lo) - r).abs().max((f(hi) - r).abs());
        for (j, (cj, qj)) in c.iter().zip(&q).enumerate() {
            let dy = (cj.abs() + qj) * dr + qj * r;
            worst = worst.max(gamma.get(0, j).abs() * dy);
        }
    }
    worst
}

/// Worst-case deviation of [`spike_ffn`] from the float FFN on `x`.
/// Infinite when the activation HG would be driven outside its range.
pub fn ffn_error_bound<E: SiteEncoder + ?Sized>(
    x: &Matrix,
    w1: &Matrix,
    b1: &Matrix,
    w2: &Matrix,
    oat: &E,
    act: &HgErrorBound,
) -> Result<f64> {
    let h = matmul(x, w1)?.add_row_broadcast(b1)?;
    let q = x.map(|v| oat.error_bound(v));
    let dh = matmul(&q, &w1.map(f64::abs))?;
    let mut dg = Matrix::zeros(h.rows(), h.cols());
    for i in 0..h.rows() {
        for k in 0..h.cols() {
            let (a, b) = (h.get(i, k) - dh.get(i, k), h.get(i, k) + dh.get(i, k));
            if !act.covers(a, b) {
                return Ok(f64::INFINITY);
            }
            dg.set(i, k, act.over(a, b) + act.target.max_slope(a, b) * dh.get(i, k));
        }
    }
    Ok(matmul(&dg, &w2.map(f64::abs))?.max_abs())
}
