//! Few-spike (FS), multi-threshold (MT), outlier-aware (OAT) and
//! hierarchically gated (HG) neurons.
//!
//! Every neuron receives its whole input as the initial membrane potential
//! `v(1)` and then runs for a fixed number of timesteps, emitting one
//! weighted spike (or nothing) per step. The emitted weights summed over
//! time are the neuron's decoded output.
//!
//! Firing uses `v >= threshold`. With that convention dyadic schedules
//! represent their grid points exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::Matrix;

/// Weighted spikes over `steps` timesteps for a `rows x cols` block of
/// neurons.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTrain {
    steps: usize,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    events: Vec<bool>,
}

impl SpikeTrain {
    pub fn silent(steps: usize, rows: usize, cols: usize) -> Self {
        Self {
            steps,
            rows,
            cols,
            values: vec![0.0; steps * rows * cols],
            events: vec![false; steps * rows * cols],
        }
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn value(&self, t: usize, j: usize) -> f64 {
        self.values[t * self.width() + j]
    }

    #[inline]
    pub fn event(&self, t: usize, j: usize) -> bool {
        self.events[t * self.width() + j]
    }

    pub fn step_values(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.values[t * w..(t + 1) * w]
    }

    pub fn step_events(&self, t: usize) -> &[bool] {
        let w = self.width();
        &self.events[t * w..(t + 1) * w]
    }

    /// Records a spike of weight `value` for neuron `j` at step `t`.
    #[inline]
    pub fn fire(&mut self, t: usize, j: usize, value: f64) {
        let idx = t * self.width() + j;
        self.values[idx] = value;
        self.events[idx] = true;
    }

    pub fn event_count(&self) -> usize {
        self.events.iter().filter(|e| **e).count()
    }

    /// Per-step matrices of weighted spike values.
    pub fn step_matrix(&self, t: usize) -> Matrix {
        Matrix::new(self.rows, self.cols, self.step_values(t).to_vec())
            .expect("spike values are finite")
    }
}

/// Sum of the weighted spikes over all timesteps, shaped like the encoded
/// input.
pub fn decode(s: &SpikeTrain) -> Matrix {
    let w = s.width();
    let mut out = vec![0.0; w];
    for t in 0..s.steps {
        for (o, v) in out.iter_mut().zip(s.step_values(t)) {
            *o += v;
        }
    }
    Matrix::from_fn(s.rows, s.cols, |i, j| out[i * s.cols + j])
}

/// Fixed per-step threshold, reset strength and output weight of an FS
/// neuron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FSParams {
    pub theta: Vec<f64>,
    pub h: Vec<f64>,
    pub d: Vec<f64>,
}

impl FSParams {
    pub fn new(theta: Vec<f64>, h: Vec<f64>, d: Vec<f64>) -> Result<Self> {
        let p = Self { theta, h, d };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.theta.len();
        if t == 0 || self.h.len() != t || self.d.len() != t {
            return Err(Error::InvalidConfig(format!(
                "FS parameter lengths theta={} h={} d={}",
                t,
                self.h.len(),
                self.d.len()
            )));
        }
        if self.theta.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidConfig("FS thresholds must be > 0".into()));
        }
        if self.h.iter().chain(&self.d).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("FS reset/weights must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn steps(&self) -> usize {
        self.theta.len()
    }

    /// Keeps the first `steps` timesteps.
    pub fn truncated(&self, steps: usize) -> FSParams {
        let n = steps.min(self.steps()).max(1);
        FSParams {
            theta: self.theta[..n].to_vec(),
            h: self.h[..n].to_vec(),
            d: self.d[..n].to_vec(),
        }
    }
}

/// Runs FS dynamics from membrane potential `v1` for `steps` steps and
/// reports each firing step. Returns the decoded output.
#[inline]
pub(crate) fn fs_run(v1: f64, p: &FSParams, steps: usize, mut on_fire: impl FnMut(usize, f64)) -> f64 {
    let mut v = v1;
    let mut out = 0.0;
    for t in 0..steps.min(p.steps()) {
        if v >= p.theta[t] {
            on_fire(t, p.d[t]);
            out += p.d[t];
            v -= p.h[t];
        }
    }
    out
}

pub fn fs_encode(x: f64, p: &FSParams) -> Result<SpikeTrain> {
    if !x.is_finite() {
        return Err(Error::NonFinite("fs_encode input".into()));
    }
    let mut s = SpikeTrain::silent(p.steps(), 1, 1);
    fs_run(x, p, p.steps(), |t, d| s.fire(t, 0, d));
    Ok(s)
}

/// Membrane potential seen by an FS sub-neuron that owns the range
/// starting at `lo`: the range's left edge lands exactly on the first
/// threshold, so the first step fires for every in-range input.
#[inline]
pub fn local_potential(x: f64, lo: f64, p: &FSParams) -> f64 {
    x - lo + p.theta[0]
}

/// Multi-threshold neuron: dyadic schedule `tau * 2^-t` with `2 * levels`
/// symmetric emission levels per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MTConfig {
    pub tau: f64,
    pub levels: usize,
    pub steps: usize,
}

impl MTConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("MT tau {} must be > 0", self.tau)));
        }
        if self.levels == 0 || self.steps == 0 {
            return Err(Error::InvalidConfig("MT needs levels >= 1 and steps >= 1".into()));
        }
        Ok(())
    }

    /// Base threshold at zero-based step `t`.
    #[inline]
    pub fn threshold(&self, t: usize) -> f64 {
        self.tau * 0.5f64.powi(t as i32 + 1)
    }

    /// Emission level `k` in `0..levels` at zero-based step `t`:
    /// `(levels + k) / levels * threshold(t)`.
    #[inline]
    pub fn level(&self, t: usize, k: usize) -> f64 {
        // One rounding: the product is exact for dyadic thresholds.
        self.threshold(t) * (self.levels + k) as f64 / self.levels as f64
    }

    /// Largest `|x|` for which the reconstruction error stays below
    /// [`MTConfig::resolution`]. Past it the neuron saturates.
    pub fn coverage(&self) -> f64 {
        let h = self.levels as f64;
        self.tau * (3.0 * h - 1.0) / (2.0 * h)
    }

    /// `tau * 2^-T`, the worst-case error for inputs inside the coverage.
    pub fn resolution(&self) -> f64 {
        self.tau * 0.5f64.powi(self.steps as i32)
    }

    /// Upper bound on `|decode(mt_encode(x)) - x|`. Outside the coverage
    /// the only guarantee is that the output never overshoots.
    pub fn error_bound(&self, x: f64) -> f64 {
        if x.abs() < self.coverage() {
            self.resolution()
        } else {
            x.abs()
        }
    }

    /// Largest value the neuron can emit in total for one sign.
    pub fn max_representable(&self) -> f64 {
        (0..self.steps).map(|t| self.level(t, self.levels - 1)).sum()
    }
}

/// Absolute comparison slack of MT neurons, relative to `tau`.
pub const MT_SLACK: f64 = 1e-12;

/// Runs MT dynamics; `on_fire(t, weight)` sees every signed emission.
#[inline]
pub(crate) fn mt_run(x: f64, c: &MTConfig, mut on_fire: impl FnMut(usize, f64)) -> f64 {
    let mut v = x;
    let mut out = 0.0;
    // Rounding in the running residual must not move a value that sits
    // exactly on a level below it.
    let slack = c.tau * MT_SLACK;
    for t in 0..c.steps {
        let mag = v.abs() + slack;
        if mag < c.threshold(t) {
            continue;
        }
        // Largest level not above |v|; the top level also covers |v| >= 2 theta.
        let mut k = c.levels - 1;
        while k > 0 && c.level(t, k) > mag {
            k -= 1;
        }
        let emitted = c.level(t, k).copysign(v);
        on_fire(t, emitted);
        out += emitted;
        v -= emitted;
    }
    out
}

pub fn mt_encode(x: f64, c: &MTConfig) -> Result<SpikeTrain> {
    c.validate()?;
    if !x.is_finite() {
        return Err(Error::NonFinite("mt_encode input".into()));
    }
    let mut s = SpikeTrain::silent(c.steps, 1, 1);
    mt_run(x, c, |t, w| s.fire(t, 0, w));
    Ok(s)
}

/// Encodes every entry of `x` with one MT neuron configuration.
pub fn mt_encode_matrix(x: &Matrix, c: &MTConfig) -> Result<SpikeTrain> {
    c.validate()?;
    check_finite(x, "mt_encode_matrix")?;
    let (rows, cols) = x.shape();
    let mut s = SpikeTrain::silent(c.steps, rows, cols);
    for (j, &v) in x.data().iter().enumerate() {
        mt_run(v, c, |t, w| s.fire(t, j, w));
    }
    Ok(s)
}

/// Pair of MT sub-neurons: entries with `|x| >= theta_nor` are routed to
/// the outlier neuron (`tau = theta_out`), the rest to the normal neuron
/// (`tau = theta_nor`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OATConfig {
    pub theta_nor: f64,
    pub theta_out: f64,
    pub levels: usize,
    pub steps: usize,
}

impl OATConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_nor.is_finite() && self.theta_out.is_finite()) {
            return Err(Error::InvalidConfig("OAT thresholds must be finite".into()));
        }
        if !(self.theta_out > self.theta_nor && self.theta_nor > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "OAT needs theta_out > theta_nor > 0, got {} / {}",
                self.theta_out, self.theta_nor
            )));
        }
        self.normal().validate()
    }

    pub fn normal(&self) -> MTConfig {
        MTConfig {
            tau: self.theta_nor,
            levels: self.levels,
            steps: self.steps,
        }
    }

    pub fn outlier(&self) -> MTConfig {
        MTConfig {
            tau: self.theta_out,
            levels: self.levels,
            steps: self.steps,
        }
    }

    /// Outlier mask `M_out` for one value.
    #[inline]
    pub fn is_outlier(&self, x: f64) -> bool {
        x.abs() >= self.theta_nor
    }

    /// Upper bound on the reconstruction error of `x` on its routed path.
    pub fn error_bound(&self, x: f64) -> f64 {
        if self.is_outlier(x) {
            self.outlier().error_bound(x)
        } else {
            self.normal().error_bound(x)
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_levels(mut self, levels: usize) -> Self {
        self.levels = levels;
        self
    }
}

pub fn oat_encode(x: &Matrix, c: &OATConfig) -> Result<SpikeTrain> {
    c.validate()?;
    check_finite(x, "oat_encode")?;
    let (rows, cols) = x.shape();
    let normal = c.normal();
    let outlier = c.outlier();
    let mut s = SpikeTrain::silent(c.steps, rows, cols);
    for (j, &v) in x.data().iter().enumerate() {
        let mt = if c.is_outlier(v) { &outlier } else { &normal };
        mt_run(v, mt, |t, w| s.fire(t, j, w));
    }
    Ok(s)
}

/// Bank of FS sub-neurons, sub-neuron `i` owning `[boundaries[i],
/// boundaries[i + 1])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HGConfig {
    pub boundaries: Vec<f64>,
    pub subneurons: Vec<FSParams>,
}

impl HGConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.subneurons.len();
        if n == 0 || self.boundaries.len() != n + 1 {
            return Err(Error::InvalidConfig(format!(
                "HG needs N >= 1 sub-neurons and N + 1 boundaries, got {} and {}",
                n,
                self.boundaries.len()
            )));
        }
        if self.boundaries.iter().any(|b| !b.is_finite())
            || self.boundaries.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::InvalidConfig(
                "HG boundaries must be finite and strictly increasing".into(),
            ));
        }
        let steps = self.subneurons[0].steps();
        for p in &self.subneurons {
            p.validate()?;
            if p.steps() != steps {
                return Err(Error::InvalidConfig(
                    "HG sub-neurons must share one step count".into(),
                ));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.subneurons.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.subneurons.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.subneurons.first().map_or(0, FSParams::steps)
    }

    pub fn lo(&self) -> f64 {
        self.boundaries[0]
    }

    pub fn hi(&self) -> f64 {
        self.boundaries[self.boundaries.len() - 1]
    }

    /// True when `x` lies outside `[lo, hi]` and will be clamped.
    pub fn out_of_range(&self, x: f64) -> bool {
        x < self.lo() || x > self.hi()
    }

    /// Index of the active sub-neuron and the (clamped) input it sees.
    #[inline]
    pub fn route(&self, x: f64) -> (usize, f64) {
        let x = x.clamp(self.lo(), self.hi());
        let n = self.len();
        // Largest i with boundaries[i] <= x, capped at the last range.
        let i = self.boundaries[1..n].partition_point(|b| *b <= x);
        (i, x)
    }

    /// Gate masks `M_{i}` for one input; exactly one entry is set.
    pub fn gate_masks(&self, x: f64) -> Vec<bool> {
        let (active, _) = self.route(x);
        (0..self.len()).map(|i| i == active).collect()
    }

    /// Decoded output for a single input using the first `steps` steps.
    #[inline]
    pub fn eval_steps(&self, x: f64, steps: usize) -> f64 {
        let (i, x) = self.route(x);
        let p = &self.subneurons[i];
        fs_run(local_potential(x, self.boundaries[i], p), p, steps, |_, _| {})
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.eval_steps(x, usize::MAX)
    }
}

pub fn hg_apply(x: &Matrix, c: &HGConfig) -> Result<SpikeTrain> {
    hg_apply_steps(x, c, c.steps())
}

/// HG encoding truncated to the first `steps` timesteps of every
/// sub-neuron.
pub fn hg_apply_steps(x: &Matrix, c: &HGConfig, steps: usize) -> Result<SpikeTrain> {
    c.validate()?;
    check_finite(x, "hg_apply")?;
    let steps = steps.min(c.steps()).max(1);
    let (rows, cols) = x.shape();
    let mut s = SpikeTrain::silent(steps, rows, cols);
    for (j, &v) in x.data().iter().enumerate() {
        let (i, v) = c.route(v);
        let p = &c.subneurons[i];
        fs_run(local_potential(v, c.boundaries[i], p), p, steps, |t, d| {
            s.fire(t, j, d)
        });
    }
    Ok(s)
}

fn check_finite(x: &Matrix, ctx: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{ctx} input")))
    }
}
