//! Threshold selection for OAT neurons and synthetic-data fitting of HG
//! neurons.
//!
//! Each FS sub-neuron is fitted on `M` uniform samples from its own
//! sub-range. The schedule is fixed: step one carries a constant offset
//! (the local potential always crosses the first threshold, which equals
//! the range width), and the remaining steps read off the binary digits of
//! the position inside the range (`theta = h = width * 2^-t`). Only the
//! output weights `d` are optimised, by cyclic coordinate descent on the
//! mean squared error. Reported errors come from a validation grid ten
//! times denser than the training sample.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neurons::{fs_run, local_potential, FSParams, HGConfig, OATConfig};
use crate::tensors::ActivationStats;

pub const DEFAULT_NORMAL_QUANTILE: f64 = 0.99;
pub const DEFAULT_SAMPLES: usize = 4096;
pub const MIN_SAMPLES: usize = 64;
pub const VALIDATION_FACTOR: usize = 10;
pub const INVSQRT_EPS: f64 = 1e-5;

/// Relative bump applied to `theta_out` when the calibration sample is
/// degenerate.
pub const DEGENERATE_EPS: f64 = 1e-3;
/// Smallest admissible `theta_nor`.
pub const MIN_THETA: f64 = 1e-8;
/// Relative padding of the outer hierarchy boundaries.
pub const HIERARCHY_PAD: f64 = 1e-6;
/// Curvature density floor, as a fraction of its maximum.
pub const CURVATURE_FLOOR: f64 = 0.05;

const CURVATURE_GRID: usize = 4096;
const CD_MAX_SWEEPS: usize = 5000;
const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

/// Nonlinearities an HG neuron can be fitted to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Gelu,
    Silu,
    Exp,
    Reciprocal,
    Square,
    InvSqrt,
}

impl Target {
    pub const ALL: [Target; 6] = [
        Target::Gelu,
        Target::Silu,
        Target::Exp,
        Target::Reciprocal,
        Target::Square,
        Target::InvSqrt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Gelu => "gelu",
            Target::Silu => "silu",
            Target::Exp => "exp",
            Target::Reciprocal => "reciprocal",
            Target::Square => "square",
            Target::InvSqrt => "invsqrt",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Target::Gelu => gelu(x),
            Target::Silu => silu(x),
            Target::Exp => x.exp(),
            Target::Reciprocal => 1.0 / x,
            Target::Square => x * x,
            Target::InvSqrt => 1.0 / (x + INVSQRT_EPS).sqrt(),
        }
    }
}

impl Target {
    /// Upper bound on `|f'|` over `[a, b]`.
    pub fn max_slope(self, a: f64, b: f64) -> f64 {
        match self {
            // Global maxima of |f'|, reached near x = 1.4 and x = 2.4.
            Target::Gelu => 1.129,
            Target::Silu => 1.1,
            Target::Exp => b.exp(),
            Target::Reciprocal => {
                let m = a.abs().min(b.abs());
                if a <= 0.0 && b >= 0.0 {
                    f64::INFINITY
                } else {
                    1.0 / (m * m)
                }
            }
            Target::Square => 2.0 * a.abs().max(b.abs()),
            Target::InvSqrt => 0.5 * (a + INVSQRT_EPS).powf(-1.5),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown target `{s}` (known: {})",
                    Target::ALL.map(Target::name).join(", ")
                ))
            })
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// How a hierarchy's interior boundaries are placed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HierarchyRule {
    /// Equal probability mass of the calibration activations.
    EqualMass,
    /// Equal mass of `sqrt(|f''|)`, which balances the per-range error of
    /// a single-slope approximation.
    #[default]
    Curvature,
}

impl FromStr for HierarchyRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal-mass" => Ok(HierarchyRule::EqualMass),
            "curvature" => Ok(HierarchyRule::Curvature),
            _ => Err(Error::InvalidConfig(format!(
                "unknown hierarchy rule `{s}` (known: equal-mass, curvature)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub target: String,
    pub boundaries: Vec<f64>,
    pub per_subrange_max_abs_err: Vec<f64>,
    pub samples_per_range: usize,
    pub validation_points_per_range: usize,
    pub seed: u64,
    pub fitted: HGConfig,
}

impl CalibrationReport {
    pub fn max_abs_err(&self) -> f64 {
        self.per_subrange_max_abs_err
            .iter()
            .copied()
            .fold(0.0, f64::max)
    }

    /// Per-range error bounds valid for every input, not only grid points.
    ///
    /// A fitted sub-neuron is constant on cells of width `w * 2^-(T-1)`.
    /// When each cell holds a validation point, any input is within one
    /// cell (or one grid step) of a point whose error was measured, so the
    /// measured error plus the slope times that distance bounds it.
    pub fn bounds(&self) -> Result<HgErrorBound> {
        let target: Target = self.target.parse()?;
        let steps = self.fitted.steps() as i32;
        let per_range = self
            .boundaries
            .windows(2)
            .zip(&self.per_subrange_max_abs_err)
            .map(|(w, err)| {
                let width = w[1] - w[0];
                let cell = width * 0.5f64.powi((steps - 1).max(0));
                let grid = width / self.validation_points_per_range as f64;
                err + target.max_slope(w[0], w[1]) * cell.max(grid)
            })
            .collect();
        Ok(HgErrorBound {
            target,
            boundaries: self.boundaries.clone(),
            per_range,
        })
    }

    /// Largest per-range bound from [`CalibrationReport::bounds`].
    pub fn error_bound(&self) -> Result<f64> {
        Ok(self.bounds()?.global())
    }
}

/// Error bounds of a fitted HG neuron, one per sub-range.
#[derive(Clone, Debug, PartialEq)]
pub struct HgErrorBound {
    pub target: Target,
    pub boundaries: Vec<f64>,
    pub per_range: Vec<f64>,
}

impl HgErrorBound {
    pub fn lo(&self) -> f64 {
        self.boundaries[0]
    }

    pub fn hi(&self) -> f64 {
        self.boundaries[self.boundaries.len() - 1]
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo(), self.hi())
    }

    pub fn covers(&self, a: f64, b: f64) -> bool {
        a >= self.lo() && b <= self.hi()
    }

    pub fn global(&self) -> f64 {
        self.per_range.iter().copied().fold(0.0, f64::max)
    }

    /// Largest bound among the ranges meeting `[a, b]` (clamped).
    pub fn over(&self, a: f64, b: f64) -> f64 {
        let (a, b) = (self.clamp(a), self.clamp(b));
        self.boundaries
            .windows(2)
            .zip(&self.per_range)
            .filter(|(w, _)| w[0] <= b && a <= w[1])
            .map(|(_, e)| *e)
            .fold(0.0, f64::max)
    }
}

/// Output of [`select_oat_thresholds`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OatThresholds {
    pub theta_nor: f64,
    pub theta_out: f64,
    /// Set when `theta_out` had to be bumped above `theta_nor`.
    pub degenerate: bool,
}

impl OatThresholds {
    pub fn to_config(self, levels: usize, steps: usize) -> OATConfig {
        OATConfig {
            theta_nor: self.theta_nor,
            theta_out: self.theta_out,
            levels,
            steps,
        }
    }
}

/// Picks OAT thresholds from statistics of `|activation|`: `theta_nor` is
/// the `normal_quantile` percentile and `theta_out` the maximum.
pub fn select_oat_thresholds(abs_stats: &ActivationStats, normal_quantile: f64) -> Result<OatThresholds> {
    if !(normal_quantile > 0.0 && normal_quantile < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "normal quantile {normal_quantile} outside (0, 1)"
        )));
    }
    let q = abs_stats.percentile(normal_quantile).ok_or_else(|| {
        Error::InvalidConfig(format!("stats lack the {normal_quantile} percentile"))
    })?;
    let theta_nor = q.abs().max(MIN_THETA);
    let mut theta_out = abs_stats.max.abs();
    let degenerate = !(theta_out > theta_nor);
    if degenerate {
        warn!("degenerate activation sample: theta_out raised to theta_nor * (1 + {DEGENERATE_EPS})");
        theta_out = theta_nor * (1.0 + DEGENERATE_EPS);
    }
    Ok(OatThresholds {
        theta_nor,
        theta_out,
        degenerate,
    })
}

/// Convenience wrapper computing `|x|` statistics first.
pub fn oat_thresholds_from_sample(values: &[f64], normal_quantile: f64) -> Result<OatThresholds> {
    let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let stats = crate::tensors::stats_of(&abs, &[normal_quantile])?;
    select_oat_thresholds(&stats, normal_quantile)
}

/// Quantiles `i / n` for `i = 0..=n`, the ones [`select_hierarchy`] reads.
pub fn hierarchy_quantiles(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// Boundaries at equal-probability-mass quantiles of the calibration
/// sample. `stats` must carry the quantiles from [`hierarchy_quantiles`].
pub fn select_hierarchy(stats: &ActivationStats, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidConfig("hierarchy needs N >= 1".into()));
    }
    let span = stats.max - stats.min;
    let pad = if span > 0.0 {
        span * HIERARCHY_PAD
    } else {
        stats.max.abs().max(1.0) * HIERARCHY_PAD
    };
    let mut bounds = vec![stats.min - pad];
    for q in hierarchy_quantiles(n).iter().take(n).skip(1) {
        let b = stats.percentile(*q).ok_or_else(|| {
            Error::InvalidConfig(format!("stats lack the {q} quantile needed for N = {n}"))
        })?;
        bounds.push(b);
    }
    bounds.push(stats.max + pad);
    let before = bounds.len();
    bounds.dedup_by(|b, a| *b <= *a);
    if bounds.len() != before {
        warn!(
            "hierarchy collapsed from {} to {} sub-ranges (too few distinct values)",
            before - 1,
            bounds.len() - 1
        );
    }
    Ok(bounds)
}

/// Boundaries that split `[lo, hi]` into `n` ranges of equal
/// `sqrt(|f''|)` mass (floored at [`CURVATURE_FLOOR`] of its peak).
pub fn curvature_boundaries(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidConfig("hierarchy needs N >= 1".into()));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidConfig(format!("invalid range [{lo}, {hi}]")));
    }
    let g = CURVATURE_GRID;
    let h = (hi - lo) / g as f64;
    let xs: Vec<f64> = (0..=g).map(|i| lo + i as f64 * h).collect();
    let fx: Vec<f64> = xs.iter().map(|x| f(*x)).collect();
    if let Some(i) = fx.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("target at x = {}", xs[i])));
    }
    let mut dens = vec![0.0; g + 1];
    for i in 1..g {
        dens[i] = ((fx[i - 1] - 2.0 * fx[i] + fx[i + 1]) / (h * h)).abs().sqrt();
    }
    dens[0] = dens[1];
    dens[g] = dens[g - 1];
    let peak = dens.iter().copied().fold(0.0, f64::max);
    let floor = if peak > 0.0 { peak * CURVATURE_FLOOR } else { 1.0 };
    for d in &mut dens {
        *d = d.max(floor);
    }
    let mut cum = vec![0.0; g + 1];
    for i in 1..=g {
        cum[i] = cum[i - 1] + 0.5 * (dens[i - 1] + dens[i]) * h;
    }
    let total = cum[g];
    let mut bounds = Vec::with_capacity(n + 1);
    bounds.push(lo);
    let mut j = 0;
    for k in 1..n {
        let target = total * k as f64 / n as f64;
        while cum[j + 1] < target {
            j += 1;
        }
        let frac = (target - cum[j]) / (cum[j + 1] - cum[j]);
        bounds.push(xs[j] + frac * h);
    }
    bounds.push(hi);
    bounds.dedup_by(|b, a| *b <= *a);
    Ok(bounds)
}

/// Result of fitting one FS neuron on one range.
#[derive(Clone, Debug, PartialEq)]
pub struct FsFit {
    pub params: FSParams,
    pub max_abs_err: f64,
}

/// Schedule shared by every fitted sub-neuron (see module docs).
pub fn fs_schedule(width: f64, steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|t| if t == 0 { width } else { width * 0.5f64.powi(t as i32) })
        .collect()
}

fn sub_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add((i as u64).wrapping_mul(SEED_STRIDE))
}

/// Fits `d(t)` of an FS neuron owning `[lo, hi)` to `target`.
pub fn fit_fs(
    target: impl Fn(f64) -> f64,
    name: &str,
    lo: f64,
    hi: f64,
    steps: usize,
    samples: usize,
    seed: u64,
) -> Result<FsFit> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidConfig(format!("invalid fit range [{lo}, {hi})")));
    }
    if steps == 0 {
        return Err(Error::InvalidConfig("fit needs T >= 1".into()));
    }
    if samples < MIN_SAMPLES {
        return Err(Error::InvalidConfig(format!(
            "fit needs M >= {MIN_SAMPLES} samples, got {samples}"
        )));
    }
    let width = hi - lo;
    let sched = fs_schedule(width, steps);
    let mut params = FSParams::new(sched.clone(), sched, vec![0.0; steps])?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gram = vec![0.0; steps * steps];
    let mut rhs = vec![0.0; steps];
    let mut patterns = Vec::with_capacity(samples);
    let mut targets = Vec::with_capacity(samples);
    let mut fired = Vec::with_capacity(steps);
    for _ in 0..samples {
        let x = rng.random_range(lo..hi);
        let y = target(x);
        if !y.is_finite() {
            return Err(Error::Fit {
                target: name.to_string(),
                x,
            });
        }
        fired.clear();
        fs_run(local_potential(x, lo, &params), &params, steps, |t, _| fired.push(t));
        for &a in &fired {
            rhs[a] += y;
            for &b in &fired {
                gram[a * steps + b] += 1.0;
            }
        }
        patterns.push(fired.clone());
        targets.push(y);
    }

    // Start from step-wise least squares on the running residual.
    let d = &mut params.d;
    let mut resid = targets.clone();
    for t in 0..steps {
        let (mut num, mut cnt) = (0.0, 0.0);
        for (p, r) in patterns.iter().zip(&resid) {
            if p.contains(&t) {
                num += r;
                cnt += 1.0;
            }
        }
        if cnt > 0.0 {
            d[t] = num / cnt;
            for (p, r) in patterns.iter().zip(resid.iter_mut()) {
                if p.contains(&t) {
                    *r -= d[t];
                }
            }
        }
    }

    let scale = targets.iter().fold(0.0f64, |m, y| m.max(y.abs())).max(f64::MIN_POSITIVE);
    for _ in 0..CD_MAX_SWEEPS {
        let mut max_delta = 0.0f64;
        for t in 0..steps {
            let g_tt = gram[t * steps + t];
            if g_tt == 0.0 {
                continue;
            }
            let cross: f64 = (0..steps)
                .filter(|&s| s != t)
                .map(|s| gram[t * steps + s] * d[s])
                .sum();
            let next = (rhs[t] - cross) / g_tt;
            max_delta = max_delta.max((next - d[t]).abs());
            d[t] = next;
        }
        if max_delta <= 1e-14 * scale {
            break;
        }
    }

    let max_abs_err = validation_error(&target, name, lo, hi, &params, samples * VALIDATION_FACTOR)?;
    Ok(FsFit {
        params,
        max_abs_err,
    })
}

fn validation_error(
    target: &impl Fn(f64) -> f64,
    name: &str,
    lo: f64,
    hi: f64,
    params: &FSParams,
    points: usize,
) -> Result<f64> {
    let step = (hi - lo) / points as f64;
    let mut worst = 0.0f64;
    for k in 0..points {
        let x = lo + k as f64 * step;
        let y = target(x);
        if !y.is_finite() {
            return Err(Error::Fit {
                target: name.to_string(),
                x,
            });
        }
        let approx = fs_run(local_potential(x, lo, params), params, params.steps(), |_, _| {});
        worst = worst.max((approx - y).abs());
    }
    Ok(worst)
}

/// Sizes shared by all sub-range fits of one HG neuron.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub subranges: usize,
    pub steps: usize,
    pub samples: usize,
    pub seed: u64,
}

/// Fits one FS sub-neuron per range of `boundaries`.
pub fn fit_hg_on(target: Target, boundaries: Vec<f64>, settings: &FitSettings) -> Result<CalibrationReport> {
    if boundaries.len() < 2 || boundaries.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidConfig(
            "hierarchy boundaries must be strictly increasing".into(),
        ));
    }
    let fits: Vec<FsFit> = boundaries
        .par_windows(2)
        .enumerate()
        .map(|(i, w)| {
            fit_fs(
                |x| target.eval(x),
                target.name(),
                w[0],
                w[1],
                settings.steps,
                settings.samples,
                sub_seed(settings.seed, i),
            )
        })
        .collect::<Result<_>>()?;
    let fitted = HGConfig {
        boundaries: boundaries.clone(),
        subneurons: fits.iter().map(|f| f.params.clone()).collect(),
    };
    fitted.validate()?;
    Ok(CalibrationReport {
        target: target.name().to_string(),
        boundaries,
        per_subrange_max_abs_err: fits.iter().map(|f| f.max_abs_err).collect(),
        samples_per_range: settings.samples,
        validation_points_per_range: settings.samples * VALIDATION_FACTOR,
        seed: settings.seed,
        fitted,
    })
}

/// Equal-mass hierarchy from activation statistics, then one fit per range.
pub fn fit_hg(target: Target, stats: &ActivationStats, settings: &FitSettings) -> Result<CalibrationReport> {
    let bounds = select_hierarchy(stats, settings.subranges)?;
    fit_hg_on(target, bounds, settings)
}

/// Curvature-balanced hierarchy over `[lo, hi]`, then one fit per range.
pub fn fit_hg_curvature(target: Target, lo: f64, hi: f64, settings: &FitSettings) -> Result<CalibrationReport> {
    let bounds = curvature_boundaries(|x| target.eval(x), lo, hi, settings.subranges)?;
    fit_hg_on(target, bounds, settings)
}

/// Validation-grid error of an HG neuron over `[lo, hi)`, evaluated through
/// the full gating path.
pub fn hg_max_abs_err(c: &HGConfig, target: Target, lo: f64, hi: f64, points: usize) -> f64 {
    let step = (hi - lo) / points as f64;
    (0..points)
        .map(|k| {
            let x = lo + k as f64 * step;
            (c.eval(x) - target.eval(x)).abs()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensors::stats_of;

    fn uniform_sample(lo: f64, hi: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    fn settings(subranges: usize, steps: usize) -> FitSettings {
        FitSettings { subranges, steps, samples: 1024, seed: 7 }
    }

    #[test]
    fn oat_thresholds_uniform() {
        let x = uniform_sample(-1.0, 1.0, 20_000, 1);
        let t = oat_thresholds_from_sample(&x, 0.99).unwrap();
        assert!((t.theta_nor - 0.99).abs() < 0.01);
        assert!((t.theta_out - 1.0).abs() < 1e-3);
        assert!(!t.degenerate);
    }

    #[test]
    fn oat_thresholds_with_outliers() {
        let mut x = uniform_sample(-1.0, 1.0, 9_900, 2);
        x.extend((0..100).map(|i| if i % 2 == 0 { 20.0 } else { -20.0 }));
        let t = oat_thresholds_from_sample(&x, 0.99).unwrap();
        assert_eq!(t.theta_out, 20.0);
        // Exactly 1% outliers puts the 0.99 quantile on the edge of the tail.
        assert!((t.theta_nor - 1.0).abs() < 0.25, "{}", t.theta_nor);
    }

    #[test]
    fn oat_thresholds_degenerate() {
        let t = oat_thresholds_from_sample(&[0.3; 50], 0.99).unwrap();
        assert!(t.degenerate);
        assert!(t.theta_out > t.theta_nor);
        t.to_config(5, 16).validate().unwrap();
        let z = oat_thresholds_from_sample(&[0.0; 10], 0.99).unwrap();
        assert!(z.degenerate && z.theta_nor > 0.0);
    }

    #[test]
    fn oat_quantile_bounds() {
        let s = stats_of(&[1.0, 2.0], &[0.5]).unwrap();
        assert!(select_oat_thresholds(&s, 1.0).is_err());
        assert!(select_oat_thresholds(&s, 0.9).is_err());
    }

    #[test]
    fn single_range_hierarchy() {
        let s = stats_of(&[0.0, 1.0, 2.0], &hierarchy_quantiles(1)).unwrap();
        let b = select_hierarchy(&s, 1).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b[0] < 0.0 && b[1] > 2.0);
    }

    #[test]
    fn uniform_hierarchy_quartiles() {
        let x = uniform_sample(0.0, 1.0, 50_000, 3);
        let s = stats_of(&x, &hierarchy_quantiles(4)).unwrap();
        let b = select_hierarchy(&s, 4).unwrap();
        for (got, want) in b.iter().zip([0.0, 0.25, 0.5, 0.75, 1.0]) {
            assert!((got - want).abs() < 0.01, "{b:?}");
        }
    }

    #[test]
    fn heavy_tail_widens_last_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // Pareto-like tail via inverse transform.
        let x: Vec<f64> = (0..20_000)
            .map(|_| (1.0 - rng.random::<f64>()).powf(-1.0 / 1.5))
            .collect();
        let s = stats_of(&x, &hierarchy_quantiles(4)).unwrap();
        let b = select_hierarchy(&s, 4).unwrap();
        assert!(b[4] - b[3] > 10.0 * (b[1] - b[0]), "{b:?}");
    }

    #[test]
    fn hierarchy_collapses_duplicates() {
        let s = stats_of(&[1.0, 1.0, 1.0, 1.0, 2.0], &hierarchy_quantiles(4)).unwrap();
        let b = select_hierarchy(&s, 4).unwrap();
        assert!(b.len() < 5);
        assert!(b.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_target_fits_exactly() {
        let f = fit_fs(|_| 0.0, "zero", -1.0, 3.0, 8, 256, 1).unwrap();
        assert!(f.params.d.iter().all(|d| *d == 0.0));
        assert_eq!(f.max_abs_err, 0.0);
    }

    #[test]
    fn identity_fit_resolution() {
        // T = 8 leaves 7 binary digits after the offset step, so the
        // minimax piecewise-constant fit of x is within half of 2^-7.
        // Least squares on a random sample lands slightly above that.
        let f = fit_fs(|x| x, "identity", 0.0, 1.0, 8, 4096, 2).unwrap();
        assert!(f.max_abs_err <= 2f64.powi(-8) * 1.15, "{}", f.max_abs_err);
        assert!(f.max_abs_err >= 2f64.powi(-8));
    }

    #[test]
    fn fit_is_reproducible() {
        let a = fit_fs(gelu, "gelu", -1.0, 2.0, 12, 512, 99).unwrap();
        let b = fit_fs(gelu, "gelu", -1.0, 2.0, 12, 512, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_reports_non_finite_target() {
        let err = fit_fs(|x| if x > 0.5 { f64::NAN } else { x }, "bad", 0.0, 1.0, 4, 128, 3).unwrap_err();
        match err {
            Error::Fit { target, x } => {
                assert_eq!(target, "bad");
                assert!(x > 0.5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fit_preconditions() {
        assert!(fit_fs(gelu, "gelu", 1.0, 0.0, 8, 128, 0).is_err());
        assert!(fit_fs(gelu, "gelu", 0.0, 1.0, 8, 1, 0).is_err());
        assert!(fit_fs(gelu, "gelu", 0.0, 1.0, 0, 128, 0).is_err());
    }

    #[test]
    fn single_subrange_matches_plain_fit() {
        let s = settings(1, 10);
        let r = fit_hg_on(Target::Exp, vec![-2.0, 1.0], &s).unwrap();
        let f = fit_fs(f64::exp, "exp", -2.0, 1.0, 10, s.samples, s.seed).unwrap();
        assert_eq!(r.fitted.subneurons[0], f.params);
        assert_eq!(r.per_subrange_max_abs_err[0], f.max_abs_err);
    }

    #[test]
    fn exp_hierarchy_beats_single_range() {
        let x = uniform_sample(-4.0, 2.0, 20_000, 5);
        let one = fit_hg(Target::Exp, &stats_of(&x, &hierarchy_quantiles(1)).unwrap(), &settings(1, 16)).unwrap();
        let four = fit_hg(Target::Exp, &stats_of(&x, &hierarchy_quantiles(4)).unwrap(), &settings(4, 16)).unwrap();
        for e in &four.per_subrange_max_abs_err {
            assert!(*e < one.max_abs_err());
        }
    }

    #[test]
    fn invsqrt_fit_is_finite() {
        let r = fit_hg_curvature(Target::InvSqrt, 0.0, 4.0, &settings(8, 16)).unwrap();
        assert!(r.per_subrange_max_abs_err.iter().all(|e| e.is_finite() && *e >= 0.0));
    }

    #[test]
    fn curvature_boundaries_concentrate_on_bend() {
        let b = curvature_boundaries(f64::exp, -4.0, 2.0, 8).unwrap();
        assert_eq!(b.len(), 9);
        assert_eq!((b[0], b[8]), (-4.0, 2.0));
        assert!(b[8] - b[7] < b[1] - b[0]);
    }

    #[test]
    fn bound_covers_off_grid_points() {
        let r = fit_hg_curvature(Target::Gelu, -3.0, 3.0, &settings(4, 10)).unwrap();
        let bound = r.error_bound().unwrap();
        assert!(bound >= r.max_abs_err());
        let off = hg_max_abs_err(&r.fitted, Target::Gelu, -3.0, 3.0, 99_991);
        assert!(off <= bound, "{off} > {bound}");
    }

    #[test]
    fn target_names_round_trip() {
        for t in Target::ALL {
            assert_eq!(t.name().parse::<Target>().unwrap(), t);
        }
        assert!("tanhh".parse::<Target>().is_err());
        assert_eq!(gelu(0.0), 0.0);
    }
}
