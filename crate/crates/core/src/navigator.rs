//! Respiratory self-navigation from the k-space center, bulk-motion
//! rejection and motion-state binning.

use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::data::{RadialKSpace, Shape, C64};
use crate::error::{param_err, shape_err, Error, Result};
use crate::nufft::GriddingPlan;
use crate::stats::{mad, mean, median, pearson, percentile, percentile_sorted, std_dev};
use crate::trajectory::Trajectory;

/// Per-spoke navigator amplitude with validity and motion-state labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RespiratoryTrace {
    pub times: Vec<f64>,
    /// Expiration-positive amplitude.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    /// `None` for invalid spokes.
    pub state: Vec<Option<usize>>,
    pub n_states: usize,
    /// Peak-to-peak of valid values.
    pub range: f64,
}

impl RespiratoryTrace {
    pub fn from_parts(times: Vec<f64>, values: Vec<f64>, valid: Vec<bool>, state: Vec<Option<usize>>) -> Self {
        let n_states = state.iter().flatten().max().map_or(0, |m| m + 1);
        let range = valid_range(&values, &valid);
        Self { times, values, valid, state, n_states, range }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Spoke indices of state `k`, ascending.
    pub fn spokes_in_state(&self, k: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.state[i] == Some(k)).collect()
    }

    pub fn valid_spokes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.valid[i]).collect()
    }
}

fn valid_range(values: &[f64], valid: &[bool]) -> f64 {
    let (lo, hi) = values
        .iter()
        .zip(valid)
        .filter(|(_, &ok)| ok)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)));
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

/// Magnitude of the first readout sample of every spoke, per coil.
pub fn extract_dc(data: &RadialKSpace) -> Vec<Vec<f64>> {
    (0..data.n_coils)
        .map(|c| (0..data.n_spokes).map(|s| data.sample(c, s, 0).norm() as f64).collect())
        .collect()
}

fn standardize(x: &[f64]) -> Option<Vec<f64>> {
    let m = mean(x);
    let s = std_dev(x);
    if !(s > 1e-12 * m.abs().max(1e-300)) {
        return None;
    }
    Some(x.iter().map(|v| (v - m) / s).collect())
}

/// Fraction of non-DC spectral power inside `band` (Hz).
fn band_power_fraction(x: &[f64], band: (f64, f64), dt: f64) -> f64 {
    let spec = spectrum(x);
    let n = x.len();
    let df = 1.0 / (n as f64 * dt);
    let (mut inside, mut total) = (0.0, 0.0);
    for (q, v) in spec.iter().enumerate().skip(1) {
        let f = q.min(n - q) as f64 * df;
        let p = v.norm_sqr();
        total += p;
        if f >= band.0 && f <= band.1 {
            inside += p;
        }
    }
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}

fn spectrum(x: &[f64]) -> Vec<C64> {
    let mut buf: Vec<C64> = x.iter().map(|&v| C64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

/// Ideal band-pass through the FFT (used only to derive PCA loadings).
fn band_pass(x: &[f64], band: (f64, f64), dt: f64) -> Vec<f64> {
    let n = x.len();
    let mut spec = spectrum(x);
    let df = 1.0 / (n as f64 * dt);
    for (q, v) in spec.iter_mut().enumerate() {
        let f = q.min(n - q) as f64 * df;
        if f < band.0 || f > band.1 {
            *v = C64::new(0.0, 0.0);
        }
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spec);
    spec.iter().map(|v| v.re / n as f64).collect()
}

/// Leading eigenvector of a small symmetric matrix (cyclic Jacobi).
fn leading_eigenvector(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j].powi(2)).sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let best = (0..n).max_by(|&i, &j| m[i][i].total_cmp(&m[j][j])).unwrap_or(0);
    (0..n).map(|k| v[k][best]).collect()
}

/// Coil-combined navigator.
#[derive(Clone, Debug)]
pub struct CombinedNavigator {
    pub series: Vec<f64>,
    /// Set when every coil is constant; `series` is then all zeros.
    pub flat: bool,
    pub kept_coils: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Scores coils by respiratory-band power, keeps those within half of the
/// best, and projects their standardized series on the first principal
/// component. The sign is chosen so the long-dwell extreme is positive.
pub fn combine_channels(dc: &[Vec<f64>], band: (f64, f64), spoke_interval: f64) -> Result<CombinedNavigator> {
    if dc.is_empty() {
        return param_err("at least one coil required");
    }
    let n = dc[0].len();
    if dc.iter().any(|c| c.len() != n) || n < 2 {
        return shape_err("coil series must share a length >= 2");
    }
    if !(spoke_interval > 0.0) || !(band.0 >= 0.0 && band.1 > band.0) {
        return param_err("invalid band or spoke interval");
    }
    let std: Vec<Option<Vec<f64>>> = dc.iter().map(|c| standardize(c)).collect();
    let scores: Vec<f64> = std
        .iter()
        .map(|s| s.as_ref().map_or(0.0, |s| band_power_fraction(s, band, spoke_interval)))
        .collect();
    let best = scores.iter().cloned().fold(0.0, f64::max);
    if std.iter().all(|s| s.is_none()) {
        return Ok(CombinedNavigator { series: vec![0.0; n], flat: true, kept_coils: vec![], scores });
    }
    let kept: Vec<usize> = (0..dc.len())
        .filter(|&c| std[c].is_some() && scores[c] >= 0.5 * best)
        .collect();
    let kept = if kept.is_empty() {
        (0..dc.len()).filter(|&c| std[c].is_some()).collect()
    } else {
        kept
    };
    let filtered: Vec<Vec<f64>> = kept
        .iter()
        .map(|&c| band_pass(std[c].as_ref().unwrap(), band, spoke_interval))
        .collect();
    let k = kept.len();
    let mut cov = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            let v = filtered[i].iter().zip(&filtered[j]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            cov[i][j] = v;
            cov[j][i] = v;
        }
    }
    let load = leading_eigenvector(&cov);
    let mut series = vec![0.0; n];
    for (w, &c) in load.iter().zip(&kept) {
        for (o, v) in series.iter_mut().zip(std[c].as_ref().unwrap()) {
            *o += w * v;
        }
    }
    if let Some(s) = standardize(&series) {
        series = s;
    }
    // orientation from a smoothed copy so noise does not decide the sign
    let smooth = lowpass(&series, band.1.min(0.45 / spoke_interval), spoke_interval).unwrap_or_else(|_| series.clone());
    let mid = 0.5 * (percentile(&smooth, 5.0) + percentile(&smooth, 95.0));
    let above = smooth.iter().filter(|&&v| v > mid).count();
    if 2 * above < n {
        series.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(CombinedNavigator { series, flat: false, kept_coils: kept, scores })
}

fn lowpass_taps(cutoff_hz: f64, dt: f64) -> Vec<f64> {
    let fs = 1.0 / dt;
    let half = ((2.0 * fs / cutoff_hz).round() as usize).max(8);
    let fc = cutoff_hz / fs;
    let len = 2 * half + 1;
    let mut taps: Vec<f64> = (0..len)
        .map(|i| {
            let m = i as f64 - half as f64;
            let sinc = if m == 0.0 { 2.0 * fc } else { (2.0 * std::f64::consts::PI * fc * m).sin() / (std::f64::consts::PI * m) };
            let w = 0.42 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (len - 1) as f64).cos()
                + 0.08 * (4.0 * std::f64::consts::PI * i as f64 / (len - 1) as f64).cos();
            sinc * w
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

fn filter_centered(x: &[f64], taps: &[f64]) -> Vec<f64> {
    let n = x.len();
    let half = taps.len() / 2;
    // odd reflection about the end points keeps constants and ramps intact
    let at = |i: isize| -> f64 {
        if i < 0 {
            let j = ((-i) as usize).min(n - 1);
            2.0 * x[0] - x[j]
        } else if i as usize >= n {
            let j = (2 * (n - 1)).saturating_sub(i as usize);
            2.0 * x[n - 1] - x[j]
        } else {
            x[i as usize]
        }
    };
    (0..n)
        .into_par_iter()
        .map(|i| {
            taps.iter()
                .enumerate()
                .map(|(t, w)| w * at(i as isize + t as isize - half as isize))
                .sum()
        })
        .collect()
}

/// Zero-phase windowed-sinc low-pass (Blackman window, unit DC gain),
/// applied forward then backward.
pub fn lowpass(series: &[f64], cutoff_hz: f64, spoke_interval: f64) -> Result<Vec<f64>> {
    if !(spoke_interval > 0.0) {
        return param_err("spoke interval must be > 0");
    }
    let nyquist = 0.5 / spoke_interval;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return param_err(format!("cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz"));
    }
    if series.len() < 2 {
        return Ok(series.to_vec());
    }
    let taps = lowpass_taps(cutoff_hz, spoke_interval);
    let fwd = filter_centered(series, &taps);
    let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
    rev = filter_centered(&rev, &taps);
    rev.reverse();
    Ok(rev)
}

/// Output of [`reject_bulk`].
#[derive(Clone, Debug)]
pub struct BulkRejection {
    pub valid: Vec<bool>,
    /// Series minus its running baseline.
    pub corrected: Vec<f64>,
    pub baseline: Vec<f64>,
    /// Robust range (97.5th − 2.5th percentile of the corrected series).
    pub robust_range: f64,
}

/// Window length in seconds of the running-median baseline.
pub const BASELINE_WINDOW_S: f64 = 10.0;

fn running_median(x: &[f64], half: usize) -> Vec<f64> {
    let n = x.len();
    let mut window: Vec<f64> = Vec::with_capacity(2 * half + 1);
    let insert = |w: &mut Vec<f64>, v: f64| {
        let p = w.partition_point(|a| a.total_cmp(&v).is_lt());
        w.insert(p, v);
    };
    let remove = |w: &mut Vec<f64>, v: f64| {
        let p = w.partition_point(|a| a.total_cmp(&v).is_lt());
        w.remove(p);
    };
    for &v in &x[..(half + 1).min(n)] {
        insert(&mut window, v);
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(percentile_sorted(&window, 50.0));
        if i + half + 1 < n {
            insert(&mut window, x[i + half + 1]);
        }
        if i >= half {
            remove(&mut window, x[i - half]);
        }
    }
    out
}

/// Flags spokes whose running baseline departs from the typical baseline,
/// or whose baseline-corrected value departs from zero, by more than three
/// robust ranges.
pub fn reject_bulk(series: &[f64], spoke_interval: f64) -> Result<BulkRejection> {
    if series.len() < 100 {
        return param_err(format!("bulk rejection needs >= 100 samples, got {}", series.len()));
    }
    if !(spoke_interval > 0.0) {
        return param_err("spoke interval must be > 0");
    }
    let half = ((BASELINE_WINDOW_S / spoke_interval / 2.0).round() as usize).clamp(1, series.len() / 2);
    let baseline = running_median(series, half);
    let corrected: Vec<f64> = series.iter().zip(&baseline).map(|(x, b)| x - b).collect();
    let robust_range = percentile(&corrected, 97.5) - percentile(&corrected, 2.5);
    let reference = median(&baseline);
    let limit = 3.0 * robust_range;
    let valid = baseline
        .iter()
        .zip(&corrected)
        .map(|(b, c)| (b - reference).abs() <= limit && c.abs() <= limit)
        .collect();
    Ok(BulkRejection { valid, corrected, baseline, robust_range })
}

/// Equal-count amplitude binning of valid spokes; state 0 holds the largest
/// (most expiratory) values.
pub fn bin_states(times: &[f64], values: &[f64], valid: &[bool], m: usize) -> Result<RespiratoryTrace> {
    if values.len() != valid.len() || times.len() != values.len() {
        return shape_err("times, values and validity flags must align");
    }
    if m == 0 {
        return param_err("state count must be >= 1");
    }
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| valid[i]).collect();
    let n = idx.len();
    if n < m {
        return Err(Error::InvalidParameter(format!("{m} states requested but only {n} valid spokes")));
    }
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut state = vec![None; values.len()];
    for k in 0..m {
        for &i in &idx[k * n / m..(k + 1) * n / m] {
            state[i] = Some(k);
        }
    }
    let mut trace = RespiratoryTrace::from_parts(times.to_vec(), values.to_vec(), valid.to_vec(), state);
    trace.n_states = m;
    Ok(trace)
}

/// Suggested state count: motion range over coarse voxel size, rounded up
/// and clamped to `[2, 12]`.
pub fn recommend_states(motion_range_mm: f64, coarse_voxel_mm: f64) -> usize {
    if !(coarse_voxel_mm > 0.0) || !(motion_range_mm > 0.0) {
        return 2;
    }
    ((motion_range_mm / coarse_voxel_mm).ceil() as usize).clamp(2, 12)
}

/// Defaults for the navigator chain.
#[derive(Clone, Debug, PartialEq)]
pub struct NavigatorConfig {
    pub band: (f64, f64),
    pub cutoff_hz: f64,
}

impl Default for NavigatorConfig {
    fn default() -> Self {
        Self { band: (0.1, 1.0), cutoff_hz: 1.0 }
    }
}

/// Combined, filtered navigator with bulk rejection applied.
#[derive(Clone, Debug)]
pub struct NavigatorOutput {
    pub combined: CombinedNavigator,
    pub filtered: Vec<f64>,
    pub bulk: BulkRejection,
}

/// DC extraction, coil combination, low-pass and bulk rejection.
pub fn run_navigator(data: &RadialKSpace, cfg: &NavigatorConfig) -> Result<NavigatorOutput> {
    let dt = data.spoke_interval();
    let dc = extract_dc(data);
    let combined = combine_channels(&dc, cfg.band, dt)?;
    if combined.flat {
        return Err(Error::Degenerate("navigator is flat on every coil".into()));
    }
    let filtered = lowpass(&combined.series, cfg.cutoff_hz, dt)?;
    let bulk = reject_bulk(&filtered, dt)?;
    Ok(NavigatorOutput { combined, filtered, bulk })
}

/// Result of [`image_navigator`].
#[derive(Clone, Debug)]
pub struct ImageNavigator {
    /// First spoke of every window; windows are contiguous and
    /// non-overlapping.
    pub window_starts: Vec<usize>,
    pub window_len: usize,
    pub correlations: Vec<f64>,
    pub flagged: Vec<bool>,
    /// RSS magnitude image per window on `coarse_shape`.
    pub images: Vec<Vec<f64>>,
    pub coarse_shape: Shape,
}

impl ImageNavigator {
    /// Per-spoke flags (spokes after the last full window inherit its flag).
    pub fn spoke_flags(&self, n_spokes: usize) -> Vec<bool> {
        (0..n_spokes)
            .map(|s| {
                let w = (s / self.window_len).min(self.flagged.len() - 1);
                self.flagged[w]
            })
            .collect()
    }
}

/// Coarse window reconstructions correlated against the first window;
/// windows more than three MADs below the median correlation are flagged.
pub fn image_navigator(
    data: &RadialKSpace,
    traj: &Trajectory,
    window_s: f64,
    native_shape: Shape,
    coarse_shape: Shape,
) -> Result<ImageNavigator> {
    if coarse_shape.dims().iter().any(|&d| d > 32) || coarse_shape.ndim() != native_shape.ndim() {
        return shape_err("coarse navigator shape must have <= 32 voxels per axis and match dimensionality");
    }
    let dt = data.spoke_interval();
    let window_len = if dt > 0.0 { (window_s / dt).round() as usize } else { 0 };
    if window_len < 50 {
        return param_err(format!("window covers {window_len} spokes; at least 50 required"));
    }
    let n_windows = data.n_spokes / window_len;
    if n_windows < 2 {
        return param_err("need at least two navigator windows");
    }
    let factor = native_shape.dims()[0] as f64 / coarse_shape.dims()[0] as f64;
    let (coarse_traj, n_keep) = traj.rescaled(factor);
    let images: Vec<Vec<f64>> = (0..n_windows)
        .into_par_iter()
        .map(|w| -> Result<Vec<f64>> {
            let spokes: Vec<usize> = (w * window_len..(w + 1) * window_len).collect();
            let sub = coarse_traj.select(&spokes, n_keep);
            let plan = GriddingPlan::with_params(&sub, coarse_shape, 2.0, 4)?;
            let mut rss = vec![0.0; coarse_shape.len()];
            for c in 0..data.n_coils {
                let y = data.coil_subset(c, &spokes, n_keep);
                let img = plan.adjoint_values(&y, Some(&sub.dcf));
                for (r, v) in rss.iter_mut().zip(&img) {
                    *r += v.norm_sqr();
                }
            }
            Ok(rss.into_iter().map(f64::sqrt).collect())
        })
        .collect::<Result<_>>()?;
    let correlations: Vec<f64> = images.iter().map(|im| pearson(&images[0], im).unwrap_or(0.0)).collect();
    let med = median(&correlations);
    let spread = mad(&correlations).max(1e-3);
    let flagged = correlations.iter().map(|&c| c < med - 3.0 * spread).collect();
    Ok(ImageNavigator {
        window_starts: (0..n_windows).map(|w| w * window_len).collect(),
        window_len,
        correlations,
        flagged,
        images,
        coarse_shape,
    })
}
