//! Deformable lung-like phantom, breathing waveform, coil maps and noisy
//! multi-coil radial acquisition with ground truth.
//!
//! Geometry is defined in normalized coordinates `(Y, X)` in `(−0.5, 0.5)`,
//! `Y` along axis 0 (increasing towards the feet). In 3D the extra
//! anterior-posterior coordinate `Z` runs along axis 1.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{GridImage, MotionField, RadialKSpace, SensitivityMaps, Shape, C64};
use crate::error::{param_err, shape_err, Result};
use crate::nufft::GriddingPlan;
use crate::trajectory::Trajectory;
use crate::warp::warp_values;

pub const BACKGROUND: u8 = 0;
pub const BODY: u8 = 1;
pub const LUNG: u8 = 2;
pub const VESSEL: u8 = 3;
pub const AIRWAY: u8 = 4;
pub const AORTA: u8 = 5;
pub const LIVER: u8 = 6;

const INTENSITY: [f64; 7] = [0.0, 1.0, 0.2, 0.9, 0.02, 0.9, 0.8];

const APEX_Y: f64 = -0.34;
const DOME_Y: f64 = 0.05;

/// Diaphragm boundary height at lateral position `x` (and `z` in 3D).
pub fn diaphragm_y(x: f64, z: f64) -> f64 {
    DOME_Y + 1.2 * x * x + 0.6 * z * z
}

/// Motion weight along the superior-inferior axis: 0 at the lung apex, 1 at
/// and below the diaphragm dome, raised cosine in between.
pub fn motion_weight(y: f64) -> f64 {
    if y <= APEX_Y {
        0.0
    } else if y >= DOME_Y {
        1.0
    } else {
        0.5 * (1.0 - (PI * (y - APEX_Y) / (DOME_Y - APEX_Y)).cos())
    }
}

/// Temporary, permanent-if-`duration`-is-`None` offset of the breathing
/// signal, in multiples of the breathing amplitude.
#[derive(Clone, Debug, PartialEq)]
pub struct BulkEvent {
    pub time: f64,
    pub duration: Option<f64>,
    pub offset: f64,
}

/// Rigid translation of the whole object (voxels per axis) over an
/// interval, relative to fixed coils.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftEvent {
    pub time: f64,
    pub duration: f64,
    pub shift: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RespWaveformParams {
    pub period: f64,
    /// Diaphragm excursion in voxels.
    pub amplitude: f64,
    /// Voxels per second.
    pub drift_rate: f64,
    /// Per-cycle fractional period variation (uniform in `±jitter`).
    pub jitter: f64,
    pub bulk_events: Vec<BulkEvent>,
    pub duration: f64,
    pub spoke_interval: f64,
}

impl Default for RespWaveformParams {
    fn default() -> Self {
        Self {
            period: 4.0,
            amplitude: 8.0,
            drift_rate: 0.002,
            jitter: 0.1,
            bulk_events: Vec::new(),
            duration: 300.0,
            spoke_interval: 0.015,
        }
    }
}

impl RespWaveformParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.period > 0.0 && self.duration > 0.0 && self.spoke_interval > 0.0) {
            return param_err("period, duration and spoke interval must be > 0");
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return param_err("jitter must be in [0, 1)");
        }
        Ok(())
    }

    pub fn n_spokes(&self) -> usize {
        (self.duration / self.spoke_interval + 1e-9).floor() as usize
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_spokes()).map(|s| s as f64 * self.spoke_interval).collect()
    }
}

/// Diaphragm displacement (voxels, inferior-positive) per spoke. Each
/// breathing cycle follows `A·((1 − cos 2πφ)/2)²`, which dwells near
/// expiration (0) for about 64% of the cycle.
pub fn make_waveform(params: &RespWaveformParams, seed: u64) -> Result<Vec<f64>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times = params.times();
    let t_end = times.last().copied().unwrap_or(0.0);
    let mut starts = vec![0.0];
    let mut periods = Vec::new();
    while *starts.last().unwrap() <= t_end {
        let p = params.period * (1.0 + params.jitter * rng.gen_range(-1.0..=1.0));
        periods.push(p);
        starts.push(starts.last().unwrap() + p);
    }
    let mut cycle = 0;
    Ok(times
        .iter()
        .map(|&t| {
            while starts[cycle + 1] <= t {
                cycle += 1;
            }
            let phase = (t - starts[cycle]) / periods[cycle];
            let r = 0.5 * (1.0 - (2.0 * PI * phase).cos());
            let mut w = params.amplitude * r * r + params.drift_rate * t;
            for e in &params.bulk_events {
                let active = t >= e.time && e.duration.map_or(true, |d| t < e.time + d);
                if active {
                    w += e.offset * params.amplitude;
                }
            }
            w
        })
        .collect())
}

/// Phantom with labels, coil maps, waveform and motion events.
#[derive(Clone, Debug)]
pub struct PhantomGroundTruth {
    pub reference_image: GridImage,
    pub labels: Vec<u8>,
    pub coil_maps: SensitivityMaps,
    /// Per-spoke diaphragm displacement in voxels.
    pub waveform: Vec<f64>,
    pub times: Vec<f64>,
    pub shift_events: Vec<ShiftEvent>,
    /// Spokes acquired during a bulk or shift event.
    pub corrupted: Vec<bool>,
}

/// Normalized coordinates `(Y, X, Z)` of voxel `i`.
fn norm_coords(shape: Shape, i: usize) -> (f64, f64, f64) {
    let c = shape.coords(i);
    let d = shape.dims();
    let f = |a: usize| (c[a] as f64 - (d[a] / 2) as f64) / d[a] as f64;
    match shape.ndim() {
        2 => (f(0), f(1), 0.0),
        _ => (f(0), f(2), f(1)),
    }
}

struct Disk {
    y: f64,
    x: f64,
    z: f64,
    r: f64,
}

impl Disk {
    /// Inside test with the radius in normalized units per axis.
    fn contains(&self, shape: Shape, y: f64, x: f64, z: f64) -> bool {
        let d = shape.dims();
        let (ny, nx) = (d[0] as f64, d[d.len() - 1] as f64);
        let nz = if shape.ndim() == 3 { d[1] as f64 } else { 1.0 };
        let dy = (y - self.y) * ny;
        let dx = (x - self.x) * nx;
        let dz = (z - self.z) * nz;
        dy * dy + dx * dx + dz * dz <= self.r * self.r
    }
}

fn in_body(y: f64, x: f64, z: f64) -> bool {
    (y / 0.42).powi(2) + (x / 0.38).powi(2) + (z / 0.30).powi(2) <= 1.0
}

fn in_lung_ellipse(y: f64, x: f64, z: f64) -> bool {
    let dy = (y + 0.10) / 0.24;
    let dz = z / 0.20;
    [0.16, -0.16].iter().any(|cx| dy * dy + ((x - cx) / 0.11).powi(2) + dz * dz <= 1.0)
}

fn in_lung(y: f64, x: f64, z: f64) -> bool {
    in_lung_ellipse(y, x, z) && y < diaphragm_y(x, z)
}

/// Builds the phantom with the default vessel layout (seed 0).
pub fn make_phantom(shape: Shape, voxel_size: Vec<f64>) -> Result<PhantomGroundTruth> {
    make_phantom_seeded(shape, voxel_size, 0)
}

/// Builds the phantom; `seed` controls vessel count, sizes and positions.
pub fn make_phantom_seeded(shape: Shape, voxel_size: Vec<f64>, seed: u64) -> Result<PhantomGroundTruth> {
    let min_axis = if shape.ndim() == 2 { 64 } else { 32 };
    if shape.dims().iter().any(|&d| d < min_axis) {
        return shape_err(format!("phantom needs >= {min_axis} voxels per axis, got {:?}", shape.dims()));
    }
    let n0 = shape.dims()[0] as f64;
    let nx = shape.dims()[shape.ndim() - 1] as f64;
    let airway = Disk { y: -0.14, x: -0.17, z: 0.0, r: 4.0 * n0 / 128.0 };
    let aorta = Disk { y: -0.18, x: 0.0, z: 0.0, r: 4.0 * n0 / 128.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_1a9e);
    let n_vessels = rng.gen_range(8..=20);
    let clearance = 14.0 / 128.0;
    let mut vessels: Vec<Disk> = Vec::new();
    let mut attempts = 0;
    while vessels.len() < n_vessels && attempts < 20_000 {
        attempts += 1;
        let r = rng.gen_range(1.0..=4.0) * n0 / 128.0;
        let side = if rng.gen_bool(0.5) { 0.16 } else { -0.16 };
        let y = rng.gen_range(-0.32..0.10);
        let x = side + rng.gen_range(-0.10..0.10);
        let z = if shape.ndim() == 3 { rng.gen_range(-0.15..0.15) } else { 0.0 };
        let rn = r / n0.min(nx);
        let ok_lung = [(0.0, 0.0), (rn, 0.0), (-rn, 0.0), (0.0, rn), (0.0, -rn)]
            .iter()
            .all(|(dy, dx)| in_lung_ellipse(y + dy, x + dx, z));
        let ok_diaphragm = y + rn <= diaphragm_y(x, z) - clearance;
        let sep = |d: &Disk, extra: f64| {
            let dy = (y - d.y) * n0;
            let dx = (x - d.x) * nx;
            (dy * dy + dx * dx).sqrt() >= r + d.r + extra
        };
        if ok_lung && ok_diaphragm && sep(&airway, 3.0) && vessels.iter().all(|v| sep(v, 1.0)) {
            vessels.push(Disk { y, x, z, r });
        }
    }

    let label_at = |y: f64, x: f64, z: f64| {
        if !in_body(y, x, z) {
            BACKGROUND
        } else if airway.contains(shape, y, x, z) {
            AIRWAY
        } else if aorta.contains(shape, y, x, z) {
            AORTA
        } else if in_lung(y, x, z) {
            if vessels.iter().any(|v| v.contains(shape, y, x, z)) {
                VESSEL
            } else {
                LUNG
            }
        } else if y >= diaphragm_y(x, z) {
            LIVER
        } else {
            BODY
        }
    };
    let labels: Vec<u8> = (0..shape.len())
        .map(|i| {
            let (y, x, z) = norm_coords(shape, i);
            label_at(y, x, z)
        })
        .collect();
    // partial-volume intensities from a regular sub-voxel grid
    let d = shape.dims();
    let (dy, dx) = (1.0 / d[0] as f64, 1.0 / d[shape.ndim() - 1] as f64);
    let (ss, dz, zs) = if shape.ndim() == 2 { (4, 0.0, 1) } else { (2, 1.0 / d[1] as f64, 2) };
    let off = |k: usize, n: usize| (k as f64 + 0.5) / n as f64 - 0.5;
    let values: Vec<f64> = (0..shape.len())
        .into_par_iter()
        .map(|i| {
            let (y, x, z) = norm_coords(shape, i);
            let mut acc = 0.0;
            for a in 0..ss {
                for b in 0..ss {
                    for c in 0..zs {
                        let zz = if zs == 1 { z } else { z + off(c, zs) * dz };
                        acc += INTENSITY[label_at(y + off(a, ss) * dy, x + off(b, ss) * dx, zz) as usize];
                    }
                }
            }
            acc / (ss * ss * zs) as f64
        })
        .collect();
    let reference_image = GridImage::from_real(shape, voxel_size, &values)?;
    Ok(PhantomGroundTruth {
        reference_image,
        labels,
        coil_maps: SensitivityMaps::uniform(shape),
        waveform: Vec::new(),
        times: Vec::new(),
        shift_events: Vec::new(),
        corrupted: Vec::new(),
    })
}

/// Analytic displacement for diaphragm excursion `amplitude` (voxels,
/// inferior-positive): `u = −amplitude · s(Y)` along axis 0.
pub fn true_field(shape: Shape, amplitude: f64) -> MotionField {
    let mut f = MotionField::zeros(shape);
    for i in 0..shape.len() {
        let (y, _, _) = norm_coords(shape, i);
        f.displacement[0][i] = -amplitude * motion_weight(y);
    }
    f
}

/// Largest accepted excursion for `shape`.
pub fn max_amplitude(shape: Shape) -> f64 {
    0.25 * shape.dims()[0] as f64
}

/// Warps the reference to the breathing state with diaphragm excursion
/// `amplitude`; returns the image and the exact field used.
pub fn deform(reference: &GridImage, amplitude: f64) -> Result<(GridImage, MotionField)> {
    if !(amplitude.abs() <= max_amplitude(reference.shape)) {
        return param_err(format!(
            "amplitude {amplitude} exceeds 0.25 x axis length ({})",
            max_amplitude(reference.shape)
        ));
    }
    let field = true_field(reference.shape, amplitude);
    let values = warp_values(reference.shape, &reference.values, &field);
    Ok((reference.with_values(values), field))
}

/// Smooth coil profiles around the body perimeter with linear phase,
/// scaled so the RSS never exceeds 1.
pub fn make_coils(shape: Shape, n_coils: usize, seed: u64) -> Result<SensitivityMaps> {
    if n_coils == 0 {
        return param_err("n_coils must be >= 1");
    }
    if n_coils == 1 {
        return Ok(SensitivityMaps::uniform(shape));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc011);
    let offset = rng.gen_range(0.0..2.0 * PI / n_coils as f64);
    let sigma = 0.3;
    let maps: Vec<Vec<C64>> = (0..n_coils)
        .map(|c| {
            let th = offset + 2.0 * PI * c as f64 / n_coils as f64;
            let (cy, cx) = (0.48 * th.cos(), 0.44 * th.sin());
            let ky = rng.gen_range(-0.5..0.5);
            let kx = rng.gen_range(-0.5..0.5);
            let ph0 = rng.gen_range(-PI..PI);
            (0..shape.len())
                .map(|i| {
                    let (y, x, z) = norm_coords(shape, i);
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2) + z * z;
                    let mag = 0.25 + (-d2 / (2.0 * sigma * sigma)).exp();
                    C64::from_polar(mag, ph0 + 2.0 * PI * (ky * y + kx * x))
                })
                .collect()
        })
        .collect();
    let mut s = SensitivityMaps::new(shape, maps)?;
    let peak = s.rss().into_iter().fold(0.0, f64::max);
    for m in s.maps.iter_mut() {
        m.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(s)
}

impl PhantomGroundTruth {
    pub fn shape(&self) -> Shape {
        self.reference_image.shape
    }

    pub fn mask(&self, label: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    pub fn body_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != BACKGROUND).collect()
    }

    /// Out-of-body region at least `margin` voxels from the body and inside
    /// the ellipse (ellipsoid) inscribed in the grid, the field of view a
    /// radial acquisition supports.
    pub fn background_mask(&self, margin: usize) -> Vec<bool> {
        let shape = self.shape();
        let body = self.body_mask();
        let mut grown = body.clone();
        for _ in 0..margin {
            let prev = grown.clone();
            for i in 0..shape.len() {
                if prev[i] {
                    continue;
                }
                let c = shape.coords(i);
                let mut hit = false;
                for a in 0..shape.ndim() {
                    for d in [-1i64, 1] {
                        let v = c[a] as i64 + d;
                        if v >= 0 && (v as usize) < shape.dims()[a] {
                            let mut cc = c;
                            cc[a] = v as usize;
                            hit |= prev[shape.index(&cc)];
                        }
                    }
                }
                grown[i] = hit;
            }
        }
        (0..shape.len())
            .map(|i| {
                let c = shape.coords(i);
                let r2: f64 = (0..shape.ndim())
                    .map(|a| {
                        let h = shape.dims()[a] as f64 / 2.0;
                        ((c[a] as f64 + 0.5 - h) / h).powi(2)
                    })
                    .sum();
                !grown[i] && r2 < 1.0
            })
            .collect()
    }

    pub fn with_coils(mut self, n_coils: usize, seed: u64) -> Result<Self> {
        self.coil_maps = make_coils(self.shape(), n_coils, seed)?;
        Ok(self)
    }

    /// Attaches a waveform; spokes inside bulk or shift events are marked
    /// corrupted.
    pub fn with_waveform(mut self, params: &RespWaveformParams, seed: u64, shifts: Vec<ShiftEvent>) -> Result<Self> {
        for s in &shifts {
            if s.shift.len() != self.shape().ndim() {
                return shape_err("shift event needs one component per axis");
            }
        }
        self.waveform = make_waveform(params, seed)?;
        self.times = params.times();
        let in_event = |t: f64| {
            params
                .bulk_events
                .iter()
                .any(|e| t >= e.time && e.duration.map_or(true, |d| t < e.time + d))
                || shifts.iter().any(|e| t >= e.time && t < e.time + e.duration)
        };
        self.corrupted = self.times.iter().map(|&t| in_event(t)).collect();
        self.shift_events = shifts;
        Ok(self)
    }

    /// Ground-truth image of the state with excursion `amplitude`.
    pub fn state_image(&self, amplitude: f64) -> Result<GridImage> {
        Ok(deform(&self.reference_image, amplitude)?.0)
    }

    /// Vertical profile lines (voxel index paths along axis 0) crossing the
    /// lung-liver interface at ten lateral positions, for a state whose
    /// diaphragm is displaced by `amplitude`.
    pub fn profile_lines(&self, amplitude: f64) -> Vec<Vec<usize>> {
        let shape = self.shape();
        let d = shape.dims();
        let n0 = d[0] as f64;
        let nx = d[shape.ndim() - 1];
        let scale = n0 / 128.0;
        let mut lines = Vec::new();
        for side in [-1.0, 1.0] {
            for x in [0.09, 0.12, 0.15, 0.18, 0.21] {
                let xn = side * x;
                let col = ((xn * nx as f64).round() as i64 + (nx / 2) as i64) as usize;
                let yd = diaphragm_y(xn, 0.0) * n0 + (d[0] / 2) as f64 + amplitude;
                let start = (yd - 10.0 * scale).floor().max(0.0) as usize;
                let end = ((yd + 14.0 * scale).ceil() as usize).min(d[0] - 1);
                let line = (start..=end)
                    .map(|r| {
                        let mut c = [r, col, col];
                        if shape.ndim() == 3 {
                            c[1] = d[1] / 2;
                        }
                        shape.index(&c[..shape.ndim()])
                    })
                    .collect();
                lines.push(line);
            }
        }
        lines
    }
}

/// How the samples were synthesized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SimMethod {
    DirectDft,
    /// Gridding with the given kernel width and oversampling, with motion
    /// states cached at 0.1-voxel amplitude steps and blended linearly.
    Nufft { width: usize, oversampling: f64 },
}

impl fmt::Display for SimMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimMethod::DirectDft => write!(f, "direct-dft"),
            SimMethod::Nufft { width, oversampling } => write!(f, "nufft-w{width}-os{oversampling}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub kspace: RadialKSpace,
    pub method: SimMethod,
}

/// Largest axis simulated by direct summation.
pub const DIRECT_LIMIT: usize = 64;
const LEVEL_STEP: f64 = 0.1;

fn spoke_noise(seed: u64, spoke: usize, n: usize, sigma: f64) -> Vec<C64> {
    if sigma == 0.0 {
        return vec![C64::new(0.0, 0.0); n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(spoke as u64);
    let s = sigma / 2f64.sqrt();
    (0..n)
        .map(|_| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            C64::new(re * s, im * s)
        })
        .collect()
}

/// Uniform translation field moving the object by `shift` voxels.
fn shift_field(shape: Shape, shift: &[f64]) -> MotionField {
    let mut f = MotionField::zeros(shape);
    for (a, s) in shift.iter().enumerate() {
        f.displacement[a].iter_mut().for_each(|v| *v = -s);
    }
    f
}

impl PhantomGroundTruth {
    fn shift_at(&self, t: f64) -> Option<usize> {
        self.shift_events.iter().position(|e| t >= e.time && t < e.time + e.duration)
    }

    fn clamped(&self, a: f64) -> f64 {
        let m = max_amplitude(self.shape());
        a.clamp(-m, m)
    }

    /// Object at excursion `a` (clamped), optionally rigidly shifted.
    fn object(&self, a: f64, shift: Option<usize>) -> Vec<C64> {
        let shape = self.shape();
        let field = true_field(shape, self.clamped(a));
        let img = warp_values(shape, &self.reference_image.values, &field);
        match shift {
            Some(e) => warp_values(shape, &img, &shift_field(shape, &self.shift_events[e].shift)),
            None => img,
        }
    }
}

/// Simulates noisy multi-coil samples of the moving phantom along `traj`.
/// Grids up to 64 voxels per axis use direct summation; larger grids use a
/// width-6 gridding transform (different from the reconstruction's width-4
/// operator).
pub fn simulate_acquisition(gt: &PhantomGroundTruth, traj: &Trajectory, noise_sigma: f64, seed: u64) -> Result<Simulation> {
    let method = if gt.shape().dims().iter().all(|&d| d <= DIRECT_LIMIT) {
        SimMethod::DirectDft
    } else {
        SimMethod::Nufft { width: 6, oversampling: 2.0 }
    };
    simulate_acquisition_using(gt, traj, noise_sigma, seed, method)
}

/// Same as [`simulate_acquisition`] with an explicit synthesis method.
pub fn simulate_acquisition_using(
    gt: &PhantomGroundTruth,
    traj: &Trajectory,
    noise_sigma: f64,
    seed: u64,
    method: SimMethod,
) -> Result<Simulation> {
    if gt.waveform.len() != traj.n_spokes || gt.times.len() != traj.n_spokes {
        return shape_err(format!(
            "waveform has {} entries for {} spokes",
            gt.waveform.len(),
            traj.n_spokes
        ));
    }
    if traj.dim != gt.shape().ndim() {
        return shape_err("trajectory dimensionality differs from phantom");
    }
    if !(noise_sigma >= 0.0) {
        return param_err("noise_sigma must be >= 0");
    }
    let nc = gt.coil_maps.n_coils();
    let nr = traj.n_readout;
    let per_spoke: Vec<Vec<C64>> = match method {
        SimMethod::DirectDft => simulate_direct(gt, traj),
        SimMethod::Nufft { width, oversampling } => simulate_cached(gt, traj, oversampling, width)?,
    };

    let mut samples = vec![Complex32::new(0.0, 0.0); nc * traj.n_spokes * nr];
    for (s, vals) in per_spoke.into_iter().enumerate() {
        let noise = spoke_noise(seed, s, nc * nr, noise_sigma);
        for c in 0..nc {
            for j in 0..nr {
                let v = vals[c * nr + j] + noise[c * nr + j];
                samples[(c * traj.n_spokes + s) * nr + j] = Complex32::new(v.re as f32, v.im as f32);
            }
        }
    }
    let kspace = RadialKSpace::new(
        traj.dim,
        nc,
        traj.n_spokes,
        nr,
        gt.reference_image.voxel_size.clone(),
        samples,
        gt.times.clone(),
    )?;
    Ok(Simulation { kspace, method })
}

/// Exact nonuniform DFT per spoke, `[coil][readout]` flattened. Samples
/// along a spoke are powers of one phasor per voxel.
fn simulate_direct(gt: &PhantomGroundTruth, traj: &Trajectory) -> Vec<Vec<C64>> {
    let shape = gt.shape();
    let nd = shape.ndim();
    let nc = gt.coil_maps.n_coils();
    let nr = traj.n_readout;
    (0..traj.n_spokes)
        .into_par_iter()
        .map(|s| {
            let obj = gt.object(gt.waveform[s], gt.shift_at(gt.times[s]));
            let step = traj.coord(s, 1);
            let mut out = vec![C64::new(0.0, 0.0); nc * nr];
            for (i, v) in obj.iter().enumerate() {
                if v.re == 0.0 && v.im == 0.0 {
                    continue;
                }
                let c = shape.coords(i);
                let mut ph = 0.0;
                for a in 0..nd {
                    ph += step[a] * (c[a] as f64 - (shape.dims()[a] / 2) as f64);
                }
                let z = C64::from_polar(1.0, -2.0 * PI * ph);
                for coil in 0..nc {
                    let mut acc = gt.coil_maps.maps[coil][i] * v;
                    for j in 0..nr {
                        out[coil * nr + j] += acc;
                        acc *= z;
                    }
                }
            }
            out
        })
        .collect()
}

fn simulate_cached(gt: &PhantomGroundTruth, traj: &Trajectory, os: f64, width: usize) -> Result<Vec<Vec<C64>>> {
    let shape = gt.shape();
    let nc = gt.coil_maps.n_coils();
    let nr = traj.n_readout;
    let plan = GriddingPlan::with_params(traj, shape, os, width)?;

    // group spokes by (shift event, amplitude level)
    let mut groups: BTreeMap<(usize, i64), Vec<(usize, f64)>> = BTreeMap::new();
    for s in 0..traj.n_spokes {
        let ev = gt.shift_at(gt.times[s]).map_or(0, |e| e + 1);
        let a = gt.clamped(gt.waveform[s]) / LEVEL_STEP;
        let l = a.floor() as i64;
        groups.entry((ev, l)).or_default().push((s, a - l as f64));
    }
    let mut cache: HashMap<(usize, i64), Arc<Vec<Vec<C64>>>> = HashMap::new();
    let mut out = vec![Vec::new(); traj.n_spokes];
    for (&(ev, l), spokes) in &groups {
        cache.retain(|&(e, lv), _| e == ev && lv >= l);
        let mut level = |lv: i64| -> Arc<Vec<Vec<C64>>> {
            cache
                .entry((ev, lv))
                .or_insert_with(|| {
                    let obj = gt.object(lv as f64 * LEVEL_STEP, ev.checked_sub(1));
                    let grids: Vec<Vec<C64>> = gt
                        .coil_maps
                        .maps
                        .par_iter()
                        .map(|m| {
                            let coil_img: Vec<C64> = m.iter().zip(&obj).map(|(s, v)| s * v).collect();
                            plan.to_grid(&coil_img)
                        })
                        .collect();
                    Arc::new(grids)
                })
                .clone()
        };
        let g0 = level(l);
        let g1 = level(l + 1);
        let vals: Vec<(usize, Vec<C64>)> = spokes
            .par_iter()
            .map(|&(s, f)| {
                let mut v0 = vec![C64::new(0.0, 0.0); nc];
                let mut v1 = vec![C64::new(0.0, 0.0); nc];
                let mut vals = vec![C64::new(0.0, 0.0); nc * nr];
                for j in 0..nr {
                    let idx = s * nr + j;
                    plan.interpolate_one(&g0, idx, &mut v0);
                    plan.interpolate_one(&g1, idx, &mut v1);
                    for c in 0..nc {
                        vals[c * nr + j] = v0[c] * (1.0 - f) + v1[c] * f;
                    }
                }
                (s, vals)
            })
            .collect();
        for (s, v) in vals {
            out[s] = v;
        }
    }
    Ok(out)
}
