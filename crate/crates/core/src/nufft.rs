//! Kaiser-Bessel gridding NUFFT with an exact adjoint, SENSE composites and
//! power-iteration operator norms.
//!
//! The forward transform approximates `Σ_x img(x)·exp(−2πi k·x)` with `x`
//! measured from the grid center (index `n/2` on each axis). Both directions
//! use the same kernel table and the same image-side deapodization, so
//! [`GriddingPlan::adjoint_values`] is the conjugate transpose of
//! [`GriddingPlan::forward_values`] up to rounding.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{norm, GridImage, SensitivityMaps, Shape, C64};
use crate::error::{shape_err, Error, Result};
use crate::fft::FftNd;
use crate::trajectory::Trajectory;

pub const DEFAULT_OVERSAMPLING: f64 = 2.0;
pub const DEFAULT_WIDTH: usize = 4;

const LUT_RES: usize = 4096;
/// Samples per partial grid when spreading; fixed so the reduction order
/// never depends on the thread count.
const SPREAD_CHUNK: usize = 1 << 18;

/// Modified Bessel function of the first kind, order zero (power series).
pub fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= q / (k * k);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
        k += 1.0;
    }
    sum
}

/// Shape parameter minimizing aliasing for a given width and oversampling.
pub fn kaiser_bessel_beta(width: usize, oversampling: f64) -> f64 {
    let w = width as f64;
    let a = oversampling;
    PI * ((w * w / (a * a)) * (a - 0.5).powi(2) - 0.8).sqrt()
}

#[derive(Clone, Debug)]
struct KernelTable {
    half_width: f64,
    table: Vec<f64>,
}

impl KernelTable {
    fn new(width: usize, beta: f64) -> Self {
        let half_width = width as f64 / 2.0;
        let n = (half_width * LUT_RES as f64) as usize + 2;
        let i0b = bessel_i0(beta);
        let table = (0..n)
            .map(|i| {
                let u = i as f64 / LUT_RES as f64;
                let t = u / half_width;
                if t >= 1.0 {
                    0.0
                } else {
                    bessel_i0(beta * (1.0 - t * t).sqrt()) / i0b
                }
            })
            .collect();
        Self { half_width, table }
    }

    #[inline]
    fn eval(&self, u: f64) -> f64 {
        let p = u.abs() * LUT_RES as f64;
        let i = p as usize;
        if i + 1 >= self.table.len() {
            return 0.0;
        }
        let f = p - i as f64;
        self.table[i] * (1.0 - f) + self.table[i + 1] * f
    }
}

/// Precomputed gridding state for one trajectory and image shape.
pub struct GriddingPlan {
    shape: Shape,
    grid: Shape,
    oversampling: f64,
    width: usize,
    beta: f64,
    deapod: Vec<f64>,
    positions: Vec<f64>,
    n_samples: usize,
    kernel: KernelTable,
    fft: FftNd,
}

impl std::fmt::Debug for GriddingPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GriddingPlan")
            .field("shape", &self.shape)
            .field("grid", &self.grid)
            .field("width", &self.width)
            .field("beta", &self.beta)
            .field("n_samples", &self.n_samples)
            .finish()
    }
}

/// Builds a plan with the default oversampling (2) and kernel width (4).
pub fn plan(traj: &Trajectory, shape: Shape) -> Result<GriddingPlan> {
    GriddingPlan::with_params(traj, shape, DEFAULT_OVERSAMPLING, DEFAULT_WIDTH)
}

impl GriddingPlan {
    pub fn with_params(traj: &Trajectory, shape: Shape, oversampling: f64, width: usize) -> Result<Self> {
        if traj.dim != shape.ndim() {
            return shape_err(format!(
                "trajectory is {}D but image shape is {}D",
                traj.dim,
                shape.ndim()
            ));
        }
        if oversampling < 1.25 {
            return Err(Error::InvalidParameter("oversampling must be >= 1.25".into()));
        }
        if !(3..=8).contains(&width) {
            return Err(Error::InvalidParameter("kernel width must be in 3..=8".into()));
        }
        if traj.coords.iter().any(|&c| !(-0.5..0.5).contains(&c)) {
            return shape_err("trajectory coordinates outside [-0.5, 0.5)");
        }
        let grid = shape.map(|n| {
            let g = (oversampling * n as f64).ceil() as usize;
            g + (g % 2)
        });
        let beta = kaiser_bessel_beta(width, oversampling);
        let kernel = KernelTable::new(width, beta);

        // deapodization: continuous FT of the kernel at x/G, per axis
        let i0b = bessel_i0(beta);
        let w = width as f64;
        let axis_deapod: Vec<Vec<f64>> = (0..shape.ndim())
            .map(|a| {
                let n = shape.dims()[a];
                let g = grid.dims()[a] as f64;
                (0..n)
                    .map(|i| {
                        let x = i as f64 - (n / 2) as f64;
                        let s = beta * beta - (PI * w * x / g).powi(2);
                        let v = if s > 0.0 {
                            let r = s.sqrt();
                            w * r.sinh() / r
                        } else {
                            let r = (-s).sqrt();
                            w * if r > 0.0 { r.sin() / r } else { 1.0 }
                        };
                        v / i0b
                    })
                    .collect()
            })
            .collect();
        let deapod: Vec<f64> = (0..shape.len())
            .map(|i| {
                let c = shape.coords(i);
                (0..shape.ndim()).map(|a| axis_deapod[a][c[a]]).product()
            })
            .collect();
        if deapod.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::InvalidParameter("deapodization not strictly positive".into()));
        }

        let n_samples = traj.n_samples();
        let mut positions = Vec::with_capacity(n_samples * shape.ndim());
        for (i, &c) in traj.coords.iter().enumerate() {
            let a = i % traj.dim;
            positions.push(c as f64 * grid.dims()[a] as f64);
        }

        Ok(Self {
            shape,
            grid,
            oversampling,
            width,
            beta,
            deapod,
            positions,
            n_samples,
            kernel,
            fft: FftNd::new(grid),
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn grid_shape(&self) -> Shape {
        self.grid
    }

    pub fn oversampling(&self) -> f64 {
        self.oversampling
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn deapodization(&self) -> &[f64] {
        &self.deapod
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Kernel footprint of one sample: first grid index per axis (wrapped)
    /// and weights.
    #[inline]
    fn footprint(&self, j: usize, idx: &mut [[usize; 8]; 3], wts: &mut [[f64; 8]; 3]) {
        let nd = self.shape.ndim();
        let hw = self.kernel.half_width;
        for a in 0..nd {
            let g = self.grid.dims()[a] as i64;
            let kappa = self.positions[j * nd + a];
            let q0 = (kappa - hw).floor() as i64 + 1;
            for t in 0..self.width {
                let q = q0 + t as i64;
                wts[a][t] = self.kernel.eval(kappa - q as f64);
                idx[a][t] = q.rem_euclid(g) as usize;
            }
        }
    }

    /// Deapodize, zero-pad and FFT one image onto the oversampled grid.
    pub(crate) fn to_grid(&self, img: &[C64]) -> Vec<C64> {
        let mut grid = vec![C64::new(0.0, 0.0); self.grid.len()];
        let nd = self.shape.ndim();
        let gs = self.grid.strides();
        for (i, v) in img.iter().enumerate() {
            let c = self.shape.coords(i);
            let mut gi = 0;
            for a in 0..nd {
                let n = self.shape.dims()[a] as i64;
                let g = self.grid.dims()[a] as i64;
                let x = c[a] as i64 - n / 2;
                gi += (x.rem_euclid(g) as usize) * gs[a];
            }
            grid[gi] = v / self.deapod[i];
        }
        self.fft.forward(&mut grid);
        grid
    }

    /// Inverse FFT, crop and deapodize (adjoint of [`Self::to_grid`]).
    fn from_grid(&self, mut grid: Vec<C64>) -> Vec<C64> {
        self.fft.inverse(&mut grid);
        let nd = self.shape.ndim();
        let gs = self.grid.strides();
        (0..self.shape.len())
            .map(|i| {
                let c = self.shape.coords(i);
                let mut gi = 0;
                for a in 0..nd {
                    let n = self.shape.dims()[a] as i64;
                    let g = self.grid.dims()[a] as i64;
                    let x = c[a] as i64 - n / 2;
                    gi += (x.rem_euclid(g) as usize) * gs[a];
                }
                grid[gi] / self.deapod[i]
            })
            .collect()
    }

    /// Interpolates sample `j` from oversampled spectra, one value per grid.
    pub(crate) fn interpolate_one(&self, grids: &[Vec<C64>], j: usize, out: &mut [C64]) {
        let nd = self.shape.ndim();
        let gs = self.grid.strides();
        let w = self.width;
        let mut idx = [[0usize; 8]; 3];
        let mut wts = [[0f64; 8]; 3];
        self.footprint(j, &mut idx, &mut wts);
        out.iter_mut().for_each(|a| *a = C64::new(0.0, 0.0));
        if nd == 2 {
            for ty in 0..w {
                let row = idx[0][ty] * gs[0];
                for tx in 0..w {
                    let gi = row + idx[1][tx];
                    let wt = wts[0][ty] * wts[1][tx];
                    for (o, g) in out.iter_mut().zip(grids) {
                        *o += g[gi] * wt;
                    }
                }
            }
        } else {
            for tz in 0..w {
                for ty in 0..w {
                    let row = idx[0][tz] * gs[0] + idx[1][ty] * gs[1];
                    let wzy = wts[0][tz] * wts[1][ty];
                    for tx in 0..w {
                        let gi = row + idx[2][tx];
                        let wt = wzy * wts[2][tx];
                        for (o, g) in out.iter_mut().zip(grids) {
                            *o += g[gi] * wt;
                        }
                    }
                }
            }
        }
    }

    fn interpolate(&self, grids: &[Vec<C64>]) -> Vec<Vec<C64>> {
        let nc = grids.len();
        let nd = self.shape.ndim();
        let gs = self.grid.strides();
        let w = self.width;
        let mut out = vec![vec![C64::new(0.0, 0.0); self.n_samples]; nc];
        // sample-major pass, parallel over fixed sample blocks
        let block = 4096;
        let results: Vec<(usize, Vec<C64>)> = (0..self.n_samples.div_ceil(block))
            .into_par_iter()
            .map(|b| {
                let start = b * block;
                let end = (start + block).min(self.n_samples);
                let mut vals = vec![C64::new(0.0, 0.0); (end - start) * nc];
                let mut idx = [[0usize; 8]; 3];
                let mut wts = [[0f64; 8]; 3];
                let mut acc = vec![C64::new(0.0, 0.0); nc];
                for j in start..end {
                    self.footprint(j, &mut idx, &mut wts);
                    acc.iter_mut().for_each(|a| *a = C64::new(0.0, 0.0));
                    if nd == 2 {
                        for ty in 0..w {
                            let row = idx[0][ty] * gs[0];
                            let wy = wts[0][ty];
                            for tx in 0..w {
                                let gi = row + idx[1][tx];
                                let wt = wy * wts[1][tx];
                                for (c, g) in grids.iter().enumerate() {
                                    acc[c] += g[gi] * wt;
                                }
                            }
                        }
                    } else {
                        for tz in 0..w {
                            let pz = idx[0][tz] * gs[0];
                            for ty in 0..w {
                                let row = pz + idx[1][ty] * gs[1];
                                let wzy = wts[0][tz] * wts[1][ty];
                                for tx in 0..w {
                                    let gi = row + idx[2][tx];
                                    let wt = wzy * wts[2][tx];
                                    for (c, g) in grids.iter().enumerate() {
                                        acc[c] += g[gi] * wt;
                                    }
                                }
                            }
                        }
                    }
                    let o = (j - start) * nc;
                    vals[o..o + nc].copy_from_slice(&acc);
                }
                (start, vals)
            })
            .collect();
        for (start, vals) in results {
            for (k, chunk) in vals.chunks(nc).enumerate() {
                for c in 0..nc {
                    out[c][start + k] = chunk[c];
                }
            }
        }
        out
    }

    fn spread(&self, samples: &[&[C64]], weights: Option<&[f64]>) -> Vec<Vec<C64>> {
        let nc = samples.len();
        let nd = self.shape.ndim();
        let gs = self.grid.strides();
        let w = self.width;
        let n_chunks = self.n_samples.div_ceil(SPREAD_CHUNK).max(1);
        let partials: Vec<Vec<Vec<C64>>> = (0..n_chunks)
            .into_par_iter()
            .map(|b| {
                let start = b * SPREAD_CHUNK;
                let end = (start + SPREAD_CHUNK).min(self.n_samples);
                let mut grids = vec![vec![C64::new(0.0, 0.0); self.grid.len()]; nc];
                let mut idx = [[0usize; 8]; 3];
                let mut wts = [[0f64; 8]; 3];
                let mut vals = vec![C64::new(0.0, 0.0); nc];
                for j in start..end {
                    let sw = weights.map_or(1.0, |wv| wv[j]);
                    for c in 0..nc {
                        vals[c] = samples[c][j] * sw;
                    }
                    if vals.iter().all(|v| v.re == 0.0 && v.im == 0.0) {
                        continue;
                    }
                    self.footprint(j, &mut idx, &mut wts);
                    if nd == 2 {
                        for ty in 0..w {
                            let row = idx[0][ty] * gs[0];
                            let wy = wts[0][ty];
                            for tx in 0..w {
                                let gi = row + idx[1][tx];
                                let wt = wy * wts[1][tx];
                                for c in 0..nc {
                                    grids[c][gi] += vals[c] * wt;
                                }
                            }
                        }
                    } else {
                        for tz in 0..w {
                            let pz = idx[0][tz] * gs[0];
                            for ty in 0..w {
                                let row = pz + idx[1][ty] * gs[1];
                                let wzy = wts[0][tz] * wts[1][ty];
                                for tx in 0..w {
                                    let gi = row + idx[2][tx];
                                    let wt = wzy * wts[2][tx];
                                    for c in 0..nc {
                                        grids[c][gi] += vals[c] * wt;
                                    }
                                }
                            }
                        }
                    }
                }
                grids
            })
            .collect();
        let mut it = partials.into_iter();
        let mut total = it.next().expect("at least one chunk");
        for part in it {
            for (t, p) in total.iter_mut().zip(part) {
                for (a, b) in t.iter_mut().zip(p) {
                    *a += b;
                }
            }
        }
        total
    }

    /// Forward transform of several images sharing this trajectory.
    pub fn forward_many(&self, imgs: &[Vec<C64>]) -> Vec<Vec<C64>> {
        let grids: Vec<Vec<C64>> = imgs.par_iter().map(|img| self.to_grid(img)).collect();
        self.interpolate(&grids)
    }

    /// Adjoint of [`Self::forward_many`], with optional per-sample weights
    /// applied to every input before spreading.
    pub fn adjoint_many(&self, samples: &[&[C64]], weights: Option<&[f64]>) -> Vec<Vec<C64>> {
        let grids = self.spread(samples, weights);
        grids.into_par_iter().map(|g| self.from_grid(g)).collect()
    }

    pub fn forward_values(&self, img: &[C64]) -> Vec<C64> {
        assert_eq!(img.len(), self.shape.len());
        self.forward_many(std::slice::from_ref(&img.to_vec())).pop().unwrap()
    }

    pub fn adjoint_values(&self, samples: &[C64], weights: Option<&[f64]>) -> Vec<C64> {
        assert_eq!(samples.len(), self.n_samples);
        self.adjoint_many(&[samples], weights).pop().unwrap()
    }

    /// Nonuniform forward transform of an image.
    pub fn forward(&self, img: &GridImage) -> Result<Vec<C64>> {
        if img.shape != self.shape {
            return shape_err(format!(
                "image shape {:?} does not match plan shape {:?}",
                img.shape.dims(),
                self.shape.dims()
            ));
        }
        Ok(self.forward_values(&img.values))
    }

    /// Adjoint transform, optionally pre-weighting the samples by `dcf`.
    pub fn adjoint(&self, samples: &[C64], dcf: Option<&[f64]>, voxel_size: Vec<f64>) -> Result<GridImage> {
        if samples.len() != self.n_samples {
            return shape_err(format!(
                "{} samples for a plan with {}",
                samples.len(),
                self.n_samples
            ));
        }
        if let Some(w) = dcf {
            if w.len() != self.n_samples {
                return shape_err("dcf length does not match sample count");
            }
        }
        GridImage::new(self.shape, voxel_size, self.adjoint_values(samples, dcf))
    }
}

/// Coil-wise forward model: `F(S_i · img)` for every coil.
pub fn sense_forward(plan: &GriddingPlan, maps: &SensitivityMaps, img: &[C64]) -> Result<Vec<Vec<C64>>> {
    if maps.shape != plan.shape() || img.len() != plan.shape().len() {
        return shape_err("sensitivity maps or image do not match the plan shape");
    }
    let coil_imgs: Vec<Vec<C64>> = maps
        .maps
        .iter()
        .map(|m| m.iter().zip(img).map(|(s, v)| s * v).collect())
        .collect();
    Ok(plan.forward_many(&coil_imgs))
}

/// Adjoint of [`sense_forward`]: `Σ_i conj(S_i) · Fᴴ(w · y_i)`.
pub fn sense_adjoint(
    plan: &GriddingPlan,
    maps: &SensitivityMaps,
    samples: &[Vec<C64>],
    weights: Option<&[f64]>,
) -> Result<Vec<C64>> {
    if samples.len() != maps.n_coils() {
        return shape_err(format!(
            "{} coil sample sets for {} coil maps",
            samples.len(),
            maps.n_coils()
        ));
    }
    if maps.shape != plan.shape() {
        return shape_err("sensitivity maps do not match the plan shape");
    }
    if samples.iter().any(|s| s.len() != plan.n_samples()) {
        return shape_err("coil sample count does not match plan");
    }
    let refs: Vec<&[C64]> = samples.iter().map(|s| s.as_slice()).collect();
    let imgs = plan.adjoint_many(&refs, weights);
    let mut out = vec![C64::new(0.0, 0.0); plan.shape().len()];
    for (m, im) in maps.maps.iter().zip(&imgs) {
        for ((o, s), v) in out.iter_mut().zip(m).zip(im) {
            *o += s.conj() * v;
        }
    }
    Ok(out)
}

/// A linear map between flat complex vectors with a matching adjoint.
pub trait LinearOperator: Sync {
    fn domain_len(&self) -> usize;
    fn range_len(&self) -> usize;
    fn forward(&self, x: &[C64]) -> Vec<C64>;
    fn adjoint(&self, y: &[C64]) -> Vec<C64>;
}

/// SENSE operator `y = [w · F S_i x]_i` with coils stacked in the range.
pub struct SenseOperator<'a> {
    pub plan: &'a GriddingPlan,
    pub maps: &'a SensitivityMaps,
    pub weights: Option<&'a [f64]>,
}

impl LinearOperator for SenseOperator<'_> {
    fn domain_len(&self) -> usize {
        self.plan.shape().len()
    }

    fn range_len(&self) -> usize {
        self.plan.n_samples() * self.maps.n_coils()
    }

    fn forward(&self, x: &[C64]) -> Vec<C64> {
        let per_coil = sense_forward(self.plan, self.maps, x).expect("shapes checked at construction");
        let mut out = Vec::with_capacity(self.range_len());
        for mut c in per_coil {
            if let Some(w) = self.weights {
                c.iter_mut().zip(w).for_each(|(v, w)| *v *= *w);
            }
            out.extend(c);
        }
        out
    }

    fn adjoint(&self, y: &[C64]) -> Vec<C64> {
        let n = self.plan.n_samples();
        let coils: Vec<Vec<C64>> = y.chunks(n).map(|c| c.to_vec()).collect();
        sense_adjoint(self.plan, self.maps, &coils, self.weights).expect("shapes checked at construction")
    }
}

/// Power-iteration estimate of the spectral norm `‖A‖₂`. Stops when the
/// relative change drops below 1e-3 or after `iters` iterations. A zero
/// operator returns 0.
pub fn operator_norm(op: &dyn LinearOperator, iters: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<C64> = (0..op.domain_len())
        .map(|_| C64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
        .collect();
    let n0 = norm(&x);
    if n0 == 0.0 {
        return 0.0;
    }
    x.iter_mut().for_each(|v| *v /= n0);
    let mut est = 0.0f64;
    for _ in 0..iters.max(1) {
        let y = op.adjoint(&op.forward(&x));
        let ny = norm(&y);
        if ny == 0.0 {
            return 0.0;
        }
        let new = ny.sqrt();
        x = y.into_iter().map(|v| v / ny).collect();
        let done = est > 0.0 && ((new - est).abs() / new) < 1e-3;
        est = new;
        if done {
            break;
        }
    }
    est
}
