//! Shared containers: grid shapes, complex images, motion fields, coil maps,
//! radial k-space and reconstruction settings.

use num_complex::{Complex32, Complex64};

use crate::error::{param_err, shape_err, Result};

pub type C64 = Complex64;

/// Row-major grid shape of two or three axes. Axis 0 is the superior-inferior
/// axis throughout the crate; the last axis is contiguous in memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: [usize; 3],
    ndim: usize,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() != 2 && dims.len() != 3 {
            return shape_err(format!("expected 2 or 3 axes, got {}", dims.len()));
        }
        if dims.iter().any(|&d| d == 0) {
            return shape_err("zero-length axis");
        }
        let mut d = [1usize; 3];
        d[..dims.len()].copy_from_slice(dims);
        Ok(Self { dims: d, ndim: dims.len() })
    }

    pub fn d2(ny: usize, nx: usize) -> Self {
        Self::new(&[ny, nx]).expect("non-zero 2d shape")
    }

    pub fn d3(nz: usize, ny: usize, nx: usize) -> Self {
        Self::new(&[nz, ny, nx]).expect("non-zero 3d shape")
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.ndim
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.ndim]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Element strides, one per axis.
    pub fn strides(&self) -> [usize; 3] {
        let mut s = [0usize; 3];
        let mut acc = 1;
        for a in (0..self.ndim).rev() {
            s[a] = acc;
            acc *= self.dims[a];
        }
        s
    }

    #[inline]
    pub fn coords(&self, mut idx: usize) -> [usize; 3] {
        let mut c = [0usize; 3];
        for a in (0..self.ndim).rev() {
            c[a] = idx % self.dims[a];
            idx /= self.dims[a];
        }
        c
    }

    #[inline]
    pub fn index(&self, c: &[usize]) -> usize {
        let mut idx = 0;
        for a in 0..self.ndim {
            idx = idx * self.dims[a] + c[a];
        }
        idx
    }

    /// Same number of axes with every axis scaled by `f`.
    pub fn map(&self, f: impl Fn(usize) -> usize) -> Self {
        let v: Vec<usize> = self.dims().iter().map(|&d| f(d)).collect();
        Self::new(&v).expect("mapped shape")
    }

    /// Grid used by the motion-resolved reconstruction: `ceil(n / factor)`
    /// rounded up to the next even number on every axis.
    pub fn coarse(&self, factor: f64) -> Self {
        self.map(|d| {
            let c = (d as f64 / factor).ceil() as usize;
            c + (c % 2)
        })
    }
}

/// Complex image on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridImage {
    pub shape: Shape,
    pub voxel_size: Vec<f64>,
    pub values: Vec<C64>,
}

impl GridImage {
    pub fn new(shape: Shape, voxel_size: Vec<f64>, values: Vec<C64>) -> Result<Self> {
        if shape.dims().iter().any(|&d| d < 4) {
            return shape_err(format!("image axes must be >= 4, got {:?}", shape.dims()));
        }
        if voxel_size.len() != shape.ndim() {
            return shape_err("voxel size length does not match dimensionality");
        }
        if values.len() != shape.len() {
            return shape_err(format!(
                "image has {} values for shape {:?}",
                values.len(),
                shape.dims()
            ));
        }
        Ok(Self { shape, voxel_size, values })
    }

    pub fn zeros(shape: Shape, voxel_size: Vec<f64>) -> Result<Self> {
        Self::new(shape, voxel_size, vec![C64::new(0.0, 0.0); shape.len()])
    }

    pub fn from_real(shape: Shape, voxel_size: Vec<f64>, re: &[f64]) -> Result<Self> {
        Self::new(shape, voxel_size, re.iter().map(|&r| C64::new(r, 0.0)).collect())
    }

    pub fn with_values(&self, values: Vec<C64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self { shape: self.shape, voxel_size: self.voxel_size.clone(), values }
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.norm()).collect()
    }

    pub fn dim(&self) -> usize {
        self.shape.ndim()
    }
}

/// Displacement field in voxel units, one component per axis. Warping an image
/// with this field reads `img(x + u(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField {
    pub shape: Shape,
    pub displacement: Vec<Vec<f64>>,
}

impl MotionField {
    pub fn new(shape: Shape, displacement: Vec<Vec<f64>>) -> Result<Self> {
        if displacement.len() != shape.ndim() {
            return shape_err("one displacement component per axis required");
        }
        if displacement.iter().any(|c| c.len() != shape.len()) {
            return shape_err("displacement component length does not match shape");
        }
        if displacement.iter().flatten().any(|v| !v.is_finite()) {
            return param_err("displacement contains non-finite values");
        }
        Ok(Self { shape, displacement })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, displacement: vec![vec![0.0; shape.len()]; shape.ndim()] }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            shape: self.shape,
            displacement: self
                .displacement
                .iter()
                .map(|c| c.iter().map(|v| v * s).collect())
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.displacement.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Per-coil complex receive sensitivities.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMaps {
    pub shape: Shape,
    pub maps: Vec<Vec<C64>>,
}

impl SensitivityMaps {
    pub fn new(shape: Shape, maps: Vec<Vec<C64>>) -> Result<Self> {
        if maps.is_empty() {
            return param_err("at least one coil required");
        }
        if maps.iter().any(|m| m.len() != shape.len()) {
            return shape_err("coil map length does not match shape");
        }
        Ok(Self { shape, maps })
    }

    pub fn uniform(shape: Shape) -> Self {
        Self { shape, maps: vec![vec![C64::new(1.0, 0.0); shape.len()]] }
    }

    pub fn n_coils(&self) -> usize {
        self.maps.len()
    }

    /// Root-sum-of-squares magnitude over coils at every voxel.
    pub fn rss(&self) -> Vec<f64> {
        (0..self.shape.len())
            .map(|i| self.maps.iter().map(|m| m[i].norm_sqr()).sum::<f64>().sqrt())
            .collect()
    }
}

/// Multi-coil samples on a center-out radial trajectory. Readout index 0 of
/// every spoke is the k-space center.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialKSpace {
    pub dim: usize,
    pub n_coils: usize,
    pub n_spokes: usize,
    pub n_readout: usize,
    pub voxel_size: Vec<f64>,
    /// `[coil][spoke][readout]`, flattened.
    pub samples: Vec<Complex32>,
    pub timestamps: Vec<f64>,
}

impl RadialKSpace {
    pub fn new(
        dim: usize,
        n_coils: usize,
        n_spokes: usize,
        n_readout: usize,
        voxel_size: Vec<f64>,
        samples: Vec<Complex32>,
        timestamps: Vec<f64>,
    ) -> Result<Self> {
        let k = Self { dim, n_coils, n_spokes, n_readout, voxel_size, samples, timestamps };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return shape_err(format!("dim must be 2 or 3, got {}", self.dim));
        }
        if self.n_coils == 0 || self.n_spokes == 0 || self.n_readout == 0 {
            return shape_err("empty k-space dataset");
        }
        if self.voxel_size.len() != self.dim {
            return shape_err("voxel size length does not match dim");
        }
        if self.samples.len() != self.n_coils * self.n_spokes * self.n_readout {
            return shape_err("sample array size does not match coils x spokes x readout");
        }
        if self.timestamps.len() != self.n_spokes {
            return shape_err("one timestamp per spoke required");
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return shape_err("timestamps must be strictly increasing");
        }
        Ok(())
    }

    #[inline]
    pub fn sample(&self, coil: usize, spoke: usize, readout: usize) -> Complex32 {
        self.samples[(coil * self.n_spokes + spoke) * self.n_readout + readout]
    }

    /// Samples of one coil for the listed spokes, truncated to the first
    /// `n_keep` readout points, widened to double precision.
    pub fn coil_subset(&self, coil: usize, spokes: &[usize], n_keep: usize) -> Vec<C64> {
        let mut out = Vec::with_capacity(spokes.len() * n_keep);
        for &s in spokes {
            let base = (coil * self.n_spokes + s) * self.n_readout;
            out.extend(
                self.samples[base..base + n_keep]
                    .iter()
                    .map(|v| C64::new(v.re as f64, v.im as f64)),
            );
        }
        out
    }

    /// Mean time between consecutive spokes.
    pub fn spoke_interval(&self) -> f64 {
        if self.n_spokes < 2 {
            return 0.0;
        }
        (self.timestamps[self.n_spokes - 1] - self.timestamps[0]) / (self.n_spokes - 1) as f64
    }
}

/// Reconstruction hyperparameters shared by the motion-resolved and
/// motion-compensated solvers.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconConfig {
    pub n_states: usize,
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub tgv_alpha1: f64,
    pub tgv_alpha0: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub coarse_factor: f64,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            n_states: 8,
            lambda_s: 0.01,
            lambda_t: 0.02,
            tgv_alpha1: 1.0,
            tgv_alpha0: 2.0,
            max_iters: 60,
            tolerance: 1e-4,
            coarse_factor: 1.5,
            seed: 7,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_s, self.lambda_t, self.tgv_alpha1, self.tgv_alpha0];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return param_err("regularization weights must be >= 0");
        }
        if self.n_states == 0 {
            return param_err("n_states must be >= 1");
        }
        if !(self.coarse_factor >= 1.0) {
            return param_err("coarse_factor must be >= 1");
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub(crate) fn norm(a: &[C64]) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}
