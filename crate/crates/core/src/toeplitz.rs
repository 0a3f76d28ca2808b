//! Toeplitz embedding of the weighted normal operator `Fᴴ W² F`, which is a
//! convolution with the trajectory's point-spread function and can be
//! applied with two zero-padded FFTs instead of a NUFFT pair.

use rayon::prelude::*;

use crate::data::{SensitivityMaps, Shape, C64};
use crate::error::{shape_err, Result};
use crate::fft::FftNd;
use crate::nufft::{GriddingPlan, LinearOperator};
use crate::trajectory::Trajectory;

/// Kernel width used to evaluate the point-spread function.
const PSF_WIDTH: usize = 6;

/// Smallest `2^a 3^b 5^c` not below `n`.
fn fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Spectrum of the point-spread function on a circular grid large enough
/// for aliasing-free linear convolution.
pub struct ToeplitzKernel {
    shape: Shape,
    pad: Shape,
    spectrum: Vec<C64>,
    fft: FftNd,
}

impl ToeplitzKernel {
    /// Kernel of `Fᴴ diag(weights_sq) F` for `traj` on `shape`.
    pub fn new(traj: &Trajectory, shape: Shape, weights_sq: &[f64]) -> Result<Self> {
        if weights_sq.len() != traj.n_samples() {
            return shape_err("weight count does not match the trajectory");
        }
        let double = shape.map(|n| 2 * n);
        let plan = GriddingPlan::with_params(traj, double, 2.0, PSF_WIDTH)?;
        let ones: Vec<C64> = weights_sq.iter().map(|&w| C64::new(w, 0.0)).collect();
        // psf(d) = Σ_j w_j² exp(+2πi k_j·d) at d = index − n for the doubled grid
        let psf = plan.adjoint_values(&ones, None);
        let pad = shape.map(|n| fast_len(2 * n - 1));
        let nd = shape.ndim();
        let mut grid = vec![C64::new(0.0, 0.0); pad.len()];
        let ps = pad.strides();
        for (i, v) in psf.iter().enumerate() {
            let c = double.coords(i);
            let mut gi = 0;
            let mut inside = true;
            for a in 0..nd {
                let n = shape.dims()[a] as i64;
                let d = c[a] as i64 - n;
                if d <= -n {
                    inside = false;
                    break;
                }
                gi += (d.rem_euclid(pad.dims()[a] as i64) as usize) * ps[a];
            }
            if inside {
                grid[gi] = *v;
            }
        }
        let fft = FftNd::new(pad);
        fft.forward(&mut grid);
        // the exact psf is Hermitian-symmetric, so its spectrum is real;
        // dropping the imaginary part keeps the operator self-adjoint
        let scale = 1.0 / pad.len() as f64;
        grid.iter_mut().for_each(|v| *v = C64::new(v.re * scale, 0.0));
        Ok(ToeplitzKernel { shape, pad, spectrum: grid, fft })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    fn pad_index(&self, i: usize) -> usize {
        let c = self.shape.coords(i);
        let ps = self.pad.strides();
        (0..self.shape.ndim())
            .map(|a| {
                let x = c[a] as i64 - (self.shape.dims()[a] / 2) as i64;
                (x.rem_euclid(self.pad.dims()[a] as i64) as usize) * ps[a]
            })
            .sum()
    }

    /// `Fᴴ W² F x` for one image.
    pub fn apply(&self, x: &[C64]) -> Vec<C64> {
        let mut g = vec![C64::new(0.0, 0.0); self.pad.len()];
        for (i, v) in x.iter().enumerate() {
            g[self.pad_index(i)] = *v;
        }
        self.fft.forward(&mut g);
        g.iter_mut().zip(&self.spectrum).for_each(|(a, b)| *a *= b);
        self.fft.inverse(&mut g);
        (0..self.shape.len()).map(|i| g[self.pad_index(i)]).collect()
    }
}

/// `Σ_i conj(S_i) · Fᴴ W² F (S_i x)`: the normal operator of weighted SENSE.
pub struct SenseGram {
    pub kernel: ToeplitzKernel,
    pub maps: SensitivityMaps,
}

impl SenseGram {
    pub fn new(traj: &Trajectory, maps: &SensitivityMaps, weights: &[f64]) -> Result<Self> {
        let sq: Vec<f64> = weights.iter().map(|w| w * w).collect();
        Ok(SenseGram { kernel: ToeplitzKernel::new(traj, maps.shape, &sq)?, maps: maps.clone() })
    }
}

impl LinearOperator for SenseGram {
    fn domain_len(&self) -> usize {
        self.maps.shape.len()
    }

    fn range_len(&self) -> usize {
        self.maps.shape.len()
    }

    fn forward(&self, x: &[C64]) -> Vec<C64> {
        let parts: Vec<Vec<C64>> = self
            .maps
            .maps
            .par_iter()
            .map(|m| {
                let coil: Vec<C64> = m.iter().zip(x).map(|(s, v)| s * v).collect();
                let y = self.kernel.apply(&coil);
                m.iter().zip(y).map(|(s, v)| s.conj() * v).collect()
            })
            .collect();
        let mut out = vec![C64::new(0.0, 0.0); x.len()];
        for p in parts {
            out.iter_mut().zip(p).for_each(|(o, v)| *o += v);
        }
        out
    }

    fn adjoint(&self, y: &[C64]) -> Vec<C64> {
        self.forward(y)
    }
}
