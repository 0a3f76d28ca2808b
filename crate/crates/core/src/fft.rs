//! Unnormalized multi-dimensional FFT on row-major grids.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::data::{Shape, C64};

/// Pre-planned forward and inverse transforms for every axis of a grid.
pub struct FftNd {
    shape: Shape,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl FftNd {
    pub fn new(shape: Shape) -> Self {
        let mut planner = FftPlanner::new();
        let forward = shape.dims().iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inverse = shape.dims().iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        Self { shape, forward, inverse }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// In-place transform with `exp(-2πi qx/n)` kernel. No scaling.
    pub fn forward(&self, data: &mut [C64]) {
        self.run(data, &self.forward);
    }

    /// In-place transform with `exp(+2πi qx/n)` kernel. No scaling, so this
    /// is the exact adjoint of [`FftNd::forward`].
    pub fn inverse(&self, data: &mut [C64]) {
        self.run(data, &self.inverse);
    }

    fn run(&self, data: &mut [C64], plans: &[Arc<dyn Fft<f64>>]) {
        assert_eq!(data.len(), self.shape.len());
        let strides = self.shape.strides();
        for (a, plan) in plans.iter().enumerate() {
            let n = self.shape.dims()[a];
            if n == 1 {
                continue;
            }
            let stride = strides[a];
            if stride == 1 {
                data.par_chunks_mut(n).for_each(|line| {
                    let mut scratch = vec![C64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
                    plan.process_with_scratch(line, &mut scratch);
                });
            } else {
                // Lines along a strided axis: each block of `n * stride` holds
                // `stride` interleaved lines.
                let block = n * stride;
                data.par_chunks_mut(block).for_each(|chunk| {
                    let mut scratch = vec![C64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
                    let mut buf = vec![C64::new(0.0, 0.0); n * stride];
                    // transpose chunk [n][stride] -> [stride][n]
                    for i in 0..n {
                        for j in 0..stride {
                            buf[j * n + i] = chunk[i * stride + j];
                        }
                    }
                    for line in buf.chunks_mut(n) {
                        plan.process_with_scratch(line, &mut scratch);
                    }
                    for i in 0..n {
                        for j in 0..stride {
                            chunk[i * stride + j] = buf[j * n + i];
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn naive_dft(shape: Shape, x: &[C64]) -> Vec<C64> {
        let n = shape.len();
        let mut out = vec![C64::new(0.0, 0.0); n];
        for (q, o) in out.iter_mut().enumerate() {
            let qc = shape.coords(q);
            for (i, v) in x.iter().enumerate() {
                let ic = shape.coords(i);
                let mut ph = 0.0;
                for a in 0..shape.ndim() {
                    ph += (qc[a] * ic[a]) as f64 / shape.dims()[a] as f64;
                }
                *o += v * C64::from_polar(1.0, -2.0 * PI * ph);
            }
        }
        out
    }

    #[test]
    fn matches_naive_dft_2d_and_3d() {
        for shape in [Shape::d2(6, 8), Shape::d3(4, 3, 5)] {
            let x: Vec<C64> = (0..shape.len())
                .map(|i| C64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
                .collect();
            let mut y = x.clone();
            FftNd::new(shape).forward(&mut y);
            let r = naive_dft(shape, &x);
            for (a, b) in y.iter().zip(&r) {
                assert!((a - b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn inverse_is_adjoint() {
        let shape = Shape::d2(8, 6);
        let f = FftNd::new(shape);
        let x: Vec<C64> = (0..48).map(|i| C64::new(i as f64, -(i as f64) * 0.5)).collect();
        let y: Vec<C64> = (0..48).map(|i| C64::new((i as f64).cos(), 1.0)).collect();
        let mut fx = x.clone();
        f.forward(&mut fx);
        let mut fy = y.clone();
        f.inverse(&mut fy);
        let lhs: C64 = fx.iter().zip(&y).map(|(a, b)| a.conj() * b).sum();
        let rhs: C64 = x.iter().zip(&fy).map(|(a, b)| a.conj() * b).sum();
        assert!((lhs - rhs).norm() < 1e-9 * lhs.norm().max(1.0));
    }
}
