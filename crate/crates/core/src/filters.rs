//! Separable smoothing and resampling on regular grids.

use rayon::prelude::*;

use crate::data::{GridImage, Shape, C64};
use crate::error::{shape_err, Result};
use crate::warp::{sample_clamped, Sample};

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// 1D convolution along `axis` with replicated edges.
fn convolve_axis<T: Sample>(shape: Shape, x: &[T], axis: usize, taps: &[f64]) -> Vec<T> {
    let n = shape.dims()[axis] as i64;
    let st = shape.strides()[axis];
    let r = (taps.len() / 2) as i64;
    (0..shape.len())
        .into_par_iter()
        .map(|i| {
            let k = ((i / st) as i64) % n;
            let base = i - k as usize * st;
            let mut acc = T::default();
            for (t, w) in taps.iter().enumerate() {
                let j = (k + t as i64 - r).clamp(0, n - 1) as usize;
                acc = acc + x[base + j * st] * *w;
            }
            acc
        })
        .collect()
}

/// Gaussian smoothing with standard deviation `sigma` voxels on every axis.
/// `sigma <= 0` returns the input unchanged.
pub fn gaussian<T: Sample>(shape: Shape, x: &[T], sigma: f64) -> Vec<T> {
    if sigma <= 0.0 {
        return x.to_vec();
    }
    let taps = gaussian_taps(sigma);
    let mut y = x.to_vec();
    for a in 0..shape.ndim() {
        y = convolve_axis(shape, &y, a, &taps);
    }
    y
}

/// Halved grid (rounding up) used by image pyramids.
pub fn half_shape(shape: Shape) -> Shape {
    shape.map(|d| d.div_ceil(2).max(1))
}

/// Smooths with `sigma = 1` and resamples onto the halved grid using the
/// center-aligned coordinates of [`crate::warp::upsample_field`].
pub fn downsample2(shape: Shape, x: &[f64]) -> (Shape, Vec<f64>) {
    let s = gaussian(shape, x, 1.0);
    let half = half_shape(shape);
    let nd = shape.ndim();
    let v = (0..half.len())
        .map(|i| {
            let c = half.coords(i);
            let mut p = [0.0; 3];
            for a in 0..nd {
                let r = shape.dims()[a] as f64 / half.dims()[a] as f64;
                p[a] = (c[a] as f64 - (half.dims()[a] / 2) as f64) * r + (shape.dims()[a] / 2) as f64;
            }
            sample_clamped(shape, &s, &p)
        })
        .collect();
    (half, v)
}

/// Multilinear resampling of an image onto `target` covering the same field
/// of view (center-aligned, edge-clamped).
pub fn resize_image(img: &GridImage, target: Shape) -> Result<GridImage> {
    let src = img.shape;
    if src.ndim() != target.ndim() {
        return shape_err("dimensionality mismatch");
    }
    if src == target {
        return Ok(img.clone());
    }
    let nd = src.ndim();
    let re: Vec<f64> = img.values.iter().map(|v| v.re).collect();
    let im: Vec<f64> = img.values.iter().map(|v| v.im).collect();
    let values = (0..target.len())
        .into_par_iter()
        .map(|i| {
            let c = target.coords(i);
            let mut p = [0.0; 3];
            for a in 0..nd {
                let r = src.dims()[a] as f64 / target.dims()[a] as f64;
                p[a] = (c[a] as f64 - (target.dims()[a] / 2) as f64) * r + (src.dims()[a] / 2) as f64;
            }
            C64::new(sample_clamped(src, &re, &p), sample_clamped(src, &im, &p))
        })
        .collect();
    let voxel = (0..nd).map(|a| img.voxel_size[a] * src.dims()[a] as f64 / target.dims()[a] as f64).collect();
    GridImage::new(target, voxel, values)
}
