//! Backward warping with multilinear interpolation, its exact transpose,
//! field resampling and numerical field inversion.

use std::ops::{Add, Mul};

use rayon::prelude::*;

use crate::data::{GridImage, MotionField, Shape};
use crate::error::{shape_err, Result};

/// Values the interpolator can blend.
pub trait Sample: Copy + Default + Send + Sync + Add<Output = Self> + Mul<f64, Output = Self> {}
impl<T: Copy + Default + Send + Sync + Add<Output = T> + Mul<f64, Output = T>> Sample for T {}

const SCATTER_CHUNK: usize = 1 << 14;
const MAX_BLOCKS: usize = 16;

/// Corner indices and weights of the multilinear stencil at `pos`; corners
/// outside the grid get weight 0 and index 0.
#[inline]
fn stencil(shape: Shape, pos: &[f64; 3], idx: &mut [usize; 8], wts: &mut [f64; 8]) -> usize {
    let nd = shape.ndim();
    let dims = shape.dims();
    let strides = shape.strides();
    let mut base = [0i64; 3];
    let mut frac = [0f64; 3];
    for a in 0..nd {
        let f = pos[a].floor();
        base[a] = f as i64;
        frac[a] = pos[a] - f;
    }
    let n = 1usize << nd;
    for c in 0..n {
        let mut w = 1.0;
        let mut off = 0usize;
        let mut inside = true;
        for a in 0..nd {
            let bit = (c >> (nd - 1 - a)) & 1;
            let i = base[a] + bit as i64;
            if i < 0 || i >= dims[a] as i64 {
                inside = false;
                break;
            }
            w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            off += i as usize * strides[a];
        }
        if inside {
            idx[c] = off;
            wts[c] = w;
        } else {
            idx[c] = 0;
            wts[c] = 0.0;
        }
    }
    n
}

#[inline]
fn sample_pos(shape: Shape, field: &MotionField, i: usize) -> [f64; 3] {
    let c = shape.coords(i);
    let mut p = [0.0; 3];
    for a in 0..shape.ndim() {
        p[a] = c[a] as f64 + field.displacement[a][i];
    }
    p
}

/// `out(x) = img(x + u(x))`, zero outside the grid.
pub fn warp_values<T: Sample>(shape: Shape, img: &[T], field: &MotionField) -> Vec<T> {
    (0..shape.len())
        .into_par_iter()
        .map(|i| {
            let mut idx = [0usize; 8];
            let mut wts = [0f64; 8];
            let n = stencil(shape, &sample_pos(shape, field, i), &mut idx, &mut wts);
            let mut acc = T::default();
            for c in 0..n {
                if wts[c] != 0.0 {
                    acc = acc + img[idx[c]] * wts[c];
                }
            }
            acc
        })
        .collect()
}

/// Transpose of [`warp_values`]: splats every input value with the same
/// weights. Partial sums are formed over fixed voxel blocks and reduced in
/// block order, so the result does not depend on the thread count.
pub fn warp_adjoint_values<T: Sample>(shape: Shape, img: &[T], field: &MotionField) -> Vec<T> {
    let n_vox = shape.len();
    let chunk = SCATTER_CHUNK.max(n_vox.div_ceil(MAX_BLOCKS));
    let n_chunks = n_vox.div_ceil(chunk);
    let partials: Vec<Vec<T>> = (0..n_chunks)
        .into_par_iter()
        .map(|b| {
            let mut out = vec![T::default(); n_vox];
            let mut idx = [0usize; 8];
            let mut wts = [0f64; 8];
            for i in b * chunk..((b + 1) * chunk).min(n_vox) {
                let n = stencil(shape, &sample_pos(shape, field, i), &mut idx, &mut wts);
                for c in 0..n {
                    if wts[c] != 0.0 {
                        out[idx[c]] = out[idx[c]] + img[i] * wts[c];
                    }
                }
            }
            out
        })
        .collect();
    let mut it = partials.into_iter();
    let mut total = it.next().unwrap_or_else(|| vec![T::default(); n_vox]);
    for p in it {
        for (t, v) in total.iter_mut().zip(p) {
            *t = *t + v;
        }
    }
    total
}

fn check(img: &GridImage, field: &MotionField) -> Result<()> {
    if img.shape != field.shape {
        return shape_err(format!(
            "field shape {:?} does not match image shape {:?}",
            field.shape.dims(),
            img.shape.dims()
        ));
    }
    Ok(())
}

/// Backward warp with multilinear interpolation.
pub fn warp(img: &GridImage, field: &MotionField) -> Result<GridImage> {
    check(img, field)?;
    Ok(img.with_values(warp_values(img.shape, &img.values, field)))
}

/// Exact transpose of [`warp`].
pub fn warp_adjoint(img: &GridImage, field: &MotionField) -> Result<GridImage> {
    check(img, field)?;
    Ok(img.with_values(warp_adjoint_values(img.shape, &img.values, field)))
}

/// Reverse-deformation approximation of the adjoint: warp by the negated
/// field.
pub fn warp_reverse(img: &GridImage, field: &MotionField) -> Result<GridImage> {
    check(img, field)?;
    Ok(img.with_values(warp_values(img.shape, &img.values, &field.scaled(-1.0))))
}

/// Multilinear sample of a real array at a fractional position, clamping
/// to the grid (edge extension).
#[inline]
pub(crate) fn sample_clamped(shape: Shape, values: &[f64], pos: &[f64; 3]) -> f64 {
    let mut p = *pos;
    for a in 0..shape.ndim() {
        p[a] = p[a].clamp(0.0, (shape.dims()[a] - 1) as f64);
    }
    let mut idx = [0usize; 8];
    let mut wts = [0f64; 8];
    let n = stencil(shape, &p, &mut idx, &mut wts);
    (0..n).map(|c| values[idx[c]] * wts[c]).sum()
}

/// Resamples a field onto a finer grid covering the same field of view and
/// rescales displacements to the new voxel units.
pub fn upsample_field(field: &MotionField, target: Shape) -> Result<MotionField> {
    let src = field.shape;
    if target.ndim() != src.ndim() {
        return shape_err("target dimensionality differs from field");
    }
    if target.dims().iter().zip(src.dims()).any(|(t, s)| t < s) {
        return shape_err("upsample_field cannot downsample");
    }
    if target == src {
        return Ok(field.clone());
    }
    let nd = src.ndim();
    let ratio: Vec<f64> = (0..nd).map(|a| src.dims()[a] as f64 / target.dims()[a] as f64).collect();
    let displacement = (0..nd)
        .map(|comp| {
            (0..target.len())
                .into_par_iter()
                .map(|i| {
                    let c = target.coords(i);
                    let mut p = [0.0; 3];
                    for a in 0..nd {
                        let centered = c[a] as f64 - (target.dims()[a] / 2) as f64;
                        p[a] = centered * ratio[a] + (src.dims()[a] / 2) as f64;
                    }
                    sample_clamped(src, &field.displacement[comp], &p) / ratio[comp]
                })
                .collect()
        })
        .collect();
    MotionField::new(target, displacement)
}

/// Resamples a field onto a coarser grid over the same field of view.
pub fn downsample_field(field: &MotionField, target: Shape) -> Result<MotionField> {
    let src = field.shape;
    if target.ndim() != src.ndim() {
        return shape_err("target dimensionality differs from field");
    }
    let nd = src.ndim();
    let ratio: Vec<f64> = (0..nd).map(|a| src.dims()[a] as f64 / target.dims()[a] as f64).collect();
    let displacement = (0..nd)
        .map(|comp| {
            (0..target.len())
                .map(|i| {
                    let c = target.coords(i);
                    let mut p = [0.0; 3];
                    for a in 0..nd {
                        let centered = c[a] as f64 - (target.dims()[a] / 2) as f64;
                        p[a] = centered * ratio[a] + (src.dims()[a] / 2) as f64;
                    }
                    sample_clamped(src, &field.displacement[comp], &p) / ratio[comp]
                })
                .collect()
        })
        .collect();
    MotionField::new(target, displacement)
}

/// Numerical inverse `w` of a displacement field, satisfying
/// `w(x) = −u(x + w(x))` by fixed-point iteration.
pub fn invert_field(field: &MotionField, iters: usize) -> MotionField {
    let shape = field.shape;
    let nd = shape.ndim();
    let mut w = field.scaled(-1.0);
    for _ in 0..iters {
        let next: Vec<Vec<f64>> = (0..nd)
            .map(|comp| {
                (0..shape.len())
                    .into_par_iter()
                    .map(|i| {
                        let c = shape.coords(i);
                        let mut p = [0.0; 3];
                        for a in 0..nd {
                            p[a] = c[a] as f64 + w.displacement[a][i];
                        }
                        -sample_clamped(shape, &field.displacement[comp], &p)
                    })
                    .collect()
            })
            .collect();
        w.displacement = next;
    }
    w
}
