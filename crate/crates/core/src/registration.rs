//! Multi-resolution Demons registration between motion-state images.

use rayon::prelude::*;

use crate::data::{GridImage, MotionField, Shape};
use crate::error::{param_err, shape_err, Error, Result};
use crate::filters::{downsample2, gaussian};
use crate::recon::MotionResolvedImages;
use crate::warp::{upsample_field, warp_values};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PyramidSchedule {
    pub levels: usize,
    pub iters_per_level: usize,
    /// Gaussian smoothing of the accumulated field per iteration (voxels).
    pub smoothing_sigma: f64,
}

impl Default for PyramidSchedule {
    fn default() -> Self {
        PyramidSchedule { levels: 4, iters_per_level: 25, smoothing_sigma: 1.5 }
    }
}

impl PyramidSchedule {
    /// Splits `total` iterations evenly across `levels`.
    pub fn with_total(levels: usize, total: usize, sigma: f64) -> Self {
        PyramidSchedule { levels, iters_per_level: (total / levels.max(1)).max(1), smoothing_sigma: sigma }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.iters_per_level == 0 {
            return param_err("pyramid levels and iterations must be >= 1");
        }
        if !(self.smoothing_sigma > 0.0) {
            return param_err("smoothing sigma must be > 0");
        }
        Ok(())
    }
}

/// Central-difference gradient (one-sided at the borders).
fn gradient(shape: Shape, f: &[f64]) -> Vec<Vec<f64>> {
    (0..shape.ndim())
        .map(|a| {
            let n = shape.dims()[a];
            let st = shape.strides()[a];
            (0..shape.len())
                .into_par_iter()
                .map(|i| {
                    let k = (i / st) % n;
                    if n == 1 {
                        0.0
                    } else if k == 0 {
                        f[i + st] - f[i]
                    } else if k == n - 1 {
                        f[i] - f[i - st]
                    } else {
                        0.5 * (f[i + st] - f[i - st])
                    }
                })
                .collect()
        })
        .collect()
}

/// Demons iterations at one resolution, updating `field` in place.
fn iterate(shape: Shape, moving: &[f64], fixed: &[f64], field: &mut MotionField, iters: usize, sigma: f64) {
    let grad = gradient(shape, fixed);
    let nd = shape.ndim();
    for _ in 0..iters {
        let warped = warp_values(shape, moving, field);
        for a in 0..nd {
            let upd: Vec<f64> = (0..shape.len())
                .into_par_iter()
                .map(|i| {
                    let d = warped[i] - fixed[i];
                    let g2: f64 = (0..nd).map(|b| grad[b][i] * grad[b][i]).sum();
                    let den = g2 + d * d;
                    if den > 0.0 {
                        -d * grad[a][i] / den
                    } else {
                        0.0
                    }
                })
                .collect();
            field.displacement[a].iter_mut().zip(upd).for_each(|(u, v)| *u += v);
        }
        for a in 0..nd {
            field.displacement[a] = gaussian(shape, &field.displacement[a], sigma);
        }
    }
}

fn magnitude(img: &GridImage) -> Result<Vec<f64>> {
    if img.values.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
        return Err(Error::InvalidParameter("image contains non-finite values".into()));
    }
    Ok(img.values.iter().map(|v| v.norm()).collect())
}

/// Field `u` such that `moving(x + u(x)) ≈ fixed(x)`, estimated coarse to
/// fine. Levels whose grid would drop below 8 voxels on an axis are
/// skipped.
pub fn demons(moving: &GridImage, fixed: &GridImage, sched: &PyramidSchedule) -> Result<MotionField> {
    sched.validate()?;
    if moving.shape != fixed.shape {
        return shape_err("moving and fixed images differ in shape");
    }
    let m0 = magnitude(moving)?;
    let f0 = magnitude(fixed)?;
    let mut pyramid = vec![(moving.shape, m0, f0)];
    while pyramid.len() < sched.levels {
        let (s, m, f) = pyramid.last().unwrap();
        if s.dims().iter().any(|&d| d.div_ceil(2) < 8) {
            break;
        }
        let (hs, hm) = downsample2(*s, m);
        let (_, hf) = downsample2(*s, f);
        pyramid.push((hs, hm, hf));
    }
    let mut field: Option<MotionField> = None;
    for (shape, m, f) in pyramid.iter().rev() {
        let mut u = match field {
            None => MotionField::zeros(*shape),
            Some(prev) => upsample_field(&prev, *shape)?,
        };
        iterate(*shape, m, f, &mut u, sched.iters_per_level, sched.smoothing_sigma);
        field = Some(u);
    }
    Ok(field.unwrap())
}

/// Registers every state onto `reference`. Magnitudes are scaled jointly
/// to a maximum of 1; the reference field is exactly zero.
pub fn register_all(states: &MotionResolvedImages, reference: usize, sched: &PyramidSchedule) -> Result<Vec<MotionField>> {
    let m = states.m();
    if m == 0 {
        return param_err("no motion states");
    }
    if reference >= m {
        return param_err(format!("reference state {reference} out of range for {m} states"));
    }
    let peak = states
        .images
        .iter()
        .flat_map(|i| i.values.iter().map(|v| v.norm()))
        .fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    let norm: Vec<GridImage> = states
        .images
        .iter()
        .map(|i| i.with_values(i.values.iter().map(|v| crate::data::C64::new(v.norm() * scale, 0.0)).collect()))
        .collect();
    (0..m)
        .into_par_iter()
        .map(|k| {
            if k == reference {
                Ok(MotionField::zeros(states.shape()))
            } else {
                demons(&norm[k], &norm[reference], sched)
            }
        })
        .collect()
}
