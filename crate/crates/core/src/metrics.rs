//! Image-quality and motion-field metrics. Image metrics act on magnitudes.

use std::fmt::Write as _;

use crate::data::{GridImage, MotionField, C64};
use crate::error::{param_err, shape_err, Result};
use crate::phantom::{PhantomGroundTruth, AIRWAY, AORTA, LIVER, LUNG};
use crate::stats::{mean, pearson, std_dev};

pub const REPORT_HEADER: &str = "method,MD,aSNR_airway,aSNR_parenchyma,aSNR_aorta,CNR_par_air,CNR_aorta_air";

/// Named voxel masks used by the image metrics.
#[derive(Clone, Debug)]
pub struct RoiSet {
    pub airway: Vec<bool>,
    pub parenchyma: Vec<bool>,
    pub aorta: Vec<bool>,
    pub liver: Vec<bool>,
    pub background: Vec<bool>,
}

impl RoiSet {
    /// ROIs from the reference labels. Tissue masks are eroded by one voxel
    /// when that leaves them non-empty; the background keeps `margin`
    /// voxels from the body.
    pub fn from_phantom(gt: &PhantomGroundTruth, margin: usize) -> Result<Self> {
        let shape = gt.shape();
        let erode = |m: Vec<bool>| {
            let e = erode(shape, &m);
            if e.iter().any(|&v| v) {
                e
            } else {
                m
            }
        };
        let set = RoiSet {
            airway: erode(gt.mask(AIRWAY)),
            parenchyma: erode(gt.mask(LUNG)),
            aorta: erode(gt.mask(AORTA)),
            liver: erode(gt.mask(LIVER)),
            background: gt.background_mask(margin),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.background.len();
        let all = [&self.airway, &self.parenchyma, &self.aorta, &self.liver, &self.background];
        if all.iter().any(|m| m.len() != n) {
            return shape_err("ROI masks differ in length");
        }
        if all.iter().any(|m| !m.iter().any(|&v| v)) {
            return param_err("every ROI must be non-empty");
        }
        for m in &all[..4] {
            if m.iter().zip(&self.background).any(|(&a, &b)| a && b) {
                return param_err("background overlaps a tissue ROI");
            }
        }
        Ok(())
    }
}

fn erode(shape: crate::data::Shape, m: &[bool]) -> Vec<bool> {
    (0..shape.len())
        .map(|i| {
            if !m[i] {
                return false;
            }
            let c = shape.coords(i);
            (0..shape.ndim()).all(|a| {
                let n = shape.dims()[a];
                let st = shape.strides()[a];
                c[a] > 0 && c[a] + 1 < n && m[i - st] && m[i + st]
            })
        })
        .collect()
}

fn masked(mag: &[f64], mask: &[bool]) -> Vec<f64> {
    mag.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect()
}

fn check_mask(img: &GridImage, mask: &[bool]) -> Result<()> {
    if mask.len() != img.values.len() {
        return shape_err("mask length does not match image");
    }
    if !mask.iter().any(|&v| v) {
        return param_err("mask is empty");
    }
    Ok(())
}

/// Mean over lines of the largest absolute forward difference of magnitude
/// along the line, divided by the mean liver magnitude.
pub fn max_derivative(img: &GridImage, lines: &[Vec<usize>], liver: &[bool]) -> Result<f64> {
    if lines.is_empty() {
        return param_err("no profile lines");
    }
    check_mask(img, liver)?;
    let mag = img.magnitude();
    let liver_mean = mean(&masked(&mag, liver));
    if !(liver_mean > 0.0) {
        return param_err("liver mean magnitude is zero");
    }
    let mut total = 0.0;
    for line in lines {
        if line.iter().any(|&i| i >= mag.len()) {
            return shape_err("profile line index out of range");
        }
        let md = line.windows(2).map(|w| (mag[w[1]] - mag[w[0]]).abs()).fold(0.0, f64::max);
        total += md / liver_mean;
    }
    Ok(total / lines.len() as f64)
}

/// Mean ROI magnitude over background standard deviation; infinite when
/// the background has no spread.
pub fn asnr(img: &GridImage, roi: &[bool], background: &[bool]) -> Result<f64> {
    check_mask(img, roi)?;
    check_mask(img, background)?;
    let mag = img.magnitude();
    let s = std_dev(&masked(&mag, background));
    let m = mean(&masked(&mag, roi));
    Ok(if s > 0.0 { m / s } else { f64::INFINITY })
}

/// Absolute difference of ROI means over background standard deviation.
pub fn cnr(img: &GridImage, roi_a: &[bool], roi_b: &[bool], background: &[bool]) -> Result<f64> {
    check_mask(img, roi_a)?;
    check_mask(img, roi_b)?;
    check_mask(img, background)?;
    let mag = img.magnitude();
    let s = std_dev(&masked(&mag, background));
    let d = (mean(&masked(&mag, roi_a)) - mean(&masked(&mag, roi_b))).abs();
    Ok(if s > 0.0 { d / s } else if d == 0.0 { 0.0 } else { f64::INFINITY })
}

/// Root mean square difference of magnitudes.
pub fn rmse(a: &GridImage, b: &GridImage) -> Result<f64> {
    if a.shape != b.shape {
        return shape_err("images differ in shape");
    }
    let n = a.values.len() as f64;
    Ok((a.values.iter().zip(&b.values).map(|(x, y)| (x.norm() - y.norm()).powi(2)).sum::<f64>() / n).sqrt())
}

/// `‖x − ref‖ / ‖ref‖` on complex values.
pub fn nrmse(x: &[C64], reference: &[C64]) -> f64 {
    let num: f64 = x.iter().zip(reference).map(|(a, b)| (a - b).norm_sqr()).sum();
    let den: f64 = reference.iter().map(|b| b.norm_sqr()).sum();
    (num / den).sqrt()
}

/// Magnitude NRMSE inside `mask` after the least-squares scaling of `img`
/// onto `reference`, so reconstructions with different global scale compare
/// fairly.
pub fn masked_nrmse(img: &GridImage, reference: &GridImage, mask: &[bool]) -> Result<f64> {
    if img.shape != reference.shape {
        return shape_err("images differ in shape");
    }
    check_mask(img, mask)?;
    let a = masked(&img.magnitude(), mask);
    let b = masked(&reference.magnitude(), mask);
    let ab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if bb == 0.0 {
        return param_err("reference is zero inside the mask");
    }
    let s = if aa > 0.0 { ab / aa } else { 0.0 };
    let err: f64 = a.iter().zip(&b).map(|(x, y)| (s * x - y).powi(2)).sum();
    Ok((err / bb).sqrt())
}

fn pooled(u: &MotionField, mask: Option<&[bool]>) -> Vec<f64> {
    let keep = |i: usize| mask.map_or(true, |m| m[i]);
    u.displacement.iter().flat_map(|c| c.iter().enumerate().filter(move |(i, _)| keep(*i)).map(|(_, v)| *v)).collect()
}

fn check_fields(u1: &MotionField, u2: &MotionField, mask: Option<&[bool]>) -> Result<()> {
    if u1.shape != u2.shape {
        return shape_err("fields differ in shape");
    }
    if let Some(m) = mask {
        if m.len() != u1.shape.len() || !m.iter().any(|&v| v) {
            return shape_err("field mask must match the grid and be non-empty");
        }
    }
    Ok(())
}

/// Pearson correlation pooled over voxels and components, optionally inside
/// `mask`.
pub fn field_cc(u1: &MotionField, u2: &MotionField, mask: Option<&[bool]>) -> Result<f64> {
    check_fields(u1, u2, mask)?;
    pearson(&pooled(u1, mask), &pooled(u2, mask)).ok_or_else(|| crate::error::Error::InvalidParameter("field has zero variance".into()))
}

/// Mean over voxels of `sqrt(Σ_components (u1 − u2)² / dim)`.
pub fn field_dist(u1: &MotionField, u2: &MotionField, mask: Option<&[bool]>) -> Result<f64> {
    check_fields(u1, u2, mask)?;
    let nd = u1.shape.ndim();
    let (mut s, mut n) = (0.0, 0.0);
    for i in 0..u1.shape.len() {
        if mask.map_or(true, |m| m[i]) {
            let d: f64 = (0..nd).map(|a| (u1.displacement[a][i] - u2.displacement[a][i]).powi(2)).sum();
            s += (d / nd as f64).sqrt();
            n += 1.0;
        }
    }
    Ok(s / n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub md: f64,
    pub asnr_airway: f64,
    pub asnr_parenchyma: f64,
    pub asnr_aorta: f64,
    pub cnr_par_air: f64,
    pub cnr_aorta_air: f64,
}

pub fn evaluate(method: &str, img: &GridImage, rois: &RoiSet, lines: &[Vec<usize>]) -> Result<MetricRow> {
    Ok(MetricRow {
        method: method.to_string(),
        md: max_derivative(img, lines, &rois.liver)?,
        asnr_airway: asnr(img, &rois.airway, &rois.background)?,
        asnr_parenchyma: asnr(img, &rois.parenchyma, &rois.background)?,
        asnr_aorta: asnr(img, &rois.aorta, &rois.background)?,
        cnr_par_air: cnr(img, &rois.parenchyma, &rois.airway, &rois.background)?,
        cnr_aorta_air: cnr(img, &rois.aorta, &rois.airway, &rois.background)?,
    })
}

/// Metric rows for each named image.
pub fn report(images: &[(String, GridImage)], rois: &RoiSet, lines: &[Vec<usize>]) -> Result<Vec<MetricRow>> {
    if let Some((_, first)) = images.first() {
        if images.iter().any(|(_, i)| i.shape != first.shape) {
            return shape_err("all images must share one shape");
        }
    }
    images.iter().map(|(name, img)| evaluate(name, img, rois, lines)).collect()
}

pub fn report_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.method, r.md, r.asnr_airway, r.asnr_parenchyma, r.asnr_aorta, r.cnr_par_air, r.cnr_aorta_air
        );
    }
    s
}
