//! Motion-compensated reconstruction of a single reference image from all
//! motion states with a second-order TGV penalty, plus the
//! register-and-average baseline.

use crate::data::{GridImage, MotionField, SensitivityMaps, Shape, C64};
use crate::error::{param_err, shape_err, Result};
use crate::metrics::{asnr, RoiSet};
use crate::nufft::{operator_norm, LinearOperator};
use crate::recon::{assemble, gradient_bound, sense_term, MotionResolvedImages, StateData};
use crate::regularizers::{diff_mask, gradient, gradient_adjoint, group_l1, sym_components, sym_gradient, sym_gradient_adjoint};
pub use crate::solver::Compose;
use crate::solver::{Block, DataMode, Embed, FnOperator, Penalty, Problem, SolverOptions, SolverReport};
use crate::stats::median;
use crate::warp::{invert_field, warp, warp_adjoint_values, warp_values};

/// Fixed-point iterations used to invert registered fields.
pub const INVERSE_ITERS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TgvParams {
    /// Weight of `‖∇u − v‖`.
    pub alpha1: f64,
    /// Weight of `‖E v‖`.
    pub alpha0: f64,
}

impl Default for TgvParams {
    fn default() -> Self {
        TgvParams { alpha1: 1.0, alpha0: 2.0 }
    }
}

impl TgvParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 > 0.0 && self.alpha0 > 0.0) {
            return param_err("TGV weights must be > 0");
        }
        Ok(())
    }
}

/// Zeroes each component of `v` where its difference is undefined.
fn mask_field(shape: Shape, v: &[C64]) -> Vec<C64> {
    let n = shape.len();
    let mut out = v.to_vec();
    for a in 0..shape.ndim() {
        let m = diff_mask(shape, a);
        out[a * n..(a + 1) * n].iter_mut().zip(&m).for_each(|(x, &k)| {
            if !k {
                *x = C64::new(0.0, 0.0);
            }
        });
    }
    out
}

/// Gradient with the undefined last entry of each axis replicated from
/// its neighbour, so affine images map to constant fields.
fn extended_gradient(shape: Shape, u: &[C64]) -> Vec<C64> {
    let n = shape.len();
    let mut g = gradient(shape, u);
    for a in 0..shape.ndim() {
        let len = shape.dims()[a];
        let st = shape.strides()[a];
        if len < 2 {
            continue;
        }
        for i in 0..n {
            if (i / st) % len == len - 1 {
                g[a * n + i] = g[a * n + i - st];
            }
        }
    }
    g
}

/// `α1 ‖∇u − M v‖ + α0 ‖E v‖` for a given field `v`.
fn tgv_objective(shape: Shape, g: &[C64], v: &[C64], p: &TgvParams) -> f64 {
    let nd = shape.ndim();
    let mv = mask_field(shape, v);
    let r: Vec<C64> = g.iter().zip(&mv).map(|(a, b)| a - b).collect();
    p.alpha1 * group_l1(&r, nd) + p.alpha0 * group_l1(&sym_gradient(shape, v), sym_components(nd))
}

/// Second-order total generalized variation of `img`, minimizing over the
/// auxiliary field with a primal-dual iteration until the relative change
/// of the field falls below 1e-6 (at most 20000 iterations). Returns the
/// smallest objective visited, which includes `v = 0` (plain TV).
pub fn tgv_value(img: &GridImage, p: &TgvParams) -> Result<f64> {
    p.validate()?;
    if img.values.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
        return param_err("image contains non-finite values");
    }
    let shape = img.shape;
    let n = shape.len();
    let nd = shape.ndim();
    let ns = sym_components(nd);
    let g = gradient(shape, &img.values);
    let op = FnOperator {
        domain: n * nd,
        range: n * (nd + ns),
        fwd: |v: &[C64]| {
            let mut out: Vec<C64> = mask_field(shape, v).into_iter().map(|x| -x).collect();
            out.extend(sym_gradient(shape, v));
            out
        },
        adj: |y: &[C64]| {
            let mut out: Vec<C64> = mask_field(shape, &y[..n * nd]).into_iter().map(|x| -x).collect();
            let e = sym_gradient_adjoint(shape, &y[n * nd..]);
            out.iter_mut().zip(e).for_each(|(a, b)| *a += b);
            out
        },
    };
    let l = operator_norm(&op, 50, 3) * 1.01;
    let (tau, sigma) = (1.0 / l, 1.0 / l);
    let zero = vec![C64::new(0.0, 0.0); n * nd];
    let mut best = tgv_objective(shape, &g, &zero, p);
    let mut v = extended_gradient(shape, &img.values);
    best = best.min(tgv_objective(shape, &g, &v, p));
    if best == 0.0 {
        return Ok(0.0);
    }
    let mut y = vec![C64::new(0.0, 0.0); n * (nd + ns)];
    let mut v_bar = v.clone();
    let project = |y: &mut [C64], comps: usize, w: f64| {
        let m = y.len() / comps;
        for i in 0..m {
            let a = (0..comps).map(|c| y[c * m + i].norm_sqr()).sum::<f64>().sqrt();
            if a > w {
                for c in 0..comps {
                    y[c * m + i] *= w / a;
                }
            }
        }
    };
    for _ in 0..20000 {
        // first term is α1‖g + (−M v)‖: its conjugate prox shifts by σg
        let kv = op.forward(&v_bar);
        y.iter_mut().zip(&kv).for_each(|(a, b)| *a += b * sigma);
        y[..n * nd].iter_mut().zip(&g).for_each(|(a, b)| *a += b * sigma);
        project(&mut y[..n * nd], nd, p.alpha1);
        project(&mut y[n * nd..], ns, p.alpha0);
        let kt = op.adjoint(&y);
        let v_new: Vec<C64> = v.iter().zip(&kt).map(|(a, b)| a - b * tau).collect();
        let dv = v_new.iter().zip(&v).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        let nv = v_new.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        v_bar = v_new.iter().zip(&v).map(|(a, b)| a * 2.0 - b).collect();
        v = v_new;
        best = best.min(tgv_objective(shape, &g, &v, p));
        if dv <= 1e-6 * nv.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(best)
}

/// Adjoint used for the warp operators inside the data terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum WarpAdjoint {
    /// Exact transpose of the interpolating warp.
    #[default]
    Transpose,
    /// Warp by the negated field, an approximation of the adjoint.
    Reverse,
}

/// Backward warp by a fixed field as a linear operator.
pub struct WarpOperator {
    pub field: MotionField,
    pub adjoint: WarpAdjoint,
}

impl WarpOperator {
    pub fn new(field: MotionField) -> Self {
        WarpOperator { field, adjoint: WarpAdjoint::Transpose }
    }
}

impl LinearOperator for WarpOperator {
    fn domain_len(&self) -> usize {
        self.field.shape.len()
    }

    fn range_len(&self) -> usize {
        self.field.shape.len()
    }

    fn forward(&self, x: &[C64]) -> Vec<C64> {
        warp_values(self.field.shape, x, &self.field)
    }

    fn adjoint(&self, y: &[C64]) -> Vec<C64> {
        match self.adjoint {
            WarpAdjoint::Transpose => warp_adjoint_values(self.field.shape, y, &self.field),
            WarpAdjoint::Reverse => warp_values(self.field.shape, y, &self.field.scaled(-1.0)),
        }
    }
}

/// Converts registration output (state k onto the reference) into the
/// operators `M_k` that carry the reference into state k: each non-zero
/// field is numerically inverted.
pub fn state_warps(registered: &[MotionField]) -> Vec<MotionField> {
    registered
        .iter()
        .map(|u| if u.max_abs() == 0.0 { u.clone() } else { invert_field(u, INVERSE_ITERS) })
        .collect()
}

/// Blocks of the motion-compensated objective over the primal `[X, v]`.
/// `warps[k]` maps the reference into state k. Data terms use
/// `sqrt(dcf)` of each state computed as part of the pooled acquisition.
pub fn imoco_blocks<'a>(
    states: &[StateData],
    maps: &SensitivityMaps,
    warps: &[MotionField],
    lambda_s: f64,
    tgv: &TgvParams,
) -> Result<(Vec<Block<'a>>, usize)> {
    let p = imoco_problem(states, maps, warps, lambda_s, tgv, DataMode::Dual, WarpAdjoint::Transpose)?;
    Ok((p.blocks, p.n))
}

/// Motion-compensated objective over the reference image and the TGV
/// auxiliary field.
pub fn imoco_problem<'a>(
    states: &[StateData],
    maps: &SensitivityMaps,
    warps: &[MotionField],
    lambda_s: f64,
    tgv: &TgvParams,
    mode: DataMode,
    adjoint: WarpAdjoint,
) -> Result<Problem<'a>> {
    tgv.validate()?;
    if !(lambda_s >= 0.0) {
        return param_err("lambda_s must be >= 0");
    }
    if states.is_empty() {
        return param_err("at least one motion state is required");
    }
    if warps.len() != states.len() {
        return shape_err(format!("{} fields for {} states", warps.len(), states.len()));
    }
    let shape = maps.shape;
    let n = shape.len();
    let nd = shape.ndim();
    let ns = sym_components(nd);
    let total = n * (1 + nd);
    let n_total: usize = states.iter().map(|s| s.spokes.len()).sum();
    let mut data = Vec::new();
    let mut blocks = Vec::new();
    for (k, (s, f)) in states.iter().zip(warps).enumerate() {
        if s.spokes.is_empty() {
            return param_err(format!("motion state {k} is empty"));
        }
        if f.shape != shape {
            return shape_err(format!("field {k} shape differs from the maps"));
        }
        if s.n_coils() != maps.n_coils() {
            return shape_err("coil count of data and maps differ");
        }
        let w = s.sqrt_dcf_pooled(n_total);
        let target = s.weighted_target(&w);
        let inner = WarpOperator { field: f.clone(), adjoint };
        data.push(sense_term(format!("data{k}"), &s.traj, maps, w, target, inner, 0, total, mode)?);
    }
    if lambda_s > 0.0 {
        let c1 = 1.0 / gradient_bound(nd);
        let first = FnOperator {
            domain: total,
            range: n * nd,
            fwd: move |x: &[C64]| {
                let g = gradient(shape, &x[..n]);
                let mv = mask_field(shape, &x[n..]);
                g.iter().zip(&mv).map(|(a, b)| (a - b) * c1).collect()
            },
            adj: move |y: &[C64]| {
                let mut out: Vec<C64> = gradient_adjoint(shape, y).into_iter().map(|v| v * c1).collect();
                out.extend(mask_field(shape, y).into_iter().map(|v| -v * c1));
                out
            },
        };
        blocks.push(Block::new("tgv1", Box::new(first), Penalty::GroupL1 { weight: lambda_s * tgv.alpha1 / c1, n_comp: nd }));
        let c0 = 1.0 / gradient_bound(nd);
        let second = FnOperator {
            domain: n * nd,
            range: n * ns,
            fwd: move |v: &[C64]| sym_gradient(shape, v).into_iter().map(|x| x * c0).collect(),
            adj: move |y: &[C64]| sym_gradient_adjoint(shape, y).into_iter().map(|x| x * c0).collect(),
        };
        blocks.push(Block::new(
            "tgv2",
            Box::new(Embed { op: second, offset: n, total }),
            Penalty::GroupL1 { weight: lambda_s * tgv.alpha0 / c0, n_comp: ns },
        ));
    }
    Ok(assemble(data, blocks, total))
}

/// Motion-compensated reconstruction of the reference image.
/// `warps[k]` maps the reference into state k (see [`state_warps`]);
/// `x0` optionally warm-starts the image.
pub fn imoco_solve(
    states: &[StateData],
    maps: &SensitivityMaps,
    warps: &[MotionField],
    lambda_s: f64,
    tgv: &TgvParams,
    opts: &SolverOptions,
    x0: Option<&GridImage>,
) -> Result<(GridImage, SolverReport)> {
    imoco_solve_with(states, maps, warps, lambda_s, tgv, opts, x0, WarpAdjoint::Transpose)
}

/// [`imoco_solve`] with a selectable warp adjoint.
#[allow(clippy::too_many_arguments)]
pub fn imoco_solve_with(
    states: &[StateData],
    maps: &SensitivityMaps,
    warps: &[MotionField],
    lambda_s: f64,
    tgv: &TgvParams,
    opts: &SolverOptions,
    x0: Option<&GridImage>,
    adjoint: WarpAdjoint,
) -> Result<(GridImage, SolverReport)> {
    let problem = imoco_problem(states, maps, warps, lambda_s, tgv, opts.data_mode, adjoint)?;
    let total = problem.n;
    let n = maps.shape.len();
    let init = match x0 {
        Some(img) => {
            if img.shape != maps.shape {
                return shape_err("initial image shape differs from the maps");
            }
            let mut x = img.values.clone();
            x.resize(total, C64::new(0.0, 0.0));
            Some(x)
        }
        None => None,
    };
    let (x, report) = problem.solve(init, opts)?;
    let img = GridImage::new(maps.shape, vec![1.0; maps.shape.ndim()], x[..n].to_vec())?;
    Ok((img, report))
}

/// Factor that scales data so `image` has unit median magnitude where the
/// maps are supported.
pub fn normalization_scale(image: &GridImage, maps: &SensitivityMaps) -> Result<f64> {
    let rss = maps.rss();
    let vals: Vec<f64> = image.values.iter().zip(&rss).filter(|(_, &r)| r > 0.0).map(|(v, _)| v.norm()).collect();
    if vals.is_empty() {
        return param_err("maps have empty support");
    }
    let m = median(&vals);
    if !(m > 0.0) {
        return param_err("median in-support magnitude is zero");
    }
    Ok(1.0 / m)
}

/// Multiplies every sample by `scale`.
pub fn scale_states(states: &[StateData], scale: f64) -> Vec<StateData> {
    states
        .iter()
        .map(|s| StateData {
            spokes: s.spokes.clone(),
            traj: s.traj.clone(),
            samples: s.samples.iter().map(|c| c.iter().map(|v| v * scale).collect()).collect(),
        })
        .collect()
}

/// Registers each state onto the reference with its field and averages.
/// `registered[k]` satisfies `warp(state_k, registered[k]) ≈ reference`.
pub fn moco_average(states: &MotionResolvedImages, registered: &[MotionField]) -> Result<GridImage> {
    if states.m() == 0 {
        return param_err("no motion states");
    }
    if registered.len() != states.m() {
        return shape_err(format!("{} fields for {} states", registered.len(), states.m()));
    }
    let n = states.shape().len();
    let mut acc = vec![C64::new(0.0, 0.0); n];
    for (img, f) in states.images.iter().zip(registered) {
        let w = warp(img, f)?;
        acc.iter_mut().zip(&w.values).for_each(|(a, b)| *a += b);
    }
    let m = states.m() as f64;
    Ok(states.images[0].with_values(acc.into_iter().map(|v| v / m).collect()))
}

#[derive(Clone, Debug)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub image: GridImage,
    pub report: SolverReport,
    pub asnr_airway: f64,
    pub asnr_parenchyma: f64,
    pub asnr_aorta: f64,
}

/// Runs [`imoco_solve`] for each weight and tabulates the three aSNRs.
pub fn lambda_sweep(
    states: &[StateData],
    maps: &SensitivityMaps,
    warps: &[MotionField],
    lambdas: &[f64],
    tgv: &TgvParams,
    opts: &SolverOptions,
    rois: &RoiSet,
) -> Result<Vec<LambdaPoint>> {
    if lambdas.len() < 2 {
        return param_err("a sweep needs at least two weights");
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let (image, report) = imoco_solve(states, maps, warps, lambda, tgv, opts, None)?;
            Ok(LambdaPoint {
                lambda,
                asnr_airway: asnr(&image, &rois.airway, &rois.background)?,
                asnr_parenchyma: asnr(&image, &rois.parenchyma, &rois.background)?,
                asnr_aorta: asnr(&image, &rois.aorta, &rois.background)?,
                image,
                report,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularizers::spatial_tv;

    fn img(shape: Shape, f: impl Fn([usize; 3]) -> f64) -> GridImage {
        let v: Vec<f64> = (0..shape.len()).map(|i| f(shape.coords(i))).collect();
        GridImage::from_real(shape, vec![1.0; shape.ndim()], &v).unwrap()
    }

    #[test]
    fn tgv_of_constant_and_affine_is_zero() {
        let p = TgvParams::default();
        let s = Shape::d2(12, 10);
        assert_eq!(tgv_value(&img(s, |_| 3.0), &p).unwrap(), 0.0);
        let aff = img(s, |c| 0.7 * c[0] as f64 - 0.3 * c[1] as f64 + 2.0);
        let tv = spatial_tv(s, &aff.values);
        assert!(tgv_value(&aff, &p).unwrap() <= 1e-5 * tv);
        let s3 = Shape::d3(6, 7, 8);
        let aff3 = img(s3, |c| c[0] as f64 + 0.5 * c[1] as f64 - 0.25 * c[2] as f64);
        assert!(tgv_value(&aff3, &p).unwrap() <= 1e-5 * spatial_tv(s3, &aff3.values));
    }

    #[test]
    fn tgv_of_step_bounded_by_tv() {
        let s = Shape::d2(8, 8);
        let step = img(s, |c| if c[1] >= 4 { 1.0 } else { 0.0 });
        let p = TgvParams { alpha1: 1.0, alpha0: 2.0 };
        let t = tgv_value(&step, &p).unwrap();
        let tv = spatial_tv(s, &step.values);
        assert!(t > 0.0 && t <= tv + 1e-12, "tgv {t} tv {tv}");
    }

    #[test]
    fn mask_matches_extended_gradient_on_affine() {
        let s = Shape::d2(6, 5);
        let aff = img(s, |c| 2.0 * c[0] as f64 + c[1] as f64);
        let g = gradient(s, &aff.values);
        let v = extended_gradient(s, &aff.values);
        let mv = mask_field(s, &v);
        assert!(g.iter().zip(&mv).all(|(a, b)| (a - b).norm() < 1e-12));
        assert!(sym_gradient(s, &v).iter().all(|x| x.norm() < 1e-12));
    }
}
