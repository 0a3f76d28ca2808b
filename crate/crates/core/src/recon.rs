//! Motion-resolved reconstruction (temporal TV with optional spatial TV or
//! wavelet sparsity), coil-map calibration and the non-gated, hard-gated
//! and soft-gated baselines.

use std::fmt;
use std::str::FromStr;

use crate::data::{GridImage, RadialKSpace, SensitivityMaps, Shape, C64};
use crate::error::{param_err, shape_err, Error, Result};
use crate::filters::gaussian;
use crate::navigator::RespiratoryTrace;
use crate::nufft::{plan, sense_adjoint, GriddingPlan, LinearOperator, SenseOperator};
use crate::regularizers::{gradient, gradient_adjoint, temporal_diff, temporal_diff_adjoint, Haar};
use crate::solver::{
    cg_least_squares, Block, Compose, DataMode, Embed, FnOperator, Identity, Padded, Penalty, Problem, Sandwich, Smooth, SolverOptions,
    SolverReport,
};
use crate::toeplitz::SenseGram;
use crate::stats::percentile;
use crate::trajectory::Trajectory;

/// Samples of a subset of spokes, with the matching sub-trajectory.
#[derive(Clone, Debug)]
pub struct StateData {
    pub spokes: Vec<usize>,
    pub traj: Trajectory,
    /// Per coil, `[spoke][readout]` flattened.
    pub samples: Vec<Vec<C64>>,
}

impl StateData {
    /// Gathers `spokes`; with `factor > 1` the trajectory is expressed on a
    /// grid `factor` times coarser and samples beyond its band are dropped.
    pub fn gather(data: &RadialKSpace, traj: &Trajectory, spokes: &[usize], factor: f64) -> Result<Self> {
        if spokes.is_empty() {
            return shape_err("no spokes selected");
        }
        if spokes.iter().any(|&s| s >= data.n_spokes) {
            return shape_err("spoke index out of range");
        }
        let sub = traj.select(spokes, traj.n_readout);
        let (t, n_keep) = if factor > 1.0 { sub.rescaled(factor) } else { (sub, traj.n_readout) };
        let samples = (0..data.n_coils).map(|c| data.coil_subset(c, spokes, n_keep)).collect();
        Ok(StateData { spokes: spokes.to_vec(), traj: t, samples })
    }

    pub fn n_coils(&self) -> usize {
        self.samples.len()
    }

    /// `sqrt(dcf)` of this subset.
    pub fn sqrt_dcf(&self) -> Vec<f64> {
        self.traj.dcf.iter().map(|w| w.sqrt()).collect()
    }

    /// `sqrt(dcf)` with the subset weighted as part of `n_total` spokes.
    pub fn sqrt_dcf_pooled(&self, n_total: usize) -> Vec<f64> {
        self.traj.dcf_pooled(n_total).iter().map(|w| w.sqrt()).collect()
    }

    /// Coil samples multiplied by `w`, stacked coil-major.
    pub fn weighted_target(&self, w: &[f64]) -> Vec<C64> {
        let mut out = Vec::with_capacity(self.samples.len() * w.len());
        for c in &self.samples {
            out.extend(c.iter().zip(w).map(|(v, w)| v * *w));
        }
        out
    }
}

/// Splits valid spokes into the trace's motion states.
pub fn bin_data(data: &RadialKSpace, traj: &Trajectory, trace: &RespiratoryTrace, factor: f64) -> Result<Vec<StateData>> {
    if trace.len() != data.n_spokes {
        return shape_err("trace length differs from spoke count");
    }
    (0..trace.n_states)
        .map(|k| {
            let spokes = trace.spokes_in_state(k);
            if spokes.is_empty() {
                return Err(Error::InvalidParameter(format!("motion state {k} is empty")));
            }
            StateData::gather(data, traj, &spokes, factor)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Temporal TV only.
    S1,
    /// Temporal TV and spatial TV.
    S2,
    /// Temporal TV and spatial Haar wavelet sparsity.
    S3,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(Variant::S1),
            "s2" => Ok(Variant::S2),
            "s3" => Ok(Variant::S3),
            _ => Err(Error::InvalidParameter(format!("unknown variant {s:?} (expected s1, s2 or s3)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::S1 => "s1",
            Variant::S2 => "s2",
            Variant::S3 => "s3",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizerSpec {
    pub variant: Variant,
    pub lambda_s: f64,
    pub lambda_t: f64,
}

impl Default for RegularizerSpec {
    fn default() -> Self {
        RegularizerSpec { variant: Variant::S3, lambda_s: 0.01, lambda_t: 0.02 }
    }
}

impl RegularizerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_s >= 0.0 && self.lambda_t >= 0.0) {
            return param_err("regularization weights must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MotionResolvedImages {
    pub images: Vec<GridImage>,
}

impl MotionResolvedImages {
    pub fn m(&self) -> usize {
        self.images.len()
    }

    pub fn shape(&self) -> Shape {
        self.images[0].shape
    }
}

/// Weighted SENSE operator owning its plan.
pub struct OwnedSense {
    pub plan: GriddingPlan,
    pub maps: SensitivityMaps,
    pub weights: Vec<f64>,
}

impl OwnedSense {
    pub fn new(traj: &Trajectory, maps: &SensitivityMaps, weights: Vec<f64>) -> Result<Self> {
        let plan = plan(traj, maps.shape)?;
        if weights.len() != plan.n_samples() {
            return shape_err("weight count does not match the trajectory");
        }
        Ok(OwnedSense { plan, maps: maps.clone(), weights })
    }

    fn view(&self) -> SenseOperator<'_> {
        SenseOperator { plan: &self.plan, maps: &self.maps, weights: Some(&self.weights) }
    }
}

impl LinearOperator for OwnedSense {
    fn domain_len(&self) -> usize {
        self.view().domain_len()
    }

    fn range_len(&self) -> usize {
        self.view().range_len()
    }

    fn forward(&self, x: &[C64]) -> Vec<C64> {
        self.view().forward(x)
    }

    fn adjoint(&self, y: &[C64]) -> Vec<C64> {
        self.view().adjoint(y)
    }
}

/// Data-consistency term in the form the solver consumes.
pub(crate) enum DataTerm<'a> {
    Dual(Block<'a>),
    Smooth(Smooth<'a>),
}

/// `‖W F S M x_s − target‖²`, where `x_s = x[offset..]` has the length of
/// `inner`'s domain and `total` is the primal length.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sense_term<'a, M: LinearOperator + 'a>(
    name: String,
    traj: &Trajectory,
    maps: &SensitivityMaps,
    weights: Vec<f64>,
    target: Vec<C64>,
    inner: M,
    offset: usize,
    total: usize,
    mode: DataMode,
) -> Result<DataTerm<'a>> {
    let sense = OwnedSense::new(traj, maps, weights)?;
    if target.len() != sense.range_len() {
        return shape_err("target length does not match the data operator");
    }
    match mode {
        DataMode::Dual => {
            let op = Embed { op: Compose { outer: sense, inner }, offset, total };
            Ok(DataTerm::Dual(Block::new(name, Box::new(op), Penalty::Quadratic { target })))
        }
        DataMode::Toeplitz => {
            let part = inner.adjoint(&sense.adjoint(&target));
            let mut rhs = vec![C64::new(0.0, 0.0); total];
            rhs[offset..offset + part.len()].copy_from_slice(&part);
            let constant = target.iter().map(|v| v.norm_sqr()).sum();
            let gram = SenseGram::new(traj, maps, &sense.weights)?;
            let op = Padded { op: Sandwich { gram, inner }, offset, total };
            Ok(DataTerm::Smooth(Smooth::new(name, Box::new(op), rhs, constant)))
        }
    }
}

/// Collects data terms (first) and regularization blocks into a problem.
pub(crate) fn assemble<'a>(data: Vec<DataTerm<'a>>, regs: Vec<Block<'a>>, total: usize) -> Problem<'a> {
    let mut smooth = Vec::new();
    let mut blocks = Vec::new();
    for t in data {
        match t {
            DataTerm::Dual(b) => blocks.push(b),
            DataTerm::Smooth(s) => smooth.push(s),
        }
    }
    blocks.extend(regs);
    Problem::new(smooth, blocks, total)
}

/// Nominal norm bound of the forward-difference gradient.
pub(crate) fn gradient_bound(ndim: usize) -> f64 {
    2.0 * (ndim as f64).sqrt()
}

/// Spatial regularization block for the image at `offset` in a primal of
/// length `total`. The operator is scaled to unit nominal norm and the
/// weight adjusted so the penalty value is unchanged.
pub(crate) fn spatial_block<'a>(variant: Variant, shape: Shape, lambda: f64, offset: usize, total: usize, tag: &str) -> Option<Block<'a>> {
    let n = shape.len();
    match variant {
        Variant::S1 => None,
        Variant::S2 => {
            let c = 1.0 / gradient_bound(shape.ndim());
            let op = FnOperator {
                domain: n,
                range: n * shape.ndim(),
                fwd: move |x: &[C64]| gradient(shape, x).into_iter().map(|v| v * c).collect(),
                adj: move |y: &[C64]| gradient_adjoint(shape, y).into_iter().map(|v| v * c).collect(),
            };
            Some(Block::new(
                format!("tv{tag}"),
                Box::new(Embed { op, offset, total }),
                Penalty::GroupL1 { weight: lambda / c, n_comp: shape.ndim() },
            ))
        }
        Variant::S3 => {
            let haar = Haar::new(shape, 3);
            let mask = haar.detail_mask();
            let keep: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            let len = keep.len();
            let keep2 = keep.clone();
            let padded = haar.padded.len();
            let h2 = haar.clone();
            let op = FnOperator {
                domain: n,
                range: len,
                fwd: move |x: &[C64]| {
                    let c = haar.forward(x);
                    keep.iter().map(|&i| c[i]).collect()
                },
                adj: move |y: &[C64]| {
                    let mut c = vec![C64::new(0.0, 0.0); padded];
                    for (&i, v) in keep2.iter().zip(y) {
                        c[i] = *v;
                    }
                    h2.adjoint(&c)
                },
            };
            Some(Block::new(format!("wavelet{tag}"), Box::new(Embed { op, offset, total }), Penalty::GroupL1 { weight: lambda, n_comp: 1 }))
        }
    }
}

/// Motion-resolved reconstruction of all states on the maps' grid.
pub fn xd_grasp(
    states: &[StateData],
    maps: &SensitivityMaps,
    spec: &RegularizerSpec,
    opts: &SolverOptions,
) -> Result<(MotionResolvedImages, SolverReport)> {
    spec.validate()?;
    let problem = xd_grasp_problem(states, maps, spec, opts.data_mode)?;
    let n = maps.shape.len();
    let (x, report) = problem.solve(None, opts)?;
    let images = x.chunks(n).map(|c| GridImage::new(maps.shape, vec![1.0; maps.shape.ndim()], c.to_vec())).collect::<Result<_>>()?;
    Ok((MotionResolvedImages { images }, report))
}

/// Blocks of the motion-resolved objective with one dual variable per data
/// term; returns them with the per-state image length.
pub fn xd_grasp_blocks<'a>(states: &[StateData], maps: &SensitivityMaps, spec: &RegularizerSpec) -> Result<(Vec<Block<'a>>, usize)> {
    let p = xd_grasp_problem(states, maps, spec, DataMode::Dual)?;
    Ok((p.blocks, maps.shape.len()))
}

/// Motion-resolved objective over the stacked states.
pub fn xd_grasp_problem<'a>(states: &[StateData], maps: &SensitivityMaps, spec: &RegularizerSpec, mode: DataMode) -> Result<Problem<'a>> {
    let m = states.len();
    if m == 0 {
        return param_err("at least one motion state is required");
    }
    let shape = maps.shape;
    let n = shape.len();
    let total = n * m;
    let mut data = Vec::new();
    for (k, s) in states.iter().enumerate() {
        if s.spokes.is_empty() {
            return param_err(format!("motion state {k} is empty"));
        }
        if s.n_coils() != maps.n_coils() {
            return shape_err("coil count of data and maps differ");
        }
        let w = s.sqrt_dcf();
        let target = s.weighted_target(&w);
        data.push(sense_term(format!("data{k}"), &s.traj, maps, w, target, Identity(n), k * n, total, mode)?);
    }
    let mut regs = Vec::new();
    for k in 0..m {
        if spec.lambda_s > 0.0 {
            if let Some(b) = spatial_block(spec.variant, shape, spec.lambda_s, k * n, total, &k.to_string()) {
                regs.push(b);
            }
        }
    }
    if m > 1 && spec.lambda_t > 0.0 {
        let c = 0.5;
        let op = FnOperator {
            domain: total,
            range: n * (m - 1),
            fwd: move |x: &[C64]| {
                let parts: Vec<&[C64]> = x.chunks(n).collect();
                temporal_diff(&parts).into_iter().map(|v| v * c).collect()
            },
            adj: move |y: &[C64]| temporal_diff_adjoint(y, m, n).concat().into_iter().map(|v| v * c).collect(),
        };
        regs.push(Block::new("temporal", Box::new(op), Penalty::GroupL1 { weight: spec.lambda_t / c, n_comp: 1 }));
    }
    Ok(assemble(data, regs, total))
}

/// Conjugate-gradient SENSE solution of `min Σ ‖W(F S x − d)‖²` for one
/// state, the oracle for the unregularized solvers.
pub fn cg_sense(state: &StateData, maps: &SensitivityMaps, weights: &[f64], iters: usize, tol: f64) -> Result<GridImage> {
    let op = OwnedSense::new(&state.traj, maps, weights.to_vec())?;
    let b = state.weighted_target(weights);
    let x = cg_least_squares(&op, &b, iters, tol);
    GridImage::new(maps.shape, vec![1.0; maps.shape.ndim()], x)
}

/// DCF-weighted coil-combined adjoint of a state.
pub fn gridding_recon(state: &StateData, maps: &SensitivityMaps) -> Result<GridImage> {
    let p = plan(&state.traj, maps.shape)?;
    let x = sense_adjoint(&p, maps, &state.samples, Some(&state.traj.dcf))?;
    GridImage::new(maps.shape, vec![1.0; maps.shape.ndim()], x)
}

/// Single gridding reconstruction of all valid spokes.
pub fn nongated_recon(data: &RadialKSpace, traj: &Trajectory, maps: &SensitivityMaps, valid: Option<&[bool]>) -> Result<GridImage> {
    let spokes: Vec<usize> = (0..data.n_spokes).filter(|&s| valid.map_or(true, |v| v[s])).collect();
    let state = StateData::gather(data, traj, &spokes, 1.0)?;
    let mut img = gridding_recon(&state, maps)?;
    img.voxel_size = data.voxel_size.clone();
    Ok(img)
}

/// Expiratory reference amplitude: the 95th percentile of valid values
/// (expiration is the high end of an oriented trace).
pub fn expiratory_reference(trace: &RespiratoryTrace) -> f64 {
    let v: Vec<f64> = trace.values.iter().zip(&trace.valid).filter(|(_, &ok)| ok).map(|(v, _)| *v).collect();
    percentile(&v, 95.0)
}

/// Gridding reconstruction of the `accept_fraction` of valid spokes nearest
/// the expiratory reference.
pub fn hard_gated_recon(
    data: &RadialKSpace,
    traj: &Trajectory,
    maps: &SensitivityMaps,
    trace: &RespiratoryTrace,
    accept_fraction: f64,
) -> Result<GridImage> {
    if !(accept_fraction > 0.0 && accept_fraction <= 1.0) {
        return param_err(format!("accept_fraction must be in (0, 1], got {accept_fraction}"));
    }
    let r_exp = expiratory_reference(trace);
    let mut valid = trace.valid_spokes();
    valid.sort_by(|&a, &b| (trace.values[a] - r_exp).abs().total_cmp(&(trace.values[b] - r_exp).abs()).then(a.cmp(&b)));
    let keep = ((valid.len() as f64 * accept_fraction).round() as usize).min(valid.len());
    if keep < 100 {
        return param_err(format!("only {keep} spokes kept; at least 100 are required"));
    }
    let mut spokes = valid[..keep].to_vec();
    spokes.sort_unstable();
    let state = StateData::gather(data, traj, &spokes, 1.0)?;
    let mut img = gridding_recon(&state, maps)?;
    img.voxel_size = data.voxel_size.clone();
    Ok(img)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftGateParams {
    /// Decay rate; `None` uses `2 / range`.
    pub beta: Option<f64>,
    /// Tolerance band; `None` uses 10% of the range.
    pub delta: Option<f64>,
}

impl Default for SoftGateParams {
    fn default() -> Self {
        SoftGateParams { beta: None, delta: None }
    }
}

/// Per-spoke weights `min(1, exp(−β·max(0, |r − r_exp| − δ)))`; invalid
/// spokes get 0.
pub fn soft_gate_weights(trace: &RespiratoryTrace, params: &SoftGateParams) -> Vec<f64> {
    let r_exp = expiratory_reference(trace);
    let beta = params.beta.unwrap_or(2.0 / trace.range.max(f64::MIN_POSITIVE));
    let delta = params.delta.unwrap_or(0.1 * trace.range);
    trace
        .values
        .iter()
        .zip(&trace.valid)
        .map(|(&r, &ok)| if ok { (-beta * ((r - r_exp).abs() - delta).max(0.0)).exp().min(1.0) } else { 0.0 })
        .collect()
}

/// Weighted least squares with the spatial term of `spec` only. The
/// per-spoke weights multiply `W` and are rescaled so their mean square over
/// the used spokes is 1, keeping the intensity scale of the non-gated image.
pub fn soft_gated_recon(
    data: &RadialKSpace,
    traj: &Trajectory,
    maps: &SensitivityMaps,
    trace: &RespiratoryTrace,
    params: &SoftGateParams,
    spec: &RegularizerSpec,
    opts: &SolverOptions,
) -> Result<(GridImage, SolverReport)> {
    if trace.len() != data.n_spokes {
        return shape_err("trace length differs from spoke count");
    }
    let w = soft_gate_weights(trace, params);
    let spokes: Vec<usize> = (0..data.n_spokes).filter(|&s| w[s] > 1e-6).collect();
    if spokes.len() < 2 {
        return Err(Error::Degenerate("all soft-gating weights are ~0".into()));
    }
    let ms = spokes.iter().map(|&s| w[s] * w[s]).sum::<f64>() / spokes.len() as f64;
    let state = StateData::gather(data, traj, &spokes, 1.0)?;
    let nr = state.traj.n_readout;
    let base = state.sqrt_dcf();
    let weights: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(j, b)| b * w[spokes[j / nr]] / ms.sqrt())
        .collect();
    let shape = maps.shape;
    let n = shape.len();
    let target = state.weighted_target(&weights);
    let data_term = sense_term("data".into(), &state.traj, maps, weights, target, Identity(n), 0, n, opts.data_mode)?;
    let mut regs = Vec::new();
    if spec.lambda_s > 0.0 {
        if let Some(b) = spatial_block(spec.variant, shape, spec.lambda_s, 0, n, "") {
            regs.push(b);
        }
    }
    let (x, rep) = assemble(vec![data_term], regs, n).solve(None, opts)?;
    Ok((GridImage::new(shape, data.voxel_size.clone(), x)?, rep))
}

/// Low-resolution coil sensitivities from the k-space center.
pub fn estimate_maps(data: &RadialKSpace, traj: &Trajectory, shape: Shape, calib_radius: f64) -> Result<SensitivityMaps> {
    if !(calib_radius > 0.0 && calib_radius <= 0.1) {
        return param_err(format!("calib_radius must be in (0, 0.1], got {calib_radius}"));
    }
    let n_keep = (0..traj.n_readout).take_while(|&j| j as f64 * traj.dr <= calib_radius + 1e-12).count();
    if n_keep < 2 {
        return Err(Error::InvalidParameter("no samples inside the calibration radius".into()));
    }
    let spokes: Vec<usize> = (0..data.n_spokes).collect();
    let sub = traj.select(&spokes, n_keep);
    let p = plan(&sub, shape)?;
    // Hann apodization over the calibration disk
    let weights: Vec<f64> = (0..sub.n_samples())
        .map(|i| {
            let r = (i % n_keep) as f64 * traj.dr / calib_radius;
            sub.dcf[i] * 0.5 * (1.0 + (std::f64::consts::PI * r.min(1.0)).cos())
        })
        .collect();
    let coil_imgs: Vec<Vec<C64>> = (0..data.n_coils)
        .map(|c| {
            let s = data.coil_subset(c, &spokes, n_keep);
            gaussian(shape, &p.adjoint_values(&s, Some(&weights)), 1.0)
        })
        .collect();
    let rss: Vec<f64> = (0..shape.len()).map(|i| coil_imgs.iter().map(|c| c[i].norm_sqr()).sum::<f64>().sqrt()).collect();
    let peak = rss.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::Degenerate("calibration data are all zero".into()));
    }
    let maps = coil_imgs
        .into_iter()
        .map(|c| {
            c.into_iter()
                .zip(&rss)
                .map(|(v, &r)| if r >= 0.05 * peak { v / r } else { C64::new(0.0, 0.0) })
                .collect()
        })
        .collect();
    SensitivityMaps::new(shape, maps)
}

/// Resamples maps to another grid (nearest voxel by center-aligned
/// coordinates).
pub fn resample_maps(maps: &SensitivityMaps, target: Shape) -> Result<SensitivityMaps> {
    if maps.shape.ndim() != target.ndim() {
        return shape_err("dimensionality mismatch");
    }
    if maps.shape == target {
        return Ok(maps.clone());
    }
    let src = maps.shape;
    let nd = src.ndim();
    let idx: Vec<usize> = (0..target.len())
        .map(|i| {
            let c = target.coords(i);
            let mut s = [0usize; 3];
            for a in 0..nd {
                let (nt, ns) = (target.dims()[a] as f64, src.dims()[a] as f64);
                let p = (c[a] as f64 - (target.dims()[a] / 2) as f64) * ns / nt + (src.dims()[a] / 2) as f64;
                s[a] = p.round().clamp(0.0, ns - 1.0) as usize;
            }
            src.index(&s[..nd])
        })
        .collect();
    let out = maps.maps.iter().map(|m| idx.iter().map(|&j| m[j]).collect()).collect();
    SensitivityMaps::new(target, out)
}
