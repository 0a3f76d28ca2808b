//! Pipeline stages over the artifacts of one work directory.

use std::fs;
use std::path::{Path, PathBuf};

use imoco_core::filters::resize_image;
use imoco_core::imoco::{imoco_solve_with, moco_average, normalization_scale, scale_states, state_warps};
use imoco_core::io;
use imoco_core::metrics::{evaluate, field_cc, field_dist, masked_nrmse, report_csv, rmse, RoiSet};
use imoco_core::navigator::{bin_states, image_navigator, run_navigator, RespiratoryTrace};
use imoco_core::phantom::{make_phantom_seeded, simulate_acquisition, PhantomGroundTruth, LUNG};
use imoco_core::recon::{
    bin_data, estimate_maps, hard_gated_recon, nongated_recon, resample_maps, soft_gated_recon, xd_grasp, MotionResolvedImages,
    RegularizerSpec, Variant,
};
use imoco_core::registration::register_all;
use imoco_core::solver::SolverReport;
use imoco_core::trajectory::{golden_angle_2d, golden_means_3d, nyquist_k_max, Trajectory};
use imoco_core::warp::{upsample_field, warp};
use imoco_core::{GridImage, MotionField, RadialKSpace, SensitivityMaps};

use crate::config::PipelineConfig;
use crate::error::{CliError, StageExt};

/// Pipeline stages in execution order.
pub const STAGES: [&str; 8] = ["navigator", "bin", "calib", "xdgrasp", "register", "baseline", "imoco", "metrics"];

/// Artifact locations inside the work directory.
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: &Path) -> Self {
        Workspace { root: root.to_path_buf() }
    }

    pub fn kspace(&self) -> PathBuf {
        self.root.join("kspace.rks")
    }
    pub fn truth_dir(&self) -> PathBuf {
        self.root.join("truth")
    }
    pub fn nav(&self) -> PathBuf {
        self.root.join("nav.csv")
    }
    pub fn nav_image(&self) -> PathBuf {
        self.root.join("nav_image.csv")
    }
    pub fn trace(&self) -> PathBuf {
        self.root.join("trace.csv")
    }
    pub fn maps(&self) -> PathBuf {
        self.root.join("maps.map")
    }
    pub fn calib(&self) -> PathBuf {
        self.root.join("calib.toml")
    }
    pub fn image(&self, method: &str) -> PathBuf {
        self.root.join("images").join(format!("{method}.cim"))
    }
    pub fn state_image(&self, k: usize) -> PathBuf {
        self.root.join("mr").join(format!("state_{k:03}.cim"))
    }
    pub fn field(&self, level: &str, k: usize) -> PathBuf {
        self.root.join("fields").join(format!("{level}_{k:03}.mfd"))
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.csv"))
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn nrmse(&self) -> PathBuf {
        self.root.join("nrmse.csv")
    }
    pub fn study(&self, name: &str) -> PathBuf {
        self.root.join(format!("study_{name}.csv"))
    }
    pub fn export_dir(&self) -> PathBuf {
        self.root.join("export")
    }
}

/// Shared state of one invocation. Objective increases are collected so
/// later stages still run and write their outputs.
pub struct Run {
    pub cfg: PipelineConfig,
    pub ws: Workspace,
    pub oracle: bool,
    pub warnings: Vec<CliError>,
}

fn io_err(stage: &'static str, e: std::io::Error) -> CliError {
    CliError::Stage { stage, source: e.into() }
}

fn ensure_dir(stage: &'static str, p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| io_err(stage, e))
}

fn ensure_parent(stage: &'static str, p: &Path) -> Result<(), CliError> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => ensure_dir(stage, d),
        _ => Ok(()),
    }
}

fn need(stage: &'static str, p: &Path, needs: &'static str) -> Result<(), CliError> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput { stage, path: p.display().to_string(), needs })
    }
}

fn write_report(stage: &'static str, report: &SolverReport, path: &Path) -> Result<(), CliError> {
    ensure_parent(stage, path)?;
    let rows: Vec<Vec<String>> = report.objective.iter().enumerate().map(|(i, v)| vec![i.to_string(), format!("{v:?}")]).collect();
    io::write_csv(path, "iteration,objective", &rows).stage(stage)
}

fn write_image(stage: &'static str, img: &GridImage, path: &Path) -> Result<(), CliError> {
    ensure_parent(stage, path)?;
    io::write_image(img, path).stage(stage)
}

/// Ground truth for the configured seeds.
pub fn ground_truth(cfg: &PipelineConfig) -> Result<PhantomGroundTruth, CliError> {
    let stage = "simulate";
    let p = &cfg.phantom;
    make_phantom_seeded(cfg.shape()?, p.voxel_size.clone(), p.seed)
        .and_then(|g| g.with_coils(p.n_coils, p.coil_seed))
        .and_then(|g| g.with_waveform(&cfg.waveform_params(), cfg.waveform.seed, cfg.shift_events()))
        .stage(stage)
}

fn trajectory(cfg: &PipelineConfig) -> Result<Trajectory, CliError> {
    let n = cfg.waveform_params().n_spokes();
    let nr = cfg.acquisition.n_readout;
    match cfg.phantom.shape.len() {
        2 => golden_angle_2d(n, nr, nyquist_k_max(nr)),
        _ => golden_means_3d(n, nr, nyquist_k_max(nr)),
    }
    .stage("simulate")
}

impl Run {
    fn data(&self, stage: &'static str) -> Result<(RadialKSpace, Trajectory), CliError> {
        let p = self.ws.kspace();
        need(stage, &p, "simulate")?;
        io::read_kspace(&p).stage(stage)
    }

    fn trace(&self, stage: &'static str) -> Result<RespiratoryTrace, CliError> {
        need(stage, &self.ws.trace(), "bin")?;
        io::read_trace(&self.ws.trace()).stage(stage)
    }

    fn maps(&self, stage: &'static str) -> Result<SensitivityMaps, CliError> {
        need(stage, &self.ws.maps(), "calib")?;
        io::read_maps(&self.ws.maps()).stage(stage)
    }

    fn scale(&self, stage: &'static str) -> Result<f64, CliError> {
        let p = self.ws.calib();
        need(stage, &p, "calib")?;
        let text = fs::read_to_string(&p).map_err(|e| io_err(stage, e))?;
        let v: toml::Value = toml::from_str(&text).map_err(|e| CliError::Stage { stage, source: imoco_core::Error::Format(e.to_string()) })?;
        v.get("scale")
            .and_then(|s| s.as_float())
            .ok_or_else(|| CliError::Stage { stage, source: imoco_core::Error::Format("calib.toml lacks scale".into()) })
    }

    fn read_image(&self, stage: &'static str, path: &Path, needs: &'static str) -> Result<GridImage, CliError> {
        need(stage, path, needs)?;
        io::read_image(path).stage(stage)
    }

    fn motion_resolved(&self, stage: &'static str, m: usize) -> Result<MotionResolvedImages, CliError> {
        let images = (0..m).map(|k| self.read_image(stage, &self.ws.state_image(k), "xdgrasp")).collect::<Result<_, _>>()?;
        Ok(MotionResolvedImages { images })
    }

    fn fields(&self, stage: &'static str, dir: Option<&Path>, m: usize) -> Result<Vec<MotionField>, CliError> {
        (0..m)
            .map(|k| {
                let p = match dir {
                    Some(d) => d.join(format!("fine_{k:03}.mfd")),
                    None => self.ws.field("fine", k),
                };
                need(stage, &p, "register")?;
                io::read_field(&p).stage(stage)
            })
            .collect()
    }

    /// Reference state: the configured index, else the expiratory state 0.
    pub fn reference(&self, m: usize) -> Result<usize, CliError> {
        let r = self.cfg.reference_override()?.unwrap_or(0);
        if r >= m {
            return Err(CliError::Config(format!("registration.reference {r} out of range for {m} states")));
        }
        Ok(r)
    }

    fn check_objective(&mut self, stage: &'static str, report: &SolverReport) {
        let (initial, last) = (report.initial_objective(), report.final_objective());
        if last > initial {
            self.warnings.push(CliError::Objective { stage, initial, last });
        }
    }

    fn require_oracle(&self, stage: &'static str) -> Result<(), CliError> {
        if self.oracle {
            Ok(())
        } else {
            Err(CliError::Config(format!("{stage} reads ground truth; pass --oracle")))
        }
    }

    pub fn simulate(&mut self) -> Result<(), CliError> {
        let stage = "simulate";
        let gt = ground_truth(&self.cfg)?;
        let traj = trajectory(&self.cfg)?;
        let sim = simulate_acquisition(&gt, &traj, self.cfg.acquisition.noise_sigma, self.cfg.acquisition.seed).stage(stage)?;
        ensure_dir(stage, &self.ws.root)?;
        io::write_kspace(&sim.kspace, &traj, &self.ws.kspace()).stage(stage)?;
        let truth = self.ws.truth_dir();
        ensure_dir(stage, &truth)?;
        io::write_image(&gt.reference_image, &truth.join("reference.cim")).stage(stage)?;
        io::write_maps(&gt.coil_maps, &truth.join("maps.map")).stage(stage)?;
        let rows: Vec<Vec<String>> = (0..gt.waveform.len())
            .map(|s| vec![s.to_string(), format!("{:?}", gt.times[s]), format!("{:?}", gt.waveform[s]), (gt.corrupted[s] as u8).to_string()])
            .collect();
        io::write_csv(&truth.join("waveform.csv"), "spoke,time_s,amplitude,corrupted", &rows).stage(stage)?;
        let labels: Vec<Vec<String>> = gt.labels.iter().map(|l| vec![l.to_string()]).collect();
        io::write_csv(&truth.join("labels.csv"), "label", &labels).stage(stage)?;
        fs::write(truth.join("simulation.txt"), format!("method={}\n", sim.method)).map_err(|e| io_err(stage, e))
    }

    pub fn navigator(&mut self) -> Result<(), CliError> {
        let stage = "navigator";
        let (data, traj) = self.data(stage)?;
        let nav = run_navigator(&data, &self.cfg.navigator_config()).stage(stage)?;
        let mut valid = nav.bulk.valid.clone();
        if self.cfg.navigator.image_window_s > 0.0 {
            let shape = self.cfg.shape()?;
            let c = self.cfg.navigator.image_coarse;
            let coarse = shape.map(|d| d.min(c));
            let inav = image_navigator(&data, &traj, self.cfg.navigator.image_window_s, shape, coarse).stage(stage)?;
            let flags = inav.spoke_flags(data.n_spokes);
            valid.iter_mut().zip(&flags).for_each(|(v, f)| *v &= !f);
            let rows: Vec<Vec<String>> = (0..inav.flagged.len())
                .map(|w| vec![w.to_string(), inav.window_starts[w].to_string(), format!("{:?}", inav.correlations[w]), (inav.flagged[w] as u8).to_string()])
                .collect();
            io::write_csv(&self.ws.nav_image(), "window,start_spoke,correlation,flagged", &rows).stage(stage)?;
        }
        let trace = RespiratoryTrace::from_parts(data.timestamps.clone(), nav.filtered, valid, vec![None; data.n_spokes]);
        io::write_trace(&trace, &self.ws.nav()).stage(stage)
    }

    pub fn bin(&mut self) -> Result<(), CliError> {
        let stage = "bin";
        need(stage, &self.ws.nav(), "navigator")?;
        let nav = io::read_trace(&self.ws.nav()).stage(stage)?;
        let trace = bin_states(&nav.times, &nav.values, &nav.valid, self.cfg.recon.n_states).stage(stage)?;
        io::write_trace(&trace, &self.ws.trace()).stage(stage)
    }

    pub fn calib(&mut self) -> Result<(), CliError> {
        let stage = "calib";
        let (data, traj) = self.data(stage)?;
        need(stage, &self.ws.nav(), "navigator")?;
        let nav = io::read_trace(&self.ws.nav()).stage(stage)?;
        let maps = estimate_maps(&data, &traj, self.cfg.shape()?, self.cfg.calib.radius).stage(stage)?;
        let ng = nongated_recon(&data, &traj, &maps, Some(&nav.valid)).stage(stage)?;
        let scale = normalization_scale(&ng, &maps).stage(stage)?;
        io::write_maps(&maps, &self.ws.maps()).stage(stage)?;
        write_image(stage, &ng, &self.ws.image("nongated"))?;
        fs::write(self.ws.calib(), format!("scale = {scale:?}\n")).map_err(|e| io_err(stage, e))
    }

    pub fn xdgrasp(&mut self) -> Result<(), CliError> {
        let stage = "xdgrasp";
        let (data, traj) = self.data(stage)?;
        let trace = self.trace(stage)?;
        let maps = self.maps(stage)?;
        let scale = self.scale(stage)?;
        let cf = self.cfg.recon.coarse_factor;
        let cmaps = resample_maps(&maps, maps.shape.coarse(cf)).stage(stage)?;
        let states = scale_states(&bin_data(&data, &traj, &trace, cf).stage(stage)?, scale);
        let (mr, report) = xd_grasp(&states, &cmaps, &self.cfg.regularizer()?, &self.cfg.recon_solver()).stage(stage)?;
        for (k, img) in mr.images.iter().enumerate() {
            write_image(stage, img, &self.ws.state_image(k))?;
        }
        write_report(stage, &report, &self.ws.report("xdgrasp"))?;
        self.check_objective(stage, &report);
        Ok(())
    }

    pub fn register(&mut self) -> Result<(), CliError> {
        let stage = "register";
        let trace = self.trace(stage)?;
        let m = trace.n_states;
        let mr = self.motion_resolved(stage, m)?;
        let reference = self.reference(m)?;
        let shape = self.cfg.shape()?;
        let coarse = register_all(&mr, reference, &self.cfg.schedule()).stage(stage)?;
        for (k, f) in coarse.iter().enumerate() {
            let fine = upsample_field(f, shape).stage(stage)?;
            for (level, field) in [("coarse", f), ("fine", &fine)] {
                let p = self.ws.field(level, k);
                ensure_parent(stage, &p)?;
                io::write_field(field, &p).stage(stage)?;
                let meta = [
                    ("state", k.to_string()),
                    ("reference", reference.to_string()),
                    ("level", level.to_string()),
                    ("mapping", "warp(state, field) approximates reference".to_string()),
                ];
                io::write_field_meta(&p, &meta).stage(stage)?;
            }
        }
        Ok(())
    }

    pub fn baseline(&mut self, mode: &str) -> Result<(), CliError> {
        let stage = "baseline";
        let modes: Vec<&str> = match mode {
            "all" => vec!["nongated", "hardgated", "softgated", "mr", "moco"],
            m @ ("nongated" | "hardgated" | "softgated" | "mr" | "moco") => vec![m],
            other => return Err(CliError::Config(format!("unknown baseline mode {other:?}"))),
        };
        for m in modes {
            match m {
                "nongated" => {
                    let (data, traj) = self.data(stage)?;
                    need(stage, &self.ws.nav(), "navigator")?;
                    let nav = io::read_trace(&self.ws.nav()).stage(stage)?;
                    let ng = nongated_recon(&data, &traj, &self.maps(stage)?, Some(&nav.valid)).stage(stage)?;
                    write_image(stage, &ng, &self.ws.image("nongated"))?;
                }
                "hardgated" => {
                    let (data, traj) = self.data(stage)?;
                    let img = hard_gated_recon(&data, &traj, &self.maps(stage)?, &self.trace(stage)?, self.cfg.baselines.hard_fraction).stage(stage)?;
                    write_image(stage, &img, &self.ws.image("hardgated"))?;
                }
                "softgated" => {
                    let (data, traj) = self.data(stage)?;
                    let spec = RegularizerSpec { lambda_s: self.cfg.baselines.soft_lambda_s, ..self.cfg.regularizer()? };
                    let (img, report) = soft_gated_recon(
                        &data,
                        &traj,
                        &self.maps(stage)?,
                        &self.trace(stage)?,
                        &self.cfg.soft_gate(),
                        &spec,
                        &self.cfg.recon_solver(),
                    )
                    .stage(stage)?;
                    write_image(stage, &img, &self.ws.image("softgated"))?;
                    write_report(stage, &report, &self.ws.report("softgated"))?;
                    self.check_objective(stage, &report);
                }
                "mr" | "moco" => {
                    let m_states = self.trace(stage)?.n_states;
                    let shape = self.cfg.shape()?;
                    let mr = self.motion_resolved(stage, m_states)?;
                    let fine = MotionResolvedImages {
                        images: mr.images.iter().map(|i| resize_image(i, shape)).collect::<imoco_core::Result<_>>().stage(stage)?,
                    };
                    if m == "mr" {
                        let r = self.reference(m_states)?;
                        write_image(stage, &fine.images[r], &self.ws.image("mr"))?;
                    } else {
                        let fields = self.fields(stage, None, m_states)?;
                        let img = moco_average(&fine, &fields).stage(stage)?;
                        write_image(stage, &img, &self.ws.image("moco"))?;
                    }
                }
                _ => unreachable!(),
            }
        }
        Ok(())
    }

    /// Motion-compensated reconstruction; returns the image and report.
    pub fn imoco_with(&mut self, lambda_s: f64, trace: &RespiratoryTrace, fields: &[MotionField]) -> Result<(GridImage, SolverReport), CliError> {
        let stage = "imoco";
        let (data, traj) = self.data(stage)?;
        let maps = self.maps(stage)?;
        let scale = self.scale(stage)?;
        let states = scale_states(&bin_data(&data, &traj, trace, 1.0).stage(stage)?, scale);
        let warps = state_warps(fields);
        let x0 = if self.cfg.imoco.warm_start {
            let ng = self.read_image(stage, &self.ws.image("nongated"), "calib")?;
            Some(ng.with_values(ng.values.iter().map(|v| v * scale).collect()))
        } else {
            None
        };
        let (mut img, report) =
            imoco_solve_with(&states, &maps, &warps, lambda_s, &self.cfg.tgv(), &self.cfg.imoco_solver(), x0.as_ref(), self.cfg.adjoint()).stage(stage)?;
        img.voxel_size = data.voxel_size.clone();
        Ok((img, report))
    }

    pub fn imoco(&mut self, fields_dir: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
        let stage = "imoco";
        let trace = self.trace(stage)?;
        let fields = self.fields(stage, fields_dir, trace.n_states)?;
        let (img, report) = self.imoco_with(self.cfg.imoco.lambda_s, &trace, &fields)?;
        let path = out.map(Path::to_path_buf).unwrap_or_else(|| self.ws.image("imoco"));
        write_image(stage, &img, &path)?;
        write_report(stage, &report, &self.ws.report("imoco"))?;
        self.check_objective(stage, &report);
        Ok(())
    }

    /// Mean true excursion over the spokes of the reference state.
    fn reference_amplitude(gt: &PhantomGroundTruth, trace: &RespiratoryTrace, reference: usize) -> f64 {
        let s = trace.spokes_in_state(reference);
        s.iter().map(|&i| gt.waveform[i]).sum::<f64>() / s.len().max(1) as f64
    }

    pub fn metrics(&mut self) -> Result<(), CliError> {
        let stage = "metrics";
        self.require_oracle(stage)?;
        let gt = ground_truth(&self.cfg)?;
        let trace = self.trace(stage)?;
        let reference = self.reference(trace.n_states)?;
        let truth = gt.state_image(Self::reference_amplitude(&gt, &trace, reference)).stage(stage)?;
        let rois = RoiSet::from_phantom(&gt, self.cfg.metrics.background_margin).stage(stage)?;
        let lines = gt.profile_lines(0.0);
        let body = gt.body_mask();
        let mut rows = Vec::new();
        let mut errs = Vec::new();
        for m in self.cfg.metrics.methods.clone() {
            let img = self.read_image(stage, &self.ws.image(&m), if m == "imoco" { "imoco" } else { "baseline" })?;
            rows.push(evaluate(&m, &img, &rois, &lines).stage(stage)?);
            errs.push(vec![m.clone(), format!("{:.6}", masked_nrmse(&img, &truth, &body).stage(stage)?)]);
        }
        fs::write(self.ws.metrics(), report_csv(&rows)).map_err(|e| io_err(stage, e))?;
        io::write_csv(&self.ws.nrmse(), "method,nrmse", &errs).stage(stage)
    }

    pub fn run_stage(&mut self, stage: &str) -> Result<(), CliError> {
        match stage {
            "navigator" => self.navigator(),
            "bin" => self.bin(),
            "calib" => self.calib(),
            "xdgrasp" => self.xdgrasp(),
            "register" => self.register(),
            "baseline" => self.baseline("all"),
            "imoco" => self.imoco(None, None),
            "metrics" => self.metrics(),
            other => Err(CliError::Config(format!("unknown stage {other:?}; expected one of {}", STAGES.join(", ")))),
        }
    }

    /// Runs the stages from `from` onwards; metrics only with `--oracle`.
    pub fn pipeline(&mut self, from: &str) -> Result<(), CliError> {
        let start = STAGES.iter().position(|s| *s == from).ok_or_else(|| CliError::Config(format!("unknown stage {from:?}; expected one of {}", STAGES.join(", "))))?;
        need("pipeline", &self.ws.kspace(), "simulate")?;
        for s in &STAGES[start..] {
            if *s == "metrics" && !self.oracle {
                continue;
            }
            self.run_stage(s)?;
        }
        Ok(())
    }

    pub fn study(&mut self, name: &str) -> Result<(), CliError> {
        match name {
            "states" => self.study_states(),
            "lambda" => self.study_lambda(),
            "variants" => self.study_variants(),
            other => Err(CliError::Config(format!("unknown study {other:?}; expected states, lambda or variants"))),
        }
    }

    /// Motion-resolved images and fine fields for one binning and variant.
    fn motion_fields(&mut self, stage: &'static str, trace: &RespiratoryTrace, variant: Variant) -> Result<(MotionResolvedImages, Vec<MotionField>, Vec<MotionField>), CliError> {
        let (data, traj) = self.data(stage)?;
        let maps = self.maps(stage)?;
        let scale = self.scale(stage)?;
        let cf = self.cfg.recon.coarse_factor;
        let cmaps = resample_maps(&maps, maps.shape.coarse(cf)).stage(stage)?;
        let states = scale_states(&bin_data(&data, &traj, trace, cf).stage(stage)?, scale);
        let spec = RegularizerSpec { variant, ..self.cfg.regularizer()? };
        let (mr, report) = xd_grasp(&states, &cmaps, &spec, &self.cfg.recon_solver()).stage(stage)?;
        self.check_objective(stage, &report);
        let reference = self.reference(trace.n_states)?;
        let coarse = register_all(&mr, reference, &self.cfg.schedule()).stage(stage)?;
        let fine = coarse.iter().map(|f| upsample_field(f, maps.shape)).collect::<imoco_core::Result<_>>().stage(stage)?;
        Ok((mr, coarse, fine))
    }

    fn study_states(&mut self) -> Result<(), CliError> {
        let stage = "study";
        self.require_oracle(stage)?;
        need(stage, &self.ws.nav(), "navigator")?;
        let nav = io::read_trace(&self.ws.nav()).stage(stage)?;
        let gt = ground_truth(&self.cfg)?;
        let rois = RoiSet::from_phantom(&gt, self.cfg.metrics.background_margin).stage(stage)?;
        let lines = gt.profile_lines(0.0);
        let shape = self.cfg.shape()?;
        let variant = self.cfg.variant()?;
        let mut rows = Vec::new();
        for m in self.cfg.study.states.clone() {
            let trace = bin_states(&nav.times, &nav.values, &nav.valid, m).stage(stage)?;
            let (mr, _, fine) = self.motion_fields(stage, &trace, variant)?;
            let (img, report) = self.imoco_with(self.cfg.imoco.lambda_s, &trace, &fine)?;
            self.check_objective(stage, &report);
            write_image(stage, &img, &self.ws.root.join("study").join(format!("states_{m}_imoco.cim")))?;
            let r = self.reference(m)?;
            let mr_ref = resize_image(&mr.images[r], shape).stage(stage)?;
            let md = evaluate("imoco", &img, &rois, &lines).stage(stage)?.md;
            let md_mr = evaluate("mr", &mr_ref, &rois, &lines).stage(stage)?.md;
            rows.push(vec![m.to_string(), format!("{md:.6}"), format!("{md_mr:.6}")]);
        }
        ensure_dir(stage, &self.ws.root)?;
        io::write_csv(&self.ws.study("states"), "n_states,MD_imoco,MD_mr", &rows).stage(stage)
    }

    fn study_lambda(&mut self) -> Result<(), CliError> {
        let stage = "study";
        self.require_oracle(stage)?;
        let gt = ground_truth(&self.cfg)?;
        let rois = RoiSet::from_phantom(&gt, self.cfg.metrics.background_margin).stage(stage)?;
        let trace = self.trace(stage)?;
        let fields = self.fields(stage, None, trace.n_states)?;
        let mut rows = Vec::new();
        for lambda in self.cfg.study.lambdas.clone() {
            let (img, report) = self.imoco_with(lambda, &trace, &fields)?;
            self.check_objective(stage, &report);
            write_image(stage, &img, &self.ws.root.join("study").join(format!("lambda_{lambda}_imoco.cim")))?;
            let a = |roi: &[bool]| imoco_core::metrics::asnr(&img, roi, &rois.background);
            rows.push(vec![
                format!("{lambda}"),
                format!("{:.6}", a(&rois.airway).stage(stage)?),
                format!("{:.6}", a(&rois.parenchyma).stage(stage)?),
                format!("{:.6}", a(&rois.aorta).stage(stage)?),
            ]);
        }
        io::write_csv(&self.ws.study("lambda"), "lambda,aSNR_airway,aSNR_parenchyma,aSNR_aorta", &rows).stage(stage)
    }

    fn study_variants(&mut self) -> Result<(), CliError> {
        let stage = "study";
        self.require_oracle(stage)?;
        let gt = ground_truth(&self.cfg)?;
        let lung = gt.mask(LUNG);
        let trace = self.trace(stage)?;
        let m = trace.n_states;
        let reference = self.reference(m)?;
        let extreme = if reference == m - 1 { 0 } else { m - 1 };
        let variants = self.cfg.study.variants.iter().map(|v| v.parse::<Variant>()).collect::<imoco_core::Result<Vec<_>>>().stage(stage)?;
        let mut results = Vec::new();
        for &v in &variants {
            results.push((v, self.motion_fields(stage, &trace, v)?));
        }
        let (_, (_, _, base)) = &results[0];
        let mut summary = Vec::new();
        let mut per_state = Vec::new();
        for (v, (mr, coarse, fine)) in &results {
            let (mut cc_sum, mut d_sum, mut n) = (0.0, 0.0, 0.0);
            for k in (0..m).filter(|&k| k != reference) {
                let cc = field_cc(&fine[k], &base[k], Some(&lung)).stage(stage)?;
                let d = field_dist(&fine[k], &base[k], Some(&lung)).stage(stage)?;
                per_state.push(vec![v.to_string(), k.to_string(), format!("{cc:.6}"), format!("{d:.6}")]);
                cc_sum += cc;
                d_sum += d;
                n += 1.0;
            }
            let before = rmse(&mr.images[extreme], &mr.images[reference]).stage(stage)?;
            let after = rmse(&warp(&mr.images[extreme], &coarse[extreme]).stage(stage)?, &mr.images[reference]).stage(stage)?;
            let n = f64::max(n, 1.0);
            summary.push(vec![v.to_string(), format!("{:.6}", cc_sum / n), format!("{:.6}", d_sum / n), format!("{before:.6}"), format!("{after:.6}")]);
        }
        io::write_csv(&self.ws.study("variants"), "variant,field_cc,field_dist,rmse_before,rmse_after", &summary).stage(stage)?;
        io::write_csv(&self.ws.study("variants_states"), "variant,state,field_cc,field_dist", &per_state).stage(stage)
    }

    /// Greymaps of one image, or of every stored image.
    pub fn export(&mut self, input: Option<&Path>, window: Option<(f64, f64)>) -> Result<Vec<PathBuf>, CliError> {
        let stage = "export";
        let inputs: Vec<PathBuf> = match input {
            Some(p) => vec![p.to_path_buf()],
            None => {
                let mut v = Vec::new();
                for dir in ["images", "mr"] {
                    let d = self.ws.root.join(dir);
                    if let Ok(rd) = fs::read_dir(&d) {
                        for e in rd.flatten() {
                            let p = e.path();
                            if p.extension().is_some_and(|x| x == "cim") {
                                v.push(p);
                            }
                        }
                    }
                }
                v.sort();
                v
            }
        };
        if inputs.is_empty() {
            return Err(CliError::MissingInput { stage, path: self.ws.root.join("images").display().to_string(), needs: "pipeline" });
        }
        let out = self.ws.export_dir();
        ensure_dir(stage, &out)?;
        let mut written = Vec::new();
        for p in inputs {
            let img = self.read_image(stage, &p, "pipeline")?;
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
            written.extend(io::export_image(&img, &out.join(stem), window).stage(stage)?);
        }
        Ok(written)
    }
}
