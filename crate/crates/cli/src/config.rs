//! Pipeline configuration: TOML file with documented keys, overridable by
//! command-line flags.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use imoco_core::imoco::{TgvParams, WarpAdjoint};
use imoco_core::navigator::NavigatorConfig;
use imoco_core::phantom::{BulkEvent, RespWaveformParams, ShiftEvent};
use imoco_core::recon::{RegularizerSpec, SoftGateParams, Variant};
use imoco_core::registration::PyramidSchedule;
use imoco_core::solver::{DataMode, SolverOptions};
use imoco_core::{ReconConfig, Shape};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub phantom: PhantomSection,
    pub waveform: WaveformSection,
    pub acquisition: AcquisitionSection,
    pub navigator: NavigatorSection,
    pub calib: CalibSection,
    pub recon: ReconSection,
    pub registration: RegistrationSection,
    pub imoco: ImocoSection,
    pub baselines: BaselineSection,
    pub metrics: MetricsSection,
    pub study: StudySection,
    pub paths: PathsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub shape: Vec<usize>,
    pub voxel_size: Vec<f64>,
    pub n_coils: usize,
    pub seed: u64,
    pub coil_seed: u64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection { shape: vec![128, 128], voxel_size: vec![1.0, 1.0], n_coils: 6, seed: 0, coil_seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BulkEventEntry {
    pub time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftEventEntry {
    pub time: f64,
    pub duration: f64,
    pub shift: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveformSection {
    pub period: f64,
    pub amplitude: f64,
    pub drift_rate: f64,
    pub jitter: f64,
    pub duration: f64,
    pub spoke_interval: f64,
    pub seed: u64,
    pub bulk_events: Vec<BulkEventEntry>,
    pub shift_events: Vec<ShiftEventEntry>,
}

impl Default for WaveformSection {
    fn default() -> Self {
        let d = RespWaveformParams::default();
        WaveformSection {
            period: d.period,
            amplitude: d.amplitude,
            drift_rate: d.drift_rate,
            jitter: d.jitter,
            duration: d.duration,
            spoke_interval: d.spoke_interval,
            seed: 1,
            bulk_events: Vec::new(),
            shift_events: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionSection {
    pub n_readout: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for AcquisitionSection {
    fn default() -> Self {
        AcquisitionSection { n_readout: 64, noise_sigma: 75.0, seed: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavigatorSection {
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub cutoff_hz: f64,
    /// Image-navigator window in seconds; 0 disables it.
    pub image_window_s: f64,
    pub image_coarse: usize,
}

impl Default for NavigatorSection {
    fn default() -> Self {
        let d = NavigatorConfig::default();
        NavigatorSection { band_low_hz: d.band.0, band_high_hz: d.band.1, cutoff_hz: d.cutoff_hz, image_window_s: 0.0, image_coarse: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibSection {
    pub radius: f64,
}

impl Default for CalibSection {
    fn default() -> Self {
        CalibSection { radius: 0.05 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataModeKey {
    Toeplitz,
    Dual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSection {
    pub n_states: usize,
    pub variant: String,
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub coarse_factor: f64,
    pub seed: u64,
    pub data_mode: DataModeKey,
}

impl Default for ReconSection {
    fn default() -> Self {
        let d = ReconConfig::default();
        ReconSection {
            n_states: d.n_states,
            variant: "s3".into(),
            lambda_s: d.lambda_s,
            lambda_t: d.lambda_t,
            max_iters: d.max_iters,
            tolerance: d.tolerance,
            coarse_factor: d.coarse_factor,
            seed: d.seed,
            data_mode: DataModeKey::Toeplitz,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationSection {
    pub levels: usize,
    pub iters: usize,
    pub sigma: f64,
    /// `auto` (the expiratory state) or a state index.
    pub reference: String,
}

impl Default for RegistrationSection {
    fn default() -> Self {
        RegistrationSection { levels: 4, iters: 100, sigma: 1.5, reference: "auto".into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjointKey {
    Transpose,
    Reverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImocoSection {
    pub lambda_s: f64,
    pub alpha1: f64,
    pub alpha_ratio: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub adjoint: AdjointKey,
    pub warm_start: bool,
}

impl Default for ImocoSection {
    fn default() -> Self {
        ImocoSection { lambda_s: 0.05, alpha1: 1.0, alpha_ratio: 2.0, max_iters: 60, tolerance: 1e-4, adjoint: AdjointKey::Transpose, warm_start: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub hard_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft_beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft_delta: Option<f64>,
    pub soft_lambda_s: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection { hard_fraction: 0.4, soft_beta: None, soft_delta: None, soft_lambda_s: 0.0 }
    }
}

pub const METHODS: [&str; 6] = ["nongated", "hardgated", "softgated", "mr", "moco", "imoco"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub background_margin: usize,
    pub methods: Vec<String>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { background_margin: 4, methods: METHODS.iter().map(|s| s.to_string()).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub states: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub variants: Vec<String>,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection { states: vec![2, 4, 6, 8], lambdas: vec![0.0, 0.01, 0.05, 0.1], variants: vec!["s1".into(), "s2".into(), "s3".into()] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub work_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection { work_dir: PathBuf::from("run") }
    }
}

/// Every accepted key with its meaning, as printed by `--help-config`.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("phantom.shape", "grid size per axis, axis 0 superior-inferior (2 or 3 entries)"),
    ("phantom.voxel_size", "voxel size per axis in mm"),
    ("phantom.n_coils", "number of receive coils"),
    ("phantom.seed", "seed of the vessel layout"),
    ("phantom.coil_seed", "seed of the coil sensitivity maps"),
    ("waveform.period", "mean breathing period in s"),
    ("waveform.amplitude", "diaphragm excursion in voxels"),
    ("waveform.drift_rate", "baseline drift in voxels per s"),
    ("waveform.jitter", "per-cycle fractional period variation"),
    ("waveform.duration", "scan duration in s"),
    ("waveform.spoke_interval", "repetition time per spoke in s"),
    ("waveform.seed", "seed of the breathing waveform"),
    ("waveform.bulk_events", "array of {time, duration (optional, absent = permanent), offset in amplitudes}"),
    ("waveform.shift_events", "array of {time, duration, shift (voxels per axis)} rigid translations"),
    ("acquisition.n_readout", "samples per half-spoke"),
    ("acquisition.noise_sigma", "std of the complex k-space noise"),
    ("acquisition.seed", "seed of the noise"),
    ("navigator.band_low_hz", "lower edge of the respiratory band for coil selection"),
    ("navigator.band_high_hz", "upper edge of the respiratory band for coil selection"),
    ("navigator.cutoff_hz", "low-pass cutoff of the combined navigator"),
    ("navigator.image_window_s", "image-navigator window in s (0 disables)"),
    ("navigator.image_coarse", "image-navigator grid size per axis (<= 32)"),
    ("calib.radius", "k-space radius used for coil sensitivity estimation (cycles/voxel)"),
    ("recon.n_states", "number of motion states"),
    ("recon.variant", "motion-resolved regularizer: s1, s2 or s3"),
    ("recon.lambda_s", "spatial weight of the motion-resolved reconstruction"),
    ("recon.lambda_t", "motion-dimension weight of the motion-resolved reconstruction"),
    ("recon.max_iters", "iterations of the motion-resolved and soft-gated solvers"),
    ("recon.tolerance", "relative-change stopping tolerance"),
    ("recon.coarse_factor", "voxel-size factor of the coarse motion-resolved grid"),
    ("recon.seed", "seed of the operator-norm power iteration"),
    ("recon.data_mode", "data-term handling: toeplitz or dual"),
    ("registration.levels", "pyramid levels"),
    ("registration.iters", "total Demons iterations across levels"),
    ("registration.sigma", "Gaussian field smoothing in voxels"),
    ("registration.reference", "reference state: auto (expiration) or an index"),
    ("imoco.lambda_s", "TGV weight of the motion-compensated reconstruction"),
    ("imoco.alpha1", "first-order TGV weight"),
    ("imoco.alpha_ratio", "ratio of the second-order to the first-order TGV weight"),
    ("imoco.max_iters", "iterations of the motion-compensated solver"),
    ("imoco.tolerance", "relative-change stopping tolerance"),
    ("imoco.adjoint", "warp adjoint: transpose or reverse (negated field)"),
    ("imoco.warm_start", "start from the non-gated image instead of zero"),
    ("baselines.hard_fraction", "fraction of valid spokes kept by hard gating"),
    ("baselines.soft_beta", "soft-gating decay rate (optional, default 2/range)"),
    ("baselines.soft_delta", "soft-gating tolerance band (optional, default 10% of range)"),
    ("baselines.soft_lambda_s", "spatial weight of the soft-gated reconstruction"),
    ("metrics.background_margin", "minimum background distance from the body in voxels"),
    ("metrics.methods", "methods evaluated by the metrics stage"),
    ("study.states", "state counts of the states study"),
    ("study.lambdas", "weights of the lambda study"),
    ("study.variants", "variants of the variants study; the first is the reference"),
    ("paths.work_dir", "directory holding every artifact"),
];

pub fn help_config() -> String {
    let mut s = String::from("Configuration keys (TOML):\n");
    for (k, d) in KEY_DOCS {
        s.push_str(&format!("  {k:28} {d}\n"));
    }
    s
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(PipelineConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| cfg_err(format!("{}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.shape()?;
        if self.phantom.shape.iter().any(|&d| d < 64) {
            return Err(cfg_err("phantom.shape entries must be >= 64"));
        }
        if self.phantom.voxel_size.len() != self.phantom.shape.len() {
            return Err(cfg_err("phantom.voxel_size needs one entry per axis"));
        }
        if self.phantom.n_coils == 0 {
            return Err(cfg_err("phantom.n_coils must be >= 1"));
        }
        self.waveform_params().validate().map_err(|e| cfg_err(e.to_string()))?;
        for s in &self.waveform.shift_events {
            if s.shift.len() != self.phantom.shape.len() {
                return Err(cfg_err("waveform.shift_events shift needs one component per axis"));
            }
        }
        if self.acquisition.n_readout < 4 || !(self.acquisition.noise_sigma >= 0.0) {
            return Err(cfg_err("acquisition.n_readout must be >= 4 and noise_sigma >= 0"));
        }
        self.variant()?;
        self.recon_config().validate().map_err(|e| cfg_err(e.to_string()))?;
        self.tgv().validate().map_err(|e| cfg_err(e.to_string()))?;
        self.schedule().validate().map_err(|e| cfg_err(e.to_string()))?;
        self.reference_override()?;
        if !(self.baselines.hard_fraction > 0.0 && self.baselines.hard_fraction <= 1.0) {
            return Err(cfg_err("baselines.hard_fraction must be in (0, 1]"));
        }
        for m in &self.metrics.methods {
            if !METHODS.contains(&m.as_str()) {
                return Err(cfg_err(format!("unknown method {m:?}; expected one of {}", METHODS.join(", "))));
            }
        }
        for v in &self.study.variants {
            v.parse::<Variant>().map_err(|e| cfg_err(e.to_string()))?;
        }
        if self.study.states.iter().any(|&m| m == 0) {
            return Err(cfg_err("study.states entries must be >= 1"));
        }
        Ok(())
    }

    pub fn shape(&self) -> Result<Shape, CliError> {
        Shape::new(&self.phantom.shape).map_err(|e| cfg_err(format!("phantom.shape: {e}")))
    }

    pub fn waveform_params(&self) -> RespWaveformParams {
        let w = &self.waveform;
        RespWaveformParams {
            period: w.period,
            amplitude: w.amplitude,
            drift_rate: w.drift_rate,
            jitter: w.jitter,
            bulk_events: w.bulk_events.iter().map(|e| BulkEvent { time: e.time, duration: e.duration, offset: e.offset }).collect(),
            duration: w.duration,
            spoke_interval: w.spoke_interval,
        }
    }

    pub fn shift_events(&self) -> Vec<ShiftEvent> {
        self.waveform
            .shift_events
            .iter()
            .map(|e| ShiftEvent { time: e.time, duration: e.duration, shift: e.shift.clone() })
            .collect()
    }

    pub fn navigator_config(&self) -> NavigatorConfig {
        NavigatorConfig { band: (self.navigator.band_low_hz, self.navigator.band_high_hz), cutoff_hz: self.navigator.cutoff_hz }
    }

    pub fn variant(&self) -> Result<Variant, CliError> {
        self.recon.variant.parse::<Variant>().map_err(|e| cfg_err(format!("recon.variant: {e}")))
    }

    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            n_states: self.recon.n_states,
            lambda_s: self.recon.lambda_s,
            lambda_t: self.recon.lambda_t,
            tgv_alpha1: self.imoco.alpha1,
            tgv_alpha0: self.imoco.alpha1 * self.imoco.alpha_ratio,
            max_iters: self.recon.max_iters,
            tolerance: self.recon.tolerance,
            coarse_factor: self.recon.coarse_factor,
            seed: self.recon.seed,
        }
    }

    pub fn regularizer(&self) -> Result<RegularizerSpec, CliError> {
        Ok(RegularizerSpec { variant: self.variant()?, lambda_s: self.recon.lambda_s, lambda_t: self.recon.lambda_t })
    }

    fn data_mode(&self) -> DataMode {
        match self.recon.data_mode {
            DataModeKey::Toeplitz => DataMode::Toeplitz,
            DataModeKey::Dual => DataMode::Dual,
        }
    }

    pub fn recon_solver(&self) -> SolverOptions {
        SolverOptions {
            max_iters: self.recon.max_iters,
            tol: self.recon.tolerance,
            seed: self.recon.seed,
            data_mode: self.data_mode(),
            ..SolverOptions::default()
        }
    }

    pub fn imoco_solver(&self) -> SolverOptions {
        SolverOptions { max_iters: self.imoco.max_iters, tol: self.imoco.tolerance, ..self.recon_solver() }
    }

    pub fn tgv(&self) -> TgvParams {
        TgvParams { alpha1: self.imoco.alpha1, alpha0: self.imoco.alpha1 * self.imoco.alpha_ratio }
    }

    pub fn adjoint(&self) -> WarpAdjoint {
        match self.imoco.adjoint {
            AdjointKey::Transpose => WarpAdjoint::Transpose,
            AdjointKey::Reverse => WarpAdjoint::Reverse,
        }
    }

    pub fn schedule(&self) -> PyramidSchedule {
        PyramidSchedule::with_total(self.registration.levels, self.registration.iters, self.registration.sigma)
    }

    /// Explicit reference state, or `None` for `auto`.
    pub fn reference_override(&self) -> Result<Option<usize>, CliError> {
        match self.registration.reference.as_str() {
            "auto" => Ok(None),
            s => s.parse::<usize>().map(Some).map_err(|_| cfg_err(format!("registration.reference must be auto or an index, got {s:?}"))),
        }
    }

    pub fn soft_gate(&self) -> SoftGateParams {
        SoftGateParams { beta: self.baselines.soft_beta, delta: self.baselines.soft_delta }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_keys(v: &toml::Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            toml::Value::Table(t) if prefix.is_empty() || prefix.matches('.').count() == 0 => {
                for (k, x) in t {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    leaf_keys(x, &p, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }

    #[test]
    fn every_key_is_documented() {
        let mut cfg = PipelineConfig::default();
        cfg.waveform.bulk_events.push(BulkEventEntry { time: 1.0, duration: Some(1.0), offset: 4.0 });
        cfg.waveform.shift_events.push(ShiftEventEntry { time: 1.0, duration: 1.0, shift: vec![1.0, 0.0] });
        cfg.baselines.soft_beta = Some(1.0);
        cfg.baselines.soft_delta = Some(0.1);
        let v: toml::Value = toml::from_str(&cfg.to_toml()).unwrap();
        let mut keys = Vec::new();
        leaf_keys(&v, "", &mut keys);
        let documented: Vec<&str> = KEY_DOCS.iter().map(|(k, _)| *k).collect();
        for k in &keys {
            assert!(documented.contains(&k.as_str()), "undocumented key {k}");
        }
        assert_eq!(keys.len(), documented.len());
    }

    #[test]
    fn round_trip_and_defaults() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(PipelineConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(PipelineConfig::parse("").unwrap(), cfg);
        let p = PipelineConfig::parse("[recon]\nn_states = 4\n").unwrap();
        assert_eq!(p.recon.n_states, 4);
        assert_eq!(p.recon.lambda_s, 0.01);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(PipelineConfig::parse("[recon]\nstates = 4\n"), Err(CliError::Config(_))));
        assert!(matches!(PipelineConfig::parse("[bogus]\n"), Err(CliError::Config(_))));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut cfg = PipelineConfig::default();
        cfg.recon.variant = "s4".into();
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.registration.reference = "first".into();
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.metrics.methods = vec!["nufft".into()];
        assert!(cfg.validate().is_err());
    }
}
