//! Command-line orchestration of the motion-compensated reconstruction
//! pipeline over persisted artifacts.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::{Run, Workspace, STAGES};
use config::{AdjointKey, DataModeKey, PipelineConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "imoco", version, about = "Motion-compensated radial MRI reconstruction pipeline")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Artifact directory (overrides paths.work_dir).
    #[arg(long, global = true)]
    pub work_dir: Option<PathBuf>,
    /// Worker threads for every parallel stage.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Allow metric and study stages to read the simulated ground truth.
    #[arg(long, global = true)]
    pub oracle: bool,
    /// Sets the phantom, coil, waveform and noise seeds at once.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print every configuration key and exit.
    #[arg(long)]
    pub help_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Args, Default)]
pub struct ReconFlags {
    #[arg(long)]
    pub states: Option<usize>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub lambda_s: Option<f64>,
    #[arg(long)]
    pub lambda_t: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub coarse_factor: Option<f64>,
    /// toeplitz or dual
    #[arg(long)]
    pub data_mode: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the phantom acquisition and write the ground-truth bundle.
    Simulate {
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        coils: Option<usize>,
    },
    /// Extract, combine and filter the self-navigator; flag bulk motion.
    Navigator {
        #[arg(long)]
        cutoff: Option<f64>,
        /// Image-navigator window in seconds (0 disables).
        #[arg(long)]
        window: Option<f64>,
    },
    /// Sort valid spokes into motion states.
    Bin {
        #[arg(long)]
        states: Option<usize>,
    },
    /// Estimate coil maps, the non-gated image and the intensity scale.
    Calib {
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Coarse motion-resolved reconstruction.
    Xdgrasp {
        #[command(flatten)]
        recon: ReconFlags,
    },
    /// Reconstruction by mode: nongated, gated, softgated or xdgrasp.
    Recon {
        #[arg(long)]
        mode: String,
        #[command(flatten)]
        recon: ReconFlags,
    },
    /// Register every motion state onto the reference.
    Register {
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        /// auto or a state index
        #[arg(long)]
        reference: Option<String>,
    },
    /// Motion-compensated reconstruction.
    Imoco {
        #[arg(long)]
        lambda_s: Option<f64>,
        #[arg(long)]
        alpha_ratio: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        /// Directory with fine_NNN.mfd fields.
        #[arg(long)]
        fields: Option<PathBuf>,
        /// Output image path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// transpose or reverse
        #[arg(long)]
        adjoint: Option<String>,
        #[arg(long)]
        warm_start: bool,
    },
    /// Comparison reconstructions.
    Baseline {
        /// all, nongated, hardgated, softgated, mr or moco
        #[arg(long, default_value = "all")]
        mode: String,
    },
    /// Image-quality metrics against the simulated truth (needs --oracle).
    Metrics,
    /// Every stage from navigator to metrics.
    Pipeline {
        /// First stage to run.
        #[arg(long, default_value = "navigator")]
        from: String,
        #[command(flatten)]
        recon: ReconFlags,
        #[arg(long)]
        imoco_lambda: Option<f64>,
    },
    /// Hyper-parameter sweeps: states, lambda or variants (needs --oracle).
    Study { name: String },
    /// Greymap export of stored images.
    Export {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Display window as lo,hi.
        #[arg(long)]
        window: Option<String>,
    },
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn data_mode(s: &str) -> Result<DataModeKey, CliError> {
    match s {
        "toeplitz" => Ok(DataModeKey::Toeplitz),
        "dual" => Ok(DataModeKey::Dual),
        _ => Err(CliError::Config(format!("data mode must be toeplitz or dual, got {s:?}"))),
    }
}

impl ReconFlags {
    fn apply(&self, cfg: &mut PipelineConfig) -> Result<(), CliError> {
        let r = &mut cfg.recon;
        set(&mut r.n_states, self.states);
        set(&mut r.variant, self.variant.clone());
        set(&mut r.lambda_s, self.lambda_s);
        set(&mut r.lambda_t, self.lambda_t);
        set(&mut r.max_iters, self.iters);
        set(&mut r.tolerance, self.tol);
        set(&mut r.coarse_factor, self.coarse_factor);
        if let Some(m) = &self.data_mode {
            r.data_mode = data_mode(m)?;
        }
        Ok(())
    }
}

fn parse_window(s: &str) -> Result<(f64, f64), CliError> {
    let bad = || CliError::Config(format!("window must be lo,hi with lo < hi, got {s:?}"));
    let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
    let (lo, hi): (f64, f64) = (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?);
    if lo < hi {
        Ok((lo, hi))
    } else {
        Err(bad())
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate { .. } => "simulate",
        Command::Navigator { .. } => "navigator",
        Command::Bin { .. } => "bin",
        Command::Calib { .. } => "calib",
        Command::Xdgrasp { .. } => "xdgrasp",
        Command::Recon { .. } => "recon",
        Command::Register { .. } => "register",
        Command::Imoco { .. } => "imoco",
        Command::Baseline { .. } => "baseline",
        Command::Metrics => "metrics",
        Command::Pipeline { .. } => "pipeline",
        Command::Study { .. } => "study",
        Command::Export { .. } => "export",
    }
}

/// Resolves the configuration: defaults, then the file, then flags.
pub fn resolve(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(w) = &cli.work_dir {
        cfg.paths.work_dir = w.clone();
    }
    if let Some(s) = cli.seed {
        cfg.phantom.seed = s;
        cfg.phantom.coil_seed = s;
        cfg.waveform.seed = s;
        cfg.acquisition.seed = s;
    }
    match &cli.command {
        Some(Command::Simulate { noise_sigma, duration, coils }) => {
            set(&mut cfg.acquisition.noise_sigma, *noise_sigma);
            set(&mut cfg.waveform.duration, *duration);
            set(&mut cfg.phantom.n_coils, *coils);
        }
        Some(Command::Navigator { cutoff, window }) => {
            set(&mut cfg.navigator.cutoff_hz, *cutoff);
            set(&mut cfg.navigator.image_window_s, *window);
        }
        Some(Command::Bin { states }) => set(&mut cfg.recon.n_states, *states),
        Some(Command::Calib { radius }) => set(&mut cfg.calib.radius, *radius),
        Some(Command::Xdgrasp { recon }) | Some(Command::Recon { recon, .. }) => recon.apply(&mut cfg)?,
        Some(Command::Register { levels, iters, sigma, reference }) => {
            set(&mut cfg.registration.levels, *levels);
            set(&mut cfg.registration.iters, *iters);
            set(&mut cfg.registration.sigma, *sigma);
            set(&mut cfg.registration.reference, reference.clone());
        }
        Some(Command::Imoco { lambda_s, alpha_ratio, iters, tol, adjoint, warm_start, .. }) => {
            let i = &mut cfg.imoco;
            set(&mut i.lambda_s, *lambda_s);
            set(&mut i.alpha_ratio, *alpha_ratio);
            set(&mut i.max_iters, *iters);
            set(&mut i.tolerance, *tol);
            i.warm_start |= *warm_start;
            if let Some(a) = adjoint {
                i.adjoint = match a.as_str() {
                    "transpose" => AdjointKey::Transpose,
                    "reverse" => AdjointKey::Reverse,
                    _ => return Err(CliError::Config(format!("adjoint must be transpose or reverse, got {a:?}"))),
                };
            }
        }
        Some(Command::Pipeline { recon, imoco_lambda, .. }) => {
            recon.apply(&mut cfg)?;
            set(&mut cfg.imoco.lambda_s, *imoco_lambda);
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Executes the parsed command line. Objective increases are reported
/// after every output has been written.
pub fn run(cli: Cli) -> Result<(), CliError> {
    if cli.help_config {
        print!("{}", config::help_config());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(CliError::Config("no command given; see --help".into()));
    };
    let cfg = resolve(&cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(e.to_string()))?;
    }
    let root = cfg.paths.work_dir.clone();
    std::fs::create_dir_all(&root).map_err(|e| CliError::Stage { stage: "config", source: e.into() })?;
    let name = command_name(command);
    std::fs::write(root.join(format!("config.{name}.toml")), cfg.to_toml()).map_err(|e| CliError::Stage { stage: "config", source: e.into() })?;
    let mut run = Run { cfg, ws: Workspace::new(&root), oracle: cli.oracle, warnings: Vec::new() };
    match command {
        Command::Simulate { .. } => run.simulate()?,
        Command::Navigator { .. } => run.navigator()?,
        Command::Bin { .. } => run.bin()?,
        Command::Calib { .. } => run.calib()?,
        Command::Xdgrasp { .. } => run.xdgrasp()?,
        Command::Recon { mode, .. } => match mode.as_str() {
            "nongated" => run.baseline("nongated")?,
            "gated" => run.baseline("hardgated")?,
            "softgated" => run.baseline("softgated")?,
            "xdgrasp" => run.xdgrasp()?,
            m => return Err(CliError::Config(format!("recon mode must be nongated, gated, softgated or xdgrasp, got {m:?}"))),
        },
        Command::Register { .. } => run.register()?,
        Command::Imoco { fields, out, .. } => run.imoco(fields.as_deref(), out.as_deref())?,
        Command::Baseline { mode } => run.baseline(mode)?,
        Command::Metrics => run.metrics()?,
        Command::Pipeline { from, .. } => {
            if !STAGES.contains(&from.as_str()) {
                return Err(CliError::Config(format!("unknown stage {from:?}; expected one of {}", STAGES.join(", "))));
            }
            run.pipeline(from)?
        }
        Command::Study { name } => run.study(name)?,
        Command::Export { input, window } => {
            let w = window.as_deref().map(parse_window).transpose()?;
            run.export(input.as_deref(), w)?;
        }
    }
    match run.warnings.into_iter().next() {
        Some(w) => Err(w),
        None => Ok(()),
    }
}
