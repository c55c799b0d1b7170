mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use msdscope::estimator::{optimize, EstimatorOptions};
use msdscope::rheology::{mc_moduli, moduli, smooth_external_msd, MaterialSpec, McOptions, ModuliCurve};
use msdscope::simkit::{simulate, true_msd, write_trajectories_csv, RenderSpec, SimulationSpec};
use msdscope::spectral::{ddm_uq_baseline, fft_stack, structure_function};
use msdscope::stackio::{export_curve, normalize, read_msd_csv, read_stack, write_stack, CurveTable};
use serde_json::json;

use config::{Baseline, ConfigError, RunConfig, Smooth};

const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_BAD_INPUT: u8 = 3;
const DEFAULT_PARTICLES: f64 = 100.0;

/// Model-free MSD estimation from microscopy image stacks.
#[derive(Parser, Debug)]
#[command(name = "msdscope", version)]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Shared {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic video from a particle model.
    Simulate {
        /// slow-bm, fast-bm, sub-fbm, super-fbm, ou or ou-fbm.
        #[arg(long)]
        preset: Option<String>,
        /// Frame side in pixels.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        /// Number of simulated particles.
        #[arg(long)]
        particles: Option<usize>,
        /// Also dump trajectories as particle,frame,x,y.
        #[arg(long)]
        trajectories: bool,
    },
    /// Estimate the MSD of a stack.
    Analyze {
        /// Stack file.
        input: Option<PathBuf>,
        /// Add 95% bounds.
        #[arg(long)]
        uq: bool,
        /// Effective number of particles for the bounds.
        #[arg(long)]
        particles: Option<f64>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Storage and loss moduli from an MSD csv.
    Moduli {
        /// MSD csv (lag_time,msd[,msd_lower,msd_upper]).
        input: Option<PathBuf>,
        /// Kelvin.
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        radius_nm: Option<f64>,
        /// Monte Carlo draws when bounds are present.
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long, value_enum)]
        smooth: Option<Smooth>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Analyze { .. } => "analyze",
            Command::Moduli { .. } => "moduli",
        }
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.shared.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let s = &cli.shared;
    if let Some(v) = s.seed {
        cfg.seed = v;
    }
    if let Some(v) = s.threads {
        cfg.threads = v;
    }
    if let Some(v) = &s.out {
        cfg.out = v.clone();
    }
    match &cli.command {
        Command::Simulate { preset, size, frames, particles, trajectories } => {
            if let Some(p) = preset {
                // a preset on the command line beats a model from the file
                cfg.simulate.preset = Some(p.clone());
                cfg.model = None;
            }
            cfg.simulate.size = size.unwrap_or(cfg.simulate.size);
            cfg.simulate.frames = frames.unwrap_or(cfg.simulate.frames);
            cfg.simulate.particles = particles.unwrap_or(cfg.simulate.particles);
            cfg.simulate.trajectories |= trajectories;
        }
        Command::Analyze { input, uq, particles, baseline } => {
            if input.is_some() {
                cfg.analyze.input = input.clone();
            }
            cfg.analyze.uq |= uq;
            if particles.is_some() {
                cfg.analyze.particles = *particles;
            }
            cfg.analyze.baseline = baseline.unwrap_or(cfg.analyze.baseline);
        }
        Command::Moduli { input, temperature, radius_nm, draws, smooth } => {
            if input.is_some() {
                cfg.moduli.input = input.clone();
            }
            if temperature.is_some() {
                cfg.moduli.temperature = *temperature;
            }
            if radius_nm.is_some() {
                cfg.moduli.radius_nm = *radius_nm;
            }
            cfg.moduli.draws = draws.unwrap_or(cfg.moduli.draws);
            cfg.moduli.smooth = smooth.unwrap_or(cfg.moduli.smooth);
        }
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Enough to replay: the full effective config (also written as TOML).
fn write_provenance(cfg: &RunConfig, command: &str, outputs: &[&str]) -> Result<()> {
    fs::write(cfg.out.join("config.toml"), cfg.to_toml())?;
    let prov = json!({
        "program": "msdscope",
        "version": env!("CARGO_PKG_VERSION"),
        "git_hash": env!("MSDSCOPE_GIT_HASH"),
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "replay": format!("msdscope {command} --config config.toml"),
        "config": cfg,
        "outputs": outputs,
    });
    write_json(&cfg.out.join("provenance.json"), &prov)
}

fn cmd_simulate(cfg: &RunConfig) -> Result<u8> {
    let model = cfg.resolved_model()?;
    let sim = &cfg.simulate;
    let r = &cfg.render;
    let spec = SimulationSpec {
        model,
        render: RenderSpec { y_max: r.y_max, sigma_p: r.sigma_p, noise_b: r.noise_b, rng_seed: cfg.seed },
        particles: sim.particles,
        n1: sim.size,
        n2: sim.size,
        frames: sim.frames,
        dt_min: sim.dt_min,
        px_size: sim.px_size,
    };
    info!("simulating {} ({}x{}x{})", model.name(), sim.size, sim.size, sim.frames);
    let (traj, stack) = simulate(&spec)?;
    write_stack(&stack, cfg.out.join("stack.raw"))?;
    let lags: Vec<f64> = (1..sim.frames).map(|k| k as f64 * sim.dt_min).collect();
    // the model is in pixel units
    let truth = true_msd(&model, &lags)?.scaled(sim.px_size * sim.px_size);
    export_curve(&CurveTable::from_msd(&truth), cfg.out.join("true_msd.csv"))?;
    let mut outputs = vec!["stack.raw", "true_msd.csv"];
    if sim.trajectories {
        write_trajectories_csv(&traj, cfg.out.join("trajectories.csv"))?;
        outputs.push("trajectories.csv");
    }
    write_provenance(cfg, "simulate", &outputs)?;
    Ok(0)
}

fn baseline_table(stack: &msdscope::ImageStack, rings: &[usize]) -> Result<CurveTable> {
    let spec = fft_stack(&normalize(stack))?;
    let lags: Vec<usize> = (1..spec.n).collect();
    let sf = structure_function(&spec, &lags)?;
    let base = ddm_uq_baseline(&sf, &spec, rings);
    if let Some(d) = &base.diagnostic {
        warn!("baseline: {d}");
    }
    let mut table = CurveTable::new(&["lag_time", "msd", "valid"]);
    let mut reported = base.curve.msd.iter();
    for (k, &ok) in base.lag_reported.iter().enumerate() {
        let msd = if ok { reported.next().copied() } else { None };
        table.push(vec![Some(sf.lag_times[k]), msd, Some(if ok { 1.0 } else { 0.0 })]);
    }
    Ok(table)
}

fn cmd_analyze(cfg: &RunConfig) -> Result<u8> {
    let input = cfg.analyze.input.as_ref().ok_or_else(|| ConfigError::Field {
        field: "analyze.input".into(),
        message: "is missing".into(),
    })?;
    let stack = read_stack(input)?;
    let particles = cfg.analyze.uq.then(|| {
        cfg.analyze.particles.unwrap_or_else(|| {
            warn!("--uq without --particles; assuming {DEFAULT_PARTICLES}");
            DEFAULT_PARTICLES
        })
    });
    let opts = EstimatorOptions { subsample: cfg.subsample, ..Default::default() };
    let est = optimize(&stack, &opts, particles)?;
    export_curve(&CurveTable::from_msd(&est.curve), cfg.out.join("msd.csv"))?;
    write_json(
        &cfg.out.join("diagnostics.json"),
        &json!({
            "b": est.b,
            "params": est.params,
            "amplitudes": est.amplitudes,
            "estimate": est.diagnostics,
        }),
    )?;
    let mut outputs = vec!["msd.csv", "diagnostics.json"];
    if cfg.analyze.baseline == Baseline::DdmUq {
        export_curve(&baseline_table(&stack, &est.diagnostics.rings)?, cfg.out.join("msd_ddmuq.csv"))?;
        outputs.push("msd_ddmuq.csv");
    }
    write_provenance(cfg, "analyze", &outputs)?;
    if est.diagnostics.converged {
        Ok(0)
    } else {
        warn!("optimizer did not converge; results written anyway");
        Ok(EXIT_NOT_CONVERGED)
    }
}

fn flagged_omegas(m: &ModuliCurve, pick: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut v: Vec<f64> = (0..m.len()).filter(|&k| pick(k)).map(|k| m.omega[k]).collect();
    v.reverse();
    v
}

fn cmd_moduli(cfg: &RunConfig) -> Result<u8> {
    let input = cfg.moduli.input.as_ref().ok_or_else(|| ConfigError::Field {
        field: "moduli.input".into(),
        message: "is missing".into(),
    })?;
    let (temperature, radius) = cfg.material_radius_m()?;
    let mat = MaterialSpec { temperature, radius };
    let curve = read_msd_csv(input)?;
    let (result, method) = match (cfg.moduli.smooth.method(), curve.has_bounds()) {
        (Some(sm), bounded) => {
            if bounded {
                warn!("smoothing requested; bounds are ignored and moduli are deterministic");
            }
            let plain = msdscope::MsdCurve::new(curve.lags.clone(), curve.msd.clone())?;
            (moduli(&smooth_external_msd(&plain, sm)?, &mat)?, format!("{sm:?}").to_lowercase())
        }
        (None, true) => {
            let opts = McOptions { draws: cfg.moduli.draws, range: cfg.moduli.mc_range, seed: cfg.seed };
            (mc_moduli(&curve, &mat, &opts)?, "monte_carlo".to_string())
        }
        (None, false) => (moduli(&curve, &mat)?, "deterministic".to_string()),
    };
    export_curve(&result.to_table(), cfg.out.join("moduli.csv"))?;
    let nonphysical = flagged_omegas(&result, |k| result.nonphysical[k]);
    if !nonphysical.is_empty() {
        warn!("{} frequencies have slope above 1 (negative storage modulus)", nonphysical.len());
    }
    write_json(
        &cfg.out.join("moduli_diagnostics.json"),
        &json!({
            "method": method,
            "draws": (method == "monte_carlo").then_some(cfg.moduli.draws),
            "nonphysical": !nonphysical.is_empty(),
            "nonphysical_omega": nonphysical,
            "undefined_omega": flagged_omegas(&result, |k| !result.defined[k]),
        }),
    )?;
    write_provenance(cfg, "moduli", &["moduli.csv", "moduli_diagnostics.json"])?;
    Ok(0)
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_BAD_INPUT;
    }
    match err.downcast_ref::<msdscope::Error>() {
        Some(msdscope::Error::Numerical(_) | msdscope::Error::NotPositiveDefinite { .. }) => 1,
        Some(_) => EXIT_BAD_INPUT,
        None => 1,
    }
}

fn run(cli: &Cli) -> Result<u8> {
    let cfg = effective_config(cli)?;
    if cli.shared.print_config {
        print!("{}", cfg.to_toml());
        return Ok(0);
    }
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global()?;
    }
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    match cli.command {
        Command::Simulate { .. } => cmd_simulate(&cfg),
        Command::Analyze { .. } => cmd_analyze(&cfg),
        Command::Moduli { .. } => cmd_moduli(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("msdscope {}: {e:#}", cli.command.name());
            ExitCode::from(exit_code_for(&e))
        }
    }
}
