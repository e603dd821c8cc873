mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use gmix::error_analysis::{zakai_functions, zakai_residual, zakai_residual_reference};
use gmix::experiments::{run_clt_study, run_convergence_study, shared_model};
use gmix::filter::{run_filter, FilterConfig, Recording};
use gmix::paths::{
    read_observation_csv, simulate_pair, write_observation_csv, write_signal_csv, ObservationPath,
    PARTICLE_STREAM_BASE,
};
use gmix::{RngStream, TestFunction};

use config::{apply_override, load_file, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "gmix", version, about = "Gaussian-mixture particle filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set epsilon=0.25` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory (overrides `output_dir`)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads; defaults to the available parallelism
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Master seed (overrides `master_seed`)
    #[arg(long, env = "GMIX_SEED", global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Simulate a signal and observation path
    Simulate,
    /// Run one filter on an observation file
    Filter,
    /// L2 convergence study across the particle counts in `n_grid`
    Converge,
    /// Spread of the recalibrated error on a frozen observation path
    Clt,
    /// Discrete Zakai defect of the filter for each `n` in `n_grid`
    Residual,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Filter => "filter",
            Command::Converge => "converge",
            Command::Clt => "clt",
            Command::Residual => "residual",
        }
    }
}

/// What a subcommand produced; `pass` is `None` when nothing is gated.
struct Outcome {
    outputs: Vec<PathBuf>,
    pass: Option<bool>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Some(false)) => ExitCode::from(2),
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<Option<bool>> {
    let mut map = match &cli.config {
        Some(path) => load_file(path)?,
        None => Map::new(),
    };
    for spec in &cli.overrides {
        apply_override(&mut map, spec)?;
    }
    if let Some(seed) = cli.seed {
        map.insert("master_seed".into(), json!(seed));
    }
    if let Some(out) = &cli.out {
        map.insert("output_dir".into(), json!(out.display().to_string()));
    }
    let cfg = RunConfig::from_map(&map)?;

    if let Some(k) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;

    let outcome = match cli.command {
        Command::Simulate => simulate(&cfg)?,
        Command::Filter => filter(&cfg)?,
        Command::Converge => converge(&cfg)?,
        Command::Clt => clt(&cfg)?,
        Command::Residual => residual(&cfg)?,
    };
    write_manifest(cli, &cfg, &outcome)?;
    if let Some(pass) = outcome.pass {
        println!("pass: {pass}");
    }
    Ok(outcome.pass)
}

fn simulate(cfg: &RunConfig) -> Result<Outcome> {
    let model = shared_model(&cfg.model)?;
    let (signal, obs) = simulate_pair(&model, &cfg.grid(), cfg.master_seed);
    let tag = cfg.tag.clone().unwrap_or_else(|| format!("{}_seed{}", cfg.model, cfg.master_seed));
    let sig_path = cfg.output_dir.join(format!("signal_{tag}.csv"));
    let obs_path = cfg.output_dir.join(format!("observation_{tag}.csv"));
    write_signal_csv(&sig_path, &signal)?;
    write_observation_csv(&obs_path, &obs)?;
    println!("observation {} ({})", obs_path.display(), obs.content_hash());
    Ok(Outcome {
        outputs: vec![sig_path, obs_path],
        pass: None,
    })
}

/// The configured observation file, or a path simulated from the master seed.
fn observation(cfg: &RunConfig) -> Result<ObservationPath> {
    match &cfg.observation_file {
        Some(path) => {
            let obs = read_observation_csv(path, cfg.delta)
                .with_context(|| format!("reading observation file {}", path.display()))?;
            Ok(obs)
        }
        None => {
            let model = shared_model(&cfg.model)?;
            Ok(simulate_pair(&model, &cfg.grid(), cfg.master_seed).1)
        }
    }
}

fn filter(cfg: &RunConfig) -> Result<Outcome> {
    let path = cfg
        .observation_file
        .as_ref()
        .context("config key `observation_file`: required by the filter subcommand")?;
    let obs = read_observation_csv(path, cfg.delta)
        .with_context(|| format!("reading observation file {}", path.display()))?;
    let model = shared_model(&cfg.model)?;
    let phi = TestFunction::from_name(&cfg.phi)?;
    let fc = FilterConfig::new(cfg.n, cfg.epsilon, cfg.beta, *obs.grid())?;
    let mut rng = RngStream::new(cfg.master_seed, PARTICLE_STREAM_BASE).generator();
    let traj = run_filter(&fc, &model, &obs, &[phi], &mut rng, Recording::default())?;
    let tag = cfg.tag.clone().unwrap_or_else(|| format!("{}_{}_eps{}_n{}", cfg.model, cfg.phi, cfg.epsilon, cfg.n));
    let out = cfg.output_dir.join(format!("filter_{tag}.csv"));
    traj.write_csv(&out)?;
    let last = traj.last();
    println!("t = {}: pi = {}, rho = {}, rho(1) = {}", last.time, last.pi[0], last.rho[0], last.rho_one);
    Ok(Outcome {
        outputs: vec![out],
        pass: None,
    })
}

fn converge(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate_convergence()?;
    let study = cfg.study();
    let report = run_convergence_study(&study)?;
    let tag = cfg.tag.clone().unwrap_or_else(|| study.tag());
    let (csv, js) = report.write(&cfg.output_dir, &tag)?;
    for row in &report.rows {
        println!("n = {:>6}  mse = {:.4e} +- {:.2e}", row.n, row.mse, row.stderr);
    }
    println!(
        "slope {:.3} +- {:.3}, predicted {}, band [{}, {}]",
        report.slope, report.stderr, report.predicted_slope, report.slope_band.0, report.slope_band.1
    );
    Ok(Outcome {
        outputs: vec![csv, js],
        pass: Some(report.pass),
    })
}

fn clt(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate_clt()?;
    let study = cfg.study();
    let report = run_clt_study(&study)?;
    let tag = cfg.tag.clone().unwrap_or_else(|| study.tag());
    let (csv, js) = report.write(&cfg.output_dir, &tag)?;
    for row in &report.rows {
        println!(
            "n = {:>6}  mean = {:+.4}  var = {:.4e}  ks = {:.4}",
            row.n, row.stats.mean, row.stats.var, row.ks_stat
        );
    }
    for v in &report.variance_ratios {
        println!("Var_{}/Var_{} = {:.3}", v.n, v.n4, v.ratio);
    }
    Ok(Outcome {
        outputs: vec![csv, js],
        pass: Some(report.pass),
    })
}

fn residual(cfg: &RunConfig) -> Result<Outcome> {
    let model = shared_model(&cfg.model)?;
    let phi = TestFunction::from_name(&cfg.phi)?;
    let obs = observation(cfg)?;
    let functions = zakai_functions(&model, &phi);
    let mut rows = Vec::new();
    for (i, &n) in cfg.n_grid.iter().enumerate() {
        let fc = FilterConfig::new(n, cfg.epsilon, cfg.beta, *obs.grid())?;
        let mut rng = RngStream::new(cfg.master_seed, PARTICLE_STREAM_BASE + i as u64).generator();
        let traj = run_filter(&fc, &model, &obs, &functions, &mut rng, Recording::default())?;
        let r = zakai_residual(&traj, &phi, &model, &obs)?;
        println!("n = {n:>6}  residual = {r:.4e}");
        rows.push(json!({ "n": n, "residual": r }));
    }
    let reference = if model.linear_parameters().is_some() {
        let r = zakai_residual_reference(&model, &obs, &phi)?;
        println!("exact linear filter: residual = {r:.4e}");
        Some(r)
    } else {
        None
    };
    let tag = cfg.tag.clone().unwrap_or_else(|| format!("{}_{}_eps{}", cfg.model, cfg.phi, cfg.epsilon));
    let out = cfg.output_dir.join(format!("residual_{tag}.json"));
    let doc = json!({
        "model": cfg.model,
        "phi": cfg.phi,
        "epsilon": cfg.epsilon,
        "observation_hash": obs.content_hash(),
        "rows": rows,
        "reference_residual": reference,
    });
    fs::write(&out, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(Outcome {
        outputs: vec![out],
        pass: None,
    })
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn hashed(path: &Path) -> Result<Value> {
    Ok(json!({ "path": path.display().to_string(), "sha256": sha256_file(path)? }))
}

fn write_manifest(cli: &Cli, cfg: &RunConfig, outcome: &Outcome) -> Result<()> {
    let mut inputs = Map::new();
    if let Some(path) = &cli.config {
        inputs.insert("config_file".into(), hashed(path)?);
    }
    if let Some(path) = &cfg.observation_file {
        inputs.insert("observation_file".into(), hashed(path)?);
    }
    let outputs = outcome
        .outputs
        .iter()
        .map(|p| hashed(p))
        .collect::<Result<Vec<_>>>()?;
    let manifest = json!({
        "subcommand": cli.command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "master_seed": cfg.master_seed,
        "config": cfg,
        "inputs": inputs,
        "outputs": outputs,
        "pass": outcome.pass,
    });
    let path = cfg.output_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}
