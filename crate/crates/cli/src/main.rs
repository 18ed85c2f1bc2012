use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use she_martin_cli::output::{write_manifest, write_outcome, RunManifest};
use she_martin_cli::{experiments, exit_code, Config};

#[derive(Parser, Debug)]
#[command(name = "she-martin", version, about = "Stochastic heat equation experiments on finite Martin models")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set graph.kind=path`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Directory for CSV, verdict and manifest files (overrides output.dir).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Master seed (overrides mc.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (overrides mc.workers).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Path for the main CSV table instead of `<out-dir>/<subcommand>.csv`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dump the killed heat kernel p_t.
    Heat {
        /// Time (overrides heat.t).
        #[arg(long)]
        t: Option<f64>,
    },
    /// Weak-disorder constant Λ, margin and second-moment bound.
    Lambda,
    /// Harmonic extension of the boundary data.
    Harmonic,
    /// Martin kernel and the boundary measure of the configured harmonic function.
    Martin,
    /// Monte Carlo moments of the pinned dynamics.
    Simulate,
    /// Pullback ladder towards the invariant field.
    Pullback,
    /// Coupled attraction of a perturbed start to h*.
    Attract,
    /// Small-noise fluctuations around h.
    Fluct,
    /// Automorphism equivariance, pathwise and in law.
    Equivariance,
    /// The full acceptance suite.
    All,
    /// Rerun the subcommand recorded in a manifest.
    Replay {
        manifest: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Heat { .. } => "heat",
            Command::Lambda => "lambda",
            Command::Harmonic => "harmonic",
            Command::Martin => "martin",
            Command::Simulate => "simulate",
            Command::Pullback => "pullback",
            Command::Attract => "attract",
            Command::Fluct => "fluct",
            Command::Equivariance => "equivariance",
            Command::All => "all",
            Command::Replay { .. } => "replay",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn resolve(cli: &Cli) -> Result<(String, Config)> {
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("mc.seed={s}"));
    }
    if let Some(w) = cli.workers {
        overrides.push(format!("mc.workers={w}"));
    }
    if let Some(d) = &cli.out_dir {
        overrides.push(format!("output.dir={}", toml_string(d)));
    }
    match &cli.command {
        Command::Replay { manifest } => {
            let m = RunManifest::load(manifest)?;
            let mut cfg = Config::from_toml(&m.config, &overrides)?;
            if cli.out_dir.is_none() {
                let base = manifest.parent().unwrap_or(Path::new("."));
                cfg.output.dir = base.join("replay");
            }
            Ok((m.subcommand, cfg))
        }
        cmd => {
            if let Command::Heat { t: Some(t) } = cmd {
                overrides.push(format!("heat.t={t:?}"));
            }
            Ok((cmd.name().to_string(), Config::load(cli.config.as_deref(), &overrides)?))
        }
    }
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn run(cli: Cli) -> Result<bool> {
    let (name, cfg) = resolve(&cli)?;
    let workers = cfg.mc.workers.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    rayon::ThreadPoolBuilder::new().num_threads(workers).build_global().context("starting worker pool")?;

    let started = chrono::Utc::now();
    let clock = Instant::now();
    let outcome = experiments::run(&name, &cfg)?;
    let finished = chrono::Utc::now();

    let dir = cfg.output.dir.clone();
    let outputs = write_outcome(&dir, &name, &outcome, cli.out.as_deref())?;
    let pass = outcome.all_pass();
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: name.clone(),
        config: cfg.to_toml(),
        master_seed: cfg.mc.seed,
        workers,
        started: started.to_rfc3339(),
        finished: finished.to_rfc3339(),
        wall_seconds: clock.elapsed().as_secs_f64(),
        outputs,
        verdicts: outcome.verdicts().to_vec(),
        pass,
    };
    write_manifest(&dir, &manifest)?;

    for v in outcome.verdicts() {
        let status = if v.pass { "PASS" } else { "FAIL" };
        eprintln!("{status} {}: {:e} vs {:e}", v.check_name, v.statistic, v.bound);
    }
    let mut summary = serde_json::json!({ "subcommand": name, "pass": pass, "verdicts": outcome.verdicts() });
    if let Some(serde_json::Value::Object(extra)) = &outcome.json {
        summary.as_object_mut().expect("object").extend(extra.clone());
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(pass)
}
