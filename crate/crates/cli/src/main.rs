use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Parser, Subcommand};
use natstream_cli::config::{ConfigError, ExperimentConfig, GridFile, Overrides};
use natstream_cli::diag::{diagnose, write_diagnostics, DiagOptions};
use natstream_cli::runner::{recompute_from_log, run_experiment, run_grid};
use natstream_cli::{exit, exit_code};
use natstream_core::ingest::{load_stream, write_stream_bundle, Split};
use natstream_core::{generate_stream, preset_profile, StreamSpec};

#[derive(Parser)]
#[command(name = "natstream", version, about = "Continual learning experiments on natural data streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a preset or spec stream as NDS1 files plus manifests.
    Gen {
        #[arg(long, conflicts_with = "spec")]
        preset: Option<String>,
        /// TOML file with a full stream spec.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a grid of experiments in parallel.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Recompute AMCA from a run log.
    Eval {
        #[arg(long)]
        log: PathBuf,
    },
    /// Temporal-similarity and imbalance diagnostics for a stream.
    Diag {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = DiagOptions::default().max_lag)]
        max_lag: usize,
        #[arg(long, default_value_t = DiagOptions::default().window)]
        window: usize,
        #[arg(long, default_value_t = DiagOptions::default().spearman_threshold)]
        spearman_threshold: f64,
        #[arg(long, default_value_t = DiagOptions::default().gini_threshold)]
        gini_threshold: f64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn gen(preset: Option<String>, spec: Option<PathBuf>, seed: u64, out_dir: PathBuf) -> anyhow::Result<i32> {
    let mut spec: StreamSpec = match (preset, spec) {
        (Some(name), None) => preset_profile(&name)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
        }
        _ => anyhow::bail!(ConfigError("give --preset or --spec".into())),
    };
    spec.seed = seed;
    let (train, test) = generate_stream(&spec)?;
    let a = write_stream_bundle(&train, &out_dir, "train", Split::Train, Some(&spec))?;
    let b = write_stream_bundle(&test, &out_dir, "test", Split::Test, Some(&spec))?;
    println!("{}\n{}", a.display(), b.display());
    Ok(exit::OK)
}

fn run(config: Option<PathBuf>, overrides: Overrides) -> anyhow::Result<i32> {
    let cfg = ExperimentConfig::resolve(config.as_deref(), &overrides)?;
    let result = run_experiment(&cfg)?;
    for cp in &result.report.trace {
        println!("checkpoint {} amca {:.4}", cp.index, cp.amca);
    }
    println!("outputs in {}", cfg.out_dir.display());
    Ok(exit::OK)
}

fn grid(config: PathBuf, overrides: Overrides) -> anyhow::Result<i32> {
    let (axes, mut base) = GridFile::load(&config)?;
    base.apply_overrides(&overrides)?;
    let cells = axes.expand(&base);
    let outcome = run_grid(&cells, &base.out_dir)?;
    for (cfg, res) in &outcome.cells {
        match res {
            Ok(s) => println!("{} final amca {:.4}", cfg.cell_name(), s.final_amca.unwrap_or(f64::NAN)),
            Err(e) => println!("{} FAILED: {e}", cfg.cell_name()),
        }
    }
    Ok(if outcome.failures() > 0 { exit::PARTIAL_GRID } else { exit::OK })
}

fn eval(log: PathBuf) -> anyhow::Result<i32> {
    println!("checkpoint,logged_amca,recomputed_amca");
    let mut mismatch = false;
    for (k, logged, again) in recompute_from_log(&log)? {
        println!("{k},{logged:.6},{again:.6}");
        mismatch |= (logged - again).abs() > 1e-12;
    }
    if mismatch {
        anyhow::bail!(natstream_core::Error::Numerical("logged AMCA differs from the recomputed value".into()));
    }
    Ok(exit::OK)
}

fn diag(manifest: PathBuf, opts: DiagOptions, out_dir: Option<PathBuf>) -> anyhow::Result<i32> {
    let (stream, _) = load_stream(&manifest)?;
    let d = diagnose(&stream, &opts)?;
    println!(
        "spearman {:.4} ({}), mean gini {:.4} ({}): {}",
        d.spearman,
        if d.temporally_similar { "temporally similar" } else { "no temporal similarity" },
        d.mean_gini,
        if d.imbalanced { "imbalanced" } else { "balanced" },
        d.verdict()
    );
    if let Some(dir) = out_dir {
        write_diagnostics(&dir, &d)?;
    }
    Ok(exit::OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { preset, spec, seed, out_dir } => gen(preset, spec, seed, out_dir),
        Command::Run { config, overrides } => run(config, overrides),
        Command::Grid { config, overrides } => grid(config, overrides),
        Command::Eval { log } => eval(log),
        Command::Diag {
            manifest,
            max_lag,
            window,
            spearman_threshold,
            gini_threshold,
            out_dir,
        } => diag(
            manifest,
            DiagOptions {
                max_lag,
                window,
                spearman_threshold,
                gini_threshold,
            },
            out_dir,
        ),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
