//! Command-line front end for the headlab experiments.
//!
//! A run is described by one JSON document ([`config::ExperimentConfig`]),
//! taken from a preset or a file, overridden by `HEADLAB_*` variables and
//! then by flags. Results land in the output directory together with a
//! `manifest.json` written once the run succeeds.

pub mod commands;
pub mod config;
pub mod output;
pub mod presets;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;
use headlab_core::{Error, Result};

use config::{Command, ExperimentConfig, Format, Overrides, Source};
use output::{OutputDir, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "headlab", version, about = "Attention head allocation and compression experiments")]
pub struct Cli {
    /// Experiment to run.
    #[arg(value_enum)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration (tradeoff-trend, fourgram, jacobian-scan,
    /// compress-sweep, sixlayer-dims).
    #[arg(long, value_name = "NAME")]
    pub preset: Option<String>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Worker threads; outputs are identical for any value.
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

impl Cli {
    pub fn source(&self) -> Source {
        match (&self.config, &self.preset) {
            (Some(p), _) => Source::File(p.clone()),
            (None, Some(n)) => Source::Preset(n.clone()),
            (None, None) => Source::Default,
        }
    }

    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            format: self.format,
            threads: self.threads,
        }
    }
}

/// Process exit code for each error class.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Infeasible(_) | Error::Shape(_) => 1,
        Error::Numerical(_) | Error::Certification { .. } | Error::DegenerateColumn => 2,
        Error::Io(_) => 3,
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: String,
    pub manifest: RunManifest,
}

/// Executes a resolved configuration on a pool of `cfg.threads` workers.
pub fn run_config(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let mut out = OutputDir::create(&cfg.out_dir, cfg.format)?;
    let summary = pool.install(|| commands::dispatch(cfg, &mut out))?;
    let mut resolved = serde_json::to_value(cfg).map_err(|e| Error::Io(e.to_string()))?;
    if let Some(m) = resolved.as_object_mut() {
        m.remove("out_dir");
        m.remove("threads");
    }
    out.write_json("config.json", &resolved)?;
    let manifest = out.finish(cfg, started)?;
    Ok(RunOutcome { summary, manifest })
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = config::resolve(cli.command, &cli.source(), &config::process_env(), &cli.overrides())
        .and_then(|cfg| run_config(&cfg));
    match result {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
