//! The `tensorformer` command-line pipeline: phantom generation, signal
//! synthesis, classical and learned fitting, two-stage training,
//! evaluation and noise sweeps. Every command writes a manifest next to
//! its outputs from which it can be re-run.

pub mod args;
pub mod commands;
pub mod error;
pub mod manifest;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::Parser;

pub use args::{Cli, Command};
pub use error::{CliError, Result};
pub use manifest::{RunManifest, MANIFEST_FILE};

/// What a finished command produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub out: PathBuf,
    pub manifest: PathBuf,
    pub outputs: Vec<PathBuf>,
    /// Human-readable lines for stdout.
    pub summary: Vec<String>,
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, S>(argv: I) -> Result<Outcome>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            CliError::Display(e.to_string())
        }
        _ => CliError::Usage(e.to_string()),
    })?;
    execute(cli.command, cli.out_dir.as_deref(), cli.threads, argv)
}

fn resolve_out(command: &Command, out_dir: Option<&Path>) -> PathBuf {
    let base = out_dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    match command.out() {
        Some(p) if p.is_absolute() => p.clone(),
        Some(p) if out_dir.is_some() => base.join(p),
        Some(p) => p.clone(),
        None => base.join(command.name()),
    }
}

pub fn execute(mut command: Command, out_dir: Option<&Path>, threads: Option<usize>, argv: Vec<String>) -> Result<Outcome> {
    if let Command::Rerun(r) = &command {
        let m = RunManifest::load(&r.manifest)?;
        let mut cmd = m.config;
        cmd.set_out(r.out.clone().unwrap_or(m.out));
        return execute(cmd, None, threads.or(Some(1)), m.argv);
    }
    if threads == Some(0) {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    commands::precheck(&command)?;
    let out = resolve_out(&command, out_dir);
    command.set_out(out.clone());
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Input(format!("cannot create output directory {}: {e}", out.display())))?;
    let start = Instant::now();
    let record = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Input(format!("cannot start {n} threads: {e}")))?
            .install(|| commands::dispatch(&command, &out))?,
        None => commands::dispatch(&command, &out)?,
    };
    let outputs = record
        .outputs
        .iter()
        .map(|p| manifest::OutputFile::describe(p))
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        tool: "tensorformer".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.name().into(),
        argv,
        config: command.clone(),
        out: out.clone(),
        seeds: record.seeds,
        rng: tensorformer_core::rng::GENERATOR_NAME.into(),
        threads,
        inputs: record.inputs,
        outputs,
        details: record.details,
        duration_s: start.elapsed().as_secs_f64(),
    };
    let manifest_path = manifest.save(&out)?;
    Ok(Outcome {
        out,
        manifest: manifest_path,
        outputs: record.outputs,
        summary: record.summary,
    })
}
