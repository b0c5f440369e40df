use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use shell_ldp::config::{apply_override, read_value, resolve};
use shell_ldp::studies::{default_value, run, OutputFile};
use shell_ldp::Error;

/// Shell-model experiments: simulation, skeleton, rate minimization and
/// small-noise Monte Carlo.
///
/// Any `--dotted.path=value` argument overrides that key of the config,
/// e.g. `--solver.steps=4096` or `--study.params.nu_grid=[0.1,0.01]`.
#[derive(Parser)]
#[command(name = "shellmodel", version)]
struct Cli {
    #[command(subcommand)]
    study: Study,

    /// JSON config; the study's built-in default when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Config override `dotted.path=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Print the effective config as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Study {
    /// Viscous controlled SPDE path.
    Simulate,
    /// Inviscid controlled skeleton.
    Skeleton,
    /// Algebraic identities and diffusion conditions.
    Identities,
    /// Rate-functional minimization.
    Rate,
    /// Small-noise Monte Carlo against the rate bound.
    McLdp,
    /// Controlled viscous paths against the skeleton as nu -> 0.
    WeakConvergence,
    /// Time-increment integrals on dyadic grids.
    Increments,
    /// Sup bound and compactness probe over a control level set.
    Levelset,
}

impl Study {
    fn name(self) -> &'static str {
        match self {
            Study::Simulate => "simulate",
            Study::Skeleton => "skeleton",
            Study::Identities => "identities",
            Study::Rate => "rate",
            Study::McLdp => "mc-ldp",
            Study::WeakConvergence => "weak-convergence",
            Study::Increments => "increments",
            Study::Levelset => "levelset",
        }
    }
}

enum Failure {
    Error(Error),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

/// Split `--a.b=value` tokens off argv; everything else goes to clap.
fn split_dotted(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        if let Some(body) = arg.strip_prefix("--") {
            if let Some((key, value)) = body.split_once('=') {
                if key.contains('.') {
                    overrides.push((key.to_string(), value.to_string()));
                    continue;
                }
            }
        }
        rest.push(arg);
    }
    (rest, overrides)
}

fn write_atomic(dir: &Path, file: &OutputFile) -> Result<PathBuf, Error> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&file.contents)?;
    tmp.as_file().sync_all()?;
    let path = dir.join(&file.name);
    tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
    Ok(path)
}

fn execute(cli: &Cli, dotted: &[(String, String)]) -> Result<(), Failure> {
    let study = cli.study.name();
    let mut value = match &cli.config {
        Some(path) => read_value(path)?,
        None => default_value(study).expect("every subcommand has a default"),
    };
    let declared = value.pointer("/study/name").and_then(Value::as_str).unwrap_or(study);
    if declared != study {
        return Err(Error::config(
            "study.name",
            format!("config declares `{declared}` but `{study}` was requested"),
        )
        .into());
    }
    for raw in &cli.set {
        let (key, val) = raw
            .split_once('=')
            .ok_or_else(|| Error::config(raw.as_str(), "expected KEY=VALUE"))?;
        apply_override(&mut value, key, val)?;
    }
    for (key, val) in dotted {
        apply_override(&mut value, key, val)?;
    }
    if let Some(dir) = &cli.out {
        apply_override(
            &mut value,
            "output.dir",
            &Value::String(dir.display().to_string()).to_string(),
        )?;
    }
    if cli.print_config {
        let text = serde_json::to_string_pretty(&value).map_err(Error::from)?;
        let _ = writeln!(std::io::stdout(), "{text}");
        return Ok(());
    }
    let resolved = resolve(value)?;
    let output = run(&resolved)?;
    let dir = &resolved.config.output.dir;
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    for file in &output.files {
        let path = write_atomic(dir, file)?;
        log::info!("wrote {}", path.display());
    }
    let _ = writeln!(std::io::stdout(), "{}", output.summary);
    match output.numerical_failure {
        Some(reason) => Err(Failure::Numerical(reason)),
        None => Ok(()),
    }
}

fn report(kind: &str, message: String, pointer: Option<String>) {
    let doc = json!({ "error": kind, "message": message, "pointer": pointer });
    eprintln!("{doc}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("SHELL_LDP_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size thread pool: {e}");
        }
    }
    let (args, dotted) = split_dotted(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report("usage", e.to_string().trim().to_string(), None);
            return ExitCode::from(2);
        }
    };
    match execute(&cli, &dotted) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Numerical(reason)) => {
            report("numerical", reason, None);
            ExitCode::from(3)
        }
        Err(Failure::Error(e)) => {
            let (kind, code, pointer) = match &e {
                Error::Config { pointer, .. } => ("config", 2, Some(pointer.clone())),
                Error::Domain(_) => ("domain", 2, None),
                Error::Dimension { .. } => ("dimension", 2, None),
                Error::Json(_) => ("json", 2, None),
                Error::BlowUp { .. } => ("blow_up", 3, None),
                Error::DegenerateFit { .. } => ("degenerate_fit", 3, None),
                Error::Io(_) => ("io", 1, None),
            };
            let message = match e {
                Error::Config { message, .. } => message,
                other => other.to_string(),
            };
            report(kind, message, pointer);
            ExitCode::from(code)
        }
    }
}
