//! Command-line runner: `run`, `report`, `selftest`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use protodp::config::RunConfig;
use protodp::experiment;
use protodp::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "protodp", version, about = "Private prototype federated learning experiments")]
struct Cli {
    /// Root for relative output directories.
    #[arg(long, env = "PROTODP_OUTPUT_ROOT", default_value = ".", global = true)]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Execute the scenario described by a config file.
    Run {
        /// TOML config; defaults are used for anything it omits.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a key, e.g. `--set privacy.mechanism=igpp`.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
        /// Same as `--set seed=N`.
        #[arg(long)]
        seed: Option<u64>,
        /// Same as `--set output=DIR`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate run or sweep directories into comparison tables.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Where to write the CSV tables; printed only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in property checks.
    Selftest,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn run(root: &Path, config: Option<PathBuf>, mut overrides: Vec<String>, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Error> {
    let text = match &config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::config("config", format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    if let Some(s) = seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = out {
        overrides.push(format!("output={}", toml_string(&o.to_string_lossy())));
    }
    let cfg = RunConfig::with_overrides(&text, &overrides)?;
    let dir = resolve(root, &cfg.output);
    let dirs = experiment::run(&cfg, &dir)?;
    for d in dirs {
        println!("{}", d.display());
    }
    Ok(())
}

fn toml_string(s: &str) -> String {
    let escaped = s.replace('\\', "\\\\").replace('"', "\\\"");
    format!("\"{escaped}\"")
}

fn report(root: &Path, dirs: Vec<PathBuf>, out: Option<PathBuf>) -> Result<(), Error> {
    let dirs: Vec<PathBuf> = dirs.iter().map(|d| resolve(root, d)).collect();
    let rep = experiment::build_report(&experiment::load_summaries(&dirs)?)?;
    if let Some(o) = out {
        experiment::write_report(&rep, &resolve(root, &o))?;
    }
    print!("{}", experiment::render_text(&rep));
    Ok(())
}

fn selftest() -> Result<(), Error> {
    let checks = protodp::selftest::run_all();
    let mut failed = 0;
    for c in &checks {
        println!("{} {:<12} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(Error::runtime(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run { config, overrides, seed, out } => run(&cli.output_root, config, overrides, seed, out),
        Command::Report { dirs, out } => report(&cli.output_root, dirs, out),
        Command::Selftest => selftest(),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
