//! `trustlayer` command-line driver.
//!
//! Exit codes: 0 success, 1 invalid configuration, 2 runtime failure or
//! missing artifacts, 3 corrupt evidence chain, 4 report/evidence mismatch.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trustlayer::artifacts::{self, ArtifactError};
use trustlayer::sim::presets::{preset_json, PRESET_NAMES};
use trustlayer::sim::validate::scenario_schema;
use trustlayer::sim::{run_scenario, validate_str, ConfigError, ScenarioConfig};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHAIN: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

#[derive(Parser)]
#[command(name = "trustlayer", version, about = "Run, verify and report trust-layer scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write evidence plus reports under --out.
    Run(RunArgs),
    /// Check evidence chains and recompute report.json from them.
    Verify {
        /// Run output directory (or its evidence/ subdirectory).
        #[arg(long)]
        evidence: PathBuf,
    },
    /// Re-emit the reports of a run directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Validate a scenario file and list every violation by JSON path.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Print the scenario JSON Schema.
    Schema,
    /// Print a built-in preset scenario.
    Preset {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(PRESET_NAMES))]
        name: String,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    scenario: Option<PathBuf>,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESET_NAMES))]
    preset: Option<String>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the scenario task count.
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Md,
}

fn report_config_error(e: &ConfigError) {
    match e {
        ConfigError::Invalid(vs) => {
            for v in vs {
                eprintln!("{}: {}", v.path, v.message);
            }
        }
        other => eprintln!("{other}"),
    }
}

fn load_config(args: &RunArgs) -> Result<ScenarioConfig, u8> {
    let text = match (&args.scenario, &args.preset) {
        (Some(p), _) => fs::read_to_string(p).map_err(|e| {
            eprintln!("cannot read {}: {e}", p.display());
            EXIT_CONFIG
        })?,
        (None, Some(name)) => preset_json(name).ok_or(EXIT_CONFIG)?.to_string(),
        (None, None) => return Err(EXIT_CONFIG),
    };
    let mut cfg = validate_str(&text).map_err(|e| {
        report_config_error(&e);
        EXIT_CONFIG
    })?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n_tasks {
        cfg.n_tasks = n;
    }
    Ok(cfg)
}

fn cmd_run(args: &RunArgs) -> Result<(), u8> {
    let cfg = load_config(args)?;
    let result = run_scenario(&cfg, args.workers.max(1)).map_err(|e| {
        eprintln!("run failed: {e}");
        EXIT_RUNTIME
    })?;
    artifacts::write_run(&args.out, &cfg, &result).map_err(|e| {
        eprintln!("{e}");
        EXIT_RUNTIME
    })?;
    let a = &result.reports.absorption;
    eprintln!(
        "{} seed {}: {} tasks, error absorption {:.6}, composite {:.6}",
        cfg.scenario_id,
        cfg.seed,
        result.tasks.len(),
        a.error_absorption,
        result.reports.platform.composite_trust_score
    );
    Ok(())
}

fn artifact_exit(e: &ArtifactError) -> u8 {
    match e {
        ArtifactError::ChainCorrupt { .. } => EXIT_CHAIN,
        ArtifactError::Mismatch(_) => EXIT_MISMATCH,
        _ => EXIT_RUNTIME,
    }
}

fn cmd_verify(dir: &Path) -> Result<(), u8> {
    match artifacts::verify_run(dir) {
        Ok(r) => {
            println!("ok: {} sub-domain report(s) reproduced from evidence", r.sub_domains.len());
            Ok(())
        }
        Err(e) => {
            eprintln!("verify failed: {e}");
            if let ArtifactError::Mismatch(ms) = &e {
                for m in ms {
                    eprintln!("  {m}");
                }
            }
            Err(artifact_exit(&e))
        }
    }
}

fn cmd_report(dir: &Path, format: Format) -> Result<(), u8> {
    let r = artifacts::recompute(dir).map_err(|e| {
        eprintln!("{e}");
        match e {
            ArtifactError::ChainCorrupt { .. } => EXIT_CHAIN,
            _ => EXIT_RUNTIME,
        }
    })?;
    match format {
        Format::Json => print!("{}", artifacts::render_json(&r)),
        Format::Md => print!("{}", artifacts::render_markdown(&r)),
    }
    Ok(())
}

fn cmd_validate(path: &Path) -> Result<(), u8> {
    let text = fs::read_to_string(path).map_err(|e| {
        eprintln!("cannot read {}: {e}", path.display());
        EXIT_CONFIG
    })?;
    match validate_str(&text) {
        Ok(cfg) => {
            println!("ok: {} ({} sub-domain(s))", cfg.scenario_id, cfg.sub_domains.len());
            Ok(())
        }
        Err(e) => {
            report_config_error(&e);
            Err(EXIT_CONFIG)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Verify { evidence } => cmd_verify(evidence),
        Command::Report { input, format } => cmd_report(input, *format),
        Command::Validate { scenario } => cmd_validate(scenario),
        Command::Schema => {
            println!("{}", serde_json::to_string_pretty(&scenario_schema()).expect("schema serializes"));
            Ok(())
        }
        Command::Preset { name } => {
            print!("{}", preset_json(name).unwrap_or_default());
            Ok(())
        }
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
