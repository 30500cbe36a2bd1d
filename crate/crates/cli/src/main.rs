use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use meterguard::types::{parse_timestamp, NodeId, Timestamp};
use meterguard_cli::report::{self, Format};
use meterguard_cli::runner::{self, Overrides};
use meterguard_cli::scenario::{Scenario, BUNDLED};
use meterguard_cli::{ConfigError, RunError};

#[derive(Parser)]
#[command(name = "meterguard", version, about = "Smart-meter mesh simulator and integrity defence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a bundled scenario or a scenario file and check its assertions.
    Run {
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: runs/<scenario>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Overwrite a meter's own readings over a time range, then let the
    /// defence run.
    Inject {
        #[arg(long)]
        target: u32,
        #[arg(long = "start_date")]
        start_date: String,
        #[arg(long = "end_date")]
        end_date: String,
        #[arg(long, default_value_t = 0.0)]
        value: f64,
        /// Household to attack (default: table3_restore).
        #[arg(long, default_value = "table3_restore")]
        scenario: String,
        /// Simulated time of the injection (default: the end date).
        #[arg(long)]
        at: Option<String>,
    },
    /// Export the report of a finished run.
    Report {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = ExportFormat::Json)]
        format: ExportFormat,
        /// Export directory (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the bundled scenarios.
    List,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    Json,
    Csv,
}

fn timestamp(text: &str) -> Result<Timestamp, RunError> {
    parse_timestamp(text).map_err(|e| ConfigError::Invalid(format!("malformed timestamp `{text}`: {e}")).into())
}

fn run(command: Command) -> Result<ExitCode, RunError> {
    match command {
        Command::Run { scenario, seed, out } => {
            let scenario = Scenario::resolve(&scenario)?;
            let started = Instant::now();
            let output = runner::run_scenario(&scenario, &Overrides { seed })?;
            let elapsed = started.elapsed();
            let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(&scenario.name));
            report::write_run_dir(&dir, &output.report, &output.artifacts, scenario.output.stores)?;
            for row in &output.report.dos_table {
                println!(
                    "attackers {}: loss {:.1}%  cpu {:.1}%  mean rtt {}",
                    row.attackers,
                    row.loss_pct,
                    row.cpu_pct,
                    row.mean_rtt_ms.map_or("-".into(), |v| format!("{v:.1} ms"))
                );
            }
            for a in &output.report.assertions {
                println!("{} {}: {}", if a.passed { "ok  " } else { "FAIL" }, a.name, a.detail);
            }
            println!("{} in {:.2} s, report in {}", scenario.name, elapsed.as_secs_f64(), dir.display());
            Ok(if output.report.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Inject {
            target,
            start_date,
            end_date,
            value,
            scenario,
            at,
        } => {
            let target = NodeId::new(target).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let start = timestamp(&start_date)?;
            let end = timestamp(&end_date)?;
            let at = at.as_deref().map(timestamp).transpose()?;
            let scenario = Scenario::resolve(&scenario)?;
            let outcome = runner::inject(&scenario, target, start, end, value, at)?;
            println!("{}", outcome.audit.count);
            eprintln!(
                "modified {} readings of node {target}; defence restored {} by {}",
                outcome.audit.count, outcome.restored, scenario.span.end
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { run_dir, format, out } => {
            let report = report::read_run_dir(&run_dir)?;
            let format = match format {
                ExportFormat::Json => Format::Json,
                ExportFormat::Csv => Format::Csv,
            };
            let dir = out.unwrap_or(run_dir);
            for name in report::export(&report, format, &dir)? {
                println!("{}", dir.join(name).display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::List => {
            for (name, text) in BUNDLED {
                let description = Scenario::parse(text).map(|s| s.description).unwrap_or_default();
                println!("{name:<22}{description}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
