use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use owe_core::experiments;
use owe_core::report::{emit_report, ReportFormat, RunStatus};
use owe_core::scenario::{load_scenario, ExperimentKind, Scenario};
use owe_core::OweError;

const EXIT_IO: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_COVERAGE_LOSS: u8 = 4;

/// Run optical wireless ether experiments from a scenario file.
#[derive(Parser, Debug)]
#[command(name = "owe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-hop SNR along a line of EAs fed by one source.
    Coverage(Common),
    /// Optimize one link and compare with the equal-gain baseline.
    SingleBss(Common),
    /// Jointly optimize two or more links sharing the ether.
    MultiBss(Common),
    /// Two-link degradation while the second entry photocurrent is swept.
    Sweep(Common),
    /// Inject a blocked channel, localize it and reroute.
    Blockage(Common),
    /// Learn the channel matrix from tones measured at the AP.
    Probe(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the scenario's optimizer seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the scenario's stability margin.
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Text,
}

impl Command {
    fn split(&self) -> (ExperimentKind, &Common) {
        match self {
            Command::Coverage(c) => (ExperimentKind::Coverage, c),
            Command::SingleBss(c) => (ExperimentKind::SingleBss, c),
            Command::MultiBss(c) => (ExperimentKind::MultiBss, c),
            Command::Sweep(c) => (ExperimentKind::Sweep, c),
            Command::Blockage(c) => (ExperimentKind::Blockage, c),
            Command::Probe(c) => (ExperimentKind::Probe, c),
        }
    }
}

fn exit_code(err: &OweError) -> u8 {
    match err {
        OweError::Io { .. } | OweError::Csv(_) => EXIT_IO,
        OweError::Unstable { .. }
        | OweError::InfeasibleStart { .. }
        | OweError::GainInfeasible { .. }
        | OweError::ProbeUnstable { .. }
        | OweError::NonConvergence { .. } => EXIT_INFEASIBLE,
        OweError::Disconnected { .. } => EXIT_COVERAGE_LOSS,
        _ => EXIT_VALIDATION,
    }
}

/// Unix seconds, pinned by `SOURCE_DATE_EPOCH` when set.
fn generated_at() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse::<u64>().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0));
    format!("unix:{secs}")
}

fn prepare(c: &Common) -> Result<Scenario, OweError> {
    let mut s = load_scenario(&c.scenario)?;
    if let Some(seed) = c.seed {
        s.optimizer.seed = seed;
    }
    if let Some(m) = c.margin {
        s.numerics.margin = m;
    }
    s.validate()?;
    Ok(s)
}

fn execute(kind: ExperimentKind, c: &Common) -> Result<RunStatus, OweError> {
    let s = prepare(c)?;
    let mut report = experiments::run(kind, &s)?;
    let format = match c.format {
        Format::Csv => ReportFormat::Csv,
        Format::Text => {
            report.generated_at = Some(generated_at());
            ReportFormat::Text
        }
    };
    for path in emit_report(&report, &c.out, format)? {
        println!("{}", path.display());
    }
    Ok(report.status)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, common) = cli.command.split();
    match execute(kind, common) {
        Ok(RunStatus::Ok) => ExitCode::SUCCESS,
        Ok(RunStatus::CoverageLoss) => {
            eprintln!("owe: coverage lost, no route to the AP remains");
            ExitCode::from(EXIT_COVERAGE_LOSS)
        }
        Err(e) => {
            eprintln!("owe: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
