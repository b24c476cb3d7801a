//! `assure` command-line runner: loads a scenario file, runs the drone
//! mission or the clock monitor, and writes traces, heat-maps and a
//! decision table.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use assure_core::clock::{run_clock_monitor, ClockConfig, ClockError, MonitorOutcome, SyncTrace};
use assure_core::drone::{run_mission, DroneError, MissionRow, MissionTrace, WorldConfig, MISSION_CSV_HEADER};
use assure_core::grid::PgmImage;
use clap::{Parser, Subcommand, ValueEnum};
use log::{debug, info};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version of the scenario file layout understood by this build.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: unsupported schema version {found} (expected {SCHEMA_VERSION})")]
    Schema { path: PathBuf, found: u32 },
    #[error("{path}: no `{section}` section")]
    MissingSection { path: PathBuf, section: &'static str },
    #[error(transparent)]
    Drone(#[from] DroneError),
    #[error(transparent)]
    Clock(#[from] ClockError),
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: not a drone trace (header must be `{MISSION_CSV_HEADER}`)")]
    NotADroneTrace { path: PathBuf },
    #[error("trace has no check events")]
    EmptyTrace,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Contents of a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drone: Option<WorldConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clock: Option<ClockConfig>,
}

impl ScenarioFile {
    pub fn parse(path: &Path, text: &str) -> Result<Self, CliError> {
        let file: ScenarioFile = serde_json::from_str(text).map_err(|e| CliError::Parse {
            path: path.to_owned(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if file.schema != SCHEMA_VERSION {
            return Err(CliError::Schema {
                path: path.to_owned(),
                found: file.schema,
            });
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(path, &text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scenario {
    Drone,
    Clock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSpec {
    pub scenario: Scenario,
    pub config_path: PathBuf,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub emit_heatmaps: bool,
}

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    /// Mission reached its target or the monitor ran to the end.
    Success,
    /// Unreadable or invalid input.
    ConfigError,
    /// Mission did not complete, or the monitor raised an alert.
    AssuranceAbort,
}

impl Status {
    pub fn code(self) -> i32 {
        match self {
            Status::Success => 0,
            Status::ConfigError => 1,
            Status::AssuranceAbort => 2,
        }
    }
}

/// Runs one scenario and writes `trace.csv`, `summary.txt` and, for the
/// drone with heat-maps enabled, one PGM per belief and forecast step.
pub fn run(spec: &RunSpec) -> Result<Status, CliError> {
    let file = ScenarioFile::load(&spec.config_path)?;
    let missing = |section| CliError::MissingSection {
        path: spec.config_path.clone(),
        section,
    };
    fs::create_dir_all(&spec.out_dir).map_err(io_err(&spec.out_dir))?;
    match spec.scenario {
        Scenario::Drone => {
            let config = file.drone.ok_or_else(|| missing("drone"))?;
            info!("drone mission, seed {}", spec.seed);
            let trace = run_mission(&config, spec.seed)?;
            info!("{} ({} check events)", trace.outcome, trace.rows.len());
            write_with(&spec.out_dir.join("trace.csv"), |w| trace.write_csv(w))?;
            let summary = drone_summary(&trace)?;
            write_with(&spec.out_dir.join("summary.txt"), |w| w.write_all(summary.as_bytes()))?;
            if spec.emit_heatmaps {
                write_heatmaps(&trace, &spec.out_dir)?;
            }
            Ok(if trace.outcome.is_success() {
                Status::Success
            } else {
                Status::AssuranceAbort
            })
        }
        Scenario::Clock => {
            let config = file.clock.ok_or_else(|| missing("clock"))?;
            info!("clock monitor, seed {}", spec.seed);
            let trace = run_clock_monitor(&config, spec.seed)?;
            write_with(&spec.out_dir.join("trace.csv"), |w| trace.write_csv(w))?;
            let summary = clock_summary(&config, &trace);
            write_with(&spec.out_dir.join("summary.txt"), |w| w.write_all(summary.as_bytes()))?;
            Ok(match trace.outcome {
                MonitorOutcome::Completed => Status::Success,
                MonitorOutcome::Alert => Status::AssuranceAbort,
            })
        }
    }
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<(), CliError> {
    debug!("writing {}", path.display());
    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    f(&mut out).and_then(|()| out.flush()).map_err(io_err(path))
}

fn write_heatmaps(trace: &MissionTrace, dir: &Path) -> Result<(), CliError> {
    for frame in &trace.frames {
        let t = frame.t;
        let belief = PgmImage::from_distribution(&frame.belief).encode();
        write_with(&dir.join(format!("belief_t{t}.pgm")), |w| w.write_all(&belief))?;
        for (n, step) in frame.forecast.steps().iter().enumerate() {
            let image = PgmImage::from_distribution(step).encode();
            write_with(&dir.join(format!("forecast_t{t}_n{n}.pgm")), |w| w.write_all(&image))?;
        }
    }
    Ok(())
}

fn drone_summary(trace: &MissionTrace) -> Result<String, CliError> {
    let mut s = String::new();
    writeln!(s, "outcome: {}", trace.outcome).unwrap();
    writeln!(s, "resources left: {}", trace.final_state.resources).unwrap();
    writeln!(s, "steps in no-fly zone: {}", trace.nofly_steps.len()).unwrap();
    if let Some(a) = &trace.abort {
        writeln!(s, "abort: {} at t={}: {}", a.agent, a.t, a.reason).unwrap();
    }
    if !trace.rows.is_empty() {
        let rows: Vec<DecisionRow> = trace.rows.iter().map(DecisionRow::from).collect();
        s.push('\n');
        s.push_str(&render_decision_table(&rows)?);
    }
    Ok(s)
}

fn clock_summary(config: &ClockConfig, trace: &SyncTrace) -> String {
    let mut s = String::new();
    let outcome = match trace.outcome {
        MonitorOutcome::Completed => "completed",
        MonitorOutcome::Alert => "alert: budget exhausted with a read due",
    };
    writeln!(s, "outcome: {outcome}").unwrap();
    writeln!(s, "reference reads: {}", trace.reads.len()).unwrap();
    let budget = trace.rows.last().map_or(config.spec.budget, |r| r.budget);
    writeln!(s, "budget left: {budget}").unwrap();
    let worst = trace
        .reads
        .iter()
        .filter_map(|r| r.deviation)
        .map(f64::abs)
        .fold(0.0, f64::max);
    writeln!(s, "largest deviation at a read: {worst}").unwrap();
    s
}

/// One line of the decision table.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct DecisionRow {
    pub t: u64,
    pub resources: u64,
    pub probability: Option<f64>,
    pub agent: String,
    pub signal: String,
}

impl From<&MissionRow> for DecisionRow {
    fn from(r: &MissionRow) -> Self {
        Self {
            t: r.t,
            resources: r.resources,
            probability: Some(r.probability),
            agent: r.agent.to_string(),
            signal: r.signal.to_string(),
        }
    }
}

/// Reads the check events of a drone trace CSV.
pub fn read_trace(path: &Path) -> Result<Vec<DecisionRow>, CliError> {
    let csv_err = |source| CliError::Csv {
        path: path.to_owned(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    if header.join(",") != MISSION_CSV_HEADER {
        return Err(CliError::NotADroneTrace { path: path.to_owned() });
    }
    reader.deserialize().collect::<Result<_, _>>().map_err(csv_err)
}

/// Formats check events as a table with columns
/// Time | Resources | Probability | CV Agent | Signal.
pub fn render_decision_table(rows: &[DecisionRow]) -> Result<String, CliError> {
    if rows.is_empty() {
        return Err(CliError::EmptyTrace);
    }
    let header = ["Time", "Resources", "Probability", "CV Agent", "Signal"];
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.t.to_string(),
                r.resources.to_string(),
                r.probability
                    .map_or_else(|| "-".to_owned(), |p| format!("{:.1}%", 100.0 * p)),
                r.agent.clone(),
                r.signal.clone(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |fields: [&str; 5]| {
        let parts: Vec<String> = fields.iter().zip(widths).map(|(f, w)| format!("{f:<w$}")).collect();
        parts.join(" | ").trim_end().to_owned() + "\n"
    };
    let mut out = line(header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&rule.join("-+-"));
    out.push('\n');
    for row in &cells {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3], &row[4]]));
    }
    Ok(out)
}

#[derive(Debug, Parser)]
#[command(name = "assure", version, about = "Run assurance-monitor scenarios")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario and write its trace.
    Run {
        #[arg(long, value_enum)]
        scenario: Scenario,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write belief and forecast heat-maps as PGM images.
        #[arg(long)]
        heatmaps: bool,
    },
    /// Print the decision table of a drone trace.
    Table {
        #[arg(long)]
        trace: PathBuf,
    },
}

/// Executes a parsed command, printing to `out` and errors to `err`.
pub fn execute(command: Command, out: &mut impl Write, err: &mut impl Write) -> Status {
    let result = match command {
        Command::Run {
            scenario,
            config,
            seed,
            out: out_dir,
            heatmaps,
        } => run(&RunSpec {
            scenario,
            config_path: config,
            seed,
            out_dir: out_dir.clone(),
            emit_heatmaps: heatmaps,
        })
        .inspect(|_| {
            let _ = writeln!(out, "wrote {}", out_dir.display());
        }),
        Command::Table { trace } => read_trace(&trace)
            .and_then(|rows| render_decision_table(&rows))
            .map(|table| {
                let _ = out.write_all(table.as_bytes());
                Status::Success
            }),
    };
    result.unwrap_or_else(|e| {
        let _ = writeln!(err, "error: {e}");
        Status::ConfigError
    })
}

/// Parses `args` (including the program name) and runs the command. Usage
/// errors map to the config-error status; help and version to success.
pub fn main_with_args<I, T>(args: I, out: &mut impl Write, err: &mut impl Write) -> Status
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli.command, out, err),
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            if e.use_stderr() {
                Status::ConfigError
            } else {
                Status::Success
            }
        }
    }
}
