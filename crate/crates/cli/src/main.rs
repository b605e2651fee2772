//! Command-line front end: run, compare, sweep and validate.

mod inputs;
mod output;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tencache_sim::engine::sweep_with_threads;
use tencache_sim::trace::load_trace_unchecked;
use tencache_sim::{run, sweep, PolicyKind, SimError, SimReport, SweepAxis, TraceError};

use inputs::InputArgs;

/// Exit status and message of a failed command.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn io(path: &Path, e: std::io::Error) -> Self {
        Failure {
            code: 2,
            message: format!("{}: {e}", path.display()),
        }
    }

    fn context(self, what: impl fmt::Display) -> Self {
        Failure {
            code: self.code,
            message: format!("{what}: {}", self.message),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let code = match e {
            SimError::Trace(_) => 1,
            SimError::OutOfMemory { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Self {
        SimError::Trace(e).into()
    }
}

#[derive(Parser, Debug)]
#[command(name = "tencache-sim", version, about = "Simulate tensor caching and offloading policies for large-model training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one policy and write its report as JSON.
    Run {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value = "tencache")]
        policy: String,
        /// Report path.
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Write every scheduler action as JSON lines.
        #[arg(long)]
        event_log: Option<PathBuf>,
    },
    /// Simulate several policies on the same inputs and tabulate them.
    Compare {
        #[command(flatten)]
        input: InputArgs,
        /// Policies to compare, at least two.
        #[arg(long = "policy", value_delimiter = ',', required = true, num_args = 1..)]
        policies: Vec<String>,
        /// Policy the speedup column is measured against; defaults to the
        /// last one listed.
        #[arg(long)]
        baseline: Option<String>,
        /// CSV path.
        #[arg(long, default_value = "compare.csv")]
        out: PathBuf,
    },
    /// Simulate one policy over a range of values of one parameter.
    Sweep {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value = "tencache")]
        policy: String,
        /// batch_scale, gpu_capacity, cpu_capacity or pinned (0 = pageable).
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        values: Vec<f64>,
        /// Worker threads; defaults to one per core.
        #[arg(long)]
        threads: Option<usize>,
        /// CSV path.
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Check a trace file and list every violation.
    Validate {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn policy(name: &str) -> Result<PolicyKind, Failure> {
    name.parse::<PolicyKind>().map_err(|e| Failure::from(e).context("--policy"))
}

fn write(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::io(path, e))
}

fn cmd_run(input: &InputArgs, policy_name: &str, out: &Path, event_log: Option<&Path>) -> Result<(), Failure> {
    let p = policy(policy_name)?;
    let trace = inputs::trace(input)?;
    let machine = inputs::machine(input, &trace)?;
    let cfg = inputs::run_config(input, event_log.is_some())?;
    let report = run(&trace, &machine, &p, &cfg)?;
    let mut json = report.to_json();
    json.push('\n');
    write(out, json.as_bytes())?;
    if let Some(path) = event_log {
        let mut buf = Vec::new();
        report.write_event_log(&mut buf).map_err(|e| Failure::io(path, e))?;
        write(path, &buf)?;
    }
    println!("{}", output::summary(&report));
    Ok(())
}

fn cmd_compare(input: &InputArgs, names: &[String], baseline: Option<&str>, out: &Path) -> Result<(), Failure> {
    if names.len() < 2 {
        return Err(Failure {
            code: 2,
            message: "compare needs at least two policies".into(),
        });
    }
    let kinds = names.iter().map(|n| policy(n)).collect::<Result<Vec<_>, _>>()?;
    let base = match baseline {
        Some(b) => {
            let b = policy(b)?;
            kinds.iter().position(|k| *k == b).ok_or_else(|| Failure {
                code: 2,
                message: format!("--baseline: `{b}` is not among the compared policies"),
            })?
        }
        None => kinds.len() - 1,
    };
    let trace = inputs::trace(input)?;
    let machine = inputs::machine(input, &trace)?;
    let cfg = inputs::run_config(input, false)?;
    let results: Vec<Result<SimReport, SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = kinds
            .iter()
            .map(|k| s.spawn(|| run(&trace, &machine, k, &cfg)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread")).collect()
    });
    let mut reports = Vec::new();
    for (k, r) in kinds.iter().zip(results) {
        reports.push(r.map_err(|e| Failure::from(e).context(format!("policy {k}")))?);
    }
    let base_time = reports[base].total_time_us;
    let header = output::compare_header(&reports[0]);
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let speedup = if r.total_time_us > 0.0 { base_time / r.total_time_us } else { 1.0 };
            output::compare_row(r, speedup)
        })
        .collect();
    print!("{}", output::table(&header, &rows));
    write(out, output::csv(&header, &rows).as_bytes())
}

fn cmd_sweep(
    input: &InputArgs,
    policy_name: &str,
    axis: &str,
    values: &[f64],
    threads: Option<usize>,
    out: &Path,
) -> Result<(), Failure> {
    let p = policy(policy_name)?;
    let axis: SweepAxis = axis.parse().map_err(|e: SimError| Failure::from(e).context("--axis"))?;
    let trace = inputs::trace(input)?;
    let machine = inputs::machine(input, &trace)?;
    let cfg = inputs::run_config(input, false)?;
    let reports = match threads {
        Some(n) => sweep_with_threads(&trace, &machine, &p, &cfg, axis, values, n)?,
        None => sweep(&trace, &machine, &p, &cfg, axis, values)?,
    };
    let mut header = vec!["value".to_string()];
    header.extend(output::compare_header(&reports[0]).into_iter().filter(|h| h != "speedup"));
    let rows: Vec<Vec<String>> = values
        .iter()
        .zip(&reports)
        .map(|(v, r)| {
            let mut row = vec![v.to_string()];
            let mut cells = output::compare_row(r, 1.0);
            cells.remove(2);
            row.extend(cells);
            row
        })
        .collect();
    print!("{}", output::table(&header, &rows));
    write(out, output::csv(&header, &rows).as_bytes())
}

fn cmd_validate(path: &Path) -> Result<(), Failure> {
    let trace = load_trace_unchecked(path)?;
    let violations = trace.violations();
    if violations.is_empty() {
        println!("{}: ok ({} tensors, {} steps)", path.display(), trace.tensors.len(), trace.steps.len());
        return Ok(());
    }
    for v in &violations {
        println!("{v}");
    }
    Err(Failure {
        code: 1,
        message: format!("{}: {} violation(s)", path.display(), violations.len()),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            input,
            policy,
            out,
            event_log,
        } => cmd_run(input, policy, out, event_log.as_deref()),
        Command::Compare {
            input,
            policies,
            baseline,
            out,
        } => cmd_compare(input, policies, baseline.as_deref(), out),
        Command::Sweep {
            input,
            policy,
            axis,
            values,
            threads,
            out,
        } => cmd_sweep(input, policy, axis, values, *threads, out),
        Command::Validate { trace } => cmd_validate(trace),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
