//! Resolving command-line inputs into a trace, a machine and a run config.

use std::path::{Path, PathBuf};

use tencache_sim::machine::load_machine;
use tencache_sim::presets;
use tencache_sim::trace::{load_trace, synthesize_transformer_trace, SizeProfile, SynthSpec, TensorKind};
use tencache_sim::{default_machine, ExecutionTrace, MachineConfig, RunConfig, SimError};

use crate::Failure;

pub const MACHINE_ENV: &str = "TENCACHE_SIM_DEFAULT_MACHINE";

#[derive(clap::Args, Debug, Clone)]
pub struct InputArgs {
    /// Trace file (JSON lines). Without it a trace is synthesized.
    #[arg(long, conflicts_with = "synth")]
    pub trace: Option<PathBuf>,
    /// Synthetic trace parameters as key=value: layers, tensors_per_layer,
    /// size, cycle=a:b:.., choice=a:b:.., compute_us_per_byte, iterations,
    /// seed. Unset keys take the default scenario's values.
    #[arg(long, num_args = 1.., value_name = "KEY=VAL")]
    pub synth: Vec<String>,
    /// Machine config JSON; absent keys keep their defaults.
    #[arg(long)]
    pub machine: Option<PathBuf>,
    /// Set GPU memory to this fraction of the trace's FP16 parameter bytes.
    #[arg(long)]
    pub gpu_fraction: Option<f64>,
    /// Seed for trace synthesis; overrides a `seed` synth key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Wait-time thresholds in microseconds, ascending.
    #[arg(long, value_delimiter = ',', default_value = "10,30,100")]
    pub thresholds: Vec<f64>,
    /// Make the iteration-boundary parameter restore block compute.
    #[arg(long)]
    pub blocking_restore: bool,
}

fn config(message: String) -> Failure {
    Failure::from(SimError::Config(message))
}

/// Message of a configuration error without its generic prefix.
fn detail(e: SimError) -> String {
    match e {
        SimError::Config(m) => m,
        other => other.to_string(),
    }
}

fn sizes(key: &str, v: &str) -> Result<Vec<u64>, Failure> {
    v.split(':')
        .map(|s| s.parse().map_err(|_| config(format!("--synth {key}: `{s}` is not a byte count"))))
        .collect()
}

pub fn synth_spec(items: &[String], seed: Option<u64>) -> Result<SynthSpec, Failure> {
    let mut spec = presets::default_synth_spec();
    for item in items {
        let (key, v) = item
            .split_once('=')
            .ok_or_else(|| config(format!("--synth: expected key=value, got `{item}`")))?;
        let num = |what: &str| config(format!("--synth {key}: `{v}` is not {what}"));
        match key {
            "layers" => spec.layers = v.parse().map_err(|_| num("an integer"))?,
            "tensors_per_layer" | "per_layer" => spec.tensors_per_layer = v.parse().map_err(|_| num("an integer"))?,
            "size" => spec.size_profile = SizeProfile::Fixed(v.parse().map_err(|_| num("a byte count"))?),
            "cycle" => spec.size_profile = SizeProfile::Cycle(sizes(key, v)?),
            "choice" => spec.size_profile = SizeProfile::Choice(sizes(key, v)?),
            "compute_us_per_byte" | "cpb" => spec.compute_us_per_byte = v.parse().map_err(|_| num("a number"))?,
            "iterations" => spec.iterations = v.parse().map_err(|_| num("an integer"))?,
            "seed" => spec.seed = v.parse().map_err(|_| num("an integer"))?,
            _ => return Err(config(format!("--synth: unknown key `{key}`"))),
        }
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

pub fn trace(args: &InputArgs) -> Result<ExecutionTrace, Failure> {
    match &args.trace {
        Some(path) => Ok(load_trace(path)?),
        None => {
            let spec = synth_spec(&args.synth, args.seed)?;
            synthesize_transformer_trace(&spec).map_err(|e| config(format!("--synth: {e}")))
        }
    }
}

/// `--machine`, else the file named by the environment variable, else the
/// built-in defaults.
pub fn machine(args: &InputArgs, trace: &ExecutionTrace) -> Result<MachineConfig, Failure> {
    let env = std::env::var_os(MACHINE_ENV).map(PathBuf::from);
    let mut m = match args.machine.as_deref().or(env.as_deref()) {
        Some(path) => load(path)?,
        None => default_machine(),
    };
    if let Some(f) = args.gpu_fraction {
        if !(f.is_finite() && f > 0.0) {
            return Err(config(format!("--gpu-fraction: {f} must be positive")));
        }
        m.gpu_capacity_bytes = (trace.total_bytes(TensorKind::ParamFp16) as f64 * f) as u64;
    }
    Ok(m)
}

fn load(path: &Path) -> Result<MachineConfig, Failure> {
    load_machine(path).map_err(|e| config(format!("--machine {}: {}", path.display(), detail(e))))
}

pub fn run_config(args: &InputArgs, record_events: bool) -> Result<RunConfig, Failure> {
    let cfg = RunConfig {
        thresholds_us: args.thresholds.clone(),
        restore_overlap: !args.blocking_restore,
        record_events,
    };
    cfg.validate().map_err(|e| config(format!("--thresholds: {}", detail(e))))?;
    Ok(cfg)
}
