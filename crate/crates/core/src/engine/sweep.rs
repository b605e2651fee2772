//! Parameter sweeps. Runs are independent and may execute in parallel;
//! results come back in the order of the requested values.

use std::str::FromStr;

use rayon::prelude::*;

use crate::baselines::PolicyKind;
use crate::error::{Result, SimError};
use crate::machine::{MachineConfig, MemoryClass};
use crate::trace::ExecutionTrace;

use super::{run, RunConfig, SimReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    /// Multiplies every step's compute time.
    BatchScale,
    GpuCapacity,
    CpuCapacity,
    /// 0 for pageable, anything else for pinned CPU memory.
    Pinned,
}

impl FromStr for SweepAxis {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch_scale" => Ok(SweepAxis::BatchScale),
            "gpu_capacity" => Ok(SweepAxis::GpuCapacity),
            "cpu_capacity" => Ok(SweepAxis::CpuCapacity),
            "pinned" => Ok(SweepAxis::Pinned),
            other => Err(SimError::UnknownAxis(other.to_string())),
        }
    }
}

/// Trace and machine with one axis set to `value`.
pub fn apply_axis(
    trace: &ExecutionTrace,
    machine: &MachineConfig,
    axis: SweepAxis,
    value: f64,
) -> Result<(ExecutionTrace, MachineConfig)> {
    if !value.is_finite() || value < 0.0 {
        return Err(SimError::Config(format!("sweep value {value} must be finite and non-negative")));
    }
    let mut t = trace.clone();
    let mut m = machine.clone();
    match axis {
        SweepAxis::BatchScale => t.steps.iter_mut().for_each(|s| s.compute_us *= value),
        SweepAxis::GpuCapacity => m.gpu_capacity_bytes = value as u64,
        SweepAxis::CpuCapacity => m.cpu_capacity_bytes = value as u64,
        SweepAxis::Pinned => {
            m.cpu_memory_class = if value == 0.0 {
                MemoryClass::Pageable
            } else {
                MemoryClass::Pinned
            }
        }
    }
    Ok((t, m))
}

pub fn sweep(
    trace: &ExecutionTrace,
    machine: &MachineConfig,
    policy: &PolicyKind,
    cfg: &RunConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SimReport>> {
    values
        .par_iter()
        .map(|&v| {
            let (t, m) = apply_axis(trace, machine, axis, v)?;
            run(&t, &m, policy, cfg)
        })
        .collect()
}

/// [`sweep`] on a dedicated pool of `threads` workers.
pub fn sweep_with_threads(
    trace: &ExecutionTrace,
    machine: &MachineConfig,
    policy: &PolicyKind,
    cfg: &RunConfig,
    axis: SweepAxis,
    values: &[f64],
    threads: usize,
) -> Result<Vec<SimReport>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| SimError::Config(format!("thread pool: {e}")))?;
    pool.install(|| sweep(trace, machine, policy, cfg, axis, values))
}
