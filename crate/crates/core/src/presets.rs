//! Named scenarios used by the acceptance suite and the command line.

use crate::machine::{default_machine, MachineConfig};
use crate::trace::{synthesize_transformer_trace, ExecutionTrace, SizeProfile, SynthSpec, TensorKind};

/// 24 layers of four tensors of 1.0 to 1.25 MiB. Moving a tensor over the
/// pageable CPU->GPU link takes about 1.4x its forward compute time.
pub fn default_synth_spec() -> SynthSpec {
    SynthSpec {
        layers: 24,
        tensors_per_layer: 4,
        size_profile: SizeProfile::Cycle(vec![1_048_576, 1_179_648, 1_310_720, 1_179_648]),
        compute_us_per_byte: 7e-5,
        seed: 0,
        iterations: 2,
    }
}

pub fn default_trace() -> ExecutionTrace {
    synthesize_transformer_trace(&default_synth_spec()).expect("preset spec is valid")
}

/// Default machine with GPU memory cut to `fraction` of the trace's FP16
/// parameter bytes.
pub fn machine_with_gpu_fraction(trace: &ExecutionTrace, fraction: f64) -> MachineConfig {
    let mut m = default_machine();
    m.gpu_capacity_bytes = (trace.total_bytes(TensorKind::ParamFp16) as f64 * fraction) as u64;
    m
}

/// The CPU-GPU scenario: GPU holds 40% of the parameters.
pub fn cpu_gpu_machine(trace: &ExecutionTrace) -> MachineConfig {
    machine_with_gpu_fraction(trace, 0.4)
}

/// About 46 GB of FP16 parameters in 192 tensors of 240 MB: they fit the
/// default 48 GB GPU while their 276 GB of optimizer state overflows the
/// default 256 GB of CPU memory into NVMe.
pub fn nvme_synth_spec() -> SynthSpec {
    SynthSpec {
        layers: 48,
        tensors_per_layer: 4,
        size_profile: SizeProfile::Fixed(240_000_000),
        compute_us_per_byte: 1e-4,
        seed: 0,
        iterations: 2,
    }
}

pub fn nvme_trace() -> ExecutionTrace {
    synthesize_transformer_trace(&nvme_synth_spec()).expect("preset spec is valid")
}

pub fn nvme_machine() -> MachineConfig {
    default_machine()
}

/// CPU memory sized so the optimizer states are `pressure` times what is
/// left after the FP16 parameters are kept there.
pub fn optimizer_pressure_machine(trace: &ExecutionTrace, pressure: f64) -> MachineConfig {
    let mut m = cpu_gpu_machine(trace);
    let params = trace.total_bytes(TensorKind::ParamFp16);
    let states = trace.total_bytes(TensorKind::OptStateFp32);
    m.cpu_capacity_bytes = params + (states as f64 / pressure) as u64;
    m
}
