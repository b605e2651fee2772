//! Discrete-event simulation of tiered GPU/CPU/NVMe tensor caching for
//! large-model training.

pub mod analyzer;
pub mod baselines;
pub mod bufpool;
pub mod engine;
pub mod error;
pub mod machine;
pub mod placement;
pub mod presets;
pub mod scheduler;
pub mod tencache;
pub mod trace;

pub use baselines::PolicyKind;
pub use engine::{run, run_reference, sweep, RunConfig, SimReport, SweepAxis};
pub use error::{Result, SimError, TraceError};
pub use machine::{default_machine, Location, MachineConfig, MemoryClass};
pub use trace::{ExecutionTrace, TensorId};
