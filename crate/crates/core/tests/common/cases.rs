//! Random small simulation cases and the bounds every report must satisfy.

use proptest::prelude::*;
use tencache_sim::machine::MemoryClass;
use tencache_sim::trace::{synthesize_transformer_trace, SizeProfile, SynthSpec, TensorKind};
use tencache_sim::*;

pub const POLICIES: [PolicyKind; 7] = [
    PolicyKind::TenCache,
    PolicyKind::TenCachePlusOpt,
    PolicyKind::ZeroInfinityLike { lookahead: 0 },
    PolicyKind::ZeroInfinityLike { lookahead: 1 },
    PolicyKind::ZeroInfinityLike { lookahead: 2 },
    PolicyKind::L2LLike,
    PolicyKind::NoOffload,
];

/// At most 10 tensors in at most 3 layers, with memory anywhere from far
/// too small to ample. Returns the trace, a pageable machine and the
/// restore-overlap flag.
pub fn small_case() -> impl Strategy<Value = (ExecutionTrace, MachineConfig, bool)> {
    (
        1u32..=3,
        1u32..=2,
        proptest::collection::vec(prop_oneof![Just(100_000u64), Just(250_000), Just(400_000)], 1..=3),
        any::<u64>(),
        1u32..=2,
        0.3f64..8.5,
        0.1f64..1.5,
        any::<bool>(),
        prop_oneof![Just(2e-5), Just(1e-4), Just(4e-4)],
    )
        .prop_filter_map(
            "at most 10 tensors",
            |(layers, per, sizes, seed, iterations, gpu_frac, cpu_frac, overlap, cpb)| {
                if 2 * layers * per > 10 {
                    return None;
                }
                let mut spec = SynthSpec::new(layers, per, SizeProfile::Choice(sizes));
                spec.seed = seed;
                spec.iterations = iterations;
                spec.compute_us_per_byte = cpb;
                let trace = synthesize_transformer_trace(&spec).ok()?;
                let mut m = default_machine();
                let p = trace.total_bytes(TensorKind::ParamFp16) as f64;
                let o = trace.total_bytes(TensorKind::OptStateFp32) as f64;
                m.gpu_capacity_bytes = (p * gpu_frac) as u64 + 1;
                m.cpu_capacity_bytes = ((p + o) * cpu_frac) as u64 + 1;
                Some((trace, m, overlap))
            },
        )
}

pub fn with_class(m: &MachineConfig, class: MemoryClass) -> MachineConfig {
    let mut m = m.clone();
    m.cpu_memory_class = class;
    m
}

/// Runs both simulators and compares them field for field, events
/// included. Returns the fast report when both succeed.
pub fn compare(
    trace: &ExecutionTrace,
    machine: &MachineConfig,
    policy: &PolicyKind,
    cfg: &RunConfig,
) -> Result<Option<SimReport>, String> {
    let fast = run(trace, machine, policy, cfg);
    let slow = run_reference(trace, machine, policy, cfg);
    match (fast, slow) {
        (Ok(a), Ok(b)) => {
            if a != b || a.events != b.events {
                return Err(format!("{policy}: reports differ\n{}\n{}", a.to_json(), b.to_json()));
            }
            Ok(Some(a))
        }
        (Err(a), Err(b)) if a.to_string() == b.to_string() => {
            if a.to_string().contains("invariant") {
                return Err(format!("{policy}: {a}"));
            }
            Ok(None)
        }
        (a, b) => Err(format!("{policy}: {:?} vs {:?}", a.map(|_| ()), b.map(|_| ()))),
    }
}

/// Rates in range, and the timeline is compute plus stalls that never
/// exceed the total time links were busy.
pub fn check_bounds(r: &SimReport, trace: &ExecutionTrace, machine: &MachineConfig) -> Result<(), String> {
    for rate in [r.hit_rate, r.optimizer_miss_rate, r.gpu_utilization_timeavg, r.cpu_utilization_timeavg] {
        if !(0.0..=1.0).contains(&rate) {
            return Err(format!("{}: rate {rate} out of range", r.policy));
        }
    }
    if r.pct_wait_below.iter().any(|b| !(0.0..=100.0).contains(&b.percent)) {
        return Err(format!("{}: percentage out of range", r.policy));
    }
    let compute_ns: u64 = trace.steps.iter().map(|s| (s.compute_us * 1000.0).round() as u64).sum::<u64>()
        * trace.iterations as u64;
    let total_ns = (r.total_time_us * 1000.0).round() as u64;
    if total_ns < compute_ns {
        return Err(format!("{}: total {total_ns} ns below compute {compute_ns} ns", r.policy));
    }
    let mut busy_ns = 0u64;
    for (link, bytes) in &r.transfer_bytes {
        let (src, dst) = link.split_once("->").unwrap();
        let parse = |s: &str| match s {
            "gpu" => Location::Gpu,
            "cpu" => Location::Cpu,
            _ => Location::Nvme,
        };
        busy_ns += machine.transfer_ns(parse(src), parse(dst), *bytes).unwrap();
    }
    // Each transfer rounds up to the next nanosecond on at most two legs.
    if total_ns > compute_ns + busy_ns + 2 * r.transfer_count {
        return Err(format!("{}: total {total_ns} ns exceeds compute plus link time", r.policy));
    }
    Ok(())
}
