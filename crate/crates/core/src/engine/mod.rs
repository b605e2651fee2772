//! Deterministic discrete-event simulation of a training run, plus a
//! straight-line reference simulator used as an oracle.

mod fabric;
mod reference;
mod report;
mod sweep;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use crate::baselines::{build_policy, PolicyKind};
use crate::error::{Result, SimError};
use crate::machine::{Location, MachineConfig};
use crate::scheduler::{ActionKind, LogEntry, TransferRequest};
use crate::trace::{ExecutionTrace, Phase, TensorId, TensorKind, TraceStep};

pub use reference::{run_reference, REFERENCE_TENSOR_LIMIT};
pub use report::{EventRecord, SimReport, WaitBucket};
pub use sweep::{apply_axis, sweep, sweep_with_threads, SweepAxis};

use fabric::Fabric;
use report::{compute_ns, Metrics};

pub const DEFAULT_THRESHOLDS_US: [f64; 3] = [10.0, 30.0, 100.0];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Wait-time thresholds in microseconds, positive and ascending.
    pub thresholds_us: Vec<f64>,
    /// Overlap the iteration-end restore with the optimizer phase instead of
    /// blocking it.
    pub restore_overlap: bool,
    pub record_events: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            thresholds_us: DEFAULT_THRESHOLDS_US.to_vec(),
            restore_overlap: true,
            record_events: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds_us.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(SimError::Config("thresholds must be positive".into()));
        }
        if self.thresholds_us.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SimError::Config("thresholds must be strictly ascending".into()));
        }
        Ok(())
    }
}

/// What a policy does as a step begins.
#[derive(Clone, Debug, Default)]
pub struct StepActions {
    pub transfers: Vec<TransferRequest>,
    /// Tensors of this step that had to be fetched on demand.
    pub fetched: Vec<TensorId>,
}

/// A tensor placement and movement policy driven by the simulation loop.
pub trait Policy {
    fn step_start(&mut self, pos: usize, step: &TraceStep) -> Result<StepActions>;
    fn step_end(&mut self, pos: usize, step: &TraceStep) -> Result<Vec<TransferRequest>>;
    fn iteration_end(&mut self) -> Result<Vec<TransferRequest>>;
    fn drain_log(&mut self) -> Vec<LogEntry>;
    /// Bytes held in (GPU, CPU) memory right now.
    fn occupancy(&self) -> (u64, u64);
    fn fp16_in_nvme_count(&self) -> usize;
}

pub(crate) fn prepare(
    trace: &ExecutionTrace,
    machine: &MachineConfig,
    policy: &PolicyKind,
    cfg: &RunConfig,
) -> Result<Box<dyn Policy>> {
    trace.validate()?;
    machine.validate()?;
    cfg.validate()?;
    build_policy(trace, machine, policy, cfg)
}

pub(crate) fn kinds_of(trace: &ExecutionTrace) -> HashMap<TensorId, TensorKind> {
    trace.tensors.iter().map(|t| (t.id, t.kind)).collect()
}

/// Accesses whose timing the run reports: parameters in forward and
/// backward steps, optimizer states in optimizer steps.
pub(crate) fn timed_accesses<'a>(
    step: &'a TraceStep,
    kinds: &'a HashMap<TensorId, TensorKind>,
) -> impl Iterator<Item = (TensorId, bool)> + 'a {
    let want = if step.phase == Phase::OptimizerUpdate {
        TensorKind::OptStateFp32
    } else {
        TensorKind::ParamFp16
    };
    step.tensor_ids
        .iter()
        .copied()
        .filter(move |t| kinds.get(t) == Some(&want))
        .map(move |t| (t, want == TensorKind::ParamFp16))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    StepStart { iter: u32, pos: usize },
    StepEnd { iter: u32, pos: usize },
    TransferDone,
    IterationEnd { iter: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct SimEvent {
    time_ns: u64,
    seq: u64,
    kind: EventKind,
}

struct Loop<'a> {
    fabric: Fabric<'a>,
    metrics: Metrics,
    queue: BinaryHeap<Reverse<SimEvent>>,
    seq: u64,
    issued: u64,
    done: u64,
    area: (u128, u128),
    occ: (u64, u64),
    last_t: u64,
}

impl Loop<'_> {
    fn push(&mut self, time_ns: u64, kind: EventKind) {
        self.queue.push(Reverse(SimEvent {
            time_ns,
            seq: self.seq,
            kind,
        }));
        self.seq += 1;
    }

    /// Issues requests at `now`; returns when the last blocking one ends.
    fn issue(&mut self, reqs: Vec<TransferRequest>, now: u64) -> Result<u64> {
        let mut block = now;
        for mut r in reqs {
            r.issue_us = report::ns_to_us(now);
            let legs = self.fabric.issue(&r, now)?;
            for l in &legs {
                self.metrics.leg(l.src, l.dst, r.size_bytes);
            }
            let end = legs.last().map_or(now, |l| l.end);
            if r.blocking {
                block = block.max(end);
            }
            self.metrics.transfers += 1;
            self.issued += 1;
            self.push(end, EventKind::TransferDone);
        }
        Ok(block)
    }

    /// Accumulates occupancy up to `now`, then samples the policy.
    fn observe(&mut self, now: u64, policy: &dyn Policy) {
        let dt = (now - self.last_t) as u128;
        self.area.0 += self.occ.0 as u128 * dt;
        self.area.1 += self.occ.1 as u128 * dt;
        self.last_t = now;
        self.occ = policy.occupancy();
    }
}

/// Runs the trace under `policy` and reports metrics. Time advances in
/// integer nanoseconds; events at equal times fire in issue order.
pub fn run(trace: &ExecutionTrace, machine: &MachineConfig, policy: &PolicyKind, cfg: &RunConfig) -> Result<SimReport> {
    let mut pol = prepare(trace, machine, policy, cfg)?;
    let kinds = kinds_of(trace);
    let mut lp = Loop {
        fabric: Fabric::new(machine),
        metrics: Metrics::new(cfg.record_events),
        queue: BinaryHeap::new(),
        seq: 0,
        issued: 0,
        done: 0,
        area: (0, 0),
        occ: pol.occupancy(),
        last_t: 0,
    };
    let first = |iter| {
        if trace.steps.is_empty() {
            EventKind::IterationEnd { iter }
        } else {
            EventKind::StepStart { iter, pos: 0 }
        }
    };
    let mut total = 0;
    if trace.iterations > 0 {
        lp.push(0, first(0));
    }
    while let Some(Reverse(ev)) = lp.queue.pop() {
        let now = ev.time_ns;
        match ev.kind {
            EventKind::StepStart { iter, pos } => {
                let step = &trace.steps[pos];
                let acts = pol.step_start(pos, step)?;
                lp.metrics.log(now, pol.drain_log());
                let mut begin = lp.issue(acts.transfers, now)?;
                let mut stalls = Vec::new();
                for (t, is_param) in timed_accesses(step, &kinds) {
                    let ready = lp.fabric.ready(t);
                    let wait = ready.saturating_sub(now);
                    let fetched = acts.fetched.contains(&t);
                    if is_param {
                        lp.metrics.param_access(wait, fetched);
                    } else {
                        lp.metrics.optimizer_access(fetched);
                    }
                    if wait > 0 {
                        let (src, dst) = lp.fabric.last_route(t).unwrap_or((Location::Gpu, Location::Gpu));
                        stalls.push(LogEntry {
                            kind: ActionKind::Stall,
                            tensor: t,
                            src,
                            dst,
                        });
                    }
                    begin = begin.max(ready);
                }
                lp.metrics.log(now, stalls);
                lp.observe(now, pol.as_ref());
                let c = compute_ns(step.compute_us);
                lp.metrics.compute_ns += c;
                lp.push(begin + c, EventKind::StepEnd { iter, pos });
            }
            EventKind::StepEnd { iter, pos } => {
                let reqs = pol.step_end(pos, &trace.steps[pos])?;
                lp.metrics.log(now, pol.drain_log());
                let next = lp.issue(reqs, now)?;
                lp.observe(now, pol.as_ref());
                if pos + 1 < trace.steps.len() {
                    lp.push(next, EventKind::StepStart { iter, pos: pos + 1 });
                } else {
                    lp.push(next, EventKind::IterationEnd { iter });
                }
            }
            EventKind::IterationEnd { iter } => {
                let reqs = pol.iteration_end()?;
                lp.metrics.log(now, pol.drain_log());
                let next = lp.issue(reqs, now)?;
                lp.observe(now, pol.as_ref());
                lp.metrics.iteration_ends.push(next);
                if iter + 1 < trace.iterations {
                    lp.push(next, first(iter + 1));
                } else {
                    total = next;
                }
            }
            EventKind::TransferDone => lp.done += 1,
        }
    }
    if lp.done != lp.issued {
        return Err(SimError::Invariant("transfers left in flight".into()));
    }
    lp.observe(total.max(lp.last_t), pol.as_ref());
    let fp16 = pol.fp16_in_nvme_count();
    Ok(lp.metrics.finish(
        policy.to_string(),
        total,
        &cfg.thresholds_us,
        lp.area,
        (machine.gpu_capacity_bytes, machine.cpu_capacity_bytes),
        fp16,
    ))
}
