//! Straight-line reference simulator. It walks iterations and steps in
//! nested loops, derives every start time by scanning all earlier transfers,
//! and integrates utilization from a per-event snapshot list. Quadratic, so
//! guarded to small traces.

use crate::baselines::PolicyKind;
use crate::error::{Result, SimError};
use crate::machine::{Location, MachineConfig};
use crate::scheduler::{ActionKind, BufferRef, LogEntry, TransferRequest};
use crate::trace::{ExecutionTrace, TensorId};

use super::fabric::{buffers, route};
use super::report::{compute_ns, Metrics};
use super::{kinds_of, prepare, timed_accesses, Policy, RunConfig, SimReport};

pub const REFERENCE_TENSOR_LIMIT: usize = 64;

struct Done {
    tensor: TensorId,
    route: (Location, Location),
    bufs: Vec<BufferRef>,
    legs: Vec<(Location, Location, u64)>,
    end: u64,
}

#[derive(Default)]
struct History {
    done: Vec<Done>,
}

impl History {
    fn link_free(&self, link: (Location, Location)) -> u64 {
        self.done
            .iter()
            .flat_map(|d| d.legs.iter())
            .filter(|l| (l.0, l.1) == link)
            .map(|l| l.2)
            .max()
            .unwrap_or(0)
    }

    fn last_of_tensor(&self, t: TensorId) -> Option<&Done> {
        self.done.iter().rev().find(|d| d.tensor == t)
    }

    fn ready(&self, t: TensorId) -> u64 {
        self.last_of_tensor(t).map_or(0, |d| d.end)
    }

    fn buffer_free(&self, b: BufferRef) -> u64 {
        self.done
            .iter()
            .rev()
            .find(|d| d.bufs.contains(&b))
            .map_or(0, |d| d.end)
    }

    fn issue(&mut self, machine: &MachineConfig, req: &TransferRequest, now: u64) -> Result<u64> {
        let bufs: Vec<_> = buffers(req).collect();
        let mut t = [now, self.ready(req.tensor_id)]
            .into_iter()
            .chain(bufs.iter().map(|&b| self.buffer_free(b)))
            .max()
            .unwrap_or(now);
        let mut legs = Vec::new();
        for (src, dst) in route(req)? {
            let start = t.max(self.link_free((src, dst)));
            t = start + machine.transfer_ns(src, dst, req.size_bytes)?;
            legs.push((src, dst, t));
        }
        self.done.push(Done {
            tensor: req.tensor_id,
            route: (req.src, req.dst),
            bufs,
            legs,
            end: t,
        });
        Ok(t)
    }
}

struct Snapshot {
    time: u64,
    gpu: u64,
    cpu: u64,
}

/// Same contract as [`super::run`], computed without an event queue.
pub fn run_reference(
    trace: &ExecutionTrace,
    machine: &MachineConfig,
    policy: &PolicyKind,
    cfg: &RunConfig,
) -> Result<SimReport> {
    if trace.tensors.len() > REFERENCE_TENSOR_LIMIT {
        return Err(SimError::SizeGuardExceeded {
            limit: REFERENCE_TENSOR_LIMIT,
            actual: trace.tensors.len(),
        });
    }
    let mut pol = prepare(trace, machine, policy, cfg)?;
    let kinds = kinds_of(trace);
    let mut hist = History::default();
    let mut m = Metrics::new(cfg.record_events);
    let (gpu0, cpu0) = pol.occupancy();
    let mut snaps = vec![Snapshot {
        time: 0,
        gpu: gpu0,
        cpu: cpu0,
    }];
    let mut now = 0u64;

    let issue_all = |hist: &mut History, m: &mut Metrics, reqs: Vec<TransferRequest>, now: u64| -> Result<u64> {
        let mut block = now;
        for r in reqs {
            let end = hist.issue(machine, &r, now)?;
            for &(src, dst, _) in &hist.done.last().expect("just issued").legs {
                m.leg(src, dst, r.size_bytes);
            }
            m.transfers += 1;
            if r.blocking {
                block = block.max(end);
            }
        }
        Ok(block)
    };
    let snap = |snaps: &mut Vec<Snapshot>, pol: &dyn Policy, time: u64| {
        let (gpu, cpu) = pol.occupancy();
        snaps.push(Snapshot { time, gpu, cpu });
    };

    for _ in 0..trace.iterations {
        for (pos, step) in trace.steps.iter().enumerate() {
            let acts = pol.step_start(pos, step)?;
            m.log(now, pol.drain_log());
            let mut begin = issue_all(&mut hist, &mut m, acts.transfers, now)?;
            let mut stalls = Vec::new();
            for (t, is_param) in timed_accesses(step, &kinds) {
                let ready = hist.ready(t);
                let wait = ready.saturating_sub(now);
                let fetched = acts.fetched.contains(&t);
                if is_param {
                    m.param_access(wait, fetched);
                } else {
                    m.optimizer_access(fetched);
                }
                if wait > 0 {
                    let (src, dst) = hist.last_of_tensor(t).map_or((Location::Gpu, Location::Gpu), |d| d.route);
                    stalls.push(LogEntry {
                        kind: ActionKind::Stall,
                        tensor: t,
                        src,
                        dst,
                    });
                }
                begin = begin.max(ready);
            }
            m.log(now, stalls);
            snap(&mut snaps, pol.as_ref(), now);
            let c = compute_ns(step.compute_us);
            m.compute_ns += c;
            now = begin + c;

            let reqs = pol.step_end(pos, step)?;
            m.log(now, pol.drain_log());
            let next = issue_all(&mut hist, &mut m, reqs, now)?;
            snap(&mut snaps, pol.as_ref(), now);
            now = next;
        }
        let reqs = pol.iteration_end()?;
        m.log(now, pol.drain_log());
        let next = issue_all(&mut hist, &mut m, reqs, now)?;
        snap(&mut snaps, pol.as_ref(), now);
        now = next;
        m.iteration_ends.push(now);
    }

    let mut area = (0u128, 0u128);
    for w in snaps.windows(2) {
        let dt = (w[1].time - w[0].time) as u128;
        area.0 += w[0].gpu as u128 * dt;
        area.1 += w[0].cpu as u128 * dt;
    }
    if let Some(last) = snaps.last() {
        let dt = (now - last.time) as u128;
        area.0 += last.gpu as u128 * dt;
        area.1 += last.cpu as u128 * dt;
    }
    let fp16 = pol.fp16_in_nvme_count();
    Ok(m.finish(
        policy.to_string(),
        now,
        &cfg.thresholds_us,
        area,
        (machine.gpu_capacity_bytes, machine.cpu_capacity_bytes),
        fp16,
    ))
}
