//! The tiered caching policy: profile, plan buffers, place, then prefetch
//! and evict by the prefetch table.

use std::collections::{BTreeMap, HashMap};

use crate::analyzer::{build_prefetch_table, size_distribution};
use crate::bufpool::{build_pool, plan_buffers, BufferPlan};
use crate::engine::{Policy, RunConfig, StepActions};
use crate::error::{Result, SimError};
use crate::machine::{Location, MachineConfig};
use crate::placement::{place_optimizer_states, place_parameters};
use crate::scheduler::{ActionKind, LogEntry, OptimizerScheduler, SchedulerState, TransferRequest};
use crate::trace::{tensor_census, ExecutionTrace, Phase, TensorDescriptor, TensorId, TensorKind, TraceStep};

/// How the optimizer states of a run are handled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum OptimizerMode {
    /// States in CPU memory up to the budget, the rest on NVMe with
    /// asynchronous prefetch into freed CPU slots.
    Prefetch,
    /// All states in CPU memory if they fit, otherwise all on NVMe with a
    /// synchronous read and write-back around each update.
    AllOrNothing,
}

/// Optimizer states in update order; states never updated come last.
pub(crate) fn states_in_update_order(trace: &ExecutionTrace) -> Vec<TensorDescriptor> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    let updated = trace
        .steps
        .iter()
        .filter(|s| s.phase == Phase::OptimizerUpdate)
        .flat_map(|s| s.tensor_ids.iter().copied());
    let rest = trace.tensors_of(TensorKind::OptStateFp32).map(|t| t.id);
    for id in updated.chain(rest) {
        if let Some(t) = trace.tensor(id).filter(|t| t.kind == TensorKind::OptStateFp32) {
            if seen.insert(id) {
                out.push(t.clone());
            }
        }
    }
    out
}

/// CPU bytes set aside to stage one optimizer state read from NVMe.
pub(crate) fn optimizer_staging_bytes(trace: &ExecutionTrace) -> u64 {
    trace
        .tensors_of(TensorKind::OptStateFp32)
        .map(|t| t.size_bytes)
        .max()
        .unwrap_or(0)
}

/// Optimizer scheduler over `cpu_budget` bytes of CPU memory. When the
/// states do not all fit, room for one staged state comes out of the budget.
pub(crate) fn build_optimizer(
    trace: &ExecutionTrace,
    cpu_budget: u64,
    mode: OptimizerMode,
) -> Result<OptimizerScheduler> {
    let states = states_in_update_order(trace);
    let total: u64 = states.iter().map(|s| s.size_bytes).sum();
    let budget = if total <= cpu_budget {
        total
    } else {
        let staging = optimizer_staging_bytes(trace);
        let rest = cpu_budget.checked_sub(staging).ok_or_else(|| {
            SimError::Config(format!(
                "{cpu_budget} bytes of CPU memory left for optimizer states cannot stage one {staging}-byte state"
            ))
        })?;
        match mode {
            OptimizerMode::AllOrNothing => 0,
            OptimizerMode::Prefetch => {
                let census = tensor_census(trace, TensorKind::OptStateFp32);
                plan_buffers(&census, &size_distribution(&census)?, 0, rest).cpu_bytes()
            }
        }
    };
    let placement = place_optimizer_states(&states, budget);
    let mut slots: BTreeMap<u64, u64> = BTreeMap::new();
    for s in &states {
        if placement.location(s.id) == Some(Location::Cpu) {
            *slots.entry(s.size_bytes).or_insert(0) += 1;
        }
    }
    let sizes = states.iter().map(|s| (s.id, s.size_bytes)).collect();
    OptimizerScheduler::new(
        states.iter().map(|s| s.id).collect(),
        placement,
        build_pool(Location::Cpu, &slots),
        sizes,
        mode == OptimizerMode::Prefetch,
    )
}

pub(crate) fn param_ids(step: &TraceStep, kinds: &HashMap<TensorId, TensorKind>) -> Vec<TensorId> {
    step.tensor_ids
        .iter()
        .copied()
        .filter(|t| kinds.get(t) == Some(&TensorKind::ParamFp16))
        .collect()
}

pub(crate) fn opt_ids(step: &TraceStep, kinds: &HashMap<TensorId, TensorKind>) -> Vec<TensorId> {
    step.tensor_ids
        .iter()
        .copied()
        .filter(|t| kinds.get(t) == Some(&TensorKind::OptStateFp32))
        .collect()
}

/// GPU working buffers per size class: the most tensors of that class any
/// single step touches, at least one.
pub(crate) fn working_buffers(trace: &ExecutionTrace) -> BTreeMap<u64, u64> {
    let kinds = crate::engine::kinds_of(trace);
    let mut spare: BTreeMap<u64, u64> = tensor_census(trace, TensorKind::ParamFp16)
        .entries
        .keys()
        .map(|&s| (s, 1))
        .collect();
    for step in trace.steps.iter().filter(|s| s.phase != Phase::OptimizerUpdate) {
        let mut per: BTreeMap<u64, u64> = BTreeMap::new();
        for id in param_ids(step, &kinds) {
            if let Some(t) = trace.tensor(id) {
                *per.entry(t.size_bytes).or_insert(0) += 1;
            }
        }
        for (s, n) in per {
            let e = spare.entry(s).or_insert(1);
            *e = (*e).max(n);
        }
    }
    spare
}

pub struct TenCachePolicy {
    sched: SchedulerState,
    opt: OptimizerScheduler,
    kinds: HashMap<TensorId, TensorKind>,
    restore_blocking: bool,
    params_restored: bool,
}

impl TenCachePolicy {
    pub fn new(trace: &ExecutionTrace, machine: &MachineConfig, opt_prefetch: bool, cfg: &RunConfig) -> Result<Self> {
        let census = tensor_census(trace, TensorKind::ParamFp16);
        let sizes: HashMap<TensorId, u64> = trace.tensors.iter().map(|t| (t.id, t.size_bytes)).collect();
        let spare = working_buffers(trace);
        let spare_bytes: u64 = spare.iter().map(|(s, n)| s * n).sum();
        if spare_bytes > machine.gpu_capacity_bytes {
            return Err(SimError::Config(format!(
                "gpu_capacity_bytes {} cannot hold one working buffer per size class ({spare_bytes} bytes)",
                machine.gpu_capacity_bytes
            )));
        }
        let staging: u64 = census.entries.keys().sum::<u64>() + optimizer_staging_bytes(trace);
        let cpu_avail = machine.cpu_capacity_bytes.checked_sub(staging).ok_or_else(|| {
            SimError::Config(format!(
                "cpu_capacity_bytes {} cannot hold the staging buffers ({staging} bytes)",
                machine.cpu_capacity_bytes
            ))
        })?;
        let plan = if census.is_empty() {
            BufferPlan::default()
        } else {
            plan_buffers(
                &census,
                &size_distribution(&census)?,
                machine.gpu_capacity_bytes - spare_bytes,
                cpu_avail,
            )
        };
        let mut table = build_prefetch_table(trace);
        let placement = place_parameters(&mut table, &plan, |t| sizes.get(&t).copied().unwrap_or(0));

        // Room in CPU memory for GPU-homed tensors evicted during a pass.
        let mut cpu_left = cpu_avail - plan.cpu_bytes();
        let mut cpu_counts = plan.cpu_counts.clone();
        for (&s, &g) in &plan.gpu_counts {
            if census.count(s) > g {
                let extra = g.min(cpu_left / s);
                *cpu_counts.entry(s).or_insert(0) += extra;
                cpu_left -= extra * s;
            }
        }
        let mut gpu_counts = plan.gpu_counts.clone();
        for (s, n) in spare {
            *gpu_counts.entry(s).or_insert(0) += n;
        }
        let sched = SchedulerState::new(
            table,
            placement,
            build_pool(Location::Gpu, &gpu_counts),
            build_pool(Location::Cpu, &cpu_counts),
            sizes,
        )?;
        let mode = if opt_prefetch {
            OptimizerMode::Prefetch
        } else {
            OptimizerMode::AllOrNothing
        };
        let opt = build_optimizer(trace, cpu_left + optimizer_staging_bytes(trace), mode)?;
        Ok(TenCachePolicy {
            sched,
            opt,
            kinds: crate::engine::kinds_of(trace),
            restore_blocking: !cfg.restore_overlap,
            params_restored: false,
        })
    }

    pub fn scheduler(&self) -> &SchedulerState {
        &self.sched
    }

    pub fn optimizer(&self) -> &OptimizerScheduler {
        &self.opt
    }

    fn restore_params(&mut self) -> Result<Vec<TransferRequest>> {
        let mut reqs = self.sched.restore_final_locations()?;
        for r in &mut reqs {
            r.blocking = self.restore_blocking;
        }
        self.params_restored = true;
        Ok(reqs)
    }
}

impl Policy for TenCachePolicy {
    fn step_start(&mut self, _pos: usize, step: &TraceStep) -> Result<StepActions> {
        let mut acts = StepActions::default();
        if step.phase == Phase::OptimizerUpdate {
            if !self.params_restored {
                acts.transfers = self.restore_params()?;
            }
            for id in opt_ids(step, &self.kinds) {
                let (hit, reqs) = self.opt.on_update_start(id)?;
                if !hit {
                    acts.fetched.push(id);
                }
                acts.transfers.extend(reqs);
            }
        } else {
            acts.transfers = self.sched.ensure_resident(&param_ids(step, &self.kinds))?;
            acts.fetched = acts
                .transfers
                .iter()
                .filter(|r| r.kind == ActionKind::Fetch)
                .map(|r| r.tensor_id)
                .collect();
        }
        Ok(acts)
    }

    fn step_end(&mut self, pos: usize, step: &TraceStep) -> Result<Vec<TransferRequest>> {
        let mut out = Vec::new();
        if step.phase == Phase::OptimizerUpdate {
            for id in opt_ids(step, &self.kinds) {
                out.extend(self.opt.on_update_done(id)?);
            }
        } else {
            for row in self.sched.table.rows_of_step(pos) {
                out.extend(self.sched.complete_access(row)?);
            }
        }
        Ok(out)
    }

    fn iteration_end(&mut self) -> Result<Vec<TransferRequest>> {
        let mut out = if self.params_restored {
            Vec::new()
        } else {
            self.restore_params()?
        };
        out.extend(self.opt.restore()?);
        self.params_restored = false;
        Ok(out)
    }

    fn drain_log(&mut self) -> Vec<LogEntry> {
        let mut log = std::mem::take(&mut self.sched.log);
        log.append(&mut self.opt.log);
        log
    }

    fn occupancy(&self) -> (u64, u64) {
        (
            self.sched.gpu_pool.occupied_bytes(),
            self.sched.cpu_pool.occupied_bytes() + self.opt.occupied_cpu_bytes(),
        )
    }

    fn fp16_in_nvme_count(&self) -> usize {
        self.sched
            .placement
            .final_of
            .values()
            .filter(|&&l| l == Location::Nvme)
            .count()
    }
}
