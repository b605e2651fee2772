//! Comparison policies: a ZeRO-Infinity-like fetch-on-demand offloader, an
//! L2L-like layer-at-a-time loader, and a no-offload policy that either fits
//! in GPU memory or fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::engine::{Policy, RunConfig, StepActions};
use crate::error::{Result, SimError};
use crate::machine::{Location, MachineConfig};
use crate::scheduler::{ActionKind, LogEntry, OptimizerScheduler, TransferRequest};
use crate::tencache::{build_optimizer, opt_ids, optimizer_staging_bytes, param_ids, OptimizerMode, TenCachePolicy};
use crate::trace::{ExecutionTrace, Phase, TensorId, TensorKind, TraceStep};

/// Parameters at or below this size stay resident in GPU memory under the
/// ZeRO-Infinity-like policy.
pub const PERSISTENCE_THRESHOLD_BYTES: u64 = 200_000;

pub const DEFAULT_LOOKAHEAD: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    TenCache,
    TenCachePlusOpt,
    ZeroInfinityLike { lookahead: usize },
    L2LLike,
    NoOffload,
}

impl PolicyKind {
    pub const ALL_NAMES: [&'static str; 5] = ["tencache", "tencache+opt", "zero-infinity", "l2l", "no-offload"];
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::TenCache => f.write_str("tencache"),
            PolicyKind::TenCachePlusOpt => f.write_str("tencache+opt"),
            PolicyKind::ZeroInfinityLike { lookahead } if *lookahead == DEFAULT_LOOKAHEAD => {
                f.write_str("zero-infinity")
            }
            PolicyKind::ZeroInfinityLike { lookahead } => write!(f, "zero-infinity:{lookahead}"),
            PolicyKind::L2LLike => f.write_str("l2l"),
            PolicyKind::NoOffload => f.write_str("no-offload"),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = SimError;

    /// Accepts the policy names, with `zero-infinity:K` selecting lookahead K.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tencache" => Ok(PolicyKind::TenCache),
            "tencache+opt" => Ok(PolicyKind::TenCachePlusOpt),
            "zero-infinity" => Ok(PolicyKind::ZeroInfinityLike {
                lookahead: DEFAULT_LOOKAHEAD,
            }),
            "l2l" => Ok(PolicyKind::L2LLike),
            "no-offload" => Ok(PolicyKind::NoOffload),
            other => match other.strip_prefix("zero-infinity:") {
                Some(k) => k
                    .trim_start_matches("k=")
                    .parse()
                    .map(|lookahead| PolicyKind::ZeroInfinityLike { lookahead })
                    .map_err(|_| SimError::Config(format!("invalid lookahead in policy `{other}`"))),
                None => Err(SimError::Config(format!(
                    "unknown policy `{other}` (expected one of {})",
                    PolicyKind::ALL_NAMES.join(", ")
                ))),
            },
        }
    }
}

pub fn build_policy(
    trace: &ExecutionTrace,
    machine: &MachineConfig,
    kind: &PolicyKind,
    cfg: &RunConfig,
) -> Result<Box<dyn Policy>> {
    Ok(match *kind {
        PolicyKind::TenCache => Box::new(TenCachePolicy::new(trace, machine, false, cfg)?),
        PolicyKind::TenCachePlusOpt => Box::new(TenCachePolicy::new(trace, machine, true, cfg)?),
        PolicyKind::ZeroInfinityLike { lookahead } => Box::new(ZeroInfinityLike::new(trace, machine, lookahead)?),
        PolicyKind::L2LLike => Box::new(L2LLike::new(trace, machine)?),
        PolicyKind::NoOffload => Box::new(NoOffload::new(trace, machine)?),
    })
}

fn sizes_of(trace: &ExecutionTrace) -> HashMap<TensorId, u64> {
    trace.tensors.iter().map(|t| (t.id, t.size_bytes)).collect()
}

fn request(kind: ActionKind, t: TensorId, src: Location, dst: Location, size: u64) -> TransferRequest {
    TransferRequest {
        tensor_id: t,
        src,
        dst,
        via_cpu_staging: matches!((src, dst), (Location::Nvme, Location::Gpu) | (Location::Gpu, Location::Nvme)),
        issue_us: 0.0,
        size_bytes: size,
        kind,
        src_buffer: None,
        dst_buffer: None,
        blocking: false,
    }
}

fn largest_step_bytes(trace: &ExecutionTrace, sizes: &HashMap<TensorId, u64>) -> u64 {
    let kinds = crate::engine::kinds_of(trace);
    trace
        .steps
        .iter()
        .filter(|s| s.phase != Phase::OptimizerUpdate)
        .map(|s| param_ids(s, &kinds).iter().map(|t| sizes[t]).sum::<u64>())
        .max()
        .unwrap_or(0)
}

// ---------------------------------------------------------------------------

/// Offloads parameters above the persistence threshold and fetches each on
/// demand at its step, prefetching the next `lookahead` parameter accesses.
/// Parameters are released after use unless one of those accesses needs
/// them. Optimizer states stay in CPU memory if they all fit; otherwise all
/// live on NVMe and are swapped in and out synchronously around each update.
pub struct ZeroInfinityLike {
    lookahead: usize,
    sizes: HashMap<TensorId, u64>,
    kinds: HashMap<TensorId, TensorKind>,
    /// Home tier of each offloaded parameter.
    home: BTreeMap<TensorId, Location>,
    persistent_bytes: u64,
    resident: BTreeSet<TensorId>,
    accesses: Vec<(usize, TensorId)>,
    opt: OptimizerScheduler,
    log: Vec<LogEntry>,
}

impl ZeroInfinityLike {
    pub fn new(trace: &ExecutionTrace, machine: &MachineConfig, lookahead: usize) -> Result<Self> {
        let sizes = sizes_of(trace);
        let params: Vec<_> = trace.tensors_of(TensorKind::ParamFp16).collect();
        let total: u64 = params.iter().map(|p| p.size_bytes).sum();
        let gpu = machine.gpu_capacity_bytes;
        let mut offload: BTreeSet<TensorId> = BTreeSet::new();
        if total > gpu {
            let working = largest_step_bytes(trace, &sizes) * (lookahead as u64 + 1);
            if working > gpu {
                return Err(SimError::OutOfMemory {
                    needed: working,
                    capacity: gpu,
                });
            }
            let mut persistent: Vec<_> = params
                .iter()
                .filter(|p| {
                    if p.size_bytes > PERSISTENCE_THRESHOLD_BYTES {
                        offload.insert(p.id);
                        false
                    } else {
                        true
                    }
                })
                .collect();
            persistent.sort_by_key(|p| (p.size_bytes, std::cmp::Reverse(p.id)));
            let mut kept: u64 = persistent.iter().map(|p| p.size_bytes).sum();
            while kept + working > gpu {
                let p = persistent.pop().expect("working set alone fits");
                kept -= p.size_bytes;
                offload.insert(p.id);
            }
        }
        let offload_bytes: u64 = offload.iter().map(|t| sizes[t]).sum();
        let staging = optimizer_staging_bytes(trace);
        let device = if offload_bytes + staging <= machine.cpu_capacity_bytes {
            Location::Cpu
        } else {
            Location::Nvme
        };
        let cpu_params = if device == Location::Cpu { offload_bytes } else { 0 };
        let opt = build_optimizer(
            trace,
            machine.cpu_capacity_bytes - cpu_params,
            OptimizerMode::AllOrNothing,
        )?;
        Ok(ZeroInfinityLike {
            lookahead,
            persistent_bytes: total - offload_bytes,
            home: offload.into_iter().map(|t| (t, device)).collect(),
            sizes,
            kinds: crate::engine::kinds_of(trace),
            resident: BTreeSet::new(),
            accesses: trace.param_accesses(),
            opt,
            log: Vec::new(),
        })
    }

    /// Index just past the accesses of step `pos`.
    fn after_step(&self, pos: usize) -> usize {
        self.accesses.partition_point(|&(p, _)| p <= pos)
    }

    fn bring_in(&mut self, t: TensorId, kind: ActionKind) -> Option<TransferRequest> {
        let &home = self.home.get(&t)?;
        if !self.resident.insert(t) {
            return None;
        }
        self.log.push(LogEntry {
            kind,
            tensor: t,
            src: home,
            dst: Location::Gpu,
        });
        Some(request(kind, t, home, Location::Gpu, self.sizes[&t]))
    }

    fn release_except(&mut self, keep: &BTreeSet<TensorId>) {
        let gone: Vec<_> = self.resident.difference(keep).copied().collect();
        for t in gone {
            self.resident.remove(&t);
            self.log.push(LogEntry {
                kind: ActionKind::Release,
                tensor: t,
                src: Location::Gpu,
                dst: self.home[&t],
            });
        }
    }
}

impl Policy for ZeroInfinityLike {
    fn step_start(&mut self, pos: usize, step: &TraceStep) -> Result<StepActions> {
        let mut acts = StepActions::default();
        if step.phase == Phase::OptimizerUpdate {
            for id in opt_ids(step, &self.kinds) {
                let (hit, reqs) = self.opt.on_update_start(id)?;
                if !hit {
                    acts.fetched.push(id);
                }
                acts.transfers.extend(reqs);
            }
            return Ok(acts);
        }
        for id in param_ids(step, &self.kinds) {
            if let Some(r) = self.bring_in(id, ActionKind::Fetch) {
                acts.fetched.push(id);
                acts.transfers.push(r);
            }
        }
        let from = self.after_step(pos);
        let upcoming: Vec<_> = self.accesses[from..(from + self.lookahead).min(self.accesses.len())]
            .iter()
            .map(|&(_, t)| t)
            .collect();
        for t in upcoming {
            acts.transfers.extend(self.bring_in(t, ActionKind::Prefetch));
        }
        Ok(acts)
    }

    fn step_end(&mut self, pos: usize, step: &TraceStep) -> Result<Vec<TransferRequest>> {
        if step.phase == Phase::OptimizerUpdate {
            let mut out = Vec::new();
            for id in opt_ids(step, &self.kinds) {
                out.extend(self.opt.on_update_done(id)?);
            }
            return Ok(out);
        }
        let from = self.after_step(pos);
        let keep = self.accesses[from..(from + self.lookahead).min(self.accesses.len())]
            .iter()
            .map(|&(_, t)| t)
            .collect();
        self.release_except(&keep);
        Ok(Vec::new())
    }

    fn iteration_end(&mut self) -> Result<Vec<TransferRequest>> {
        self.release_except(&BTreeSet::new());
        self.opt.restore()
    }

    fn drain_log(&mut self) -> Vec<LogEntry> {
        let mut log = std::mem::take(&mut self.log);
        log.append(&mut self.opt.log);
        log
    }

    fn occupancy(&self) -> (u64, u64) {
        let gpu = self.persistent_bytes + self.resident.iter().map(|t| self.sizes[t]).sum::<u64>();
        let cpu_params: u64 = self
            .home
            .iter()
            .filter(|(_, &l)| l == Location::Cpu)
            .map(|(t, _)| self.sizes[t])
            .sum();
        (gpu, cpu_params + self.opt.occupied_cpu_bytes())
    }

    fn fp16_in_nvme_count(&self) -> usize {
        self.home.values().filter(|&&l| l == Location::Nvme).count()
    }
}

// ---------------------------------------------------------------------------

/// Keeps only the active layer in GPU memory: all of a layer's parameters
/// are loaded when its first step starts and offloaded once the next step
/// belongs to another layer.
pub struct L2LLike {
    sizes: HashMap<TensorId, u64>,
    kinds: HashMap<TensorId, TensorKind>,
    home: Location,
    members: BTreeMap<u32, Vec<TensorId>>,
    layer_of: HashMap<TensorId, u32>,
    /// Parameter layers of each forward or backward step.
    step_layers: Vec<BTreeSet<u32>>,
    loaded: BTreeSet<u32>,
    cpu_param_bytes: u64,
    opt: OptimizerScheduler,
    log: Vec<LogEntry>,
}

impl L2LLike {
    pub fn new(trace: &ExecutionTrace, machine: &MachineConfig) -> Result<Self> {
        let sizes = sizes_of(trace);
        let kinds = crate::engine::kinds_of(trace);
        let mut members: BTreeMap<u32, Vec<TensorId>> = BTreeMap::new();
        let mut layer_of = HashMap::new();
        for p in trace.tensors_of(TensorKind::ParamFp16) {
            members.entry(p.layer).or_default().push(p.id);
            layer_of.insert(p.id, p.layer);
        }
        let largest = members
            .values()
            .map(|m| m.iter().map(|t| sizes[t]).sum::<u64>())
            .max()
            .unwrap_or(0);
        if largest > machine.gpu_capacity_bytes {
            return Err(SimError::OutOfMemory {
                needed: largest,
                capacity: machine.gpu_capacity_bytes,
            });
        }
        let total = trace.total_bytes(TensorKind::ParamFp16);
        let home = if total + optimizer_staging_bytes(trace) <= machine.cpu_capacity_bytes {
            Location::Cpu
        } else {
            Location::Nvme
        };
        let cpu_param_bytes = if home == Location::Cpu { total } else { 0 };
        let step_layers = trace
            .steps
            .iter()
            .map(|s| {
                if s.phase == Phase::OptimizerUpdate {
                    BTreeSet::new()
                } else {
                    param_ids(s, &kinds).iter().map(|t| layer_of[t]).collect()
                }
            })
            .collect();
        let opt = build_optimizer(
            trace,
            machine.cpu_capacity_bytes - cpu_param_bytes,
            OptimizerMode::AllOrNothing,
        )?;
        Ok(L2LLike {
            sizes,
            kinds,
            home,
            members,
            layer_of,
            step_layers,
            loaded: BTreeSet::new(),
            cpu_param_bytes,
            opt,
            log: Vec::new(),
        })
    }

    fn offload_except(&mut self, keep: &BTreeSet<u32>) -> Vec<TransferRequest> {
        let gone: Vec<u32> = self.loaded.difference(keep).copied().collect();
        let mut out = Vec::new();
        for layer in gone {
            self.loaded.remove(&layer);
            for &t in &self.members[&layer] {
                self.log.push(LogEntry {
                    kind: ActionKind::Evict,
                    tensor: t,
                    src: Location::Gpu,
                    dst: self.home,
                });
                out.push(request(ActionKind::Evict, t, Location::Gpu, self.home, self.sizes[&t]));
            }
        }
        out
    }
}

impl Policy for L2LLike {
    fn step_start(&mut self, pos: usize, step: &TraceStep) -> Result<StepActions> {
        let mut acts = StepActions::default();
        if step.phase == Phase::OptimizerUpdate {
            for id in opt_ids(step, &self.kinds) {
                let (hit, reqs) = self.opt.on_update_start(id)?;
                if !hit {
                    acts.fetched.push(id);
                }
                acts.transfers.extend(reqs);
            }
            return Ok(acts);
        }
        let used = param_ids(step, &self.kinds);
        for layer in self.step_layers[pos].clone() {
            if !self.loaded.insert(layer) {
                continue;
            }
            for &t in &self.members[&layer] {
                self.log.push(LogEntry {
                    kind: ActionKind::Fetch,
                    tensor: t,
                    src: self.home,
                    dst: Location::Gpu,
                });
                acts.transfers
                    .push(request(ActionKind::Fetch, t, self.home, Location::Gpu, self.sizes[&t]));
                if used.contains(&t) {
                    acts.fetched.push(t);
                }
            }
        }
        Ok(acts)
    }

    fn step_end(&mut self, pos: usize, step: &TraceStep) -> Result<Vec<TransferRequest>> {
        if step.phase == Phase::OptimizerUpdate {
            let mut out = Vec::new();
            for id in opt_ids(step, &self.kinds) {
                out.extend(self.opt.on_update_done(id)?);
            }
            return Ok(out);
        }
        let keep = self.step_layers.get(pos + 1).cloned().unwrap_or_default();
        Ok(self.offload_except(&keep))
    }

    fn iteration_end(&mut self) -> Result<Vec<TransferRequest>> {
        let mut out = self.offload_except(&BTreeSet::new());
        out.extend(self.opt.restore()?);
        Ok(out)
    }

    fn drain_log(&mut self) -> Vec<LogEntry> {
        let mut log = std::mem::take(&mut self.log);
        log.append(&mut self.opt.log);
        log
    }

    fn occupancy(&self) -> (u64, u64) {
        let gpu = self
            .loaded
            .iter()
            .flat_map(|l| &self.members[l])
            .map(|t| self.sizes[t])
            .sum();
        (gpu, self.cpu_param_bytes + self.opt.occupied_cpu_bytes())
    }

    fn fp16_in_nvme_count(&self) -> usize {
        if self.home == Location::Nvme {
            self.layer_of.len()
        } else {
            0
        }
    }
}

// ---------------------------------------------------------------------------

/// Everything resident in GPU memory for the whole run, or out of memory
/// before the first event. The bound is inclusive.
pub struct NoOffload {
    bytes: u64,
}

impl NoOffload {
    pub fn new(trace: &ExecutionTrace, machine: &MachineConfig) -> Result<Self> {
        let bytes = trace.total_bytes(TensorKind::ParamFp16) + trace.total_bytes(TensorKind::OptStateFp32);
        if bytes > machine.gpu_capacity_bytes {
            return Err(SimError::OutOfMemory {
                needed: bytes,
                capacity: machine.gpu_capacity_bytes,
            });
        }
        Ok(NoOffload { bytes })
    }
}

impl Policy for NoOffload {
    fn step_start(&mut self, _pos: usize, _step: &TraceStep) -> Result<StepActions> {
        Ok(StepActions::default())
    }

    fn step_end(&mut self, _pos: usize, _step: &TraceStep) -> Result<Vec<TransferRequest>> {
        Ok(Vec::new())
    }

    fn iteration_end(&mut self) -> Result<Vec<TransferRequest>> {
        Ok(Vec::new())
    }

    fn drain_log(&mut self) -> Vec<LogEntry> {
        Vec::new()
    }

    fn occupancy(&self) -> (u64, u64) {
        (self.bytes, 0)
    }

    fn fp16_in_nvme_count(&self) -> usize {
        0
    }
}
