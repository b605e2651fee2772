//! Runtime prefetch and eviction of FP16 parameters and FP32 optimizer
//! states.
//!
//! The scheduler is order-driven: it reacts to access-completion events and
//! consults the prefetch table, never a clock. Every decision yields
//! [`TransferRequest`]s that the engine times on the modeled links, plus a
//! log of actions (including buffer releases that move no data).

use std::cmp::Reverse;
use std::collections::HashMap;

use serde::Serialize;

use crate::analyzer::PrefetchTable;
use crate::bufpool::{BufferId, BufferPool, PoolError};
use crate::error::{Result, SimError};
use crate::machine::Location;
use crate::placement::PlacementState;
use crate::trace::TensorId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SchedMode {
    CpuGpu,
    CpuGpuNvme,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    /// Ahead-of-time copy toward the compute tier.
    Prefetch,
    /// On-demand copy for an access that found its tensor absent.
    Fetch,
    /// Copy out of GPU memory after use.
    Evict,
    /// CPU occupant pushed to NVMe to make room.
    Swap,
    /// Updated optimizer state written back to NVMe.
    Writeback,
    /// Buffer returned to its free list with no data movement.
    Release,
    /// Iteration-boundary move back to the final location.
    Restore,
    /// Compute blocked on an incomplete transfer (engine only).
    Stall,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Prefetch => "prefetch",
            ActionKind::Fetch => "fetch",
            ActionKind::Evict => "evict",
            ActionKind::Swap => "swap",
            ActionKind::Writeback => "writeback",
            ActionKind::Release => "release",
            ActionKind::Restore => "restore",
            ActionKind::Stall => "stall",
        }
    }
}

/// Which buffer pool a [`BufferRef`] points into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PoolKind {
    GpuParams,
    CpuParams,
    CpuOptStates,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferRef {
    pub pool: PoolKind,
    pub id: BufferId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferRequest {
    pub tensor_id: TensorId,
    pub src: Location,
    pub dst: Location,
    /// NVMe->GPU copies pass through a CPU staging buffer.
    pub via_cpu_staging: bool,
    /// Set by the engine when the request is issued.
    pub issue_us: f64,
    pub size_bytes: u64,
    pub kind: ActionKind,
    pub src_buffer: Option<BufferRef>,
    pub dst_buffer: Option<BufferRef>,
    /// The compute timeline may not proceed until this transfer completes.
    pub blocking: bool,
}

impl TransferRequest {
    fn new(kind: ActionKind, tensor_id: TensorId, src: Location, dst: Location, size_bytes: u64) -> Self {
        let via_cpu_staging = matches!((src, dst), (Location::Nvme, Location::Gpu) | (Location::Gpu, Location::Nvme));
        TransferRequest {
            tensor_id,
            src,
            dst,
            via_cpu_staging,
            issue_us: 0.0,
            size_bytes,
            kind,
            src_buffer: None,
            dst_buffer: None,
            blocking: false,
        }
    }

    fn with_src_buf(mut self, b: Option<BufferRef>) -> Self {
        self.src_buffer = b;
        self
    }

    fn with_dst_buf(mut self, b: Option<BufferRef>) -> Self {
        self.dst_buffer = b;
        self
    }
}

/// One scheduler action, in decision order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LogEntry {
    pub kind: ActionKind,
    pub tensor: TensorId,
    pub src: Location,
    pub dst: Location,
}

fn gpu_ref(id: BufferId) -> Option<BufferRef> {
    Some(BufferRef {
        pool: PoolKind::GpuParams,
        id,
    })
}

fn cpu_ref(id: BufferId) -> Option<BufferRef> {
    Some(BufferRef {
        pool: PoolKind::CpuParams,
        id,
    })
}

/// Parameter-side scheduler state: prefetch table with cursor, placement,
/// and the GPU and CPU buffer pools.
#[derive(Clone, Debug)]
pub struct SchedulerState {
    pub mode: SchedMode,
    pub table: PrefetchTable,
    pub placement: PlacementState,
    pub gpu_pool: BufferPool,
    pub cpu_pool: BufferPool,
    pub halted: bool,
    /// Last completed table row in the current iteration.
    pub position: Option<usize>,
    pub log: Vec<LogEntry>,
    sizes: HashMap<TensorId, u64>,
}

impl SchedulerState {
    /// Seeds the pools with every parameter at its placed location.
    pub fn new(
        table: PrefetchTable,
        placement: PlacementState,
        mut gpu_pool: BufferPool,
        mut cpu_pool: BufferPool,
        sizes: HashMap<TensorId, u64>,
    ) -> Result<Self> {
        for t in table.first_access_order() {
            let size = *sizes
                .get(&t)
                .ok_or_else(|| SimError::Config(format!("no size for tensor {t}")))?;
            let pool = match placement.location(t) {
                Some(Location::Gpu) => &mut gpu_pool,
                Some(Location::Cpu) => &mut cpu_pool,
                Some(Location::Nvme) => continue,
                None => return Err(SimError::AccessToUnplacedTensor(t)),
            };
            pool.acquire(size, t)
                .map_err(|e| SimError::Config(format!("placement exceeds pool capacity: {e}")))?;
        }
        let mode = if placement.location_of.values().any(|&l| l == Location::Nvme) {
            SchedMode::CpuGpuNvme
        } else {
            SchedMode::CpuGpu
        };
        Ok(SchedulerState {
            mode,
            table,
            placement,
            gpu_pool,
            cpu_pool,
            halted: false,
            position: None,
            log: Vec::new(),
            sizes,
        })
    }

    pub fn size_of(&self, t: TensorId) -> u64 {
        self.sizes.get(&t).copied().unwrap_or(0)
    }

    fn location(&self, t: TensorId) -> Result<Location> {
        self.placement
            .location(t)
            .ok_or(SimError::AccessToUnplacedTensor(t))
    }

    fn set_location(&mut self, t: TensorId, loc: Location) {
        self.placement.location_of.insert(t, loc);
        self.table.set_current(t, loc);
    }

    fn note(&mut self, kind: ActionKind, tensor: TensorId, src: Location, dst: Location) {
        self.log.push(LogEntry { kind, tensor, src, dst });
    }

    /// Distance key for "inactive for the longest": tensors never used again
    /// rank farthest; ties go to the lowest id.
    fn farthest_first_key(&self, t: TensorId) -> (Reverse<usize>, TensorId) {
        let next = self.table.next_use_after(t, self.position).unwrap_or(usize::MAX);
        (Reverse(next), t)
    }

    /// True when the next `window size` rows from the cursor all reference
    /// tensors already in GPU memory; evicting any of them would only force a
    /// reload.
    pub fn halt_check(&self) -> bool {
        let window = &self.placement.active_window;
        if window.is_empty() {
            return false;
        }
        let end = (self.table.cursor + window.len()).min(self.table.len());
        self.table.rows[self.table.cursor.min(end)..end]
            .iter()
            .all(|r| window.contains(&r.tensor_id))
    }

    /// Handles the completion of the access at `row`: advances the cursor
    /// past it, applies the halt rule, and otherwise evicts the tensor and
    /// prefetches the next one.
    pub fn complete_access(&mut self, row: usize) -> Result<Vec<TransferRequest>> {
        self.position = Some(self.position.map_or(row, |p| p.max(row)));
        self.table.cursor = self.table.cursor.max(row + 1);
        self.halted = self.halt_check();
        if self.halted {
            return Ok(Vec::new());
        }
        let t = self.table.rows[row].tensor_id;
        if !self.placement.in_window(t) {
            return Ok(Vec::new());
        }
        self.prefetch_tensor(&[t])
    }

    /// Evicts each listed tensor and prefetches the next table tensor that is
    /// not already in the active window.
    pub fn prefetch_tensor(&mut self, evicted: &[TensorId]) -> Result<Vec<TransferRequest>> {
        let mut out = Vec::new();
        for &x in evicted {
            if self.table.cursor >= self.table.len() {
                continue;
            }
            self.placement.window_remove(x);
            while self.table.cursor < self.table.len()
                && self.placement.in_window(self.table.rows[self.table.cursor].tensor_id)
            {
                self.table.cursor += 1;
            }
            let target = (self.table.cursor < self.table.len())
                .then(|| self.table.rows[self.table.cursor].tensor_id)
                .filter(|&p| self.gpu_pool.has_class(self.size_of(p)));
            let target = match target {
                Some(p) if self.gpu_slot_available(p, x) => Some(p),
                _ => None,
            };

            // The target's CPU copy leaves as the evicted tensor arrives, so
            // its buffer is handed back before the eviction looks for one.
            let mut target_src = None;
            if let Some(p) = target {
                if self.location(p)? == Location::Cpu {
                    if let Some(b) = self.cpu_pool.buffer_of(p) {
                        self.cpu_pool.release(b)?;
                        target_src = cpu_ref(b);
                    }
                }
            }

            if self.gpu_pool.buffer_of(x).is_some() {
                out.extend(self.evict_tensor(x)?);
            }

            if let Some(p) = target {
                let g = self.obtain_gpu_buffer(p, &[], &mut out)?;
                self.placement.window_insert(p);
                let src = self.location(p)?;
                let size = self.size_of(p);
                out.push(
                    TransferRequest::new(ActionKind::Prefetch, p, src, Location::Gpu, size)
                        .with_src_buf(target_src)
                        .with_dst_buf(gpu_ref(g)),
                );
                self.note(ActionKind::Prefetch, p, src, Location::Gpu);
                self.set_location(p, Location::Gpu);
                self.table.cursor += 1;
            }
        }
        Ok(out)
    }

    /// Whether a GPU buffer for `p` can be had once `x` leaves, without
    /// displacing a window tensor that is needed before `p`.
    fn gpu_slot_available(&self, p: TensorId, x: TensorId) -> bool {
        let size = self.size_of(p);
        if self.gpu_pool.free_count(size) > 0 {
            return true;
        }
        if self.gpu_pool.buffer_of(x).is_some() && self.size_of(x) == size {
            return true;
        }
        let p_next = self.table.cursor;
        self.gpu_victim(size, &[x])
            .is_some_and(|v| self.table.next_use_after(v, self.position).is_none_or(|n| n > p_next))
    }

    fn gpu_victim(&self, size: u64, exclude: &[TensorId]) -> Option<TensorId> {
        self.gpu_pool
            .occupants(size, false)
            .filter_map(|c| c.occupant)
            .filter(|t| !exclude.contains(t))
            .min_by_key(|&t| self.farthest_first_key(t))
    }

    fn obtain_gpu_buffer(
        &mut self,
        p: TensorId,
        protect: &[TensorId],
        out: &mut Vec<TransferRequest>,
    ) -> Result<BufferId> {
        let size = self.size_of(p);
        match self.gpu_pool.acquire(size, p) {
            Ok(b) => Ok(b),
            Err(PoolError::NoFreeBuffer { .. }) => {
                let victim = self.gpu_victim(size, protect).ok_or_else(|| {
                    SimError::Config(format!("no GPU buffer of size {size} can be freed for tensor {p}"))
                })?;
                self.placement.window_remove(victim);
                out.extend(self.evict_tensor(victim)?);
                Ok(self.gpu_pool.acquire(size, p)?)
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Moves a GPU-resident tensor out of GPU memory: a buffer release when
    /// NVMe already holds its copy, otherwise a copy into a CPU buffer,
    /// swapping a CPU occupant of the same size to NVMe if none is free.
    pub fn evict_tensor(&mut self, x: TensorId) -> Result<Vec<TransferRequest>> {
        let mut out = Vec::new();
        let gbuf = self
            .gpu_pool
            .buffer_of(x)
            .ok_or_else(|| SimError::Invariant(format!("evicting tensor {x} that holds no GPU buffer")))?;
        let size = self.size_of(x);
        let final_loc = self
            .placement
            .final_location(x)
            .ok_or(SimError::AccessToUnplacedTensor(x))?;
        self.placement.window_remove(x);

        if final_loc == Location::Nvme && self.placement.nvme_copy.contains(&x) {
            self.gpu_pool.release(gbuf)?;
            self.note(ActionKind::Release, x, Location::Gpu, Location::Nvme);
            self.set_location(x, Location::Nvme);
            return Ok(out);
        }

        if !self.cpu_pool.has_class(size) {
            // No CPU cache for this size: write straight through to NVMe.
            out.push(
                TransferRequest::new(ActionKind::Evict, x, Location::Gpu, Location::Nvme, size).with_src_buf(gpu_ref(gbuf)),
            );
            self.note(ActionKind::Evict, x, Location::Gpu, Location::Nvme);
            self.placement.nvme_copy.insert(x);
            self.gpu_pool.release(gbuf)?;
            self.set_location(x, Location::Nvme);
            return Ok(out);
        }

        let cbuf = match self.cpu_pool.acquire(size, x) {
            Ok(b) => b,
            Err(PoolError::NoFreeBuffer { .. }) => {
                let pick = |designated: bool| {
                    self.cpu_pool
                        .occupants(size, designated)
                        .filter_map(|c| c.occupant)
                        .min_by_key(|&t| self.farthest_first_key(t))
                };
                let victim = pick(true)
                    .or_else(|| pick(false))
                    .ok_or_else(|| SimError::Invariant(format!("CPU class {size} has no buffers to reclaim")))?;
                let vbuf = self.cpu_pool.buffer_of(victim).expect("occupant has a buffer");
                if !self.placement.nvme_copy.contains(&victim) {
                    out.push(
                        TransferRequest::new(ActionKind::Swap, victim, Location::Cpu, Location::Nvme, size)
                            .with_src_buf(cpu_ref(vbuf)),
                    );
                    self.placement.nvme_copy.insert(victim);
                }
                self.note(ActionKind::Swap, victim, Location::Cpu, Location::Nvme);
                self.set_location(victim, Location::Nvme);
                self.cpu_pool.release(vbuf)?;
                self.cpu_pool.acquire(size, x)?
            }
            Err(e) => return Err(e.into()),
        };
        if final_loc == Location::Gpu {
            self.cpu_pool.mark_designated(cbuf);
        }
        out.push(
            TransferRequest::new(ActionKind::Evict, x, Location::Gpu, Location::Cpu, size)
                .with_src_buf(gpu_ref(gbuf))
                .with_dst_buf(cpu_ref(cbuf)),
        );
        self.note(ActionKind::Evict, x, Location::Gpu, Location::Cpu);
        self.gpu_pool.release(gbuf)?;
        self.set_location(x, Location::Cpu);
        Ok(out)
    }

    /// Brings every tensor a step needs into GPU memory, evicting the window
    /// tensor used farthest in the future when its size class is full.
    pub fn ensure_resident(&mut self, tensors: &[TensorId]) -> Result<Vec<TransferRequest>> {
        let mut out = Vec::new();
        for &t in tensors {
            let loc = self.location(t)?;
            if loc == Location::Gpu {
                continue;
            }
            let src_buf = if loc == Location::Cpu {
                let b = self.cpu_pool.buffer_of(t);
                if let Some(b) = b {
                    self.cpu_pool.release(b)?;
                }
                b.and_then(cpu_ref)
            } else {
                None
            };
            let g = self.obtain_gpu_buffer(t, tensors, &mut out)?;
            self.placement.window_insert(t);
            let size = self.size_of(t);
            out.push(
                TransferRequest::new(ActionKind::Fetch, t, loc, Location::Gpu, size)
                    .with_src_buf(src_buf)
                    .with_dst_buf(gpu_ref(g)),
            );
            self.note(ActionKind::Fetch, t, loc, Location::Gpu);
            self.set_location(t, Location::Gpu);
        }
        Ok(out)
    }

    /// Returns every parameter to its final location and rewinds the table.
    pub fn restore_final_locations(&mut self) -> Result<Vec<TransferRequest>> {
        let order = self.table.first_access_order();
        let misplaced: Vec<(TensorId, Location, Location)> = order
            .iter()
            .filter_map(|&t| {
                let cur = self.placement.location(t)?;
                let fin = self.placement.final_location(t)?;
                (cur != fin).then_some((t, cur, fin))
            })
            .collect();

        let mut sources = HashMap::new();
        for &(t, cur, _) in &misplaced {
            let src = match cur {
                Location::Gpu => self.gpu_pool.buffer_of(t).and_then(gpu_ref),
                Location::Cpu => self.cpu_pool.buffer_of(t).and_then(cpu_ref),
                Location::Nvme => None,
            };
            if let Some(r) = src {
                match r.pool {
                    PoolKind::GpuParams => self.gpu_pool.release(r.id)?,
                    _ => self.cpu_pool.release(r.id)?,
                }
            }
            sources.insert(t, src);
        }

        let mut out = Vec::new();
        for (t, cur, fin) in misplaced {
            let size = self.size_of(t);
            let dst = match fin {
                Location::Gpu => gpu_ref(self.gpu_pool.acquire(size, t)?),
                Location::Cpu => cpu_ref(self.cpu_pool.acquire(size, t)?),
                Location::Nvme => None,
            };
            if fin == Location::Nvme && self.placement.nvme_copy.contains(&t) {
                self.note(ActionKind::Release, t, cur, fin);
            } else {
                out.push(
                    TransferRequest::new(ActionKind::Restore, t, cur, fin, size)
                        .with_src_buf(sources[&t])
                        .with_dst_buf(dst),
                );
                self.note(ActionKind::Restore, t, cur, fin);
            }
            self.set_location(t, fin);
        }

        self.placement.active_window = order
            .into_iter()
            .filter(|&t| self.placement.location(t) == Some(Location::Gpu))
            .collect();
        self.table.cursor = 0;
        self.position = None;
        self.halted = false;
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Optimizer states

fn opt_ref(id: BufferId) -> Option<BufferRef> {
    Some(BufferRef {
        pool: PoolKind::CpuOptStates,
        id,
    })
}

/// Optimizer-state scheduler. With `async_prefetch`, a CPU-resident state is
/// written back once updated and its slot refilled with the earliest
/// NVMe-resident state still to come, overlapping the read with CPU
/// updates. Without it, NVMe-resident states are read and written back
/// synchronously around their update.
#[derive(Clone, Debug)]
pub struct OptimizerScheduler {
    pub order: Vec<TensorId>,
    pub placement: PlacementState,
    pub pool: BufferPool,
    pub async_prefetch: bool,
    pub log: Vec<LogEntry>,
    sizes: HashMap<TensorId, u64>,
    done: Vec<bool>,
    staged: Vec<TensorId>,
}

/// Outcome of a whole optimizer phase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerPhase {
    pub transfers: Vec<TransferRequest>,
    pub hits: usize,
    pub misses: usize,
}

impl OptimizerScheduler {
    pub fn new(
        order: Vec<TensorId>,
        placement: PlacementState,
        mut pool: BufferPool,
        sizes: HashMap<TensorId, u64>,
        async_prefetch: bool,
    ) -> Result<Self> {
        for &t in &order {
            if placement.location(t) == Some(Location::Cpu) {
                let size = sizes.get(&t).copied().unwrap_or(0);
                pool.acquire(size, t)
                    .map_err(|e| SimError::Config(format!("optimizer placement exceeds CPU slots: {e}")))?;
            }
        }
        let n = order.len();
        Ok(OptimizerScheduler {
            order,
            placement,
            pool,
            async_prefetch,
            log: Vec::new(),
            sizes,
            done: vec![false; n],
            staged: Vec::new(),
        })
    }

    fn size_of(&self, t: TensorId) -> u64 {
        self.sizes.get(&t).copied().unwrap_or(0)
    }

    fn set_location(&mut self, t: TensorId, loc: Location) {
        self.placement.location_of.insert(t, loc);
    }

    fn note(&mut self, kind: ActionKind, tensor: TensorId, src: Location, dst: Location) {
        self.log.push(LogEntry { kind, tensor, src, dst });
    }

    /// Called as the update of `t` begins. Returns whether the state was
    /// found in memory (a hit) and any on-demand read.
    pub fn on_update_start(&mut self, t: TensorId) -> Result<(bool, Vec<TransferRequest>)> {
        match self.placement.location(t) {
            Some(Location::Cpu | Location::Gpu) => Ok((true, Vec::new())),
            Some(Location::Nvme) => {
                let size = self.size_of(t);
                let slot = self.pool.acquire(size, t).ok();
                if slot.is_none() {
                    self.staged.push(t);
                }
                let req = TransferRequest::new(ActionKind::Fetch, t, Location::Nvme, Location::Cpu, size)
                    .with_dst_buf(slot.and_then(opt_ref));
                self.note(ActionKind::Fetch, t, Location::Nvme, Location::Cpu);
                self.set_location(t, Location::Cpu);
                Ok((false, vec![req]))
            }
            None => Err(SimError::AccessToUnplacedTensor(t)),
        }
    }

    /// Called once the update of `t` is done.
    pub fn on_update_done(&mut self, t: TensorId) -> Result<Vec<TransferRequest>> {
        let idx = self.order.iter().position(|&x| x == t);
        if let Some(i) = idx {
            self.done[i] = true;
        }
        let size = self.size_of(t);
        let mut out = Vec::new();
        if let Some(pos) = self.staged.iter().position(|&x| x == t) {
            // Read into a temporary buffer: write back before moving on.
            self.staged.swap_remove(pos);
            let mut req = TransferRequest::new(ActionKind::Writeback, t, Location::Cpu, Location::Nvme, size);
            req.blocking = true;
            out.push(req);
            self.note(ActionKind::Writeback, t, Location::Cpu, Location::Nvme);
            self.placement.nvme_copy.insert(t);
            self.set_location(t, Location::Nvme);
            return Ok(out);
        }
        if !self.async_prefetch || self.placement.location(t) != Some(Location::Cpu) {
            return Ok(out);
        }
        let Some(slot) = self.pool.buffer_of(t) else {
            return Ok(out);
        };
        let next = self
            .order
            .iter()
            .enumerate()
            .find(|&(i, &q)| {
                !self.done[i] && self.placement.location(q) == Some(Location::Nvme) && self.size_of(q) == size
            })
            .map(|(_, &q)| q);
        let Some(q) = next else {
            return Ok(out);
        };
        out.push(TransferRequest::new(ActionKind::Writeback, t, Location::Cpu, Location::Nvme, size).with_src_buf(opt_ref(slot)));
        self.note(ActionKind::Evict, t, Location::Cpu, Location::Nvme);
        self.placement.nvme_copy.insert(t);
        self.set_location(t, Location::Nvme);
        self.pool.release(slot)?;
        let qslot = self.pool.acquire(size, q)?;
        out.push(TransferRequest::new(ActionKind::Prefetch, q, Location::Nvme, Location::Cpu, size).with_dst_buf(opt_ref(qslot)));
        self.note(ActionKind::Prefetch, q, Location::Nvme, Location::Cpu);
        self.set_location(q, Location::Cpu);
        Ok(out)
    }

    /// Writes updated NVMe-homed states back and reloads CPU-homed states
    /// that were displaced, ready for the next iteration.
    pub fn restore(&mut self) -> Result<Vec<TransferRequest>> {
        let mut out = Vec::new();
        let order = self.order.clone();
        for &t in &order {
            let cur = self.placement.location(t);
            let fin = self.placement.final_location(t);
            if cur == Some(Location::Cpu) && fin == Some(Location::Nvme) {
                let size = self.size_of(t);
                let slot = self.pool.buffer_of(t);
                out.push(
                    TransferRequest::new(ActionKind::Writeback, t, Location::Cpu, Location::Nvme, size)
                        .with_src_buf(slot.and_then(opt_ref)),
                );
                self.note(ActionKind::Writeback, t, Location::Cpu, Location::Nvme);
                if let Some(s) = slot {
                    self.pool.release(s)?;
                }
                self.set_location(t, Location::Nvme);
            }
        }
        for &t in &order {
            let cur = self.placement.location(t);
            let fin = self.placement.final_location(t);
            if cur == Some(Location::Nvme) && fin == Some(Location::Cpu) {
                let size = self.size_of(t);
                let slot = self.pool.acquire(size, t)?;
                out.push(
                    TransferRequest::new(ActionKind::Restore, t, Location::Nvme, Location::Cpu, size)
                        .with_dst_buf(opt_ref(slot)),
                );
                self.note(ActionKind::Restore, t, Location::Nvme, Location::Cpu);
                self.set_location(t, Location::Cpu);
            }
        }
        self.done.iter_mut().for_each(|d| *d = false);
        Ok(out)
    }

    pub fn occupied_cpu_bytes(&self) -> u64 {
        let staged: u64 = self.staged.iter().map(|&t| self.size_of(t)).sum();
        self.pool.occupied_bytes() + staged
    }
}

/// Runs one optimizer phase over `states_in_update_order`.
pub fn optimizer_step_schedule(
    state: &mut OptimizerScheduler,
    states_in_update_order: &[TensorId],
) -> Result<OptimizerPhase> {
    let mut phase = OptimizerPhase::default();
    for &t in states_in_update_order {
        let (hit, reqs) = state.on_update_start(t)?;
        if hit {
            phase.hits += 1;
        } else {
            phase.misses += 1;
        }
        phase.transfers.extend(reqs);
        phase.transfers.extend(state.on_update_done(t)?);
    }
    Ok(phase)
}
