//! Small hand-worked scenarios and their expected event logs.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use tencache_sim::analyzer::{PrefetchRow, PrefetchTable};
use tencache_sim::bufpool::build_pool;
use tencache_sim::placement::{place_optimizer_states, PlacementState};
use tencache_sim::scheduler::{optimizer_step_schedule, ActionKind, LogEntry, OptimizerScheduler, SchedulerState};
use tencache_sim::tencache::TenCachePolicy;
use tencache_sim::trace::{synthesize_transformer_trace, SizeProfile, SynthSpec, TensorDescriptor, TensorKind};
use tencache_sim::*;

use ActionKind::*;
use Location::{Cpu, Gpu, Nvme};

pub type Action = (ActionKind, TensorId, Location, Location);

pub const S: u64 = 1_000_000;

/// `n` single-tensor layers of `S` bytes, one iteration.
pub fn chain(n: u32) -> ExecutionTrace {
    let mut spec = SynthSpec::new(n, 1, SizeProfile::Fixed(S));
    spec.iterations = 1;
    synthesize_transformer_trace(&spec).unwrap()
}

/// GPU holds `gpu` parameters plus one working buffer. CPU holds `cpu`
/// parameters, one staging buffer and one staged optimizer state.
pub fn machine(gpu: u64, cpu: u64) -> MachineConfig {
    let mut m = default_machine();
    m.gpu_capacity_bytes = (gpu + 1) * S;
    m.cpu_capacity_bytes = cpu * S + S + 6 * S;
    m
}

pub fn actions(entries: &[LogEntry]) -> Vec<Action> {
    entries.iter().map(|e| (e.kind, e.tensor, e.src, e.dst)).collect()
}

/// Final locations of nine tensors with GPU room for four and CPU room for
/// five, as (GPU, CPU, NVMe) lists.
pub fn nine_tensor_placement() -> [Vec<TensorId>; 3] {
    let p = TenCachePolicy::new(&chain(9), &machine(4, 5), false, &RunConfig::default()).unwrap();
    let pl = &p.scheduler().placement;
    let on = |loc| pl.final_of.iter().filter(|(_, &l)| l == loc).map(|(&t, _)| t).collect();
    [on(Gpu), on(Cpu), on(Nvme)]
}

pub fn nine_tensor_expected() -> [Vec<TensorId>; 3] {
    [vec![1, 2, 3, 4], vec![5, 6, 7, 8, 9], vec![]]
}

/// Parameter actions of one iteration over six tensors, three of which fit
/// on the GPU.
pub fn sliding_window_actions() -> Vec<Action> {
    let cfg = RunConfig {
        record_events: true,
        ..RunConfig::default()
    };
    let r = run(&chain(6), &machine(3, 3), &PolicyKind::TenCache, &cfg).unwrap();
    r.events
        .iter()
        .filter(|e| e.tensor <= 6 && e.kind != Stall)
        .map(|e| (e.kind, e.tensor, e.src, e.dst))
        .collect()
}

pub fn sliding_window_expected() -> Vec<Action> {
    vec![
        (Evict, 1, Gpu, Cpu),
        (Prefetch, 4, Cpu, Gpu),
        (Evict, 2, Gpu, Cpu),
        (Prefetch, 5, Cpu, Gpu),
        (Evict, 3, Gpu, Cpu),
        (Prefetch, 6, Cpu, Gpu),
        // Forward of 4, 5, 6 and the first backward access are halted.
        (Evict, 6, Gpu, Cpu),
        (Prefetch, 3, Cpu, Gpu),
        (Evict, 5, Gpu, Cpu),
        (Prefetch, 2, Cpu, Gpu),
        (Evict, 4, Gpu, Cpu),
        (Prefetch, 1, Cpu, Gpu),
    ]
}

/// Drives the scheduler through the forward pass of the six-tensor case.
/// Returns the first step's actions, the window once the forward pass has
/// slid to its end, and whether every later forward access was halted.
pub fn sliding_window_halt() -> (Vec<Action>, Vec<TensorId>, bool) {
    let p = TenCachePolicy::new(&chain(6), &machine(3, 3), false, &RunConfig::default()).unwrap();
    let mut s = p.scheduler().clone();
    let first = s.complete_access(0).unwrap().iter().map(|r| (r.kind, r.tensor_id, r.src, r.dst)).collect();
    s.complete_access(1).unwrap();
    s.complete_access(2).unwrap();
    let window = s.placement.active_window.clone();
    let halted = (3..6).all(|row| s.complete_access(row).unwrap().is_empty() && s.halted);
    (first, window, halted)
}

fn row(order: usize, tensor_id: TensorId) -> PrefetchRow {
    PrefetchRow {
        order,
        tensor_id,
        activation_us: order as f64,
        current_loc: Cpu,
        final_loc: Cpu,
        step: order,
    }
}

/// Seven tensors mid-pass: 1 and 3 (512 B) and 4 and 7 (1024 B) on GPU,
/// 5 and 6 (512 B) on CPU, and 2 (1024 B, homed on GPU) parked in the only
/// 1024-byte CPU buffer. Tensor 7 lives on NVMe and keeps its copy there.
pub fn three_tier_state() -> SchedulerState {
    let seq: Vec<TensorId> = (1..=7).chain((1..=7).rev()).collect();
    let table = PrefetchTable::from_rows(seq.iter().enumerate().map(|(i, &t)| row(i, t)).collect());
    let sizes: HashMap<TensorId, u64> =
        [(1, 512), (2, 1024), (3, 512), (4, 1024), (5, 512), (6, 512), (7, 1024)].into();
    let current = [(1, Gpu), (2, Cpu), (3, Gpu), (4, Gpu), (5, Cpu), (6, Cpu), (7, Gpu)];
    let finals = [(1, Gpu), (2, Gpu), (3, Gpu), (4, Cpu), (5, Cpu), (6, Cpu), (7, Nvme)];
    let placement = PlacementState {
        location_of: current.into_iter().collect(),
        final_of: finals.into_iter().collect(),
        nvme_copy: BTreeSet::from([7]),
        active_window: vec![1, 3, 4, 7],
        gpu_param_count_nvme: 1,
    };
    let mut s = SchedulerState::new(
        table,
        placement,
        build_pool(Gpu, &BTreeMap::from([(512, 2), (1024, 2)])),
        build_pool(Cpu, &BTreeMap::from([(512, 2), (1024, 1)])),
        sizes,
    )
    .unwrap();
    let b = s.cpu_pool.buffer_of(2).unwrap();
    s.cpu_pool.mark_designated(b);
    s.position = Some(6);
    s
}

/// Evicts 4 into a full CPU class, then evicts 7. Returns the transfers of
/// each eviction and the scheduler afterwards.
pub fn three_tier_evictions() -> (Vec<Action>, Vec<Action>, SchedulerState) {
    let mut s = three_tier_state();
    let tuples = |v: Vec<tencache_sim::scheduler::TransferRequest>| -> Vec<Action> {
        v.iter().map(|r| (r.kind, r.tensor_id, r.src, r.dst)).collect()
    };
    let a = tuples(s.evict_tensor(4).unwrap());
    let b = tuples(s.evict_tensor(7).unwrap());
    (a, b, s)
}

pub fn three_tier_expected_log() -> Vec<Action> {
    vec![(Swap, 2, Cpu, Nvme), (Evict, 4, Gpu, Cpu), (Release, 7, Gpu, Nvme)]
}

/// Eight equal optimizer states, five of which fit in CPU memory. Returns
/// the log after the first update, the log of the remaining updates with
/// their (hits, misses), and the log of the iteration-end restore.
pub fn optimizer_refill() -> (Vec<Action>, Vec<Action>, (usize, usize), Vec<Action>) {
    let order: Vec<TensorId> = (1..=8).collect();
    let states: Vec<_> = order
        .iter()
        .map(|&id| TensorDescriptor {
            id,
            size_bytes: 100,
            kind: TensorKind::OptStateFp32,
            layer: 0,
        })
        .collect();
    let placement = place_optimizer_states(&states, 500);
    let sizes = order.iter().map(|&t| (t, 100)).collect();
    let mut o = OptimizerScheduler::new(
        order.clone(),
        placement,
        build_pool(Cpu, &BTreeMap::from([(100, 5)])),
        sizes,
        true,
    )
    .unwrap();
    let (hit, reqs) = o.on_update_start(1).unwrap();
    assert!(hit && reqs.is_empty());
    o.on_update_done(1).unwrap();
    let first = actions(&std::mem::take(&mut o.log));
    let phase = optimizer_step_schedule(&mut o, &order[1..]).unwrap();
    let rest = actions(&std::mem::take(&mut o.log));
    o.restore().unwrap();
    let restore = actions(&o.log);
    (first, rest, (phase.hits, phase.misses), restore)
}

pub fn optimizer_refill_expected() -> (Vec<Action>, Vec<Action>, (usize, usize), Vec<Action>) {
    (
        vec![(Evict, 1, Cpu, Nvme), (Prefetch, 6, Nvme, Cpu)],
        vec![
            (Evict, 2, Cpu, Nvme),
            (Prefetch, 7, Nvme, Cpu),
            (Evict, 3, Cpu, Nvme),
            (Prefetch, 8, Nvme, Cpu),
        ],
        (7, 0),
        vec![
            (Writeback, 6, Cpu, Nvme),
            (Writeback, 7, Cpu, Nvme),
            (Writeback, 8, Cpu, Nvme),
            (Restore, 1, Nvme, Cpu),
            (Restore, 2, Nvme, Cpu),
            (Restore, 3, Nvme, Cpu),
        ],
    )
}
