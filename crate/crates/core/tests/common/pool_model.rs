//! Set-based reference model of a buffer pool.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use proptest::prelude::*;
use tencache_sim::bufpool::{build_pool, BufferId, ChunkState, PoolError};
use tencache_sim::{Location, TensorId};

#[derive(Clone, Debug)]
pub enum Op {
    /// Index into `CLASSES`; one past the end asks for an unknown size.
    Acquire(usize),
    Release(BufferId),
    Victim(usize, bool),
    Designate(BufferId),
}

pub const CLASSES: [u64; 3] = [64, 128, 4096];

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0..CLASSES.len() + 1).prop_map(Op::Acquire),
        3 => (0usize..40).prop_map(Op::Release),
        1 => (0..CLASSES.len(), any::<bool>()).prop_map(|(c, p)| Op::Victim(c, p)),
        1 => (0usize..40).prop_map(Op::Designate),
    ]
}

pub fn layout() -> impl Strategy<Value = Vec<u64>> {
    proptest::collection::vec(0u64..=12, CLASSES.len())
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Replays `ops` on a real pool and on FIFO free queues plus an occupant
/// map, checking every result and the full pool state after each step.
pub fn check(counts: &[u64], ops: &[Op]) -> Result<(), String> {
    let layout: BTreeMap<u64, u64> = CLASSES.iter().copied().zip(counts.iter().copied()).collect();
    let mut pool = build_pool(Location::Cpu, &layout);
    let sizes: Vec<u64> = pool.chunks.iter().map(|c| c.size).collect();
    let mut free: BTreeMap<u64, VecDeque<BufferId>> = BTreeMap::new();
    let mut occupant: BTreeMap<BufferId, TensorId> = BTreeMap::new();
    let mut designated: BTreeSet<BufferId> = BTreeSet::new();
    for c in &pool.chunks {
        free.entry(c.size).or_default().push_back(c.id);
    }
    for (step, op) in ops.iter().enumerate() {
        let tensor = step as TensorId;
        match *op {
            Op::Acquire(k) => {
                let size = CLASSES.get(k).copied().unwrap_or(100);
                let got = pool.acquire(size, tensor);
                match free.get_mut(&size) {
                    None => ensure!(matches!(got, Err(PoolError::UnknownSizeClass { .. })), "step {step}: {got:?}"),
                    Some(q) => match q.pop_front() {
                        None => ensure!(matches!(got, Err(PoolError::NoFreeBuffer { .. })), "step {step}: {got:?}"),
                        Some(id) => {
                            ensure!(got == Ok(id), "step {step}: acquired {got:?}, expected {id}");
                            occupant.insert(id, tensor);
                        }
                    },
                }
            }
            Op::Release(id) => {
                let got = pool.release(id);
                if id >= sizes.len() {
                    ensure!(matches!(got, Err(PoolError::UnknownBuffer { .. })), "step {step}: {got:?}");
                } else if occupant.remove(&id).is_some() {
                    ensure!(got.is_ok(), "step {step}: {got:?}");
                    designated.remove(&id);
                    free.get_mut(&sizes[id]).unwrap().push_back(id);
                } else {
                    ensure!(matches!(got, Err(PoolError::DoubleRelease { .. })), "step {step}: {got:?}");
                }
            }
            Op::Victim(k, prefer) => {
                let size = CLASSES[k];
                let want = occupant
                    .iter()
                    .filter(|(id, _)| sizes[**id] == size && (!prefer || designated.contains(id)))
                    .min_by_key(|(id, _)| pool.chunks[**id].offset)
                    .map(|(&id, &t)| (id, t));
                let got = pool.find_victim(size, prefer);
                ensure!(got == want, "step {step}: victim {got:?}, expected {want:?}");
            }
            Op::Designate(id) => {
                pool.mark_designated(id);
                if occupant.contains_key(&id) {
                    designated.insert(id);
                }
            }
        }
        pool.check_invariants().map_err(|e| format!("step {step}: {e}"))?;
        for c in &pool.chunks {
            let occ = occupant.get(&c.id).copied();
            ensure!(c.occupant == occ, "step {step}: buffer {} holds {:?}, expected {occ:?}", c.id, c.occupant);
            ensure!((c.state == ChunkState::Occupied) == occ.is_some(), "step {step}: buffer {} state", c.id);
            ensure!(c.gpu_designated == designated.contains(&c.id), "step {step}: buffer {} designation", c.id);
        }
        for (size, q) in &free {
            ensure!(&pool.free_lists[size] == q, "step {step}: free list {size} differs");
        }
    }
    Ok(())
}
