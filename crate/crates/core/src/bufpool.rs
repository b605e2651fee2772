//! Size-classed buffer pools carved from one contiguous region per tier.
//!
//! Buffer counts per size come from the tensor size distribution and the
//! memory available on each tier. Every chunk belongs to exactly one size
//! class and holds only tensors of that exact size.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;

use num_rational::Ratio;
use serde::Serialize;
use thiserror::Error;

use crate::analyzer::{SizeDistribution, TensorCensus};
use crate::machine::Location;
use crate::trace::TensorId;

pub type BufferId = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolError {
    #[error("no free {tier} buffer of size {size}")]
    NoFreeBuffer { tier: Location, size: u64 },
    #[error("{tier} pool has no size class {size}")]
    UnknownSizeClass { tier: Location, size: u64 },
    #[error("{tier} buffer {buffer} released twice")]
    DoubleRelease { tier: Location, buffer: BufferId },
    #[error("{tier} pool has no buffer {buffer}")]
    UnknownBuffer { tier: Location, buffer: BufferId },
}

/// Per-size buffer counts for the GPU and CPU caches.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BufferPlan {
    pub gpu_counts: BTreeMap<u64, u64>,
    pub cpu_counts: BTreeMap<u64, u64>,
    pub gpu_avail_bytes: u64,
    pub cpu_avail_bytes: u64,
}

impl BufferPlan {
    pub fn gpu_bytes(&self) -> u64 {
        self.gpu_counts.iter().map(|(s, c)| s * c).sum()
    }

    pub fn cpu_bytes(&self) -> u64 {
        self.cpu_counts.iter().map(|(s, c)| s * c).sum()
    }
}

fn floor_share(share: Ratio<u128>, avail: u64, size: u64) -> u64 {
    let n = share * Ratio::from_integer(avail as u128) / Ratio::from_integer(size as u128);
    n.floor().to_integer().min(u64::MAX as u128) as u64
}

/// Buffer counter: GPU buffers first, then CPU buffers for the remainder of
/// each size class. Counts are floored so the planned bytes never exceed
/// what is available.
pub fn plan_buffers(tc: &TensorCensus, tsd: &SizeDistribution, gpu_avail: u64, cpu_avail: u64) -> BufferPlan {
    let mut plan = BufferPlan {
        gpu_avail_bytes: gpu_avail,
        cpu_avail_bytes: cpu_avail,
        ..Default::default()
    };
    for (&s, &c) in &tc.entries {
        let share = tsd.exact(s).unwrap_or_else(|| Ratio::from_integer(0));
        let g = floor_share(share, gpu_avail, s).min(c);
        let cpu = floor_share(share, cpu_avail, s).min(c - g);
        plan.gpu_counts.insert(s, g);
        plan.cpu_counts.insert(s, cpu);
    }
    plan
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ChunkState {
    Free,
    Occupied,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Chunk {
    pub id: BufferId,
    pub offset: u64,
    pub size: u64,
    pub state: ChunkState,
    pub occupant: Option<TensorId>,
    pub gpu_designated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferPool {
    pub tier: Location,
    pub region_bytes: u64,
    pub chunks: Vec<Chunk>,
    pub free_lists: BTreeMap<u64, VecDeque<BufferId>>,
    by_tensor: HashMap<TensorId, BufferId>,
}

/// Lays chunks out contiguously from offset 0, ascending by size class and
/// then index. Every chunk starts free and free lists follow offset order.
/// Classes with no buffers are left out.
pub fn build_pool(tier: Location, counts: &BTreeMap<u64, u64>) -> BufferPool {
    let mut chunks = Vec::new();
    let mut free_lists: BTreeMap<u64, VecDeque<BufferId>> = BTreeMap::new();
    let mut offset = 0u64;
    for (&size, &count) in counts.iter().filter(|(_, &c)| c > 0) {
        let list = free_lists.entry(size).or_default();
        for _ in 0..count {
            let id = chunks.len();
            chunks.push(Chunk {
                id,
                offset,
                size,
                state: ChunkState::Free,
                occupant: None,
                gpu_designated: false,
            });
            list.push_back(id);
            offset += size;
        }
    }
    BufferPool {
        tier,
        region_bytes: offset,
        chunks,
        free_lists,
        by_tensor: HashMap::new(),
    }
}

impl BufferPool {
    pub fn has_class(&self, size: u64) -> bool {
        self.free_lists.contains_key(&size)
    }

    pub fn free_count(&self, size: u64) -> usize {
        self.free_lists.get(&size).map_or(0, |l| l.len())
    }

    pub fn class_count(&self, size: u64) -> usize {
        self.chunks.iter().filter(|c| c.size == size).count()
    }

    pub fn occupied_bytes(&self) -> u64 {
        self.chunks
            .iter()
            .filter(|c| c.state == ChunkState::Occupied)
            .map(|c| c.size)
            .sum()
    }

    pub fn buffer_of(&self, tensor: TensorId) -> Option<BufferId> {
        self.by_tensor.get(&tensor).copied()
    }

    pub fn chunk(&self, id: BufferId) -> Option<&Chunk> {
        self.chunks.get(id)
    }

    /// Pops the oldest free buffer of `size` and marks it occupied.
    pub fn acquire(&mut self, size: u64, tensor: TensorId) -> Result<BufferId, PoolError> {
        let tier = self.tier;
        let list = self
            .free_lists
            .get_mut(&size)
            .ok_or(PoolError::UnknownSizeClass { tier, size })?;
        let id = list.pop_front().ok_or(PoolError::NoFreeBuffer { tier, size })?;
        let chunk = &mut self.chunks[id];
        chunk.state = ChunkState::Occupied;
        chunk.occupant = Some(tensor);
        self.by_tensor.insert(tensor, id);
        Ok(id)
    }

    pub fn release(&mut self, id: BufferId) -> Result<(), PoolError> {
        let tier = self.tier;
        let chunk = self
            .chunks
            .get_mut(id)
            .ok_or(PoolError::UnknownBuffer { tier, buffer: id })?;
        if chunk.state == ChunkState::Free {
            return Err(PoolError::DoubleRelease { tier, buffer: id });
        }
        if let Some(t) = chunk.occupant.take() {
            self.by_tensor.remove(&t);
        }
        chunk.state = ChunkState::Free;
        chunk.gpu_designated = false;
        self.free_lists.entry(chunk.size).or_default().push_back(id);
        Ok(())
    }

    /// Flags a CPU chunk as holding a tensor whose final location is GPU.
    pub fn mark_designated(&mut self, id: BufferId) {
        debug_assert_eq!(self.tier, Location::Cpu);
        if self.tier == Location::Cpu {
            if let Some(c) = self.chunks.get_mut(id) {
                if c.state == ChunkState::Occupied {
                    c.gpu_designated = true;
                }
            }
        }
    }

    /// Occupied chunks of `size`, optionally restricted to GPU-designated ones.
    pub fn occupants(&self, size: u64, designated_only: bool) -> impl Iterator<Item = &Chunk> {
        self.chunks.iter().filter(move |c| {
            c.size == size && c.state == ChunkState::Occupied && (!designated_only || c.gpu_designated)
        })
    }

    /// Eviction candidate of `size`: the lowest-offset GPU-designated occupant
    /// when `prefer_gpu_designated`, otherwise the lowest-offset occupant.
    pub fn find_victim(&self, size: u64, prefer_gpu_designated: bool) -> Option<(BufferId, TensorId)> {
        self.occupants(size, prefer_gpu_designated)
            .min_by_key(|c| c.offset)
            .and_then(|c| c.occupant.map(|t| (c.id, t)))
    }

    /// Verifies layout and free-list invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut extents: Vec<(u64, u64)> = self.chunks.iter().map(|c| (c.offset, c.offset + c.size)).collect();
        extents.sort_unstable();
        for w in extents.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(format!("overlapping chunks {:?} and {:?}", w[0], w[1]));
            }
        }
        if extents.last().is_some_and(|e| e.1 > self.region_bytes) {
            return Err("chunk beyond region".into());
        }
        let mut listed = vec![0u32; self.chunks.len()];
        for (size, list) in &self.free_lists {
            for &id in list {
                let c = self.chunks.get(id).ok_or_else(|| format!("free list holds unknown {id}"))?;
                if c.size != *size {
                    return Err(format!("buffer {id} listed under size {size}"));
                }
                listed[id] += 1;
            }
        }
        for c in &self.chunks {
            let free = c.state == ChunkState::Free;
            if listed[c.id] != free as u32 {
                return Err(format!("buffer {} free={} but listed {} times", c.id, free, listed[c.id]));
            }
            if free && (c.occupant.is_some() || c.gpu_designated) {
                return Err(format!("free buffer {} keeps occupant state", c.id));
            }
            if c.gpu_designated && self.tier != Location::Cpu {
                return Err(format!("{} buffer {} is GPU-designated", self.tier, c.id));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "id,offset,size,state,occupant,designated")?;
        for c in &self.chunks {
            let state = match c.state {
                ChunkState::Free => "free",
                ChunkState::Occupied => "occupied",
            };
            let occ = c.occupant.map(|t| t.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{},{}", c.id, c.offset, c.size, state, occ, c.gpu_designated)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzer::size_distribution;

    #[test]
    fn buffer_counter_worked_example() {
        let tc = TensorCensus::from_pairs([(512, 4), (1024, 4)]);
        let tsd = size_distribution(&tc).unwrap();
        assert_eq!(tsd.exact(512), Some(Ratio::new(1, 3)));
        let plan = plan_buffers(&tc, &tsd, 4096, 4096);
        assert_eq!(plan.gpu_counts, BTreeMap::from([(512, 2), (1024, 2)]));
        assert_eq!(plan.cpu_counts, BTreeMap::from([(512, 2), (1024, 2)]));
        assert!(plan.gpu_bytes() <= 4096);
    }

    #[test]
    fn zero_and_huge_capacity() {
        let tc = TensorCensus::from_pairs([(512, 4), (1024, 4)]);
        let tsd = size_distribution(&tc).unwrap();
        let plan = plan_buffers(&tc, &tsd, 0, 1 << 40);
        assert!(plan.gpu_counts.values().all(|&c| c == 0));
        assert_eq!(plan.cpu_counts, BTreeMap::from([(512, 4), (1024, 4)]));
        let plan = plan_buffers(&tc, &tsd, 1 << 40, 1 << 40);
        assert_eq!(plan.gpu_counts, BTreeMap::from([(512, 4), (1024, 4)]));
        assert!(plan.cpu_counts.values().all(|&c| c == 0));
    }

    #[test]
    fn contiguous_layout() {
        let pool = build_pool(Location::Gpu, &BTreeMap::from([(512, 2), (1024, 1)]));
        let offs: Vec<_> = pool.chunks.iter().map(|c| (c.offset, c.size)).collect();
        assert_eq!(offs, vec![(0, 512), (512, 512), (1024, 1024)]);
        assert_eq!(pool.region_bytes, 2048);
        assert_eq!(pool.free_lists[&512], VecDeque::from([0, 1]));
        let empty = build_pool(Location::Cpu, &BTreeMap::new());
        assert_eq!(empty.region_bytes, 0);
        assert!(empty.chunks.is_empty());
    }

    #[test]
    fn buffer0_comes_out_first() {
        let mut pool = build_pool(Location::Cpu, &BTreeMap::from([(512, 3), (2048, 2)]));
        assert_eq!(pool.acquire(512, 7), Ok(0));
        assert_eq!(pool.chunks[0].offset, 0);
    }

    #[test]
    fn acquire_release_fifo() {
        let mut pool = build_pool(Location::Gpu, &BTreeMap::from([(512, 1)]));
        assert_eq!(pool.acquire(512, 1), Ok(0));
        assert_eq!(
            pool.acquire(512, 2),
            Err(PoolError::NoFreeBuffer { tier: Location::Gpu, size: 512 })
        );
        assert!(matches!(pool.acquire(64, 2), Err(PoolError::UnknownSizeClass { .. })));
        pool.release(0).unwrap();
        assert_eq!(pool.free_count(512), 1);
        assert_eq!(pool.release(0), Err(PoolError::DoubleRelease { tier: Location::Gpu, buffer: 0 }));

        let mut pool = build_pool(Location::Gpu, &BTreeMap::from([(512, 3)]));
        for t in 0..3 {
            pool.acquire(512, t).unwrap();
        }
        pool.release(1).unwrap();
        pool.release(0).unwrap();
        assert_eq!(pool.acquire(512, 9), Ok(1));
        assert_eq!(pool.acquire(512, 10), Ok(0));
    }

    #[test]
    fn victims() {
        let mut pool = build_pool(Location::Cpu, &BTreeMap::from([(512, 3)]));
        assert_eq!(pool.find_victim(512, false), None);
        pool.acquire(512, 1).unwrap();
        pool.acquire(512, 2).unwrap();
        assert_eq!(pool.find_victim(512, true), None);
        assert_eq!(pool.find_victim(512, false), Some((0, 1)));
        pool.mark_designated(1);
        assert_eq!(pool.find_victim(512, true), Some((1, 2)));
        pool.release(1).unwrap();
        assert!(!pool.chunks[1].gpu_designated);
        pool.check_invariants().unwrap();
    }
}
