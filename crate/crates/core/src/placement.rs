//! Pre-training tensor placement across GPU, CPU and NVMe.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use crate::analyzer::PrefetchTable;
use crate::bufpool::BufferPlan;
use crate::machine::Location;
use crate::trace::{TensorDescriptor, TensorId};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlacementState {
    pub location_of: BTreeMap<TensorId, Location>,
    pub final_of: BTreeMap<TensorId, Location>,
    /// Tensors with a persistent replica on NVMe.
    pub nvme_copy: BTreeSet<TensorId>,
    /// GPU-resident parameters, in the order they entered GPU memory.
    pub active_window: Vec<TensorId>,
    pub gpu_param_count_nvme: usize,
}

impl PlacementState {
    pub fn location(&self, t: TensorId) -> Option<Location> {
        self.location_of.get(&t).copied()
    }

    pub fn final_location(&self, t: TensorId) -> Option<Location> {
        self.final_of.get(&t).copied()
    }

    pub fn in_window(&self, t: TensorId) -> bool {
        self.active_window.contains(&t)
    }

    pub fn window_insert(&mut self, t: TensorId) {
        if !self.in_window(t) {
            self.active_window.push(t);
        }
    }

    pub fn window_remove(&mut self, t: TensorId) {
        self.active_window.retain(|&x| x != t);
    }

    pub fn count_at(&self, loc: Location) -> usize {
        self.location_of.values().filter(|&&l| l == loc).count()
    }

    pub fn write_csv(&self, size_of: impl Fn(TensorId) -> u64, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "tensor_id,size,final_loc")?;
        for (t, loc) in &self.final_of {
            writeln!(out, "{},{},{}", t, size_of(*t), loc)?;
        }
        Ok(())
    }
}

/// Assigns parameters to tiers in order of first access: GPU while a GPU
/// buffer of the tensor's size class remains in the plan, then CPU, then
/// NVMe. Chosen locations are written back into the table.
pub fn place_parameters(
    table: &mut PrefetchTable,
    plan: &BufferPlan,
    size_of: impl Fn(TensorId) -> u64,
) -> PlacementState {
    let mut gpu_left = plan.gpu_counts.clone();
    let mut cpu_left = plan.cpu_counts.clone();
    let mut state = PlacementState::default();
    for t in table.first_access_order() {
        let size = size_of(t);
        let take = |left: &mut BTreeMap<u64, u64>| match left.get_mut(&size) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        };
        let loc = if take(&mut gpu_left) {
            Location::Gpu
        } else if take(&mut cpu_left) {
            Location::Cpu
        } else {
            Location::Nvme
        };
        match loc {
            Location::Gpu => state.active_window.push(t),
            Location::Nvme => {
                state.nvme_copy.insert(t);
                state.gpu_param_count_nvme += 1;
            }
            Location::Cpu => {}
        }
        state.location_of.insert(t, loc);
        state.final_of.insert(t, loc);
        table.set_location(t, loc, loc);
    }
    state
}

/// Keeps optimizer states in CPU memory in update order until the next one
/// no longer fits the budget; the rest live on NVMe.
pub fn place_optimizer_states(states: &[TensorDescriptor], cpu_budget_bytes: u64) -> PlacementState {
    let mut state = PlacementState::default();
    let mut left = cpu_budget_bytes;
    let mut spilled = false;
    for s in states {
        let loc = if !spilled && s.size_bytes <= left {
            left -= s.size_bytes;
            Location::Cpu
        } else {
            spilled = true;
            Location::Nvme
        };
        if loc == Location::Nvme {
            state.nvme_copy.insert(s.id);
        }
        state.location_of.insert(s.id, loc);
        state.final_of.insert(s.id, loc);
    }
    state
}
