//! Link timing: one transfer at a time per directed link, FIFO in issue
//! order.

use std::collections::HashMap;

use crate::error::{Result, SimError};
use crate::machine::{Location, MachineConfig};
use crate::scheduler::{BufferRef, TransferRequest};
use crate::trace::TensorId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Leg {
    pub src: Location,
    pub dst: Location,
    pub start: u64,
    pub end: u64,
}

/// Direct legs of a request: staged GPU<->NVMe moves pass through CPU.
pub(crate) fn route(req: &TransferRequest) -> Result<Vec<(Location, Location)>> {
    if req.src == req.dst {
        return Err(SimError::Invariant(format!(
            "transfer of tensor {} from {} to itself",
            req.tensor_id, req.src
        )));
    }
    Ok(if req.via_cpu_staging {
        vec![(req.src, Location::Cpu), (Location::Cpu, req.dst)]
    } else {
        vec![(req.src, req.dst)]
    })
}

/// Buffers a request reads from or writes into.
pub(crate) fn buffers(req: &TransferRequest) -> impl Iterator<Item = BufferRef> {
    req.src_buffer.into_iter().chain(req.dst_buffer)
}

pub(crate) struct Fabric<'m> {
    machine: &'m MachineConfig,
    link_free: HashMap<(Location, Location), u64>,
    tensor_last: HashMap<TensorId, u64>,
    tensor_route: HashMap<TensorId, (Location, Location)>,
    buffer_last: HashMap<BufferRef, u64>,
}

impl<'m> Fabric<'m> {
    pub fn new(machine: &'m MachineConfig) -> Self {
        Fabric {
            machine,
            link_free: HashMap::new(),
            tensor_last: HashMap::new(),
            tensor_route: HashMap::new(),
            buffer_last: HashMap::new(),
        }
    }

    /// Time at which the tensor's latest transfer completes.
    pub fn ready(&self, t: TensorId) -> u64 {
        self.tensor_last.get(&t).copied().unwrap_or(0)
    }

    pub fn last_route(&self, t: TensorId) -> Option<(Location, Location)> {
        self.tensor_route.get(&t).copied()
    }

    pub fn issue(&mut self, req: &TransferRequest, now: u64) -> Result<Vec<Leg>> {
        let mut t = now.max(self.ready(req.tensor_id));
        for b in buffers(req) {
            t = t.max(self.buffer_last.get(&b).copied().unwrap_or(0));
        }
        let mut legs = Vec::new();
        for (src, dst) in route(req)? {
            let free = self.link_free.entry((src, dst)).or_insert(0);
            let start = t.max(*free);
            let end = start + self.machine.transfer_ns(src, dst, req.size_bytes)?;
            *free = end;
            t = end;
            legs.push(Leg { src, dst, start, end });
        }
        self.tensor_last.insert(req.tensor_id, t);
        self.tensor_route.insert(req.tensor_id, (req.src, req.dst));
        for b in buffers(req) {
            self.buffer_last.insert(b, t);
        }
        Ok(legs)
    }
}
