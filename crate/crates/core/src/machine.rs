//! Hardware model: tier capacities, link bandwidths and the transfer-time
//! function. Bandwidths are decimal GB/s (10^9 bytes per second).

use std::fmt;
use std::path::Path;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Tier of the modeled memory hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Location {
    Gpu,
    Cpu,
    Nvme,
}

impl Location {
    pub fn as_str(self) -> &'static str {
        match self {
            Location::Gpu => "gpu",
            Location::Cpu => "cpu",
            Location::Nvme => "nvme",
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryClass {
    Pinned,
    Pageable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub src: Location,
    pub dst: Location,
    pub gbps: f64,
}

impl LinkSpec {
    pub fn new(src: Location, dst: Location, gbps: f64) -> Self {
        LinkSpec { src, dst, gbps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub gpu_capacity_bytes: u64,
    pub cpu_capacity_bytes: u64,
    pub links: Vec<LinkSpec>,
    pub cpu_memory_class: MemoryClass,
    pub pinned_overrides: Vec<LinkSpec>,
}

/// Microseconds as an exact rational.
pub type Micros = Ratio<u128>;

pub const GB: u64 = 1_000_000_000;

/// The four directed links every machine must describe.
pub const REQUIRED_LINKS: [(Location, Location); 4] = [
    (Location::Cpu, Location::Gpu),
    (Location::Gpu, Location::Cpu),
    (Location::Cpu, Location::Nvme),
    (Location::Nvme, Location::Cpu),
];

/// Measured link bandwidths of the reference testbed (L40S, 256 GB host,
/// PCIe 4.0 NVMe). Host-device links default to the pageable figures; the
/// pinned figures are overrides.
pub fn default_machine() -> MachineConfig {
    MachineConfig {
        gpu_capacity_bytes: 48 * GB,
        cpu_capacity_bytes: 256 * GB,
        links: vec![
            LinkSpec::new(Location::Cpu, Location::Gpu, 10.36),
            LinkSpec::new(Location::Gpu, Location::Cpu, 9.51),
            LinkSpec::new(Location::Cpu, Location::Nvme, 0.73),
            LinkSpec::new(Location::Nvme, Location::Cpu, 2.36),
        ],
        cpu_memory_class: MemoryClass::Pageable,
        pinned_overrides: vec![
            LinkSpec::new(Location::Cpu, Location::Gpu, 24.74),
            LinkSpec::new(Location::Gpu, Location::Cpu, 25.91),
        ],
    }
}

/// Exact rational value of a decimal bandwidth such as `24.74`.
pub fn decimal_ratio(x: f64) -> Result<Ratio<u128>> {
    if !x.is_finite() || x <= 0.0 {
        return Err(SimError::Config(format!("bandwidth {x} must be positive")));
    }
    // f64 Display never uses exponent notation and prints the shortest
    // representation that round-trips, so `24.74` stays `24.74`.
    let text = format!("{x}");
    let (int_part, frac_part) = text.split_once('.').unwrap_or((&text, ""));
    let digits = format!("{int_part}{frac_part}");
    let num: u128 = digits
        .parse()
        .map_err(|_| SimError::Config(format!("cannot represent bandwidth {x}")))?;
    let den = 10u128
        .checked_pow(frac_part.len() as u32)
        .ok_or_else(|| SimError::Config(format!("bandwidth {x} has too many digits")))?;
    Ok(Ratio::new(num, den))
}

impl MachineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gpu_capacity_bytes == 0 || self.cpu_capacity_bytes == 0 {
            return Err(SimError::Config("gpu_capacity_bytes and cpu_capacity_bytes must be positive".into()));
        }
        for (src, dst) in REQUIRED_LINKS {
            if self.find(&self.links, src, dst).is_none() {
                return Err(SimError::Config(format!("links: missing {src}->{dst}")));
            }
        }
        for l in self.links.iter().chain(&self.pinned_overrides) {
            if l.src == l.dst {
                return Err(SimError::Config(format!("links: {}->{} is a self loop", l.src, l.dst)));
            }
            decimal_ratio(l.gbps)
                .map_err(|e| SimError::Config(format!("links: {}->{}: {e}", l.src, l.dst)))?;
        }
        Ok(())
    }

    fn find<'a>(&self, list: &'a [LinkSpec], src: Location, dst: Location) -> Option<&'a LinkSpec> {
        list.iter().find(|l| l.src == src && l.dst == dst)
    }

    /// Effective bandwidth of a direct link in GB/s.
    pub fn effective_gbps(&self, src: Location, dst: Location) -> Result<f64> {
        let touches_cpu = src == Location::Cpu || dst == Location::Cpu;
        if self.cpu_memory_class == MemoryClass::Pinned && touches_cpu {
            if let Some(l) = self.find(&self.pinned_overrides, src, dst) {
                return Ok(l.gbps);
            }
        }
        self.find(&self.links, src, dst)
            .map(|l| l.gbps)
            .ok_or_else(|| SimError::UnknownLink(format!("{src}->{dst}")))
    }

    fn direct_time(&self, src: Location, dst: Location, size_bytes: u64) -> Result<Micros> {
        let gbps = decimal_ratio(self.effective_gbps(src, dst)?)?;
        // 1 GB/s moves 1000 bytes per microsecond.
        Ok(Ratio::from_integer(size_bytes as u128) / (gbps * Ratio::from_integer(1000)))
    }

    /// Time to move `size_bytes` from `src` to `dst`. GPU<->NVMe moves are
    /// staged through CPU memory and cost the sum of both legs.
    pub fn transfer_time(&self, src: Location, dst: Location, size_bytes: u64) -> Result<Micros> {
        match (src, dst) {
            (Location::Nvme, Location::Gpu) | (Location::Gpu, Location::Nvme) => {
                Ok(self.direct_time(src, Location::Cpu, size_bytes)?
                    + self.direct_time(Location::Cpu, dst, size_bytes)?)
            }
            _ if src == dst => Err(SimError::UnknownLink(format!("{src}->{dst}"))),
            _ => self.direct_time(src, dst, size_bytes),
        }
    }

    /// Direct-link transfer time rounded up to whole nanoseconds.
    pub fn transfer_ns(&self, src: Location, dst: Location, size_bytes: u64) -> Result<u64> {
        let us = self.direct_time(src, dst, size_bytes)?;
        let ns = (us * Ratio::from_integer(1000)).ceil().to_integer();
        Ok(ns as u64)
    }

    pub fn capacity(&self, tier: Location) -> Option<u64> {
        match tier {
            Location::Gpu => Some(self.gpu_capacity_bytes),
            Location::Cpu => Some(self.cpu_capacity_bytes),
            Location::Nvme => None,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MachineFile {
    gpu_capacity_bytes: Option<u64>,
    cpu_capacity_bytes: Option<u64>,
    links: Option<Vec<LinkSpec>>,
    cpu_memory_class: Option<MemoryClass>,
    pinned_overrides: Option<Vec<LinkSpec>>,
}

fn merge_links(base: &mut Vec<LinkSpec>, overrides: Vec<LinkSpec>) {
    for l in overrides {
        match base.iter_mut().find(|b| b.src == l.src && b.dst == l.dst) {
            Some(b) => b.gbps = l.gbps,
            None => base.push(l),
        }
    }
}

/// Parses a machine JSON document; absent keys keep their default values and
/// listed links replace the default for the same direction.
pub fn parse_machine(text: &str) -> Result<MachineConfig> {
    let file: MachineFile =
        serde_json::from_str(text).map_err(|e| SimError::Config(format!("machine config: {e}")))?;
    let mut cfg = default_machine();
    if let Some(v) = file.gpu_capacity_bytes {
        cfg.gpu_capacity_bytes = v;
    }
    if let Some(v) = file.cpu_capacity_bytes {
        cfg.cpu_capacity_bytes = v;
    }
    if let Some(v) = file.cpu_memory_class {
        cfg.cpu_memory_class = v;
    }
    if let Some(links) = file.links {
        merge_links(&mut cfg.links, links);
    }
    if let Some(links) = file.pinned_overrides {
        merge_links(&mut cfg.pinned_overrides, links);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_machine(path: &Path) -> Result<MachineConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
    parse_machine(&text)
}
