//! Dry-run analysis of a trace: the prefetch table and the tensor size
//! distribution used to size buffer pools.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use num_rational::Ratio;
use serde::Serialize;

use crate::error::{Result, SimError};
use crate::machine::Location;
use crate::trace::{ExecutionTrace, Phase, TensorId};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrefetchRow {
    pub order: usize,
    pub tensor_id: TensorId,
    pub activation_us: f64,
    pub current_loc: Location,
    pub final_loc: Location,
    /// Position of the accessing step within the iteration.
    #[serde(skip)]
    pub step: usize,
}

/// Parameter accesses of one iteration in execution order, plus the
/// prefetch cursor.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefetchTable {
    pub rows: Vec<PrefetchRow>,
    pub cursor: usize,
    uses: HashMap<TensorId, Vec<usize>>,
}

impl PrefetchTable {
    pub fn from_rows(rows: Vec<PrefetchRow>) -> Self {
        let mut uses: HashMap<TensorId, Vec<usize>> = HashMap::new();
        for r in &rows {
            uses.entry(r.tensor_id).or_default().push(r.order);
        }
        PrefetchTable { rows, cursor: 0, uses }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// First row strictly after `row` that accesses `tensor`.
    pub fn next_use_after(&self, tensor: TensorId, row: Option<usize>) -> Option<usize> {
        let uses = self.uses.get(&tensor)?;
        match row {
            None => uses.first().copied(),
            Some(r) => {
                let i = uses.partition_point(|&u| u <= r);
                uses.get(i).copied()
            }
        }
    }

    /// Tensors in order of first access.
    pub fn first_access_order(&self) -> Vec<TensorId> {
        let mut seen = std::collections::HashSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.tensor_id))
            .map(|r| r.tensor_id)
            .collect()
    }

    /// Rows of the step at position `step`.
    pub fn rows_of_step(&self, step: usize) -> std::ops::Range<usize> {
        let start = self.rows.partition_point(|r| r.step < step);
        let end = self.rows.partition_point(|r| r.step <= step);
        start..end
    }

    pub fn set_location(&mut self, tensor: TensorId, current: Location, final_loc: Location) {
        if let Some(uses) = self.uses.get(&tensor) {
            for &r in uses {
                self.rows[r].current_loc = current;
                self.rows[r].final_loc = final_loc;
            }
        }
    }

    pub fn set_current(&mut self, tensor: TensorId, current: Location) {
        if let Some(uses) = self.uses.get(&tensor) {
            for &r in uses {
                self.rows[r].current_loc = current;
            }
        }
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "order,tensor_id,activation_us,current_loc,final_loc")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.order, r.tensor_id, r.activation_us, r.current_loc, r.final_loc
            )?;
        }
        Ok(())
    }
}

/// Count of distinct tensors per size in bytes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TensorCensus {
    pub entries: BTreeMap<u64, u64>,
}

impl TensorCensus {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u64, u64)>) -> Self {
        let mut entries = BTreeMap::new();
        for (s, c) in pairs {
            if c > 0 {
                *entries.entry(s).or_insert(0) += c;
            }
        }
        TensorCensus { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, size: u64) -> u64 {
        self.entries.get(&size).copied().unwrap_or(0)
    }

    pub fn total_bytes(&self) -> u128 {
        self.entries.iter().map(|(s, c)| *s as u128 * *c as u128).sum()
    }
}

/// Share of total bytes held by each size class.
#[derive(Clone, Debug, PartialEq)]
pub struct SizeDistribution {
    exact: BTreeMap<u64, Ratio<u128>>,
    pub total_size: u128,
}

impl SizeDistribution {
    pub fn exact(&self, size: u64) -> Option<Ratio<u128>> {
        self.exact.get(&size).copied()
    }

    pub fn ratio(&self, size: u64) -> f64 {
        self.exact(size).map(ratio_to_f64).unwrap_or(0.0)
    }

    pub fn ratios(&self) -> BTreeMap<u64, f64> {
        self.exact.iter().map(|(s, r)| (*s, ratio_to_f64(*r))).collect()
    }

    pub fn exact_ratios(&self) -> &BTreeMap<u64, Ratio<u128>> {
        &self.exact
    }
}

pub(crate) fn ratio_to_f64(r: Ratio<u128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Ratio of each size class's bytes (`size * count`) to the census total.
pub fn size_distribution(tc: &TensorCensus) -> Result<SizeDistribution> {
    if tc.is_empty() {
        return Err(SimError::Config("size distribution of an empty census".into()));
    }
    let mut bytes = BTreeMap::new();
    let mut total_size: u128 = 0;
    for (&s, &c) in &tc.entries {
        let sc = s as u128 * c as u128;
        total_size += sc;
        bytes.insert(s, sc);
    }
    let exact = bytes
        .into_iter()
        .map(|(s, sc)| (s, Ratio::new(sc, total_size)))
        .collect();
    Ok(SizeDistribution { exact, total_size })
}

/// One row per parameter access in the forward and backward passes. Rows
/// carry the cumulative compute time at the start of the accessing step; all
/// locations start as CPU until placement assigns them.
pub fn build_prefetch_table(trace: &ExecutionTrace) -> PrefetchTable {
    let mut rows = Vec::new();
    let mut elapsed = 0.0f64;
    let accesses = trace.param_accesses();
    let mut next = accesses.iter().peekable();
    for (pos, step) in trace.steps.iter().enumerate() {
        while let Some(&&(p, id)) = next.peek() {
            if p != pos {
                break;
            }
            rows.push(PrefetchRow {
                order: rows.len(),
                tensor_id: id,
                activation_us: elapsed,
                current_loc: Location::Cpu,
                final_loc: Location::Cpu,
                step: pos,
            });
            next.next();
        }
        elapsed += step.compute_us;
    }
    PrefetchTable::from_rows(rows)
}

/// Simulated cost of the profiling dry run: one pass over the forward and
/// backward steps.
pub fn profile_overhead(trace: &ExecutionTrace) -> f64 {
    trace
        .steps
        .iter()
        .filter(|s| s.phase != Phase::OptimizerUpdate)
        .map(|s| s.compute_us)
        .sum()
}

/// Dry-run cost as a fraction of the whole traced run's compute time.
pub fn profile_overhead_fraction(trace: &ExecutionTrace) -> f64 {
    let total = trace.iteration_compute_us() * trace.iterations as f64;
    if total == 0.0 {
        0.0
    } else {
        profile_overhead(trace) / total
    }
}
