//! Simulation report and the metric accumulator shared by both simulators.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::machine::Location;
use crate::scheduler::{ActionKind, LogEntry};
use crate::trace::TensorId;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventRecord {
    pub us: f64,
    pub kind: ActionKind,
    pub tensor: TensorId,
    pub src: Location,
    pub dst: Location,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WaitBucket {
    pub threshold_us: f64,
    /// Share of parameter accesses whose wait is strictly below the
    /// threshold, in percent.
    pub percent: f64,
}

/// Metrics of one run. Times are simulated compute plus stall time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimReport {
    pub policy: String,
    pub total_time_us: f64,
    pub iteration_times_us: Vec<f64>,
    pub compute_us: f64,
    pub stall_us: f64,
    pub param_accesses: u64,
    pub param_hits: u64,
    pub hit_rate: f64,
    pub param_wait_us: Vec<f64>,
    pub pct_wait_below: Vec<WaitBucket>,
    pub optimizer_accesses: u64,
    pub optimizer_misses: u64,
    pub optimizer_miss_rate: f64,
    pub gpu_utilization_timeavg: f64,
    pub cpu_utilization_timeavg: f64,
    pub fp16_in_nvme_count: usize,
    /// Bytes moved per directed link, keyed `src->dst`.
    pub transfer_bytes: BTreeMap<String, u64>,
    pub transfer_count: u64,
    #[serde(skip)]
    pub events: Vec<EventRecord>,
}

impl SimReport {
    pub fn pct_below(&self, threshold_us: f64) -> Option<f64> {
        self.pct_wait_below
            .iter()
            .find(|b| b.threshold_us == threshold_us)
            .map(|b| b.percent)
    }

    pub fn bytes_on(&self, src: Location, dst: Location) -> u64 {
        self.transfer_bytes.get(&link_key(src, dst)).copied().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_header() -> &'static str {
        "policy,total_time_us,hit_rate,optimizer_miss_rate,gpu_utilization,cpu_utilization,fp16_in_nvme,transfer_count"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.policy,
            self.total_time_us,
            self.hit_rate,
            self.optimizer_miss_rate,
            self.gpu_utilization_timeavg,
            self.cpu_utilization_timeavg,
            self.fp16_in_nvme_count,
            self.transfer_count
        )
    }

    pub fn write_event_log(&self, mut out: impl Write) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub(crate) fn link_key(src: Location, dst: Location) -> String {
    format!("{src}->{dst}")
}

pub(crate) fn ns_to_us(ns: u64) -> f64 {
    ns as f64 / 1000.0
}

pub(crate) fn compute_ns(us: f64) -> u64 {
    (us * 1000.0).round() as u64
}

/// Counters filled in by a simulation loop.
#[derive(Debug, Default)]
pub(crate) struct Metrics {
    pub waits_ns: Vec<u64>,
    pub hits: u64,
    pub opt_accesses: u64,
    pub opt_misses: u64,
    pub compute_ns: u64,
    pub bytes: BTreeMap<(Location, Location), u64>,
    pub transfers: u64,
    pub iteration_ends: Vec<u64>,
    pub events: Vec<EventRecord>,
    pub record_events: bool,
}

impl Metrics {
    pub fn new(record_events: bool) -> Self {
        Metrics {
            record_events,
            ..Default::default()
        }
    }

    pub fn param_access(&mut self, wait_ns: u64, fetched: bool) {
        self.waits_ns.push(wait_ns);
        if wait_ns == 0 && !fetched {
            self.hits += 1;
        }
    }

    pub fn optimizer_access(&mut self, fetched: bool) {
        self.opt_accesses += 1;
        if fetched {
            self.opt_misses += 1;
        }
    }

    pub fn leg(&mut self, src: Location, dst: Location, size: u64) {
        *self.bytes.entry((src, dst)).or_insert(0) += size;
    }

    pub fn log(&mut self, now_ns: u64, entries: Vec<LogEntry>) {
        if self.record_events {
            self.events.extend(entries.into_iter().map(|e| EventRecord {
                us: ns_to_us(now_ns),
                kind: e.kind,
                tensor: e.tensor,
                src: e.src,
                dst: e.dst,
            }));
        }
    }

    pub fn finish(
        self,
        policy: String,
        total_ns: u64,
        thresholds_us: &[f64],
        areas: (u128, u128),
        capacities: (u64, u64),
        fp16_in_nvme_count: usize,
    ) -> SimReport {
        let n = self.waits_ns.len() as u64;
        let pct_wait_below = thresholds_us
            .iter()
            .map(|&th| {
                let below = self.waits_ns.iter().filter(|&&w| (w as f64) < th * 1000.0).count() as u64;
                WaitBucket {
                    threshold_us: th,
                    percent: if n == 0 { 0.0 } else { 100.0 * below as f64 / n as f64 },
                }
            })
            .collect();
        let mut prev = 0;
        let iteration_times_us = self
            .iteration_ends
            .iter()
            .map(|&e| {
                let d = e - prev;
                prev = e;
                ns_to_us(d)
            })
            .collect();
        let util = |area: u128, cap: u64| {
            let den = cap as u128 * total_ns as u128;
            if den == 0 {
                0.0
            } else {
                area as f64 / den as f64
            }
        };
        SimReport {
            policy,
            total_time_us: ns_to_us(total_ns),
            iteration_times_us,
            compute_us: ns_to_us(self.compute_ns),
            stall_us: ns_to_us(total_ns - self.compute_ns.min(total_ns)),
            param_accesses: n,
            param_hits: self.hits,
            hit_rate: if n == 0 { 0.0 } else { self.hits as f64 / n as f64 },
            param_wait_us: self.waits_ns.iter().map(|&w| ns_to_us(w)).collect(),
            pct_wait_below,
            optimizer_accesses: self.opt_accesses,
            optimizer_misses: self.opt_misses,
            optimizer_miss_rate: if self.opt_accesses == 0 {
                0.0
            } else {
                self.opt_misses as f64 / self.opt_accesses as f64
            },
            gpu_utilization_timeavg: util(areas.0, capacities.0),
            cpu_utilization_timeavg: util(areas.1, capacities.1),
            fp16_in_nvme_count,
            transfer_bytes: self.bytes.iter().map(|(&(s, d), &b)| (link_key(s, d), b)).collect(),
            transfer_count: self.transfers,
            events: self.events,
        }
    }
}
