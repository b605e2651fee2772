//! Execution-trace data model, the line-delimited JSON trace format, and a
//! generator for transformer-like traces.
//!
//! A trace lists the steps of one training iteration; `iterations` says how
//! many times the simulator replays it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analyzer::TensorCensus;
use crate::error::TraceError;

pub type TensorId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TensorKind {
    #[serde(rename = "p16")]
    ParamFp16,
    #[serde(rename = "o32")]
    OptStateFp32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "f")]
    Forward,
    #[serde(rename = "b")]
    Backward,
    #[serde(rename = "o")]
    OptimizerUpdate,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Forward => "forward",
            Phase::Backward => "backward",
            Phase::OptimizerUpdate => "optimizer",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorDescriptor {
    pub id: TensorId,
    #[serde(rename = "size")]
    pub size_bytes: u64,
    pub kind: TensorKind,
    pub layer: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceStep {
    #[serde(rename = "i")]
    pub step_index: u32,
    pub phase: Phase,
    #[serde(rename = "ids")]
    pub tensor_ids: Vec<TensorId>,
    #[serde(rename = "us")]
    pub compute_us: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionTrace {
    pub tensors: Vec<TensorDescriptor>,
    pub steps: Vec<TraceStep>,
    pub iterations: u32,
}

impl ExecutionTrace {
    pub fn tensor(&self, id: TensorId) -> Option<&TensorDescriptor> {
        self.tensors.iter().find(|t| t.id == id)
    }

    pub fn tensors_of(&self, kind: TensorKind) -> impl Iterator<Item = &TensorDescriptor> {
        self.tensors.iter().filter(move |t| t.kind == kind)
    }

    pub fn total_bytes(&self, kind: TensorKind) -> u64 {
        self.tensors_of(kind).map(|t| t.size_bytes).sum()
    }

    /// Sum of compute time over one iteration's steps.
    pub fn iteration_compute_us(&self) -> f64 {
        self.steps.iter().map(|s| s.compute_us).sum()
    }

    /// Parameter accesses of the forward and backward passes, in execution order.
    pub fn param_accesses(&self) -> Vec<(usize, TensorId)> {
        let kinds: HashMap<TensorId, TensorKind> =
            self.tensors.iter().map(|t| (t.id, t.kind)).collect();
        let mut out = Vec::new();
        for (pos, step) in self.steps.iter().enumerate() {
            if step.phase == Phase::OptimizerUpdate {
                continue;
            }
            for id in &step.tensor_ids {
                if kinds.get(id) == Some(&TensorKind::ParamFp16) {
                    out.push((pos, *id));
                }
            }
        }
        out
    }

    /// Checks every trace invariant and stops at the first violation.
    pub fn validate(&self) -> Result<(), TraceError> {
        match self.violations().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// All invariant violations, in discovery order.
    pub fn violations(&self) -> Vec<TraceError> {
        let mut errs = Vec::new();
        if self.iterations == 0 {
            errs.push(TraceError::Invalid("iterations must be positive".into()));
        }
        let mut kinds: HashMap<TensorId, &TensorDescriptor> = HashMap::new();
        for t in &self.tensors {
            if kinds.insert(t.id, t).is_some() {
                errs.push(TraceError::DuplicateId { id: t.id });
            }
            if t.size_bytes == 0 {
                errs.push(TraceError::ZeroSize { id: t.id });
            }
        }

        let mut last_phase = Phase::Forward;
        let mut opt_seen: HashSet<TensorId> = HashSet::new();
        let mut paired_params: HashSet<TensorId> = HashSet::new();
        for (pos, step) in self.steps.iter().enumerate() {
            if step.step_index as usize != pos {
                errs.push(TraceError::InvalidStep {
                    step: pos,
                    message: format!("step index {} out of sequence", step.step_index),
                });
            }
            if step.tensor_ids.is_empty() {
                errs.push(TraceError::InvalidStep {
                    step: pos,
                    message: "no tensors referenced".into(),
                });
            }
            if !step.compute_us.is_finite() || step.compute_us < 0.0 {
                errs.push(TraceError::InvalidStep {
                    step: pos,
                    message: format!("compute time {} is not a non-negative number", step.compute_us),
                });
            }
            if step.phase < last_phase {
                errs.push(TraceError::PhaseOrder {
                    step: pos,
                    message: format!("{} step after {} phase", step.phase, last_phase),
                });
            } else {
                last_phase = step.phase;
            }

            let mut opt_in_step = 0;
            for id in &step.tensor_ids {
                let Some(desc) = kinds.get(id) else {
                    errs.push(TraceError::DanglingTensor { step: pos, id: *id });
                    continue;
                };
                match (step.phase, desc.kind) {
                    (Phase::Forward | Phase::Backward, TensorKind::OptStateFp32) => {
                        errs.push(TraceError::InvalidStep {
                            step: pos,
                            message: format!("{} step references optimizer state {}", step.phase, id),
                        })
                    }
                    (Phase::OptimizerUpdate, TensorKind::OptStateFp32) => {
                        opt_in_step += 1;
                        if !opt_seen.insert(*id) {
                            errs.push(TraceError::InvalidStep {
                                step: pos,
                                message: format!("optimizer state {id} updated twice"),
                            });
                        }
                    }
                    (Phase::OptimizerUpdate, TensorKind::ParamFp16) if !paired_params.insert(*id) => {
                        errs.push(TraceError::InvalidStep {
                            step: pos,
                            message: format!("parameter {id} paired with more than one optimizer state"),
                        });
                    }
                    _ => {}
                }
            }
            if step.phase == Phase::OptimizerUpdate && opt_in_step != 1 {
                errs.push(TraceError::InvalidStep {
                    step: pos,
                    message: format!("optimizer step must update exactly one state, found {opt_in_step}"),
                });
            }
        }

        // Backward must visit layers in the reverse of forward order.
        let layer_seq = |phase: Phase| -> Vec<u32> {
            let mut seq: Vec<u32> = Vec::new();
            for step in self.steps.iter().filter(|s| s.phase == phase) {
                for id in &step.tensor_ids {
                    if let Some(d) = kinds.get(id) {
                        if d.kind == TensorKind::ParamFp16 && seq.last() != Some(&d.layer) {
                            seq.push(d.layer);
                        }
                    }
                }
            }
            seq
        };
        let fwd = layer_seq(Phase::Forward);
        let bwd = layer_seq(Phase::Backward);
        if !bwd.is_empty() {
            let mut rev = fwd.clone();
            rev.reverse();
            if rev != bwd {
                let step = self
                    .steps
                    .iter()
                    .position(|s| s.phase == Phase::Backward)
                    .unwrap_or(0);
                errs.push(TraceError::PhaseOrder {
                    step,
                    message: format!("backward layer order {bwd:?} is not the reverse of forward {fwd:?}"),
                });
            }
        }
        errs
    }
}

// ---------------------------------------------------------------------------
// Line-delimited JSON format

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    v: u32,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    iterations: u32,
}

fn one() -> u32 {
    1
}

fn is_one(n: &u32) -> bool {
    *n == 1
}

#[derive(Serialize, Deserialize)]
enum Record {
    #[serde(rename = "t")]
    Tensor(TensorDescriptor),
    #[serde(rename = "s")]
    Step(TraceStep),
}

/// Parses a trace from line-delimited JSON text and validates it.
pub fn parse_trace(text: impl BufRead) -> Result<ExecutionTrace, TraceError> {
    let trace = parse_trace_unchecked(text)?;
    trace.validate()?;
    Ok(trace)
}

/// Parses a trace without checking its invariants, so that every
/// violation can be reported with [`ExecutionTrace::violations`].
pub fn parse_trace_unchecked(text: impl BufRead) -> Result<ExecutionTrace, TraceError> {
    let mut trace = ExecutionTrace {
        tensors: Vec::new(),
        steps: Vec::new(),
        iterations: 1,
    };
    let mut saw_header = false;
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        };
        if !saw_header {
            let header: Header = serde_json::from_str(&line).map_err(parse_err)?;
            if header.v != TRACE_FORMAT_VERSION {
                return Err(TraceError::Parse {
                    line: line_no,
                    message: format!("unsupported trace version {}", header.v),
                });
            }
            trace.iterations = header.iterations;
            saw_header = true;
            continue;
        }
        match serde_json::from_str::<Record>(&line).map_err(parse_err)? {
            Record::Tensor(t) => trace.tensors.push(t),
            Record::Step(s) => trace.steps.push(s),
        }
    }
    if !saw_header {
        return Err(TraceError::Parse {
            line: 1,
            message: "missing {\"v\": 1} header".into(),
        });
    }
    Ok(trace)
}

fn open(path: &Path) -> Result<BufReader<std::fs::File>, TraceError> {
    let file = std::fs::File::open(path).map_err(|e| TraceError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(BufReader::new(file))
}

pub fn load_trace(path: &Path) -> Result<ExecutionTrace, TraceError> {
    parse_trace(open(path)?)
}

pub fn load_trace_unchecked(path: &Path) -> Result<ExecutionTrace, TraceError> {
    parse_trace_unchecked(open(path)?)
}

pub fn write_trace(trace: &ExecutionTrace, mut out: impl Write) -> std::io::Result<()> {
    let header = Header {
        v: TRACE_FORMAT_VERSION,
        iterations: trace.iterations,
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for t in &trace.tensors {
        writeln!(out, "{}", serde_json::to_string(&Record::Tensor(t.clone()))?)?;
    }
    for s in &trace.steps {
        writeln!(out, "{}", serde_json::to_string(&Record::Step(s.clone()))?)?;
    }
    Ok(())
}

pub fn save_trace(trace: &ExecutionTrace, path: &Path) -> Result<(), TraceError> {
    let io_err = |e: std::io::Error| TraceError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    write_trace(trace, &mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

// ---------------------------------------------------------------------------
// Synthetic transformer traces

/// Where parameter tensor sizes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeProfile {
    /// Every parameter has the same size.
    Fixed(u64),
    /// Tensor `k` within each layer gets `sizes[k % len]` (qkv, proj, mlp...).
    Cycle(Vec<u64>),
    /// Each tensor picks uniformly from `sizes` using the seeded generator.
    Choice(Vec<u64>),
}

impl SizeProfile {
    fn is_valid(&self) -> bool {
        match self {
            SizeProfile::Fixed(s) => *s > 0,
            SizeProfile::Cycle(v) | SizeProfile::Choice(v) => !v.is_empty() && v.iter().all(|s| *s > 0),
        }
    }
}

/// Bytes of FP32 optimizer state (master weights, momentum, variance) per
/// byte of FP16 parameter.
pub const OPT_STATE_BYTES_PER_PARAM_BYTE: u64 = 6;

/// Optimizer compute per state byte relative to forward/backward compute per
/// parameter byte. With 6x state bytes this puts the optimizer step at about
/// 15% of an iteration.
pub const OPT_COMPUTE_DIVISOR: f64 = 17.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub layers: u32,
    pub tensors_per_layer: u32,
    pub size_profile: SizeProfile,
    pub compute_us_per_byte: f64,
    pub seed: u64,
    pub iterations: u32,
}

impl SynthSpec {
    pub fn new(layers: u32, tensors_per_layer: u32, size_profile: SizeProfile) -> Self {
        SynthSpec {
            layers,
            tensors_per_layer,
            size_profile,
            compute_us_per_byte: 1e-4,
            seed: 0,
            iterations: 1,
        }
    }
}

/// Builds a transformer-like trace: one forward step per parameter tensor in
/// layer order, the mirrored backward pass, then one optimizer step per
/// parameter (state id first, then the paired parameter id).
///
/// Parameters get ids `1..=n` in forward order and their optimizer states
/// `n+1..=2n` in the same order.
pub fn synthesize_transformer_trace(spec: &SynthSpec) -> Result<ExecutionTrace, TraceError> {
    if spec.layers == 0 || spec.tensors_per_layer == 0 {
        return Err(TraceError::Invalid("layers and tensors_per_layer must be positive".into()));
    }
    if !spec.size_profile.is_valid() {
        return Err(TraceError::Invalid("size profile must yield positive sizes".into()));
    }
    if !spec.compute_us_per_byte.is_finite() || spec.compute_us_per_byte < 0.0 {
        return Err(TraceError::Invalid("compute_us_per_byte must be non-negative".into()));
    }
    if spec.iterations == 0 {
        return Err(TraceError::Invalid("iterations must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.layers * spec.tensors_per_layer;
    let mut tensors = Vec::with_capacity(2 * n as usize);
    for layer in 0..spec.layers {
        for k in 0..spec.tensors_per_layer {
            let size = match &spec.size_profile {
                SizeProfile::Fixed(s) => *s,
                SizeProfile::Cycle(v) => v[k as usize % v.len()],
                SizeProfile::Choice(v) => v[rng.gen_range(0..v.len())],
            };
            tensors.push(TensorDescriptor {
                id: layer * spec.tensors_per_layer + k + 1,
                size_bytes: size,
                kind: TensorKind::ParamFp16,
                layer: layer + 1,
            });
        }
    }
    for i in 0..n as usize {
        let p = tensors[i].clone();
        tensors.push(TensorDescriptor {
            id: p.id + n,
            size_bytes: p.size_bytes * OPT_STATE_BYTES_PER_PARAM_BYTE,
            kind: TensorKind::OptStateFp32,
            layer: p.layer,
        });
    }

    let mut steps = Vec::with_capacity(3 * n as usize);
    let mut push = |phase: Phase, ids: Vec<TensorId>, us: f64| {
        let step_index = steps.len() as u32;
        steps.push(TraceStep {
            step_index,
            phase,
            tensor_ids: ids,
            compute_us: us,
        });
    };
    let cpb = spec.compute_us_per_byte;
    for p in &tensors[..n as usize] {
        push(Phase::Forward, vec![p.id], cpb * p.size_bytes as f64);
    }
    for p in tensors[..n as usize].iter().rev() {
        push(Phase::Backward, vec![p.id], cpb * p.size_bytes as f64);
    }
    for i in 0..n as usize {
        let p = &tensors[i];
        let o = &tensors[i + n as usize];
        push(
            Phase::OptimizerUpdate,
            vec![o.id, p.id],
            cpb / OPT_COMPUTE_DIVISOR * o.size_bytes as f64,
        );
    }

    let trace = ExecutionTrace {
        tensors,
        steps,
        iterations: spec.iterations,
    };
    trace.validate()?;
    Ok(trace)
}

/// Counts distinct tensors of `kind` per size.
pub fn tensor_census(trace: &ExecutionTrace, kind: TensorKind) -> TensorCensus {
    let mut entries = BTreeMap::new();
    for t in trace.tensors_of(kind) {
        *entries.entry(t.size_bytes).or_insert(0u64) += 1;
    }
    TensorCensus { entries }
}
