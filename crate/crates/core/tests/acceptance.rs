//! Acceptance suite: one pass/fail line per criterion, non-zero exit if any
//! criterion fails.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::process::ExitCode;

use num_rational::Ratio;
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::TestRunner;
use tencache_sim::analyzer::{size_distribution, TensorCensus};
use tencache_sim::bufpool::plan_buffers;
use tencache_sim::engine::sweep_with_threads;
use tencache_sim::machine::MemoryClass;
use tencache_sim::presets;
use tencache_sim::scheduler::ActionKind::*;
use tencache_sim::trace::TensorKind;
use tencache_sim::*;

use common::cases::{check_bounds, compare, small_case, with_class, POLICIES};
use common::{figures, pool_model};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Draws `n` values from `strategy` with a fixed seed.
fn draw<S: Strategy>(strategy: S, n: usize) -> Vec<S::Value> {
    let mut runner = TestRunner::deterministic();
    (0..n)
        .map(|_| strategy.new_tree(&mut runner).expect("strategy yields values").current())
        .collect()
}

fn sizing() -> Outcome {
    let censuses = draw(
        proptest::collection::btree_map(1u64..=2_000_000_000, 1u64..=5_000, 1..=8).prop_map(TensorCensus::from_pairs),
        1000,
    );
    let avail = draw((0u64..=u64::MAX / 4, 0u64..=u64::MAX / 4), 1000);
    let bytes = |m: &std::collections::BTreeMap<u64, u64>| m.iter().map(|(s, c)| *s as u128 * *c as u128).sum::<u128>();
    for (tc, &(gpu, cpu)) in censuses.iter().zip(&avail) {
        let d = size_distribution(tc).map_err(|e| e.to_string())?;
        let total: u128 = tc.entries.iter().map(|(s, c)| *s as u128 * *c as u128).sum();
        let mut exact = Ratio::from_integer(0u128);
        for (&s, &c) in &tc.entries {
            let r = d.exact(s).unwrap();
            ensure!(r == Ratio::new(s as u128 * c as u128, total), "share of {s} is {r}");
            exact += r;
        }
        ensure!(exact == Ratio::from_integer(1), "exact shares sum to {exact}");
        let f: f64 = d.ratios().values().sum();
        ensure!((f - 1.0).abs() <= 1e-9, "shares sum to {f}");
        let plan = plan_buffers(tc, &d, gpu, cpu);
        ensure!(bytes(&plan.gpu_counts) <= gpu as u128, "GPU plan exceeds {gpu}");
        ensure!(bytes(&plan.cpu_counts) <= cpu as u128, "CPU plan exceeds {cpu}");
        for (&s, &c) in &tc.entries {
            ensure!(plan.gpu_counts[&s] + plan.cpu_counts[&s] <= c, "class {s} over-planned");
        }
    }
    let tc = TensorCensus::from_pairs([(512, 4), (1024, 4)]);
    let plan = plan_buffers(&tc, &size_distribution(&tc).unwrap(), 4096, 4096);
    let two = std::collections::BTreeMap::from([(512, 2), (1024, 2)]);
    ensure!(plan.gpu_counts == two && plan.cpu_counts == two, "worked example gave {plan:?}");
    Ok("1000 censuses exact, plans within bounds, worked example matches".into())
}

fn oracle() -> Outcome {
    let cases = draw(small_case(), 100);
    let mut runs = 0;
    for (trace, machine, overlap) in &cases {
        let cfg = RunConfig {
            restore_overlap: *overlap,
            record_events: true,
            ..RunConfig::default()
        };
        for class in [MemoryClass::Pageable, MemoryClass::Pinned] {
            let m = with_class(machine, class);
            for policy in POLICIES {
                if let Some(r) = compare(trace, &m, &policy, &cfg)? {
                    check_bounds(&r, trace, &m)?;
                }
                runs += 1;
            }
        }
    }
    Ok(format!("100 traces, {runs} runs, 0 mismatches"))
}

fn replays() -> Outcome {
    use tencache_sim::Location::*;
    let placed = figures::nine_tensor_placement();
    ensure!(placed == figures::nine_tensor_expected(), "placement {placed:?}");
    let slide = figures::sliding_window_actions();
    ensure!(slide == figures::sliding_window_expected(), "window log {slide:?}");
    let (first, window, halted) = figures::sliding_window_halt();
    ensure!(first == vec![(Evict, 1, Gpu, Cpu), (Prefetch, 4, Cpu, Gpu)], "first step {first:?}");
    ensure!(window == vec![4, 5, 6] && halted, "window {window:?}, halted {halted}");
    let (_, seven, s) = figures::three_tier_evictions();
    let log = figures::actions(&s.log);
    ensure!(seven.is_empty() && log == figures::three_tier_expected_log(), "three-tier log {log:?}");
    let opt = figures::optimizer_refill();
    ensure!(opt == figures::optimizer_refill_expected(), "optimizer log {opt:?}");
    Ok("placement, sliding window with halt, swap and release, optimizer refill".into())
}

fn default_reports(policies: &[PolicyKind]) -> Result<Vec<SimReport>, String> {
    let t = presets::default_trace();
    let m = presets::cpu_gpu_machine(&t);
    policies
        .iter()
        .map(|p| run(&t, &m, p, &RunConfig::default()).map_err(|e| format!("{p}: {e}")))
        .collect()
}

const ZERO_INF: [PolicyKind; 3] = [
    PolicyKind::ZeroInfinityLike { lookahead: 0 },
    PolicyKind::ZeroInfinityLike { lookahead: 1 },
    PolicyKind::ZeroInfinityLike { lookahead: 2 },
];

fn hit_rate() -> Outcome {
    let ours = default_reports(&[PolicyKind::TenCache])?[0].hit_rate;
    let mut parts = vec![format!("tencache {ours:.4}")];
    for r in default_reports(&ZERO_INF)? {
        ensure!(ours >= 4.0 * r.hit_rate, "tencache {ours} < 4 x {} ({})", r.hit_rate, r.policy);
        parts.push(format!("{} {:.4}", r.policy, r.hit_rate));
    }
    Ok(parts.join(", "))
}

fn optimizer_misses() -> Outcome {
    let t = presets::default_trace();
    let m = presets::optimizer_pressure_machine(&t, 1.6);
    let miss = |p: PolicyKind| run(&t, &m, &p, &RunConfig::default()).map(|r| r.optimizer_miss_rate);
    let ours = miss(PolicyKind::TenCachePlusOpt).map_err(|e| e.to_string())?;
    ensure!(ours < 0.01, "tencache+opt miss rate {ours}");
    let mut parts = vec![format!("tencache+opt {ours:.4}")];
    for p in ZERO_INF {
        let theirs = miss(p).map_err(|e| e.to_string())?;
        ensure!(theirs == 1.0, "{p} miss rate {theirs}");
        parts.push(format!("{p} {theirs:.4}"));
    }
    Ok(parts.join(", "))
}

fn training_time() -> Outcome {
    let ours = default_reports(&[PolicyKind::TenCache])?[0].total_time_us;
    let mut worst = 0.0f64;
    for r in default_reports(&ZERO_INF)? {
        worst = worst.max(ours / r.total_time_us);
    }
    let t = presets::nvme_trace();
    let m = presets::nvme_machine();
    let time = |p: PolicyKind| run(&t, &m, &p, &RunConfig::default()).map(|r| r.total_time_us);
    let nvme_ours = time(PolicyKind::TenCachePlusOpt).map_err(|e| e.to_string())?;
    let mut nvme_worst = 0.0f64;
    for p in ZERO_INF {
        nvme_worst = nvme_worst.max(nvme_ours / time(p).map_err(|e| e.to_string())?);
    }
    let msg = format!("CPU-GPU ratio {worst:.3} (<= 0.8), CPU-GPU-NVMe ratio {nvme_worst:.3} (<= 0.5)");
    ensure!(worst <= 0.8 && nvme_worst <= 0.5, "{msg}");
    Ok(msg)
}

fn wait_time() -> Outcome {
    let ours = &default_reports(&[PolicyKind::TenCache])?[0];
    let below30 = ours.pct_below(30.0).unwrap_or(0.0);
    let below100 = ours.pct_below(100.0).unwrap_or(0.0);
    let mut parts = vec![format!("tencache <30us {below30:.2}%, <100us {below100:.2}%")];
    for r in default_reports(&ZERO_INF)? {
        let theirs = r.pct_below(30.0).unwrap_or(0.0);
        ensure!(below30 > theirs, "tencache {below30}% <= {theirs}% for {}", r.policy);
        parts.push(format!("{} <30us {theirs:.2}%", r.policy));
    }
    ensure!(below100 >= 99.0, "tencache below 100 us only {below100}%");
    Ok(parts.join(", "))
}

fn transfer_model() -> Outcome {
    // Pageable host-to-device bandwidth as measured alongside the pinned one.
    let mut m = default_machine();
    for l in m.links.iter_mut().filter(|l| (l.src, l.dst) == (Location::Cpu, Location::Gpu)) {
        l.gbps = 10.16;
    }
    let pageable = m.transfer_time(Location::Cpu, Location::Gpu, 16_000_000).map_err(|e| e.to_string())?;
    m.cpu_memory_class = MemoryClass::Pinned;
    let pinned = m.transfer_time(Location::Cpu, Location::Gpu, 16_000_000).map_err(|e| e.to_string())?;
    let ratio = *(pageable / pinned).numer() as f64 / *(pageable / pinned).denom() as f64;
    ensure!((ratio - 2.44).abs() <= 0.01, "pageable/pinned ratio {ratio}");
    let links = [
        (Location::Cpu, Location::Gpu),
        (Location::Gpu, Location::Cpu),
        (Location::Cpu, Location::Nvme),
        (Location::Nvme, Location::Cpu),
        (Location::Nvme, Location::Gpu),
        (Location::Gpu, Location::Nvme),
    ];
    for (a, b, k) in draw((0u64..=1 << 40, 0u64..=1 << 40, 0u64..=1000), 200) {
        for class in [MemoryClass::Pageable, MemoryClass::Pinned] {
            m.cpu_memory_class = class;
            for (src, dst) in links {
                let t = |n| m.transfer_time(src, dst, n).unwrap();
                ensure!(t(a + b) == t(a) + t(b), "{src}->{dst} not additive at {a}+{b}");
                ensure!(t(a * k) == t(a) * Ratio::from_integer(k as u128), "{src}->{dst} not homogeneous");
            }
        }
    }
    Ok(format!("pageable/pinned {ratio:.4}, linear on 200 random size pairs"))
}

fn pool_safety() -> Outcome {
    let counts = draw(pool_model::layout(), 1).remove(0);
    let ops = draw(proptest::collection::vec(pool_model::op(), 100_000), 1).remove(0);
    pool_model::check(&counts, &ops)?;
    Ok(format!("{} operations on layout {counts:?} match the set model", ops.len()))
}

fn determinism() -> Outcome {
    let t = presets::default_trace();
    let m = presets::cpu_gpu_machine(&t);
    let cfg = RunConfig {
        record_events: true,
        ..RunConfig::default()
    };
    for name in PolicyKind::ALL_NAMES {
        let p: PolicyKind = name.parse().map_err(|e: SimError| e.to_string())?;
        let bytes = || -> Result<Vec<u8>, String> {
            match run(&t, &m, &p, &cfg) {
                Ok(r) => {
                    let mut out = r.to_json().into_bytes();
                    r.write_event_log(&mut out).map_err(|e| e.to_string())?;
                    Ok(out)
                }
                Err(e) => Ok(e.to_string().into_bytes()),
            }
        };
        ensure!(bytes()? == bytes()?, "{name} differs between runs");
    }
    let p = t.total_bytes(TensorKind::ParamFp16) as f64;
    let values: Vec<f64> = (1..=10).map(|i| p * i as f64 / 10.0).collect();
    let mut outputs = Vec::new();
    for threads in [1, 2, 8] {
        let reports = sweep_with_threads(
            &t,
            &m,
            &PolicyKind::TenCache,
            &RunConfig::default(),
            SweepAxis::GpuCapacity,
            &values,
            threads,
        )
        .map_err(|e| e.to_string())?;
        outputs.push(reports.iter().map(SimReport::to_json).collect::<Vec<_>>());
    }
    ensure!(outputs.windows(2).all(|w| w[0] == w[1]), "sweep output depends on thread count");
    Ok("all policies byte-identical across runs; sweep identical on 1, 2 and 8 threads".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("buffer sizing", sizing),
        ("oracle equivalence", oracle),
        ("worked-example replays", replays),
        ("relative hit rate", hit_rate),
        ("optimizer miss rate", optimizer_misses),
        ("relative training time", training_time),
        ("wait-time metric", wait_time),
        ("transfer model", transfer_model),
        ("pool safety", pool_safety),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
