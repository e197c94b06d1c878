//! Seeded synthetic website workloads.
//!
//! A website is modeled as a small script of activity phases, each either
//! `Network` (handling incoming traffic, paired with simulated packet
//! records) or `Render` (processing page content, cache activity only).
//! Network bursts lead, rendering dominates later, which is enough structure
//! to dissociate the two components the way the robustness scenarios demand.
//!
//! All generation is pure and seed-driven: `(class_seed, trace_seed,
//! scenario)` fully determine the victim access stream and the network trace.
//! Per-trace jitter stays within ±`jitter` of the script parameters. Scenario
//! transforms are applied to the jittered phases so that paired scenarios
//! (e.g. baseline vs. response-cache for the same trace seed) differ only in
//! the transform itself.
//!
//! The quantitative parameter ranges are this artifact's design, not measured
//! values; they live in [`ScriptParams`] so experiments can override them.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::llc::CacheConfig;
use crate::seed::derive_seed;

/// Base line index of the masker's buffer; a multiple of every supported set
/// count and disjoint from victim and attacker regions.
const MASKER_BASE_LINE: u64 = 1 << 32;

/// One timed victim (or masker) memory access.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimedAccess {
    pub time_ns: u64,
    pub addr: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseKind {
    Network,
    Render,
}

/// One activity window of a site script.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase {
    pub kind: PhaseKind,
    pub start_ms: f64,
    pub duration_ms: f64,
    /// Distinct cache lines the phase cycles over.
    pub working_set: u32,
    /// Accesses per millisecond.
    pub access_rate: f64,
    /// Seeds the base address of the phase's memory region.
    pub region_seed: u64,
}

/// Seeded description of one synthetic website.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteScript {
    pub class_id: u32,
    pub phases: Vec<Phase>,
}

/// Generation parameter ranges. These are experiment configuration, not
/// constants: presets tune them so that classification is neither trivial
/// nor impossible at desk scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScriptParams {
    pub duration_ms: f64,
    pub phases_min: u32,
    pub phases_max: u32,
    pub net_phases_min: u32,
    pub net_phases_max: u32,
    pub net_working_set: (u32, u32),
    pub render_working_set: (u32, u32),
    pub net_rate: (f64, f64),
    pub render_rate: (f64, f64),
    /// Simulated network bytes transferred per network working-set line.
    pub net_bytes_per_line: f64,
    /// Outbound request bytes as a fraction of inbound bytes.
    pub out_fraction: f64,
    pub record_bytes: u32,
    pub request_bytes: u32,
    /// Per-trace deviation bound on phase parameters.
    pub jitter: f64,
    /// Constant network component substituted under traffic molding.
    pub molded_working_set: u32,
    pub molded_rate: f64,
    /// Victim address space, in lines.
    pub region_lines: u64,
}

impl Default for ScriptParams {
    fn default() -> Self {
        ScriptParams {
            duration_ms: 3_000.0,
            phases_min: 4,
            phases_max: 10,
            net_phases_min: 2,
            net_phases_max: 4,
            net_working_set: (64, 1024),
            render_working_set: (512, 8192),
            net_rate: (20.0, 120.0),
            render_rate: (20.0, 120.0),
            net_bytes_per_line: 256.0,
            out_fraction: 0.04,
            record_bytes: 1460,
            request_bytes: 220,
            jitter: 0.05,
            molded_working_set: 256,
            molded_rate: 30.0,
            region_lines: 1 << 24,
        }
    }
}

/// Robustness-scenario transform applied when instantiating a script.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    Baseline,
    ResponseCache,
    RenderOnly,
    NetworkOnly,
    Drift,
    Masked,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::Baseline,
        ScenarioKind::ResponseCache,
        ScenarioKind::RenderOnly,
        ScenarioKind::NetworkOnly,
        ScenarioKind::Drift,
        ScenarioKind::Masked,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Baseline => "baseline",
            ScenarioKind::ResponseCache => "response-cache",
            ScenarioKind::RenderOnly => "render-only",
            ScenarioKind::NetworkOnly => "network-only",
            ScenarioKind::Drift => "drift",
            ScenarioKind::Masked => "masked",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Fraction of network activity served from the response cache.
    pub response_hit_fraction: f64,
    /// Traffic molding: one record of this size per period, both directions.
    pub molding_bytes: u32,
    pub molding_period_ms: f64,
    /// Relative perturbation of phase parameters under temporal drift.
    pub drift_magnitude: f64,
    /// Class-stable drift seed: all traces of a class drift the same way.
    pub drift_seed: u64,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind) -> Self {
        ScenarioSpec {
            kind,
            response_hit_fraction: 0.8,
            molding_bytes: 10_240,
            molding_period_ms: 250.0,
            drift_magnitude: 0.15,
            drift_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        if !(0.0..=1.0).contains(&self.response_hit_fraction) {
            return Err(WorkloadError::FractionOutOfRange(self.response_hit_fraction));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    In,
    Out,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetRecord {
    pub timestamp_ms: f64,
    pub direction: Direction,
    pub size_bytes: u32,
}

/// Simulated network capture: timestamped, directional record sizes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetTrace {
    pub records: Vec<NetRecord>,
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("fraction {0} outside [0,1]")]
    FractionOutOfRange(f64),
    #[error("net trace file: {0}")]
    Io(#[from] io::Error),
    #[error("net trace file: malformed line {0:?}")]
    MalformedLine(String),
}

impl NetTrace {
    pub fn total_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.size_bytes as u64).sum()
    }

    /// Bins the trace onto a fixed grid of `len` bins of `bin_ms` each:
    /// inbound bytes count positive, outbound negative. This is the feature
    /// vector the network-side classifier consumes.
    pub fn binned(&self, len: usize, bin_ms: f64) -> Vec<f32> {
        let mut bins = vec![0.0f32; len];
        for rec in &self.records {
            let k = (rec.timestamp_ms / bin_ms) as usize;
            if k < len {
                let signed = match rec.direction {
                    Direction::In => rec.size_bytes as f32,
                    Direction::Out => -(rec.size_bytes as f32),
                };
                bins[k] += signed;
            }
        }
        bins
    }

    /// CSV export: `timestamp_ms,direction,size_bytes`.
    pub fn write_csv(&self, path: &Path) -> Result<(), WorkloadError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "timestamp_ms,direction,size_bytes")?;
        for r in &self.records {
            let dir = match r.direction {
                Direction::In => "in",
                Direction::Out => "out",
            };
            writeln!(w, "{},{},{}", r.timestamp_ms, dir, r.size_bytes)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, WorkloadError> {
        let r = BufReader::new(File::open(path)?);
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 || line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let (ts, dir, size) = (parts.next(), parts.next(), parts.next());
            let (Some(ts), Some(dir), Some(size)) = (ts, dir, size) else {
                return Err(WorkloadError::MalformedLine(line));
            };
            let direction = match dir {
                "in" => Direction::In,
                "out" => Direction::Out,
                _ => return Err(WorkloadError::MalformedLine(line)),
            };
            let (Ok(timestamp_ms), Ok(size_bytes)) = (ts.parse(), size.parse()) else {
                return Err(WorkloadError::MalformedLine(line));
            };
            records.push(NetRecord { timestamp_ms, direction, size_bytes });
        }
        Ok(NetTrace { records })
    }
}

fn log_uniform(rng: &mut ChaCha12Rng, range: (u32, u32)) -> u32 {
    let (lo, hi) = (range.0.max(1) as f64, range.1.max(1) as f64);
    let v = (rng.gen_range(lo.ln()..=hi.ln())).exp();
    (v.round() as u32).clamp(range.0.max(1), range.1)
}

/// Deterministically generates the script for one class. Distinct class ids
/// give scripts differing in phase structure, working sets, and timing.
pub fn generate_script(class_id: u32, class_seed: u64, params: &ScriptParams) -> SiteScript {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(class_seed, "site-script", &[class_id as u64]));
    let d = params.duration_ms;
    let total = rng.gen_range(params.phases_min..=params.phases_max).max(2);
    let n_net = rng
        .gen_range(params.net_phases_min..=params.net_phases_max)
        .clamp(1, total - 1);
    let n_render = total - n_net;

    // Keep start + duration inside D even after +jitter on both.
    let margin = 1.0 + params.jitter;
    let clip = |start: f64, dur: f64| -> f64 { dur.min(d / margin - start).max(1.0) };

    let mut phases = Vec::with_capacity(total as usize);
    for _ in 0..n_net {
        let start = rng.gen_range(0.0..0.35 * d);
        let dur = clip(start, rng.gen_range(0.08 * d..0.30 * d));
        phases.push(Phase {
            kind: PhaseKind::Network,
            start_ms: start,
            duration_ms: dur,
            working_set: log_uniform(&mut rng, params.net_working_set),
            access_rate: rng.gen_range(params.net_rate.0..=params.net_rate.1),
            region_seed: rng.gen(),
        });
    }
    for _ in 0..n_render {
        let start = rng.gen_range(0.10 * d..0.60 * d);
        let dur = clip(start, rng.gen_range(0.15 * d..0.40 * d));
        phases.push(Phase {
            kind: PhaseKind::Render,
            start_ms: start,
            duration_ms: dur,
            working_set: log_uniform(&mut rng, params.render_working_set),
            access_rate: rng.gen_range(params.render_rate.0..=params.render_rate.1),
            region_seed: rng.gen(),
        });
    }
    phases.sort_by(|a, b| a.start_ms.partial_cmp(&b.start_ms).unwrap());
    SiteScript { class_id, phases }
}

/// Phases after class-stable drift (when applicable) and per-trace jitter.
/// Exposed so tests can check the jitter bound.
pub fn effective_phases(
    script: &SiteScript,
    scenario: &ScenarioSpec,
    trace_seed: u64,
    params: &ScriptParams,
) -> Vec<Phase> {
    let mut phases = script.phases.clone();

    if scenario.kind == ScenarioKind::Drift {
        let m = scenario.drift_magnitude;
        let mut drng = ChaCha12Rng::seed_from_u64(derive_seed(
            scenario.drift_seed,
            "class-drift",
            &[script.class_id as u64],
        ));
        for p in &mut phases {
            p.start_ms *= 1.0 + drng.gen_range(-m..=m);
            p.duration_ms *= 1.0 + drng.gen_range(-m..=m);
            p.working_set = ((p.working_set as f64 * (1.0 + drng.gen_range(-m..=m))).round() as u32).max(1);
            p.access_rate *= 1.0 + drng.gen_range(-m..=m);
        }
    }

    // Per-trace jitter: drawn for every phase in script order regardless of
    // scenario, so paired scenarios share identical draws.
    let mut jrng = ChaCha12Rng::seed_from_u64(derive_seed(trace_seed, "trace-jitter", &[]));
    let j = params.jitter;
    for p in &mut phases {
        p.start_ms *= 1.0 + jrng.gen_range(-j..=j);
        p.duration_ms *= 1.0 + jrng.gen_range(-j..=j);
        p.working_set = ((p.working_set as f64 * (1.0 + jrng.gen_range(-j..=j))).round() as u32).max(1);
        p.access_rate *= 1.0 + jrng.gen_range(-j..=j);
    }
    phases
}

fn phase_accesses(p: &Phase, params: &ScriptParams, out: &mut Vec<TimedAccess>) {
    let mut rrng = ChaCha12Rng::seed_from_u64(p.region_seed);
    let base = rrng.gen_range(0..params.region_lines.saturating_sub(p.working_set as u64 + 1));
    let count = (p.duration_ms * p.access_rate).floor() as u64;
    let ws = p.working_set.max(1) as u64;
    for i in 0..count {
        let time_ms = p.start_ms + i as f64 / p.access_rate;
        let line = base + (i % ws);
        out.push(TimedAccess { time_ns: (time_ms * 1e6) as u64, addr: line * 64 });
    }
}

/// Emits `budget` bytes as records of up to `full` bytes at seeded times
/// within the phase window.
fn emit_records(
    rng: &mut ChaCha12Rng,
    start_ms: f64,
    duration_ms: f64,
    budget: f64,
    full: u32,
    direction: Direction,
    out: &mut Vec<NetRecord>,
) {
    let mut remaining = budget.round() as u64;
    while remaining > 0 {
        let size = remaining.min(full as u64) as u32;
        let timestamp_ms = rng.gen_range(start_ms..start_ms + duration_ms.max(f64::EPSILON));
        out.push(NetRecord { timestamp_ms, direction, size_bytes: size });
        remaining -= size as u64;
    }
}

/// Instantiates one trace of a script under a scenario: the victim's timed
/// access stream and the matching simulated network trace.
pub fn instantiate(
    script: &SiteScript,
    scenario: &ScenarioSpec,
    trace_seed: u64,
    params: &ScriptParams,
) -> Result<(Vec<TimedAccess>, NetTrace), WorkloadError> {
    scenario.validate()?;
    let phases = effective_phases(script, scenario, trace_seed, params);

    let keep_fraction = match scenario.kind {
        ScenarioKind::ResponseCache => 1.0 - scenario.response_hit_fraction,
        _ => 1.0,
    };

    let mut accesses = Vec::new();
    let mut records = Vec::new();

    for (idx, p) in phases.iter().enumerate() {
        match p.kind {
            PhaseKind::Render => {
                if scenario.kind != ScenarioKind::NetworkOnly {
                    phase_accesses(p, params, &mut accesses);
                }
            }
            PhaseKind::Network => {
                if scenario.kind == ScenarioKind::RenderOnly {
                    continue; // replaced by the constant component below
                }
                let mut eff = *p;
                eff.working_set = ((p.working_set as f64 * keep_fraction).round() as u32).max(1);
                phase_accesses(&eff, params, &mut accesses);

                let in_budget = eff.working_set as f64 * params.net_bytes_per_line;
                let mut nrng = ChaCha12Rng::seed_from_u64(derive_seed(
                    trace_seed,
                    "net-phase",
                    &[idx as u64],
                ));
                emit_records(
                    &mut nrng,
                    eff.start_ms,
                    eff.duration_ms,
                    in_budget,
                    params.record_bytes,
                    Direction::In,
                    &mut records,
                );
                emit_records(
                    &mut nrng,
                    eff.start_ms,
                    eff.duration_ms,
                    in_budget * params.out_fraction,
                    params.request_bytes,
                    Direction::Out,
                    &mut records,
                );
            }
        }
    }

    if scenario.kind == ScenarioKind::RenderOnly {
        // Constant-rate network handling component, identical load for every
        // class; region depends only on the trace seed.
        let constant = Phase {
            kind: PhaseKind::Network,
            start_ms: 0.0,
            duration_ms: params.duration_ms,
            working_set: params.molded_working_set,
            access_rate: params.molded_rate,
            region_seed: derive_seed(trace_seed, "molded-region", &[]),
        };
        phase_accesses(&constant, params, &mut accesses);

        // Molded capture: one fixed-size record per period, alternating
        // direction. Byte-identical across classes and traces.
        let periods = (params.duration_ms / scenario.molding_period_ms).floor() as u64;
        for k in 0..periods {
            records.push(NetRecord {
                timestamp_ms: k as f64 * scenario.molding_period_ms,
                direction: if k % 2 == 0 { Direction::In } else { Direction::Out },
                size_bytes: scenario.molding_bytes,
            });
        }
    }

    accesses.sort_by_key(|a| a.time_ns);
    records.sort_by(|a, b| a.timestamp_ms.partial_cmp(&b.timestamp_ms).unwrap());
    Ok((accesses, NetTrace { records }))
}

/// Unending cyclic stream touching every line of a cache-sized buffer, one
/// full pass per `period_ns`. Feed it to the engine as the masker.
pub fn masker_stream(config: &CacheConfig, period_ns: u64) -> MaskerStream {
    MaskerStream {
        lines: config.total_lines() as u64,
        line_size: config.line_size as u64,
        period_ns,
        idx: 0,
    }
}

#[derive(Clone, Debug)]
pub struct MaskerStream {
    lines: u64,
    line_size: u64,
    period_ns: u64,
    idx: u64,
}

impl Iterator for MaskerStream {
    type Item = TimedAccess;

    fn next(&mut self) -> Option<TimedAccess> {
        let pass = self.idx / self.lines;
        let k = self.idx % self.lines;
        self.idx += 1;
        Some(TimedAccess {
            time_ns: pass * self.period_ns + k * self.period_ns / self.lines,
            addr: (MASKER_BASE_LINE + k) * self.line_size,
        })
    }
}
