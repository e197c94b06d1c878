//! Attacker-side occupancy memorygrammer.
//!
//! The attacker allocates an LLC-sized buffer and repeatedly measures how
//! long one sweep over it takes; evictions caused by other activity make the
//! sweep slower. Three collection modes are modeled:
//!
//!   - `JsLatency`: quantized sweep latency sampled once per slot (2 ms by
//!     default). A sweep that overruns its slot skips the following slots,
//!     which are marked with [`MISSED_SLOT`].
//!   - `JsTorCount`: the 100 ms Tor Browser timer is too coarse to time one
//!     sweep, so the collector instead counts completed sweeps per tick.
//!   - `NativeCounter`: a native collector reads eviction counts from
//!     performance counters, one exact miss count per slot.
//!
//! The probe set covers every way of every even-indexed set (spatial
//! prefetcher evasion) and is traversed in a seeded order with no three
//! consecutive ascending lines (streaming prefetcher evasion).

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::llc::{CacheConfig, CacheState, Owner};

/// Sentinel entry for a slot skipped because the previous sweep overran.
pub const MISSED_SLOT: f32 = -1.0;

const TRACE_MAGIC: &[u8; 4] = b"OCLG";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProbeMode {
    JsLatency,
    JsTorCount,
    NativeCounter,
}

impl ProbeMode {
    pub fn tag(self) -> u8 {
        match self {
            ProbeMode::JsLatency => 0,
            ProbeMode::JsTorCount => 1,
            ProbeMode::NativeCounter => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ProbeMode::JsLatency),
            1 => Some(ProbeMode::JsTorCount),
            2 => Some(ProbeMode::NativeCounter),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProbeMode::JsLatency => "js-latency",
            ProbeMode::JsTorCount => "js-tor-count",
            ProbeMode::NativeCounter => "native-counter",
        }
    }
}

/// Timer resolution available to the collector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimerModel {
    pub resolution_ns: u64,
}

impl TimerModel {
    pub fn new(resolution_ns: u64) -> Self {
        assert!(resolution_ns > 0, "timer resolution must be positive");
        TimerModel { resolution_ns }
    }

    pub fn firefox() -> Self {
        TimerModel::new(2_000_000)
    }

    pub fn chrome() -> Self {
        TimerModel::new(100_000)
    }

    pub fn safari() -> Self {
        TimerModel::new(1_000_000)
    }

    pub fn tor_browser() -> Self {
        TimerModel::new(100_000_000)
    }
}

/// Collection parameters for one memorygram.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeConfig {
    pub target: CacheConfig,
    pub mode: ProbeMode,
    /// Sampling slot for JsLatency / NativeCounter.
    pub slot_ns: u64,
    /// Timer tick for JsTorCount.
    pub tick_ns: u64,
    pub duration_ns: u64,
    pub order_seed: u64,
}

impl ProbeConfig {
    /// Mainstream JavaScript collector: 2 ms slots for 30 s.
    pub fn js_latency(target: CacheConfig, order_seed: u64) -> Self {
        ProbeConfig {
            target,
            mode: ProbeMode::JsLatency,
            slot_ns: 2_000_000,
            tick_ns: 100_000_000,
            duration_ns: 30_000_000_000,
            order_seed,
        }
    }

    /// Tor Browser collector: sweeps counted per 100 ms tick for 50 s.
    pub fn js_tor_count(target: CacheConfig, order_seed: u64) -> Self {
        ProbeConfig {
            target,
            mode: ProbeMode::JsTorCount,
            slot_ns: 2_000_000,
            tick_ns: 100_000_000,
            duration_ns: 50_000_000_000,
            order_seed,
        }
    }

    /// Native collector against a mainstream browser: 2 ms slots for 30 s.
    pub fn native_counter(target: CacheConfig, order_seed: u64) -> Self {
        ProbeConfig {
            target,
            mode: ProbeMode::NativeCounter,
            slot_ns: 2_000_000,
            tick_ns: 100_000_000,
            duration_ns: 30_000_000_000,
            order_seed,
        }
    }

    /// Native collector against the Tor Browser: 50 s, 25,000 entries.
    pub fn native_counter_tor(target: CacheConfig, order_seed: u64) -> Self {
        let mut cfg = Self::native_counter(target, order_seed);
        cfg.duration_ns = 50_000_000_000;
        cfg
    }

    pub fn with_duration_ms(mut self, ms: u64) -> Self {
        self.duration_ns = ms * 1_000_000;
        self
    }

    pub fn with_slot_us(mut self, us: u64) -> Self {
        self.slot_ns = us * 1_000;
        self
    }

    pub fn with_tick_us(mut self, us: u64) -> Self {
        self.tick_ns = us * 1_000;
        self
    }

    /// Duration of one memorygram entry on the virtual clock.
    pub fn sample_ns(&self) -> u64 {
        match self.mode {
            ProbeMode::JsLatency | ProbeMode::NativeCounter => self.slot_ns,
            ProbeMode::JsTorCount => self.tick_ns,
        }
    }

    /// Number of entries in the assembled memorygram.
    pub fn trace_len(&self) -> usize {
        (self.duration_ns / self.sample_ns()) as usize
    }
}

/// Fixed-length trace of quantized probe observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Memorygram {
    pub mode: ProbeMode,
    pub entries: Vec<f32>,
    /// Slot or tick length, in nanoseconds.
    pub sample_ns: u64,
}

/// One back-to-back sweep over the probe set on the virtual clock.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepRecord {
    pub start_ns: u64,
    pub end_ns: u64,
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("sweep {index} at {start_ns} ns does not fit the {entries}-entry trace")]
    RecordOutOfRange { index: usize, start_ns: u64, entries: usize },
    #[error("trace file: {0}")]
    Io(#[from] io::Error),
    #[error("trace file has bad magic")]
    BadMagic,
    #[error("trace file has unknown mode tag {0}")]
    BadMode(u8),
}

/// Builds the probe set: every way of every even-indexed set, traversed in a
/// seed-determined order that never contains three consecutive accesses at
/// ascending line numbers — in either traversal direction, since sweeps
/// alternate direction (see [`crate::engine`]).
///
/// The traversal visits sets in a seeded order and, within each set, walks
/// the ways high-low interleaved (last, first, second-last, second, ...).
/// Within a set the steps strictly alternate down/up; transitions between
/// sets always step up forwards (mid way to top way) and down backwards, so
/// no two consecutive ascending steps exist in either direction. Grouping by
/// set also keeps one sweep's memory churn local.
///
/// The attacker buffer lives in its own address region so its lines never
/// alias victim or masker lines.
pub fn build_probe_set(config: &ProbeConfig) -> Vec<u64> {
    let cache = &config.target;
    let sets = cache.sets as u64;
    let base_line = attacker_base_line(cache);
    let mut rng = ChaCha12Rng::seed_from_u64(config.order_seed);

    let mut even_sets: Vec<u64> = (0..sets).step_by(2).collect();
    even_sets.shuffle(&mut rng);

    let ways = cache.ways as u64;
    let mut ordered: Vec<u64> = Vec::with_capacity(even_sets.len() * cache.ways);
    if ways >= 2 {
        for &set in &even_sets {
            let line_of_way = |w: u64| base_line + w * sets + set;
            let (mut lo, mut hi) = (0, ways - 1);
            while lo < hi {
                ordered.push(line_of_way(hi));
                ordered.push(line_of_way(lo));
                hi -= 1;
                lo += 1;
            }
            if lo == hi {
                ordered.push(line_of_way(lo));
            }
        }
    } else {
        // Degenerate single-way geometry (even-set counts are powers of two,
        // so the element count is even unless it is exactly one): emit the
        // shuffled sets as descending pairs sorted by their larger element,
        // which alternates down/up and is triple-free both ways.
        let lines: Vec<u64> = even_sets.iter().map(|&s| base_line + s).collect();
        if lines.len() == 1 {
            ordered.push(lines[0]);
        } else {
            let mut pairs: Vec<(u64, u64)> = lines
                .chunks_exact(2)
                .map(|p| if p[0] >= p[1] { (p[0], p[1]) } else { (p[1], p[0]) })
                .collect();
            pairs.sort_unstable_by_key(|&(hi, _)| hi);
            for (hi, lo) in pairs {
                ordered.push(hi);
                ordered.push(lo);
            }
        }
    }
    ordered.iter().map(|l| l * cache.line_size as u64).collect()
}

/// Base line index of the attacker's buffer: a multiple of every supported
/// set count, so set mapping is preserved.
pub fn attacker_base_line(cache: &CacheConfig) -> u64 {
    debug_assert_eq!((1u64 << 33) % cache.sets as u64, 0);
    1 << 33
}

/// Accesses every probe address once with prefetchers bypassed (the evasions
/// are assumed effective for the attacker's own pattern).
///
/// Consecutive sweeps should alternate direction (`reverse` toggled per
/// sweep): probing along the current recency order keeps resident lines
/// hitting and funnels evictions onto displaced lines only, so one foreign
/// eviction costs exactly one miss instead of thrashing the whole set.
pub fn sweep(cache: &mut CacheState, probe_set: &[u64], reverse: bool) -> (u64, u64) {
    let mut hits = 0;
    let mut misses = 0;
    let mut one = |addr: u64| {
        if cache.access_quiet(addr, Owner::Attacker, false) {
            hits += 1;
        } else {
            misses += 1;
        }
    };
    if reverse {
        probe_set.iter().rev().for_each(|&a| one(a));
    } else {
        probe_set.iter().for_each(|&a| one(a));
    }
    (hits, misses)
}

/// Quantizes a latency the way a counter-based low-resolution clock would:
/// floor to a multiple of the resolution.
pub fn quantize(latency_ns: u64, timer: &TimerModel) -> u64 {
    latency_ns / timer.resolution_ns * timer.resolution_ns
}

/// Assembles per-sweep records into a memorygram.
pub fn assemble(
    records: &[SweepRecord],
    config: &ProbeConfig,
    timer: &TimerModel,
) -> Result<Memorygram, ProbeError> {
    let len = config.trace_len();
    let entries = match config.mode {
        ProbeMode::JsLatency => {
            let mut entries = vec![MISSED_SLOT; len];
            for (index, rec) in records.iter().enumerate() {
                let slot = (rec.start_ns / config.slot_ns) as usize;
                if slot >= len {
                    return Err(ProbeError::RecordOutOfRange { index, start_ns: rec.start_ns, entries: len });
                }
                entries[slot] = quantize(rec.end_ns - rec.start_ns, timer) as f32;
            }
            entries
        }
        ProbeMode::NativeCounter => {
            let mut entries = vec![0.0; len];
            for (index, rec) in records.iter().enumerate() {
                let slot = (rec.start_ns / config.slot_ns) as usize;
                if slot >= len {
                    return Err(ProbeError::RecordOutOfRange { index, start_ns: rec.start_ns, entries: len });
                }
                entries[slot] += rec.misses as f32;
            }
            entries
        }
        ProbeMode::JsTorCount => {
            let mut entries = vec![0.0; len];
            for (index, rec) in records.iter().enumerate() {
                // Only sweeps completing inside the measurement window count;
                // a sweep ending exactly on a tick boundary belongs to the
                // tick it ran in.
                if rec.end_ns > 0 && rec.end_ns <= config.duration_ns {
                    let tick = ((rec.end_ns - 1) / config.tick_ns) as usize;
                    if tick >= len {
                        return Err(ProbeError::RecordOutOfRange { index, start_ns: rec.start_ns, entries: len });
                    }
                    entries[tick] += 1.0;
                }
            }
            entries
        }
    };
    Ok(Memorygram { mode: config.mode, entries, sample_ns: config.sample_ns() })
}

impl Memorygram {
    /// Writes the binary trace format: little-endian header (magic "OCLG",
    /// mode byte, entry count u32, slot/tick duration in microseconds u32)
    /// followed by f32 entries.
    pub fn write(&self, path: &Path) -> Result<(), ProbeError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(TRACE_MAGIC)?;
        w.write_all(&[self.mode.tag()])?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        w.write_all(&((self.sample_ns / 1_000) as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&e.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ProbeError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TRACE_MAGIC {
            return Err(ProbeError::BadMagic);
        }
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        let mode = ProbeMode::from_tag(byte[0]).ok_or(ProbeError::BadMode(byte[0]))?;
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let count = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let sample_us = u32::from_le_bytes(word);
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut word)?;
            entries.push(f32::from_le_bytes(word));
        }
        Ok(Memorygram { mode, entries, sample_ns: sample_us as u64 * 1_000 })
    }

    /// One entry per line, for inspection.
    pub fn write_csv(&self, path: &Path) -> Result<(), ProbeError> {
        let mut w = BufWriter::new(File::create(path)?);
        for e in &self.entries {
            writeln!(w, "{e}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<f32>, ProbeError> {
        let r = BufReader::new(File::open(path)?);
        let mut entries = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            entries.push(line.parse::<f32>().map_err(|e| {
                ProbeError::Io(io::Error::new(io::ErrorKind::InvalidData, e))
            })?);
        }
        Ok(entries)
    }
}
