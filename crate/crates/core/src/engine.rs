//! Deterministic virtual-timeline scheduler.
//!
//! One trace simulation merges three actors over a single cache on one
//! virtual clock:
//!
//!   - the victim's timed access stream (and optionally the masker's), fired
//!     at their stream timestamps — they are not charged against the
//!     attacker's clock, which models a separate core sharing only the LLC;
//!   - the attacker's sweeps, which advance the clock by the latency cost
//!     model (`hits × t_hit + misses × t_miss`).
//!
//! Sweeps start at slot boundaries in the sampled modes and back-to-back in
//! Tor count mode, and alternate traversal direction so that a displaced line
//! costs exactly one miss (see [`crate::probe::sweep`]). Ties on the clock
//! fire in the fixed order victim, masker, attacker. Identical inputs give
//! identical outputs.

use crate::llc::{CacheState, Owner};
use crate::probe::{assemble, build_probe_set, Memorygram, ProbeConfig, ProbeError, ProbeMode,
                   SweepRecord, TimerModel};
use crate::workload::{masker_stream, MaskerStream, NetTrace, TimedAccess};

/// Latency cost model for attacker-visible accesses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostModel {
    pub t_hit_ns: u64,
    pub t_miss_ns: u64,
    /// Bookkeeping only: victim and masker run on their own core and their
    /// access cost is never charged to the attacker clock.
    pub victim_access_ns: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        // Roughly a 100 ns memory-vs-cache gap.
        CostModel { t_hit_ns: 10, t_miss_ns: 110, victim_access_ns: 0 }
    }
}

impl CostModel {
    pub fn scaled(self, factor: u64) -> Self {
        CostModel {
            t_hit_ns: self.t_hit_ns * factor,
            t_miss_ns: self.t_miss_ns * factor,
            victim_access_ns: self.victim_access_ns * factor,
        }
    }
}

/// Duration of a sweep under the cost model.
pub fn sweep_time(hits: u64, misses: u64, cost: &CostModel) -> u64 {
    hits * cost.t_hit_ns + misses * cost.t_miss_ns
}

/// Masker co-execution parameters: one full cache eviction pass per period.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskerConfig {
    pub period_ns: u64,
}

/// Everything recorded about one simulated trace.
#[derive(Clone, Debug)]
pub struct TraceRecord {
    pub sweeps: Vec<SweepRecord>,
    pub victim_events: u64,
    pub masker_events: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: TraceRecord,
    pub memorygram: Memorygram,
    /// The network capture passes through untouched; it is carried so one
    /// call yields the full correlated data record.
    pub net: NetTrace,
}

/// Merges the victim stream and the masker stream in timestamp order.
/// Equal timestamps fire victim first, then masker; the attacker always acts
/// after events at the same instant.
pub struct EventQueue<'a> {
    victim: &'a [TimedAccess],
    vi: usize,
    masker: Option<MaskerStream>,
    masker_next: Option<TimedAccess>,
    /// Events at or past this time are silently dropped.
    horizon_ns: u64,
    pub victim_events: u64,
    pub masker_events: u64,
}

impl<'a> EventQueue<'a> {
    pub fn new(victim: &'a [TimedAccess], mut masker: Option<MaskerStream>, horizon_ns: u64) -> Self {
        let masker_next = masker.as_mut().and_then(|m| m.next());
        EventQueue { victim, vi: 0, masker, masker_next, horizon_ns, victim_events: 0, masker_events: 0 }
    }

    /// Timestamp of the earliest pending event, `u64::MAX` when exhausted.
    pub fn peek_time(&self) -> u64 {
        let v = self.victim.get(self.vi).map_or(u64::MAX, |a| a.time_ns);
        let m = self.masker_next.map_or(u64::MAX, |a| a.time_ns);
        let t = v.min(m);
        if t >= self.horizon_ns {
            u64::MAX
        } else {
            t
        }
    }

    /// Applies the earliest event. Caller guarantees one is pending.
    fn pop_apply(&mut self, cache: &mut CacheState) {
        let v = self.victim.get(self.vi).map_or(u64::MAX, |a| a.time_ns);
        let m = self.masker_next.map_or(u64::MAX, |a| a.time_ns);
        if v <= m {
            cache.access_quiet(self.victim[self.vi].addr, Owner::Victim, true);
            self.vi += 1;
            self.victim_events += 1;
        } else {
            cache.access_quiet(self.masker_next.unwrap().addr, Owner::Masker, true);
            self.masker_next = self.masker.as_mut().and_then(|s| s.next());
            self.masker_events += 1;
        }
    }

    /// Fires every pending event with timestamp ≤ `t`.
    pub fn drain_until(&mut self, t: u64, cache: &mut CacheState) {
        while self.peek_time() <= t {
            self.pop_apply(cache);
        }
    }

    fn events_applied(&self) -> u64 {
        self.victim_events + self.masker_events
    }
}

/// Runs one trace end to end: builds the probe set, interleaves all cache
/// accesses in global time order, and assembles the memorygram.
pub fn run_trace(
    probe_cfg: &ProbeConfig,
    victim: &[TimedAccess],
    net: NetTrace,
    masker: Option<MaskerConfig>,
    cost: &CostModel,
    timer: &TimerModel,
) -> Result<RunOutput, ProbeError> {
    let probe_set = build_probe_set(probe_cfg);
    let mut cache = CacheState::new(probe_cfg.target).expect("validated config");
    let duration = probe_cfg.duration_ns;
    let slot = probe_cfg.slot_ns;
    let continuous = probe_cfg.mode == ProbeMode::JsTorCount;

    let masker_iter = masker.map(|m| masker_stream(&probe_cfg.target, m.period_ns));
    let mut events = EventQueue::new(victim, masker_iter, duration);

    let n = probe_set.len() as u64;
    let all_hit_ns = n * cost.t_hit_ns;
    let mut sweeps = Vec::new();
    let mut reverse = false;
    let mut start = 0u64;
    // Event count at a moment the probe set was known fully resident and
    // untouched since; `None` until a sweep completes without interference.
    let mut resident_at: Option<u64> = None;
    while start < duration {
        events.drain_until(start, &mut cache);

        // Fast path: if the probe set is still fully resident and no event
        // falls inside this sweep's (all-hit) span, the sweep is a foregone
        // conclusion — record it without simulating. Only recency stamps
        // would change, and eviction counts are stamp-order independent.
        if resident_at == Some(events.events_applied()) && events.peek_time() > start + all_hit_ns {
            let end = start + all_hit_ns;
            sweeps.push(SweepRecord { start_ns: start, end_ns: end, hits: n, misses: 0 });
            start = if continuous {
                end
            } else {
                reverse = !reverse;
                end.div_ceil(slot) * slot
            };
            continue;
        }

        let before = events.events_applied();
        let mut t = start;
        let (mut hits, mut misses) = (0u64, 0u64);
        let mut next_evt = events.peek_time();
        let mut probe_one = |addr: u64, t: &mut u64, cache: &mut CacheState| {
            if next_evt <= *t {
                events.drain_until(*t, cache);
                next_evt = events.peek_time();
            }
            if cache.access_quiet(addr, Owner::Attacker, false) {
                hits += 1;
                *t += cost.t_hit_ns;
            } else {
                misses += 1;
                *t += cost.t_miss_ns;
            }
        };
        if reverse {
            for &addr in probe_set.iter().rev() {
                probe_one(addr, &mut t, &mut cache);
            }
        } else {
            for &addr in probe_set.iter() {
                probe_one(addr, &mut t, &mut cache);
            }
        }
        sweeps.push(SweepRecord { start_ns: start, end_ns: t, hits, misses });
        // The sweep re-established residency unless events interleaved it.
        let now = events.events_applied();
        resident_at = (now == before).then_some(now);

        start = if continuous {
            // Back-to-back counting sweeps keep one direction: with zigzag
            // the turnaround lines would be re-probed before any evictor
            // completes a pass over their sets.
            t
        } else {
            reverse = !reverse;
            // Next slot boundary at or after the sweep end.
            t.div_ceil(slot) * slot
        };
    }

    let memorygram = assemble(&sweeps, probe_cfg, timer)?;
    Ok(RunOutput {
        record: TraceRecord {
            sweeps,
            victim_events: events.victim_events,
            masker_events: events.masker_events,
        },
        memorygram,
        net,
    })
}
