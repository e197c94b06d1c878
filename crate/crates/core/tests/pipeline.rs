//! Cross-module integration: workload through engine to memorygram.

use occlab_core::engine::{run_trace, CostModel, MaskerConfig};
use occlab_core::llc::{CacheConfig, CacheState, Owner};
use occlab_core::probe::{build_probe_set, sweep, ProbeConfig, ProbeMode, TimerModel};
use occlab_core::workload::{
    generate_script, instantiate, ScenarioKind, ScenarioSpec, ScriptParams,
};

fn desk_cache() -> CacheConfig {
    CacheConfig::new(64, 8).unwrap()
}

fn desk_params() -> ScriptParams {
    ScriptParams {
        duration_ms: 200.0,
        render_working_set: (64, 512),
        net_working_set: (16, 128),
        ..ScriptParams::default()
    }
}

#[test]
fn per_sweep_misses_track_victim_distinct_lines_exactly() {
    // Occupancy proportionality in native-counter mode: with zigzag sweeps,
    // the per-sweep miss count equals the number of distinct probed-set
    // lines the victim displaced since the previous sweep.
    let cfg = desk_cache();
    let probe_cfg = ProbeConfig::native_counter(cfg, 3).with_duration_ms(20);
    let probe = build_probe_set(&probe_cfg);
    let mut cache = CacheState::new(cfg).unwrap();
    sweep(&mut cache, &probe, false);

    let mut reverse = true;
    for (k, seed) in [(0u64, 1u64), (3, 2), (17, 3), (64, 4), (200, 5)] {
        // Victim touches k distinct even-set lines.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut lines = std::collections::BTreeSet::new();
        while (lines.len() as u64) < k {
            let set = rng.gen_range(0..32u64) * 2;
            let way = rng.gen_range(0..8u64);
            lines.insert(way * 4096 + set); // victim region, maps to even sets
        }
        for &line in &lines {
            cache.access(line * 64, Owner::Victim, false);
        }
        let (_, misses) = sweep(&mut cache, &probe, reverse);
        reverse = !reverse;
        assert_eq!(misses, k, "victim displaced {k} lines");
    }
}

#[test]
fn miss_counts_are_nondecreasing_in_victim_activity() {
    let cfg = desk_cache();
    let probe_cfg = ProbeConfig::native_counter(cfg, 3).with_duration_ms(20);
    let probe = build_probe_set(&probe_cfg);
    let mut last = 0u64;
    for k in [0u64, 5, 25, 90, 256] {
        let mut cache = CacheState::new(cfg).unwrap();
        sweep(&mut cache, &probe, false);
        for i in 0..k {
            let set = (i * 2) % 64;
            let line = (i / 32) * 64 + set;
            cache.access(line * 64, Owner::Victim, false);
        }
        let (_, misses) = sweep(&mut cache, &probe, true);
        assert!(misses >= last, "misses {misses} dropped below {last} at k={k}");
        last = misses;
    }
}

#[test]
fn full_trace_through_engine_is_deterministic_and_shaped() {
    let params = desk_params();
    let script = generate_script(7, 42, &params);
    let spec = ScenarioSpec::new(ScenarioKind::Baseline);
    let (accesses, net) = instantiate(&script, &spec, 11, &params).unwrap();

    let probe_cfg = ProbeConfig::native_counter(desk_cache(), 9).with_duration_ms(200);
    let run = || {
        run_trace(&probe_cfg, &accesses, net.clone(), None, &CostModel::default(),
                  &TimerModel::firefox()).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.memorygram.entries, b.memorygram.entries);
    assert_eq!(a.memorygram.entries.len(), 100);
    assert_eq!(a.memorygram.mode, ProbeMode::NativeCounter);
    assert!(a.record.victim_events > 0);
    assert_eq!(a.net, net);

    // The victim leaves a visible footprint: some slot counts nonzero past
    // the cold sweep.
    assert!(a.memorygram.entries[1..].iter().any(|&e| e > 0.0));
}

#[test]
fn masked_traces_saturate_and_lose_class_information() {
    let params = desk_params();
    let probe_cfg = ProbeConfig::native_counter(desk_cache(), 9).with_duration_ms(100);
    // Period at half the slot: the window between two probes of the same
    // line always covers a full masker pass, so saturation is exact.
    let masker = MaskerConfig { period_ns: probe_cfg.slot_ns / 2 };
    let mut grams = Vec::new();
    for class in 0..3 {
        let script = generate_script(class, 42, &params);
        let spec = ScenarioSpec::new(ScenarioKind::Masked);
        let (accesses, net) = instantiate(&script, &spec, 70 + class as u64, &params).unwrap();
        let out = run_trace(&probe_cfg, &accesses, net, Some(masker), &CostModel::default(),
                            &TimerModel::firefox()).unwrap();
        grams.push(out.memorygram.entries);
    }
    // Identical saturated traces across classes: the channel carries nothing.
    assert_eq!(grams[0], grams[1]);
    assert_eq!(grams[1], grams[2]);
}

#[test]
fn tor_mode_masked_counts_are_class_independent() {
    let params = desk_params();
    let probe_cfg = ProbeConfig::js_tor_count(desk_cache(), 5)
        .with_duration_ms(400);
    let cost = CostModel::default().scaled(100);
    let masker = MaskerConfig { period_ns: 1_000_000 };
    let mut entries = Vec::new();
    for class in 0..2 {
        let script = generate_script(class, 13, &params);
        let spec = ScenarioSpec::new(ScenarioKind::Masked);
        let (accesses, net) = instantiate(&script, &spec, 5 + class as u64, &params).unwrap();
        let out = run_trace(&probe_cfg, &accesses, net, Some(masker), &cost,
                            &TimerModel::tor_browser()).unwrap();
        entries.push(out.memorygram.entries);
    }
    assert_eq!(entries[0], entries[1]);
}
