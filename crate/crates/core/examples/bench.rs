// Scratch benchmark for trace generation cost.
use std::time::Instant;
use occlab_core::engine::{run_trace, CostModel};
use occlab_core::llc::CacheConfig;
use occlab_core::probe::{ProbeConfig, TimerModel};
use occlab_core::workload::{generate_script, instantiate, ScenarioKind, ScenarioSpec, ScriptParams};

fn main() {
    let cache = CacheConfig::new(4096, 12).unwrap();
    let params = ScriptParams { duration_ms: 3000.0, ..ScriptParams::default() };
    let probe = ProbeConfig::native_counter(cache, 7).with_duration_ms(3000);
    let cost = CostModel::default();
    let timer = TimerModel::firefox();

    // idle trace
    let t0 = Instant::now();
    let out = run_trace(&probe, &[], Default::default(), None, &cost, &timer).unwrap();
    println!("idle: {:?} sweeps {}", t0.elapsed(), out.record.sweeps.len());

    for class in 0..4 {
        let script = generate_script(class, 42, &params);
        let spec = ScenarioSpec::new(ScenarioKind::Baseline);
        let t0 = Instant::now();
        let (acc, net) = instantiate(&script, &spec, 9, &params).unwrap();
        let gen_t = t0.elapsed();
        let t0 = Instant::now();
        let out = run_trace(&probe, &acc, net, None, &cost, &timer).unwrap();
        let sim_t = t0.elapsed();
        let real_sweeps = out.record.sweeps.iter().filter(|s| s.misses > 0 || s.hits < 24576).count();
        let idle_like = out.record.sweeps.iter().filter(|s| s.misses == 0).count();
        println!(
            "class {class}: instantiate {gen_t:?} sim {sim_t:?} victim_events {} sweeps {} all_hit {} miss>0 {}",
            out.record.victim_events, out.record.sweeps.len(), idle_like, real_sweeps
        );
    }
}
