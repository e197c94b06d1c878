//! Experiment configuration: named presets plus plain key=value files.
//!
//! A config file is a list of `key = value` lines (`#` comments allowed).
//! An optional `preset = <name>` line selects the base profile; every other
//! key overrides one field. The run manifest written next to each dataset is
//! the same format with every derived seed listed, so any output can be
//! regenerated from its manifest alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use occlab_core::engine::CostModel;
use occlab_core::learn::{CnnSpec, ConvStage};
use occlab_core::llc::CacheConfig;
use occlab_core::probe::{ProbeConfig, ProbeMode, TimerModel};
use occlab_core::seed::derive_seed;
use occlab_core::workload::{ScenarioKind, ScenarioSpec, ScriptParams};

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub scenario: ScenarioKind,
    pub classes: u32,
    pub traces_per_class: u32,
    pub open_world_extras: u32,
    pub master_seed: u64,

    pub cache_sets: usize,
    pub cache_ways: usize,
    pub cache_line: usize,

    pub probe_mode: ProbeMode,
    pub slot_us: u64,
    pub tick_us: u64,
    pub duration_ms: u64,
    pub timer_resolution_us: u64,

    pub t_hit_ns: u64,
    pub t_miss_ns: u64,
    pub masker_period_us: u64,

    pub response_hit_fraction: f64,
    pub molding_bytes: u32,
    pub molding_period_ms: f64,
    pub drift_magnitude: f64,

    pub script: ScriptParams,

    pub cnn_stages: Vec<ConvStage>,
    pub cnn_dense: usize,
    pub cnn_learning_rate: f64,
    pub cnn_batch: usize,
    pub cnn_epochs: usize,
    pub cnn_patience: usize,
    pub knn_k: usize,

    pub folds: usize,
    pub rounds: usize,
}

impl ExperimentConfig {
    /// Desk-scale default: 20 classes x 30 traces of length 1500 against a
    /// 6 MiB-geometry cache, native-counter collection.
    pub fn desk_small() -> Self {
        ExperimentConfig {
            name: "desk-small".into(),
            scenario: ScenarioKind::Baseline,
            classes: 20,
            traces_per_class: 30,
            open_world_extras: 0,
            master_seed: 1,
            cache_sets: 4096,
            cache_ways: 12,
            cache_line: 64,
            probe_mode: ProbeMode::NativeCounter,
            slot_us: 2_000,
            tick_us: 100_000,
            duration_ms: 3_000,
            timer_resolution_us: 2_000,
            t_hit_ns: 10,
            t_miss_ns: 110,
            masker_period_us: 1_000,
            response_hit_fraction: 0.8,
            molding_bytes: 10_240,
            molding_period_ms: 250.0,
            drift_magnitude: 0.15,
            script: ScriptParams { duration_ms: 3_000.0, ..ScriptParams::default() },
            cnn_stages: vec![
                ConvStage { filters: 32, kernel: 16, pool: 4 },
                ConvStage { filters: 32, kernel: 8, pool: 4 },
            ],
            cnn_dense: 128,
            cnn_learning_rate: 0.001,
            cnn_batch: 50,
            cnn_epochs: 40,
            cnn_patience: 3,
            knn_k: 3,
            folds: 10,
            rounds: 1,
        }
    }

    /// Desk-scale Tor profile: sweep counting against a small cache with a
    /// 100x latency scale, 100 ms ticks for 5 s.
    pub fn desk_tor() -> Self {
        let mut cfg = Self::desk_small();
        cfg.name = "desk-tor".into();
        cfg.cache_sets = 64;
        cfg.cache_ways = 8;
        cfg.probe_mode = ProbeMode::JsTorCount;
        cfg.duration_ms = 5_000;
        cfg.timer_resolution_us = 100_000;
        cfg.t_hit_ns = 1_000;
        cfg.t_miss_ns = 11_000;
        cfg.masker_period_us = 1_000;
        cfg.script = ScriptParams {
            duration_ms: 5_000.0,
            render_working_set: (64, 512),
            net_working_set: (16, 128),
            ..ScriptParams::default()
        };
        cfg.cnn_stages = vec![ConvStage { filters: 32, kernel: 8, pool: 3 }];
        cfg.cnn_dense = 64;
        cfg
    }

    /// Paper-scale profile: 100 classes x 100 traces, 15,000-entry
    /// JavaScript latency memorygrams over 30 s, full-size network. Meant
    /// for overnight runs, not the desk suite.
    pub fn paper_6mb() -> Self {
        let mut cfg = Self::desk_small();
        cfg.name = "paper-6mb".into();
        cfg.classes = 100;
        cfg.traces_per_class = 100;
        cfg.open_world_extras = 5_000;
        cfg.probe_mode = ProbeMode::JsLatency;
        cfg.duration_ms = 30_000;
        cfg.script = ScriptParams { duration_ms: 30_000.0, ..ScriptParams::default() };
        cfg.cnn_stages = vec![
            ConvStage { filters: 256, kernel: 16, pool: 4 },
            ConvStage { filters: 256, kernel: 8, pool: 4 },
            ConvStage { filters: 256, kernel: 4, pool: 4 },
        ];
        cfg.cnn_batch = 100;
        cfg.cnn_epochs = 30;
        cfg
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk-small" => Some(Self::desk_small()),
            "desk-tor" => Some(Self::desk_tor()),
            "paper-6mb" => Some(Self::paper_6mb()),
            _ => None,
        }
    }

    pub fn cache_config(&self) -> Result<CacheConfig, CliError> {
        CacheConfig::with_line_size(self.cache_sets, self.cache_ways, self.cache_line)
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn probe_config(&self) -> Result<ProbeConfig, CliError> {
        let target = self.cache_config()?;
        let order_seed = derive_seed(self.master_seed, "probe-order", &[]);
        let mut cfg = match self.probe_mode {
            ProbeMode::JsLatency => ProbeConfig::js_latency(target, order_seed),
            ProbeMode::JsTorCount => ProbeConfig::js_tor_count(target, order_seed),
            ProbeMode::NativeCounter => ProbeConfig::native_counter(target, order_seed),
        };
        cfg = cfg
            .with_slot_us(self.slot_us)
            .with_tick_us(self.tick_us)
            .with_duration_ms(self.duration_ms);
        Ok(cfg)
    }

    pub fn cost_model(&self) -> CostModel {
        CostModel { t_hit_ns: self.t_hit_ns, t_miss_ns: self.t_miss_ns, victim_access_ns: 0 }
    }

    pub fn timer(&self) -> TimerModel {
        TimerModel::new(self.timer_resolution_us * 1_000)
    }

    pub fn scenario_spec(&self) -> ScenarioSpec {
        ScenarioSpec {
            kind: self.scenario,
            response_hit_fraction: self.response_hit_fraction,
            molding_bytes: self.molding_bytes,
            molding_period_ms: self.molding_period_ms,
            drift_magnitude: self.drift_magnitude,
            // Scenario-independent: paired scenarios share every seed.
            drift_seed: derive_seed(self.master_seed, "drift-epoch", &[]),
        }
    }

    pub fn cnn_spec(&self, input_len: usize, classes: usize) -> CnnSpec {
        CnnSpec {
            input_len,
            stages: self.cnn_stages.clone(),
            dense: self.cnn_dense,
            classes,
            learning_rate: self.cnn_learning_rate,
            batch_size: self.cnn_batch,
            max_epochs: self.cnn_epochs,
            patience: self.cnn_patience,
        }
    }

    /// Total classifier classes: closed world C, open world C + 1.
    pub fn label_count(&self) -> usize {
        self.classes as usize + usize::from(self.open_world_extras > 0)
    }

    pub fn trace_file_count(&self) -> u64 {
        self.classes as u64 * self.traces_per_class as u64 + self.open_world_extras as u64
    }

    pub fn with_scenario(&self, scenario: ScenarioKind) -> Self {
        let mut cfg = self.clone();
        cfg.scenario = scenario;
        cfg
    }

    pub fn script_seed(&self) -> u64 {
        derive_seed(self.master_seed, "scripts", &[])
    }

    pub fn trace_seed(&self, class: u32, trace: u32) -> u64 {
        derive_seed(self.master_seed, "trace", &[class as u64, trace as u64])
    }

    pub fn train_seed(&self, source: &str, round: usize) -> u64 {
        derive_seed(self.master_seed, &format!("train-{source}"), &[round as u64])
    }

    /// Serializes every field as sorted key=value lines.
    pub fn to_key_values(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("name", self.name.clone());
        put("scenario", self.scenario.name().into());
        put("classes", self.classes.to_string());
        put("traces_per_class", self.traces_per_class.to_string());
        put("open_world_extras", self.open_world_extras.to_string());
        put("master_seed", self.master_seed.to_string());
        put("cache.sets", self.cache_sets.to_string());
        put("cache.ways", self.cache_ways.to_string());
        put("cache.line_size", self.cache_line.to_string());
        put("probe.mode", self.probe_mode.name().into());
        put("probe.slot_us", self.slot_us.to_string());
        put("probe.tick_us", self.tick_us.to_string());
        put("probe.duration_ms", self.duration_ms.to_string());
        put("timer.resolution_us", self.timer_resolution_us.to_string());
        put("cost.t_hit_ns", self.t_hit_ns.to_string());
        put("cost.t_miss_ns", self.t_miss_ns.to_string());
        put("masker.period_us", self.masker_period_us.to_string());
        put("scenario.response_hit_fraction", self.response_hit_fraction.to_string());
        put("scenario.molding_bytes", self.molding_bytes.to_string());
        put("scenario.molding_period_ms", self.molding_period_ms.to_string());
        put("scenario.drift_magnitude", self.drift_magnitude.to_string());
        let s = &self.script;
        put("script.phases_min", s.phases_min.to_string());
        put("script.phases_max", s.phases_max.to_string());
        put("script.net_phases_min", s.net_phases_min.to_string());
        put("script.net_phases_max", s.net_phases_max.to_string());
        put("script.net_ws_min", s.net_working_set.0.to_string());
        put("script.net_ws_max", s.net_working_set.1.to_string());
        put("script.render_ws_min", s.render_working_set.0.to_string());
        put("script.render_ws_max", s.render_working_set.1.to_string());
        put("script.net_rate_min", s.net_rate.0.to_string());
        put("script.net_rate_max", s.net_rate.1.to_string());
        put("script.render_rate_min", s.render_rate.0.to_string());
        put("script.render_rate_max", s.render_rate.1.to_string());
        put("script.net_bytes_per_line", s.net_bytes_per_line.to_string());
        put("script.out_fraction", s.out_fraction.to_string());
        put("script.record_bytes", s.record_bytes.to_string());
        put("script.request_bytes", s.request_bytes.to_string());
        put("script.jitter", s.jitter.to_string());
        put("script.molded_ws", s.molded_working_set.to_string());
        put("script.molded_rate", s.molded_rate.to_string());
        put("script.region_lines", s.region_lines.to_string());
        let stages: Vec<String> = self
            .cnn_stages
            .iter()
            .map(|st| format!("{}x{}p{}", st.filters, st.kernel, st.pool))
            .collect();
        put("cnn.stages", stages.join(","));
        put("cnn.dense", self.cnn_dense.to_string());
        put("cnn.learning_rate", self.cnn_learning_rate.to_string());
        put("cnn.batch_size", self.cnn_batch.to_string());
        put("cnn.max_epochs", self.cnn_epochs.to_string());
        put("cnn.patience", self.cnn_patience.to_string());
        put("knn.k", self.knn_k.to_string());
        put("eval.folds", self.folds.to_string());
        put("eval.rounds", self.rounds.to_string());
        kv
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_key_values() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Applies one key=value override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
            v.parse().map_err(|_| CliError::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "preset" => {
                *self = Self::preset(value)
                    .ok_or_else(|| CliError::Config(format!("unknown preset {value:?}")))?;
            }
            "name" => self.name = value.to_string(),
            "scenario" => {
                self.scenario = ScenarioKind::parse(value)
                    .ok_or_else(|| CliError::Config(format!("unknown scenario {value:?}")))?;
            }
            "classes" => self.classes = parse(key, value)?,
            "traces_per_class" => self.traces_per_class = parse(key, value)?,
            "open_world_extras" => self.open_world_extras = parse(key, value)?,
            "master_seed" => self.master_seed = parse(key, value)?,
            "cache.sets" => self.cache_sets = parse(key, value)?,
            "cache.ways" => self.cache_ways = parse(key, value)?,
            "cache.line_size" => self.cache_line = parse(key, value)?,
            "probe.mode" => {
                self.probe_mode = match value {
                    "js-latency" => ProbeMode::JsLatency,
                    "js-tor-count" => ProbeMode::JsTorCount,
                    "native-counter" => ProbeMode::NativeCounter,
                    _ => return Err(CliError::Config(format!("unknown probe mode {value:?}"))),
                }
            }
            "probe.slot_us" => self.slot_us = parse(key, value)?,
            "probe.tick_us" => self.tick_us = parse(key, value)?,
            "probe.duration_ms" => {
                self.duration_ms = parse(key, value)?;
                self.script.duration_ms = self.duration_ms as f64;
            }
            "timer.resolution_us" => self.timer_resolution_us = parse(key, value)?,
            "cost.t_hit_ns" => self.t_hit_ns = parse(key, value)?,
            "cost.t_miss_ns" => self.t_miss_ns = parse(key, value)?,
            "masker.period_us" => self.masker_period_us = parse(key, value)?,
            "scenario.response_hit_fraction" => self.response_hit_fraction = parse(key, value)?,
            "scenario.molding_bytes" => self.molding_bytes = parse(key, value)?,
            "scenario.molding_period_ms" => self.molding_period_ms = parse(key, value)?,
            "scenario.drift_magnitude" => self.drift_magnitude = parse(key, value)?,
            "script.phases_min" => self.script.phases_min = parse(key, value)?,
            "script.phases_max" => self.script.phases_max = parse(key, value)?,
            "script.net_phases_min" => self.script.net_phases_min = parse(key, value)?,
            "script.net_phases_max" => self.script.net_phases_max = parse(key, value)?,
            "script.net_ws_min" => self.script.net_working_set.0 = parse(key, value)?,
            "script.net_ws_max" => self.script.net_working_set.1 = parse(key, value)?,
            "script.render_ws_min" => self.script.render_working_set.0 = parse(key, value)?,
            "script.render_ws_max" => self.script.render_working_set.1 = parse(key, value)?,
            "script.net_rate_min" => self.script.net_rate.0 = parse(key, value)?,
            "script.net_rate_max" => self.script.net_rate.1 = parse(key, value)?,
            "script.render_rate_min" => self.script.render_rate.0 = parse(key, value)?,
            "script.render_rate_max" => self.script.render_rate.1 = parse(key, value)?,
            "script.net_bytes_per_line" => self.script.net_bytes_per_line = parse(key, value)?,
            "script.out_fraction" => self.script.out_fraction = parse(key, value)?,
            "script.record_bytes" => self.script.record_bytes = parse(key, value)?,
            "script.request_bytes" => self.script.request_bytes = parse(key, value)?,
            "script.jitter" => self.script.jitter = parse(key, value)?,
            "script.molded_ws" => self.script.molded_working_set = parse(key, value)?,
            "script.molded_rate" => self.script.molded_rate = parse(key, value)?,
            "script.region_lines" => self.script.region_lines = parse(key, value)?,
            "cnn.stages" => {
                self.cnn_stages = parse_stages(value)?;
            }
            "cnn.dense" => self.cnn_dense = parse(key, value)?,
            "cnn.learning_rate" => self.cnn_learning_rate = parse(key, value)?,
            "cnn.batch_size" => self.cnn_batch = parse(key, value)?,
            "cnn.max_epochs" => self.cnn_epochs = parse(key, value)?,
            "cnn.patience" => self.cnn_patience = parse(key, value)?,
            "knn.k" => self.knn_k = parse(key, value)?,
            "eval.folds" => self.folds = parse(key, value)?,
            "eval.rounds" => self.rounds = parse(key, value)?,
            _ => return Err(CliError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a preset name, or a key=value file (optionally starting from a
    /// `preset =` line).
    pub fn resolve(spec: &str) -> Result<Self, CliError> {
        if let Some(cfg) = Self::preset(spec) {
            return Ok(cfg);
        }
        let path = Path::new(spec);
        if !path.exists() {
            return Err(CliError::Config(format!(
                "{spec:?} is neither a preset (desk-small, desk-tor, paper-6mb) nor a config file"
            )));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("reading {spec:?}: {e}")))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::desk_small();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!("malformed config line {raw:?}")));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}

/// Stage syntax: `FILTERSxKERNELpPOOL`, comma separated.
fn parse_stages(value: &str) -> Result<Vec<ConvStage>, CliError> {
    let mut stages = Vec::new();
    for part in value.split(',') {
        let err = || CliError::Config(format!("bad stage spec {part:?} (want e.g. 32x16p4)"));
        let (filters, rest) = part.trim().split_once('x').ok_or_else(err)?;
        let (kernel, pool) = rest.split_once('p').ok_or_else(err)?;
        stages.push(ConvStage {
            filters: filters.parse().map_err(|_| err())?,
            kernel: kernel.parse().map_err(|_| err())?,
            pool: pool.parse().map_err(|_| err())?,
        });
    }
    Ok(stages)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve() {
        for name in ["desk-small", "desk-tor", "paper-6mb"] {
            let cfg = ExperimentConfig::resolve(name).unwrap();
            assert_eq!(cfg.name, name);
            cfg.cache_config().unwrap();
            cfg.probe_config().unwrap();
        }
    }

    #[test]
    fn paper_profile_has_paper_shapes() {
        let cfg = ExperimentConfig::paper_6mb();
        assert_eq!(cfg.trace_file_count(), 15_000);
        assert_eq!(cfg.classes * cfg.traces_per_class, 10_000);
        let probe = cfg.probe_config().unwrap();
        assert_eq!(probe.trace_len(), 15_000);
    }

    #[test]
    fn round_trips_through_text() {
        let cfg = ExperimentConfig::desk_tor();
        let text = cfg.to_text();
        let back = ExperimentConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let text = "preset = desk-small\nclasses = 5\ncnn.stages = 8x4p2\n# comment\n";
        let cfg = ExperimentConfig::from_text(text).unwrap();
        assert_eq!(cfg.classes, 5);
        assert_eq!(cfg.cnn_stages, vec![ConvStage { filters: 8, kernel: 4, pool: 2 }]);
        assert_eq!(cfg.traces_per_class, 30);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(
            ExperimentConfig::from_text("nope = 3"),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_text("scenario = bogus"),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn scenario_variants_share_seeds() {
        let cfg = ExperimentConfig::desk_small();
        let masked = cfg.with_scenario(ScenarioKind::Masked);
        assert_eq!(cfg.trace_seed(3, 7), masked.trace_seed(3, 7));
        assert_eq!(cfg.script_seed(), masked.script_seed());
        assert_eq!(
            cfg.probe_config().unwrap().order_seed,
            masked.probe_config().unwrap().order_seed
        );
    }
}
