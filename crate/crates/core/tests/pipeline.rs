//! End-to-end use of the public API on a tiny configuration.

use droppeft_core::config::ExperimentConfig;
use droppeft_core::data::{generate, DataConfig, Dataset};
use droppeft_core::federation::{read_metrics_csv, run_experiment, time_to_accuracy, Simulation};
use droppeft_core::model::TransformerStack;

fn tiny(extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{
            "seed": 21,
            "model": {{"layers": 4, "hidden": 8, "heads": 2, "ffn": 16, "vocab": 16, "seq_len": 8, "classes": 2, "peft_width": 2}},
            "data": {{"examples": 240, "signal": 0.4}},
            "pretrain": {{"steps": 20}},
            "partition": {{"total_devices": 6, "alpha": 0.5}},
            "federation": {{"max_rounds": 6, "devices_per_round": 3, "stop_at_target": false}}
            {extra}
        }}"#
    ))
    .unwrap()
}

#[test]
fn metrics_csv_round_trips_and_matches_summary() {
    let result = run_experiment(&tiny(r#", "ptls": {"enabled": true}"#)).unwrap();
    let csv = result.metrics_csv().unwrap();
    let rows = read_metrics_csv(csv.as_slice()).unwrap();
    assert_eq!(rows, result.rows().collect::<Vec<_>>());
    assert_eq!(rows.len(), 6);
    let s = &result.summary;
    assert_eq!(s.total_flops, rows.iter().map(|r| r.flops).sum::<u64>());
    assert_eq!(s.total_traffic_bytes, rows.iter().map(|r| r.traffic_bytes).sum::<u64>());
    assert_eq!(s.time_to_accuracy_s, time_to_accuracy(&rows, s.target_accuracy));
    assert!(rows.windows(2).all(|w| w[1].wall_clock_s > w[0].wall_clock_s));
    assert!((0.0..=1.0).contains(&s.final_accuracy));
}

#[test]
fn frozen_base_survives_training() {
    let config = tiny("");
    let mut sim = Simulation::new(&config).unwrap();
    let before = sim.global().clone();
    for _ in 0..6 {
        sim.run_round().unwrap();
    }
    assert!(sim.global().base_equals(&before));
    assert_ne!(sim.global().head_flat(), before.head_flat());
}

#[test]
fn effective_config_reproduces_run() {
    let config = tiny(r#", "stld": {"fixed": {"distribution": "decay", "avg_rate": 0.4}}"#);
    let first = run_experiment(&config).unwrap();
    let echoed = serde_json::to_string(&first.config).unwrap();
    let second = run_experiment(&ExperimentConfig::from_json(&echoed).unwrap()).unwrap();
    assert_eq!(first.metrics_csv().unwrap(), second.metrics_csv().unwrap());
    assert!(first.rows().all(|r| r.arm_id == "decay@0.4"));
}

#[test]
fn dataset_and_checkpoint_round_trip() {
    let ds = generate(16, 8, 2, &DataConfig { examples: 50, signal: 0.3 }, 4).unwrap();
    let mut buf = Vec::new();
    ds.write_jsonl(&mut buf).unwrap();
    assert_eq!(Dataset::read_jsonl(buf.as_slice(), 16, 2).unwrap(), ds);

    let model = TransformerStack::new(tiny("").model, 9).unwrap();
    let mut buf = Vec::new();
    model.write_checkpoint(&mut buf).unwrap();
    let back = TransformerStack::read_checkpoint(buf.as_slice()).unwrap();
    assert!(back.base_equals(&model));
    assert_eq!(back.head_flat(), model.head_flat());
}
