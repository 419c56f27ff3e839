//! Export a routing trace to CSV and JSON, read both back, and confirm the
//! round trip is lossless down to the last bit of every float.
//!
//! Run with: cargo run --example trace_export

use molelab::config::ExperimentConfig;
use molelab::metrics::{export_trace, import_trace, ExportFormat};
use molelab::trainer::run_experiment;

fn main() {
    let mut cfg = ExperimentConfig::two_cluster_demo();
    cfg.train.steps = 200;
    cfg.task.samples_per_cluster = 16;
    let report = run_experiment(&cfg.to_run_spec()).expect("short run");
    let trace = &report.trace;
    println!("trace has {} records", trace.len());

    let dir = std::env::temp_dir().join("molelab_trace_export");
    std::fs::create_dir_all(&dir).expect("mkdir");
    let csv_path = dir.join("trace.csv");
    let json_path = dir.join("trace.json");

    export_trace(trace, ExportFormat::Csv, &csv_path, None).expect("csv export");
    let echo = cfg.echo_json().expect("echo");
    export_trace(trace, ExportFormat::Json, &json_path, Some(echo)).expect("json export");
    println!("wrote {}", csv_path.display());
    println!("wrote {} (with config echo)", json_path.display());

    for (format, path) in [
        (ExportFormat::Csv, &csv_path),
        (ExportFormat::Json, &json_path),
    ] {
        let back = import_trace(format, path).expect("import");
        assert_eq!(back.len(), trace.len());
        let mut exact = true;
        for (a, b) in trace.records.iter().zip(&back.records) {
            exact &= a.token_id == b.token_id
                && a.layer_id == b.layer_id
                && a.strategy == b.strategy
                && a.selected == b.selected
                && a.argmax_expert == b.argmax_expert
                && a.entropy_norm.to_bits() == b.entropy_norm.to_bits()
                && a.weights
                    .iter()
                    .zip(&b.weights)
                    .all(|(x, y)| x.to_bits() == y.to_bits());
        }
        println!(
            "{:?} round trip: {}",
            path.file_name().unwrap(),
            if exact { "bit-exact" } else { "LOSSY" }
        );
        assert!(exact);
    }

    let head: Vec<String> = std::fs::read_to_string(&csv_path)
        .unwrap()
        .lines()
        .take(3)
        .map(str::to_string)
        .collect();
    println!("\nfirst CSV lines:");
    for line in head {
        println!("  {line}");
    }
}
