//! A small ablation grid over the entropic index q and the entropy-loss
//! coefficient beta, printed as a summary table. The full reference grids
//! ship as preset configs under presets/.
//!
//! Run with: cargo run --release --example ablation_sweep

use molelab::config::ExperimentConfig;
use molelab::metrics::strategy_mix;
use molelab::trainer::{ablate, GridAxis};

fn main() {
    let mut cfg = ExperimentConfig::two_cluster_demo();
    // Shorten the runs: the sweep has 8 grid points.
    cfg.train.steps = 600;
    let base = cfg.to_run_spec();

    let grid = vec![
        GridAxis {
            name: "q".into(),
            values: vec![1.0, 1.1, 1.2, 1.4],
        },
        GridAxis {
            name: "beta".into(),
            values: vec![0.0, 1e-2],
        },
    ];
    println!(
        "sweeping q x beta on the two-cluster task ({} steps each)...\n",
        base.train.steps
    );
    let rows = ablate(&base, &grid).expect("grid run");

    println!(
        "{:>5} {:>7} {:>12} {:>15} {:>8} {:>8} {:>8}",
        "q", "beta", "final loss", "final entropy", "soft%", "top-p%", "fallb%"
    );
    for row in &rows {
        let settings: std::collections::HashMap<&str, f64> = row
            .settings
            .iter()
            .map(|(name, v)| (name.as_str(), *v))
            .collect();
        let last = row.report.steps.last().unwrap();
        let mix = strategy_mix(&row.report.trace).unwrap();
        println!(
            "{:>5} {:>7} {:>12.4} {:>15.4} {:>8.1} {:>8.1} {:>8.1}",
            settings["q"],
            settings["beta"],
            last.total_loss,
            row.report.final_entropy_mean,
            100.0 * mix.soft,
            100.0 * mix.top_p,
            100.0 * mix.top_k_fallback
        );
    }
    println!("\n(q = 1.0 rows run the Shannon-entropy path end to end)");
}
