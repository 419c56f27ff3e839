//! Hybrid routing on hand-picked distributions: shows how normalized Tsallis
//! entropy dispatches each token to soft routing or to Top-(p,k) selection.
//!
//! Run with: cargo run --example route_demo

use molelab::entropy::{EntropicIndex, ProbDist};
use molelab::routing::{hybrid_route, RoutingConfig};

fn main() {
    let cfg = RoutingConfig {
        n_experts: 6,
        top_p: 0.75,
        keep_top_k: 2,
        entropy_threshold: 0.9,
        entropic_index: EntropicIndex::new(1.1).unwrap(),
    };
    println!(
        "config: N={}, p={}, k={}, threshold={}, q={}\n",
        cfg.n_experts,
        cfg.top_p,
        cfg.keep_top_k,
        cfg.entropy_threshold,
        cfg.entropic_index.value()
    );

    let cases: Vec<(&str, Vec<f64>)> = vec![
        ("uniform", vec![1.0 / 6.0; 6]),
        ("mild tilt", vec![0.25, 0.21, 0.18, 0.14, 0.12, 0.10]),
        ("two strong", vec![0.42, 0.38, 0.08, 0.05, 0.04, 0.03]),
        ("one dominant", vec![0.82, 0.06, 0.04, 0.03, 0.03, 0.02]),
        ("near one-hot", vec![0.97, 0.01, 0.005, 0.005, 0.005, 0.005]),
    ];

    println!(
        "{:<14} {:>9} {:>14} {:>12}   weights on selected",
        "distribution", "entropy", "strategy", "selected"
    );
    for (name, p) in cases {
        let dist = ProbDist::new(p).unwrap();
        let decision = hybrid_route(&dist, &cfg).unwrap();
        let weights: Vec<String> = decision
            .selected
            .iter()
            .map(|&i| format!("{}:{:.3}", i, decision.weights[i]))
            .collect();
        println!(
            "{:<14} {:>9.4} {:>14} {:>12}   {}",
            name,
            decision.entropy_norm,
            decision.strategy.to_string(),
            format!("{:?}", decision.selected),
            weights.join(" ")
        );
    }

    // The same peaked distribution under different thresholds.
    println!("\nthreshold sweep on [0.82, 0.06, 0.04, 0.03, 0.03, 0.02]:");
    let dist = ProbDist::new(vec![0.82, 0.06, 0.04, 0.03, 0.03, 0.02]).unwrap();
    for thr in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let cfg = RoutingConfig {
            entropy_threshold: thr,
            ..cfg.clone()
        };
        let decision = hybrid_route(&dist, &cfg).unwrap();
        println!(
            "  threshold {:>4}: {} (entropy {:.4})",
            thr, decision.strategy, decision.entropy_norm
        );
    }
}
