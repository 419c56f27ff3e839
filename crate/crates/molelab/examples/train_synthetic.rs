//! End-to-end training on the two-cluster synthetic task: watch router
//! entropy collapse, tokens migrate from soft routing to sparse selection,
//! and each cluster settle on its own expert.
//!
//! Run with: cargo run --release --example train_synthetic

use std::collections::HashMap;

use molelab::config::ExperimentConfig;
use molelab::metrics::{avg_activated, strategy_mix};
use molelab::trainer::{generate_task, run_experiment};

fn main() {
    let cfg = ExperimentConfig::two_cluster_demo();
    let spec = cfg.to_run_spec();
    println!(
        "task: {} clusters, {} -> {}, {} samples/cluster",
        spec.task.n_clusters,
        spec.task.input_dim,
        spec.task.output_dim,
        spec.task.samples_per_cluster
    );
    println!(
        "layer: {} experts rank {}, routing p={} k={} threshold={} q={}",
        spec.train.routing.n_experts,
        spec.dims.rank,
        spec.train.routing.top_p,
        spec.train.routing.keep_top_k,
        spec.train.routing.entropy_threshold,
        spec.train.routing.entropic_index.value()
    );
    println!(
        "training: {} steps of batch {}, lr {}, seed {}\n",
        spec.train.steps, spec.train.batch_size, spec.train.learning_rate, spec.train.seed
    );

    let report = run_experiment(&spec).expect("training run");

    println!("round  mean loss    std      soft%");
    let soft_rounds = report.soft_fraction_per_round();
    for (i, (round, soft)) in report.rounds.iter().zip(&soft_rounds).enumerate() {
        println!(
            "{:>5}  {:>9.4} {:>8.4} {:>8.2}{}",
            i,
            round.mean,
            round.std,
            100.0 * soft,
            if round.complete { "" } else { "  (partial)" }
        );
    }

    println!(
        "\nmean normalized router entropy: {:.4} -> {:.4}",
        report.initial_entropy_mean, report.final_entropy_mean
    );
    let mix = strategy_mix(&report.trace).unwrap();
    println!(
        "final strategy mix: soft {:.1}%, top-p {:.1}%, top-k fallback {:.1}%",
        100.0 * mix.soft,
        100.0 * mix.top_p,
        100.0 * mix.top_k_fallback
    );
    let activated = avg_activated(&report.trace).unwrap();
    println!("average activated experts: {:.3}", activated[&0]);

    // Which expert does each cluster prefer after training?
    let data = generate_task(&spec.task).unwrap();
    let mut votes: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (record, sample) in report.trace.records.iter().zip(&data.samples) {
        *votes
            .entry(sample.cluster)
            .or_default()
            .entry(record.argmax_expert)
            .or_default() += 1;
    }
    let mut clusters: Vec<_> = votes.into_iter().collect();
    clusters.sort_by_key(|(c, _)| *c);
    for (cluster, counts) in clusters {
        let total: usize = counts.values().sum();
        let (&expert, &n) = counts.iter().max_by_key(|(_, &n)| n).unwrap();
        println!(
            "cluster {cluster}: expert {expert} wins the argmax for {n}/{total} tokens ({:.1}%)",
            100.0 * n as f64 / total as f64
        );
    }
}
