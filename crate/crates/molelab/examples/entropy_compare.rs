//! Tsallis vs Shannon entropy, side by side: values across the entropic
//! index, agreement at the q -> 1 limit, and the gradient-stability contrast
//! that motivates using Tsallis entropy as a regularizer.
//!
//! Run with: cargo run --example entropy_compare

use molelab::entropy::{
    normalized_tsallis, shannon_entropy, shannon_grad, tsallis_entropy, tsallis_grad,
    EntropicIndex, ProbDist,
};

fn q(v: f64) -> EntropicIndex {
    EntropicIndex::new(v).unwrap()
}

fn main() {
    let dists: Vec<(&str, Vec<f64>)> = vec![
        ("uniform(6)", vec![1.0 / 6.0; 6]),
        ("tilted", vec![0.4, 0.3, 0.15, 0.1, 0.03, 0.02]),
        ("peaked", vec![0.9, 0.05, 0.03, 0.01, 0.005, 0.005]),
    ];

    println!("entropy values across the entropic index (S_1 = Shannon):");
    println!(
        "{:<12} {:>9} {:>9} {:>9} {:>9} {:>11}",
        "dist", "S_1.0", "S_1.1", "S_1.4", "S_2.0", "norm S_1.1"
    );
    for (name, p) in &dists {
        let d = ProbDist::new(p.clone()).unwrap();
        println!(
            "{:<12} {:>9.5} {:>9.5} {:>9.5} {:>9.5} {:>11.5}",
            name,
            tsallis_entropy(&d, q(1.0)),
            tsallis_entropy(&d, q(1.1)),
            tsallis_entropy(&d, q(1.4)),
            tsallis_entropy(&d, q(2.0)),
            normalized_tsallis(&d, q(1.1)).unwrap(),
        );
    }

    println!("\nq -> 1 limit (relative gap to Shannon):");
    let d = ProbDist::new(vec![0.4, 0.3, 0.15, 0.1, 0.03, 0.02]).unwrap();
    let h = shannon_entropy(&d);
    for qv in [1.5, 1.1, 1.01, 1.001, 1.000001] {
        let s = tsallis_entropy(&d, q(qv));
        println!(
            "  q = {qv:<9}: S_q = {s:.9}   |S_q - H|/H = {:.3e}",
            (s - h).abs() / h
        );
    }

    println!("\ngradient magnitudes on [p, 1-p] as p -> 0 (q = 1.1):");
    println!(
        "{:>9} {:>16} {:>16}   (Tsallis is bounded by q/(q-1) = 11)",
        "p", "|dS_tsallis/dp|", "|dH/dp|"
    );
    let mut p = 0.1;
    while p >= 1e-8 {
        let d = ProbDist::new(vec![p, 1.0 - p]).unwrap();
        let tg = tsallis_grad(&d, q(1.1)).unwrap();
        let sg = shannon_grad(&d).unwrap();
        println!(
            "{:>9.0e} {:>16.4} {:>16.4}",
            p,
            tg.get(0).abs(),
            sg.get(0).abs()
        );
        p /= 10.0;
    }
}
